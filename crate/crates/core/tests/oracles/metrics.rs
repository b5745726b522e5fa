//! Retrieval ranking and metrics against exhaustive recomputation on random galleries.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smup_core::retrieval::eval::{report, QueryOutcome};
use smup_core::retrieval::metrics::{accuracy_at_q, mean_average_precision, precision_at_k, rank_stats};
use smup_core::retrieval::RetrievalIndex;

use super::{close, holds, Case, Outcome};

pub const GALLERIES: u64 = 100;
const TOL: f64 = 1e-12;

pub fn cases() -> Vec<Case> {
    vec![
        ("average precision examples", ap_examples),
        ("precision examples", precision_examples),
        ("accuracy examples", accuracy_examples),
        ("rank statistics examples", rank_stat_examples),
        ("random galleries against brute force", random_galleries),
    ]
}

fn ap_examples() -> Outcome {
    close("rank 2 of 4", mean_average_precision(&[vec![false, true, false, false]]).0, 0.5, TOL)?;
    close("ranks 1 and 3", mean_average_precision(&[vec![true, false, true, false]]).0, (1.0 + 2.0 / 3.0) / 2.0, TOL)?;
    close("all first", mean_average_precision(&[vec![true, true, false]]).0, 1.0, TOL)
}

fn precision_examples() -> Outcome {
    let r = vec![true, false, false, true, false, true];
    close("2 in top 5", precision_at_k(&[r], 5).map_err(|e| e.to_string())?, 0.4, TOL)?;
    let top = vec![vec![true, false], vec![true, true]];
    close("k = 1", precision_at_k(&top, 1).map_err(|e| e.to_string())?, 1.0, TOL)
}

fn accuracy_examples() -> Outcome {
    close("[1,3,12] q=10", accuracy_at_q(&[1, 3, 12], 10), 2.0 / 3.0, TOL)?;
    close("q = N", accuracy_at_q(&[1, 5, 7], 7), 1.0, TOL)?;
    close("all first", accuracy_at_q(&[1, 1, 1], 1), 1.0, TOL)
}

fn rank_stat_examples() -> Outcome {
    let s = rank_stats(&[vec![1, 1], vec![1, 1, 1]]).map_err(|e| e.to_string())?;
    close("perfect r", s.r_avg, 1.0, TOL)?;
    close("perfect v", s.v_avg, 0.0, TOL)?;
    let s = rank_stats(&[vec![1, 3, 5], vec![2, 2, 2]]).map_err(|e| e.to_string())?;
    close("r_avg", s.r_avg, 2.5, TOL)?;
    close("v_avg", s.v_avg, (8.0 / 3.0 + 0.0) / 2.0, TOL)?;
    let s = rank_stats(&[vec![4, 4, 4]]).map_err(|e| e.to_string())?;
    close("constant r", s.r_avg, 4.0, TOL)?;
    close("constant v", s.v_avg, 0.0, TOL)
}

struct Gallery {
    rows: Vec<Vec<f32>>,
    ids: Vec<String>,
    categories: Vec<usize>,
    /// (query embedding, own photo row)
    queries: Vec<(Vec<f32>, usize)>,
}

fn gallery(seed: u64) -> Gallery {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.random_range(2..=50);
    let d = r.random_range(1..=8);
    let n_cat = r.random_range(1..=5);
    // A coarse grid in some galleries produces exact distance ties.
    let grid = r.random_bool(0.3);
    let coord = |r: &mut ChaCha8Rng| {
        let v: f32 = r.random_range(-1.0..1.0);
        if grid {
            (v * 2.0).round() / 2.0
        } else {
            v
        }
    };
    let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| coord(&mut r)).collect()).collect();
    // Ids are shuffled against row order so the tie-break is exercised.
    let mut labels: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        labels.swap(i, r.random_range(0..=i));
    }
    let ids = labels.iter().map(|l| format!("p{l:03}")).collect();
    let categories = (0..n).map(|_| r.random_range(0..n_cat)).collect();
    let mut queries = Vec::new();
    for own in 0..n {
        for _ in 0..r.random_range(1..=3) {
            let noise = if grid { 0.0 } else { 0.6 };
            let q = rows[own].iter().map(|&v| v + noise * r.random_range(-1.0f32..1.0)).collect();
            queries.push((q, own));
        }
    }
    Gallery { rows, ids, categories, queries }
}

/// 1-based rank of every row: one plus the number of rows strictly ahead of it.
fn brute_ranks(g: &Gallery, q: &[f32]) -> Vec<usize> {
    let dist: Vec<f64> = g
        .rows
        .iter()
        .map(|row| {
            let mut s = 0.0;
            for (a, b) in q.iter().zip(row) {
                let diff = *a as f64 - *b as f64;
                s += diff * diff;
            }
            s
        })
        .collect();
    (0..g.rows.len())
        .map(|j| {
            1 + (0..g.rows.len())
                .filter(|&i| dist[i] < dist[j] || (dist[i] == dist[j] && g.ids[i] < g.ids[j]))
                .count()
        })
        .collect()
}

fn random_galleries() -> Outcome {
    for seed in 0..GALLERIES {
        let g = gallery(seed);
        let n = g.rows.len();
        let cats: Vec<String> = g.categories.iter().map(|c| c.to_string()).collect();
        let index = RetrievalIndex::new(g.rows.clone(), g.ids.clone(), cats.clone(), g.ids.clone())
            .map_err(|e| e.to_string())?;
        let mut outcomes = Vec::new();
        let (mut ap_sum, mut ap_n, mut no_rel) = (0.0, 0, 0);
        let k = (seed as usize % n) + 1;
        let mut p_sum = 0.0;
        let mut true_ranks = Vec::new();
        let mut per_photo: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (q, own) in &g.queries {
            let ranks = brute_ranks(&g, q);
            let hits = index.rank(q).map_err(|e| e.to_string())?;
            for (pos, h) in hits.iter().enumerate() {
                holds(ranks[h.row] == pos + 1, || format!("gallery {seed}: row {} at {} vs {}", h.row, pos + 1, ranks[h.row]))?;
            }
            let relevant = |j: usize| g.categories[j] == g.categories[*own];
            let rel_ranks: Vec<usize> = (0..n).filter(|&j| relevant(j)).map(|j| ranks[j]).collect();
            if rel_ranks.is_empty() {
                no_rel += 1;
            } else {
                let ap: f64 = rel_ranks
                    .iter()
                    .map(|&rj| rel_ranks.iter().filter(|&&ri| ri <= rj).count() as f64 / rj as f64)
                    .sum::<f64>()
                    / rel_ranks.len() as f64;
                ap_sum += ap;
                ap_n += 1;
            }
            p_sum += rel_ranks.iter().filter(|&&ri| ri <= k).count() as f64 / k as f64;
            true_ranks.push(ranks[*own]);
            per_photo.entry(*own).or_default().push(ranks[*own]);
            outcomes.push(QueryOutcome {
                relevance: hits.iter().map(|h| relevant(h.row)).collect(),
                true_rank: hits.iter().position(|h| h.row == *own).expect("full ranking") + 1,
                photo: *own,
            });
        }
        let nq = g.queries.len() as f64;
        let rep = report("oracle", &outcomes, n, k).map_err(|e| e.to_string())?;
        let acc = |q: usize| true_ranks.iter().filter(|&&r| r <= q).count() as f64 / nq;
        let (mut r_sum, mut v_sum, mut v_n) = (0.0, 0.0, 0);
        for ranks in per_photo.values() {
            let m = ranks.len() as f64;
            let mean = ranks.iter().sum::<usize>() as f64 / m;
            r_sum += mean;
            if ranks.len() > 1 {
                v_sum += ranks.iter().map(|&r| (r as f64 - mean) * (r as f64 - mean)).sum::<f64>() / m;
                v_n += 1;
            }
        }
        let tag = |m: &str| format!("gallery {seed} {m}");
        close(&tag("map"), rep.map, if ap_n == 0 { 0.0 } else { ap_sum / ap_n as f64 }, TOL)?;
        holds(rep.queries_without_relevant == no_rel, || tag("skipped queries"))?;
        holds(rep.precision_k == k, || tag("precision cutoff"))?;
        close(&tag("p@k"), rep.precision_at_k, p_sum / nq, TOL)?;
        close(&tag("acc@1"), rep.acc_at_1, acc(1), TOL)?;
        close(&tag("acc@5"), rep.acc_at_5, acc(5), TOL)?;
        close(&tag("acc@10"), rep.acc_at_10, acc(10), TOL)?;
        close(&tag("r_avg"), rep.r_avg, r_sum / per_photo.len() as f64, TOL)?;
        close(&tag("v_avg"), rep.v_avg, if v_n == 0 { 0.0 } else { v_sum / v_n as f64 }, TOL)?;
    }
    Ok(())
}
