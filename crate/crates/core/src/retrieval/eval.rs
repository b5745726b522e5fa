use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::index::RetrievalIndex;
use super::metrics::{accuracy_at_q, mean_average_precision, precision_at_k, rank_stats};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::Model;

pub const DEFAULT_PRECISION_K: usize = 200;

/// Invariant codes of the given photos.
pub fn embed_gallery(model: &Model, ds: &Dataset, photos: &[usize]) -> Result<RetrievalIndex> {
    if photos.is_empty() {
        return Err(Error::Index("empty gallery".into()));
    }
    let imgs: Vec<&ImageTensor> = photos.iter().map(|&p| ds.photo(p)).collect::<Result<_>>()?;
    let rows = model.embed(&imgs)?;
    let rec = |f: fn(&crate::data::PhotoRecord) -> &String| photos.iter().map(|&p| f(&ds.photos[p]).clone()).collect();
    RetrievalIndex::new(rows, rec(|r| &r.id), rec(|r| &r.category), rec(|r| &r.instance))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub num_queries: usize,
    pub gallery_size: usize,
    pub map: f64,
    pub precision_k: usize,
    pub precision_at_k: f64,
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub acc_at_10: f64,
    pub r_avg: f64,
    pub v_avg: f64,
    pub queries_without_relevant: usize,
    pub photos_with_single_style: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
}

/// Per-query inputs to the metrics.
pub struct QueryOutcome {
    /// Relevance of the gallery in retrieved order.
    pub relevance: Vec<bool>,
    /// 1-based rank of the query's own photo.
    pub true_rank: usize,
    /// Gallery row of the query's own photo.
    pub photo: usize,
}

pub fn report(split: &str, outcomes: &[QueryOutcome], gallery_size: usize, k_cap: usize) -> Result<EvalReport> {
    let rankings: Vec<Vec<bool>> = outcomes.iter().map(|o| o.relevance.clone()).collect();
    let ranks: Vec<usize> = outcomes.iter().map(|o| o.true_rank).collect();
    let (map, skipped) = mean_average_precision(&rankings);
    let k = k_cap.min(DEFAULT_PRECISION_K).min(gallery_size).max(1);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for o in outcomes {
        groups.entry(o.photo).or_default().push(o.true_rank);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let stats = rank_stats(&groups)?;
    Ok(EvalReport {
        split: split.to_string(),
        num_queries: outcomes.len(),
        gallery_size,
        map,
        precision_k: k,
        precision_at_k: precision_at_k(&rankings, k)?,
        acc_at_1: accuracy_at_q(&ranks, 1),
        acc_at_5: accuracy_at_q(&ranks, 5),
        acc_at_10: accuracy_at_q(&ranks, 10),
        r_avg: stats.r_avg,
        v_avg: stats.v_avg,
        queries_without_relevant: skipped,
        photos_with_single_style: stats.skipped_variance,
        checkpoint_sha256: None,
    })
}

/// Queries every sketch of `pairs` against the photos those pairs reference.
pub fn evaluate(model: &Model, ds: &Dataset, pairs: &[usize], split: &str, k_cap: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Contract(format!("split {split} has no pairs")));
    }
    let mut photos: Vec<usize> = pairs.iter().map(|&p| ds.pairs[p].photo).collect();
    photos.sort_unstable();
    photos.dedup();
    let index = embed_gallery(model, ds, &photos)?;
    let sketches: Vec<&ImageTensor> = pairs.iter().map(|&p| ds.sketch(p)).collect::<Result<_>>()?;
    let queries = model.embed(&sketches)?;
    let outcomes = pairs
        .iter()
        .zip(&queries)
        .map(|(&pair, q)| {
            let hits = index.rank(q)?;
            let own = photos.binary_search(&ds.pairs[pair].photo).expect("gallery holds every pair's photo");
            let true_rank = hits.iter().position(|h| h.row == own).expect("full ranking") + 1;
            let relevance = hits.iter().map(|h| ds.is_relevant(pair, photos[h.row])).collect();
            Ok(QueryOutcome { relevance, true_rank, photo: own })
        })
        .collect::<Result<Vec<_>>>()?;
    report(split, &outcomes, index.len(), k_cap)
}
