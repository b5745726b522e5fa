//! Oracle cases shared by the crate's integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod closed_form;
pub mod metrics;

pub type Outcome = Result<(), String>;
pub type Case = (&'static str, fn() -> Outcome);

pub fn close(name: &str, got: f64, want: f64, tol: f64) -> Outcome {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, want {want} (tol {tol})"))
    }
}

pub fn holds(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Runs every case; returns the failures.
pub fn failures(cases: &[Case]) -> Vec<String> {
    cases
        .iter()
        .filter_map(|(name, f)| f().err().map(|e| format!("{name}: {e}")))
        .collect()
}
