//! Paired comparison of two experiment configs over the same seeds.

use std::fmt;

use flaas_core::Scope;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::SimError;
use crate::runner::{mean_std, run_experiment, ExperimentResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub round: u64,
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_b: f64,
    pub std_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub name_a: String,
    pub name_b: String,
    pub scope_a: Scope,
    pub scope_b: Scope,
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
    /// Final-round mean accuracy of `b` minus that of `a`.
    pub final_delta: f64,
}

impl CompareReport {
    pub fn first(&self) -> &CompareRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &CompareRow {
        self.rows.last().expect("at least one round")
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "a = {} ({}), b = {} ({}), seeds {:?}",
            self.name_a, self.scope_a, self.name_b, self.scope_b, self.seeds
        )?;
        writeln!(f, "{:>5}  {:>15}  {:>15}", "round", "a mean ± std", "b mean ± std")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>5}  {:>7.4} ± {:<6.4}  {:>7.4} ± {:<6.4}",
                r.round, r.mean_a, r.std_a, r.mean_b, r.std_b
            )?;
        }
        let last = self.last();
        write!(
            f,
            "final delta (b - a): {:+.4}  (std a {:.4}, std b {:.4})",
            self.final_delta, last.std_a, last.std_b
        )
    }
}

/// Per-seed accuracy of `scope` by round.
fn curves(result: &ExperimentResult, scope: &Scope, rounds: u64) -> Vec<Vec<f64>> {
    (1..=rounds)
        .map(|round| {
            result
                .records
                .iter()
                .filter(|r| r.round == round && &r.scope == scope)
                .filter_map(|r| r.accuracy)
                .collect()
        })
        .collect()
}

/// Runs both configs on seeds `a.seeds[0] .. a.seeds[0] + repeats` and
/// reports per-round accuracy of each config's headline scope.
pub fn compare_scenarios(
    a: &ExperimentConfig,
    b: &ExperimentConfig,
    repeats: usize,
) -> Result<CompareReport, SimError> {
    if repeats < 3 {
        return Err(SimError::Config(format!("repeats must be at least 3, got {repeats}")));
    }
    if a.rounds != b.rounds {
        return Err(SimError::Config(format!(
            "round counts differ: {} vs {}",
            a.rounds, b.rounds
        )));
    }
    a.validate()?;
    b.validate()?;
    let seeds: Vec<u64> = (0..repeats as u64).map(|i| a.seeds[0] + i).collect();
    let run = |c: &ExperimentConfig| {
        let mut c = c.clone();
        c.seeds = seeds.clone();
        run_experiment(&c)
    };
    let (ra, rb) = (run(a)?, run(b)?);
    let (scope_a, scope_b) = (a.scenario.headline_scope(), b.scenario.headline_scope());
    let (ca, cb) = (curves(&ra, &scope_a, a.rounds), curves(&rb, &scope_b, b.rounds));
    let rows: Vec<CompareRow> = ca
        .iter()
        .zip(&cb)
        .enumerate()
        .map(|(i, (xa, xb))| {
            let (mean_a, std_a) = mean_std(xa);
            let (mean_b, std_b) = mean_std(xb);
            CompareRow {
                round: i as u64 + 1,
                mean_a,
                std_a,
                mean_b,
                std_b,
            }
        })
        .collect();
    let last = rows.last().expect("rounds >= 1");
    Ok(CompareReport {
        name_a: a.name.clone(),
        name_b: b.name.clone(),
        scope_a,
        scope_b,
        seeds,
        final_delta: last.mean_b - last.mean_a,
        rows,
    })
}
