//! Text summary of an experiment's `metrics.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use flaas_core::global::RoundStatus;

use crate::error::SimError;
use crate::runner::{mean_std, MetricsRecord};

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRecord>, SimError> {
    let path = dir.join("metrics.csv");
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| SimError::Config(format!("no metrics at {}: {e}", path.display())))?;
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<MetricsRecord>, _>>()
        .map_err(|e| SimError::Config(format!("malformed {}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(SimError::Config(format!("{} has no rows", path.display())));
    }
    Ok(rows)
}

/// One line per `(scope, round)`: mean ± std accuracy across seeds, mean
/// number of updates, timed-out runs and mean phase timings.
pub fn render(rows: &[MetricsRecord], as_csv: bool) -> String {
    let mut groups: BTreeMap<(String, u64), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.scope.to_string(), r.round)).or_default().push(r);
    }
    let mut out = String::new();
    if as_csv {
        out.push_str(
            "scope,round,runs,mean_accuracy,std_accuracy,mean_updates,timed_out,mean_train_ms,mean_aggregate_ms\n",
        );
    } else {
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>4} {:>17} {:>8} {:>9} {:>10} {:>10}",
            "scope", "round", "runs", "accuracy", "updates", "timed_out", "train_ms", "agg_ms"
        );
    }
    for ((scope, round), rs) in &groups {
        let accs: Vec<f64> = rs.iter().filter_map(|r| r.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        let n = rs.len() as f64;
        let updates = rs.iter().map(|r| r.n_updates as f64).sum::<f64>() / n;
        let timed_out = rs.iter().filter(|r| r.status == RoundStatus::TimedOut).count();
        let train = rs.iter().map(|r| r.train_ms).sum::<f64>() / n;
        let agg = rs.iter().map(|r| r.aggregate_ms).sum::<f64>() / n;
        if as_csv {
            let _ = writeln!(
                out,
                "{scope},{round},{},{mean},{std},{updates},{timed_out},{train},{agg}",
                rs.len()
            );
        } else {
            let _ = writeln!(
                out,
                "{:<16} {:>5} {:>4} {:>8.4} ± {:<6.4} {:>8.1} {:>9} {:>10.1} {:>10.1}",
                scope,
                round,
                rs.len(),
                mean,
                std,
                updates,
                timed_out,
                train,
                agg
            );
        }
    }
    out
}
