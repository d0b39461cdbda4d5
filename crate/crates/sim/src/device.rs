//! A single simulated device taking part in a job over HTTP.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use flaas_core::global::JobStatus;
use tracing::info;

use crate::error::SimError;
use crate::population::SimDevice;
use crate::transport::{Submitted, Transport};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceSummary {
    pub rounds_seen: u64,
    pub rounds_submitted: u64,
    pub rejected: u64,
}

/// Polls the job and, in every round this device is selected for, trains
/// from the previous round's models and uploads. Returns when the job
/// terminates or `max_idle` passes without a new round.
pub fn run_device(
    transport: &dyn Transport,
    job: &str,
    device: &mut SimDevice,
    poll: Duration,
    max_idle: Duration,
) -> Result<DeviceSummary, SimError> {
    let mut summary = DeviceSummary::default();
    let mut done = 0;
    let mut last_progress = Instant::now();
    loop {
        let view = transport.job(job)?;
        if view.status == JobStatus::Terminated {
            break;
        }
        match view.current_round {
            Some(round) if round > done => {
                summary.rounds_seen += 1;
                let selected = transport.selection(job, round)?;
                if selected.contains(&device.id()) {
                    let globals = view
                        .scopes
                        .iter()
                        .map(|s| Ok((s.clone(), transport.download(job, s, round - 1)?)))
                        .collect::<Result<BTreeMap<_, _>, SimError>>()?;
                    if let Some(bundle) = device.train_round(round, &globals, &view.config.train)? {
                        match transport.submit(job, round, &bundle)? {
                            Submitted::Accepted => summary.rounds_submitted += 1,
                            Submitted::Rejected(code) => {
                                info!(round, %code, "update rejected");
                                summary.rejected += 1;
                            }
                        }
                    }
                }
                done = round;
                last_progress = Instant::now();
            }
            _ if last_progress.elapsed() > max_idle => break,
            _ => std::thread::sleep(poll),
        }
    }
    Ok(summary)
}
