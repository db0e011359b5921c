//! Multi-trial campaigns: independent optimization runs differing only in
//! their noise seed, summarized by the mean and spread of the final
//! noiseless quality.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exec;
use crate::optimizers::{run_optimization, IterationRecord, Method, OptimizerConfig};
use crate::pulse_lib::ControlPulse;
use crate::seeds::trial_seed;
use crate::virtual_spectrometer::{Gate, VirtualSpectrometer};

/// One trial's result. `final_fidelity` is the noiseless quality of the
/// final pulse on the trial's own instrument - what infinite averaging
/// would measure, not the noisy monitor value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub iterations: usize,
    pub experiments: u64,
    pub final_fidelity: f64,
    pub records: Vec<IterationRecord>,
}

/// Aggregated campaign. The spread is the sample standard deviation
/// (`n - 1` denominator), zero for a single trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignResult {
    pub outcomes: Vec<TrialOutcome>,
    pub mean_final: f64,
    pub std_final: f64,
}

impl CampaignResult {
    pub fn final_fidelities(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.final_fidelity).collect()
    }
}

/// Run `trials` independent optimizations in parallel. Each trial builds
/// its own spectrometer from a seed derived from `master_seed`, so trials
/// are reproducible individually and insensitive to scheduling.
pub fn run_campaign<B>(
    build_spectrometer: B,
    method: &Method,
    config: &OptimizerConfig,
    gate: Gate,
    initial: &ControlPulse,
    trials: usize,
    master_seed: u64,
) -> Result<CampaignResult>
where
    B: Fn(u64) -> Result<VirtualSpectrometer> + Sync,
{
    if trials == 0 {
        return Err(crate::error::Error::InvalidArgument("campaign needs at least one trial".into()));
    }
    let per: Vec<Result<TrialOutcome>> = exec::map_range(trials, |t| {
        let seed = trial_seed(master_seed, t as u64);
        let spect = build_spectrometer(seed)?;
        let run = run_optimization(&spect, method, config, gate, initial)?;
        let final_fidelity = spect.true_quality(&run.final_pulse, gate)?;
        Ok(TrialOutcome {
            trial: t,
            seed,
            iterations: run.records.last().map_or(0, |r| r.iteration),
            experiments: run.experiments,
            final_fidelity,
            records: run.records,
        })
    });
    let mut outcomes = Vec::with_capacity(trials);
    for r in per {
        outcomes.push(r?);
    }
    let finals: Vec<f64> = outcomes.iter().map(|o| o.final_fidelity).collect();
    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    let std = if finals.len() < 2 {
        0.0
    } else {
        (finals.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (finals.len() - 1) as f64).sqrt()
    };
    Ok(CampaignResult { outcomes, mean_final: mean, std_final: std })
}

/// Mean and sample standard deviation of a slice; `(value, 0.0)` for a
/// single element.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var.sqrt())
}
