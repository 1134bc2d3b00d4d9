//! Parallel repeated-trial evaluation and its reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wingbeat_core::dataset::{run_trial, LabeledSample, TrialConfig};
use wingbeat_core::eval::{csv_table, summarize_trials, text_table, TrialResult, TrialSummary};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub base_seed: u64,
    pub summary: TrialSummary,
    pub trials: Vec<TrialResult>,
}

/// Runs trials `0..n_trials` in parallel. The result depends only on the
/// inputs, not on scheduling.
pub fn run_parallel(
    samples: &[LabeledSample],
    n_trials: usize,
    base_seed: u64,
    config: &TrialConfig,
) -> Result<TrialReport> {
    if n_trials == 0 {
        return Err(Error::Usage("n_trials must be positive".into()));
    }
    let classes = config.classes_for(samples);
    let trials = (0..n_trials)
        .into_par_iter()
        .map(|t| run_trial(samples, &classes, t, base_seed, config))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(TrialReport {
        base_seed,
        summary: summarize_trials(&trials)?,
        trials,
    })
}

pub fn render(report: &TrialReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => text_table(&report.summary),
        ReportFormat::Csv => csv_table(&report.summary),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
    }
}
