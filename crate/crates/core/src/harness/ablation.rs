//! Toggle sweeps: each configuration is trained from scratch per seed and
//! scored on a fixed validation split.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::{generate_dataset, Split, SyntheticScene};
use super::eval::{evaluate_ap, ApReport};
use super::train::{train, ExperimentConfig};
use crate::error::{Error, Result};
use crate::qa::QaConfig;
use crate::sapm::Normalization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    /// baseline, +global, +local, +QA
    Sacq,
    /// channel reweighting on / off
    Cr,
    /// QA box IoU threshold 0.9 / 0.8 / 0.7
    Tb,
    /// AMP depth 1 to 5
    Depth,
    /// softmax / sigmoid attention maps
    Norm,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Sacq, Suite::Cr, Suite::Tb, Suite::Depth, Suite::Norm];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Sacq => "sacq",
            Suite::Cr => "cr",
            Suite::Tb => "tb",
            Suite::Depth => "depth",
            Suite::Norm => "norm",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown suite {s:?}; expected sacq, cr, tb, depth or norm")))
    }
}

/// The vanilla decoder: zero content queries, no aggregation.
pub fn baseline(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = base.clone();
    c.model.sacq_global = false;
    c.model.sacq_local = false;
    c.qa = QaConfig::disabled();
    c
}

/// Named configurations of `suite`, derived from `base`. Every suite other
/// than `sacq` varies one knob of the full method.
pub fn suite_configs(suite: Suite, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let vanilla = baseline(base);
    let mut full = base.clone();
    full.model.sacq_global = true;
    full.model.sacq_local = true;
    full.qa.enabled = true;
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = full.clone();
        f(&mut c);
        c
    };
    match suite {
        Suite::Sacq => {
            let mut global = vanilla.clone();
            global.model.sacq_global = true;
            let mut local = global.clone();
            local.model.sacq_local = true;
            vec![
                ("baseline".into(), vanilla),
                ("+global".into(), global),
                ("+local".into(), local),
                ("+qa".into(), full),
            ]
        }
        Suite::Cr => vec![
            ("cr_on".into(), with(&|c| c.model.channel_reweight = true)),
            ("cr_off".into(), with(&|c| c.model.channel_reweight = false)),
        ],
        Suite::Tb => [0.9, 0.8, 0.7]
            .into_iter()
            .map(|t| (format!("tb_{t}"), with(&|c| c.qa.t_b = t)))
            .collect(),
        Suite::Depth => (1..=5)
            .map(|d| (format!("depth_{d}"), with(&|c| c.model.amp_depth = d)))
            .collect(),
        Suite::Norm => [("softmax", Normalization::Softmax), ("sigmoid", Normalization::Sigmoid)]
            .into_iter()
            .map(|(n, v)| (n.to_string(), with(&|c| c.model.normalization = v)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "config,ap,ap50,ap75,seed";

impl AblationRow {
    pub fn csv(&self) -> String {
        format!("{},{:.6},{:.6},{:.6},{}", self.config, self.ap, self.ap50, self.ap75, self.seed)
    }
}

/// Validation scenes shared by every configuration of a sweep.
pub fn validation_set(base: &ExperimentConfig, n: usize, seed: u64) -> Vec<SyntheticScene> {
    generate_dataset(n, seed, Split::Val, &base.data)
}

/// Trains `config` under `seed` and scores it on `val`.
pub fn run_config(config: &ExperimentConfig, seed: u64, val: &[SyntheticScene]) -> Result<ApReport> {
    let mut c = config.clone();
    c.train.seed = seed;
    let trainer = train(c, None)?;
    evaluate_ap(&trainer.detector, val, &config.qa)
}

/// Runs every configuration of `suite` for each seed, writing the CSV header
/// and one row per run to `out` as results arrive.
pub fn run_suite(
    suite: Suite,
    base: &ExperimentConfig,
    seeds: &[u64],
    val: &[SyntheticScene],
    out: &mut dyn Write,
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let configs = suite_configs(suite, base);
    for (_, c) in &configs {
        c.validate()?;
    }
    writeln!(out, "{CSV_HEADER}")?;
    let mut rows = Vec::new();
    for (name, c) in &configs {
        for &seed in seeds {
            let r = run_config(c, seed, val)?;
            let row = AblationRow {
                config: name.clone(),
                ap: r.ap,
                ap50: r.ap50,
                ap75: r.ap75,
                seed,
            };
            writeln!(out, "{}", row.csv())?;
            out.flush()?;
            rows.push(row);
        }
    }
    Ok(rows)
}
