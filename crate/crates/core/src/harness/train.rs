//! Training loop: scenes are generated on the fly from `(seed, step, slot)`,
//! per-image gradients are computed independently and reduced in order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{generate_scene, DataConfig, Split};
use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::matching::{total_loss, LossReport, LossWeights, Target};
use crate::model::checkpoint::{self, read_tensors, write_tensors};
use crate::model::{Detector, DetectorConfig};
use crate::params::Binder;
use crate::qa::QaConfig;
use crate::tensor::{Precision, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Step from which both learning rates are multiplied by 0.1.
    pub lr_drop_step: Option<usize>,
    pub clip_norm: f64,
    pub seed: u64,
    /// Metrics are written every `log_every` steps and on the last step.
    pub log_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    /// Toy recipe: a randomly initialized backbone trained for 5k steps needs
    /// a higher rate than a pretrained one, in both groups, dropped at 4k.
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch: 8,
            lr: 5e-4,
            lr_backbone: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            lr_drop_step: Some(4000),
            clip_norm: 0.1,
            seed: 0,
            log_every: 10,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Full-scale optimizer settings (pretrained backbone, lr 1e-4 / 1e-5).
    pub fn full_scale() -> Self {
        TrainConfig {
            batch: 4,
            lr: 1e-4,
            lr_backbone: 1e-5,
            lr_drop_step: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::config("batch and log_every must be positive"));
        }
        let rates = [self.lr, self.lr_backbone, self.weight_decay, self.clip_norm];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::config("learning rates, decay and clipping must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `(lr, lr_backbone)` in effect at `step`.
    pub fn rates_at(&self, step: usize) -> (f64, f64) {
        match self.lr_drop_step {
            Some(d) if step >= d => (self.lr * 0.1, self.lr_backbone * 0.1),
            _ => (self.lr, self.lr_backbone),
        }
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub qa: QaConfig,
    pub data: DataConfig,
    pub loss: LossWeights,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.qa.validate()?;
        self.data.validate()?;
        self.loss.validate()?;
        if self.data.max_objects > self.model.q {
            return Err(Error::config("more objects per scene than queries"));
        }
        Ok(())
    }
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub per_layer: Vec<f64>,
    pub merges: usize,
    pub grad_norm: f64,
}

/// Loss report and per-parameter gradients of one image.
pub fn image_gradients(
    detector: &Detector,
    image: &Tensor,
    targets: &[Target],
    qa: &QaConfig,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&detector.store);
    let out = detector.decode(&mut tape, &mut binder, image)?;
    let (loss, report) = total_loss(&mut tape, &out.layers, targets, qa, weights)?;
    let grads = tape.backward(loss)?;
    Ok((report, binder.gradients(&tape, &grads)))
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub detector: Detector,
    pub optimizer: AdamW,
    /// Number of completed steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let detector = Detector::new(config.model.clone(), config.train.seed, config.train.precision)?;
        let optimizer = AdamW::new(&detector.store, adam_config(&config.train));
        Ok(Trainer {
            config,
            detector,
            optimizer,
            step: 0,
        })
    }

    /// Runs one optimization step and returns its metrics.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let c = &self.config;
        let batch = c.train.batch;
        let step = self.step;
        let results: Vec<Result<(LossReport, Vec<Option<Vec<f64>>>)>> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let scene = generate_scene(c.train.seed, Split::Train, (step * batch + b) as u64, &c.data);
                image_gradients(&self.detector, &scene.image, &scene.targets, &c.qa, &c.loss)
            })
            .collect();
        self.detector.store.zero_grad();
        let inv = 1.0 / batch as f64;
        let mut metrics = StepMetrics {
            step,
            total: 0.0,
            cls: 0.0,
            l1: 0.0,
            giou: 0.0,
            per_layer: vec![0.0; c.model.decoder_layers],
            merges: 0,
            grad_norm: 0.0,
        };
        for r in results {
            let (report, mut grads) = r?;
            if !report.total.is_finite() {
                return Err(Error::contract(format!("non-finite loss at step {step}")));
            }
            for g in grads.iter_mut().flatten() {
                g.iter_mut().for_each(|x| *x *= inv);
            }
            self.detector.store.accumulate(&grads)?;
            metrics.total += report.total * inv;
            metrics.cls += report.cls * inv;
            metrics.l1 += report.l1 * inv;
            metrics.giou += report.giou * inv;
            for (a, b) in metrics.per_layer.iter_mut().zip(&report.per_layer) {
                *a += b * inv;
            }
            metrics.merges += report.merges;
        }
        let (lr, lr_bb) = c.train.rates_at(step);
        metrics.grad_norm = self.optimizer.update(&mut self.detector.store, lr, lr_bb);
        if self.detector.store.iter().any(|(_, p)| !p.tensor.is_finite()) {
            return Err(Error::contract(format!("non-finite parameter after step {step}")));
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Trains until `config.train.steps`, writing metric lines to `log`.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<()> {
        let total = self.config.train.steps;
        let every = self.config.train.log_every;
        while self.step < total {
            let m = self.train_step()?;
            if m.step % every == 0 || m.step + 1 == total {
                writeln!(log, "{}", serde_json::to_string(&m)?)?;
            }
        }
        log.flush()?;
        Ok(())
    }

    /// Parameters, optimizer moments and the run config.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let optimizer = write_tensors(dir, &self.optimizer.state(&self.detector.store))?;
        let mut extra = serde_json::Map::new();
        extra.insert("step".into(), self.step.into());
        extra.insert("experiment".into(), serde_json::to_value(&self.config)?);
        extra.insert("optimizer".into(), serde_json::to_value(optimizer)?);
        checkpoint::save(dir, &self.detector, extra)
    }

    /// Restores a run saved by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let (detector, manifest) = checkpoint::load(dir)?;
        let missing = |k: &str| Error::Format {
            path: dir.join(checkpoint::MANIFEST),
            reason: format!("not a training checkpoint: missing {k}"),
        };
        let config: ExperimentConfig =
            serde_json::from_value(manifest.extra.get("experiment").cloned().ok_or_else(|| missing("experiment"))?)?;
        let step = manifest.extra.get("step").and_then(|v| v.as_u64()).ok_or_else(|| missing("step"))?;
        let table = serde_json::from_value(manifest.extra.get("optimizer").cloned().ok_or_else(|| missing("optimizer"))?)?;
        let mut optimizer = AdamW::new(&detector.store, adam_config(&config.train));
        optimizer.load_state(&detector.store, &read_tensors(dir, &table)?, step)?;
        Ok(Trainer {
            config,
            detector,
            optimizer,
            step: step as usize,
        })
    }
}

fn adam_config(t: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        beta1: t.beta1,
        beta2: t.beta2,
        weight_decay: t.weight_decay,
        clip_norm: t.clip_norm,
        ..AdamWConfig::default()
    }
}

/// Trains from scratch; writes `metrics.jsonl` and `checkpoint/` under `out`.
pub fn train(config: ExperimentConfig, out: Option<&Path>) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut log = std::io::BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?);
            trainer.run(&mut log)?;
            trainer.save(&dir.join("checkpoint"))?;
        }
        None => trainer.run(&mut std::io::sink())?,
    }
    Ok(trainer)
}
