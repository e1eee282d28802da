//! Run configuration and the contrastive training loop.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{clamp_log_temperature, total_loss};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::model::{Model, ModelConfig};
use crate::synth::MultimodalSample;
use crate::tensor::{Adam, AdamConfig, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 2000,
            lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: Option<PathBuf>,
    /// Optional sample manifest; when set only its ids are trained on.
    pub manifest: Option<PathBuf>,
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub temperature: f64,
    pub batch_size: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Endless stream of batches: the sample indices are shuffled with the run
/// seed and consumed in order, reshuffling after every pass.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xba7c);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            rng,
            order,
            pos: 0,
            size: size.min(n),
        }
    }

    fn next(&mut self) -> &[usize] {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        b
    }
}

/// Trains `model` in place. With a log sink, writes a header
/// `step,loss,tau,<m>-><n>...` and one line per step.
pub fn train(
    model: &mut Model,
    samples: &[MultimodalSample],
    cfg: &TrainConfig,
    seed: u64,
    config_hash: &str,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::Invalid(format!(
            "training needs at least two samples, got {}",
            samples.len()
        )));
    }
    model.set_config_hash(config_hash);
    let loss_cfg = model.config().loss.clone();
    let log_tau = model.log_temperature();
    let mut batches = Batches::new(samples.len(), cfg.batch_size, seed);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&MultimodalSample> = batches.next().iter().map(|&i| &samples[i]).collect();
        model.store_mut().zero_grads();
        let mut g = Graph::new();
        let emb = model.encode_batch(&mut g, &batch)?;
        let tau = g.param(model.store(), log_tau);
        let out = total_loss(&mut g, &emb, tau, &loss_cfg)?;
        let loss = g.value(out.loss).item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became {loss} at step {step} (config {config_hash})"
            )));
        }
        if let Some(w) = log.as_deref_mut() {
            if step == 0 {
                let names: Vec<String> = out
                    .pairs
                    .iter()
                    .map(|(m, n, _)| format!("{m}->{n}"))
                    .collect();
                writeln!(w, "step,loss,tau,{}", names.join(","))?;
            }
            let pairs: Vec<String> = out
                .pairs
                .iter()
                .map(|p| format!("{:.6}", g.value(p.2).item()))
                .collect();
            writeln!(
                w,
                "{step},{loss:.6},{:.6},{}",
                model.temperature(),
                pairs.join(",")
            )?;
        }
        g.backward(out.loss, model.store_mut())?;
        if !loss_cfg.learn_temperature {
            model.store_mut().grad_mut(log_tau).data_mut()[0] = 0.0;
        }
        adam.step(model.store_mut());
        clamp_log_temperature(model.store_mut(), log_tau);
        losses.push(loss);
    }
    Ok(TrainReport {
        losses,
        temperature: model.temperature(),
        batch_size: cfg.batch_size.min(samples.len()),
    })
}
