//! Mini-batch training with Adam, per-epoch exponential learning-rate decay
//! and global-norm gradient clipping.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Window;
use crate::error::{Error, Result};
use crate::model::{Grouptron, WindowInputs};
use crate::tensor::{ParameterStore, Tape, Tensor};

/// Batch size used when none is configured and the data set is large.
pub const DEFAULT_BATCH_SIZE: usize = 256;
/// Batch size used when none is configured and there are fewer than
/// [`DEFAULT_BATCH_SIZE`] windows.
pub const SMALL_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Rescale all gradients together when their joint L2 norm exceeds the limit.
    #[default]
    GlobalNorm,
    /// Clamp every gradient entry to `[-clip, clip]`.
    Element,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` picks [`DEFAULT_BATCH_SIZE`], or [`SMALL_BATCH_SIZE`] for small data sets.
    pub batch_size: Option<usize>,
    pub lr0: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub decay: f64,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: None,
            lr0: 0.001,
            decay: 0.9999,
            clip: 1.0,
            clip_mode: ClipMode::GlobalNorm,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == Some(0) {
            return Err(Error::arg("batch_size must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::arg(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::arg(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::arg(format!("clip must be positive, got {}", self.clip)));
        }
        Ok(())
    }

    /// Learning rate during epoch `e` (0-based).
    pub fn lr(&self, e: usize) -> f64 {
        self.lr0 * self.decay.powf(e as f64)
    }

    pub fn effective_batch_size(&self, windows: usize) -> usize {
        self.batch_size.unwrap_or(if windows < DEFAULT_BATCH_SIZE {
            SMALL_BATCH_SIZE
        } else {
            DEFAULT_BATCH_SIZE
        })
    }
}

/// Adam moment buffers keyed by parameter path.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(k, p)| (k.to_string(), Tensor::zeros(p.value.shape().to_vec())))
                .collect()
        };
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update from the stored gradients.
    pub fn update(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (path, p) in store.iter_mut() {
            let (Some(m), Some(v)) = (self.m.get_mut(path), self.v.get_mut(path)) else {
                return Err(Error::State(format!("no optimizer state for {path}")));
            };
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients by `max_norm / g` when their global norm `g` exceeds
/// `max_norm`. Returns the factor applied.
pub fn clip_global_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / norm;
    for (_, p) in store.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    }
    scale
}

/// Clamps every gradient entry to `[-limit, limit]`.
pub fn clip_elementwise(store: &mut ParameterStore, limit: f64) {
    for (_, p) in store.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g = g.clamp(-limit, limit));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch with the lowest mean training loss and the parameters after it.
    pub best: Option<(usize, ParameterStore)>,
}

impl TrainReport {
    /// Metrics CSV, preceded by a `# {json}` header line when one is given.
    pub fn write_csv<W: Write>(&self, mut out: W, header: Option<&serde_json::Value>) -> Result<()> {
        if let Some(h) = header {
            writeln!(out, "# {}", serde_json::to_string(h)?)?;
        }
        writeln!(out, "epoch,mean_loss,lr,wall_time_s")?;
        for e in &self.epochs {
            writeln!(out, "{},{:?},{:?},{:.3}", e.epoch, e.mean_loss, e.lr, e.wall_time_s)?;
        }
        Ok(())
    }
}

/// Consecutive batches of `order`; a trailing single window joins the previous
/// batch so that every batch can estimate the latent marginal.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = order.len() - 1 - out.last().map_or(0, |b| b.len());
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

#[derive(Serialize)]
struct BatchDump<'a> {
    epoch: usize,
    batch: usize,
    error: String,
    windows: Vec<&'a Window>,
}

fn dump_batch(dir: &Path, epoch: usize, batch: usize, windows: Vec<&Window>, err: &Error) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("nonfinite_epoch{epoch}_batch{batch}.json"));
    let dump = BatchDump {
        epoch,
        batch,
        error: err.to_string(),
        windows,
    };
    std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
    Ok(path)
}

/// Trains `model` in place.
///
/// Each epoch shuffles the windows with a seeded generator, then per batch
/// zeroes gradients, back-propagates the mean loss, clips, and takes an Adam
/// step at `lr0 · decay^epoch`. A non-finite loss or gradient aborts with a
/// numeric error; when `dump_dir` is set the offending batch is written there.
pub fn train(
    model: &mut Grouptron,
    windows: &[Window],
    cfg: &TrainConfig,
    dump_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::arg("training needs at least one window"));
    }
    let inputs = windows
        .par_iter()
        .map(|w| WindowInputs::prepare(w, &model.config))
        .collect::<Result<Vec<_>>>()?;
    let batch_size = cfg.effective_batch_size(windows.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let start = Instant::now();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        best: None,
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, idx) in batches(&order, batch_size).into_iter().enumerate() {
            let batch: Vec<&WindowInputs> = idx.iter().map(|&i| &inputs[i]).collect();
            let mut step = || -> Result<f64> {
                let tape = Tape::new();
                let bound = model.params.bind(&tape);
                let loss = model.loss(&bound, &batch)?;
                let value = loss.total.item()?;
                tape.backward(loss.total)?;
                model.params.zero_grad();
                model.params.accumulate(&tape, &bound);
                if !model.params.grad_norm().is_finite() {
                    return Err(Error::Numeric("gradient norm is not finite".into()));
                }
                Ok(value)
            };
            let value = match step() {
                Ok(v) => v,
                Err(err @ Error::Numeric(_)) => {
                    let detail = match dump_dir {
                        Some(dir) => {
                            let ws = idx.iter().map(|&i| &windows[i]).collect();
                            format!("; batch written to {}", dump_batch(dir, epoch, bi, ws, &err)?.display())
                        }
                        None => String::new(),
                    };
                    return Err(Error::Numeric(format!("epoch {epoch}, batch {bi}: {err}{detail}")));
                }
                Err(e) => return Err(e),
            };
            total += value * idx.len() as f64;
            match cfg.clip_mode {
                ClipMode::GlobalNorm => {
                    clip_global_norm(&mut model.params, cfg.clip);
                }
                ClipMode::Element => clip_elementwise(&mut model.params, cfg.clip),
            }
            adam.update(&mut model.params, lr)?;
        }
        let metrics = EpochMetrics {
            epoch,
            mean_loss: total / windows.len() as f64,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&metrics);
        let improved = report
            .epochs
            .iter()
            .all(|e: &EpochMetrics| metrics.mean_loss < e.mean_loss);
        if improved {
            report.best = Some((epoch, model.params.clone()));
        }
        report.epochs.push(metrics);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_singleton_joins_previous_batch() {
        let order: Vec<usize> = (0..5).collect();
        let b = batches(&order, 2);
        assert_eq!(b, vec![&[0, 1][..], &[2, 3, 4][..]]);
        assert_eq!(batches(&order[..1], 2), vec![&[0][..]]);
        assert_eq!(batches(&order[..4], 2).len(), 2);
    }

    #[test]
    fn batch_size_defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.effective_batch_size(255), 32);
        assert_eq!(c.effective_batch_size(256), 256);
        let c = TrainConfig {
            batch_size: Some(7),
            ..c
        };
        assert_eq!(c.effective_batch_size(10), 7);
    }
}
