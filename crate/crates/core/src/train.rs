//! Mini-batch training of one stream on normal frames.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{Architecture, StreamModel};
use crate::patch::{FrameGroup, Stream};

/// Frames per gradient chunk; chunks are reduced in order so results do not
/// depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stream: Stream,
    pub learning_rate: f64,
    /// Items per batch, counted in `batch_unit`.
    pub batch_size: usize,
    #[serde(default)]
    pub batch_unit: BatchUnit,
    pub epochs: usize,
    pub loss_weights: LossWeights,
    /// Targets per frame the dataset was grouped with.
    pub n: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop when the best epoch loss of the last `patience` epochs improves on
    /// the earlier best by less than `plateau_tolerance` (relative).
    pub patience: usize,
    pub plateau_tolerance: f64,
}

impl TrainConfig {
    pub fn new(stream: Stream) -> Self {
        Self {
            stream,
            learning_rate: match stream {
                Stream::Spatial => 0.001,
                Stream::Temporal => 0.0001,
            },
            batch_size: 64,
            batch_unit: BatchUnit::Frames,
            epochs: 60,
            loss_weights: LossWeights::default(),
            n: 18,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 10,
            plateau_tolerance: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.n == 0 {
            return Err(Error::Config("batch_size, epochs and n must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// What `batch_size` counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchUnit {
    /// Frame groups.
    #[default]
    Frames,
    /// Targets; a batch holds `batch_size / n` frame groups (at least one).
    Targets,
}

impl TrainConfig {
    /// Frame groups per optimizer step.
    pub fn frames_per_batch(&self) -> usize {
        match self.batch_unit {
            BatchUnit::Frames => self.batch_size,
            BatchUnit::Targets => (self.batch_size / self.n).max(1),
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub epoch: usize,
    pub batch: usize,
    pub recon: f64,
    pub entropy: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Adaptive-moment optimizer state.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(model: &StreamModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, model: &mut StreamModel, grads: &StreamModel, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, g), m), v) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Trains a fresh model of `arch` on `dataset`. Every batch is logged to
/// `metrics` as one JSON line when given.
pub fn train_stream(
    config: &TrainConfig,
    arch: &Architecture,
    dataset: &[FrameGroup],
    mut metrics: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    config.validate()?;
    if arch.stream != config.stream {
        return Err(Error::Config(format!(
            "architecture is for the {} stream but training config is {}",
            arch.stream, config.stream
        )));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set has no frame groups".into()));
    }
    if let Some(g) = dataset.iter().find(|g| g.stream != config.stream) {
        return Err(Error::InvalidInput(format!(
            "{} frame {}:{} in a {} training set",
            g.stream, g.video, g.frame, config.stream
        )));
    }

    let mut model = StreamModel::new(arch.clone())?;
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history: Vec<EpochStats> = Vec::new();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for (batch_idx, batch) in order.chunks(config.frames_per_batch()).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let partials = batch
                .par_chunks(CHUNK)
                .map(|chunk| -> Result<(StreamModel, [f64; 3])> {
                    let mut grads = model.zeros_like();
                    let mut acc = [0.0; 3];
                    for &i in chunk {
                        let b = model.frame_loss_and_grad(&dataset[i], config.loss_weights, scale, &mut grads)?;
                        acc[0] += b.recon;
                        acc[1] += b.entropy;
                        acc[2] += b.total;
                    }
                    Ok((grads, acc))
                })
                .collect::<Vec<_>>();
            let mut grads: Option<StreamModel> = None;
            let mut acc = [0.0; 3];
            for part in partials {
                let (g, a) = part?;
                for k in 0..3 {
                    acc[k] += a[k];
                }
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(total) => total.add_scaled(&g, 1.0),
                }
            }
            let grads = grads.expect("non-empty batch");
            let line = BatchMetrics {
                epoch,
                batch: batch_idx,
                recon: acc[0] * scale,
                entropy: acc[1] * scale,
                total: acc[2] * scale,
            };
            for (term, value) in [("reconstruction", line.recon), ("entropy", line.entropy), ("total", line.total)] {
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        batch: batch_idx,
                        term,
                    });
                }
            }
            if grads.tensors().iter().any(|t| t.iter().any(|g| !g.is_finite())) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx,
                    term: "gradient",
                });
            }
            adam.update(&mut model, &grads, config);
            model.memory.validate().map_err(|e| {
                Error::InvalidInput(format!("memory bank invalid after epoch {epoch}, batch {batch_idx}: {e}"))
            })?;
            if let Some(w) = metrics.as_deref_mut() {
                serde_json::to_writer(&mut *w, &line).expect("serializable metrics");
                w.write_all(b"\n").map_err(|e| Error::io("<metrics>", e))?;
            }
            for (s, v) in sums.iter_mut().zip([line.recon, line.entropy, line.total]) {
                *s += v * batch.len() as f64;
            }
        }
        let count = dataset.len() as f64;
        let stats = EpochStats {
            epoch,
            recon: sums[0] / count,
            entropy: sums[1] / count,
            total: sums[2] / count,
        };
        log::info!(
            "{} epoch {epoch}: total {:.6} (recon {:.6}, entropy {:.4})",
            config.stream,
            stats.total,
            stats.recon,
            stats.entropy
        );
        history.push(stats);
        if plateaued(&history, config.patience, config.plateau_tolerance) {
            log::info!("{} loss plateaued after {epoch} epochs", config.stream);
            break;
        }
    }

    Ok(Checkpoint {
        train: config.clone(),
        history,
        model,
    })
}

fn plateaued(history: &[EpochStats], patience: usize, tolerance: f64) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let split = history.len() - patience;
    let best = |h: &[EpochStats]| h.iter().map(|e| e.total).fold(f64::INFINITY, f64::min);
    let before = best(&history[..split]);
    let recent = best(&history[split..]);
    (before - recent) / before.abs().max(f64::MIN_POSITIVE) < tolerance
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(totals: &[f64]) -> Vec<EpochStats> {
        totals
            .iter()
            .enumerate()
            .map(|(i, &t)| EpochStats {
                epoch: i + 1,
                recon: t,
                entropy: 0.0,
                total: t,
            })
            .collect()
    }

    #[test]
    fn plateau_rule() {
        assert!(!plateaued(&stats(&[1.0, 0.9]), 2, 1e-4));
        assert!(!plateaued(&stats(&[1.0, 0.9, 0.8]), 2, 1e-4));
        assert!(plateaued(&stats(&[1.0, 0.5, 0.5, 0.5]), 2, 1e-4));
        assert!(!plateaued(&stats(&[1.0, 0.5, 0.5, 0.5]), 0, 1e-4));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(Stream::Spatial);
        c.validate().unwrap();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::new(Stream::Temporal).learning_rate, 0.0001);
        let targets = TrainConfig {
            batch_unit: BatchUnit::Targets,
            ..TrainConfig::new(Stream::Spatial)
        };
        assert_eq!(targets.frames_per_batch(), 3);
        assert_eq!(TrainConfig::new(Stream::Spatial).frames_per_batch(), 64);
    }
}
