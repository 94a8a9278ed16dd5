//! Desk-scale fine-tuning loop: a linear embedder feeding a sub-center
//! ArcFace head, trained for one epoch on synthetic class clusters with
//! multi-sample dropout and the warmup/cosine schedule.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::arcface::{arcface_forward, arcface_gradients, ArcFaceHead};
use super::margins::{adaptive_margins, DEFAULT_MARGIN_MAX, DEFAULT_MARGIN_MIN, DEFAULT_MARGIN_POWER};
use super::schedule::{layerwise_lr, LrSchedule};
use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::soup::{Checkpoint, TensorEntry};
use crate::synthetic::rng;

pub const TENSOR_EMBED: &str = "embed.weight";
pub const TENSOR_HEAD: &str = "head.weights";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrainConfig {
    /// Drives batch order and dropout masks.
    pub seed: u64,
    /// Drives parameter initialization. Runs sharing it start from the same weights.
    pub init_seed: u64,
    /// Drives the synthetic dataset.
    pub data_seed: u64,
    pub n_classes: usize,
    /// Sample count of the most frequent class.
    pub samples_per_class: usize,
    /// Sample count of the rarest class; counts fall linearly between the two.
    pub min_samples_per_class: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    /// Leading input coordinates that carry class information.
    pub signal_dim: usize,
    pub class_spread: f64,
    pub within_class_std: f64,
    /// Std of the remaining, class-independent coordinates.
    pub nuisance_std: f64,
    pub sub_centers: usize,
    pub scale: f64,
    pub margin_min: f64,
    pub margin_max: f64,
    pub margin_power: f64,
    pub dropout: f64,
    pub dropout_samples: usize,
    pub batch_size: usize,
    /// `total_steps` is overwritten with the actual step count; `warmup_steps` is capped by it.
    pub schedule: LrSchedule,
    pub epochs: usize,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            init_seed: 0,
            data_seed: 0,
            n_classes: 10,
            samples_per_class: 200,
            min_samples_per_class: 200,
            input_dim: 64,
            embed_dim: 16,
            signal_dim: 8,
            class_spread: 1.0,
            within_class_std: 0.35,
            nuisance_std: 1.5,
            sub_centers: 3,
            scale: 16.0,
            margin_min: DEFAULT_MARGIN_MIN,
            margin_max: DEFAULT_MARGIN_MAX,
            margin_power: DEFAULT_MARGIN_POWER,
            dropout: 0.1,
            dropout_samples: 4,
            batch_size: 32,
            schedule: LrSchedule {
                warmup_steps: 6,
                total_steps: 0,
                peak_lr: 0.5,
                layer_lr_min: 0.05,
                layer_lr_max: 0.5,
                n_layers: 1,
                head_lr: 2.0,
            },
            epochs: 1,
        }
    }
}

impl ToyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.min_samples_per_class == 0 || self.min_samples_per_class > self.samples_per_class {
            return bad(format!(
                "sample counts must satisfy 1 <= {} <= {}",
                self.min_samples_per_class, self.samples_per_class
            ));
        }
        if self.input_dim == 0 || self.embed_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.signal_dim == 0 || self.signal_dim > self.input_dim {
            return bad(format!("signal_dim {} outside 1..={}", self.signal_dim, self.input_dim));
        }
        if !(self.class_spread > 0.0 && self.within_class_std >= 0.0 && self.nuisance_std >= 0.0) {
            return bad("cluster spreads must be non-negative (class_spread positive)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.dropout_samples == 0 || self.batch_size == 0 || self.epochs == 0 || self.sub_centers == 0 {
            return bad("dropout_samples, batch_size, epochs and sub_centers must be positive".into());
        }
        if !(self.scale > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        let schedule = LrSchedule {
            total_steps: self.schedule.total_steps.max(self.schedule.warmup_steps),
            ..self.schedule.clone()
        };
        schedule.validate()?;
        adaptive_margins::<f64>(&[1], self.margin_min, self.margin_max, self.margin_power)?;
        Ok(())
    }

    /// Per-class training sample counts, largest first.
    pub fn class_counts(&self) -> Vec<usize> {
        let (hi, lo) = (self.samples_per_class as f64, self.min_samples_per_class as f64);
        let last = (self.n_classes - 1).max(1) as f64;
        (0..self.n_classes)
            .map(|c| (hi + (lo - hi) * c as f64 / last).round() as usize)
            .collect()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.class_counts().iter().sum::<usize>().div_ceil(self.batch_size)
    }
}

/// Synthetic clustered inputs: the first `signal_dim` coordinates are a class
/// centroid plus noise, the rest are class-independent nuisance.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    centroids: Vec<Vec<f64>>,
    input_dim: usize,
    within_class_std: f64,
    nuisance_std: f64,
}

#[derive(Debug, Clone)]
pub struct LabelledInputs {
    pub inputs: EmbeddingSet,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn new(config: &ToyTrainConfig) -> Self {
        let mut r = rng(config.data_seed);
        let centroids = (0..config.n_classes)
            .map(|_| {
                (0..config.signal_dim)
                    .map(|_| config.class_spread * Distribution::<f64>::sample(&StandardNormal, &mut r))
                    .collect()
            })
            .collect();
        Self {
            centroids,
            input_dim: config.input_dim,
            within_class_std: config.within_class_std,
            nuisance_std: config.nuisance_std,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.centroids.len()
    }

    /// `counts[c]` samples of class `c`, ids `{prefix}{c}_{i}`.
    pub fn sample(&self, counts: &[usize], seed: u64, prefix: &str) -> Result<LabelledInputs> {
        if counts.len() != self.centroids.len() {
            return Err(Error::Shape(format!(
                "{} counts for {} classes",
                counts.len(),
                self.centroids.len()
            )));
        }
        let mut r = rng(seed);
        let total: usize = counts.iter().sum();
        let mut ids = Vec::with_capacity(total);
        let mut labels = Vec::with_capacity(total);
        let mut data = Vec::with_capacity(total * self.input_dim);
        for (c, (&count, mu)) in counts.iter().zip(&self.centroids).enumerate() {
            for i in 0..count {
                ids.push(format!("{prefix}{c}_{i}"));
                labels.push(c);
                for j in 0..self.input_dim {
                    let z: f64 = StandardNormal.sample(&mut r);
                    let v = match mu.get(j) {
                        Some(&m) => m + self.within_class_std * z,
                        None => self.nuisance_std * z,
                    };
                    data.push(v as f32);
                }
            }
        }
        Ok(LabelledInputs {
            inputs: EmbeddingSet::new(ids, self.input_dim, data, false)?,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr_embed: f64,
    pub lr_head: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct ToyTrainOutput {
    pub checkpoint: Checkpoint,
    pub initial: Checkpoint,
    pub log: Vec<LogRow>,
    /// Dropout-free mean loss over the training set before the first step.
    pub initial_loss: f64,
    /// Same, after the last step.
    pub final_loss: f64,
    pub margins: Vec<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, r: &mut impl Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| std * Distribution::<f64>::sample(&StandardNormal, r))
}

fn to_checkpoint(embed: &Matrix<f64>, head: &Matrix<f64>) -> Result<Checkpoint> {
    let f = |m: &Matrix<f64>| m.as_slice().iter().map(|&v| v as f32).collect::<Vec<_>>();
    Checkpoint::from_tensors(vec![
        TensorEntry::new(TENSOR_EMBED, vec![embed.rows() as u32, embed.cols() as u32], f(embed))?,
        TensorEntry::new(TENSOR_HEAD, vec![head.rows() as u32, head.cols() as u32], f(head))?,
    ])
}

fn inputs_matrix(set: &EmbeddingSet, rows: &[usize]) -> Matrix<f64> {
    let d = set.dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend(set.row(r).iter().map(|&v| f64::from(v)));
    }
    Matrix::from_vec(rows.len(), d, data).expect("gathered rows")
}

/// `X · Wᵀ`.
fn linear(x: &Matrix<f64>, w: &Matrix<f64>) -> Matrix<f64> {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        for o in 0..w.rows() {
            out[(i, o)] = crate::matrix::dot(x.row(i), w.row(o));
        }
    }
    out
}

/// Trains embedder and head; deterministic for a fixed config.
pub fn train_toy(config: &ToyTrainConfig) -> Result<ToyTrainOutput> {
    config.validate()?;
    let counts = config.class_counts();
    let data = ToyDataset::new(config).sample(&counts, config.data_seed ^ 0x5eed_da7a, "train")?;
    let n = data.inputs.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let schedule = LrSchedule {
        total_steps,
        warmup_steps: config.schedule.warmup_steps.min(total_steps),
        ..config.schedule.clone()
    };
    let margins = adaptive_margins(&counts, config.margin_min, config.margin_max, config.margin_power)?;

    let mut init_rng = rng(config.init_seed);
    let mut embed = gaussian_matrix(
        config.embed_dim,
        config.input_dim,
        1.0 / (config.input_dim as f64).sqrt(),
        &mut init_rng,
    );
    let head_weights = gaussian_matrix(
        config.n_classes * config.sub_centers,
        config.embed_dim,
        1.0,
        &mut init_rng,
    );
    let mut head = ArcFaceHead::new(head_weights, config.sub_centers, config.scale, margins.clone())?;
    let initial = to_checkpoint(&embed, head.weights())?;

    let all: Vec<usize> = (0..n).collect();
    let full_x = inputs_matrix(&data.inputs, &all);
    let initial_loss = arcface_forward(&linear(&full_x, &embed), &head, &data.labels)?;

    let mut r = rng(config.seed);
    let keep = 1.0 - config.dropout;
    let m_inv = 1.0 / config.dropout_samples as f64;
    let top_layer = schedule.n_layers - 1;
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;
    for _ in 0..config.epochs {
        let mut order = all.clone();
        order.shuffle(&mut r);
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let factor = schedule.factor(step)?;
            let lr_embed = layerwise_lr(top_layer, &schedule)? * factor;
            let lr_head = schedule.head_lr * factor;

            let x = inputs_matrix(&data.inputs, batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let z = linear(&x, &embed);
            let mut grad_z = Matrix::<f64>::zeros(z.rows(), z.cols());
            let mut grad_head = Matrix::<f64>::zeros(head.weights().rows(), head.dim());
            let mut loss = 0.0;
            for _ in 0..config.dropout_samples {
                let mask: Vec<f64> = (0..z.as_slice().len())
                    .map(|_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mut dropped = z.clone();
                dropped.as_mut_slice().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                let g = arcface_gradients(&dropped, &head, &labels)?;
                loss += g.loss * m_inv;
                for ((acc, &gv), &mk) in grad_z.as_mut_slice().iter_mut().zip(g.embeddings.as_slice()).zip(&mask) {
                    *acc += gv * mk * m_inv;
                }
                for (acc, &gv) in grad_head.as_mut_slice().iter_mut().zip(g.weights.as_slice()) {
                    *acc += gv * m_inv;
                }
            }
            // dL/dW_e = dL/dZᵀ · X
            let grad_embed = grad_z.transpose().matmul(&x)?;
            for (w, g) in embed.as_mut_slice().iter_mut().zip(grad_embed.as_slice()) {
                *w -= lr_embed * g;
            }
            for (w, g) in head.weights_mut().as_mut_slice().iter_mut().zip(grad_head.as_slice()) {
                *w -= lr_head * g;
            }
            log.push(LogRow {
                step,
                lr_embed,
                lr_head,
                loss,
            });
        }
    }

    let final_loss = arcface_forward(&linear(&full_x, &embed), &head, &data.labels)?;
    Ok(ToyTrainOutput {
        checkpoint: to_checkpoint(&embed, head.weights())?,
        initial,
        log,
        initial_loss,
        final_loss,
        margins,
    })
}

/// Applies the `embed.weight` tensor of a trained checkpoint to raw inputs.
pub fn embed_with_checkpoint(ckpt: &Checkpoint, inputs: &EmbeddingSet) -> Result<EmbeddingSet> {
    let w = ckpt
        .get(TENSOR_EMBED)
        .ok_or_else(|| Error::Invalid(format!("checkpoint has no tensor {TENSOR_EMBED:?}")))?;
    let [out_dim, in_dim] = *w.dims() else {
        return Err(Error::Shape(format!("{TENSOR_EMBED} must be rank 2")));
    };
    let (out_dim, in_dim) = (out_dim as usize, in_dim as usize);
    if in_dim != inputs.dim() {
        return Err(Error::Shape(format!(
            "embedder expects dim {in_dim}, inputs have {}",
            inputs.dim()
        )));
    }
    let mut data = Vec::with_capacity(inputs.len() * out_dim);
    for row in inputs.rows() {
        for o in 0..out_dim {
            let wr = &w.data()[o * in_dim..(o + 1) * in_dim];
            let v: f64 = wr.iter().zip(row).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            data.push(v as f32);
        }
    }
    EmbeddingSet::new(inputs.ids().to_vec(), out_dim, data, false)
}

pub fn write_training_log<W: Write>(log: &[LogRow], mut sink: W) -> Result<()> {
    writeln!(sink, "step\tlr_embed\tlr_head\tloss")?;
    for row in log {
        writeln!(
            sink,
            "{}\t{:e}\t{:e}\t{:.6}",
            row.step, row.lr_embed, row.lr_head, row.loss
        )?;
    }
    sink.flush()?;
    Ok(())
}
