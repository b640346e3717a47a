//! Mini-batch training loop (shuffled batches, MSE loss, AdamW) and the
//! inference path from a subspace split to source positions.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sort_canonical, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, SourcePosition};
use crate::music::{LocationEstimate, Method};
use crate::rng::{derive_seed, rng_from_seed};
use crate::subspace::{cnn_input_tensor, SubspaceSplit};
use crate::tensor::Tensor;

use super::layers::{mse_loss, mse_loss_grad, Mode};
use super::model::{Architecture, LabelNormalizer, Model};
use super::optim::{AdamWConfig, AdamWState};

/// Loop hyperparameters. `paper()` mirrors the published recipe
/// (lr 1e-4, weight decay 0.01, batch 32, 1200 epochs).
///
/// `augment_flips` enables mirror augmentation: reflecting the whole scene
/// across the array's horizontal or vertical mid-plane permutes the antenna
/// rows of the eigenvector tensor (the canonical phase fix commutes with
/// antenna permutations) and reflects the source coordinates, so each record
/// yields up to four exactly valid training samples.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment_flips: bool,
}

impl TrainingConfig {
    pub fn paper(seed: u64) -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 1200,
            seed,
            augment_flips: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epoch count must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One structured run-log entry per epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    /// Structured text line for the run log.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} loss={:e} wall_seconds={:.3}",
            self.epoch, self.loss, self.wall_seconds
        )
    }
}

/// Train a freshly initialized model on the dataset. Labels are normalized
/// to [-1, 1] using the prior's Cartesian bounding box; the bounds travel
/// with the returned model. Deterministic for a fixed config seed.
pub fn train(
    dataset: &Dataset,
    arch: Architecture,
    config: &TrainingConfig,
) -> Result<(Model, Vec<EpochLog>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let n = dataset.prior.geom.num_antennas();
    if arch.input_size != n {
        return Err(Error::InvalidArgument(format!(
            "architecture expects N={}, dataset has N={n}",
            arch.input_size
        )));
    }
    if arch.num_sources != dataset.prior.num_sources {
        return Err(Error::InvalidArgument(format!(
            "architecture expects K={}, dataset has K={}",
            arch.num_sources, dataset.prior.num_sources
        )));
    }
    let (lo, hi) = dataset.prior.cartesian_bounding_box();
    let normalizer = LabelNormalizer::new(lo, hi)?;
    let mut model = Model::new(arch, normalizer.clone(), derive_seed(config.seed, 0))?;
    let mut shuffle_rng = rng_from_seed(derive_seed(config.seed, 1));
    let mut dropout_rng = rng_from_seed(derive_seed(config.seed, 2));

    let out_width = model.arch.output_width();
    let targets: Vec<Vec<f64>> = dataset
        .records
        .iter()
        .map(|r| normalizer.normalize(&r.labels))
        .collect();

    let opt_config = AdamWConfig::new(config.learning_rate, config.weight_decay);
    let mut opt = AdamWState::new(&mut model);
    let mut history = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let per_sample = 2 * n * n;
    let mut augment_rng = rng_from_seed(derive_seed(config.seed, 3));
    let geom = &dataset.prior.geom;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        indices.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            // batch norm needs at least two rows in train mode; a leftover
            // singleton batch is duplicated, which leaves the loss and the
            // gradient direction unchanged
            let batch: Vec<usize> = if chunk.len() == 1 {
                vec![chunk[0], chunk[0]]
            } else {
                chunk.to_vec()
            };
            let b = batch.len();
            let mut input = Vec::with_capacity(b * per_sample);
            let mut target = Vec::with_capacity(b * out_width);
            for &i in &batch {
                let record = &dataset.records[i];
                let (flip_y, flip_z) = if config.augment_flips {
                    (augment_rng.gen::<bool>(), augment_rng.gen::<bool>())
                } else {
                    (false, false)
                };
                if flip_y || flip_z {
                    append_flipped_input(&mut input, &record.input, geom, n, flip_y, flip_z);
                    target.extend(flipped_target(
                        &record.labels,
                        geom,
                        &normalizer,
                        flip_y,
                        flip_z,
                    )?);
                } else {
                    input.extend(record.input.iter().map(|&v| v as f64));
                    target.extend_from_slice(&targets[i]);
                }
            }
            let input = Tensor::from_vec(&[b, 2, n, n], input)?;
            let target = Tensor::from_vec(&[b, out_width], target)?;
            let pred = model.forward(&input, Mode::Train, &mut dropout_rng)?;
            let loss = mse_loss(&pred, &target)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "loss became {loss} at epoch {epoch}"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            let grad = mse_loss_grad(&pred, &target)?;
            model.zero_grads();
            model.backward(&grad)?;
            opt.step(&mut model, &opt_config);
        }
        history.push(EpochLog {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((model, history))
}

/// Append the eigenvector tensor of `record_input` with its antenna rows
/// permuted by the requested mirror reflections. Reflecting the scene across
/// the array mid-plane maps antenna (m_y, m_z) to (n_y-1-m_y, m_z) (and
/// likewise for z); the permuted tensor is exactly the canonical tensor of
/// the reflected scene because eigenvalues, the column order, and the
/// phase-fix entry are all permutation-invariant.
fn append_flipped_input(
    out: &mut Vec<f64>,
    record_input: &[f32],
    geom: &ArrayGeometry,
    n: usize,
    flip_y: bool,
    flip_z: bool,
) {
    for channel in 0..2 {
        let plane = &record_input[channel * n * n..(channel + 1) * n * n];
        for row in 0..n {
            let m_y = row % geom.n_y;
            let m_z = row / geom.n_y;
            let src_y = if flip_y { geom.n_y - 1 - m_y } else { m_y };
            let src_z = if flip_z { geom.n_z - 1 - m_z } else { m_z };
            let src = src_z * geom.n_y + src_y;
            out.extend(plane[src * n..(src + 1) * n].iter().map(|&v| v as f64));
        }
    }
}

/// Normalized labels of the mirror-reflected scene. The reflection across
/// the mid-plane maps a source coordinate y to L_y - y, where L_y is the
/// array extent along y (the array is anchored at the reference antenna, so
/// the mirror plane sits at L_y / 2); likewise for z. Sources are re-sorted
/// into the canonical label order afterwards.
fn flipped_target(
    labels: &[f64],
    geom: &ArrayGeometry,
    normalizer: &LabelNormalizer,
    flip_y: bool,
    flip_z: bool,
) -> Result<Vec<f64>> {
    let l_y = (geom.n_y - 1) as f64 * geom.d_y;
    let l_z = (geom.n_z - 1) as f64 * geom.d_z;
    let mut sources = labels
        .chunks_exact(3)
        .map(|c| {
            let y = if flip_y { l_y - c[1] } else { c[1] };
            let z = if flip_z { l_z - c[2] } else { c[2] };
            SourcePosition::from_cartesian(c[0], y, z)
        })
        .collect::<Result<Vec<_>>>()?;
    sort_canonical(&mut sources);
    let meters: Vec<f64> = sources.iter().flat_map(|s| s.cartesian).collect();
    Ok(normalizer.normalize(&meters))
}

/// Run the model on a subspace split and return denormalized source
/// positions with the inference wall time.
pub fn predict_locations(model: &mut Model, split: &SubspaceSplit) -> Result<LocationEstimate> {
    let n = split.eigenvectors.nrows();
    if n != model.arch.input_size {
        return Err(Error::InvalidArgument(format!(
            "model expects N={}, subspace split has N={n}",
            model.arch.input_size
        )));
    }
    let start = Instant::now();
    let tensor = cnn_input_tensor(split);
    let input = Tensor::from_vec(&[1, 2, n, n], tensor.data)?;
    let mut rng = rng_from_seed(0); // unused: dropout is inert in infer mode
    let output = model.forward(&input, Mode::Infer, &mut rng)?;
    let meters = model.normalizer.denormalize(&output.data);
    let positions = meters
        .chunks_exact(3)
        .map(|c| SourcePosition::from_cartesian(c[0], c[1], c[2]))
        .collect::<Result<Vec<_>>>()?;
    Ok(LocationEstimate {
        positions,
        method: Method::Cnn,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        degenerate: false,
    })
}

/// Recompute the training loss of `model` on one batch without mutating it.
/// Dropout is re-seeded identically on every call so the loss is a smooth
/// function of the parameters; used by finite-difference gradient checks.
pub fn loss_with_fixed_dropout(
    model: &Model,
    input: &Tensor,
    target: &Tensor,
    dropout_seed: u64,
) -> Result<f64> {
    let mut probe = model.clone();
    let mut rng = rng_from_seed(dropout_seed);
    let pred = probe.forward(input, Mode::Train, &mut rng)?;
    mse_loss(&pred, target)
}
