//! Data pipeline, loss, optimizer, LR schedule, and the training loop with
//! best-validation-Dice model selection.
//!
//! Everything is a deterministic function of the seed: the train/val split,
//! per-sample augmentation streams (derived from seed, epoch, and sample
//! index), and the single-threaded optimizer steps.

use crate::autodiff::{Graph, NodeId, Parameter};
use crate::error::{Error, Result};
use crate::metrics::{dice, BinaryMask};
use crate::network::{self, ModelSpec, ModelState};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub const BCE_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub aug_prob: f64,
    pub rot_degrees: f64,
    pub scale_range: (f64, f64),
    pub seed: u64,
    pub val_fraction: f64,
    pub augment: bool,
    /// Stop once validation Dice reaches this value (best state is kept
    /// either way).
    pub target_val_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 8,
            lr0: 0.01,
            weight_decay: 0.01,
            poly_power: 0.9,
            aug_prob: 0.8,
            rot_degrees: 15.0,
            scale_range: (0.8, 1.2),
            seed: 0,
            val_fraction: 0.2,
            augment: true,
            target_val_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(Error::InvalidArgument(format!(
                "invalid scale range {:?}",
                self.scale_range
            )));
        }
        Ok(())
    }

    /// Flat `key = value` snapshot written into the run directory.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("epochs = {}\n", self.epochs));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("lr0 = {}\n", self.lr0));
        s.push_str(&format!("weight_decay = {}\n", self.weight_decay));
        s.push_str(&format!("poly_power = {}\n", self.poly_power));
        s.push_str(&format!("aug_prob = {}\n", self.aug_prob));
        s.push_str(&format!("rot_degrees = {}\n", self.rot_degrees));
        s.push_str(&format!("scale_min = {}\n", self.scale_range.0));
        s.push_str(&format!("scale_max = {}\n", self.scale_range.1));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("val_fraction = {}\n", self.val_fraction));
        s.push_str(&format!("augment = {}\n", self.augment));
        if let Some(t) = self.target_val_dice {
            s.push_str(&format!("target_val_dice = {t}\n"));
        }
        s
    }
}

/// One training example: a z-score normalized square image with its binary
/// mask and isotropic pixel spacing.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Vec<f32>,
    pub mask: Vec<bool>,
    pub size: usize,
    pub pixel_spacing: f64,
}

impl Sample {
    pub fn from_raw(pixels: &[u8], mask: Vec<bool>, size: usize, pixel_spacing: f64) -> Result<Self> {
        if pixels.len() != size * size || mask.len() != size * size {
            return Err(Error::ShapeMismatch(format!(
                "sample buffers must be {size}x{size}"
            )));
        }
        Ok(Sample {
            image: zscore(pixels),
            mask,
            size,
            pixel_spacing,
        })
    }

    pub fn gt_mask(&self) -> BinaryMask {
        BinaryMask::new(self.size, self.size, self.mask.clone(), self.pixel_spacing)
            .expect("sample invariants")
    }
}

/// Per-image z-score normalization of 8-bit pixels.
pub fn zscore(pixels: &[u8]) -> Vec<f32> {
    let n = pixels.len() as f64;
    let mean = pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = pixels
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(1e-6);
    pixels
        .iter()
        .map(|&v| ((v as f64 - mean) / std) as f32)
        .collect()
}

/// One affine augmentation: rotation and scaling composed in a single map
/// about the image center.
#[derive(Debug, Clone, Copy)]
pub struct AffineParams {
    pub rot_radians: f64,
    pub scale: f64,
}

/// Draw augmentation parameters; `None` with probability `1 - aug_prob`.
pub fn sample_affine(rng: &mut ChaCha12Rng, cfg: &TrainConfig) -> Option<AffineParams> {
    // draw all randomness unconditionally so the stream advances identically
    // on both branches
    let gate: f64 = rng.random();
    let rot = (rng.random::<f64>() * 2.0 - 1.0) * cfg.rot_degrees.to_radians();
    let scale = cfg.scale_range.0 + rng.random::<f64>() * (cfg.scale_range.1 - cfg.scale_range.0);
    (gate < cfg.aug_prob).then_some(AffineParams {
        rot_radians: rot,
        scale,
    })
}

/// Apply the affine map: bilinear interpolation with zero padding for the
/// image, nearest-neighbor re-binarized for the mask. Pixel spacing rescales
/// by the inverse zoom factor.
pub fn apply_affine(sample: &Sample, params: AffineParams) -> Sample {
    let s = sample.size;
    let center = (s as f64 - 1.0) / 2.0;
    let (sin, cos) = (-params.rot_radians).sin_cos();
    let inv_scale = 1.0 / params.scale;
    let mut image = vec![0.0f32; s * s];
    let mut mask = vec![false; s * s];
    for r in 0..s {
        for c in 0..s {
            let y = r as f64 - center;
            let x = c as f64 - center;
            let sx = (cos * x - sin * y) * inv_scale + center;
            let sy = (sin * x + cos * y) * inv_scale + center;
            // bilinear
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let mut acc = 0.0f64;
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let xi = x0 + dx;
                    let yi = y0 + dy;
                    if xi >= 0.0 && yi >= 0.0 && (xi as usize) < s && (yi as usize) < s {
                        acc += wy * wx * sample.image[yi as usize * s + xi as usize] as f64;
                    }
                }
            }
            image[r * s + c] = acc as f32;
            // nearest neighbor, outside = background
            let nx = sx.round();
            let ny = sy.round();
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < s && (ny as usize) < s {
                mask[r * s + c] = sample.mask[ny as usize * s + nx as usize];
            }
        }
    }
    Sample {
        image,
        mask,
        size: s,
        pixel_spacing: sample.pixel_spacing / params.scale,
    }
}

/// Augment a sample with probability `cfg.aug_prob`.
pub fn augment(sample: &Sample, rng: &mut ChaCha12Rng, cfg: &TrainConfig) -> Sample {
    match sample_affine(rng, cfg) {
        Some(p) => apply_affine(sample, p),
        None => sample.clone(),
    }
}

/// Combined binary cross entropy and soft-Dice loss, equal weights:
/// BCE(clamped pred, target) + (1 - mean soft-Dice per sample).
pub fn bce_dice_loss<T: crate::tensor::Scalar>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &Tensor<T>,
) -> Result<NodeId> {
    if g.shape(pred) != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "loss: pred {:?} vs target {:?}",
            g.shape(pred),
            target.shape()
        )));
    }
    if !g.value(pred).iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("loss: non-finite predictions".into()));
    }
    let n_batch = target.shape()[0];
    let numel = target.numel();
    let t = g.constant(target.clone());

    // BCE with clamped probabilities
    let p = g.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = g.log(p);
    let neg_p = g.neg(p);
    let one_minus_p = g.add_scalar(neg_p, 1.0);
    let log_1mp = g.log(one_minus_p);
    let neg_t = g.neg(t);
    let one_minus_t = g.add_scalar(neg_t, 1.0);
    let pos = g.mul(t, log_p)?;
    let negv = g.mul(one_minus_t, log_1mp)?;
    let ll = g.add(pos, negv)?;
    let ll_sum = g.sum_all(ll);
    let bce = g.scale(ll_sum, -1.0 / numel as f64);

    // soft Dice per sample on the raw probabilities
    let pt = g.mul(pred, t)?;
    let inter = g.sum_per_sample(pt)?;
    let p_sum = g.sum_per_sample(pred)?;
    let t_sum = g.sum_per_sample(t)?;
    let two_inter = g.scale(inter, 2.0);
    let numer = g.add_scalar(two_inter, DICE_SMOOTH);
    let denom_sum = g.add(p_sum, t_sum)?;
    let denom = g.add_scalar(denom_sum, DICE_SMOOTH);
    let ratio = g.div(numer, denom)?;
    let dice_sum = g.sum_all(ratio);
    let dice_mean = g.scale(dice_sum, 1.0 / n_batch as f64);
    let neg_dice = g.neg(dice_mean);
    let one_minus_dice = g.add_scalar(neg_dice, 1.0);

    g.add(bce, one_minus_dice)
}

/// Polynomial decay: lr0 * (1 - epoch/epochs)^power.
pub fn poly_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    debug_assert!(epoch < cfg.epochs);
    cfg.lr0 * (1.0 - epoch as f64 / cfg.epochs as f64).powf(cfg.poly_power)
}

/// AdamW with decoupled weight decay and bias-corrected moments.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(param_sizes: &[usize], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Apply one update from the gradients stored on the parameters. If any
    /// gradient is non-finite the step is skipped (and reported) so long
    /// unattended runs survive a bad batch.
    pub fn step(&mut self, params: &mut [&mut Parameter<f32>], lr: f64) -> Result<bool> {
        for p in params.iter() {
            let grad = p.tensor.grad().ok_or_else(|| {
                Error::InvalidArgument(format!("parameter '{}' has no gradient", p.name))
            })?;
            if !grad.iter().all(|g| g.is_finite()) {
                return Ok(false);
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, p) in params.iter_mut().enumerate() {
            let grad: Vec<f64> = p
                .tensor
                .grad()
                .expect("checked above")
                .iter()
                .map(|&g| g as f64)
                .collect();
            let decay = 1.0 - lr * self.weight_decay;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (i, value) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut x = *value as f64;
                x *= decay;
                x -= lr * mhat / (vhat.sqrt() + self.eps);
                *value = x as f32;
            }
        }
        Ok(true)
    }
}

/// Deterministic shuffled split into disjoint train/validation index sets.
pub fn split_dataset(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub skipped_steps: usize,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_dice\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.lr, e.train_loss, e.val_dice
            ));
        }
        s
    }
}

fn batch_tensor(samples: &[Sample]) -> (Tensor<f32>, Tensor<f32>) {
    let s = samples[0].size;
    let n = samples.len();
    let mut img = Vec::with_capacity(n * s * s);
    let mut msk = Vec::with_capacity(n * s * s);
    for sample in samples {
        img.extend_from_slice(&sample.image);
        msk.extend(sample.mask.iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
    }
    (
        Tensor::new(&[n, 1, s, s], img).expect("sized"),
        Tensor::new(&[n, 1, s, s], msk).expect("sized"),
    )
}

/// Mean hard Dice (threshold 0.5) over a sample list, full-image inference
/// without augmentation.
pub fn validation_dice(state: &ModelState<f32>, samples: &[&Sample], batch: usize) -> Result<f64> {
    let mut dices = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let owned: Vec<Sample> = chunk.iter().map(|&s| s.clone()).collect();
        let (img, _) = batch_tensor(&owned);
        let probs = network::predict(state, img)?;
        let s = owned[0].size;
        for (i, sample) in owned.iter().enumerate() {
            let plane = &probs.data()[i * s * s..][..s * s];
            let pred = BinaryMask::new(
                s,
                s,
                plane.iter().map(|&p| p >= 0.5).collect(),
                sample.pixel_spacing,
            )?;
            dices.push(dice(&pred, &sample.gt_mask())?);
        }
    }
    Ok(dices.iter().sum::<f64>() / dices.len().max(1) as f64)
}

/// Train a model on the dataset with an internal 80/20 split; returns the
/// state with the best validation Dice and the per-epoch log.
pub fn train(
    dataset: &[Sample],
    cfg: &TrainConfig,
    spec: &ModelSpec,
) -> Result<(ModelState<f32>, RunLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let any_fg = dataset.iter().any(|s| s.mask.iter().any(|&b| b));
    let any_bg = dataset.iter().any(|s| s.mask.iter().any(|&b| !b));
    if !any_fg || !any_bg {
        return Err(Error::InvalidArgument(
            "single-class dataset: masks must contain both classes".into(),
        ));
    }
    for s in dataset {
        if s.size != spec.image_size {
            return Err(Error::ShapeMismatch(format!(
                "sample size {} does not match model input {}",
                s.size, spec.image_size
            )));
        }
    }

    let (train_idx, val_idx) = split_dataset(dataset.len(), cfg.val_fraction, cfg.seed);
    let val_samples: Vec<&Sample> = val_idx.iter().map(|&i| &dataset[i]).collect();

    let mut state = network::build::<f32>(spec, cfg.seed);
    let sizes: Vec<usize> = state.params().iter().map(|p| p.numel()).collect();
    let mut opt = AdamW::new(&sizes, cfg.weight_decay);

    let mut log = RunLog::default();
    let mut best_state = state.clone();
    let mut best_dice = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, cfg);
        let mut order = train_idx.clone();
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5157_AB5E);
        shuffle_rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // per-sample augmentation streams derived from (seed, epoch, index)
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xA0_6E57);
                        rng.set_stream(((epoch as u64) << 32) | i as u64);
                        augment(&dataset[i], &mut rng, cfg)
                    } else {
                        dataset[i].clone()
                    }
                })
                .collect();
            let (img, target) = batch_tensor(&batch);
            let mut g = Graph::new();
            let model = network::forward(&mut g, &state, img)?;
            let loss = bce_dice_loss(&mut g, model.output, &target)?;
            epoch_loss += g.value(loss)[0] as f64;
            batches += 1;
            g.backward(loss)?;
            {
                let mut params = state.params_mut();
                for (p, &leaf) in params.iter_mut().zip(&model.leaves) {
                    let grad = g
                        .grad(leaf)
                        .map(|s| s.to_vec())
                        .unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
                    p.tensor.set_grad(grad)?;
                }
                if !opt.step(&mut params, lr)? {
                    log.skipped_steps += 1;
                }
            }
        }

        let val_dice = validation_dice(&state, &val_samples, cfg.batch_size)?;
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_dice,
        });
        if val_dice > best_dice {
            best_dice = val_dice;
            best_epoch = epoch;
            best_state = state.clone();
        }
        if let Some(target) = cfg.target_val_dice {
            if best_dice >= target {
                break;
            }
        }
    }

    log.best_epoch = best_epoch;
    log.best_val_dice = best_dice;
    Ok((best_state, log))
}
