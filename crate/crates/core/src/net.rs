//! Per-voxel translation regressor.
//!
//! Each of the two voxel clouds goes through the same per-point layers
//! (`tanh` after every layer) and is max-pooled to a feature vector. The two
//! feature vectors are concatenated and fed through a small feed-forward head
//! whose last layer is linear and outputs a translation in meters.
//!
//! Gradients are computed by hand in reverse mode. Max-pooling routes each
//! feature's gradient to the single point that produced the maximum (first
//! index on ties).

use std::fs;
use std::io::Write;
use std::path::Path;

use matrixmultiply::dgemm;
use nalgebra::{Point3, Vector3};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::TruncationBasis;
use crate::error::{Error, Result};

/// Points drawn from each scan per voxel.
pub const SAMPLE_POINTS: usize = 100;
pub const ENCODER_DIMS: [usize; 4] = [3, 32, 64, 128];
pub const HEAD_DIMS: [usize; 4] = [256, 128, 64, 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Output width.
    pub rows: usize,
    /// Input width.
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Self {
            rows,
            cols,
            weights: (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect(),
            bias: vec![0.0; rows],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub encoder: Vec<Layer>,
    pub head: Vec<Layer>,
}

impl NetParams {
    /// Default architecture, Glorot-uniform weights, zero final layer.
    pub fn new(seed: u64) -> Self {
        Self::with_dims(&ENCODER_DIMS, &HEAD_DIMS, seed)
    }

    /// `encoder_dims` starts at 3; `head_dims` starts at twice the last encoder
    /// width and ends at 3.
    pub fn with_dims(encoder_dims: &[usize], head_dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = encoder_dims
            .windows(2)
            .map(|w| Layer::glorot(w[1], w[0], &mut rng))
            .collect();
        let n_head = head_dims.len() - 1;
        let head = head_dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                if i + 1 == n_head {
                    Layer::zeros(w[1], w[0])
                } else {
                    Layer::glorot(w[1], w[0], &mut rng)
                }
            })
            .collect();
        Self { encoder, head }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |ls: &[Layer]| ls.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect();
        Self {
            encoder: z(&self.encoder),
            head: z(&self.head),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder.iter().chain(self.head.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.encoder.iter_mut().chain(self.head.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat view over every weight then bias, layer by layer.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn validate(&self) -> Result<()> {
        let shape = |m: String| Err(Error::ParamShape(m));
        if self.encoder.is_empty() || self.head.is_empty() {
            return shape("encoder and head need at least one layer each".into());
        }
        if self.encoder[0].cols != 3 {
            return shape(format!("encoder input width {} != 3", self.encoder[0].cols));
        }
        for (name, layers) in [("encoder", &self.encoder), ("head", &self.head)] {
            for (i, l) in layers.iter().enumerate() {
                if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                    return shape(format!("{name} layer {i}: storage does not match {}x{}", l.rows, l.cols));
                }
                if i > 0 && layers[i - 1].rows != l.cols {
                    return shape(format!(
                        "{name} layer {i}: input width {} != previous output {}",
                        l.cols,
                        layers[i - 1].rows
                    ));
                }
            }
        }
        let feat = self.encoder.last().unwrap().rows;
        if self.head[0].cols != 2 * feat {
            return shape(format!("head input width {} != 2 x {feat}", self.head[0].cols));
        }
        if self.head.last().unwrap().rows != 3 {
            return shape("head output width must be 3".into());
        }
        if !self.values().all(|v| v.is_finite()) {
            return shape("non-finite parameter".into());
        }
        Ok(())
    }
}

/// One training/inference unit: both voxel clouds in a voxel-local frame
/// centered on the reference points' mean.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSample {
    pub reference: Vec<Point3<f64>>,
    pub new: Vec<Point3<f64>>,
    /// Translation that maps the new points onto the reference points.
    pub truth: Vector3<f64>,
    pub basis: TruncationBasis,
}

impl VoxelSample {
    /// Shifts both point sets by the mean of `reference`.
    pub fn centered(
        reference: &[Point3<f64>],
        new: &[Point3<f64>],
        truth: Vector3<f64>,
        basis: TruncationBasis,
    ) -> Self {
        let n = reference.len().max(1) as f64;
        let c = reference.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
        Self {
            reference: reference.iter().map(|p| p - c).collect(),
            new: new.iter().map(|p| p - c).collect(),
            truth,
            basis,
        }
    }

    /// Mean difference `mean_ref - mean_new`, the D2D translation estimate.
    pub fn mean_difference(&self) -> Vector3<f64> {
        let m = |pts: &[Point3<f64>]| pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / pts.len().max(1) as f64;
        m(&self.reference) - m(&self.new)
    }
}

/// Draws exactly `n` points: without replacement when enough are available,
/// otherwise every point once and the rest uniformly with replacement.
pub fn sample_voxel_points(points: &[Point3<f64>], n: usize, seed: u64) -> Result<Vec<Point3<f64>>> {
    if points.is_empty() {
        return Err(Error::DegenerateCell { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if points.len() >= n {
        let mut idx = index::sample(&mut rng, points.len(), n).into_vec();
        idx.sort_unstable();
        Ok(idx.into_iter().map(|i| points[i]).collect())
    } else {
        let mut out = points.to_vec();
        while out.len() < n {
            out.push(points[rng.random_range(0..points.len())]);
        }
        Ok(out)
    }
}

/// `|| L U^T (prediction - truth) ||^2`.
pub fn projected_loss(prediction: &Vector3<f64>, truth: &Vector3<f64>, basis: &TruncationBasis) -> f64 {
    basis.project(&(prediction - truth)).norm_squared()
}

// ---------------------------------------------------------------------------
// dense kernels

/// `out[n x rows] = input[n x cols] * W^T + b`.
fn affine_rows(layer: &Layer, input: &[f64], n: usize, out: &mut Vec<f64>) {
    out.clear();
    out.reserve(n * layer.rows);
    for _ in 0..n {
        out.extend_from_slice(&layer.bias);
    }
    unsafe {
        dgemm(
            n,
            layer.cols,
            layer.rows,
            1.0,
            input.as_ptr(),
            layer.cols as isize,
            1,
            layer.weights.as_ptr(),
            1,
            layer.cols as isize,
            1.0,
            out.as_mut_ptr(),
            layer.rows as isize,
            1,
        );
    }
}

/// `grad_w[rows x cols] += dz^T[rows x n] * input[n x cols]`.
fn accumulate_weight_grad(dz: &[f64], input: &[f64], n: usize, rows: usize, cols: usize, grad_w: &mut [f64]) {
    unsafe {
        dgemm(
            rows,
            n,
            cols,
            1.0,
            dz.as_ptr(),
            1,
            rows as isize,
            input.as_ptr(),
            cols as isize,
            1,
            1.0,
            grad_w.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
}

/// `d_in[n x cols] = dz[n x rows] * W[rows x cols]`.
fn backprop_input(dz: &[f64], layer: &Layer, n: usize, d_in: &mut Vec<f64>) {
    d_in.clear();
    d_in.resize(n * layer.cols, 0.0);
    unsafe {
        dgemm(
            n,
            layer.rows,
            layer.cols,
            1.0,
            dz.as_ptr(),
            layer.rows as isize,
            1,
            layer.weights.as_ptr(),
            layer.cols as isize,
            1,
            0.0,
            d_in.as_mut_ptr(),
            layer.cols as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// forward

/// Activations of the per-point encoder over a stack of clouds.
struct EncoderPass {
    /// `acts[0]` is the raw input; `acts[l]` the output of layer `l - 1`.
    acts: Vec<Vec<f64>>,
    /// Start row of every cloud, plus the total row count at the end.
    offsets: Vec<usize>,
    /// Per cloud, per feature: pooled value and the row that produced it.
    pooled: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
}

fn encode(encoder: &[Layer], clouds: &[&[Point3<f64>]]) -> EncoderPass {
    let mut offsets = Vec::with_capacity(clouds.len() + 1);
    let mut input = Vec::new();
    offsets.push(0);
    for c in clouds {
        for p in c.iter() {
            input.extend_from_slice(&[p.x, p.y, p.z]);
        }
        offsets.push(offsets.last().unwrap() + c.len());
    }
    let rows = *offsets.last().unwrap();
    let mut acts = Vec::with_capacity(encoder.len() + 1);
    acts.push(input);
    for layer in encoder {
        let mut out = Vec::new();
        affine_rows(layer, acts.last().unwrap(), rows, &mut out);
        out.iter_mut().for_each(|v| *v = v.tanh());
        acts.push(out);
    }
    let feat = encoder.last().unwrap().rows;
    let last = acts.last().unwrap();
    let mut pooled = Vec::with_capacity(clouds.len());
    let mut argmax = Vec::with_capacity(clouds.len());
    for w in offsets.windows(2) {
        let mut best = vec![f64::NEG_INFINITY; feat];
        let mut arg = vec![w[0]; feat];
        for r in w[0]..w[1] {
            let row = &last[r * feat..(r + 1) * feat];
            for (c, &v) in row.iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    arg[c] = r;
                }
            }
        }
        pooled.push(best);
        argmax.push(arg);
    }
    EncoderPass {
        acts,
        offsets,
        pooled,
        argmax,
    }
}

/// Head activations for one sample; `acts[0]` is the concatenated feature.
struct HeadPass {
    acts: Vec<Vec<f64>>,
}

fn head_forward(head: &[Layer], feature: Vec<f64>) -> HeadPass {
    let mut acts = Vec::with_capacity(head.len() + 1);
    acts.push(feature);
    for (i, layer) in head.iter().enumerate() {
        let x = acts.last().unwrap();
        let mut z = layer.bias.clone();
        for (r, zr) in z.iter_mut().enumerate() {
            let w = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
            *zr += w.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        if i + 1 < head.len() {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(z);
    }
    HeadPass { acts }
}

fn check_sample(sample: &VoxelSample) -> Result<()> {
    if sample.reference.is_empty() || sample.new.is_empty() {
        return Err(Error::InvalidInput("voxel sample has an empty point set".into()));
    }
    Ok(())
}

struct BatchPass {
    enc: EncoderPass,
    heads: Vec<HeadPass>,
}

fn batch_forward(params: &NetParams, samples: &[&VoxelSample]) -> BatchPass {
    let clouds: Vec<&[Point3<f64>]> = samples
        .iter()
        .flat_map(|s| [s.reference.as_slice(), s.new.as_slice()])
        .collect();
    let enc = encode(&params.encoder, &clouds);
    let heads = (0..samples.len())
        .map(|i| {
            let mut f = enc.pooled[2 * i].clone();
            f.extend_from_slice(&enc.pooled[2 * i + 1]);
            head_forward(&params.head, f)
        })
        .collect();
    BatchPass { enc, heads }
}

fn output(head: &HeadPass) -> Vector3<f64> {
    let o = head.acts.last().unwrap();
    Vector3::new(o[0], o[1], o[2])
}

/// Raw translation estimate for one voxel.
pub fn forward(params: &NetParams, sample: &VoxelSample) -> Result<Vector3<f64>> {
    params.validate()?;
    check_sample(sample)?;
    Ok(output(&batch_forward(params, &[sample]).heads[0]))
}

/// Raw estimates for many voxels at once.
pub fn forward_batch(params: &NetParams, samples: &[VoxelSample]) -> Result<Vec<Vector3<f64>>> {
    params.validate()?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        for s in chunk {
            check_sample(s)?;
        }
        let refs: Vec<&VoxelSample> = chunk.iter().collect();
        out.extend(batch_forward(params, &refs).heads.iter().map(output));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// backward

fn backward_pass(params: &NetParams, samples: &[&VoxelSample], pass: &BatchPass, grads: &mut NetParams) -> f64 {
    let n_head = params.head.len();
    let feat = params.encoder.last().unwrap().rows;
    let mut total_loss = 0.0;
    // gradient w.r.t. every pooled feature, per cloud
    let mut d_pooled: Vec<Vec<f64>> = Vec::with_capacity(2 * samples.len());

    for (sample, head) in samples.iter().zip(&pass.heads) {
        let pred = output(head);
        let diff = pred - sample.truth;
        total_loss += sample.basis.project(&diff).norm_squared();
        let g = 2.0 * sample.basis.projector3() * diff;
        let mut delta = vec![g.x, g.y, g.z];
        for li in (0..n_head).rev() {
            let layer = &params.head[li];
            let x = &head.acts[li];
            if li + 1 < n_head {
                let a = &head.acts[li + 1];
                for (d, av) in delta.iter_mut().zip(a) {
                    *d *= 1.0 - av * av;
                }
            }
            let gl = &mut grads.head[li];
            for r in 0..layer.rows {
                gl.bias[r] += delta[r];
                let row = &mut gl.weights[r * layer.cols..(r + 1) * layer.cols];
                for (w, xv) in row.iter_mut().zip(x) {
                    *w += delta[r] * xv;
                }
            }
            let mut prev = vec![0.0; layer.cols];
            for r in 0..layer.rows {
                let w = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                for (p, wv) in prev.iter_mut().zip(w) {
                    *p += delta[r] * wv;
                }
            }
            delta = prev;
        }
        d_pooled.push(delta[..feat].to_vec());
        d_pooled.push(delta[feat..].to_vec());
    }

    // last encoder layer: only the argmax rows receive gradient
    let enc = &pass.enc;
    let n_enc = params.encoder.len();
    let rows = *enc.offsets.last().unwrap();
    let last = &params.encoder[n_enc - 1];
    let h_last = &enc.acts[n_enc];
    let h_prev = &enc.acts[n_enc - 1];
    let mut d_prev = vec![0.0; rows * last.cols];
    {
        let gl = &mut grads.encoder[n_enc - 1];
        for (cloud, dp) in d_pooled.iter().enumerate() {
            for (c, &d) in dp.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let r = enc.argmax[cloud][c];
                let a = h_last[r * feat + c];
                let dz = d * (1.0 - a * a);
                gl.bias[c] += dz;
                let x = &h_prev[r * last.cols..(r + 1) * last.cols];
                let gw = &mut gl.weights[c * last.cols..(c + 1) * last.cols];
                let w = &last.weights[c * last.cols..(c + 1) * last.cols];
                let dx = &mut d_prev[r * last.cols..(r + 1) * last.cols];
                for j in 0..last.cols {
                    gw[j] += dz * x[j];
                    dx[j] += dz * w[j];
                }
            }
        }
    }

    // remaining encoder layers are dense
    let mut d_act = d_prev;
    let mut scratch = Vec::new();
    for li in (0..n_enc - 1).rev() {
        let layer = &params.encoder[li];
        let a = &enc.acts[li + 1];
        for (d, av) in d_act.iter_mut().zip(a) {
            *d *= 1.0 - av * av;
        }
        let gl = &mut grads.encoder[li];
        for r in 0..rows {
            for (b, d) in gl.bias.iter_mut().zip(&d_act[r * layer.rows..(r + 1) * layer.rows]) {
                *b += d;
            }
        }
        accumulate_weight_grad(&d_act, &enc.acts[li], rows, layer.rows, layer.cols, &mut gl.weights);
        if li > 0 {
            backprop_input(&d_act, layer, rows, &mut scratch);
            std::mem::swap(&mut d_act, &mut scratch);
        }
    }
    total_loss
}

/// Loss of one sample and its gradient with respect to every parameter.
pub fn backward(params: &NetParams, sample: &VoxelSample) -> Result<(f64, NetParams)> {
    params.validate()?;
    check_sample(sample)?;
    let mut grads = params.zeros_like();
    let pass = batch_forward(params, &[sample]);
    let loss = backward_pass(params, &[sample], &pass, &mut grads);
    Ok((loss, grads))
}

/// Summed loss and summed gradient over a batch.
pub fn batch_gradient(params: &NetParams, samples: &[&VoxelSample]) -> Result<(f64, NetParams)> {
    params.validate()?;
    for s in samples {
        check_sample(s)?;
    }
    let mut grads = params.zeros_like();
    let pass = batch_forward(params, samples);
    let loss = backward_pass(params, samples, &pass, &mut grads);
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            validation_fraction: 0.2,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidInput("validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 0 is the untrained network.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

impl EpochStats {
    /// Root of the mean projected loss on the validation split, meters.
    pub fn validation_rms(&self) -> f64 {
        self.validation_loss.sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub history: Vec<EpochStats>,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

/// Mean projected loss of `params` over the selected samples.
pub fn mean_loss(params: &NetParams, samples: &[VoxelSample], indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let chosen: Vec<VoxelSample> = indices.iter().map(|&i| samples[i].clone()).collect();
    let preds = forward_batch(params, &chosen)?;
    Ok(preds
        .iter()
        .zip(&chosen)
        .map(|(p, s)| projected_loss(p, &s.truth, &s.basis))
        .sum::<f64>()
        / chosen.len() as f64)
}

/// RMS of the reduced truth, i.e. the error of always predicting zero.
pub fn zero_predictor_rms(samples: &[VoxelSample], indices: &[usize]) -> f64 {
    let sum: f64 = indices
        .iter()
        .map(|&i| samples[i].basis.project(&samples[i].truth).norm_squared())
        .sum();
    (sum / indices.len().max(1) as f64).sqrt()
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

pub fn train(dataset: &[VoxelSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(NetParams::new(cfg.seed), dataset, cfg)
}

/// Trains starting from the given parameters.
pub fn train_from(mut params: NetParams, dataset: &[VoxelSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if dataset.len() >= 2 {
        ((dataset.len() as f64 * cfg.validation_fraction).round() as usize).min(dataset.len() - 1)
    } else {
        0
    };
    let validation_indices = order[..n_val].to_vec();
    let mut train_indices = order[n_val..].to_vec();

    let eval = |p: &NetParams, train_idx: &[usize]| -> Result<(f64, f64)> {
        let t = mean_loss(p, dataset, train_idx)?;
        let v = if validation_indices.is_empty() { t } else { mean_loss(p, dataset, &validation_indices)? };
        Ok((t, v))
    };
    let (t0, v0) = eval(&params, &train_indices)?;
    let mut history = vec![EpochStats {
        epoch: 0,
        train_loss: t0,
        validation_loss: v0,
    }];

    let n = params.num_params();
    let mut adam = AdamState {
        m: vec![0.0; n],
        v: vec![0.0; n],
        t: 0,
    };
    for epoch in 1..=cfg.epochs {
        train_indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_indices.chunks(cfg.batch_size) {
            let samples: Vec<&VoxelSample> = batch.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = batch_gradient(&params, &samples)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += loss;
            let scale = 1.0 / batch.len() as f64;
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in params.values_mut().zip(grads.values()) {
                        *p -= cfg.learning_rate * g * scale;
                    }
                }
                Optimizer::Adam => {
                    const B1: f64 = 0.9;
                    const B2: f64 = 0.999;
                    const EPS: f64 = 1e-8;
                    adam.t += 1;
                    let c1 = 1.0 - B1.powi(adam.t);
                    let c2 = 1.0 - B2.powi(adam.t);
                    for ((p, g), (m, v)) in params
                        .values_mut()
                        .zip(grads.values())
                        .zip(adam.m.iter_mut().zip(adam.v.iter_mut()))
                    {
                        let g = g * scale;
                        *m = B1 * *m + (1.0 - B1) * g;
                        *v = B2 * *v + (1.0 - B2) * g * g;
                        *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + EPS);
                    }
                }
            }
        }
        let train_loss = epoch_loss / train_indices.len() as f64;
        let validation_loss = if validation_indices.is_empty() {
            train_loss
        } else {
            mean_loss(&params, dataset, &validation_indices)?
        };
        if !train_loss.is_finite() || !validation_loss.is_finite() || !params.values().all(|v| v.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        log::debug!("epoch {epoch}: train {train_loss:.6e} validation {validation_loss:.6e}");
        history.push(EpochStats {
            epoch,
            train_loss,
            validation_loss,
        });
    }
    Ok(TrainOutcome {
        params,
        history,
        train_indices,
        validation_indices,
    })
}

// ---------------------------------------------------------------------------
// persistence
//
// magic "VXNETPRM", u32 version, u32 layer count, u32 encoder layer count,
// then per layer: u32 rows, u32 cols, rows*cols f64 weights (row-major),
// rows f64 biases. All little-endian.

const MAGIC: &[u8; 8] = b"VXNETPRM";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_params(params: &NetParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&((params.encoder.len() + params.head.len()) as u32).to_le_bytes());
    out.extend_from_slice(&(params.encoder.len() as u32).to_le_bytes());
    for l in params.layers() {
        out.extend_from_slice(&(l.rows as u32).to_le_bytes());
        out.extend_from_slice(&(l.cols as u32).to_le_bytes());
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    version: u32,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::WeightFormat {
                version: self.version,
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).unwrap_or(usize::MAX), what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<NetParams> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        version: 0,
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::WeightFormat {
            version: 0,
            reason: "bad magic".into(),
        });
    }
    r.version = r.u32("version")?;
    if r.version != FORMAT_VERSION {
        return Err(Error::WeightFormat {
            version: r.version,
            reason: format!("unsupported version (expected {FORMAT_VERSION})"),
        });
    }
    let n_layers = r.u32("layer count")? as usize;
    let n_enc = r.u32("encoder layer count")? as usize;
    if n_enc == 0 || n_enc >= n_layers {
        return Err(Error::ParamShape(format!("{n_enc} encoder layers of {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for i in 0..n_layers {
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let weights = r.f64s(rows.saturating_mul(cols), &format!("layer {i} weights"))?;
        let bias = r.f64s(rows, &format!("layer {i} bias"))?;
        layers.push(Layer {
            rows,
            cols,
            weights,
            bias,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFormat {
            version: r.version,
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let head = layers.split_off(n_enc);
    let params = NetParams {
        encoder: layers,
        head,
    };
    params.validate()?;
    Ok(params)
}

/// Writes to a sibling temp file first so a failed write never leaves a
/// partial weight file behind.
pub fn save_params(params: &NetParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_params(params))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<NetParams> {
    decode_params(&fs::read(path)?)
}
