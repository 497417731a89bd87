//! Forward charting function (six-layer rectifier MLP) with hand-written
//! backpropagation, Siamese and AoA-augmented losses, and Adam training.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classical::AoaLikelihood;
use crate::scalar::Real;

pub const DEFAULT_WIDTHS: [usize; 5] = [1024, 512, 256, 128, 64];

#[derive(Debug, thiserror::Error)]
pub enum ChartError {
    #[error("input has {found} features, network expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{features} feature rows but a {matrix}x{matrix} dissimilarity matrix")]
    CountMismatch { features: usize, matrix: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("non-finite values in layer {0}")]
    NonFiniteLayer(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("augmented training needs one AoA likelihood per record")]
    MissingAoa,
    #[error("AoA likelihood: {0}")]
    Likelihood(#[from] crate::classical::ClassicalError),
    #[error("all dissimilarities are zero")]
    ZeroDissimilarities,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `in x out`.
    pub w: Array2<T>,
    pub b: Array1<T>,
}

/// Rectifier MLP followed by a fixed output map `z = scale * y + offset`.
/// The output map is not trained; it puts the network's O(1) outputs into
/// the target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub output_scale: T,
    pub output_offset: Array1<T>,
}

pub type Mlp32 = Mlp<f32>;
pub type Mlp64 = Mlp<f64>;

/// Glorot-uniform weights, zero biases.
pub fn init_params<T: Real>(seed: u64, in_dim: usize, widths: &[usize], out_dim: usize) -> Mlp<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![in_dim];
    dims.extend_from_slice(widths);
    dims.push(out_dim);
    let layers = dims
        .windows(2)
        .map(|w| {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            Dense {
                w: Array2::from_shape_simple_fn((w[0], w[1]), || T::lit(rng.gen_range(-bound..=bound))),
                b: Array1::zeros(w[1]),
            }
        })
        .collect();
    Mlp {
        layers,
        output_scale: T::one(),
        output_offset: Array1::zeros(out_dim),
    }
}

/// Post-activation inputs of every layer, kept for backpropagation.
pub struct ForwardCache<T> {
    inputs: Vec<Array2<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn in_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.w.ncols()).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<(), ChartError> {
        if x.ncols() != self.in_dim() {
            return Err(ChartError::DimensionMismatch {
                expected: self.in_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> Result<(Array2<T>, ForwardCache<T>), ChartError> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut pre = h.dot(&layer.w);
            pre += &layer.b;
            if k < last {
                pre.mapv_inplace(|v| v.max(T::zero()));
            }
            inputs.push(h);
            h = pre;
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(ChartError::NonFiniteLayer(last));
        }
        h *= self.output_scale;
        h += &self.output_offset;
        Ok((h, ForwardCache { inputs }))
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>, ChartError> {
        self.forward_cached(x).map(|(z, _)| z)
    }

    /// Gradient of a loss with respect to every parameter, given the loss
    /// gradient `dz` with respect to the (scaled) outputs.
    pub fn backward(&self, cache: &ForwardCache<T>, dz: &Array2<T>) -> Result<Mlp<T>, ChartError> {
        let mut g = dz * self.output_scale;
        let mut grads: Vec<Dense<T>> = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let input = &cache.inputs[k];
            let dw = input.t().dot(&g);
            let db = g.sum_axis(Axis(0));
            if !dw.iter().chain(db.iter()).all(|v| v.is_finite()) {
                return Err(ChartError::NonFiniteLayer(k));
            }
            if k > 0 {
                let mut back = g.dot(&self.layers[k].w.t());
                ndarray::Zip::from(&mut back).and(input).for_each(|b, &a| {
                    if a <= T::zero() {
                        *b = T::zero();
                    }
                });
                g = back;
            }
            grads.push(Dense { w: dw, b: db });
        }
        grads.reverse();
        Ok(Mlp {
            layers: grads,
            output_scale: T::zero(),
            output_offset: Array1::zeros(self.out_dim()),
        })
    }

    /// Rectifier activity pattern for `x`, used to detect kinks.
    pub fn activation_pattern(&self, x: ArrayView2<T>) -> Vec<bool> {
        let mut h = x.to_owned();
        let mut out = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut pre = h.dot(&layer.w);
            pre += &layer.b;
            out.extend(pre.iter().map(|&v| v > T::zero()));
            pre.mapv_inplace(|v| v.max(T::zero()));
            h = pre;
        }
        out
    }

    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    w: l.w.mapv(|v| U::lit(v.as_f64())),
                    b: l.b.mapv(|v| U::lit(v.as_f64())),
                })
                .collect(),
            output_scale: U::lit(self.output_scale.as_f64()),
            output_offset: self.output_offset.mapv(|v| U::lit(v.as_f64())),
        }
    }
}

/// Batched inference, order preserving.
pub fn infer<T: Real>(params: &Mlp<T>, features: ArrayView2<T>) -> Result<Array2<T>, ChartError> {
    const CHUNK: usize = 1024;
    params.check_input(&features)?;
    let mut out = Array2::zeros((features.nrows(), params.out_dim()));
    let mut start = 0;
    while start < features.nrows() {
        let end = (start + CHUNK).min(features.nrows());
        let z = params.forward(features.slice(s![start..end, ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&z);
        start = end;
    }
    Ok(out)
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt()
}

/// `(d - |z_i - z_j|)^2 / (d + beta)`.
pub fn siamese_loss<T: Real>(zi: &[T], zj: &[T], d: T, beta: T) -> T {
    let diff: Vec<T> = zi.iter().zip(zj).map(|(a, b)| *a - *b).collect();
    let e = d - norm(&diff);
    e * e / (d + beta)
}

/// `(1 - lambda)(d - |z_i - z_j|)^2 - lambda (ll(z_i) + ll(z_j))`.
pub fn augmented_loss<T: Real, E>(zi: &[T], zj: &[T], d: T, lambda: T, loglik: impl Fn(&[T]) -> Result<T, E>) -> Result<T, E> {
    let diff: Vec<T> = zi.iter().zip(zj).map(|(a, b)| *a - *b).collect();
    let e = d - norm(&diff);
    let ll = loglik(zi)? + loglik(zj)?;
    Ok((T::one() - lambda) * e * e - lambda * ll)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChartMode {
    Siamese,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: ChartMode,
    pub epochs: usize,
    pub batch_pairs: usize,
    /// Steps per epoch; `None` means `max(1, L / batch_pairs)`.
    pub steps_per_epoch: Option<usize>,
    pub learning_rate: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Divide each augmented loss term by a running average of its size.
    pub normalize_terms: bool,
    pub rng_seed: u64,
    pub out_dim: usize,
    pub widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: ChartMode::Siamese,
            epochs: 200,
            batch_pairs: 512,
            steps_per_epoch: None,
            learning_rate: 1e-3,
            beta: 0.2,
            lambda: 0.5,
            normalize_terms: true,
            rng_seed: 0,
            out_dim: 3,
            widths: DEFAULT_WIDTHS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ChartError> {
        let mut bad = Vec::new();
        if !(self.beta > 0.0) {
            bad.push("beta must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            bad.push("lambda must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            bad.push("learning rate must be positive");
        }
        if self.batch_pairs == 0 {
            bad.push("batch_pairs must be positive");
        }
        if self.out_dim == 0 {
            bad.push("out_dim must be positive");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ChartError::Config(bad.join("; ")))
        }
    }
}

/// Term weights for the augmented loss `w_s S + w_a E`, where `S` is the
/// summed squared distance error and `E` the summed excess negative
/// log-likelihood `sum_b kappa_b (1 - cos_b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub siamese: T,
    pub aoa: T,
}

pub enum LossKind<'a, T> {
    Siamese { beta: T },
    Augmented { weights: LossWeights<T>, aoa: &'a [AoaLikelihood<T>] },
}

/// A batch of index pairs into a feature matrix.
pub struct PairBatch<'a, T> {
    pub features: ArrayView2<'a, T>,
    pub pairs: &'a [(usize, usize)],
    pub targets: &'a [T],
}

pub struct BatchLoss<T> {
    /// Mean loss over the pairs.
    pub loss: T,
    pub siamese_term: T,
    pub aoa_term: T,
    pub grads: Mlp<T>,
}

/// Mean pair loss and its exact gradient. The gradient of `|z_i - z_j|` is
/// taken as zero at `z_i = z_j`.
pub fn loss_gradients<T: Real>(params: &Mlp<T>, batch: &PairBatch<T>, kind: &LossKind<T>) -> Result<BatchLoss<T>, ChartError> {
    let (rows, slot) = unique_rows(batch.pairs, batch.features.nrows());
    let x = batch.features.select(Axis(0), &rows);
    let (z, cache) = params.forward_cached(x.view())?;
    let dim = z.ncols();
    let mut dz = Array2::<T>::zeros(z.dim());
    let n = T::lit(batch.pairs.len() as f64);
    let mut s_total = T::zero();
    let mut a_total = T::zero();
    let mut loss = T::zero();
    for (&(i, j), &d) in batch.pairs.iter().zip(batch.targets) {
        let (si, sj) = (slot[i], slot[j]);
        let diff: Vec<T> = (0..dim).map(|k| z[(si, k)] - z[(sj, k)]).collect();
        let dist = norm(&diff);
        let err = d - dist;
        // d loss / d dist
        let (pair_loss, ddist) = match kind {
            LossKind::Siamese { beta } => (err * err / (d + *beta), -T::lit(2.0) * err / (d + *beta)),
            LossKind::Augmented { weights, .. } => {
                s_total += err * err;
                (weights.siamese * err * err, -T::lit(2.0) * err * weights.siamese)
            }
        };
        loss += pair_loss;
        if dist > T::zero() {
            for k in 0..dim {
                let g = ddist * diff[k] / dist / n;
                dz[(si, k)] += g;
                dz[(sj, k)] -= g;
            }
        }
        if let LossKind::Augmented { weights, aoa } = kind {
            for (rec, row) in [(i, si), (j, sj)] {
                let p: [T; 3] = position_of(&z, row)?;
                let (_, grad) = aoa[rec].value_and_gradient(&p)?;
                let excess = aoa[rec].excess(&p)?;
                a_total += excess;
                loss += weights.aoa * excess;
                for k in 0..3 {
                    dz[(row, k)] -= weights.aoa * grad[k] / n;
                }
            }
        }
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(ChartError::NonFiniteLoss { epoch: 0, step: 0 });
    }
    let grads = params.backward(&cache, &dz)?;
    Ok(BatchLoss {
        loss,
        siamese_term: s_total / n,
        aoa_term: a_total / n,
        grads,
    })
}

fn position_of<T: Real>(z: &Array2<T>, row: usize) -> Result<[T; 3], ChartError> {
    if z.ncols() != 3 {
        return Err(ChartError::Config("augmented charting needs out_dim = 3".into()));
    }
    Ok([z[(row, 0)], z[(row, 1)], z[(row, 2)]])
}

/// Distinct record indices of a pair list and each record's row in that list.
fn unique_rows(pairs: &[(usize, usize)], n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut slot = vec![usize::MAX; n];
    let mut rows = Vec::new();
    for &(i, j) in pairs {
        for r in [i, j] {
            if slot[r] == usize::MAX {
                slot[r] = rows.len();
                rows.push(r);
            }
        }
    }
    (rows, slot)
}

/// Adam state sized like the parameters.
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &Mlp<T>, lr: T) -> Self {
        let n = params.n_params();
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    pub fn step(&mut self, params: &mut Mlp<T>, grads: &Mlp<T>) {
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t);
        let c2 = T::one() - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.params_mut().zip(grads.params()).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * *g;
            *v = b2 * *v + (T::one() - b2) * *g * *g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// `k`-th unordered pair `(i, j)`, `i < j`, in the order
/// `(0,1), (0,2), (1,2), (0,3), ...`.
fn pair_from_index(k: usize) -> (usize, usize) {
    let mut j = ((1.0 + (1.0 + 8.0 * k as f64).sqrt()) / 2.0) as usize;
    while j * (j - 1) / 2 > k {
        j -= 1;
    }
    while (j + 1) * j / 2 <= k {
        j += 1;
    }
    (k - j * (j - 1) / 2, j)
}

/// `count` distinct unordered pairs drawn uniformly from `n` records.
pub fn sample_pairs(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<(usize, usize)> {
    let total = n * (n - 1) / 2;
    let count = count.min(total);
    let mut ks = index::sample(rng, total, count).into_vec();
    ks.sort_unstable();
    ks.into_iter().map(pair_from_index).collect()
}

/// Least-squares slope `s` with `s d_ij ~ |x_i - x_j|` over a seeded sample of
/// up to `max_pairs` pairs (all pairs when fewer exist).
pub fn scale_factor(geodesics: &Array2<f64>, positions: &[[f64; 3]], max_pairs: usize, seed: u64) -> Result<f64, ChartError> {
    let n = geodesics.nrows();
    if positions.len() != n {
        return Err(ChartError::CountMismatch {
            features: positions.len(),
            matrix: n,
        });
    }
    let total = n * n.saturating_sub(1) / 2;
    let pairs: Vec<(usize, usize)> = if total <= max_pairs {
        (0..total).map(pair_from_index).collect()
    } else {
        sample_pairs(&mut ChaCha8Rng::seed_from_u64(seed), n, max_pairs)
    };
    let (mut num, mut den) = (0.0, 0.0);
    for (i, j) in pairs {
        let d = geodesics[(i, j)];
        let e = (0..3).map(|k| (positions[i][k] - positions[j][k]).powi(2)).sum::<f64>().sqrt();
        num += d * e;
        den += d * d;
    }
    if !(den > 0.0) {
        return Err(ChartError::ZeroDissimilarities);
    }
    Ok(num / den)
}

pub fn scale_dissimilarities(geodesics: &Array2<f64>, positions: &[[f64; 3]]) -> Result<Array2<f64>, ChartError> {
    let s = scale_factor(geodesics, positions, 100_000, 0)?;
    Ok(geodesics * s)
}

/// Rescales a dissimilarity matrix to unit mean off-diagonal entry, the
/// range the Siamese `beta` is tuned for. Returns the matrix and the divisor.
pub fn normalize_mean(dm: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = dm.nrows();
    let off = n * n.saturating_sub(1);
    let mean = if off == 0 { 0.0 } else { dm.sum() / off as f64 };
    if mean > 0.0 {
        (dm / mean, mean)
    } else {
        (dm.clone(), 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: Mlp<T>,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains a forward charting function so that chart distances match
/// `target` (and, in augmented mode, chart positions are likely under the
/// per-record AoA estimates). `init` defaults to [`init_params`] with the
/// configured seed.
pub fn train_fcf<T: Real>(
    features: ArrayView2<T>,
    target: &Array2<f64>,
    config: &TrainConfig,
    aoa: Option<&[AoaLikelihood<T>]>,
    init: Option<Mlp<T>>,
) -> Result<TrainOutcome<T>, ChartError> {
    config.validate()?;
    let l = features.nrows();
    if target.nrows() != l || target.ncols() != l {
        return Err(ChartError::CountMismatch {
            features: l,
            matrix: target.nrows(),
        });
    }
    if l < 2 {
        return Err(ChartError::Config("need at least 2 records".into()));
    }
    if config.mode == ChartMode::Augmented {
        if aoa.is_none_or(|a| a.len() != l) {
            return Err(ChartError::MissingAoa);
        }
        if config.out_dim != 3 {
            return Err(ChartError::Config("augmented charting needs out_dim = 3".into()));
        }
    }
    let mut params = init.unwrap_or_else(|| init_params(config.rng_seed, features.ncols(), &config.widths, config.out_dim));
    if params.in_dim() != features.ncols() {
        return Err(ChartError::DimensionMismatch {
            expected: params.in_dim(),
            found: features.ncols(),
        });
    }
    let mut adam = Adam::new(&params, T::lit(config.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(1);
    let steps = config.steps_per_epoch.unwrap_or((l / config.batch_pairs).max(1));
    let mut trace = Vec::with_capacity(config.epochs);
    let (mut avg_s, mut avg_a): (Option<f64>, Option<f64>) = (None, None);
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let pairs = sample_pairs(&mut rng, l, config.batch_pairs);
            let targets: Vec<T> = pairs.iter().map(|&(i, j)| T::lit(target[(i, j)])).collect();
            let batch = PairBatch {
                features: features.view(),
                pairs: &pairs,
                targets: &targets,
            };
            let kind = match config.mode {
                ChartMode::Siamese => LossKind::Siamese { beta: T::lit(config.beta) },
                ChartMode::Augmented => {
                    let lam = config.lambda;
                    let (ws, wa) = match (config.normalize_terms, avg_s, avg_a) {
                        (true, Some(s), Some(a)) => ((1.0 - lam) / s.max(1e-12), lam / a.max(1e-12)),
                        _ => (1.0 - lam, lam),
                    };
                    LossKind::Augmented {
                        weights: LossWeights {
                            siamese: T::lit(ws),
                            aoa: T::lit(wa),
                        },
                        aoa: aoa.unwrap(),
                    }
                }
            };
            let out = loss_gradients(&params, &batch, &kind).map_err(|e| match e {
                ChartError::NonFiniteLoss { .. } => ChartError::NonFiniteLoss { epoch, step },
                other => other,
            })?;
            if config.mode == ChartMode::Augmented && config.normalize_terms {
                let update = |avg: Option<f64>, v: f64| Some(avg.map_or(v, |a| 0.95 * a + 0.05 * v));
                avg_s = update(avg_s, out.siamese_term.as_f64());
                avg_a = update(avg_a, out.aoa_term.as_f64());
            }
            epoch_loss += out.loss.as_f64();
            adam.step(&mut params, &out.grads);
        }
        let mean = epoch_loss / steps as f64;
        if !mean.is_finite() {
            return Err(ChartError::NonFiniteLoss { epoch, step: steps - 1 });
        }
        trace.push(mean);
    }
    Ok(TrainOutcome { params, loss_trace: trace })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CCMP";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub shapes: Vec<(usize, usize)>,
    pub output_scale: f64,
    pub output_offset: Vec<f64>,
    #[serde(default)]
    pub config: Option<TrainConfig>,
    #[serde(default)]
    pub normalizer_id: Option<String>,
}

/// Magic, `u16` version, `u32` header length, JSON header, then every
/// weight matrix (row-major) and bias as little-endian `f32`.
pub fn encode_checkpoint<T: Real>(params: &Mlp<T>, config: Option<&TrainConfig>, normalizer_id: Option<&str>) -> Vec<u8> {
    let header = CheckpointHeader {
        shapes: params.layers.iter().map(|l| l.w.dim()).collect(),
        output_scale: params.output_scale.as_f64(),
        output_offset: params.output_offset.iter().map(|v| v.as_f64()).collect(),
        config: config.cloned(),
        normalizer_id: normalizer_id.map(str::to_owned),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + 4 * params.n_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.params() {
        out.extend_from_slice(&(p.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(Mlp<T>, CheckpointHeader), ChartError> {
    let bad = |m: &str| ChartError::Checkpoint(m.to_owned());
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(ChartError::Checkpoint(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let json = bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| ChartError::Checkpoint(e.to_string()))?;
    let mut rest = &bytes[10 + hlen..];
    let mut read = |n: usize| -> Result<Vec<T>, ChartError> {
        if rest.len() < 4 * n {
            return Err(bad("truncated weights"));
        }
        let (head, tail) = rest.split_at(4 * n);
        rest = tail;
        Ok(head.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect())
    };
    let mut layers = Vec::new();
    for &(r, c) in &header.shapes {
        let w = Array2::from_shape_vec((r, c), read(r * c)?).map_err(|e| ChartError::Checkpoint(e.to_string()))?;
        let b = Array1::from(read(c)?);
        layers.push(Dense { w, b });
    }
    if layers.is_empty() || layers.windows(2).any(|w| w[0].w.ncols() != w[1].w.nrows()) {
        return Err(bad("inconsistent layer shapes"));
    }
    let params = Mlp {
        layers,
        output_scale: T::lit(header.output_scale),
        output_offset: header.output_offset.iter().map(|&v| T::lit(v)).collect(),
    };
    Ok((params, header))
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, params: &Mlp<T>, config: Option<&TrainConfig>, normalizer_id: Option<&str>) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(params, config, normalizer_id))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(Mlp<T>, CheckpointHeader), ChartError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
