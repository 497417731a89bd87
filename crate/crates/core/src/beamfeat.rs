//! Beamspace features: zero-padded 2-D FFT over the antenna grid, per-beam
//! mean power and a coarse per-beam delay phase.

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::tensors::{CsiDims, CsiTensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("normalizer needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("feature dimension mismatch: normalizer has {expected}, input has {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Beam grid of one snapshot, `[b][u_el][u_az][n]` with `U_el = 2 M_row` and
/// `U_az = 2 M_col`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamspaceTensor {
    pub arrays: usize,
    pub u_el: usize,
    pub u_az: usize,
    pub n_sub: usize,
    pub values: Vec<Complex64>,
}

impl BeamspaceTensor {
    #[inline]
    pub fn get(&self, b: usize, e: usize, a: usize, n: usize) -> Complex64 {
        self.values[((b * self.u_el + e) * self.u_az + a) * self.n_sub + n]
    }

    pub fn beams(&self) -> usize {
        self.arrays * self.u_el * self.u_az
    }

    fn beam_series(&self, beam: usize) -> &[Complex64] {
        &self.values[beam * self.n_sub..(beam + 1) * self.n_sub]
    }
}

pub fn beamspace(csi: &CsiTensor) -> BeamspaceTensor {
    let CsiDims { arrays, rows, cols, n_sub } = csi.dims();
    let (u_el, u_az) = (2 * rows, 2 * cols);
    let mut values = vec![Complex64::new(0.0, 0.0); arrays * u_el * u_az * n_sub];
    let mut slice = vec![Complex64::new(0.0, 0.0); u_el * u_az];
    for b in 0..arrays {
        for n in 0..n_sub {
            slice.fill(Complex64::new(0.0, 0.0));
            for r in 0..rows {
                for c in 0..cols {
                    slice[r * u_az + c] = csi.get(b, r, c, n);
                }
            }
            dsp::fft2(&mut slice, u_el, u_az);
            for (k, v) in slice.iter().enumerate() {
                values[((b * u_el * u_az) + k) * n_sub + n] = *v;
            }
        }
    }
    BeamspaceTensor { arrays, u_el, u_az, n_sub, values }
}

/// `P[b][u_el][u_az] = sum_n |H|^2`, flattened b-major.
pub fn beam_power(bs: &BeamspaceTensor) -> Vec<f64> {
    (0..bs.beams()).map(|k| bs.beam_series(k).iter().map(|v| v.norm_sqr()).sum()).collect()
}

/// `D[b][u_el][u_az] = arg sum_n H[n+1] conj(H[n])`, with `arg 0 = 0`.
pub fn beam_delay(bs: &BeamspaceTensor) -> Vec<f64> {
    (0..bs.beams())
        .map(|k| {
            let s = bs.beam_series(k);
            let acc: Complex64 = s.windows(2).map(|w| w[1] * w[0].conj()).sum();
            if acc.norm_sqr() == 0.0 {
                0.0
            } else {
                acc.arg()
            }
        })
        .collect()
}

/// Unnormalized beam power and delay of one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub power: Vec<f64>,
    pub delay: Vec<f64>,
}

pub fn raw_features(csi: &CsiTensor) -> RawFeatures {
    let bs = beamspace(csi);
    RawFeatures {
        power: beam_power(&bs),
        delay: beam_delay(&bs),
    }
}

/// Per-dimension z-scoring of `[10 log10(P + eps_p), D]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub power_epsilon: f64,
    pub std_floor: f64,
    pub id: String,
}

pub const STD_FLOOR: f64 = 1e-6;

fn fnv1a(words: impl Iterator<Item = f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for byte in w.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl Normalizer {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn stacked(&self, raw: &RawFeatures) -> impl Iterator<Item = f64> + '_ {
        let eps = self.power_epsilon;
        let p: Vec<f64> = raw.power.iter().map(|p| 10.0 * (p + eps).log10()).collect();
        p.into_iter().chain(raw.delay.clone())
    }

    pub fn apply(&self, raw: &RawFeatures) -> Result<FeatureVector, FeatureError> {
        let found = raw.power.len() + raw.delay.len();
        if found != self.dim() || raw.power.len() != raw.delay.len() {
            return Err(FeatureError::DimensionMismatch { expected: self.dim(), found });
        }
        let values = self
            .stacked(raw)
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| ((x - m) / s) as f32)
            .collect();
        Ok(FeatureVector {
            values,
            norm_stats_id: self.id.clone(),
        })
    }
}

pub fn fit_normalizer(samples: &[RawFeatures]) -> Result<Normalizer, FeatureError> {
    if samples.len() < 2 {
        return Err(FeatureError::TooFewSamples(samples.len()));
    }
    let dim = samples[0].power.len() + samples[0].delay.len();
    if let Some(bad) = samples.iter().find(|s| s.power.len() + s.delay.len() != dim) {
        return Err(FeatureError::DimensionMismatch {
            expected: dim,
            found: bad.power.len() + bad.delay.len(),
        });
    }
    let max_p = samples.iter().flat_map(|s| s.power.iter()).cloned().fold(0.0, f64::max);
    // Positive even for an all-zero training set so the log stays finite.
    let power_epsilon = if max_p > 0.0 { 1e-12 * max_p } else { f64::MIN_POSITIVE };
    let mut norm = Normalizer {
        mean: vec![0.0; dim],
        std: vec![0.0; dim],
        power_epsilon,
        std_floor: STD_FLOOR,
        id: String::new(),
    };
    let n = samples.len() as f64;
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    for s in samples {
        for (k, x) in norm.stacked(s).enumerate() {
            sum[k] += x;
            sum_sq[k] += x * x;
        }
    }
    for k in 0..dim {
        let mean = sum[k] / n;
        norm.mean[k] = mean;
        norm.std[k] = (sum_sq[k] / n - mean * mean).max(0.0).sqrt().max(STD_FLOOR);
    }
    norm.id = format!("{:016x}", fnv1a(norm.mean.iter().chain(&norm.std).cloned().chain([power_epsilon])));
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub norm_stats_id: String,
}

pub fn feature_length(dims: &CsiDims) -> usize {
    2 * dims.arrays * 4 * dims.rows * dims.cols
}

pub fn feature_vector(csi: &CsiTensor, norm: &Normalizer) -> Result<FeatureVector, FeatureError> {
    norm.apply(&raw_features(csi))
}

/// Fits a normalizer on `fit_on` (all snapshots when `None`) and returns the
/// `L x dim` feature matrix of all snapshots.
pub fn dataset_features(csis: &[&CsiTensor], fit_on: Option<&[usize]>) -> Result<(Normalizer, Array2<f32>), FeatureError> {
    let raw: Vec<RawFeatures> = csis.par_iter().map(|c| raw_features(c)).collect();
    let norm = match fit_on {
        Some(idx) => fit_normalizer(&idx.iter().map(|&i| raw[i].clone()).collect::<Vec<_>>())?,
        None => fit_normalizer(&raw)?,
    };
    let dim = norm.dim();
    let rows: Vec<FeatureVector> = raw.par_iter().map(|r| norm.apply(r)).collect::<Result<_, _>>()?;
    let mut out = Array2::zeros((csis.len(), dim));
    for (mut row, f) in out.outer_iter_mut().zip(rows) {
        row.assign(&ndarray::ArrayView1::from(&f.values));
    }
    Ok((norm, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn dims(arrays: usize, rows: usize, cols: usize, n_sub: usize) -> CsiDims {
        CsiDims { arrays, rows, cols, n_sub }
    }

    #[test]
    fn dc_and_parseval() {
        let csi = CsiTensor::from_fn(dims(1, 2, 4, 1), |_, _, _, _| Complex64::new(1.0, 0.0));
        let bs = beamspace(&csi);
        assert_eq!((bs.u_el, bs.u_az), (4, 8));
        assert!((bs.get(0, 0, 0, 0) - Complex64::new(8.0, 0.0)).norm() < 1e-12);
        let energy: f64 = bs.values.iter().map(|v| v.norm_sqr()).sum();
        assert!((energy - 32.0 * 8.0).abs() < 1e-9);
    }

    #[test]
    fn delta_spreads_evenly() {
        let csi = CsiTensor::from_fn(dims(1, 2, 3, 1), |_, r, c, _| {
            if (r, c) == (1, 2) {
                Complex64::new(0.6, -0.8)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        for v in beamspace(&csi).values {
            assert!((v.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn on_grid_plane_wave_hits_one_beam() {
        // exhaustive over the beam grid of a 2x4 array
        let (rows, cols) = (2, 4);
        for ke in 0..2 * rows {
            for ka in 0..2 * cols {
                let csi = CsiTensor::from_fn(dims(1, rows, cols, 4), |_, r, c, _| {
                    Complex64::from_polar(1.0, 2.0 * PI * (ke * r) as f64 / (2 * rows) as f64 + 2.0 * PI * (ka * c) as f64 / (2 * cols) as f64)
                });
                let p = beam_power(&beamspace(&csi));
                let total: f64 = p.iter().sum();
                let (best, &peak) = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
                let expected = ke * 2 * cols + ka;
                assert_eq!(best, expected);
                // zero padding spreads energy; the peak still holds the largest share
                assert!(peak / total > 0.25 - 1e-6, "{}", peak / total);
            }
        }
    }

    #[test]
    fn on_grid_wave_peak_share() {
        // 2x zero padding per axis puts exactly a quarter of the slice energy
        // into the matching bin; the direct DFT gives |peak|^2 = (M_row M_col)^2.
        let csi = CsiTensor::from_fn(dims(1, 8, 8, 1), |_, r, c, _| {
            Complex64::from_polar(1.0, 2.0 * PI * (4 * r) as f64 / 16.0 + 2.0 * PI * (6 * c) as f64 / 16.0)
        });
        let p = beam_power(&beamspace(&csi));
        let total: f64 = p.iter().sum();
        assert!((p[4 * 16 + 6] - 4096.0).abs() < 1e-3);
        assert!((p[4 * 16 + 6] / total - 0.25).abs() < 1e-6);
        assert_eq!(p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0, 4 * 16 + 6);
    }

    #[test]
    fn power_examples() {
        assert!(beam_power(&beamspace(&CsiTensor::zeros(dims(2, 2, 2, 3)))).iter().all(|&p| p == 0.0));
        let flat = CsiTensor::from_fn(dims(1, 2, 4, 64), |_, _, _, _| Complex64::new(1.0, 0.0));
        let p = beam_power(&beamspace(&flat));
        assert!((p[0] - 4096.0).abs() < 1e-9);
    }

    #[test]
    fn delay_examples() {
        let df = 781.25e3;
        let tau = 100e-9;
        let shifted = |tau: f64, gain: Complex64| {
            CsiTensor::from_fn(dims(1, 2, 2, 64), move |_, _, _, n| gain * Complex64::from_polar(1.0, -2.0 * PI * df * tau * n as f64))
        };
        let one = Complex64::new(1.0, 0.0);
        let bs = beamspace(&shifted(tau, one));
        let d = beam_delay(&bs);
        let p = beam_power(&bs);
        for (dv, pv) in d.iter().zip(&p) {
            if *pv > 1e-6 {
                assert!((dv + 0.490_873_852).abs() < 1e-6, "{dv}");
            }
        }
        assert!(beam_delay(&beamspace(&CsiTensor::zeros(dims(1, 2, 2, 4)))).iter().all(|&v| v == 0.0));

        // increasing the delay lowers D by 2 pi df dtau in the dominant bin
        let dtau = 37e-9;
        let d2 = beam_delay(&beamspace(&shifted(tau + dtau, one)));
        let diff = (d2[0] - d[0] + 2.0 * PI * df * dtau).rem_euclid(2.0 * PI);
        assert!(diff.min(2.0 * PI - diff) < 1e-5);

        // global phase and amplitude invariance
        let d3 = beam_delay(&beamspace(&shifted(tau, Complex64::from_polar(4.5, 2.2))));
        let p3 = beam_power(&beamspace(&shifted(tau, Complex64::from_polar(1.0, 2.2))));
        for k in 0..d.len() {
            if p[k] > 1e-6 {
                assert!((d3[k] - d[k]).abs() < 1e-5);
            }
            assert!((p3[k] - p[k]).abs() < 1e-6 * p[0]);
        }
    }

    fn raw(power: Vec<f64>, delay: Vec<f64>) -> RawFeatures {
        RawFeatures { power, delay }
    }

    #[test]
    fn normalizer_examples() {
        let samples = vec![raw(vec![1.0, 10.0], vec![0.3, -1.0]), raw(vec![1.0, 1000.0], vec![0.3, 1.0])];
        let norm = fit_normalizer(&samples).unwrap();
        let a = norm.apply(&samples[0]).unwrap().values;
        let b = norm.apply(&samples[1]).unwrap().values;
        // constant dims go to zero, symmetric pairs to -1/+1
        assert_eq!((a[0], b[0], a[2], b[2]), (0.0, 0.0, 0.0, 0.0));
        assert!((a[1] + 1.0).abs() < 1e-6 && (b[1] - 1.0).abs() < 1e-6);
        assert!((a[3] + 1.0).abs() < 1e-6 && (b[3] - 1.0).abs() < 1e-6);
        assert!(norm.std.iter().all(|&s| s >= STD_FLOOR));

        let swapped = fit_normalizer(&[samples[1].clone(), samples[0].clone()]).unwrap();
        assert_eq!(swapped.mean, norm.mean);
        assert_eq!(swapped.id, norm.id);

        assert_eq!(fit_normalizer(&samples[..1]), Err(FeatureError::TooFewSamples(1)));
        assert!(matches!(norm.apply(&raw(vec![1.0], vec![0.0])), Err(FeatureError::DimensionMismatch { .. })));
    }

    #[test]
    fn feature_lengths_and_determinism() {
        let d = dims(1, 2, 4, 8);
        assert_eq!(feature_length(&d), 64);
        assert_eq!(feature_length(&dims(8, 8, 8, 64)), 4096);
        let csis: Vec<CsiTensor> = (0..3)
            .map(|s| CsiTensor::from_fn(d, |_, r, c, n| Complex64::from_polar(1.0 + s as f64, (r + 2 * c + s * n) as f64)))
            .collect();
        let refs: Vec<&CsiTensor> = csis.iter().collect();
        let (norm, matrix) = dataset_features(&refs, None).unwrap();
        assert_eq!(matrix.dim(), (3, 64));
        let f1 = feature_vector(&csis[1], &norm).unwrap();
        let f2 = feature_vector(&csis[1], &norm).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.values.as_slice(), matrix.row(1).as_slice().unwrap());
        assert!(f1.values.iter().all(|v| v.is_finite()));
    }
}
