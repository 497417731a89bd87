//! Classical localization: per-array 2-D AoA estimation with root-MUSIC and
//! 3-D triangulation by maximizing a von Mises-Fisher likelihood.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::scalar::Real;
use crate::scenesim::Aabb;
use crate::tensors::{ArrayGeometry, CsiTensor, RadioConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassicalError {
    #[error("array index {0} out of range")]
    ArrayIndex(usize),
    #[error("root-MUSIC needs at least 2 elements, got {0}")]
    TooFewElements(usize),
    #[error("covariance matrix is zero")]
    ZeroCovariance,
    #[error("ambiguous angle: spatial frequency {0} outside [-1, 1]")]
    AmbiguousAngle(f64),
    #[error("gimbal degenerate: elevation {0} rad too close to +-pi/2")]
    GimbalDegenerate(f64),
    #[error("zero received power at array {0}")]
    ZeroPower(usize),
    #[error("delay spread needs at least 2 subcarriers")]
    TooFewSubcarriers,
    #[error("position coincides with array {0}")]
    CoincidentPosition(usize),
    #[error("triangulation region is degenerate")]
    DegenerateRegion,
    #[error("need at least 2 AoA estimates, got {0}")]
    TooFewEstimates(usize),
    #[error("all concentration parameters are (near) zero; likelihood is uninformative")]
    Uninformative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AoaEstimate {
    pub array_index: usize,
    pub azimuth: f64,
    pub elevation: f64,
    /// Arrival direction in the array's local frame.
    pub unit_direction: [f64; 3],
    pub kappa: f64,
}

/// Spatial covariance along the columns, accumulated over rows and
/// subcarriers.
pub fn covariance_azimuth(csi: &CsiTensor, b: usize) -> Result<DMatrix<Complex64>, ClassicalError> {
    let d = csi.dims();
    if b >= d.arrays {
        return Err(ClassicalError::ArrayIndex(b));
    }
    let mut r = DMatrix::zeros(d.cols, d.cols);
    let mut h = DVector::zeros(d.cols);
    for row in 0..d.rows {
        for n in 0..d.n_sub {
            for c in 0..d.cols {
                h[c] = csi.get(b, row, c, n);
            }
            r += &h * h.adjoint();
        }
    }
    Ok(r)
}

/// Spatial covariance along the rows, accumulated over columns and
/// subcarriers.
pub fn covariance_elevation(csi: &CsiTensor, b: usize) -> Result<DMatrix<Complex64>, ClassicalError> {
    let d = csi.dims();
    if b >= d.arrays {
        return Err(ClassicalError::ArrayIndex(b));
    }
    let mut r = DMatrix::zeros(d.rows, d.rows);
    let mut h = DVector::zeros(d.rows);
    for col in 0..d.cols {
        for n in 0..d.n_sub {
            for row in 0..d.rows {
                h[row] = csi.get(b, row, col, n);
            }
            r += &h * h.adjoint();
        }
    }
    Ok(r)
}

/// Roots of `sum_k coeffs[k] z^k` by Aberth-Ehrlich iteration.
pub(crate) fn polynomial_roots(coeffs: &[Complex64]) -> Vec<Complex64> {
    let mut c = coeffs.to_vec();
    while c.len() > 1 && c.last().is_some_and(|v| v.norm() == 0.0) {
        c.pop();
    }
    let deg = c.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    let lead = c[deg];
    let c: Vec<Complex64> = c.iter().map(|v| v / lead).collect();
    let eval = |z: Complex64| {
        let mut p = Complex64::new(0.0, 0.0);
        let mut dp = Complex64::new(0.0, 0.0);
        for k in (0..=deg).rev() {
            dp = dp * z + p;
            p = p * z + c[k];
        }
        (p, dp)
    };
    // Cauchy bound for the initial circle.
    let radius = 1.0 + c[..deg].iter().map(|v| v.norm()).fold(0.0, f64::max);
    let r0 = radius.min(2.0).max(0.5);
    let mut z: Vec<Complex64> = (0..deg)
        .map(|k| Complex64::from_polar(r0, 2.0 * PI * k as f64 / deg as f64 + 0.4))
        .collect();
    for _ in 0..500 {
        let mut largest: f64 = 0.0;
        for i in 0..deg {
            let (p, dp) = eval(z[i]);
            if p.norm() == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let repulsion: Complex64 = (0..deg).filter(|&j| j != i).map(|j| 1.0 / (z[i] - z[j])).sum();
            let w = ratio / (1.0 - ratio * repulsion);
            if w.is_finite() {
                z[i] -= w;
                largest = largest.max(w.norm() / z[i].norm().max(1e-300));
            }
        }
        if largest < 1e-15 {
            break;
        }
    }
    z
}

/// Spatial frequency `u` of the strongest plane wave seen by a uniform linear
/// array with element pitch `spacing_wavelengths`, from its covariance `r`.
/// The signal subspace is one-dimensional.
pub fn root_music_1d(r: &DMatrix<Complex64>, spacing_wavelengths: f64) -> Result<f64, ClassicalError> {
    let m = r.nrows();
    if m < 2 {
        return Err(ClassicalError::TooFewElements(m));
    }
    let trace: f64 = (0..m).map(|i| r[(i, i)].re).sum();
    if !(trace > 0.0) {
        return Err(ClassicalError::ZeroCovariance);
    }
    let scaled = r / Complex64::new(trace, 0.0);
    let eig = scaled.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut noise_proj = DMatrix::<Complex64>::zeros(m, m);
    for &k in &order[..m - 1] {
        let e = eig.eigenvectors.column(k);
        noise_proj += e * e.adjoint();
    }
    // a(z)^H C a(z) = sum_k c_k z^k with c_k the k-th superdiagonal sum;
    // multiplying by z^(M-1) gives a polynomial of degree 2M-2.
    let coeffs: Vec<Complex64> = (0..2 * m - 1)
        .map(|j| {
            let k = j as isize - (m as isize - 1);
            (0..m as isize)
                .filter_map(|row| {
                    let col = row + k;
                    (0..m as isize).contains(&col).then(|| noise_proj[(row as usize, col as usize)])
                })
                .sum()
        })
        .collect();
    let roots = polynomial_roots(&coeffs);
    let best = roots
        .iter()
        .filter(|z| z.is_finite() && z.norm() < 1.0 + 1e-6)
        .min_by(|a, b| (1.0 - a.norm()).abs().total_cmp(&(1.0 - b.norm()).abs()))
        .ok_or(ClassicalError::ZeroCovariance)?;
    let u = best.arg() / (2.0 * PI * spacing_wavelengths);
    if u.abs() > 1.0 + 1e-6 {
        return Err(ClassicalError::AmbiguousAngle(u));
    }
    Ok(u.clamp(-1.0, 1.0))
}

/// Power-weighted RMS delay spread of array `b`, from the antenna-averaged
/// power delay profile.
///
/// Taps in the upper half of the inverse DFT are read as negative delays, and
/// taps more than 20 dB below the strongest tap are ignored so that DFT
/// leakage of fractional delays does not dominate the estimate.
pub fn rms_delay_spread(csi: &CsiTensor, b: usize, config: &RadioConfig) -> Result<f64, ClassicalError> {
    let d = csi.dims();
    if b >= d.arrays {
        return Err(ClassicalError::ArrayIndex(b));
    }
    if d.n_sub < 2 {
        return Err(ClassicalError::TooFewSubcarriers);
    }
    let n = d.n_sub;
    let mut profile = vec![0.0; n];
    for r in 0..d.rows {
        for c in 0..d.cols {
            let mut h = csi.antenna_response(b, r, c);
            dsp::ifft(&mut h);
            for (p, v) in profile.iter_mut().zip(&h) {
                *p += v.norm_sqr();
            }
        }
    }
    let peak = profile.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(ClassicalError::ZeroPower(b));
    }
    let floor = peak * 1e-2;
    let (mut w, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (t, &p) in profile.iter().enumerate() {
        if p < floor {
            continue;
        }
        let tau = if t < n.div_ceil(2) { t as f64 } else { t as f64 - n as f64 };
        w += p;
        m1 += p * tau;
        m2 += p * tau * tau;
    }
    let mean = m1 / w;
    let var = (m2 / w - mean * mean).max(0.0);
    Ok(var.sqrt() * config.tap_duration())
}

/// Saturating concentration heuristic `kappa_max / (1 + (tau / tau0)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationModel {
    pub kappa_max: f64,
    pub tau0: f64,
}

impl ConcentrationModel {
    pub fn for_config(config: &RadioConfig) -> Self {
        Self {
            kappa_max: 200.0,
            tau0: 1.0 / config.bandwidth_hz,
        }
    }

    pub fn kappa(&self, delay_spread: f64) -> f64 {
        let x = delay_spread.max(0.0) / self.tau0;
        self.kappa_max / (1.0 + x * x)
    }
}

/// Default concentration heuristic for a 50 MHz system.
pub fn concentration(delay_spread: f64) -> f64 {
    ConcentrationModel::for_config(&RadioConfig::default()).kappa(delay_spread)
}

/// Azimuth/elevation AoA of the dominant path at array `b`.
pub fn estimate_aoa(csi: &CsiTensor, b: usize, array: &ArrayGeometry, config: &RadioConfig) -> Result<AoaEstimate, ClassicalError> {
    let d = csi.dims();
    if b >= d.arrays {
        return Err(ClassicalError::ArrayIndex(b));
    }
    if d.rows < 2 || d.cols < 2 {
        return Err(ClassicalError::TooFewElements(d.rows.min(d.cols)));
    }
    let spacing = array.element_spacing / config.wavelength();
    let v = root_music_1d(&covariance_elevation(csi, b)?, spacing)?;
    let elevation = v.asin();
    if (PI / 2.0 - elevation.abs()) < 1e-3 {
        return Err(ClassicalError::GimbalDegenerate(elevation));
    }
    let u = root_music_1d(&covariance_azimuth(csi, b)?, spacing)?;
    let azimuth = (u / elevation.cos()).clamp(-1.0, 1.0).asin();
    let unit_direction = [
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    ];
    let kappa = ConcentrationModel::for_config(config).kappa(rms_delay_spread(csi, b, config)?);
    Ok(AoaEstimate {
        array_index: b,
        azimuth,
        elevation,
        unit_direction,
        kappa,
    })
}

/// AoA estimates for every array of one snapshot.
pub fn estimate_all(csi: &CsiTensor, arrays: &[ArrayGeometry], config: &RadioConfig) -> Result<Vec<AoaEstimate>, ClassicalError> {
    (0..arrays.len()).map(|b| estimate_aoa(csi, b, &arrays[b], config)).collect()
}

/// `log(sinh(k))` without overflow for large `k`.
pub fn log_sinh(k: f64) -> f64 {
    k - std::f64::consts::LN_2 + (-(-2.0 * k).exp_m1()).ln()
}

/// Frozen von Mises-Fisher AoA log-likelihood of one snapshot:
///
/// `sum_b log(kappa_b / (4 pi sinh kappa_b)) + kappa_b g_b . (x - p_b) / |x - p_b|`
///
/// with `g_b` the estimated arrival direction rotated into the global frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AoaLikelihood<T> {
    positions: Vec<[T; 3]>,
    directions: Vec<[T; 3]>,
    kappas: Vec<T>,
    offset: T,
}

impl<T: Real> AoaLikelihood<T> {
    pub fn new(estimates: &[AoaEstimate], arrays: &[ArrayGeometry]) -> Self {
        let mut positions = Vec::with_capacity(estimates.len());
        let mut directions = Vec::with_capacity(estimates.len());
        let mut kappas = Vec::with_capacity(estimates.len());
        let mut offset = 0.0;
        for e in estimates {
            let a = &arrays[e.array_index];
            let g = a.to_global(&Vector3::from(e.unit_direction)).normalize();
            positions.push(a.position.map(T::lit));
            directions.push([T::lit(g[0]), T::lit(g[1]), T::lit(g[2])]);
            kappas.push(T::lit(e.kappa));
            offset += e.kappa.ln() - (4.0 * PI).ln() - log_sinh(e.kappa);
        }
        Self {
            positions,
            directions,
            kappas,
            offset: T::lit(offset),
        }
    }

    pub fn len(&self) -> usize {
        self.kappas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappas.is_empty()
    }

    pub fn max_kappa(&self) -> T {
        self.kappas.iter().cloned().fold(T::zero(), T::max)
    }

    fn unit_from(&self, b: usize, x: &[T; 3]) -> Result<([T; 3], T), ClassicalError> {
        let p = &self.positions[b];
        let r = [x[0] - p[0], x[1] - p[1], x[2] - p[2]];
        let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        if !(n > T::lit(1e-12)) {
            return Err(ClassicalError::CoincidentPosition(b));
        }
        Ok(([r[0] / n, r[1] / n, r[2] / n], n))
    }

    /// `sum_b kappa_b (1 - cos_b)`: the log-likelihood gap to a perfect fit.
    /// Differs from `-value` only by a constant.
    pub fn excess(&self, x: &[T; 3]) -> Result<T, ClassicalError> {
        let mut acc = T::zero();
        for b in 0..self.len() {
            let (e, _) = self.unit_from(b, x)?;
            let g = &self.directions[b];
            acc += self.kappas[b] * (T::one() - (g[0] * e[0] + g[1] * e[1] + g[2] * e[2]));
        }
        Ok(acc)
    }

    pub fn value(&self, x: &[T; 3]) -> Result<T, ClassicalError> {
        let mut acc = self.offset;
        for b in 0..self.len() {
            let (e, _) = self.unit_from(b, x)?;
            let g = &self.directions[b];
            acc += self.kappas[b] * (g[0] * e[0] + g[1] * e[1] + g[2] * e[2]);
        }
        Ok(acc)
    }

    pub fn value_and_gradient(&self, x: &[T; 3]) -> Result<(T, [T; 3]), ClassicalError> {
        let mut acc = self.offset;
        let mut grad = [T::zero(); 3];
        for b in 0..self.len() {
            let (e, n) = self.unit_from(b, x)?;
            let g = &self.directions[b];
            let cos = g[0] * e[0] + g[1] * e[1] + g[2] * e[2];
            let k = self.kappas[b];
            acc += k * cos;
            for i in 0..3 {
                grad[i] += k * (g[i] - cos * e[i]) / n;
            }
        }
        Ok((acc, grad))
    }
}

pub fn aoa_log_likelihood(x: &Vector3<f64>, estimates: &[AoaEstimate], arrays: &[ArrayGeometry]) -> Result<f64, ClassicalError> {
    AoaLikelihood::new(estimates, arrays).value(&[x[0], x[1], x[2]])
}

pub fn aoa_log_likelihood_grad(x: &Vector3<f64>, estimates: &[AoaEstimate], arrays: &[ArrayGeometry]) -> Result<Vector3<f64>, ClassicalError> {
    let (_, g) = AoaLikelihood::new(estimates, arrays).value_and_gradient(&[x[0], x[1], x[2]])?;
    Ok(Vector3::from(g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangulationOptions {
    pub grid_pitch: f64,
    pub ascent_steps: usize,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        Self {
            grid_pitch: 0.5,
            ascent_steps: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub position: Vector3<f64>,
    pub log_likelihood: f64,
    /// Set when the likelihood is nearly flat along some direction at the
    /// returned point (near-singular Hessian), or the maximum was cut off by
    /// the region boundary.
    pub low_confidence: bool,
}

fn clamp_to(region: &Aabb, x: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|k| x[k].clamp(region.min[k], region.max[k]))
}

/// Maximum-likelihood position within `region`: coarse grid search followed
/// by projected gradient ascent with backtracking.
pub fn triangulate(
    estimates: &[AoaEstimate],
    arrays: &[ArrayGeometry],
    region: &Aabb,
    options: &TriangulationOptions,
) -> Result<Triangulation, ClassicalError> {
    if estimates.len() < 2 {
        return Err(ClassicalError::TooFewEstimates(estimates.len()));
    }
    if !region.is_valid() || !(options.grid_pitch > 0.0) {
        return Err(ClassicalError::DegenerateRegion);
    }
    if estimates.iter().all(|e| e.kappa < 1e-9) {
        return Err(ClassicalError::Uninformative);
    }
    let lik = AoaLikelihood::<f64>::new(estimates, arrays);
    let counts = [0, 1, 2].map(|k| ((region.max[k] - region.min[k]) / options.grid_pitch).ceil() as usize + 1);
    let coord = |k: usize, i: usize| {
        let n = counts[k];
        if n == 1 {
            region.min[k]
        } else {
            region.min[k] + (region.max[k] - region.min[k]) * i as f64 / (n - 1) as f64
        }
    };
    let mut best: Option<([f64; 3], f64)> = None;
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for k in 0..counts[2] {
                let x = [coord(0, i), coord(1, j), coord(2, k)];
                if let Ok(v) = lik.value(&x) {
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((x, v));
                    }
                }
            }
        }
    }
    let (mut x, mut value) = best.ok_or(ClassicalError::DegenerateRegion)?;
    let mut step = options.grid_pitch / lik.max_kappa().max(1e-9);
    for _ in 0..options.ascent_steps {
        let (_, g) = lik.value_and_gradient(&x)?;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = clamp_to(region, [x[0] + step * g[0], x[1] + step * g[1], x[2] + step * g[2]]);
            match lik.value(&cand) {
                Ok(v) if v > value => {
                    x = cand;
                    value = v;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
        step *= 2.0;
    }
    let low_confidence = hessian_is_weak(&lik, &x, region);
    Ok(Triangulation {
        position: Vector3::from(x),
        log_likelihood: value,
        low_confidence,
    })
}

fn hessian_is_weak(lik: &AoaLikelihood<f64>, x: &[f64; 3], region: &Aabb) -> bool {
    let h = 1e-4;
    let mut hess = Matrix3::zeros();
    for j in 0..3 {
        let mut xp = *x;
        let mut xm = *x;
        xp[j] += h;
        xm[j] -= h;
        let (Ok((_, gp)), Ok((_, gm))) = (lik.value_and_gradient(&xp), lik.value_and_gradient(&xm)) else {
            return true;
        };
        for i in 0..3 {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let hess = (hess + hess.transpose()) * 0.5;
    let eig = (-hess).symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let on_boundary = (0..3).any(|k| x[k] <= region.min[k] + 1e-9 || x[k] >= region.max[k] - 1e-9);
    let grad_out = lik
        .value_and_gradient(x)
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-6)
        .unwrap_or(true);
    !(hi > 0.0 && lo > 1e-6 * hi) || (on_boundary && grad_out)
}
