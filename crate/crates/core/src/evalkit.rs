//! Evaluation: least-squares affine alignment, localization error statistics
//! and report export (CSV, JSON and an SVG scatter).

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("need at least {needed} points for a {dim}-D affine fit, got {got}")]
    TooFewPoints { needed: usize, got: usize, dim: usize },
    #[error("chart coordinates are rank deficient in dimension {0}")]
    RankDeficient(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("empty input")]
    Empty,
}

/// `x = A z + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine<T> {
    pub a: Vec<Vec<T>>,
    pub b: Vec<T>,
}

impl<T: Real> Affine<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            a: (0..dim).map(|i| (0..dim).map(|j| if i == j { T::one() } else { T::zero() }).collect()).collect(),
            b: vec![T::zero(); dim],
        }
    }

    pub fn dim_in(&self) -> usize {
        self.a.first().map_or(0, |r| r.len())
    }

    pub fn dim_out(&self) -> usize {
        self.b.len()
    }

    pub fn apply_point(&self, z: &[T]) -> Vec<T> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(row, &b)| row.iter().zip(z).fold(b, |acc, (&a, &v)| acc + a * v))
            .collect()
    }

    pub fn apply(&self, z: ArrayView2<T>) -> Array2<T> {
        let mut out = Array2::zeros((z.nrows(), self.dim_out()));
        for (mut o, row) in out.outer_iter_mut().zip(z.outer_iter()) {
            let p: Vec<T> = row.iter().cloned().collect();
            o.assign(&Array1::from(self.apply_point(&p)));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().flatten().chain(&self.b).all(|v| v.is_finite())
    }
}

/// Solves `m x = rhs` (m square, row-major) by Gaussian elimination with
/// partial pivoting. Returns the offending column when a pivot falls below
/// `tol`.
fn solve_in_place<T: Real>(m: &mut [Vec<T>], rhs: &mut [Vec<T>], tol: T) -> Result<(), usize> {
    let n = m.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap()).unwrap();
        if !(m[pivot][col].abs() > tol) {
            return Err(col);
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f == T::zero() {
                continue;
            }
            for k in col..n {
                let v = m[col][k];
                m[row][k] -= f * v;
            }
            for k in 0..rhs[row].len() {
                let v = rhs[col][k];
                rhs[row][k] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        for k in 0..rhs[col].len() {
            let mut v = rhs[col][k];
            for j in col + 1..n {
                v -= m[col][j] * rhs[j][k];
            }
            rhs[col][k] = v / m[col][col];
        }
    }
    Ok(())
}

/// Least-squares affine map from chart coordinates `z` (L x d_in) onto
/// ground truth `x` (L x d_out).
pub fn optimal_affine<T: Real>(z: ArrayView2<T>, x: ArrayView2<T>) -> Result<Affine<T>, EvalError> {
    let (l, d) = z.dim();
    let e = x.ncols();
    if x.nrows() != l {
        return Err(EvalError::ShapeMismatch(z.dim(), x.dim()));
    }
    if l < d + 1 {
        return Err(EvalError::TooFewPoints { needed: d + 1, got: l, dim: d });
    }
    let n = T::lit(l as f64);
    let zm = z.sum_axis(Axis(0)) / n;
    let xm = x.sum_axis(Axis(0)) / n;
    let zc = &z - &zm;
    let xc = &x - &xm;
    let zz = zc.t().dot(&zc);
    let zx = zc.t().dot(&xc);
    let trace = (0..d).fold(T::zero(), |acc, i| acc + zz[(i, i)]);
    let tol = T::lit(1e-12) * trace.max(T::min_positive_value());
    let mut m: Vec<Vec<T>> = zz.outer_iter().map(|r| r.to_vec()).collect();
    // Solve (Zc^T Zc) A^T = Zc^T Xc.
    let mut rhs: Vec<Vec<T>> = zx.outer_iter().map(|r| r.to_vec()).collect();
    solve_in_place(&mut m, &mut rhs, tol).map_err(EvalError::RankDeficient)?;
    let a: Vec<Vec<T>> = (0..e).map(|i| (0..d).map(|j| rhs[j][i]).collect()).collect();
    let b: Vec<T> = (0..e).map(|i| xm[i] - (0..d).fold(T::zero(), |acc, j| acc + a[i][j] * zm[j])).collect();
    Ok(Affine { a, b })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub errors: Vec<f64>,
    /// `None` for estimators that already work in the physical frame.
    pub transform: Option<Affine<f64>>,
    /// Estimates after the transform, one row per record.
    pub estimates: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
    /// Published MAE of the corresponding ray-traced experiment. Context
    /// only; simulated scenes are not expected to reproduce it.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reference_mae: Option<f64>,
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn mae(estimates: ArrayView2<f64>, truth: ArrayView2<f64>, transform: Option<&Affine<f64>>) -> Result<EvalReport, EvalError> {
    if estimates.nrows() == 0 {
        return Err(EvalError::Empty);
    }
    let mapped = match transform {
        Some(t) => {
            if t.dim_in() != estimates.ncols() || t.dim_out() != truth.ncols() {
                return Err(EvalError::ShapeMismatch(estimates.dim(), truth.dim()));
            }
            t.apply(estimates)
        }
        None => estimates.to_owned(),
    };
    if mapped.dim() != truth.dim() {
        return Err(EvalError::ShapeMismatch(estimates.dim(), truth.dim()));
    }
    let errors: Vec<f64> = mapped
        .outer_iter()
        .zip(truth.outer_iter())
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(EvalReport {
        mae: errors.iter().sum::<f64>() / errors.len() as f64,
        p50: percentile(&sorted, 0.5),
        p90: percentile(&sorted, 0.9),
        p95: percentile(&sorted, 0.95),
        errors,
        transform: transform.cloned(),
        estimates: mapped.outer_iter().map(|r| r.to_vec()).collect(),
        truth: truth.outer_iter().map(|r| r.to_vec()).collect(),
        reference_mae: None,
    })
}

/// Fits the optimal affine map and reports the error after applying it.
pub fn mae_after_affine(estimates: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<EvalReport, EvalError> {
    let t = optimal_affine(estimates, truth)?;
    mae(estimates, truth, Some(&t))
}

/// Spearman rank correlation; ties get their average rank.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

#[derive(Serialize)]
struct Summary<'a> {
    mae: f64,
    p50: f64,
    p90: f64,
    p95: f64,
    records: usize,
    transform: &'a Option<Affine<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_mae: Option<f64>,
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("record_index,truth_x,truth_y,truth_z,est_x,est_y,est_z,error\n");
    let coord = |p: &[f64], k: usize| p.get(k).map_or(String::new(), |v| v.to_string());
    for (i, ((t, e), err)) in report.truth.iter().zip(&report.estimates).zip(&report.errors).enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{},{},{err}",
            coord(t, 0),
            coord(t, 1),
            coord(t, 2),
            coord(e, 0),
            coord(e, 1),
            coord(e, 2)
        );
    }
    s
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(&Summary {
        mae: report.mae,
        p50: report.p50,
        p90: report.p90,
        p95: report.p95,
        records: report.errors.len(),
        transform: &report.transform,
        reference_mae: report.reference_mae,
    })
    .expect("summary serializes")
}

/// Top-down scatter of the estimates, each dot colored by its ground-truth
/// position so that neighbourhood preservation is visible.
pub fn report_svg(report: &EvalReport) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 20.0;
    let bounds = |pts: &[Vec<f64>], k: usize| {
        let lo = pts.iter().filter_map(|p| p.get(k)).cloned().fold(f64::INFINITY, f64::min);
        let hi = pts.iter().filter_map(|p| p.get(k)).cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo {
            (lo, hi - lo)
        } else {
            (if lo.is_finite() { lo } else { 0.0 }, 1.0)
        }
    };
    let est = [bounds(&report.estimates, 0), bounds(&report.estimates, 1)];
    let tru = [bounds(&report.truth, 0), bounds(&report.truth, 1), bounds(&report.truth, 2)];
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\" viewBox=\"0 0 {w} {w}\">\n<rect width=\"{w}\" height=\"{w}\" fill=\"white\"/>\n",
        w = SIZE + 2.0 * PAD
    );
    for (e, t) in report.estimates.iter().zip(&report.truth) {
        let px = PAD + SIZE * (e.first().copied().unwrap_or(0.0) - est[0].0) / est[0].1;
        let py = PAD + SIZE * (1.0 - (e.get(1).copied().unwrap_or(0.0) - est[1].0) / est[1].1);
        let channel = |k: usize| {
            let v = t.get(k).map_or(0.5, |v| (v - tru[k].0) / tru[k].1);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        let _ = writeln!(
            s,
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2\" fill=\"rgb({},{},{})\"/>",
            channel(0),
            channel(1),
            channel(2)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv`, `<stem>.json` and `<stem>.svg`.
pub fn export_report(report: &EvalReport, stem: impl AsRef<Path>) -> io::Result<()> {
    let stem = stem.as_ref();
    if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(stem.with_extension("csv"), report_csv(report))?;
    fs::write(stem.with_extension("json"), report_json(report))?;
    fs::write(stem.with_extension("svg"), report_svg(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((l, d), |_| rng.gen_range(-5.0..5.0))
    }

    fn random_affine(rng: &mut ChaCha8Rng, d: usize) -> Affine<f64> {
        Affine {
            a: (0..d).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect(),
            b: (0..d).map(|_| rng.gen_range(-10.0..10.0)).collect(),
        }
    }

    #[test]
    fn identity_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_points(&mut rng, 30, 3);
        let t = optimal_affine(z.view(), z.view()).unwrap();
        for i in 0..3 {
            assert!(t.b[i].abs() < 1e-9);
            for j in 0..3 {
                assert!((t.a[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn recovers_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in [2, 3] {
            for _ in 0..20 {
                let z = random_points(&mut rng, 50, d);
                let t0 = random_affine(&mut rng, d);
                let x = t0.apply(z.view());
                let t = optimal_affine(z.view(), x.view()).unwrap();
                let scale = t0.a.iter().flatten().chain(&t0.b).map(|v| v.abs()).fold(0.0, f64::max);
                for (u, v) in t.a.iter().flatten().chain(&t.b).zip(t0.a.iter().flatten().chain(&t0.b)) {
                    assert!((u - v).abs() <= 1e-9 * scale, "{u} {v}");
                }
            }
        }
    }

    #[test]
    fn f32_fit_works_too() {
        let z: Array2<f32> = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let x = z.mapv(|v| 2.0 * v + 1.0);
        let t = optimal_affine(z.view(), x.view()).unwrap();
        assert!((t.a[0][0] - 2.0).abs() < 1e-5 && (t.b[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn degenerate_fits() {
        let z = Array2::from_elem((10, 3), 1.5);
        assert!(matches!(optimal_affine(z.view(), z.view()), Err(EvalError::RankDeficient(_))));
        let mut z = Array2::from_shape_fn((10, 3), |(i, j)| (i * (j + 1)) as f64 + (i * i) as f64 * j as f64);
        z.column_mut(2).fill(4.0);
        assert_eq!(optimal_affine(z.view(), z.view()), Err(EvalError::RankDeficient(2)));
        let few = Array2::<f64>::zeros((3, 3));
        assert!(matches!(optimal_affine(few.view(), few.view()), Err(EvalError::TooFewPoints { .. })));
    }

    #[test]
    fn composition_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_points(&mut rng, 40, 3);
        let x = random_points(&mut rng, 40, 3);
        let t = optimal_affine(z.view(), x.view()).unwrap();
        let g = random_affine(&mut rng, 3);
        let t2 = optimal_affine(z.view(), g.apply(x.view()).view()).unwrap();
        let composed = g.apply(t.apply(z.view()).view());
        let direct = t2.apply(z.view());
        assert!(composed.iter().zip(direct.iter()).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn mae_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_points(&mut rng, 20, 3);
        assert_eq!(mae(x.view(), x.view(), None).unwrap().mae, 0.0);
        let shifted = &x + &array![1.0, 0.0, 0.0];
        let r = mae(shifted.view(), x.view(), None).unwrap();
        assert!((r.mae - 1.0).abs() < 1e-12);
        assert!(mae_after_affine(shifted.view(), x.view()).unwrap().mae < 1e-9);
        let wrong = Array2::<f64>::zeros((19, 3));
        assert!(matches!(mae(wrong.view(), x.view(), None), Err(EvalError::ShapeMismatch(..))));
    }

    #[test]
    fn affine_never_hurts_and_percentiles_are_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let z = random_points(&mut rng, 25, 3);
            let x = random_points(&mut rng, 25, 3);
            let before = mae(z.view(), x.view(), None).unwrap();
            let after = mae_after_affine(z.view(), x.view()).unwrap();
            let t = after.transform.clone().unwrap();
            let sse = |r: &EvalReport| r.errors.iter().map(|e| e * e).sum::<f64>();
            assert!(sse(&after) <= sse(&before) + 1e-9);
            assert!(after.p50 <= after.p90 && after.p90 <= after.p95);
            assert!(t.is_finite());
            assert!((after.mae - after.errors.iter().sum::<f64>() / 25.0).abs() < 1e-12);
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.0);
        assert!((percentile(&v, 0.9) - 3.6).abs() < 1e-12);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 1.0, 2.0], &[1.0, 1.0, 2.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exports() {
        let x = array![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [4.0, 1.0, 2.0]];
        let est = &x + 0.25;
        let r = mae(est.view(), x.view(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("out").join("report");
        export_report(&r, &stem).unwrap();
        let csv = fs::read_to_string(stem.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
        assert_eq!(json["mae"].as_f64().unwrap().to_bits(), r.mae.to_bits());
        let svg = fs::read_to_string(stem.with_extension("svg")).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("circle")).count(), 3);
    }
}
