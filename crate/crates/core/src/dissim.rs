//! Angle-delay-profile (ADP) dissimilarities between CSI snapshots and their
//! geodesic completion over a k-nearest-neighbour graph.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{s, Array2};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::dsp;
use crate::tensors::{CsiDims, CsiTensor, SceneDataset};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DissimError {
    #[error("total received power is zero")]
    ZeroPower,
    #[error("window fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("both snapshots are all-zero")]
    BothZero,
    #[error("shape mismatch between snapshots")]
    ShapeMismatch,
    #[error("need at least 2 records, got {0}")]
    TooFewRecords(usize),
    #[error("k = {k} must satisfy 1 <= k < L = {n}")]
    BadK { k: usize, n: usize },
    #[error("neighbour graph is disconnected (component sizes {sizes:?}); increase k")]
    Disconnected { sizes: Vec<usize> },
}

/// Time-domain impulse response `[b][row][col][t]`, `N_tap = N_sub`.
#[derive(Debug, Clone, PartialEq)]
pub struct CirTensor {
    pub dims: CsiDims,
    pub values: Vec<Complex64>,
}

impl CirTensor {
    /// Antenna vector of array `b` at tap `t`.
    pub fn antenna_vector(&self, b: usize, t: usize) -> impl Iterator<Item = Complex64> + '_ {
        let n = self.dims.n_sub;
        let start = b * self.dims.antennas() * n;
        (0..self.dims.antennas()).map(move |a| self.values[start + a * n + t])
    }

    /// Power per tap, summed over arrays and antennas.
    pub fn tap_power(&self) -> Vec<f64> {
        let n = self.dims.n_sub;
        let mut out = vec![0.0; n];
        for chunk in self.values.chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v.norm_sqr();
            }
        }
        out
    }
}

pub fn cir_from_csi(csi: &CsiTensor) -> CirTensor {
    let dims = csi.dims();
    let mut values: Vec<Complex64> = csi.raw().iter().map(|v| Complex64::new(v.re as f64, v.im as f64)).collect();
    if dims.n_sub > 0 {
        for chunk in values.chunks_exact_mut(dims.n_sub) {
            dsp::ifft(chunk);
        }
    }
    CirTensor { dims, values }
}

/// Removes each array's mean delay, then delays every array by `lead` taps.
///
/// The mean delay comes from the phase rotation between adjacent
/// subcarriers summed over the array, `arg sum H[n+1] conj(H[n])`. Per-array
/// timing offsets shift whole impulse responses, so tap `t` of two records
/// would otherwise hold different paths; after alignment the strongest
/// energy of every array sits near tap `lead`.
pub fn align_delays(cir: &mut CirTensor, lead: f64) {
    let n = cir.dims.n_sub;
    let m = cir.dims.antennas();
    if n < 2 {
        return;
    }
    for arr in cir.values.chunks_exact_mut(m * n) {
        let mut spectra: Vec<Vec<Complex64>> = arr
            .chunks_exact(n)
            .map(|c| {
                let mut v = c.to_vec();
                dsp::fft(&mut v);
                v
            })
            .collect();
        let rot: Complex64 = spectra.iter().flat_map(|h| h.windows(2).map(|w| w[1] * w[0].conj())).sum();
        if rot.norm_sqr() == 0.0 {
            continue;
        }
        let tau = -rot.arg() * n as f64 / (2.0 * std::f64::consts::PI);
        for (h, out) in spectra.iter_mut().zip(arr.chunks_exact_mut(n)) {
            for (k, v) in h.iter_mut().enumerate() {
                *v *= Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 * (tau - lead) / n as f64);
            }
            dsp::ifft(h);
            out.copy_from_slice(h);
        }
    }
}

/// Length `T_w` of the shortest tap prefix holding at least `eta` of the
/// dataset-averaged power.
pub fn power_window(cirs: &[CirTensor], eta: f64) -> Result<usize, DissimError> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(DissimError::BadFraction(eta));
    }
    let n = cirs.first().map_or(0, |c| c.dims.n_sub);
    let mut profile = vec![0.0; n];
    for c in cirs {
        for (p, v) in profile.iter_mut().zip(c.tap_power()) {
            *p += v;
        }
    }
    let total: f64 = profile.iter().sum();
    if !(total > 0.0) {
        return Err(DissimError::ZeroPower);
    }
    if eta >= 1.0 {
        return Ok(n);
    }
    let mut acc = 0.0;
    for (t, p) in profile.iter().enumerate() {
        acc += p;
        if acc >= eta * total {
            return Ok(t + 1);
        }
    }
    Ok(n)
}

/// How the per-(array, tap) cosine terms of the ADP dissimilarity are pooled.
/// Both weight each term by `|h_i| |h_j|`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum AdpWeighting {
    /// One normalization over every (array, tap) slot: the strongest array
    /// dominates.
    Global,
    /// Normalized within each array, then averaged over the arrays heard by
    /// either record, so every usable array's angle counts equally; an array
    /// heard by only one of the two contributes 1. An array is heard when its
    /// windowed power is at least `min_share` of the record's strongest
    /// array, so arrays carrying only noise stay out of the average.
    PerArray { min_share: f64 },
}

impl Default for AdpWeighting {
    fn default() -> Self {
        Self::PerArray { min_share: 0.01 }
    }
}

/// ADP dissimilarity over the tap window `[0, window)`:
/// `sum_{b,t} w_bt (1 - |h_i^H h_j|^2 / (|h_i|^2 |h_j|^2))` with weights
/// proportional to `|h_i| |h_j|`, normalized over all slots.
pub fn adp_dissimilarity(a: &CirTensor, b: &CirTensor, window: usize) -> Result<f64, DissimError> {
    adp_dissimilarity_weighted(a, b, window, AdpWeighting::Global)
}

pub fn adp_dissimilarity_weighted(a: &CirTensor, b: &CirTensor, window: usize, weighting: AdpWeighting) -> Result<f64, DissimError> {
    if a.dims != b.dims {
        return Err(DissimError::ShapeMismatch);
    }
    let zero_a = a.values.iter().all(|v| v.norm_sqr() == 0.0);
    let zero_b = b.values.iter().all(|v| v.norm_sqr() == 0.0);
    if zero_a && zero_b {
        return Err(DissimError::BothZero);
    }
    let window = window.min(a.dims.n_sub);
    let heard_a = heard_arrays(a, window, weighting);
    let heard_b = heard_arrays(b, window, weighting);
    let (mut pool_num, mut pool_den) = (0.0, 0.0);
    for arr in 0..a.dims.arrays {
        let (mut num, mut den) = (0.0, 0.0);
        for t in 0..window {
            let (mut na, mut nb, mut dot) = (0.0, 0.0, Complex64::new(0.0, 0.0));
            for (x, y) in a.antenna_vector(arr, t).zip(b.antenna_vector(arr, t)) {
                na += x.norm_sqr();
                nb += y.norm_sqr();
                dot += x.conj() * y;
            }
            let w = (na * nb).sqrt();
            if w > 0.0 {
                num += w * (1.0 - dot.norm_sqr() / (na * nb));
                den += w;
            }
        }
        match weighting {
            AdpWeighting::Global => {
                pool_num += num;
                pool_den += den;
            }
            AdpWeighting::PerArray { .. } => {
                if heard_a[arr] && heard_b[arr] && den > 0.0 {
                    pool_num += num / den;
                    pool_den += 1.0;
                } else if heard_a[arr] || heard_b[arr] {
                    pool_num += 1.0;
                    pool_den += 1.0;
                }
            }
        }
    }
    // Nothing in common to compare: maximally dissimilar.
    if pool_den > 0.0 {
        Ok((pool_num / pool_den).clamp(0.0, 1.0))
    } else {
        Ok(1.0)
    }
}

/// Per array, whether its power in the window reaches the `min_share`
/// threshold (always true for global pooling).
fn heard_arrays(c: &CirTensor, window: usize, weighting: AdpWeighting) -> Vec<bool> {
    let AdpWeighting::PerArray { min_share } = weighting else {
        return vec![true; c.dims.arrays];
    };
    let power: Vec<f64> = (0..c.dims.arrays)
        .map(|arr| (0..window).flat_map(|t| c.antenna_vector(arr, t)).map(|v| v.norm_sqr()).sum())
        .collect();
    let max = power.iter().cloned().fold(0.0, f64::max);
    power.iter().map(|&p| p > 0.0 && p >= min_share * max).collect()
}

/// All-pairs ADP dissimilarity of a set of impulse responses.
///
/// For every (array, tap) slot the pairwise inner products are one Gram
/// matrix, so the whole matrix is built from dense products rather than
/// `L^2` separate loops.
pub fn dissimilarity_matrix_from_cirs(cirs: &[CirTensor], window: usize) -> Result<Array2<f64>, DissimError> {
    dissimilarity_matrix_weighted(cirs, window, AdpWeighting::Global)
}

pub fn dissimilarity_matrix_weighted(cirs: &[CirTensor], window: usize, weighting: AdpWeighting) -> Result<Array2<f64>, DissimError> {
    let l = cirs.len();
    if l < 2 {
        return Err(DissimError::TooFewRecords(l));
    }
    let dims = cirs[0].dims;
    if cirs.iter().any(|c| c.dims != dims) {
        return Err(DissimError::ShapeMismatch);
    }
    let zero: Vec<bool> = cirs.iter().map(|c| c.values.iter().all(|v| v.norm_sqr() == 0.0)).collect();
    if zero.iter().filter(|&&z| z).count() >= 2 {
        return Err(DissimError::BothZero);
    }
    let m = dims.antennas();
    let window = window.min(dims.n_sub);
    let heard: Vec<Vec<bool>> = cirs.par_iter().map(|c| heard_arrays(c, window, weighting)).collect();
    // Pooled over arrays (per-array mode) or over all slots (global mode).
    let mut pool_num = Array2::<f32>::zeros((l, l));
    let mut pool_den = Array2::<f32>::zeros((l, l));
    let mut num = Array2::<f32>::zeros((l, l));
    let mut den = Array2::<f32>::zeros((l, l));
    let mut stacked = Array2::<f32>::zeros((l, 2 * m));
    let mut rotated = Array2::<f32>::zeros((l, 2 * m));
    let mut norms = vec![0f32; l];
    for arr in 0..dims.arrays {
        num.fill(0.0);
        den.fill(0.0);
        for t in 0..window {
            for (i, c) in cirs.iter().enumerate() {
                let mut nsq = 0.0;
                for (a, v) in c.antenna_vector(arr, t).enumerate() {
                    stacked[(i, a)] = v.re as f32;
                    stacked[(i, m + a)] = v.im as f32;
                    rotated[(i, a)] = v.im as f32;
                    rotated[(i, m + a)] = -v.re as f32;
                    nsq += v.norm_sqr();
                }
                norms[i] = nsq.sqrt() as f32;
            }
            if norms.iter().all(|&n| n == 0.0) {
                continue;
            }
            // h_i^H h_j: real part from [re im].[re im], imaginary from [im -re].[re im]
            let re = stacked.dot(&stacked.t());
            let im = rotated.dot(&stacked.t());
            ndarray::Zip::indexed(&mut num).and(&mut den).and(&re).and(&im).par_for_each(|(i, j), nu, de, &r, &q| {
                let w = norms[i] * norms[j];
                if w > 0.0 {
                    *de += w;
                    *nu += w - (r * r + q * q) / w;
                }
            });
        }
        ndarray::Zip::indexed(&mut pool_num).and(&mut pool_den).and(&num).and(&den).par_for_each(|(i, j), pn, pd, &nu, &de| match weighting {
            AdpWeighting::Global => {
                *pn += nu;
                *pd += de;
            }
            AdpWeighting::PerArray { .. } => {
                if heard[i][arr] && heard[j][arr] && de > 0.0 {
                    *pn += nu / de;
                    *pd += 1.0;
                } else if heard[i][arr] || heard[j][arr] {
                    *pn += 1.0;
                    *pd += 1.0;
                }
            }
        });
    }
    let mut out = Array2::<f64>::zeros((l, l));
    for i in 0..l {
        for j in 0..i {
            let d = if pool_den[(i, j)] > 0.0 {
                (pool_num[(i, j)] as f64 / pool_den[(i, j)] as f64).clamp(0.0, 1.0)
            } else {
                1.0
            };
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
    Ok(out)
}

/// ADP dissimilarity matrix of a dataset with the shared power window.
pub fn dissimilarity_matrix(dataset: &SceneDataset, eta: f64) -> Result<Array2<f64>, DissimError> {
    dataset_dissimilarities(dataset, eta, AdpWeighting::Global)
}

pub fn dataset_dissimilarities(dataset: &SceneDataset, eta: f64, weighting: AdpWeighting) -> Result<Array2<f64>, DissimError> {
    dataset_dissimilarities_aligned(dataset, eta, weighting, None)
}

pub fn dataset_dissimilarities_aligned(dataset: &SceneDataset, eta: f64, weighting: AdpWeighting, align_lead: Option<f64>) -> Result<Array2<f64>, DissimError> {
    if dataset.len() < 2 {
        return Err(DissimError::TooFewRecords(dataset.len()));
    }
    let cirs: Vec<CirTensor> = dataset
        .records
        .par_iter()
        .map(|r| {
            let mut c = cir_from_csi(&r.csi);
            if let Some(lead) = align_lead {
                align_delays(&mut c, lead);
            }
            c
        })
        .collect();
    let window = power_window(&cirs, eta)?;
    dissimilarity_matrix_weighted(&cirs, window, weighting)
}

/// Undirected weighted adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub adjacency: Vec<Vec<(usize, f64)>>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn add_edge(&mut self, i: usize, j: usize, w: f64) {
        if i == j {
            return;
        }
        for (a, b) in [(i, j), (j, i)] {
            match self.adjacency[a].iter_mut().find(|(n, _)| *n == b) {
                Some(e) => e.1 = e.1.min(w),
                None => self.adjacency[a].push((b, w)),
            }
        }
    }

    /// Sizes of the connected components, largest first.
    pub fn component_sizes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        let mut sizes = Vec::new();
        for s in 0..self.len() {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut stack = vec![s];
            let mut size = 0;
            while let Some(v) = stack.pop() {
                size += 1;
                for &(n, _) in &self.adjacency[v] {
                    if !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
            sizes.push(size);
        }
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes
    }
}

/// Symmetrized k-nearest-neighbour graph with raw dissimilarities as
/// weights. Ties are broken by index.
pub fn knn_graph(dm: &Array2<f64>, k: usize) -> Result<Graph, DissimError> {
    let n = dm.nrows();
    if k < 1 || k >= n {
        return Err(DissimError::BadK { k, n });
    }
    let neighbours: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            idx.select_nth_unstable_by(k - 1, |&a, &b| dm[(i, a)].total_cmp(&dm[(i, b)]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect();
    let mut g = Graph {
        adjacency: vec![Vec::with_capacity(2 * k); n],
    };
    for (i, ns) in neighbours.iter().enumerate() {
        for &j in ns {
            g.add_edge(i, j, dm[(i, j)]);
        }
    }
    Ok(g)
}

#[derive(PartialEq)]
struct Item(f64, usize);

impl Eq for Item {}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest-path distances.
pub fn dijkstra(g: &Graph, source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; g.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Item(0.0, source));
    while let Some(Item(d, v)) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for &(n, w) in &g.adjacency[v] {
            let nd = d + w;
            if nd < dist[n] {
                dist[n] = nd;
                heap.push(Item(nd, n));
            }
        }
    }
    dist
}

fn ensure_connected(g: &Graph) -> Result<(), DissimError> {
    let sizes = g.component_sizes();
    if sizes.len() > 1 {
        return Err(DissimError::Disconnected { sizes });
    }
    Ok(())
}

/// All-pairs shortest paths by one Dijkstra run per source.
pub fn geodesic_matrix(g: &Graph) -> Result<Array2<f64>, DissimError> {
    ensure_connected(g)?;
    let n = g.len();
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|s| dijkstra(g, s)).collect();
    let mut out = Array2::zeros((n, n));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&ndarray::Array1::from(r));
    }
    // Exact symmetry regardless of summation order.
    for i in 0..n {
        for j in 0..i {
            let v = out[(i, j)].min(out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Landmark approximation `d(i, j) ~ min_l d(i, l) + d(l, j)` over
/// `landmarks` evenly spaced nodes; an upper bound on the exact geodesic.
pub fn landmark_geodesic_matrix(g: &Graph, landmarks: usize) -> Result<Array2<f64>, DissimError> {
    ensure_connected(g)?;
    let n = g.len();
    let m = landmarks.clamp(1, n);
    let sources: Vec<usize> = (0..m).map(|k| k * n / m).collect();
    let from: Vec<Vec<f64>> = sources.par_iter().map(|&s| dijkstra(g, s)).collect();
    let mut out = Array2::zeros((n, n));
    out.axis_iter_mut(ndarray::Axis(0)).into_par_iter().enumerate().for_each(|(i, mut row)| {
        for j in 0..n {
            row[j] = if i == j {
                0.0
            } else {
                from.iter().map(|d| d[i] + d[j]).fold(f64::INFINITY, f64::min)
            };
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum GeodesicMode {
    AllPairs,
    Landmarks(usize),
}

/// Returns the geodesic matrix and the `k` actually used. With `grow`, `k`
/// is doubled until the neighbour graph is connected.
pub fn geodesic_dissimilarities(dm: &Array2<f64>, k: usize, grow: bool, mode: GeodesicMode) -> Result<(Array2<f64>, usize), DissimError> {
    let n = dm.nrows();
    let mut k = k;
    loop {
        let g = knn_graph(dm, k.min(n - 1))?;
        let result = match mode {
            GeodesicMode::AllPairs => geodesic_matrix(&g),
            GeodesicMode::Landmarks(m) => landmark_geodesic_matrix(&g, m),
        };
        match result {
            Err(DissimError::Disconnected { .. }) if grow && k < n - 1 => k = (2 * k).min(n - 1),
            other => return other.map(|m| (m, k.min(n - 1))),
        }
    }
}

/// How raw dissimilarities become geodesic targets.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeodesicConfig {
    pub k: usize,
    pub eta: f64,
    /// Double `k` until the neighbour graph is connected instead of failing.
    pub grow_k: bool,
    pub mode: GeodesicMode,
    #[serde(default)]
    pub weighting: AdpWeighting,
    /// Lead in taps for [`align_delays`]; `None` compares raw taps.
    #[serde(default)]
    pub align_lead: Option<f64>,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        Self {
            k: 20,
            eta: 0.95,
            grow_k: false,
            mode: GeodesicMode::AllPairs,
            weighting: AdpWeighting::default(),
            align_lead: Some(1.0),
        }
    }
}

/// ADP dissimilarities of a dataset completed to geodesics; returns the
/// matrix and the neighbour count actually used.
pub fn dataset_geodesics(dataset: &SceneDataset, config: &GeodesicConfig) -> Result<(Array2<f64>, usize), DissimError> {
    let raw = dataset_dissimilarities_aligned(dataset, config.eta, config.weighting, config.align_lead)?;
    geodesic_dissimilarities(&raw, config.k, config.grow_k, config.mode)
}

/// Upper triangle of a square matrix, row-major.
pub fn upper_triangle(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    (0..n).flat_map(|i| m.slice(s![i, i + 1..]).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::spearman;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn dims(arrays: usize, rows: usize, cols: usize, n_sub: usize) -> CsiDims {
        CsiDims { arrays, rows, cols, n_sub }
    }

    fn random_csi(rng: &mut ChaCha8Rng, d: CsiDims) -> CsiTensor {
        CsiTensor::from_fn(d, |_, _, _, _| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
    }

    #[test]
    fn cir_examples() {
        let flat = CsiTensor::from_fn(dims(1, 1, 2, 16), |_, _, _, _| Complex64::new(1.0, 0.0));
        let cir = cir_from_csi(&flat);
        let p = cir.tap_power();
        assert!((p[0] - 2.0).abs() < 1e-12 && p[1..].iter().all(|&v| v < 1e-20));

        let k = 5;
        let delayed = CsiTensor::from_fn(dims(1, 1, 1, 16), |_, _, _, n| Complex64::from_polar(1.0, -2.0 * PI * (k * n) as f64 / 16.0));
        let p = cir_from_csi(&delayed).tap_power();
        assert!((p[k] - 1.0).abs() < 1e-6);
        assert!(p.iter().enumerate().all(|(t, &v)| t == k || v < 1e-10));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let csi = random_csi(&mut rng, dims(2, 2, 3, 32));
        let freq: f64 = csi.raw().iter().map(|v| (v.norm_sqr()) as f64).sum();
        let time: f64 = cir_from_csi(&csi).values.iter().map(|v| v.norm_sqr()).sum();
        assert!((time * 32.0 - freq).abs() < 1e-9 * freq);
    }

    fn taps(powers: &[(usize, f64)], n: usize) -> CirTensor {
        let mut values = vec![Complex64::new(0.0, 0.0); n];
        for &(t, p) in powers {
            values[t] = Complex64::new(p.sqrt(), 0.0);
        }
        CirTensor { dims: dims(1, 1, 1, n), values }
    }

    #[test]
    fn window_examples() {
        assert_eq!(power_window(&[taps(&[(0, 1.0)], 8)], 0.95), Ok(1));
        assert_eq!(power_window(&[taps(&[(0, 0.8), (3, 0.2)], 8)], 0.95), Ok(4));
        assert_eq!(power_window(&[taps(&[(0, 0.8), (3, 0.2)], 8)], 1.0), Ok(8));
        assert_eq!(power_window(&[taps(&[], 8)], 0.95), Err(DissimError::ZeroPower));
    }

    #[test]
    fn adp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = dims(3, 2, 2, 16);
        let csi = random_csi(&mut rng, d);
        let a = cir_from_csi(&csi);
        assert!(adp_dissimilarity(&a, &a, 16).unwrap() < 1e-12);

        let phases = [0.3, 2.0, -1.2];
        let mut rotated = csi.clone();
        for b in 0..3 {
            for r in 0..2 {
                for c in 0..2 {
                    for n in 0..16 {
                        let v = csi.get(b, r, c, n) * Complex64::from_polar(2.5, phases[b]);
                        rotated.set(b, r, c, n, v);
                    }
                }
            }
        }
        assert!(adp_dissimilarity(&a, &cir_from_csi(&rotated), 16).unwrap() < 1e-6);

        // orthogonal antenna vectors in every slot
        let x = CsiTensor::from_fn(dims(1, 1, 2, 4), |_, _, c, _| Complex64::new(if c == 0 { 1.0 } else { 0.0 }, 0.0));
        let y = CsiTensor::from_fn(dims(1, 1, 2, 4), |_, _, c, _| Complex64::new(if c == 1 { 1.0 } else { 0.0 }, 0.0));
        assert!((adp_dissimilarity(&cir_from_csi(&x), &cir_from_csi(&y), 4).unwrap() - 1.0).abs() < 1e-12);

        let z = cir_from_csi(&CsiTensor::zeros(d));
        assert_eq!(adp_dissimilarity(&z, &z, 16), Err(DissimError::BothZero));
    }

    #[test]
    fn matrix_matches_pairwise_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = dims(2, 2, 2, 8);
        let cirs: Vec<CirTensor> = (0..12).map(|_| cir_from_csi(&random_csi(&mut rng, d))).collect();
        let m = dissimilarity_matrix_from_cirs(&cirs, 5).unwrap();
        for i in 0..12 {
            assert_eq!(m[(i, i)], 0.0);
            for j in 0..12 {
                assert_eq!(m[(i, j)], m[(j, i)]);
                if i != j {
                    let direct = adp_dissimilarity(&cirs[i], &cirs[j], 5).unwrap();
                    assert!((m[(i, j)] - direct).abs() < 1e-5, "{} {}", m[(i, j)], direct);
                    assert!((0.0..=1.0).contains(&m[(i, j)]));
                }
            }
        }
        let same = vec![cirs[0].clone(), cirs[0].clone()];
        let m = dissimilarity_matrix_from_cirs(&same, 8).unwrap();
        assert!(m.iter().all(|&v| v.abs() < 1e-5));
    }

    #[test]
    fn per_array_pooling() {
        let w = AdpWeighting::PerArray { min_share: 0.01 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = dims(3, 2, 2, 8);
        let csi = random_csi(&mut rng, d);
        // b hears only arrays 0 and 1, identically to a; array 2 is heard by a
        // alone and counts as fully dissimilar.
        let mut partial = csi.clone();
        for r in 0..2 {
            for c in 0..2 {
                for n in 0..8 {
                    partial.set(2, r, c, n, Complex64::new(0.0, 0.0));
                }
            }
        }
        let (a, b) = (cir_from_csi(&csi), cir_from_csi(&partial));
        assert!((adp_dissimilarity_weighted(&a, &b, 8, w).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(adp_dissimilarity_weighted(&b, &b, 8, w).unwrap() < 1e-12);
        // An array below the share threshold is treated as unheard.
        let mut faint = csi.clone();
        for r in 0..2 {
            for c in 0..2 {
                for n in 0..8 {
                    faint.set(2, r, c, n, csi.get(2, r, c, n) * 1e-3);
                }
            }
        }
        assert!(adp_dissimilarity_weighted(&cir_from_csi(&faint), &b, 8, w).unwrap() < 1e-12);

        let cirs: Vec<CirTensor> = (0..10).map(|_| cir_from_csi(&random_csi(&mut rng, d))).chain([b.clone()]).collect();
        let m = dissimilarity_matrix_weighted(&cirs, 6, w).unwrap();
        for i in 0..cirs.len() {
            assert_eq!(m[(i, i)], 0.0);
            for j in 0..i {
                let direct = adp_dissimilarity_weighted(&cirs[i], &cirs[j], 6, w).unwrap();
                assert!((m[(i, j)] - direct).abs() < 1e-5, "{} {}", m[(i, j)], direct);
                assert_eq!(m[(i, j)], m[(j, i)]);
            }
        }
    }

    #[test]
    fn alignment_removes_per_array_delays() {
        let n = 64;
        let d = dims(2, 1, 2, n);
        let steer = [Complex64::new(1.0, 0.0), Complex64::from_polar(1.0, 0.7)];
        let delayed = |offsets: [f64; 2]| {
            CsiTensor::from_fn(d, |b, _, c, k| steer[c] * Complex64::from_polar(1.0, -2.0 * PI * k as f64 * offsets[b] / n as f64))
        };
        let mut a = cir_from_csi(&delayed([0.3, 4.6]));
        let mut b = cir_from_csi(&delayed([2.9, 0.1]));
        let gap = |x: &CirTensor, y: &CirTensor| x.tap_power().iter().zip(y.tap_power()).map(|(p, q)| (p - q).abs()).sum::<f64>();
        assert!(gap(&a, &b) > 1.0);
        align_delays(&mut a, 1.0);
        align_delays(&mut b, 1.0);
        // CSI is stored in f32.
        assert!(gap(&a, &b) < 1e-6);
        assert!(adp_dissimilarity(&a, &b, 8).unwrap() < 1e-6);
        let reference = cir_from_csi(&delayed([1.0, 1.0]));
        for (x, y) in a.values.iter().zip(&reference.values) {
            assert!((x - y).norm() < 1e-6);
        }
    }

    fn square(n: usize, seed: u64) -> (Vec<[f64; 2]>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let dm = Array2::from_shape_fn((n, n), |(i, j)| ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt());
        (p, dm)
    }

    #[test]
    fn knn_examples() {
        let (_, dm) = square(10, 1);
        let g = knn_graph(&dm, 9).unwrap();
        assert!((0..10).all(|i| g.degree(i) == 9));
        let line = Array2::from_shape_fn((3, 3), |(i, j)| (i as f64 - j as f64).abs());
        let g = knn_graph(&line, 1).unwrap();
        assert_eq!(g.degree(0), 1);
        assert_eq!(g.degree(1), 2);
        assert_eq!(g.degree(2), 1);
        let (_, dm) = square(50, 2);
        let g = knn_graph(&dm, 4).unwrap();
        assert!((0..50).all(|i| g.degree(i) >= 4));
        assert_eq!(knn_graph(&dm, 50), Err(DissimError::BadK { k: 50, n: 50 }));
    }

    #[test]
    fn geodesic_examples() {
        let line = Array2::from_shape_fn((3, 3), |(i, j)| (i as f64 - j as f64).abs());
        let g = geodesic_matrix(&knn_graph(&line, 1).unwrap()).unwrap();
        assert_eq!(g[(0, 2)], 2.0);

        let (_, dm) = square(30, 3);
        let full = geodesic_matrix(&knn_graph(&dm, 29).unwrap()).unwrap();
        assert!(full.iter().zip(dm.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

        let (p, dm) = square(200, 4);
        let geo = geodesic_matrix(&knn_graph(&dm, 10).unwrap()).unwrap();
        let truth = Array2::from_shape_fn((200, 200), |(i, j)| ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt());
        let rho = spearman(&upper_triangle(&geo), &upper_triangle(&truth));
        assert!(rho >= 0.95, "{rho}");

        let g = knn_graph(&dm, 10).unwrap();
        for i in 0..200 {
            for &(j, w) in &g.adjacency[i] {
                assert!(geo[(i, j)] <= w + 1e-12 && geo[(i, j)] <= dm[(i, j)] + 1e-12);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let (i, j, k) = (rng.gen_range(0..200), rng.gen_range(0..200), rng.gen_range(0..200));
            assert!(geo[(i, k)] <= geo[(i, j)] + geo[(j, k)] + 1e-12);
        }

        let mut g2 = g.clone();
        g2.add_edge(0, 199, dm[(0, 199)]);
        let geo2 = geodesic_matrix(&g2).unwrap();
        assert!(geo2.iter().zip(geo.iter()).all(|(a, b)| a <= b));

        let lm = landmark_geodesic_matrix(&g, 40).unwrap();
        assert!(lm.iter().zip(geo.iter()).all(|(a, b)| *a >= b - 1e-12));
    }

    #[test]
    fn disconnected_graph_is_an_error() {
        let dm = Array2::from_shape_fn((4, 4), |(i, j)| if (i < 2) == (j < 2) { 1.0 } else { 100.0 });
        let g = knn_graph(&dm, 1).unwrap();
        assert_eq!(geodesic_matrix(&g), Err(DissimError::Disconnected { sizes: vec![2, 2] }));
        let (_, used) = geodesic_dissimilarities(&dm, 1, true, GeodesicMode::AllPairs).unwrap();
        assert_eq!(used, 2);
    }
}
