//! Multistory charting: floors are found by k-means on a conventional 3-D
//! chart, each floor gets its own 2-D expert chart, and the experts are put
//! back together at per-floor heights.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chartnet::{self, ChartError, Mlp32, TrainConfig};
use crate::dissim::{self, DissimError, GeodesicConfig};
use crate::evalkit::{optimal_affine, Affine, EvalError};
use crate::scalar::Real;
use crate::tensors::SceneDataset;

#[derive(Debug, thiserror::Error)]
pub enum MultistoryError {
    #[error("k-means needs {k} distinct points, found {distinct}")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("floor {floor} has {size} records, minimum is {min}")]
    FloorTooSmall { floor: usize, size: usize, min: usize },
    #[error("label {label} out of range for {floors} floors")]
    LabelOutOfRange { label: usize, floors: usize },
    #[error("{0} records but {1} labels or chart rows")]
    LengthMismatch(usize, usize),
    #[error("floor {floor}: {source}")]
    Dissim { floor: usize, source: DissimError },
    #[error("floor {floor}: {source}")]
    Chart { floor: usize, source: ChartError },
    #[error("floor {floor} alignment: {source}")]
    Align { floor: usize, source: EvalError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorAssignment {
    pub labels: Vec<usize>,
    /// `K x d`, row per cluster.
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_trace: Vec<f64>,
}

impl FloorAssignment {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    /// Record indices per cluster; a partition of `0..L`.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

fn distinct_rows<T: Real>(points: &ArrayView2<T>) -> usize {
    let mut rows: Vec<Vec<T>> = points.outer_iter().map(|r| r.to_vec()).collect();
    rows.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.partial_cmp(y).unwrap()).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    rows.dedup();
    rows.len()
}

/// Lloyd's algorithm from a k-means++ start. Empty clusters are reseeded at
/// the point farthest from its centroid. Inertia never increases between
/// iterations (checked on every run).
pub fn kmeans<T: Real>(points: ArrayView2<T>, k: usize, seed: u64, max_iter: usize) -> Result<FloorAssignment, MultistoryError> {
    if k == 0 {
        return Err(MultistoryError::ZeroClusters);
    }
    let distinct = distinct_rows(&points);
    if distinct < k {
        return Err(MultistoryError::TooFewDistinct { k, distinct });
    }
    let n = points.nrows();
    let rows: Vec<Vec<T>> = points.outer_iter().map(|r| r.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<T>> = vec![rows[rng.gen_range(0..n)].clone()];
    let mut nearest: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0]).as_f64()).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(rows[pick].clone());
        for (i, r) in rows.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(r, centroids.last().unwrap()).as_f64());
        }
    }
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, r) in rows.iter().enumerate() {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, m)| (c, sq_dist(r, m).as_f64()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
            inertia += d;
        }
        if let Some(&prev) = trace.last() {
            assert!(inertia <= prev * (1.0 + 1e-12) + 1e-300, "k-means inertia increased: {prev} -> {inertia}");
        }
        trace.push(inertia);
        if !changed && trace.len() > 1 {
            break;
        }
        let dim = points.ncols();
        let mut sums = vec![vec![T::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(r) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|&s| s / T::lit(counts[c] as f64)).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| sq_dist(&rows[a], &centroids[labels[a]]).partial_cmp(&sq_dist(&rows[b], &centroids[labels[b]])).unwrap())
                    .expect("k distinct points guarantee a donor cluster");
                counts[labels[far]] -= 1;
                counts[c] = 1;
                labels[far] = c;
                centroids[c] = rows[far].clone();
            }
        }
    }
    let inertia = *trace.last().unwrap();
    Ok(FloorAssignment {
        labels,
        centroids: centroids.iter().map(|c| c.iter().map(|v| v.as_f64()).collect()).collect(),
        inertia,
        inertia_trace: trace,
    })
}

/// Restarts of the floor clustering; single k-means runs on stacked sheets
/// often settle in a column-wise local optimum.
pub const KMEANS_RESTARTS: u64 = 10;

/// Best-of-[`KMEANS_RESTARTS`] k-means (lowest inertia; ties keep the
/// earliest seed).
pub fn classify_floors(chart3d: ArrayView2<f64>, n_floor: usize, seed: u64) -> Result<FloorAssignment, MultistoryError> {
    let mut best = kmeans(chart3d, n_floor, seed, 300)?;
    for r in 1..KMEANS_RESTARTS {
        let next = kmeans(chart3d, n_floor, seed.wrapping_add(r), 300)?;
        if next.inertia < best.inertia {
            best = next;
        }
    }
    Ok(best)
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials). Returns `assign[row] = col`.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Cluster-to-floor map maximizing agreement, and the fraction of records
/// misassigned under it.
pub fn match_clusters_to_floors(labels: &[usize], floors: &[usize]) -> (Vec<usize>, f64) {
    assert_eq!(labels.len(), floors.len(), "label vectors must have equal length");
    let n = labels.iter().chain(floors).max().map_or(0, |m| m + 1);
    let mut confusion = Array2::<f64>::zeros((n, n));
    for (&l, &f) in labels.iter().zip(floors) {
        confusion[(l, f)] += 1.0;
    }
    let perm = hungarian(&confusion.mapv(|c| -c));
    let agree: f64 = perm.iter().enumerate().map(|(l, &f)| confusion[(l, f)]).sum();
    let err = if labels.is_empty() { 0.0 } else { 1.0 - agree / labels.len() as f64 };
    (perm, err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistoryConfig {
    pub n_floors: usize,
    pub geodesic: GeodesicConfig,
    /// Expert training; `out_dim` is forced to 2.
    pub expert: TrainConfig,
    pub min_floor_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub alignment: ExpertAlignment,
}

/// How the per-floor expert charts are brought into one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertAlignment {
    /// Affine fit of each expert onto the stage-0 chart's plane coordinates.
    Stage0Plane,
    /// Affine fits between height-adjacent floors on mutually most similar
    /// cross-floor record pairs, chained out from the middle floor.
    #[default]
    CrossFloor,
}

impl Default for MultistoryConfig {
    fn default() -> Self {
        Self {
            n_floors: 5,
            geodesic: GeodesicConfig {
                grow_k: true,
                ..Default::default()
            },
            expert: TrainConfig {
                out_dim: 2,
                ..Default::default()
            },
            min_floor_size: 50,
            seed: 0,
            alignment: ExpertAlignment::default(),
        }
    }
}

/// Orthonormal frame of the stage-0 chart: `height` is the principal axis of
/// the cluster centroids, `plane` spans its orthogonal complement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartFrame {
    pub origin: [f64; 3],
    pub height: [f64; 3],
    pub plane: [[f64; 3]; 2],
}

impl ChartFrame {
    pub fn from_centroids(centroids: &[Vec<f64>]) -> Self {
        let k = centroids.len() as f64;
        let mut origin = [0.0; 3];
        for c in centroids {
            for d in 0..3 {
                origin[d] += c[d] / k;
            }
        }
        let mut scatter = nalgebra::Matrix3::<f64>::zeros();
        for c in centroids {
            let v = nalgebra::Vector3::new(c[0] - origin[0], c[1] - origin[1], c[2] - origin[2]);
            scatter += v * v.transpose();
        }
        let height = if centroids.len() < 2 || scatter.norm() == 0.0 {
            nalgebra::Vector3::z()
        } else {
            let eig = scatter.symmetric_eigen();
            let i = eig.eigenvalues.imax();
            eig.eigenvectors.column(i).into_owned().normalize()
        };
        let helper = if height.x.abs() < 0.9 { nalgebra::Vector3::x() } else { nalgebra::Vector3::y() };
        let a = (helper - height * height.dot(&helper)).normalize();
        let b = height.cross(&a);
        Self {
            origin,
            height: height.into(),
            plane: [a.into(), b.into()],
        }
    }

    /// `(plane_0, plane_1, height)` coordinates of a chart point.
    pub fn coordinates(&self, p: &[f64]) -> [f64; 3] {
        let r = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        let dot = |a: &[f64; 3]| a[0] * r[0] + a[1] * r[1] + a[2] * r[2];
        [dot(&self.plane[0]), dot(&self.plane[1]), dot(&self.height)]
    }
}

#[derive(Debug, Clone)]
pub struct MultistoryModel {
    pub floor_experts: Vec<Mlp32>,
    /// Chart-unit height of each floor along the frame's height axis.
    pub floor_heights: Vec<f64>,
    /// Maps each expert's 2-D output into the frame's plane coordinates.
    pub alignments: Vec<Affine<f64>>,
    pub frame: ChartFrame,
    pub assignment: FloorAssignment,
    /// Neighbour count used for each floor's geodesics.
    pub k_used: Vec<usize>,
    pub loss_traces: Vec<Vec<f64>>,
}

/// Classifies floors on the stage-0 chart, then trains one 2-D expert per
/// floor on that floor's own geodesic dissimilarities.
///
/// The experts are then brought into one frame (see [`ExpertAlignment`]) so
/// that a single global transform can evaluate the assembled result.
pub fn train_multistory(
    dataset: &SceneDataset,
    features: ArrayView2<f32>,
    chart3d: ArrayView2<f64>,
    config: &MultistoryConfig,
) -> Result<MultistoryModel, MultistoryError> {
    let l = dataset.len();
    if features.nrows() != l || chart3d.nrows() != l {
        return Err(MultistoryError::LengthMismatch(l, features.nrows().min(chart3d.nrows())));
    }
    let assignment = classify_floors(chart3d, config.n_floors, config.seed)?;
    let members = assignment.members();
    for (floor, m) in members.iter().enumerate() {
        if m.len() < config.min_floor_size {
            return Err(MultistoryError::FloorTooSmall {
                floor,
                size: m.len(),
                min: config.min_floor_size,
            });
        }
    }
    let frame = ChartFrame::from_centroids(&assignment.centroids);
    let coords: Vec<[f64; 3]> = chart3d.outer_iter().map(|r| frame.coordinates(&r.to_vec())).collect();
    let floor_heights: Vec<f64> = members.iter().map(|m| m.iter().map(|&i| coords[i][2]).sum::<f64>() / m.len() as f64).collect();
    let expert_config = TrainConfig {
        out_dim: 2,
        ..config.expert.clone()
    };
    let results: Vec<Result<_, MultistoryError>> = members
        .par_iter()
        .enumerate()
        .map(|(floor, m)| {
            let subset = dataset.subset(m);
            let (geo, k_used) = dissim::dataset_geodesics(&subset, &config.geodesic).map_err(|source| MultistoryError::Dissim { floor, source })?;
            let (geo, _) = chartnet::normalize_mean(&geo);
            let x = features.select(Axis(0), m);
            let cfg = TrainConfig {
                rng_seed: expert_config.rng_seed.wrapping_add(floor as u64),
                ..expert_config.clone()
            };
            let out = chartnet::train_fcf(x.view(), &geo, &cfg, None, None).map_err(|source| MultistoryError::Chart { floor, source })?;
            let z = chartnet::infer(&out.params, x.view())
                .map_err(|source| MultistoryError::Chart { floor, source })?
                .mapv(f64::from);
            Ok((out.params, z, k_used, out.loss_trace))
        })
        .collect();
    let mut experts = Vec::new();
    for r in results {
        experts.push(r?);
    }
    let charts: Vec<&Array2<f64>> = experts.iter().map(|e| &e.1).collect();
    let alignments = match config.alignment {
        ExpertAlignment::Stage0Plane => charts
            .iter()
            .zip(&members)
            .enumerate()
            .map(|(floor, (z, m))| {
                let target = Array2::from_shape_fn((m.len(), 2), |(r, c)| coords[m[r]][c]);
                optimal_affine(z.view(), target.view()).map_err(|source| MultistoryError::Align { floor, source })
            })
            .collect::<Result<Vec<_>, _>>()?,
        ExpertAlignment::CrossFloor => {
            let raw = dissim::dataset_dissimilarities_aligned(dataset, config.geodesic.eta, config.geodesic.weighting, config.geodesic.align_lead)
                .map_err(|source| MultistoryError::Dissim { floor: 0, source })?;
            cross_floor_alignments(&raw, &members, &charts, &floor_heights)?
        }
    };
    let mut model = MultistoryModel {
        floor_experts: Vec::new(),
        floor_heights,
        alignments,
        frame,
        assignment,
        k_used: Vec::new(),
        loss_traces: Vec::new(),
    };
    for (params, _, k, trace) in experts {
        model.floor_experts.push(params);
        model.k_used.push(k);
        model.loss_traces.push(trace);
    }
    Ok(model)
}

/// Position in `to` of the record most similar to record `i`.
fn most_similar(dissim: &Array2<f64>, i: usize, to: &[usize]) -> usize {
    (0..to.len()).min_by(|&x, &y| dissim[(i, to[x])].total_cmp(&dissim[(i, to[y])])).unwrap_or(0)
}

/// Positions `(r, q)` into `a` and `b` of record pairs that are each other's
/// most similar record on the other floor.
pub fn mutual_nearest(dissim: &Array2<f64>, a: &[usize], b: &[usize]) -> Vec<(usize, usize)> {
    let best_b: Vec<usize> = a.iter().map(|&i| most_similar(dissim, i, b)).collect();
    let best_a: Vec<usize> = b.iter().map(|&j| most_similar(dissim, j, a)).collect();
    (0..a.len()).filter(|&r| best_a[best_b[r]] == r).map(|r| (r, best_b[r])).collect()
}

/// Fewest mutual pairs accepted for one floor-to-floor fit; below this all
/// one-sided best matches of the aligned floor are used.
pub const MIN_CROSS_PAIRS: usize = 10;

/// Expert-to-common-frame maps from cross-floor correspondences. The middle
/// floor by height keeps its own expert frame; every other floor is fitted
/// onto its already aligned height neighbour towards the middle.
pub fn cross_floor_alignments(
    dissim: &Array2<f64>,
    members: &[Vec<usize>],
    charts: &[&Array2<f64>],
    heights: &[f64],
) -> Result<Vec<Affine<f64>>, MultistoryError> {
    let n = members.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| heights[a].total_cmp(&heights[b]));
    let mid = n / 2;
    let mut out: Vec<Option<Affine<f64>>> = vec![None; n];
    out[order[mid]] = Some(Affine::identity(2));
    let steps = (mid + 1..n).map(|p| (order[p - 1], order[p])).chain((0..mid).rev().map(|p| (order[p + 1], order[p])));
    for (anchor, floor) in steps {
        let mut pairs = mutual_nearest(dissim, &members[anchor], &members[floor]);
        if pairs.len() < MIN_CROSS_PAIRS {
            pairs = members[floor].iter().enumerate().map(|(q, &j)| (most_similar(dissim, j, &members[anchor]), q)).collect();
        }
        let anchor_map = out[anchor].clone().expect("anchor aligned first");
        let src = Array2::from_shape_fn((pairs.len(), 2), |(r, c)| charts[floor][(pairs[r].1, c)]);
        let dst_raw = Array2::from_shape_fn((pairs.len(), 2), |(r, c)| charts[anchor][(pairs[r].0, c)]);
        let dst = anchor_map.apply(dst_raw.view());
        out[floor] = Some(optimal_affine(src.view(), dst.view()).map_err(|source| MultistoryError::Align { floor, source })?);
    }
    Ok(out.into_iter().map(|a| a.expect("every floor reached")).collect())
}

/// Expert position in the plane and the floor height on the height axis, in
/// the model's chart frame.
pub fn assemble_positions(model: &MultistoryModel, features: ArrayView2<f32>, labels: &[usize]) -> Result<Array2<f64>, MultistoryError> {
    let floors = model.floor_experts.len();
    if features.nrows() != labels.len() {
        return Err(MultistoryError::LengthMismatch(features.nrows(), labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= floors) {
        return Err(MultistoryError::LabelOutOfRange { label, floors });
    }
    let mut out = Array2::zeros((labels.len(), 3));
    for floor in 0..floors {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == floor).collect();
        if idx.is_empty() {
            continue;
        }
        let x = features.select(Axis(0), &idx);
        let z = chartnet::infer(&model.floor_experts[floor], x.view())
            .map_err(|source| MultistoryError::Chart { floor, source })?
            .mapv(f64::from);
        let plane = model.alignments[floor].apply(z.view());
        for (r, &i) in idx.iter().enumerate() {
            out.slice_mut(s![i, 0..2]).assign(&plane.row(r));
            out[(i, 2)] = model.floor_heights[floor];
        }
    }
    Ok(out)
}

/// Chart points expressed in a frame's `(plane_0, plane_1, height)` axes.
pub fn to_frame(frame: &ChartFrame, chart3d: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((chart3d.nrows(), 3));
    for (mut o, r) in out.outer_iter_mut().zip(chart3d.outer_iter()) {
        o.assign(&Array1::from(frame.coordinates(&r.to_vec()).to_vec()));
    }
    out
}
