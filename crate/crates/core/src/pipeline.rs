//! End-to-end experiments: triangulation, conventional and augmented
//! charting on one dataset, multistory charting, and parameter sweeps.

use std::time::Instant;

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamfeat::{self, FeatureError, Normalizer};
use crate::chartnet::{self, ChartError, ChartMode, Mlp32, TrainConfig};
use crate::classical::{self, AoaEstimate, AoaLikelihood, ClassicalError, TriangulationOptions};
use crate::dissim::{self, DissimError, GeodesicConfig};
use crate::evalkit::{self, EvalError, EvalReport};
use crate::multistory::{self, MultistoryConfig, MultistoryError};
use crate::scenesim::{self, presets, Aabb, SceneSpec, SimError};
use crate::tensors::{DatasetError, SceneDataset};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("features: {0}")]
    Feature(#[from] FeatureError),
    #[error("classical localization: {0}")]
    Classical(#[from] ClassicalError),
    #[error("dissimilarity: {0}")]
    Dissim(#[from] DissimError),
    #[error("charting: {0}")]
    Chart(#[from] ChartError),
    #[error("multistory: {0}")]
    Multistory(#[from] MultistoryError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Invalid(String),
}

/// Smallest box holding every UE region of a scene.
pub fn ue_bounds(scene: &SceneSpec) -> Aabb {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for r in &scene.ue_regions {
        for k in 0..3 {
            min[k] = min[k].min(r.min[k]);
            max[k] = max[k].max(r.max[k]);
        }
    }
    Aabb::new(min, max)
}

pub fn truth_matrix(dataset: &SceneDataset) -> Array2<f64> {
    Array2::from_shape_fn((dataset.len(), 3), |(i, k)| dataset.records[i].position[k] as f64)
}

#[derive(Debug, Clone)]
pub struct Triangulated {
    pub positions: Array2<f64>,
    pub log_likelihood: Vec<f64>,
    pub low_confidence: Vec<bool>,
    /// Per record, the estimates of every array whose AoA could be formed.
    pub estimates: Vec<Vec<AoaEstimate>>,
}

/// AoA estimation and triangulation for every record. Arrays whose AoA
/// cannot be estimated are left out of that record's likelihood; records
/// with fewer than two usable arrays fall back to the region center and are
/// flagged low-confidence.
pub fn triangulate_dataset(dataset: &SceneDataset, region: &Aabb, options: &TriangulationOptions) -> Triangulated {
    let center = [0, 1, 2].map(|k| 0.5 * (region.min[k] + region.max[k]));
    let rows: Vec<(Vec<AoaEstimate>, [f64; 3], f64, bool)> = dataset
        .records
        .par_iter()
        .map(|rec| {
            let est: Vec<AoaEstimate> = (0..dataset.arrays.len())
                .filter_map(|b| classical::estimate_aoa(&rec.csi, b, &dataset.arrays[b], &dataset.config).ok())
                .collect();
            match classical::triangulate(&est, &dataset.arrays, region, options) {
                Ok(t) => (est, t.position.into(), t.log_likelihood, t.low_confidence),
                Err(_) => (est, center, f64::NEG_INFINITY, true),
            }
        })
        .collect();
    let mut positions = Array2::zeros((rows.len(), 3));
    let mut out = Triangulated {
        positions: Array2::zeros((0, 3)),
        log_likelihood: Vec::with_capacity(rows.len()),
        low_confidence: Vec::with_capacity(rows.len()),
        estimates: Vec::with_capacity(rows.len()),
    };
    for (i, (est, p, ll, low)) in rows.into_iter().enumerate() {
        for k in 0..3 {
            positions[(i, k)] = p[k];
        }
        out.log_likelihood.push(ll);
        out.low_confidence.push(low);
        out.estimates.push(est);
    }
    out.positions = positions;
    out
}

pub fn dataset_features(dataset: &SceneDataset) -> Result<(Normalizer, Array2<f32>), PipelineError> {
    let refs: Vec<_> = dataset.records.iter().map(|r| &r.csi).collect();
    Ok(beamfeat::dataset_features(&refs, None)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartingConfig {
    pub geodesic: GeodesicConfig,
    pub siamese: TrainConfig,
    pub augmented: TrainConfig,
    pub triangulation: TriangulationOptions,
    pub run_conventional: bool,
    pub run_augmented: bool,
}

impl Default for ChartingConfig {
    fn default() -> Self {
        Self {
            geodesic: GeodesicConfig {
                grow_k: true,
                ..Default::default()
            },
            siamese: TrainConfig::default(),
            // Raw loss terms: per-term normalization lets the geodesic term
            // stretch the chart along its most sensitive axis.
            augmented: TrainConfig {
                mode: ChartMode::Augmented,
                lambda: 0.2,
                normalize_terms: false,
                ..Default::default()
            },
            triangulation: TriangulationOptions::default(),
            run_conventional: true,
            run_augmented: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChartingResults {
    pub triangulation: EvalReport,
    /// After the optimal affine map.
    pub conventional: Option<EvalReport>,
    /// In the physical frame, no transform.
    pub augmented: Option<EvalReport>,
    pub conventional_chart: Option<Array2<f64>>,
    pub augmented_chart: Option<Array2<f64>>,
    pub conventional_params: Option<Mlp32>,
    pub augmented_params: Option<Mlp32>,
    pub triangulated: Triangulated,
    pub k_used: usize,
    pub loss_traces: Vec<(String, Vec<f64>)>,
    pub timings: Vec<(String, f64)>,
}

/// Output map for an augmented network: centered on the triangulated cloud
/// and scaled to its spread.
pub fn physical_output_map(positions: &Array2<f64>) -> (f32, [f32; 3]) {
    let n = positions.nrows() as f64;
    let mean = [0, 1, 2].map(|k| positions.column(k).sum() / n);
    let var = (0..3).map(|k| positions.column(k).iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>() / n).sum::<f64>() / 3.0;
    (var.sqrt().max(1e-3) as f32, mean.map(|v| v as f32))
}

/// Triangulation, conventional Siamese charting and augmented charting on
/// one dataset, each evaluated against the ground truth.
pub fn run_charting(dataset: &SceneDataset, region: &Aabb, config: &ChartingConfig) -> Result<ChartingResults, PipelineError> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_owned(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let truth = truth_matrix(dataset);
    let tri = triangulate_dataset(dataset, region, &config.triangulation);
    let tri_report = evalkit::mae(tri.positions.view(), truth.view(), None)?;
    lap("triangulation", &mut timings);

    let (_, features) = dataset_features(dataset)?;
    lap("features", &mut timings);
    let (geo, k_used) = dissim::dataset_geodesics(dataset, &config.geodesic)?;
    lap("geodesics", &mut timings);

    let mut results = ChartingResults {
        triangulation: tri_report,
        conventional: None,
        augmented: None,
        conventional_chart: None,
        augmented_chart: None,
        conventional_params: None,
        augmented_params: None,
        triangulated: tri,
        k_used,
        loss_traces: Vec::new(),
        timings: Vec::new(),
    };
    if config.run_conventional {
        let (target, _) = chartnet::normalize_mean(&geo);
        let cfg = TrainConfig {
            mode: ChartMode::Siamese,
            ..config.siamese.clone()
        };
        let out = chartnet::train_fcf(features.view(), &target, &cfg, None, None)?;
        let chart = chartnet::infer(&out.params, features.view())?.mapv(f64::from);
        results.conventional = Some(evalkit::mae_after_affine(chart.view(), truth.view())?);
        results.conventional_chart = Some(chart);
        results.conventional_params = Some(out.params);
        results.loss_traces.push(("conventional".into(), out.loss_trace));
        lap("conventional", &mut timings);
    }
    if config.run_augmented {
        let positions: Vec<[f64; 3]> = results.triangulated.positions.outer_iter().map(|r| [r[0], r[1], r[2]]).collect();
        let target = chartnet::scale_dissimilarities(&geo, &positions)?;
        let lik: Vec<AoaLikelihood<f32>> = results.triangulated.estimates.iter().map(|e| AoaLikelihood::new(e, &dataset.arrays)).collect();
        let cfg = TrainConfig {
            mode: ChartMode::Augmented,
            out_dim: 3,
            ..config.augmented.clone()
        };
        let mut init = chartnet::init_params::<f32>(cfg.rng_seed, features.ncols(), &cfg.widths, 3);
        let (scale, offset) = physical_output_map(&results.triangulated.positions);
        init.output_scale = scale;
        init.output_offset = ndarray::Array1::from(offset.to_vec());
        let out = chartnet::train_fcf(features.view(), &target, &cfg, Some(&lik), Some(init))?;
        let chart = chartnet::infer(&out.params, features.view())?.mapv(f64::from);
        results.augmented = Some(evalkit::mae(chart.view(), truth.view(), None)?);
        results.augmented_chart = Some(chart);
        results.augmented_params = Some(out.params);
        results.loss_traces.push(("augmented".into(), out.loss_trace));
        lap("augmented", &mut timings);
    }
    results.timings = timings;
    Ok(results)
}

#[derive(Debug, Clone)]
pub struct MultistoryResults {
    /// Stage-0 3-D chart after the optimal affine map.
    pub conventional: EvalReport,
    /// Assembled positions after one global affine map.
    pub multistory: EvalReport,
    pub classification_error: f64,
    pub cluster_to_floor: Vec<usize>,
    pub stage0: Mlp32,
    pub stage0_chart: Array2<f64>,
    pub model: multistory::MultistoryModel,
    pub assembled: Array2<f64>,
    pub timings: Vec<(String, f64)>,
}

pub fn run_multistory(dataset: &SceneDataset, stage0: &TrainConfig, config: &MultistoryConfig) -> Result<MultistoryResults, PipelineError> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let truth = truth_matrix(dataset);
    let (_, features) = dataset_features(dataset)?;
    let (geo, _) = dissim::dataset_geodesics(dataset, &config.geodesic)?;
    timings.push(("features+geodesics".to_owned(), clock.elapsed().as_secs_f64()));
    clock = Instant::now();
    let (target, _) = chartnet::normalize_mean(&geo);
    let cfg = TrainConfig {
        mode: ChartMode::Siamese,
        out_dim: 3,
        ..stage0.clone()
    };
    let out = chartnet::train_fcf(features.view(), &target, &cfg, None, None)?;
    let chart = chartnet::infer(&out.params, features.view())?.mapv(f64::from);
    let conventional = evalkit::mae_after_affine(chart.view(), truth.view())?;
    timings.push(("stage0".to_owned(), clock.elapsed().as_secs_f64()));
    clock = Instant::now();
    let model = multistory::train_multistory(dataset, features.view(), chart.view(), config)?;
    timings.push(("experts".to_owned(), clock.elapsed().as_secs_f64()));
    let labels = model.assignment.labels.clone();
    let assembled = multistory::assemble_positions(&model, features.view(), &labels)?;
    let report = evalkit::mae_after_affine(assembled.view(), truth.view())?;
    let floors = dataset
        .floor_labels()
        .ok_or_else(|| PipelineError::Invalid("multistory evaluation needs floor labels".into()))?;
    let (perm, err) = multistory::match_clusters_to_floors(&labels, &floors);
    Ok(MultistoryResults {
        conventional,
        multistory: report,
        classification_error: err,
        cluster_to_floor: perm,
        stage0: out.params,
        stage0_chart: chart,
        model,
        assembled,
        timings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    NRow,
    Density,
}

impl std::str::FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "n_row" => Ok(Self::NRow),
            "density" => Ok(Self::Density),
            other => Err(format!("unknown sweep parameter `{other}` (expected n_row or density)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<f64>,
    /// Array columns (fixed during an `n_row` sweep).
    pub n_col: usize,
    /// Array rows (fixed during a density sweep).
    pub n_row: usize,
    /// Record count for an `n_row` sweep.
    pub samples: usize,
    pub seed: u64,
    pub charting: ChartingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub method: String,
    pub mae: f64,
}

/// Factory scene for one sweep point.
pub fn sweep_scene(config: &SweepConfig, value: f64) -> SceneSpec {
    match config.param {
        SweepParam::NRow => presets::factory(value as usize, config.n_col, config.samples, config.seed),
        SweepParam::Density => {
            let mut scene = presets::factory(config.n_row, config.n_col, 0, config.seed);
            let volume = ue_bounds(&scene).volume();
            scene.ue_regions[0].count = (value * volume).round() as usize;
            scene
        }
    }
}

/// Regenerates the scene at every value and runs all three methods.
pub fn sweep(config: &SweepConfig) -> Result<Vec<(f64, ChartingResults)>, PipelineError> {
    config
        .values
        .iter()
        .map(|&v| {
            let scene = sweep_scene(config, v);
            let data = scenesim::generate_dataset(&scene)?;
            let res = run_charting(&data, &ue_bounds(&scene), &config.charting)?;
            Ok((v, res))
        })
        .collect()
}

pub fn sweep_rows(results: &[(f64, ChartingResults)]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for (v, r) in results {
        let mut push = |method: &str, rep: &Option<EvalReport>| {
            if let Some(rep) = rep {
                rows.push(SweepRow {
                    value: *v,
                    method: method.to_owned(),
                    mae: rep.mae,
                });
            }
        };
        push("triangulation", &Some(r.triangulation.clone()));
        push("conventional", &r.conventional);
        push("augmented", &r.augmented);
    }
    rows
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("value,method,mae\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.value, r.method, r.mae));
    }
    s
}

/// Mean Euclidean distance between the rows of two equally sized matrices.
pub fn mean_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| Vector3::new(x[0] - y[0], x[1] - y[1], x[2] - y[2]).norm())
        .sum::<f64>()
        / a.nrows().max(1) as f64
}
