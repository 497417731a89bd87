//! Geometric image-source channel simulator.
//!
//! Scenes are built from axis-aligned reflecting planes and opaque boxes.
//! Each UE/array pair gets the LoS path (when unobstructed) plus at most one
//! specular bounce per reflector. Arrays are mutually unsynchronized by
//! default: every snapshot draws a fresh per-array carrier phase and timing
//! offset.

use std::f64::consts::PI;

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensors::{
    ArrayGeometry, CsiDims, CsiTensor, RadioConfig, Record, SceneDataset, SPEED_OF_LIGHT,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|k| self.min[k] < self.max[k] && self.min[k].is_finite() && self.max[k].is_finite())
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|k| self.max[k] - self.min[k]).product()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] > self.min[k] && p[k] < self.max[k])
    }

    /// Whether the segment `a -> b` passes through the box interior. Grazing
    /// contact and segments ending on a face do not count.
    pub fn blocks_segment(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        let d = b - a;
        let mut t0: f64 = 0.0;
        let mut t1: f64 = 1.0;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if a[k] <= self.min[k] || a[k] >= self.max[k] {
                    return false;
                }
            } else {
                let inv = 1.0 / d[k];
                let (mut lo, mut hi) = ((self.min[k] - a[k]) * inv, (self.max[k] - a[k]) * inv);
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                t0 = t0.max(lo);
                t1 = t1.min(hi);
            }
        }
        t1 - t0 > 1e-9
    }
}

/// Axis-aligned planar reflector. `extent`, when given, bounds the plane to
/// the rectangle it spans on the two in-plane axes; its component along
/// `axis` is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflector {
    pub axis: Axis,
    pub offset: f64,
    pub coefficient: f64,
    #[serde(default)]
    pub extent: Option<Aabb>,
}

impl Reflector {
    fn covers(&self, p: &Vector3<f64>) -> bool {
        let Some(ext) = self.extent else { return true };
        let a = self.axis.index();
        (0..3)
            .filter(|&k| k != a)
            .all(|k| p[k] >= ext.min[k] - 1e-9 && p[k] <= ext.max[k] + 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UeRegion {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub count: usize,
}

impl UeRegion {
    pub fn bounds(&self) -> Aabb {
        Aabb::new(self.min, self.max)
    }
}

fn default_snr_db() -> f64 {
    20.0
}
fn default_reflection_order() -> u8 {
    1
}
fn default_timing_offset() -> f64 {
    0.1
}

/// Complete description of a synthetic measurement campaign. Serialized as
/// JSON for the `simulate` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub config: RadioConfig,
    pub arrays: Vec<ArrayGeometry>,
    #[serde(default)]
    pub reflectors: Vec<Reflector>,
    #[serde(default)]
    pub blockers: Vec<Aabb>,
    pub ue_regions: Vec<UeRegion>,
    /// Absolute per-entry complex noise std. When absent the noise level is
    /// set from `snr_db` relative to the strongest path of each snapshot.
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default = "default_snr_db")]
    pub snr_db: f64,
    #[serde(default)]
    pub inter_array_sync: bool,
    #[serde(default = "default_reflection_order")]
    pub max_reflection_order: u8,
    /// Upper bound of the per-array timing offset, as a fraction of the
    /// OFDM symbol duration 1/Δf.
    #[serde(default = "default_timing_offset")]
    pub timing_offset_max: f64,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScene(m));
        if self.arrays.is_empty() {
            return bad("no arrays".into());
        }
        let (rows, cols) = (self.arrays[0].rows, self.arrays[0].cols);
        for (i, a) in self.arrays.iter().enumerate() {
            if a.rows != rows || a.cols != cols || rows == 0 || cols == 0 {
                return bad(format!("array {i}: all arrays must share a nonzero shape"));
            }
        }
        for (i, r) in self.reflectors.iter().enumerate() {
            if !(r.coefficient > 0.0 && r.coefficient <= 1.0) {
                return bad(format!("reflector {i}: coefficient must be in (0, 1]"));
            }
            if let Some(e) = r.extent {
                let a = r.axis.index();
                if (0..3).any(|k| k != a && !(e.min[k] < e.max[k])) {
                    return bad(format!("reflector {i}: empty extent"));
                }
            }
        }
        for (i, b) in self.blockers.iter().enumerate() {
            if !b.is_valid() {
                return bad(format!("blocker {i}: min must be < max on every axis"));
            }
        }
        if self.ue_regions.is_empty() {
            return bad("no UE regions".into());
        }
        for (i, r) in self.ue_regions.iter().enumerate() {
            if !r.bounds().is_valid() {
                return bad(format!("UE region {i}: min must be < max on every axis"));
            }
            if r.count == 0 {
                return bad(format!("UE region {i}: sample count must be positive"));
            }
        }
        if self.max_reflection_order > 1 {
            return bad("max_reflection_order must be 0 or 1".into());
        }
        if self.noise_std.is_some_and(|s| !(s >= 0.0)) {
            return bad("noise_std must be nonnegative".into());
        }
        if !(self.timing_offset_max >= 0.0) {
            return bad("timing_offset_max must be nonnegative".into());
        }
        if self.ue_regions.len() > u16::MAX as usize {
            return bad("too many UE regions".into());
        }
        Ok(())
    }

    pub fn dims(&self) -> CsiDims {
        CsiDims {
            arrays: self.arrays.len(),
            rows: self.arrays[0].rows,
            cols: self.arrays[0].cols,
            n_sub: self.config.n_sub,
        }
    }

    fn segment_blocked(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        self.blockers.iter().any(|bx| bx.blocks_segment(a, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationPath {
    pub complex_gain: Complex64,
    /// Propagation delay in seconds.
    pub delay: f64,
    /// Unit vector from the array towards the last interaction point, in the
    /// array's local frame.
    pub arrival_direction: Vector3<f64>,
}

fn path_from(total_distance: f64, coefficient: f64, towards: Vector3<f64>, array: &ArrayGeometry, wavelength: f64) -> PropagationPath {
    let magnitude = wavelength / (4.0 * PI * total_distance) * coefficient;
    let phase = -2.0 * PI * total_distance / wavelength;
    PropagationPath {
        complex_gain: Complex64::from_polar(magnitude, phase),
        delay: total_distance / SPEED_OF_LIGHT,
        arrival_direction: array.to_local(&towards.normalize()),
    }
}

/// LoS and first-order specular paths between `ue` and `array`.
pub fn trace_paths(scene: &SceneSpec, ue: &Vector3<f64>, array: &ArrayGeometry) -> Result<Vec<PropagationPath>, SimError> {
    let p = array.position_vec();
    let los = ue - p;
    let d = los.norm();
    if !(d > 1e-9) {
        return Err(SimError::Degenerate("UE coincides with array position".into()));
    }
    let wavelength = scene.config.wavelength();
    let mut paths = Vec::new();
    if !scene.segment_blocked(ue, &p) {
        paths.push(path_from(d, 1.0, los, array, wavelength));
    }
    if scene.max_reflection_order == 0 {
        return Ok(paths);
    }
    for refl in &scene.reflectors {
        let a = refl.axis.index();
        let su = ue[a] - refl.offset;
        let sa = p[a] - refl.offset;
        if su * sa <= 0.0 {
            continue;
        }
        let mut image = *ue;
        image[a] = 2.0 * refl.offset - ue[a];
        let t = sa / (sa + su);
        let hit = p + (image - p) * t;
        if !refl.covers(&hit) {
            continue;
        }
        let total = (image - p).norm();
        if !(total > 1e-9) || !((hit - p).norm() > 1e-9) {
            return Err(SimError::Degenerate("reflection point coincides with an endpoint".into()));
        }
        if scene.segment_blocked(ue, &hit) || scene.segment_blocked(&hit, &p) {
            continue;
        }
        paths.push(path_from(total, refl.coefficient, hit - p, array, wavelength));
    }
    Ok(paths)
}

/// Array response for a plane wave arriving from `direction` (local frame).
/// Entry `r * cols + c` is `exp(j 2π/λ <offset(r, c), direction>)`, with
/// element offsets on a grid centered at the array origin.
pub fn steering_vector(array: &ArrayGeometry, direction: &Vector3<f64>, wavelength: f64) -> Vec<Complex64> {
    let k = 2.0 * PI / wavelength;
    let s = array.element_spacing;
    let rc = (array.rows as f64 - 1.0) / 2.0;
    let cc = (array.cols as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(array.n_antennas());
    for r in 0..array.rows {
        for c in 0..array.cols {
            let y = (c as f64 - cc) * s;
            let z = (r as f64 - rc) * s;
            out.push(Complex64::from_polar(1.0, k * (y * direction[1] + z * direction[2])));
        }
    }
    out
}

/// One CSI snapshot of `scene` at `ue`.
pub fn synthesize_snapshot<R: Rng + ?Sized>(scene: &SceneSpec, ue: &Vector3<f64>, rng: &mut R) -> Result<CsiTensor, SimError> {
    let dims = scene.dims();
    let wavelength = scene.config.wavelength();
    let df = scene.config.subcarrier_spacing();
    let n_ant = dims.antennas();
    let mut csi = CsiTensor::zeros(dims);
    let mut strongest: f64 = 0.0;
    let mut acc = vec![Complex64::new(0.0, 0.0); n_ant * dims.n_sub];
    let mut per_array = Vec::with_capacity(dims.arrays);
    for array in &scene.arrays {
        let paths = trace_paths(scene, ue, array)?;
        let (phase, offset) = if scene.inter_array_sync {
            (0.0, 0.0)
        } else {
            let phase = rng.gen::<f64>() * 2.0 * PI;
            let offset = rng.gen::<f64>() * scene.timing_offset_max / df;
            (phase, offset)
        };
        strongest = paths.iter().map(|p| p.complex_gain.norm()).fold(strongest, f64::max);
        per_array.push((paths, phase, offset));
    }
    for (b, (array, (paths, phase, offset))) in scene.arrays.iter().zip(per_array).enumerate() {
        acc.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        let rot = Complex64::from_polar(1.0, phase);
        for path in &paths {
            let a = steering_vector(array, &path.arrival_direction, wavelength);
            let step = Complex64::from_polar(1.0, -2.0 * PI * df * (path.delay + offset));
            let mut freq = Vec::with_capacity(dims.n_sub);
            let mut ph = path.complex_gain * rot;
            for _ in 0..dims.n_sub {
                freq.push(ph);
                ph *= step;
            }
            for (m, am) in a.iter().enumerate() {
                let row = &mut acc[m * dims.n_sub..(m + 1) * dims.n_sub];
                for (v, f) in row.iter_mut().zip(&freq) {
                    *v += am * f;
                }
            }
        }
        let base = csi.index(b, 0, 0, 0);
        for (dst, v) in csi.raw_mut()[base..base + n_ant * dims.n_sub].iter_mut().zip(&acc) {
            *dst = num_complex::Complex32::new(v.re as f32, v.im as f32);
        }
    }
    let sigma = match scene.noise_std {
        Some(s) => s,
        None => strongest * 10f64.powf(-scene.snr_db / 20.0),
    };
    if sigma > 0.0 {
        let s = (sigma * sigma / 2.0).sqrt();
        for v in csi.raw_mut() {
            let nr: f64 = StandardNormal.sample(rng);
            let ni: f64 = StandardNormal.sample(rng);
            v.re = (v.re as f64 + s * nr) as f32;
            v.im = (v.im as f64 + s * ni) as f32;
        }
    }
    Ok(csi)
}

/// Rounds a position to the `f32` grid it is stored on.
fn quantize(p: Vector3<f64>) -> [f32; 3] {
    [p[0] as f32, p[1] as f32, p[2] as f32]
}

/// Uniform samples per UE region (rejecting points inside blockers), with the
/// region index as floor label.
pub fn sample_positions(scene: &SceneSpec) -> Result<Vec<([f32; 3], u16)>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.rng_seed);
    let mut out = Vec::new();
    for (label, region) in scene.ue_regions.iter().enumerate() {
        let mut accepted = 0;
        let mut attempts = 0usize;
        while accepted < region.count {
            attempts += 1;
            if attempts > region.count * 1000 + 1000 {
                return Err(SimError::InvalidScene(format!(
                    "UE region {label} is (almost) entirely covered by blockers"
                )));
            }
            let p = Vector3::from_fn(|k, _| region.min[k] + rng.gen::<f64>() * (region.max[k] - region.min[k]));
            let q = quantize(p);
            let pq = Vector3::new(q[0] as f64, q[1] as f64, q[2] as f64);
            if scene.blockers.iter().any(|b| b.contains(&pq)) {
                continue;
            }
            out.push((q, label as u16));
            accepted += 1;
        }
    }
    Ok(out)
}

/// Deterministic dataset for `scene`. Record `l` uses its own RNG stream, so
/// the result does not depend on the worker count.
pub fn generate_dataset(scene: &SceneSpec) -> Result<SceneDataset, SimError> {
    scene.validate()?;
    let positions = sample_positions(scene)?;
    let records = positions
        .par_iter()
        .enumerate()
        .map(|(l, &(pos, label))| {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.rng_seed);
            rng.set_stream(l as u64 + 1);
            let ue = Vector3::new(pos[0] as f64, pos[1] as f64, pos[2] as f64);
            Ok(Record {
                csi: synthesize_snapshot(scene, &ue, &mut rng)?,
                position: pos,
                timestamp: None,
                floor_label: Some(label),
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(SceneDataset {
        config: scene.config,
        arrays: scene.arrays.clone(),
        records,
        n_floors: Some(scene.ue_regions.len() as u16),
    })
}

/// Ready-made desk-scale scenes.
pub mod presets {
    use super::*;

    fn half_wavelength(config: &RadioConfig) -> f64 {
        config.wavelength() / 2.0
    }

    /// Reflection coefficient of every surface of the factory hall. Strong
    /// specular multipath is what biases single-source AoA estimates there.
    pub const METAL: f64 = 0.9;

    /// Metallic hall around a 16 m x 16 m x (2..8) m UE volume with a central
    /// blocking cube and eight wall-mounted arrays.
    pub fn factory(n_rows: usize, n_cols: usize, samples: usize, seed: u64) -> SceneSpec {
        let config = RadioConfig::default();
        let s = half_wavelength(&config);
        let up = [0.0, 0.0, 1.0];
        let mount = |pos: [f64; 3], facing: [f64; 3]| ArrayGeometry::facing(pos, facing, up, n_rows, n_cols, s);
        let arrays = vec![
            mount([-1.5, 4.0, 3.5], [1.0, 0.0, 0.0]),
            mount([-1.5, 12.0, 6.5], [1.0, 0.0, 0.0]),
            mount([17.5, 4.0, 6.5], [-1.0, 0.0, 0.0]),
            mount([17.5, 12.0, 3.5], [-1.0, 0.0, 0.0]),
            mount([4.0, -1.5, 6.5], [0.0, 1.0, 0.0]),
            mount([12.0, -1.5, 3.5], [0.0, 1.0, 0.0]),
            mount([4.0, 17.5, 3.5], [0.0, -1.0, 0.0]),
            mount([12.0, 17.5, 6.5], [0.0, -1.0, 0.0]),
        ];
        let cube = Aabb::new([5.5, 5.5, 0.0], [10.5, 10.5, 9.0]);
        let face = |axis, offset| Reflector {
            axis,
            offset,
            coefficient: METAL,
            extent: Some(cube),
        };
        let wall = |axis, offset, coefficient| Reflector {
            axis,
            offset,
            coefficient,
            extent: None,
        };
        SceneSpec {
            config,
            arrays,
            reflectors: vec![
                wall(Axis::X, -2.0, METAL),
                wall(Axis::X, 18.0, METAL),
                wall(Axis::Y, -2.0, METAL),
                wall(Axis::Y, 18.0, METAL),
                wall(Axis::Z, 0.0, METAL),
                wall(Axis::Z, 10.0, METAL),
                face(Axis::X, 5.5),
                face(Axis::X, 10.5),
                face(Axis::Y, 5.5),
                face(Axis::Y, 10.5),
                face(Axis::Z, 9.0),
            ],
            blockers: vec![cube],
            ue_regions: vec![UeRegion {
                min: [0.0, 0.0, 2.0],
                max: [16.0, 16.0, 8.0],
                count: samples,
            }],
            noise_std: None,
            snr_db: 20.0,
            inter_array_sync: false,
            max_reflection_order: 1,
            timing_offset_max: 0.1,
            rng_seed: seed,
        }
    }

    /// Half thickness of the floor slabs of the multistory building.
    pub const SLAB_HALF: f64 = 0.15;

    /// Vertical distance between storeys.
    pub const STOREY_GAP: f64 = 4.25;

    /// UE heights of the five storeys.
    pub const STOREY_HEIGHTS: [f64; 5] = [1.5, 5.75, 10.0, 14.25, 18.5];

    /// Five-storey building with 16 m x 16 m floors and 5 x 4 facade-mounted
    /// 4 x 2 arrays outside the building. Tall arrays resolve elevation, which
    /// is what separates the storeys.
    pub fn multistory(samples_per_floor: usize, seed: u64) -> SceneSpec {
        let config = RadioConfig::default();
        let s = half_wavelength(&config);
        let up = [0.0, 0.0, 1.0];
        let along = [2.0, 5.0, 8.0, 11.0, 14.0];
        let mut arrays = Vec::new();
        for (k, &h) in STOREY_HEIGHTS.iter().enumerate() {
            let t = along[(k * 2) % 5];
            let u = along[(k * 2 + 2) % 5];
            arrays.push(ArrayGeometry::facing([-6.0, t, h + STOREY_GAP / 2.0], [1.0, 0.0, 0.0], up, 4, 2, s));
            arrays.push(ArrayGeometry::facing([22.0, u, h + STOREY_GAP / 2.0], [-1.0, 0.0, 0.0], up, 4, 2, s));
            arrays.push(ArrayGeometry::facing([u, -6.0, h + STOREY_GAP / 2.0], [0.0, 1.0, 0.0], up, 4, 2, s));
            arrays.push(ArrayGeometry::facing([t, 22.0, h + STOREY_GAP / 2.0], [0.0, -1.0, 0.0], up, 4, 2, s));
        }
        // Concrete slabs between storeys block direct paths; each side
        // reflects just outside the slab so reflected segments stay clear of it.
        let mut reflectors = vec![Reflector {
            axis: Axis::Z,
            offset: 0.0,
            coefficient: 0.5,
            extent: None,
        }];
        let mut blockers = Vec::new();
        for w in STOREY_HEIGHTS.windows(2) {
            let mid = (w[0] + w[1]) / 2.0;
            let slab = Aabb::new([-0.5, -0.5, mid - SLAB_HALF], [16.5, 16.5, mid + SLAB_HALF]);
            for offset in [mid - SLAB_HALF - 0.01, mid + SLAB_HALF + 0.01] {
                reflectors.push(Reflector {
                    axis: Axis::Z,
                    offset,
                    coefficient: 0.3,
                    extent: Some(slab),
                });
            }
            blockers.push(slab);
        }
        let ue_regions = STOREY_HEIGHTS
            .iter()
            .map(|&h| UeRegion {
                min: [0.0, 0.0, h - 0.05],
                max: [16.0, 16.0, h + 0.05],
                count: samples_per_floor,
            })
            .collect();
        SceneSpec {
            config,
            arrays,
            reflectors,
            blockers,
            ue_regions,
            noise_std: None,
            snr_db: 20.0,
            inter_array_sync: false,
            max_reflection_order: 1,
            timing_offset_max: 0.1,
            rng_seed: seed,
        }
    }
}
