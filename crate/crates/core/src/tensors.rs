//! CSI data model, array geometry and the CCDS dataset container.
//!
//! A CCDS file is laid out as (all integers little-endian):
//!
//! ```text
//! "CCDS" | version: u16 = 1 | header_len: u32 | header: UTF-8 JSON
//! | CSI:        L*B*M_row*M_col*N_sub complex entries, (re, im) as f32
//! | positions:  L*3 f32
//! | timestamps: L f64   (only if has_timestamps)
//! | floors:     L u16   (only if has_floor_labels)
//! ```
//!
//! CSI values are kept as `Complex32` in memory so that a save/load cycle is
//! bit-exact; all arithmetic on them widens to `f64` first.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const CCDS_MAGIC: &[u8; 4] = b"CCDS";
const CCDS_VERSION: u16 = 1;
const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: file does not start with \"CCDS\"")]
    BadMagic,
    #[error("version mismatch: file has version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated payload: {section} needs {needed} bytes but only {available} remain")]
    Truncated {
        section: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("non-finite value in {section} of record {record}")]
    NonFinite { section: &'static str, record: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid dataset: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// Carrier and OFDM numerology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioConfig {
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub n_sub: usize,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            carrier_hz: 3.438e9,
            bandwidth_hz: 50e6,
            n_sub: 64,
        }
    }
}

impl RadioConfig {
    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth_hz / self.n_sub as f64
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Duration of one time-domain tap after an `n_sub`-point inverse DFT.
    pub fn tap_duration(&self) -> f64 {
        1.0 / self.bandwidth_hz
    }
}

/// A uniform planar array. Elements lie on the local y (columns) / z (rows)
/// grid; local +x is broadside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub position: [f64; 3],
    /// Columns are the local x, y, z axes expressed in the global frame.
    pub orientation: [[f64; 3]; 3],
    pub rows: usize,
    pub cols: usize,
    /// Element pitch in meters.
    pub element_spacing: f64,
}

impl ArrayGeometry {
    /// Array at `position` whose broadside points along `broadside`; the local
    /// z axis is the component of `up` orthogonal to it.
    pub fn facing(
        position: [f64; 3],
        broadside: [f64; 3],
        up: [f64; 3],
        rows: usize,
        cols: usize,
        element_spacing: f64,
    ) -> Self {
        let x = Vector3::from(broadside).normalize();
        let up = Vector3::from(up);
        let z = (up - x * x.dot(&up)).normalize();
        let y = z.cross(&x);
        Self {
            position,
            orientation: [x.into(), y.into(), z.into()],
            rows,
            cols,
            element_spacing,
        }
    }

    pub fn position_vec(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    /// Orientation matrix with the local axes as columns.
    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[
            Vector3::from(self.orientation[0]),
            Vector3::from(self.orientation[1]),
            Vector3::from(self.orientation[2]),
        ])
    }

    pub fn to_local(&self, global: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * global
    }

    pub fn to_global(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * local
    }

    pub fn n_antennas(&self) -> usize {
        self.rows * self.cols
    }

    fn violations(&self, index: usize, out: &mut Vec<String>) {
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            out.push(format!(
                "array {index}: orientation is not orthonormal (deviation {err:.3e})"
            ));
        }
        if self.rows == 0 || self.cols == 0 {
            out.push(format!("array {index}: rows and cols must be positive"));
        }
        if !(self.element_spacing > 0.0 && self.element_spacing.is_finite()) {
            out.push(format!("array {index}: element spacing must be positive"));
        }
        if self.position.iter().any(|v| !v.is_finite()) {
            out.push(format!("array {index}: non-finite position"));
        }
    }
}

/// Shape of a CSI tensor: arrays x rows x cols x subcarriers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CsiDims {
    pub arrays: usize,
    pub rows: usize,
    pub cols: usize,
    pub n_sub: usize,
}

impl CsiDims {
    pub fn len(&self) -> usize {
        self.arrays * self.rows * self.cols * self.n_sub
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn antennas(&self) -> usize {
        self.rows * self.cols
    }
}

/// One frequency-domain CSI snapshot, row-major `[b][row][col][n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiTensor {
    dims: CsiDims,
    values: Vec<Complex32>,
}

impl CsiTensor {
    pub fn zeros(dims: CsiDims) -> Self {
        Self {
            dims,
            values: vec![Complex32::new(0.0, 0.0); dims.len()],
        }
    }

    pub fn from_values(dims: CsiDims, values: Vec<Complex32>) -> Option<Self> {
        (values.len() == dims.len()).then_some(Self { dims, values })
    }

    pub fn from_fn(dims: CsiDims, mut f: impl FnMut(usize, usize, usize, usize) -> Complex64) -> Self {
        let mut values = Vec::with_capacity(dims.len());
        for b in 0..dims.arrays {
            for r in 0..dims.rows {
                for c in 0..dims.cols {
                    for n in 0..dims.n_sub {
                        let v = f(b, r, c, n);
                        values.push(Complex32::new(v.re as f32, v.im as f32));
                    }
                }
            }
        }
        Self { dims, values }
    }

    pub fn dims(&self) -> CsiDims {
        self.dims
    }

    #[inline]
    pub fn index(&self, b: usize, r: usize, c: usize, n: usize) -> usize {
        ((b * self.dims.rows + r) * self.dims.cols + c) * self.dims.n_sub + n
    }

    #[inline]
    pub fn get(&self, b: usize, r: usize, c: usize, n: usize) -> Complex64 {
        let v = self.values[self.index(b, r, c, n)];
        Complex64::new(v.re as f64, v.im as f64)
    }

    pub fn set(&mut self, b: usize, r: usize, c: usize, n: usize, v: Complex64) {
        let i = self.index(b, r, c, n);
        self.values[i] = Complex32::new(v.re as f32, v.im as f32);
    }

    pub fn raw(&self) -> &[Complex32] {
        &self.values
    }

    pub fn raw_mut(&mut self) -> &mut [Complex32] {
        &mut self.values
    }

    /// Subcarrier response of one antenna, widened to `f64`.
    pub fn antenna_response(&self, b: usize, r: usize, c: usize) -> Vec<Complex64> {
        let start = self.index(b, r, c, 0);
        self.values[start..start + self.dims.n_sub]
            .iter()
            .map(|v| Complex64::new(v.re as f64, v.im as f64))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub csi: CsiTensor,
    pub position: [f32; 3],
    pub timestamp: Option<f64>,
    pub floor_label: Option<u16>,
}

impl Record {
    pub fn position_vec(&self) -> Vector3<f64> {
        Vector3::new(
            self.position[0] as f64,
            self.position[1] as f64,
            self.position[2] as f64,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub config: RadioConfig,
    pub arrays: Vec<ArrayGeometry>,
    pub records: Vec<Record>,
    /// Number of floors the floor labels range over, when labels are present.
    pub n_floors: Option<u16>,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dims(&self) -> CsiDims {
        CsiDims {
            arrays: self.arrays.len(),
            rows: self.arrays.first().map_or(0, |a| a.rows),
            cols: self.arrays.first().map_or(0, |a| a.cols),
            n_sub: self.config.n_sub,
        }
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.records.iter().map(Record::position_vec).collect()
    }

    pub fn floor_labels(&self) -> Option<Vec<usize>> {
        self.records
            .iter()
            .map(|r| r.floor_label.map(usize::from))
            .collect()
    }

    /// Dataset restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> SceneDataset {
        SceneDataset {
            config: self.config,
            arrays: self.arrays.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            n_floors: self.n_floors,
        }
    }
}

/// Every violated invariant, in a stable order. Empty iff the dataset is
/// well-formed.
pub fn validate_dataset(dataset: &SceneDataset) -> Vec<String> {
    let mut out = Vec::new();
    let cfg = &dataset.config;
    if !(cfg.bandwidth_hz > 0.0 && cfg.n_sub > 0 && cfg.subcarrier_spacing() > 0.0) {
        out.push("radio config: subcarrier spacing must be positive".to_string());
    }
    if !(cfg.carrier_hz > 0.0 && cfg.carrier_hz.is_finite()) {
        out.push("radio config: carrier frequency must be positive".to_string());
    }
    if dataset.arrays.is_empty() {
        out.push("dataset has no arrays".to_string());
    }
    for (i, a) in dataset.arrays.iter().enumerate() {
        a.violations(i, &mut out);
    }
    let dims = dataset.dims();
    for (i, a) in dataset.arrays.iter().enumerate() {
        if a.rows != dims.rows || a.cols != dims.cols {
            out.push(format!(
                "array {i}: shape {}x{} differs from array 0 ({}x{})",
                a.rows, a.cols, dims.rows, dims.cols
            ));
        }
    }
    if dataset.records.is_empty() {
        out.push("dataset has no records".to_string());
    }
    let has_ts = dataset.records.first().is_some_and(|r| r.timestamp.is_some());
    let has_floor = dataset.records.first().is_some_and(|r| r.floor_label.is_some());
    for (l, rec) in dataset.records.iter().enumerate() {
        if rec.csi.dims() != dims {
            out.push(format!(
                "record {l}: tensor dims {:?} do not match dataset dims {:?}",
                rec.csi.dims(),
                dims
            ));
        } else if !rec.csi.is_finite() {
            out.push(format!("record {l}: non-finite CSI entry"));
        }
        if rec.position.iter().any(|v| !v.is_finite()) {
            out.push(format!("record {l}: non-finite position"));
        }
        if rec.timestamp.is_some() != has_ts {
            out.push(format!("record {l}: timestamp presence differs from record 0"));
        }
        if rec.timestamp.is_some_and(|t| !t.is_finite()) {
            out.push(format!("record {l}: non-finite timestamp"));
        }
        match (rec.floor_label, has_floor) {
            (Some(f), true) => match dataset.n_floors {
                Some(n) if f < n => {}
                Some(n) => out.push(format!("record {l}: floor label {f} outside [0, {n})")),
                None => out.push(format!("record {l}: floor label present but floor count unknown")),
            },
            (None, false) => {}
            _ => out.push(format!("record {l}: floor label presence differs from record 0")),
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct CcdsHeader {
    #[serde(rename = "B")]
    arrays: usize,
    #[serde(rename = "M_row")]
    rows: usize,
    #[serde(rename = "M_col")]
    cols: usize,
    #[serde(rename = "N_sub")]
    n_sub: usize,
    #[serde(rename = "L")]
    records: usize,
    carrier_hz: f64,
    bandwidth_hz: f64,
    array_geometries: Vec<ArrayGeometry>,
    has_timestamps: bool,
    has_floor_labels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_floors: Option<u16>,
}

/// Serialize `dataset` to the CCDS byte layout.
pub fn encode_dataset(dataset: &SceneDataset) -> Result<Vec<u8>, DatasetError> {
    let violations = validate_dataset(dataset);
    if !violations.is_empty() {
        return Err(DatasetError::Invalid(violations));
    }
    let dims = dataset.dims();
    let has_ts = dataset.records[0].timestamp.is_some();
    let has_floor = dataset.records[0].floor_label.is_some();
    let header = CcdsHeader {
        arrays: dims.arrays,
        rows: dims.rows,
        cols: dims.cols,
        n_sub: dims.n_sub,
        records: dataset.len(),
        carrier_hz: dataset.config.carrier_hz,
        bandwidth_hz: dataset.config.bandwidth_hz,
        array_geometries: dataset.arrays.clone(),
        has_timestamps: has_ts,
        has_floor_labels: has_floor,
        n_floors: dataset.n_floors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| DatasetError::Header(e.to_string()))?;
    let l = dataset.len();
    let mut buf = Vec::with_capacity(10 + header.len() + l * (dims.len() * 8 + 12 + 10));
    buf.extend_from_slice(CCDS_MAGIC);
    buf.extend_from_slice(&CCDS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for rec in &dataset.records {
        for v in rec.csi.raw() {
            buf.extend_from_slice(&v.re.to_le_bytes());
            buf.extend_from_slice(&v.im.to_le_bytes());
        }
    }
    for rec in &dataset.records {
        for v in rec.position {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if has_ts {
        for rec in &dataset.records {
            buf.extend_from_slice(&rec.timestamp.unwrap_or_default().to_le_bytes());
        }
    }
    if has_floor {
        for rec in &dataset.records {
            buf.extend_from_slice(&rec.floor_label.unwrap_or_default().to_le_bytes());
        }
    }
    Ok(buf)
}

/// Write `dataset` as a CCDS file. Validation happens before the file is
/// touched.
pub fn save_dataset(dataset: &SceneDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let bytes = encode_dataset(dataset)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], DatasetError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(DatasetError::Truncated {
                section,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn f32_at(chunk: &[u8], i: usize) -> f32 {
    f32::from_le_bytes(chunk[4 * i..4 * i + 4].try_into().unwrap())
}

/// Parse a CCDS byte buffer.
pub fn decode_dataset(bytes: &[u8]) -> Result<SceneDataset, DatasetError> {
    if bytes.len() < 4 || &bytes[..4] != CCDS_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let mut rd = Reader { bytes, pos: 4 };
    let version = u16::from_le_bytes(rd.take(2, "version")?.try_into().unwrap());
    if version != CCDS_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: version,
            expected: CCDS_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(rd.take(4, "header length")?.try_into().unwrap()) as usize;
    let header: CcdsHeader = serde_json::from_slice(rd.take(header_len, "header")?)
        .map_err(|e| DatasetError::Header(e.to_string()))?;
    if header.array_geometries.len() != header.arrays {
        return Err(DatasetError::Header(format!(
            "B = {} but {} array geometries listed",
            header.arrays,
            header.array_geometries.len()
        )));
    }
    let dims = CsiDims {
        arrays: header.arrays,
        rows: header.rows,
        cols: header.cols,
        n_sub: header.n_sub,
    };
    let l = header.records;
    let per_record = dims.len();
    let csi_bytes = l
        .checked_mul(per_record)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| DatasetError::Header("payload size overflows".to_string()))?;
    let csi = rd.take(csi_bytes, "CSI")?;
    let pos = rd.take(l * 12, "positions")?;
    let ts = if header.has_timestamps {
        Some(rd.take(l * 8, "timestamps")?)
    } else {
        None
    };
    let floors = if header.has_floor_labels {
        Some(rd.take(l * 2, "floor labels")?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(l);
    for rec in 0..l {
        let chunk = &csi[rec * per_record * 8..(rec + 1) * per_record * 8];
        let values: Vec<Complex32> = (0..per_record)
            .map(|k| Complex32::new(f32_at(chunk, 2 * k), f32_at(chunk, 2 * k + 1)))
            .collect();
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(DatasetError::NonFinite {
                section: "CSI",
                record: rec,
            });
        }
        let p = &pos[rec * 12..rec * 12 + 12];
        let position = [f32_at(p, 0), f32_at(p, 1), f32_at(p, 2)];
        if position.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite {
                section: "positions",
                record: rec,
            });
        }
        let timestamp = match ts {
            Some(t) => {
                let v = f64::from_le_bytes(t[rec * 8..rec * 8 + 8].try_into().unwrap());
                if !v.is_finite() {
                    return Err(DatasetError::NonFinite {
                        section: "timestamps",
                        record: rec,
                    });
                }
                Some(v)
            }
            None => None,
        };
        let floor_label = floors.map(|f| u16::from_le_bytes(f[rec * 2..rec * 2 + 2].try_into().unwrap()));
        records.push(Record {
            csi: CsiTensor { dims, values },
            position,
            timestamp,
            floor_label,
        });
    }
    let dataset = SceneDataset {
        config: RadioConfig {
            carrier_hz: header.carrier_hz,
            bandwidth_hz: header.bandwidth_hz,
            n_sub: header.n_sub,
        },
        arrays: header.array_geometries,
        records,
        n_floors: header.n_floors,
    };
    let violations = validate_dataset(&dataset);
    if !violations.is_empty() {
        return Err(DatasetError::Invalid(violations));
    }
    Ok(dataset)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SceneDataset, DatasetError> {
    decode_dataset(&fs::read(path)?)
}

const MATRIX_MAGIC: &[u8; 4] = b"CCMX";
const MATRIX_VERSION: u16 = 1;

/// Dense row-major `f32` matrix file: `"CCMX" | u16 version | u32 rows |
/// u32 cols | rows*cols f32`. Used for feature matrices and dissimilarity
/// matrices.
pub fn write_matrix(path: impl AsRef<Path>, rows: usize, cols: usize, data: &[f32]) -> io::Result<()> {
    assert_eq!(rows * cols, data.len(), "matrix payload size");
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>), DatasetError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != MATRIX_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let mut rd = Reader { bytes: &bytes, pos: 4 };
    let version = u16::from_le_bytes(rd.take(2, "version")?.try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: version,
            expected: MATRIX_VERSION,
        });
    }
    let rows = u32::from_le_bytes(rd.take(4, "shape")?.try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(rd.take(4, "shape")?.try_into().unwrap()) as usize;
    let payload = rd.take(rows * cols * 4, "matrix")?;
    let data = (0..rows * cols).map(|i| f32_at(payload, i)).collect();
    Ok((rows, cols, data))
}
