//! On-disk formats.
//!
//! * LEDF field files: `LEDF`, then little-endian u32 version (1), height,
//!   width, channel count (2), a u8 dtype (0 = f32, 1 = f64) and the payload
//!   in (row, col, component) order.
//! * LEDM checkpoints: `LEDM`, a little-endian u32 header length, a JSON
//!   header (version, dtype, config, grid, ordered tensor list), then every
//!   tensor as little-endian f64 in header order.
//! * Dataset manifests: JSON with one record per pair; paths are relative to
//!   the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::field::{DeformationField, FieldError, Grid2, VectorField};
use crate::leda::{Leda, LedaConfig, ModelError, ModelParams, PairSample};
use crate::synth::{basis_fields, gen_pair_with_basis, SynthConfig, SynthError};

pub const FIELD_MAGIC: &[u8; 4] = b"LEDF";
pub const MODEL_MAGIC: &[u8; 4] = b"LEDM";
pub const FIELD_HEADER_LEN: usize = 21;
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;
/// Largest accepted element count of a single field or tensor.
const MAX_ELEMENTS: u64 = 1 << 31;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("truncated data: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("expected 2 channels, found {0}")]
    BadChannels(u32),
    #[error("dimensions {height}x{width} overflow the supported size")]
    DimOverflow { height: u64, width: u64 },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint does not match: {0}")]
    ConfigMismatch(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, IoError> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(IoError::UnknownDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Little-endian cursor over a byte slice.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let needed = self.pos.checked_add(n).ok_or(IoError::Truncated {
            needed: usize::MAX,
            available: self.bytes.len(),
        })?;
        if needed > self.bytes.len() {
            return Err(IoError::Truncated {
                needed,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..needed];
        self.pos = needed;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), IoError> {
        let found = self.take(4).map_err(|_| IoError::BadMagic {
            expected: *expected,
            found: self.bytes.to_vec(),
        })?;
        if found != expected {
            return Err(IoError::BadMagic {
                expected: *expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn floats(&mut self, n: usize, dtype: Dtype) -> Result<Vec<f64>, IoError> {
        let raw = self.take(n * dtype.width())?;
        Ok(match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        })
    }

    fn finish(&self) -> Result<(), IoError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            extra => Err(IoError::TrailingBytes(extra)),
        }
    }
}

fn push_floats(out: &mut Vec<u8>, data: &[f64], dtype: Dtype) {
    for &v in data {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

/// Serializes a field as LEDF bytes. `F32` rounds each value.
pub fn encode_field(field: &VectorField, dtype: Dtype) -> Vec<u8> {
    let grid = field.grid();
    let mut out = Vec::with_capacity(FIELD_HEADER_LEN + field.data().len() * dtype.width());
    out.extend_from_slice(FIELD_MAGIC);
    for v in [FORMAT_VERSION, grid.height() as u32, grid.width() as u32, 2] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(dtype.tag());
    push_floats(&mut out, field.data(), dtype);
    out
}

struct FieldHeader {
    grid: Grid2,
    dtype: Dtype,
}

fn field_header(r: &mut Reader) -> Result<FieldHeader, IoError> {
    r.magic(FIELD_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let (h, w) = (r.u32()?, r.u32()?);
    let channels = r.u32()?;
    if channels != 2 {
        return Err(IoError::BadChannels(channels));
    }
    let dtype = Dtype::from_tag(r.u8()?)?;
    if (h as u64) * (w as u64) > MAX_ELEMENTS / 2 {
        return Err(IoError::DimOverflow {
            height: h as u64,
            width: w as u64,
        });
    }
    let grid = Grid2::new(h as usize, w as usize)?;
    Ok(FieldHeader { grid, dtype })
}

/// Parses LEDF bytes; nothing is returned unless the whole buffer is valid.
pub fn decode_field(bytes: &[u8]) -> Result<(VectorField, Dtype), IoError> {
    let mut r = Reader::new(bytes);
    let header = field_header(&mut r)?;
    let data = r.floats(header.grid.len() * 2, header.dtype)?;
    r.finish()?;
    Ok((VectorField::from_vec(header.grid, data)?, header.dtype))
}

pub fn write_field(path: &Path, field: &VectorField, dtype: Dtype) -> Result<(), IoError> {
    fs::write(path, encode_field(field, dtype)).map_err(io_err(path))
}

pub fn read_field(path: &Path) -> Result<VectorField, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(decode_field(&bytes)?.0)
}

pub fn read_deformation(path: &Path) -> Result<DeformationField, IoError> {
    Ok(DeformationField::from_displacement(read_field(path)?))
}

/// Grid of an LEDF file, checking that the payload length matches.
pub fn peek_field_grid(path: &Path) -> Result<Grid2, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader::new(&bytes);
    let header = field_header(&mut r)?;
    let needed = FIELD_HEADER_LEN + header.grid.len() * 2 * header.dtype.width();
    if bytes.len() < needed {
        return Err(IoError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(IoError::TrailingBytes(bytes.len() - needed));
    }
    Ok(header.grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    dtype: Dtype,
    config: LedaConfig,
    grid: Grid2,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(model: &Leda) -> Result<Vec<u8>, IoError> {
    let params = model.params();
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        dtype: Dtype::F64,
        config: model.config().clone(),
        grid: model.grid(),
        tensors: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        push_floats(&mut out, t.data(), Dtype::F64);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Leda, IoError> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
    if header.version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion(header.version));
    }
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for entry in header.tensors {
        let n = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| IoError::ConfigMismatch(format!("tensor {} is too large", entry.name)))?;
        let data = r.floats(n as usize, header.dtype)?;
        let t = Tensor::new(entry.shape, data)
            .map_err(|e| IoError::ConfigMismatch(format!("tensor {}: {e}", entry.name)))?;
        names.push(entry.name);
        tensors.push(t);
    }
    r.finish()?;
    Leda::from_params(header.grid, header.config, ModelParams::new(names, tensors)).map_err(|e| match e {
        ModelError::InvalidConfig(msg) => IoError::ConfigMismatch(msg),
        other => IoError::ConfigMismatch(other.to_string()),
    })
}

pub fn save_checkpoint(path: &Path, model: &Leda) -> Result<(), IoError> {
    fs::write(path, encode_checkpoint(model)?).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Leda, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and requires it to be bound to `grid`.
pub fn load_checkpoint_for(path: &Path, grid: Grid2) -> Result<Leda, IoError> {
    let model = load_checkpoint(path)?;
    if model.grid() != grid {
        return Err(IoError::ConfigMismatch(format!(
            "model grid {} but data grid {grid}",
            model.grid()
        )));
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub path_fwd: String,
    pub path_bwd: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_gt_velocity: Option<String>,
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor_coeffs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    /// Generator settings, present for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthConfig>,
    pub records: Vec<PairRecord>,
}

impl DatasetManifest {
    pub fn grid(&self) -> Result<Grid2, IoError> {
        Ok(Grid2::new(self.height, self.width)?)
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

/// One loaded record.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPair {
    pub pair: PairSample,
    pub velocity: Option<VectorField>,
    pub record: PairRecord,
}

impl Dataset {
    /// Reads `dir/manifest.json` and checks that every referenced file is a
    /// readable field on the manifest's grid.
    pub fn open(dir: &Path) -> Result<Self, IoError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(IoError::UnsupportedVersion(manifest.format_version));
        }
        let grid = manifest.grid()?;
        let mut seen = std::collections::BTreeSet::new();
        for rec in &manifest.records {
            if !seen.insert(rec.pair_id.as_str()) {
                return Err(IoError::Manifest(format!("duplicate pair_id {}", rec.pair_id)));
            }
            let paths = [Some(&rec.path_fwd), Some(&rec.path_bwd), rec.path_gt_velocity.as_ref()];
            for p in paths.into_iter().flatten() {
                let g = peek_field_grid(&dir.join(p))?;
                if g != grid {
                    return Err(IoError::Manifest(format!(
                        "{p}: grid {g} differs from manifest grid {grid}"
                    )));
                }
            }
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn grid(&self) -> Grid2 {
        self.manifest.grid().expect("validated on open")
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<LoadedPair, IoError> {
        let rec = &self.manifest.records[index];
        let velocity = match &rec.path_gt_velocity {
            Some(p) => Some(read_field(&self.root.join(p))?),
            None => None,
        };
        Ok(LoadedPair {
            pair: PairSample {
                fwd: read_deformation(&self.root.join(&rec.path_fwd))?,
                bwd: read_deformation(&self.root.join(&rec.path_bwd))?,
            },
            velocity,
            record: rec.clone(),
        })
    }

    pub fn load_all(&self) -> Result<Vec<LoadedPair>, IoError> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<(), IoError> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

/// Generates `cfg.n_pairs` pairs into `dir` (f64 LEDF files under
/// `fields/`) and writes the manifest.
pub fn write_synthetic_dataset(dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest, IoError> {
    cfg.validate()?;
    let fields = dir.join("fields");
    fs::create_dir_all(&fields).map_err(io_err(&fields))?;
    let basis = basis_fields(cfg);
    let mut records = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let pair = gen_pair_with_basis(cfg, &basis, i);
        let id = format!("pair_{i:05}");
        let rel = |kind: &str| format!("fields/{id}_{kind}.ledf");
        for (kind, f) in [
            ("fwd", pair.fwd.displacement()),
            ("bwd", pair.bwd.displacement()),
            ("vel", &pair.velocity),
        ] {
            write_field(&dir.join(rel(kind)), f, Dtype::F64)?;
        }
        records.push(PairRecord {
            pair_id: id.clone(),
            path_fwd: rel("fwd"),
            path_bwd: rel("bwd"),
            path_gt_velocity: Some(rel("vel")),
            covariates: pair.covariates,
            factor_coeffs: Some(pair.coeffs),
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        height: cfg.grid.height(),
        width: cfg.grid.width(),
        generator: Some(cfg.clone()),
        records,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_field() -> VectorField {
        VectorField::from_fn(Grid2::new(4, 5).unwrap(), |r, c| {
            [(r as f64 + 0.1).ln(), 1.0 / (c as f64 + 3.0)]
        })
    }

    #[test]
    fn field_round_trip_is_bitwise() {
        let f = sample_field();
        let (back, dtype) = decode_field(&encode_field(&f, Dtype::F64)).unwrap();
        assert_eq!(dtype, Dtype::F64);
        let same = f.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same && back.grid() == f.grid());
    }

    #[test]
    fn f32_files_round_trip_f32_values() {
        let f = sample_field().map(|v| (v as f32) as f64);
        let (back, dtype) = decode_field(&encode_field(&f, Dtype::F32)).unwrap();
        assert_eq!(dtype, Dtype::F32);
        assert_eq!(back, f);
    }

    #[test]
    fn zero_field_file_size() {
        let bytes = encode_field(&VectorField::zeros(Grid2::square(4)), Dtype::F32);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 4 + 1 + 4 * 4 * 2 * 4);
        assert_eq!(&bytes[..4], b"LEDF");
        assert_eq!(bytes[20], 0);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_field(&VectorField::zeros(Grid2::new(4, 6).unwrap()), Dtype::F64);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &4u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &6u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(bytes[20], 1);
    }

    #[test]
    fn corrupt_field_files_are_rejected() {
        let good = encode_field(&sample_field(), Dtype::F64);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_field(&bad), Err(IoError::BadMagic { .. })));
        assert!(matches!(decode_field(&good[..2]), Err(IoError::BadMagic { .. })));
        assert!(matches!(
            decode_field(&good[..good.len() - 1]),
            Err(IoError::Truncated { .. })
        ));
        let mut dtype = good.clone();
        dtype[20] = 7;
        assert!(matches!(decode_field(&dtype), Err(IoError::UnknownDtype(7))));
        let mut huge = good.clone();
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_field(&huge), Err(IoError::DimOverflow { .. })));
        let mut chans = good.clone();
        chans[16] = 3;
        assert!(matches!(decode_field(&chans), Err(IoError::BadChannels(3))));
        let mut extra = good;
        extra.push(0);
        assert!(matches!(decode_field(&extra), Err(IoError::TrailingBytes(1))));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let grid = Grid2::square(8);
        let cfg = LedaConfig {
            latent_dim: 3,
            n_stages: 2,
            seed: 5,
            ..LedaConfig::default()
        };
        let model = Leda::new(grid, cfg).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        assert_eq!(&bytes[..4], b"LEDM");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, model);
        let bits_equal = model
            .params()
            .tensors()
            .iter()
            .zip(back.params().tensors())
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(bits_equal);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 8]),
            Err(IoError::Truncated { .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ledm");
        save_checkpoint(&path, &model).unwrap();
        assert!(load_checkpoint_for(&path, grid).is_ok());
        assert!(matches!(
            load_checkpoint_for(&path, Grid2::square(16)),
            Err(IoError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn checkpoint_with_foreign_shapes_is_rejected() {
        let grid = Grid2::square(8);
        let cfg = LedaConfig {
            latent_dim: 3,
            n_stages: 2,
            ..LedaConfig::default()
        };
        let model = Leda::new(grid, cfg.clone()).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        // rewrite the header to claim a 16x16 grid; tensor shapes no longer fit
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        header["grid"] = serde_json::json!({"height": 16, "width": 16});
        let json = serde_json::to_vec(&header).unwrap();
        let mut forged = b"LEDM".to_vec();
        forged.extend_from_slice(&(json.len() as u32).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&bytes[8 + len..]);
        assert!(matches!(decode_checkpoint(&forged), Err(IoError::ConfigMismatch(_))));
    }

    #[test]
    fn synthetic_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            grid: Grid2::square(16),
            n_pairs: 3,
            max_disp: 2.0,
            seed: 4,
            ..SynthConfig::default()
        };
        let manifest = write_synthetic_dataset(dir.path(), &cfg).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, manifest);
        assert_eq!(ds.len(), 3);
        let loaded = ds.load(1).unwrap();
        let direct = gen_pair_with_basis(&cfg, &basis_fields(&cfg), 1);
        assert_eq!(loaded.pair.fwd, direct.fwd);
        assert_eq!(loaded.velocity.unwrap(), direct.velocity);
        assert_eq!(loaded.record.factor_coeffs.unwrap(), direct.coeffs);

        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let reparsed: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string_pretty(&reparsed).unwrap() + "\n", text);
    }

    #[test]
    fn manifest_integrity_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            grid: Grid2::square(16),
            n_pairs: 2,
            max_disp: 1.0,
            ..SynthConfig::default()
        };
        let mut manifest = write_synthetic_dataset(dir.path(), &cfg).unwrap();
        fs::remove_file(dir.path().join(&manifest.records[1].path_bwd)).unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(IoError::Io { .. })));

        write_field(
            &dir.path().join(&manifest.records[1].path_bwd),
            &VectorField::zeros(Grid2::square(8)),
            Dtype::F64,
        )
        .unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(IoError::Manifest(_))));

        manifest.records[1].pair_id = manifest.records[0].pair_id.clone();
        write_manifest(dir.path(), &manifest).unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(IoError::Manifest(_))));
    }
}
