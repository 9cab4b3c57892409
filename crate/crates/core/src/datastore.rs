//! Single-file container for datasets and checkpoints.
//!
//! Layout: `b"VSSF"`, format version (u16 LE), header length (u32 LE), UTF-8 JSON
//! header, then the payload. The header lists every array with its name, shape,
//! dtype and byte offset into the payload; arrays are little-endian, row-major and
//! tile the payload exactly in header order.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::environments::{Array3, Dataset, EnvDescriptor, StoredDynamics};
use crate::error::{Result, VssfError};
use crate::gaussian::Matrix;
use crate::model::{Model, ModelLayout};
use crate::training::{AdamState, TraceRow, TrainConfig};

pub const MAGIC: &[u8; 4] = b"VSSF";
pub const FORMAT_VERSION: u16 = 1;
const PREAMBLE: usize = 4 + 2 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

impl ArrayHeader {
    fn byte_len(&self) -> Option<u64> {
        self.shape
            .iter()
            .try_fold(self.dtype.width() as u64, |acc, &d| acc.checked_mul(d as u64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }
}

/// A decoded container: header metadata plus named arrays in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub format: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Vec<usize>, ArrayData)>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut headers = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, shape, data) in &self.arrays {
            if shape.iter().product::<usize>() != data.len() {
                return Err(VssfError::ShapeMismatch(format!("array `{name}` length differs from shape")));
            }
            headers.push(ArrayHeader {
                name: name.clone(),
                shape: shape.clone(),
                dtype: data.dtype(),
                offset,
            });
            offset += (data.len() * data.dtype().width()) as u64;
        }
        let header = Header {
            format: self.format.clone(),
            meta: self.meta.clone(),
            arrays: headers,
        };
        let json = serde_json::to_vec(&header).map_err(|e| VssfError::CorruptHeader(e.to_string()))?;
        let header_len = u32::try_from(json.len()).map_err(|_| VssfError::CorruptHeader("header too large".into()))?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &self.arrays {
            match data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    /// Parses and fully validates a container before returning anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(VssfError::BadMagic);
        }
        if bytes.len() < PREAMBLE {
            return Err(VssfError::CorruptHeader("file ends inside the preamble".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(VssfError::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let payload_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| VssfError::CorruptHeader("header extends past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
            .map_err(|e| VssfError::CorruptHeader(e.to_string()))?;
        let payload = &bytes[payload_start..];

        let mut expected = 0u64;
        for a in &header.arrays {
            if a.offset != expected {
                return Err(VssfError::ShapeMismatch(format!("array `{}` does not start where the previous ends", a.name)));
            }
            let len = a
                .byte_len()
                .ok_or_else(|| VssfError::ShapeMismatch(format!("array `{}` is too large", a.name)))?;
            expected = expected
                .checked_add(len)
                .ok_or_else(|| VssfError::ShapeMismatch("payload size overflows".into()))?;
        }
        if expected != payload.len() as u64 {
            return Err(VssfError::ShapeMismatch(format!(
                "arrays cover {expected} bytes but the payload has {}",
                payload.len()
            )));
        }

        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in &header.arrays {
            let start = a.offset as usize;
            let bytes = &payload[start..start + a.byte_len().unwrap_or(0) as usize];
            let data = match a.dtype {
                DType::F32 => ArrayData::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                        .collect(),
                ),
                DType::F64 => ArrayData::F64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect(),
                ),
            };
            arrays.push((a.name.clone(), a.shape.clone(), data));
        }
        Ok(Self {
            format: header.format,
            meta: header.meta,
            arrays,
        })
    }

    fn take(&mut self, name: &str) -> Result<(Vec<usize>, ArrayData)> {
        let i = self
            .arrays
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| VssfError::ShapeMismatch(format!("missing array `{name}`")))?;
        let (_, shape, data) = self.arrays.remove(i);
        Ok((shape, data))
    }
}

/// Writes through a temporary sibling file, syncs it, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| VssfError::Io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_container(c: &Container, path: &Path) -> Result<()> {
    write_atomic(path, &c.to_bytes()?)
}

pub fn read_container(path: &Path) -> Result<Container> {
    Container::from_bytes(&fs::read(path)?)
}

const DATASET_FORMAT: &str = "dataset";
const CHECKPOINT_FORMAT: &str = "checkpoint";
const OBS_PREFIX: &str = "observations/";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    env: EnvDescriptor,
    seed: u64,
    dynamics: StoredDynamics,
}

fn corrupt(e: serde_json::Error) -> VssfError {
    VssfError::CorruptHeader(e.to_string())
}

pub fn dataset_to_container(d: &Dataset) -> Result<Container> {
    d.validate()?;
    let meta = serde_json::to_value(DatasetMeta {
        env: d.env.clone(),
        seed: d.seed,
        dynamics: d.dynamics.clone(),
    })
    .map_err(corrupt)?;
    let mut arrays = vec![
        ("states".to_string(), d.states.shape.to_vec(), ArrayData::F32(d.states.data.clone())),
        ("inputs".to_string(), d.inputs.shape.to_vec(), ArrayData::F32(d.inputs.data.clone())),
    ];
    for (name, a) in &d.observations {
        arrays.push((format!("{OBS_PREFIX}{name}"), a.shape.to_vec(), ArrayData::F32(a.data.clone())));
    }
    Ok(Container {
        format: DATASET_FORMAT.into(),
        meta,
        arrays,
    })
}

fn array3(shape: Vec<usize>, data: ArrayData, name: &str) -> Result<Array3> {
    let shape: [usize; 3] = shape
        .try_into()
        .map_err(|_| VssfError::ShapeMismatch(format!("`{name}` must have three axes")))?;
    match data {
        ArrayData::F32(data) => Ok(Array3 { shape, data }),
        ArrayData::F64(_) => Err(VssfError::ShapeMismatch(format!("`{name}` must be f32"))),
    }
}

pub fn dataset_from_container(mut c: Container) -> Result<Dataset> {
    if c.format != DATASET_FORMAT {
        return Err(VssfError::CorruptHeader(format!("expected a dataset, found `{}`", c.format)));
    }
    let meta: DatasetMeta = serde_json::from_value(c.meta.clone()).map_err(corrupt)?;
    let (s, data) = c.take("states")?;
    let states = array3(s, data, "states")?;
    let (s, data) = c.take("inputs")?;
    let inputs = array3(s, data, "inputs")?;
    let mut observations = Vec::new();
    for (name, shape, data) in c.arrays {
        let Some(sensor) = name.strip_prefix(OBS_PREFIX) else {
            return Err(VssfError::CorruptHeader(format!("unexpected array `{name}`")));
        };
        observations.push((sensor.to_string(), array3(shape, data, &name)?));
    }
    let d = Dataset {
        env: meta.env,
        seed: meta.seed,
        dynamics: meta.dynamics,
        states,
        inputs,
        observations,
    };
    d.validate()?;
    d.dynamics_params().map_err(|e| VssfError::CorruptHeader(format!("stored dynamics: {e}")))?;
    Ok(d)
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<()> {
    write_container(&dataset_to_container(d)?, path)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_container(read_container(path)?)
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub trace: Vec<TraceRow>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    layout: ModelLayout,
    step: u64,
    config: TrainConfig,
    trace: Vec<TraceRow>,
}

fn matrix_array(m: &Matrix) -> (Vec<usize>, ArrayData) {
    let data = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
    (vec![m.nrows(), m.ncols()], ArrayData::F64(data))
}

fn array_matrix(shape: &[usize], data: ArrayData, name: &str) -> Result<Matrix> {
    match (shape, data) {
        (&[r, c], ArrayData::F64(v)) => Ok(Matrix::from_row_slice(r, c, &v)),
        _ => Err(VssfError::ShapeMismatch(format!("`{name}` must be a 2-D f64 array"))),
    }
}

pub fn checkpoint_to_container(ck: &Checkpoint) -> Result<Container> {
    let names = ck.model.trainable_names();
    if ck.adam.m.len() != names.len() || ck.adam.v.len() != names.len() {
        return Err(VssfError::ConfigMismatch("optimizer state does not match trainable tensors".into()));
    }
    let meta = serde_json::to_value(CheckpointMeta {
        layout: ck.model.layout(),
        step: ck.adam.step,
        config: ck.config.clone(),
        trace: ck.trace.clone(),
    })
    .map_err(corrupt)?;
    let mut arrays = Vec::new();
    for (name, t) in ck.model.tensors() {
        let (shape, data) = matrix_array(t);
        arrays.push((name, shape, data));
    }
    for (prefix, moments) in [("adam.m", &ck.adam.m), ("adam.v", &ck.adam.v)] {
        for (name, t) in names.iter().zip(moments) {
            let (shape, data) = matrix_array(t);
            arrays.push((format!("{prefix}.{name}"), shape, data));
        }
    }
    Ok(Container {
        format: CHECKPOINT_FORMAT.into(),
        meta,
        arrays,
    })
}

pub fn checkpoint_from_container(mut c: Container) -> Result<Checkpoint> {
    if c.format != CHECKPOINT_FORMAT {
        return Err(VssfError::CorruptHeader(format!("expected a checkpoint, found `{}`", c.format)));
    }
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone()).map_err(corrupt)?;
    let mut model = Model::from_layout(&meta.layout)?;
    let mut values = Vec::new();
    for (name, t) in model.tensors() {
        let (shape, data) = c.take(&name)?;
        let m = array_matrix(&shape, data, &name)?;
        if m.shape() != t.shape() {
            return Err(VssfError::ConfigMismatch(format!(
                "tensor `{name}` is {:?} but the layout implies {:?}",
                m.shape(),
                t.shape()
            )));
        }
        values.push(m);
    }
    model.set_tensors(&values)?;
    let trainable = model.trainable_values();
    let mut moments = [Vec::new(), Vec::new()];
    for (prefix, out) in ["adam.m", "adam.v"].iter().zip(moments.iter_mut()) {
        for (name, t) in model.trainable_names().iter().zip(&trainable) {
            let key = format!("{prefix}.{name}");
            let (shape, data) = c.take(&key)?;
            let m = array_matrix(&shape, data, &key)?;
            if m.shape() != t.shape() {
                return Err(VssfError::ConfigMismatch(format!("optimizer moment `{key}` has the wrong shape")));
            }
            out.push(m);
        }
    }
    if let Some((name, _, _)) = c.arrays.first() {
        return Err(VssfError::CorruptHeader(format!("unexpected array `{name}`")));
    }
    meta.config.validate()?;
    let [m, v] = moments;
    Ok(Checkpoint {
        model,
        adam: AdamState { step: meta.step, m, v },
        config: meta.config,
        trace: meta.trace,
    })
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_container(&checkpoint_to_container(ck)?, path)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_container(read_container(path)?)
}

/// Reads a checkpoint and checks it fits data with the given state and input sizes.
pub fn read_checkpoint_for(path: &Path, state_dim: usize, input_dim: usize) -> Result<Checkpoint> {
    let ck = read_checkpoint(path)?;
    let layout = ck.model.layout();
    if layout.state_dim != state_dim || layout.input_dim != input_dim {
        return Err(VssfError::ConfigMismatch(format!(
            "checkpoint has state/input sizes {}/{}, data has {state_dim}/{input_dim}",
            layout.state_dim, layout.input_dim
        )));
    }
    Ok(ck)
}
