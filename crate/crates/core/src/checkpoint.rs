//! Self-describing parameter files.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of UTF-8
//! JSON header, then every array named in the header, in header order, as
//! little-endian `f64` values in row-major order. Nothing may follow the
//! last array.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MlpParams, MlpSpec};
use crate::perflow::CfgMode;
use crate::schedule::{NoiseSchedule, TargetMode, WindowPartition};
use crate::teacher::PredictionMode;
use crate::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Teacher,
    Student,
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionHeader {
    pub k: usize,
    pub boundaries: Vec<f64>,
}

impl PartitionHeader {
    pub fn of<T: Scalar>(p: &WindowPartition<T>) -> Self {
        Self {
            k: p.k(),
            boundaries: p.boundaries().iter().map(|b| b.as_f64()).collect(),
        }
    }

    pub fn partition<T: Scalar>(&self) -> Result<WindowPartition<T>> {
        let p = WindowPartition::from_boundaries(self.boundaries.iter().map(|&b| T::of(b)).collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        if p.k() != self.k {
            return Err(Error::Format(format!(
                "partition header says k={} but lists {} windows",
                self.k,
                p.k()
            )));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub mlp_spec: MlpSpec,
    pub schedule: NoiseSchedule<f64>,
    #[serde(default)]
    pub partition: Option<PartitionHeader>,
    #[serde(default)]
    pub target_mode: Option<TargetMode>,
    #[serde(default)]
    pub prediction_mode: Option<PredictionMode>,
    #[serde(default)]
    pub cfg_mode: Option<CfgMode>,
    pub step: u64,
    pub seed: u64,
    pub arrays: Vec<ArrayHeader>,
}

impl CheckpointHeader {
    pub fn new<T: Scalar>(kind: CheckpointKind, spec: &MlpSpec, schedule: &NoiseSchedule<T>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            mlp_spec: spec.clone(),
            schedule: NoiseSchedule {
                kind: schedule.kind,
                beta_min: schedule.beta_min.as_f64(),
                beta_max: schedule.beta_max.as_f64(),
            },
            partition: None,
            target_mode: None,
            prediction_mode: None,
            cfg_mode: None,
            step: 0,
            seed: 0,
            arrays: Vec::new(),
        }
    }

    pub fn schedule<T: Scalar>(&self) -> Result<NoiseSchedule<T>> {
        NoiseSchedule::new(
            self.schedule.kind,
            T::of(self.schedule.beta_min),
            T::of(self.schedule.beta_max),
        )
        .map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: MlpParams<T>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Pairs `header` with `params`, filling in the array table.
    pub fn new(mut header: CheckpointHeader, params: MlpParams<T>) -> Result<Self> {
        params.check_spec(&header.mlp_spec)?;
        header.arrays = params
            .iter()
            .map(|(name, a)| ArrayHeader {
                name: name.clone(),
                shape: a.shape().to_vec(),
            })
            .collect();
        Ok(Self { header, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let floats: usize = self.params.num_params();
        let mut out = Vec::with_capacity(8 + json.len() + 8 * floats);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.header.arrays {
            let arr = self
                .params
                .get(&a.name)
                .ok_or_else(|| Error::Format(format!("array {} missing from parameters", a.name)))?;
            for v in arr.iter() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: String| Error::Format(m);
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| fail("file too short for a header length".into()))?;
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| fail("header length overflows".into()))?;
        let body = &bytes[8..];
        if header_len > body.len() {
            return Err(fail(format!(
                "header length {header_len} exceeds the remaining {} bytes",
                body.len()
            )));
        }
        let text = std::str::from_utf8(&body[..header_len]).map_err(|e| fail(format!("header is not UTF-8: {e}")))?;
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| fail(format!("header is not JSON: {e}")))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| fail("header lacks format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::UnsupportedVersion {
                found: version.min(u32::MAX as u64) as u32,
                expected: FORMAT_VERSION,
            });
        }
        let header: CheckpointHeader =
            serde_json::from_value(value).map_err(|e| fail(format!("bad header: {e}")))?;
        let mut payload = &body[header_len..];
        let mut tensors = BTreeMap::new();
        for a in &header.arrays {
            let count: usize = a.shape.iter().product();
            let need = count
                .checked_mul(8)
                .ok_or_else(|| fail(format!("array {} is too large", a.name)))?;
            if payload.len() < need {
                return Err(fail(format!("payload truncated inside array {}", a.name)));
            }
            let values: Vec<T> = payload[..need]
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
                .collect();
            payload = &payload[need..];
            let arr = ArrayD::from_shape_vec(IxDyn(&a.shape), values).map_err(|e| fail(e.to_string()))?;
            if tensors.insert(a.name.clone(), arr).is_some() {
                return Err(fail(format!("array {} listed twice", a.name)));
            }
        }
        if !payload.is_empty() {
            return Err(fail(format!("{} trailing bytes after the payload", payload.len())));
        }
        let params = MlpParams::from_tensors(tensors);
        params
            .check_spec(&header.mlp_spec)
            .map_err(|e| fail(format!("payload does not match the header spec: {e}")))?;
        Ok(Self { header, params })
    }

    /// Writes to a sibling temporary file first, so a failed save never
    /// leaves a half-written checkpoint at `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
