//! Binary feature and model files.
//!
//! Both share one framing: a 4-byte magic, a little-endian `u16` version, a
//! fixed header, the numeric payload in little-endian, and a JSON trailer
//! prefixed by its `u64` byte length.
//!
//! Feature sets (`DFS1`): `n: u64`, `d: u32`, `flags: u32`, then `n·d` `f32`
//! row-major, then `{ids, metadata, labels?}`. Bit 0 of `flags` is set when
//! labels are present.
//!
//! Models (`DMD1`): `kind: u8`, `count: u64`, then `count` `f64` parameters,
//! then a [`ModelInfo`] trailer describing their shape.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gmm::DiagonalGmm;
use crate::linalg::{Matrix, PcaModel};
use crate::mlp::{DenseLayer, MlpModel};
use crate::predict::{LinearSvmModel, NcmModel};
use crate::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"DFS1";
pub const MODEL_MAGIC: &[u8; 4] = b"DMD1";
pub const FORMAT_VERSION: u16 = 1;
const FLAG_LABELS: u32 = 1;

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub descriptor: String,
    pub config_hash: String,
}

/// Named rows of 32-bit features with optional string labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    labels: Option<Vec<String>>,
    pub meta: FeatureMeta,
}

#[derive(Serialize, Deserialize)]
struct FeatureTrailer {
    ids: Vec<String>,
    metadata: FeatureMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl FeatureSet {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>, labels: Option<Vec<String>>, meta: FeatureMeta) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                found: data.len(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != ids.len() {
                return Err(Error::DimensionMismatch {
                    expected: ids.len(),
                    found: l.len(),
                });
            }
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite feature in row {}", i / dim.max(1))));
        }
        Ok(FeatureSet {
            ids,
            dim,
            data,
            labels,
            meta,
        })
    }

    /// Converts `f64` rows to the stored 32-bit representation.
    pub fn from_matrix(ids: Vec<String>, rows: &Matrix, labels: Option<Vec<String>>, meta: FeatureMeta) -> Result<Self> {
        let data = rows.as_slice().iter().map(|&v| v as f32).collect();
        Self::new(ids, rows.cols(), data, labels, meta)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// The rows at `idx`, in that order, with the same metadata.
    pub fn subset(&self, idx: &[usize]) -> Result<FeatureSet> {
        if let Some(&i) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("row {i} out of range for {} rows", self.len())));
        }
        Ok(FeatureSet {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            dim: self.dim,
            data: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i].clone()).collect()),
            meta: self.meta.clone(),
        })
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(self.len(), self.dim, self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("shape checked at construction")
    }

    /// Labels mapped to class indices in sorted-name order, with the names.
    pub fn class_indices(&self) -> Result<(Vec<usize>, Vec<String>)> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("feature set carries no labels"))?;
        let mut names = labels.clone();
        names.sort();
        names.dedup();
        let idx = labels.iter().map(|l| names.binary_search(l).unwrap()).collect();
        Ok((idx, names))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(22 + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        let flags = if self.labels.is_some() { FLAG_LABELS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let trailer = FeatureTrailer {
            ids: self.ids.clone(),
            metadata: self.meta.clone(),
            labels: self.labels.clone(),
        };
        push_trailer(&mut out, &trailer);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(FEATURE_MAGIC)?;
        r.version()?;
        let n = r.u64("row count")?;
        let d = r.u32("dimension")? as u64;
        let flags_at = r.pos;
        let flags = r.u32("flags")?;
        if flags & !FLAG_LABELS != 0 {
            return Err(Error::format(flags_at as u64, format!("unknown flags {flags:#x}")));
        }
        let payload_at = r.pos;
        let count = n
            .checked_mul(d)
            .filter(|c| c.checked_mul(4).is_some_and(|b| b <= r.remaining() as u64))
            .ok_or_else(|| {
                Error::format(
                    payload_at as u64,
                    format!("truncated: {n}×{d} floats do not fit in the remaining {} bytes", r.remaining()),
                )
            })? as usize;
        let raw = r.take(count * 4, "feature values")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format((payload_at + 4 * i) as u64, "non-finite feature value"));
        }
        let trailer_at = r.pos;
        let t: FeatureTrailer = r.trailer()?;
        if t.ids.len() as u64 != n {
            return Err(Error::format(
                trailer_at as u64,
                format!("trailer lists {} ids for {n} rows", t.ids.len()),
            ));
        }
        if (flags & FLAG_LABELS != 0) != t.labels.is_some() {
            return Err(Error::format(flags_at as u64, "label flag disagrees with trailer"));
        }
        if t.labels.as_ref().is_some_and(|l| l.len() as u64 != n) {
            return Err(Error::format(trailer_at as u64, "label count differs from row count"));
        }
        Ok(FeatureSet {
            ids: t.ids,
            dim: d as usize,
            data,
            labels: t.labels,
            meta: t.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn push_trailer(out: &mut Vec<u8>, trailer: &impl Serialize) {
    let json = serde_json::to_vec(trailer).expect("trailer serializes");
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: {what} needs {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(want)),
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos as u64;
        let v = u16::from_le_bytes(self.take(2, "version")?.try_into().unwrap());
        if v != FORMAT_VERSION {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn trailer<T: serde::de::DeserializeOwned>(&mut self) -> Result<T> {
        let len_at = self.pos;
        let len = self.u64("trailer length")?;
        if len > self.remaining() as u64 {
            return Err(Error::format(
                len_at as u64,
                format!("truncated: trailer claims {len} bytes, {} left", self.remaining()),
            ));
        }
        let at = self.pos;
        let json = self.take(len as usize, "trailer")?;
        if self.remaining() != 0 {
            return Err(Error::format(self.pos as u64, format!("{} unexpected bytes after trailer", self.remaining())));
        }
        serde_json::from_slice(json).map_err(|e| Error::format(at as u64, format!("bad trailer: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pca,
    Gmm,
    Svm,
    Ncm,
    Mlp,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Pca => 1,
            ModelKind::Gmm => 2,
            ModelKind::Svm => 3,
            ModelKind::Ncm => 4,
            ModelKind::Mlp => 5,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => ModelKind::Pca,
            2 => ModelKind::Gmm,
            3 => ModelKind::Svm,
            4 => ModelKind::Ncm,
            5 => ModelKind::Mlp,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pca => "pca",
            ModelKind::Gmm => "gmm",
            ModelKind::Svm => "svm",
            ModelKind::Ncm => "ncm",
            ModelKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Pca(PcaModel),
    Gmm(DiagonalGmm),
    Svm(LinearSvmModel),
    Ncm(NcmModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Pca(_) => ModelKind::Pca,
            Model::Gmm(_) => ModelKind::Gmm,
            Model::Svm(_) => ModelKind::Svm,
            Model::Ncm(_) => ModelKind::Ncm,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }
}

/// Provenance and shape carried in a model file's trailer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelInfo {
    /// Hash of the training configuration and inputs.
    pub config_hash: String,
    /// Hash of the artifact this model was trained on (a feature set or
    /// another model), if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depends_on: Option<String>,
    /// Descriptor name of the features the model consumes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_descriptor: Option<String>,
    /// Class names, indexed by class id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    #[serde(default)]
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scalars: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_ids: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub model: Model,
    pub info: ModelInfo,
}

impl SavedModel {
    /// Wraps a model; shape fields of `info` are filled in on save.
    pub fn new(model: Model, info: ModelInfo) -> Self {
        SavedModel { model, info }
    }

    fn encode(&self) -> (Vec<f64>, ModelInfo) {
        let mut info = self.info.clone();
        info.scalars.clear();
        info.class_ids = None;
        let mut p = Vec::new();
        match &self.model {
            Model::Pca(m) => {
                info.shape = vec![m.input_dim(), m.out_dim()];
                p.extend_from_slice(m.mean());
                p.extend_from_slice(m.components().as_slice());
                p.extend_from_slice(m.explained_variances());
            }
            Model::Gmm(m) => {
                info.shape = vec![m.components(), m.dim()];
                p.extend_from_slice(m.weights());
                p.extend_from_slice(m.means().as_slice());
                p.extend_from_slice(m.variances().as_slice());
            }
            Model::Svm(m) => {
                info.shape = vec![m.weights.rows(), m.weights.cols()];
                info.scalars.insert("lambda".into(), m.lambda);
                p.extend_from_slice(m.weights.as_slice());
                p.extend_from_slice(&m.biases);
            }
            Model::Ncm(m) => {
                info.shape = vec![m.centroids.rows(), m.centroids.cols()];
                info.class_ids = Some(m.class_ids.clone());
                p.extend_from_slice(m.centroids.as_slice());
            }
            Model::Mlp(m) => {
                info.shape = std::iter::once(m.input_dim())
                    .chain(m.layers().iter().map(|l| l.output_dim()))
                    .collect();
                info.scalars.insert("dropout".into(), m.dropout());
                for l in m.layers() {
                    p.extend(l.weights.iter());
                    p.extend(l.bias.iter());
                }
            }
        }
        (p, info)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (params, info) = self.encode();
        let mut out = Vec::with_capacity(23 + params.len() * 8);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.model.kind().tag());
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for v in &params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        push_trailer(&mut out, &info);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        r.version()?;
        let tag_at = r.pos as u64;
        let tag = r.u8("model kind")?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| Error::format(tag_at, format!("unknown model kind {tag}")))?;
        let count = r.u64("parameter count")?;
        let params_at = r.pos as u64;
        if count.checked_mul(8).map_or(true, |b| b > r.remaining() as u64) {
            return Err(Error::format(
                params_at,
                format!("truncated: {count} parameters do not fit in the remaining {} bytes", r.remaining()),
            ));
        }
        let raw = r.take(count as usize * 8, "parameters")?;
        let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let info: ModelInfo = r.trailer()?;
        let model = decode(kind, &params, &info).map_err(|e| match e {
            Error::Format { .. } => e,
            other => Error::format(params_at, other.to_string()),
        })?;
        Ok(SavedModel { model, info })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn decode(kind: ModelKind, params: &[f64], info: &ModelInfo) -> Result<Model> {
    let shape = &info.shape;
    let need = |n: usize| -> Result<()> {
        if params.len() != n {
            return Err(Error::invalid(format!(
                "{} model of shape {shape:?} needs {n} parameters, file has {}",
                kind.name(),
                params.len()
            )));
        }
        Ok(())
    };
    let dims = |k: usize| -> Result<()> {
        if shape.len() != k {
            return Err(Error::invalid(format!("{} model expects a {k}-entry shape, got {shape:?}", kind.name())));
        }
        Ok(())
    };
    let scalar = |name: &str| -> Result<f64> {
        info.scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing scalar {name}")))
    };
    Ok(match kind {
        ModelKind::Pca => {
            dims(2)?;
            let (d, k) = (shape[0], shape[1]);
            need(d + k * d + k)?;
            let mean = params[..d].to_vec();
            let comps = Matrix::new(k, d, params[d..d + k * d].to_vec())?;
            Model::Pca(PcaModel::from_parts(mean, comps, params[d + k * d..].to_vec())?)
        }
        ModelKind::Gmm => {
            dims(2)?;
            let (n, d) = (shape[0], shape[1]);
            need(n + 2 * n * d)?;
            Model::Gmm(DiagonalGmm::new(
                params[..n].to_vec(),
                Matrix::new(n, d, params[n..n + n * d].to_vec())?,
                Matrix::new(n, d, params[n + n * d..].to_vec())?,
            )?)
        }
        ModelKind::Svm => {
            dims(2)?;
            let (c, d) = (shape[0], shape[1]);
            need(c * d + c)?;
            Model::Svm(LinearSvmModel {
                weights: Matrix::new(c, d, params[..c * d].to_vec())?,
                biases: params[c * d..].to_vec(),
                lambda: scalar("lambda")?,
            })
        }
        ModelKind::Ncm => {
            dims(2)?;
            let (k, d) = (shape[0], shape[1]);
            need(k * d)?;
            let class_ids = info.class_ids.clone().ok_or_else(|| Error::invalid("missing class ids"))?;
            if class_ids.len() != k || class_ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid("class ids must be strictly increasing, one per centroid"));
            }
            Model::Ncm(NcmModel {
                class_ids,
                centroids: Matrix::new(k, d, params.to_vec())?,
            })
        }
        ModelKind::Mlp => {
            if shape.len() < 2 {
                return Err(Error::invalid(format!("mlp shape {shape:?} too short")));
            }
            need(shape.windows(2).map(|w| w[0] * w[1] + w[1]).sum())?;
            let mut layers = Vec::new();
            let mut at = 0;
            for w in shape.windows(2) {
                let (i, o) = (w[0], w[1]);
                let weights = Array2::from_shape_vec((o, i), params[at..at + o * i].to_vec()).expect("sized above");
                at += o * i;
                let bias = Array1::from(params[at..at + o].to_vec());
                at += o;
                layers.push(DenseLayer { weights, bias });
            }
            Model::Mlp(MlpModel::new(layers, scalar("dropout")?)?)
        }
    })
}
