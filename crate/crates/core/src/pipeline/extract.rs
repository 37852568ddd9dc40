//! Per-image feature extraction and the training recipes that produce the
//! models it needs.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::format::{config_hash, FeatureMeta, FeatureSet, Model, ModelInfo, ModelKind, SavedModel};
use super::manifest::Manifest;
use crate::fisher::{fv_grid_encode, fv_pca_reduce, FvVariant, GridConfig};
use crate::gmm::{fit_em, DiagonalGmm, EmConfig, EmFit};
use crate::imaging::{self, GrayImage};
use crate::linalg::{Matrix, PcaModel};
use crate::mlp::{self, TrainConfig, TrainOutcome};
use crate::patchdesc::{self, DenseConfig, DEFAULT_PCA_DIM, SIFT_DIM};
use crate::predict::{ncm_fit, ncm_predict, svm_predict, train_linear_svm, SvmConfig};
use crate::runlength::{rl_from_gray, RlConfig};
use crate::{Error, Result};

/// Largest tolerated share of unreadable images before extraction aborts.
pub const MAX_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Descriptor {
    Rl,
    Fv4,
    Fv16,
    Fv256,
    Fv256Pca,
    HybridAct,
}

impl Descriptor {
    pub const ALL: [Descriptor; 6] = [
        Descriptor::Rl,
        Descriptor::Fv4,
        Descriptor::Fv16,
        Descriptor::Fv256,
        Descriptor::Fv256Pca,
        Descriptor::HybridAct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Descriptor::Rl => "rl",
            Descriptor::Fv4 => "fv4",
            Descriptor::Fv16 => "fv16",
            Descriptor::Fv256 => "fv256",
            Descriptor::Fv256Pca => "fv256pca",
            Descriptor::HybridAct => "hybrid-act",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }

    fn fv_variant(self) -> Option<FvVariant> {
        match self {
            Descriptor::Fv4 => Some(FvVariant::Fv4),
            Descriptor::Fv16 => Some(FvVariant::Fv16),
            Descriptor::Fv256 | Descriptor::Fv256Pca => Some(FvVariant::Fv256),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvConfig {
    /// Pages are downscaled to at most this many pixels before SIFT.
    pub max_pixels: usize,
    pub dense: DenseConfig,
    pub renormalize_grid: bool,
}

impl Default for FvConfig {
    fn default() -> Self {
        FvConfig {
            max_pixels: imaging::DEFAULT_MAX_PIXELS,
            dense: DenseConfig::default(),
            renormalize_grid: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub rl: RlConfig,
    pub fv: FvConfig,
    /// Hidden layer (1-based) read out for `hybrid-act`.
    pub hybrid_layer: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            rl: RlConfig::default(),
            fv: FvConfig::default(),
            hybrid_layer: 1,
        }
    }
}

/// Models an extraction may need; which ones depends on the descriptor.
/// Encoders share them rather than copying, since an FV PCA is large.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub local_pca: Option<Arc<SavedModel>>,
    pub gmm: Option<Arc<SavedModel>>,
    pub fv_pca: Option<Arc<SavedModel>>,
    pub mlp: Option<Arc<SavedModel>>,
}

fn require<'a>(slot: &'a Option<Arc<SavedModel>>, kind: ModelKind, role: &str) -> Result<&'a Arc<SavedModel>> {
    let m = slot
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("descriptor needs a {role} model")))?;
    if m.model.kind() != kind {
        return Err(Error::Incompatible(format!(
            "{role} model has kind {}, expected {}",
            m.model.kind().name(),
            kind.name()
        )));
    }
    Ok(m)
}

fn check_parent(child: &SavedModel, parent_hash: &str, what: &str) -> Result<()> {
    match &child.info.depends_on {
        Some(h) if h != parent_hash => Err(Error::Incompatible(format!(
            "{what} was trained on {h}, but the current input hashes to {parent_hash}"
        ))),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Rl(RlConfig),
    Fv {
        fv: FvConfig,
        local_pca: PcaModel,
        gmm: DiagonalGmm,
        grid: GridConfig,
        reduce: Option<Arc<SavedModel>>,
    },
    Hybrid {
        base: Box<Encoder>,
        mlp: Arc<SavedModel>,
        layer: usize,
    },
}

/// A ready-to-run descriptor pipeline with its configuration hash.
#[derive(Debug, Clone)]
pub struct Encoder {
    descriptor: Descriptor,
    stage: Stage,
    hash: String,
    dim: usize,
}

impl Encoder {
    pub fn new(descriptor: Descriptor, config: &ExtractConfig, models: &ModelSet) -> Result<Self> {
        match descriptor {
            Descriptor::Rl => {
                config.rl.validate()?;
                Ok(Encoder {
                    descriptor,
                    hash: config_hash(&json!({ "descriptor": "rl", "rl": config.rl })),
                    dim: config.rl.descriptor_len(),
                    stage: Stage::Rl(config.rl.clone()),
                })
            }
            Descriptor::HybridAct => {
                let saved = require(&models.mlp, ModelKind::Mlp, "mlp")?;
                let Model::Mlp(mlp) = &saved.model else { unreachable!() };
                let base_name = saved
                    .info
                    .input_descriptor
                    .as_deref()
                    .ok_or_else(|| Error::Incompatible("mlp model does not record its input descriptor".into()))?;
                let base_desc = Descriptor::parse(base_name)
                    .filter(|d| *d != Descriptor::HybridAct)
                    .ok_or_else(|| Error::Incompatible(format!("mlp input descriptor {base_name:?} is not extractable")))?;
                let base = Encoder::new(base_desc, config, models)?;
                check_parent(saved, &base.hash, "mlp")?;
                if mlp.input_dim() != base.dim {
                    return Err(Error::DimensionMismatch {
                        expected: base.dim,
                        found: mlp.input_dim(),
                    });
                }
                let layer = config.hybrid_layer;
                if layer == 0 || layer > mlp.hidden_count() {
                    return Err(Error::invalid(format!("hybrid layer {layer} out of range 1..={}", mlp.hidden_count())));
                }
                Ok(Encoder {
                    descriptor,
                    hash: config_hash(&json!({
                        "descriptor": "hybrid-act",
                        "base": base.hash,
                        "mlp": saved.info.config_hash,
                        "layer": layer,
                    })),
                    dim: mlp.hidden_width(layer),
                    stage: Stage::Hybrid {
                        base: Box::new(base),
                        mlp: Arc::clone(saved),
                        layer,
                    },
                })
            }
            _ => {
                let variant = descriptor.fv_variant().expect("fv descriptor");
                config.fv.dense.validate()?;
                let pca_saved = require(&models.local_pca, ModelKind::Pca, "local PCA")?;
                let Model::Pca(local_pca) = &pca_saved.model else { unreachable!() };
                if local_pca.input_dim() != SIFT_DIM {
                    return Err(Error::DimensionMismatch {
                        expected: SIFT_DIM,
                        found: local_pca.input_dim(),
                    });
                }
                let gmm_saved = require(&models.gmm, ModelKind::Gmm, "gmm")?;
                let Model::Gmm(gmm) = &gmm_saved.model else { unreachable!() };
                check_parent(gmm_saved, &pca_saved.info.config_hash, "gmm")?;
                if gmm.dim() != local_pca.out_dim() + 3 {
                    return Err(Error::DimensionMismatch {
                        expected: local_pca.out_dim() + 3,
                        found: gmm.dim(),
                    });
                }
                if gmm.components() != variant.components() {
                    return Err(Error::Incompatible(format!(
                        "{} needs {} gaussians, model has {}",
                        descriptor.name(),
                        variant.components(),
                        gmm.components()
                    )));
                }
                let grid = GridConfig {
                    grid: variant.grid(),
                    renormalize: config.fv.renormalize_grid,
                };
                let fv_len = variant.len(gmm.dim());
                let fv_hash = config_hash(&json!({
                    "descriptor": variant.name(),
                    "fv": config.fv,
                    "local_pca": pca_saved.info.config_hash,
                    "gmm": gmm_saved.info.config_hash,
                }));
                let mut enc = Encoder {
                    descriptor,
                    hash: fv_hash.clone(),
                    dim: fv_len,
                    stage: Stage::Fv {
                        fv: config.fv.clone(),
                        local_pca: local_pca.clone(),
                        gmm: gmm.clone(),
                        grid,
                        reduce: None,
                    },
                };
                if descriptor == Descriptor::Fv256Pca {
                    let red_saved = require(&models.fv_pca, ModelKind::Pca, "FV PCA")?;
                    let Model::Pca(red) = &red_saved.model else { unreachable!() };
                    check_parent(red_saved, &fv_hash, "FV PCA")?;
                    if red.input_dim() != fv_len {
                        return Err(Error::DimensionMismatch {
                            expected: fv_len,
                            found: red.input_dim(),
                        });
                    }
                    enc.hash = config_hash(&json!({
                        "descriptor": "fv256pca",
                        "fv256": fv_hash,
                        "pca": red_saved.info.config_hash,
                    }));
                    enc.dim = red.out_dim();
                    if let Stage::Fv { reduce, .. } = &mut enc.stage {
                        *reduce = Some(Arc::clone(red_saved));
                    }
                }
                Ok(enc)
            }
        }
    }

    pub fn descriptor(&self) -> Descriptor {
        self.descriptor
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn meta(&self) -> FeatureMeta {
        FeatureMeta {
            descriptor: self.descriptor.name().into(),
            config_hash: self.hash.clone(),
        }
    }

    pub fn encode(&self, gray: &GrayImage) -> Result<Vec<f64>> {
        match &self.stage {
            Stage::Rl(cfg) => Ok(rl_from_gray(gray, cfg)?.into_vec()),
            Stage::Fv {
                fv,
                local_pca,
                gmm,
                grid,
                reduce,
            } => {
                let scaled = imaging::downscale_to_max_pixels(gray, fv.max_pixels)?;
                let locals = patchdesc::local_descriptors(&scaled, &fv.dense, local_pca)?;
                let v = fv_grid_encode(&locals, gmm, *grid)?.values;
                match reduce.as_deref().map(|m| &m.model) {
                    Some(Model::Pca(p)) => fv_pca_reduce(&v, p),
                    _ => Ok(v),
                }
            }
            Stage::Hybrid { base, mlp, layer } => match &mlp.model {
                Model::Mlp(m) => m.extract_activation(&base.encode(gray)?, *layer),
                _ => unreachable!("kind checked in Encoder::new"),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub features: FeatureSet,
    /// Images that could not be read; their rows are absent.
    pub failures: Vec<Failure>,
}

fn load_all<T: Send>(manifest: &Manifest, f: impl Fn(usize, GrayImage) -> Result<T> + Sync) -> Result<(Vec<(usize, T)>, Vec<Failure>)> {
    let results: Vec<Result<std::result::Result<T, Failure>>> = manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(i, r)| match imaging::load_gray(&manifest.resolve(r)) {
            Ok(g) => f(i, g).map(Ok),
            Err(e) => Ok(Err(Failure {
                id: r.id.clone(),
                message: e.to_string(),
            })),
        })
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            Ok(v) => ok.push((i, v)),
            Err(f) => failures.push(f),
        }
    }
    let n = manifest.len().max(1);
    if failures.len() as f64 > MAX_FAILURE_RATE * n as f64 {
        return Err(Error::invalid(format!(
            "{} of {} images unreadable (first: {}: {})",
            failures.len(),
            manifest.len(),
            failures[0].id,
            failures[0].message
        )));
    }
    Ok((ok, failures))
}

/// Encodes every manifest image, in manifest order. Unreadable images are
/// skipped and reported unless they exceed [`MAX_FAILURE_RATE`].
pub fn extract(manifest: &Manifest, encoder: &Encoder) -> Result<Extraction> {
    let (rows, failures) = load_all(manifest, |_, g| encoder.encode(&g))?;
    let ids = rows.iter().map(|(i, _)| manifest.records[*i].id.clone()).collect();
    let labels = rows.iter().map(|(i, _)| manifest.records[*i].label.clone()).collect();
    let mut data = Vec::with_capacity(rows.len() * encoder.dim);
    for (_, v) in &rows {
        if v.len() != encoder.dim {
            return Err(Error::DimensionMismatch {
                expected: encoder.dim,
                found: v.len(),
            });
        }
        data.extend(v.iter().map(|&x| x as f32));
    }
    let features = FeatureSet::new(ids, encoder.dim, data, Some(labels), encoder.meta())?;
    Ok(Extraction { features, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Descriptors kept per image, drawn without replacement.
    pub per_image: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { per_image: 200, seed: 0 }
    }
}

fn subsample(rows: Vec<Vec<f64>>, image: usize, cfg: &SampleConfig) -> Vec<Vec<f64>> {
    if rows.len() <= cfg.per_image {
        return rows;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(image as u64);
    let mut keep: Vec<usize> = sample(&mut rng, rows.len(), cfg.per_image).into_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| rows[i].clone()).collect()
}

fn stack(parts: Vec<(usize, Vec<Vec<f64>>)>, dim: usize) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = parts.into_iter().flat_map(|(_, r)| r).collect();
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, dim));
    }
    Matrix::from_rows(&rows)
}

/// Sampled raw SIFT descriptors across the manifest.
pub fn sample_sift(manifest: &Manifest, fv: &FvConfig, sampling: &SampleConfig) -> Result<Matrix> {
    let (parts, _) = load_all(manifest, |i, g| {
        let scaled = imaging::downscale_to_max_pixels(&g, fv.max_pixels)?;
        let d = patchdesc::dense_sift(&scaled, &fv.dense)?;
        Ok(subsample(d.into_iter().map(|(_, v)| v).collect(), i, sampling))
    })?;
    stack(parts, SIFT_DIM)
}

/// Sampled projected-and-augmented local descriptors across the manifest.
pub fn sample_local(manifest: &Manifest, fv: &FvConfig, local_pca: &PcaModel, sampling: &SampleConfig) -> Result<Matrix> {
    let (parts, _) = load_all(manifest, |i, g| {
        let scaled = imaging::downscale_to_max_pixels(&g, fv.max_pixels)?;
        let d = patchdesc::local_descriptors(&scaled, &fv.dense, local_pca)?;
        Ok(subsample(d.into_iter().map(|l| l.values).collect(), i, sampling))
    })?;
    stack(parts, local_pca.out_dim() + 3)
}

/// Fits the 128 → `out_dim` SIFT projection on descriptors sampled from
/// the manifest.
pub fn train_local_pca(manifest: &Manifest, fv: &FvConfig, sampling: &SampleConfig, out_dim: usize) -> Result<SavedModel> {
    let sample = sample_sift(manifest, fv, sampling)?;
    let pca = patchdesc::fit_descriptor_pca(&sample, out_dim)?;
    let hash = config_hash(&json!({
        "model": "local-pca",
        "fv": fv,
        "sampling": sampling,
        "out_dim": out_dim,
        "images": manifest_fingerprint(manifest),
    }));
    Ok(SavedModel::new(
        Model::Pca(pca),
        ModelInfo {
            config_hash: hash,
            input_descriptor: Some("sift".into()),
            ..Default::default()
        },
    ))
}

pub fn default_local_dim() -> usize {
    DEFAULT_PCA_DIM
}

/// Fits the visual vocabulary on local descriptors sampled from the manifest.
pub fn train_gmm(
    manifest: &Manifest,
    fv: &FvConfig,
    local_pca: &SavedModel,
    components: usize,
    em: &EmConfig,
    sampling: &SampleConfig,
) -> Result<(SavedModel, EmFit)> {
    let Model::Pca(pca) = &local_pca.model else {
        return Err(Error::Incompatible("local PCA model expected".into()));
    };
    let sample = sample_local(manifest, fv, pca, sampling)?;
    if sample.rows() < components {
        return Err(Error::invalid(format!(
            "{} local descriptors cannot support {components} gaussians",
            sample.rows()
        )));
    }
    let fit = fit_em(&sample, components, em)?;
    let hash = config_hash(&json!({
        "model": "gmm",
        "components": components,
        "em": em,
        "fv": fv,
        "sampling": sampling,
        "local_pca": local_pca.info.config_hash,
        "images": manifest_fingerprint(manifest),
    }));
    let saved = SavedModel::new(
        Model::Gmm(fit.model.clone()),
        ModelInfo {
            config_hash: hash,
            depends_on: Some(local_pca.info.config_hash.clone()),
            input_descriptor: Some("local".into()),
            ..Default::default()
        },
    );
    Ok((saved, fit))
}

/// Ids and labels of the manifest, hashed; ties models to their training data.
fn manifest_fingerprint(manifest: &Manifest) -> String {
    let pairs: Vec<(&str, &str)> = manifest
        .records
        .iter()
        .map(|r| (r.id.as_str(), r.label.as_str()))
        .collect();
    config_hash(&pairs)
}

fn features_fingerprint(features: &FeatureSet) -> String {
    config_hash(&json!({ "meta": features.meta, "ids": features.ids(), "labels": features.labels() }))
}

/// Fits PCA on a feature set, e.g. FV256 → 4096.
pub fn train_feature_pca(features: &FeatureSet, out_dim: usize) -> Result<SavedModel> {
    let pca = crate::linalg::fit_pca(&features.to_matrix(), out_dim)?;
    Ok(SavedModel::new(
        Model::Pca(pca),
        ModelInfo {
            config_hash: config_hash(&json!({
                "model": "feature-pca",
                "out_dim": out_dim,
                "input": features_fingerprint(features),
            })),
            depends_on: Some(features.meta.config_hash.clone()),
            input_descriptor: Some(features.meta.descriptor.clone()),
            ..Default::default()
        },
    ))
}

fn classifier_info(features: &FeatureSet, classes: Vec<String>, config: &impl Serialize, model: &str) -> ModelInfo {
    ModelInfo {
        config_hash: config_hash(&json!({
            "model": model,
            "config": config,
            "input": features_fingerprint(features),
        })),
        depends_on: Some(features.meta.config_hash.clone()),
        input_descriptor: Some(features.meta.descriptor.clone()),
        classes: Some(classes),
        ..Default::default()
    }
}

/// Trains the fully connected layers on a labeled feature set. With
/// `validation`, the epoch with the best validation accuracy is kept.
pub fn train_mlp(
    features: &FeatureSet,
    config: &TrainConfig,
    validation: Option<&FeatureSet>,
) -> Result<(SavedModel, TrainOutcome)> {
    let (labels, classes) = features.class_indices()?;
    let x = features.to_matrix();
    let val = match validation {
        Some(v) => {
            check_same_features(features, v)?;
            let (vl, vc) = v.class_indices()?;
            let remapped = remap(&vl, &vc, &classes)?;
            Some((v.to_matrix(), remapped))
        }
        None => None,
    };
    let outcome = mlp::train(&x, &labels, classes.len(), config, val.as_ref().map(|(m, l)| (m, l.as_slice())))?;
    let info = classifier_info(features, classes, config, "mlp");
    Ok((SavedModel::new(Model::Mlp(outcome.model.clone()), info), outcome))
}

pub fn train_svm(features: &FeatureSet, config: &SvmConfig) -> Result<SavedModel> {
    let (labels, classes) = features.class_indices()?;
    let m = train_linear_svm(&features.to_matrix(), &labels, classes.len(), config)?;
    Ok(SavedModel::new(Model::Svm(m), classifier_info(features, classes, config, "svm")))
}

pub fn fit_ncm(features: &FeatureSet) -> Result<SavedModel> {
    let (labels, classes) = features.class_indices()?;
    let m = ncm_fit(&features.to_matrix(), &labels)?;
    Ok(SavedModel::new(Model::Ncm(m), classifier_info(features, classes, &"ncm", "ncm")))
}

fn remap(labels: &[usize], names: &[String], target: &[String]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            target
                .binary_search(&names[l])
                .map_err(|_| Error::invalid(format!("label {:?} unknown to the model", names[l])))
        })
        .collect()
}

/// Rejects feature sets produced by different descriptor configurations.
pub fn check_same_features(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.meta != b.meta || a.dim() != b.dim() {
        return Err(Error::Incompatible(format!(
            "feature sets differ: {} ({}) vs {} ({})",
            a.meta.descriptor, a.meta.config_hash, b.meta.descriptor, b.meta.config_hash
        )));
    }
    Ok(())
}

/// Predicted class names for every row.
pub fn predict(model: &SavedModel, features: &FeatureSet) -> Result<Vec<String>> {
    check_parent(model, &features.meta.config_hash, "classifier")?;
    let classes = model
        .info
        .classes
        .as_ref()
        .ok_or_else(|| Error::Incompatible("model carries no class names".into()))?;
    let x = features.to_matrix();
    x.iter_rows()
        .map(|row| {
            let id = match &model.model {
                Model::Svm(m) => svm_predict(row, m)?,
                Model::Ncm(m) => ncm_predict(row, m)?,
                Model::Mlp(m) => m.predict(row)?,
                other => {
                    return Err(Error::Incompatible(format!("{} models do not predict classes", other.kind().name())));
                }
            };
            classes
                .get(id)
                .cloned()
                .ok_or_else(|| Error::Incompatible(format!("class id {id} has no name")))
        })
        .collect()
}

/// Hidden-layer activations of a trained MLP for every row of a feature set,
/// as a new feature set.
pub fn activation_features(mlp: &SavedModel, features: &FeatureSet, layer: usize) -> Result<FeatureSet> {
    let Model::Mlp(m) = &mlp.model else {
        return Err(Error::Incompatible("mlp model expected".into()));
    };
    check_parent(mlp, &features.meta.config_hash, "mlp")?;
    let x = features.to_matrix();
    let rows = x
        .iter_rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| m.extract_activation(r, layer))
        .collect::<Result<Vec<_>>>()?;
    let dim = m.hidden_width(layer);
    let matrix = if rows.is_empty() { Matrix::zeros(0, dim) } else { Matrix::from_rows(&rows)? };
    let meta = FeatureMeta {
        descriptor: "hybrid-act".into(),
        config_hash: config_hash(&json!({
            "descriptor": "hybrid-act",
            "base": features.meta.config_hash,
            "mlp": mlp.info.config_hash,
            "layer": layer,
        })),
    };
    FeatureSet::from_matrix(features.ids().to_vec(), &matrix, features.labels().map(<[String]>::to_vec), meta)
}
