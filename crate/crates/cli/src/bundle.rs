//! On-disk bundles: the input model manifest, the allocation plan and the
//! factor files of an adapted model.

use std::io::Write;
use std::path::{Path, PathBuf};

use rana_core::adapters::{Activation, AdaptedLinear, MlpWeights, RanaMlp, RankAdaptedLinear, RankMasker};
use rana_core::allocation::{GridCandidate, LayerAllocation, LineCandidate, MlpAllocation};
use rana_core::decomposition::{CalibrationSet, RankDecomposition};
use rana_core::maskers::{BMasker, NeuronThresholdMasker, SigmoidMlpMasker, SigmoidParams};
use rana_core::Matrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::tensor_file::{self, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLAN_FILE: &str = "plan.json";

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("plain data serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Json { path: path.to_path_buf(), message: e.to_string() })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        name: String,
        weight: String,
        calib: String,
    },
    Mlp {
        name: String,
        up: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gate: Option<String>,
        down: String,
        activation: Activation,
        calib: String,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Linear { name, .. } | LayerSpec::Mlp { name, .. } => name,
        }
    }

    pub fn calib(&self) -> &str {
        match self {
            LayerSpec::Linear { calib, .. } | LayerSpec::Mlp { calib, .. } => calib,
        }
    }

    fn files(&self) -> Vec<&str> {
        match self {
            LayerSpec::Linear { weight, calib, .. } => vec![weight, calib],
            LayerSpec::Mlp { up, gate, down, calib, .. } => {
                let mut v = vec![up.as_str()];
                v.extend(gate.as_deref());
                v.extend([down.as_str(), calib.as_str()]);
                v
            }
        }
    }
}

/// `manifest.json` of an input model bundle. File names are relative to the bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub schema_version: u32,
    pub layers: Vec<LayerSpec>,
}

pub enum LoadedLayer {
    Linear { weight: Matrix },
    Mlp { weights: MlpWeights },
}

pub struct ModelBundle {
    pub dir: PathBuf,
    pub manifest: ModelManifest,
}

impl ModelBundle {
    pub fn open(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(CliError::Missing { what: "model bundle", path });
        }
        let manifest: ModelManifest = read_json(&path)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(CliError::Json { path, message: format!("unsupported schema_version {}", manifest.schema_version) });
        }
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn load_layer(&self, spec: &LayerSpec) -> CliResult<LoadedLayer> {
        let read = |f: &str| tensor_file::read_matrix(&self.dir.join(f));
        Ok(match spec {
            LayerSpec::Linear { weight, .. } => LoadedLayer::Linear { weight: read(weight)? },
            LayerSpec::Mlp { up, gate, down, activation, .. } => {
                let gate = gate.as_deref().map(read).transpose()?;
                let weights = MlpWeights::new(read(up)?, gate, read(down)?, *activation)
                    .map_err(|e| CliError::Shape(format!("layer {}: {e}", spec.name())))?;
                LoadedLayer::Mlp { weights }
            }
        })
    }

    pub fn load_calib(&self, spec: &LayerSpec) -> CliResult<CalibrationSet> {
        Ok(CalibrationSet::new(tensor_file::read_matrix(&self.dir.join(spec.calib()))?))
    }

    /// Hash over the manifest and every referenced file, in manifest order.
    pub fn digest(&self) -> CliResult<String> {
        let mut h = Sha256::new();
        let manifest = self.dir.join(MANIFEST_FILE);
        h.update(std::fs::read(&manifest).map_err(|e| CliError::io(&manifest, e))?);
        for spec in &self.manifest.layers {
            for f in spec.files() {
                let p = self.dir.join(f);
                h.update(std::fs::read(&p).map_err(|e| CliError::io(&p, e))?);
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Settings that determine a compression run. Its hash is stamped on every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub budget: f64,
    pub grid_step: f64,
    pub masker: MaskerChoice,
    pub sigmoid_inner: usize,
    pub train_fraction: f64,
    pub model_digest: String,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("plain data serializes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskerChoice {
    B,
    Sigmoid,
}

/// Factor files of one rank-adapted linear, relative to the adapted bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorFiles {
    pub a: String,
    pub b: String,
    pub s: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmoid: Option<SigmoidFiles>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidFiles {
    pub c: String,
    pub d: String,
    pub bias: String,
    pub logit_cutoff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerPlan {
    Linear {
        name: String,
        allocation: LayerAllocation,
        factors: Option<FactorFiles>,
        search_log: Vec<LineCandidate>,
    },
    Mlp {
        name: String,
        allocation: MlpAllocation,
        up: Option<FactorFiles>,
        gate: Option<FactorFiles>,
        search_log: Vec<GridCandidate>,
        uniform_error: Option<f64>,
    },
}

impl LayerPlan {
    pub fn name(&self) -> &str {
        match self {
            LayerPlan::Linear { name, .. } | LayerPlan::Mlp { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub dense_flops: f64,
    pub achieved_flops: f64,
    pub compression: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub layers: Vec<LayerPlan>,
    pub summary: PlanSummary,
}

/// Writes the factors of `layer` under `dir` with prefix `stem`.
pub fn save_factors(dir: &Path, stem: &str, layer: &RankAdaptedLinear) -> CliResult<FactorFiles> {
    let dec = layer.decomposition();
    let name = |part: &str| format!("{stem}.{part}.rana");
    let files = FactorFiles { a: name("A"), b: name("B"), s: name("S"), sigmoid: None };
    tensor_file::write_matrix(&dir.join(&files.a), dec.a())?;
    tensor_file::write_matrix(&dir.join(&files.b), dec.b())?;
    tensor_file::write_tensor(&dir.join(&files.s), &Tensor::from_vector(dec.singular_values()))?;
    let sigmoid = match layer.masker() {
        RankMasker::Sigmoid(m) => {
            let s = SigmoidFiles { c: name("mask_c"), d: name("mask_d"), bias: name("mask_bias"), logit_cutoff: m.logit_cutoff() };
            tensor_file::write_matrix(&dir.join(&s.c), &m.params.c)?;
            tensor_file::write_matrix(&dir.join(&s.d), &m.params.d)?;
            tensor_file::write_tensor(&dir.join(&s.bias), &Tensor::from_vector(&m.params.bias))?;
            Some(s)
        }
        _ => None,
    };
    Ok(FactorFiles { sigmoid, ..files })
}

pub fn load_rank_layer(dir: &Path, weight: &Matrix, files: &FactorFiles, alloc: &LayerAllocation) -> CliResult<RankAdaptedLinear> {
    let a = tensor_file::read_matrix(&dir.join(&files.a))?;
    let b = tensor_file::read_matrix(&dir.join(&files.b))?;
    let s = tensor_file::read_vector(&dir.join(&files.s))?;
    let dec = RankDecomposition::from_factors(weight.clone(), a, b, s)?;
    let masker = match &files.sigmoid {
        Some(sf) => {
            let params = SigmoidParams {
                c: tensor_file::read_matrix(&dir.join(&sf.c))?,
                d: tensor_file::read_matrix(&dir.join(&sf.d))?,
                bias: tensor_file::read_vector(&dir.join(&sf.bias))?,
            };
            RankMasker::Sigmoid(SigmoidMlpMasker::from_logit_cutoff(params, sf.logit_cutoff)?)
        }
        None => RankMasker::B(BMasker {
            threshold: alloc.threshold,
            target_active: alloc.target_expected_active,
            calibrated_mean_active: alloc.calibrated_mean_active,
        }),
    };
    Ok(RankAdaptedLinear::new(dec, masker)?)
}

fn load_adapted_linear(dir: &Path, weight: &Matrix, files: &Option<FactorFiles>, alloc: &LayerAllocation) -> CliResult<AdaptedLinear> {
    Ok(match files {
        Some(f) => AdaptedLinear::Rank(load_rank_layer(dir, weight, f, alloc)?),
        None => AdaptedLinear::Dense(weight.clone()),
    })
}

/// Rebuilds the adapted form of one layer from its plan entry.
pub fn load_adapted(dir: &Path, plan: &LayerPlan, layer: &LoadedLayer) -> CliResult<Box<dyn rana_core::adapters::Forward>> {
    match (plan, layer) {
        (LayerPlan::Linear { allocation, factors, .. }, LoadedLayer::Linear { weight }) => {
            Ok(Box::new(load_adapted_linear(dir, weight, factors, allocation)?))
        }
        (LayerPlan::Mlp { allocation, up, gate, .. }, LoadedLayer::Mlp { weights }) => {
            let up = load_adapted_linear(dir, &weights.up, up, &allocation.up)?;
            let gate = match (&weights.gate, &allocation.gate) {
                (Some(w), Some(a)) => Some(load_adapted_linear(dir, w, gate, a)?),
                _ => None,
            };
            let down = &allocation.down;
            let masker = down.target_active.map(|t| NeuronThresholdMasker {
                threshold: down.threshold,
                norms: weights.down.column_norms(),
                target_active: t,
                calibrated_mean_active: down.calibrated_mean_active,
            });
            Ok(Box::new(RanaMlp::new(up, gate, weights.down.clone(), masker, weights.activation)?))
        }
        _ => Err(CliError::Shape(format!("plan entry {} does not match the model layer type", plan.name()))),
    }
}

pub fn open_plan(adapted: &Path) -> CliResult<AllocationPlan> {
    let path = adapted.join(PLAN_FILE);
    if !path.is_file() {
        return Err(CliError::Missing { what: "adapted bundle", path });
    }
    let plan: AllocationPlan = read_json(&path)?;
    if plan.schema_version != SCHEMA_VERSION {
        return Err(CliError::Json { path, message: format!("unsupported schema_version {}", plan.schema_version) });
    }
    Ok(plan)
}
