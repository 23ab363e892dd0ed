//! The `merge` subcommand: recipe file in, container plus manifest out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use paretomerge::merge::{
    block_wise_merge, decision_vector_to_weights, merge_model_level, BlockWeights, MergeRecipe,
    Strategy, WeightMode,
};
use paretomerge::partition::PartitionReport;
use paretomerge::tensor_store::{file_sha256, infer_layer_index, load_tensor_map, save_tensor_map};
use paretomerge::{Error, Result};

/// Recipe file. Model-level strategies need `base`; `block-wise` needs the
/// `block_wise` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeJob {
    pub models: Vec<PathBuf>,
    #[serde(default)]
    pub base: Option<PathBuf>,
    #[serde(flatten)]
    pub recipe: MergeRecipe,
    #[serde(default)]
    pub block_wise: Option<BlockWiseSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockWiseSpec {
    /// A `partition.json` written by the `partition` subcommand.
    pub partition: PathBuf,
    #[serde(default = "default_pattern")]
    pub layer_pattern: String,
    /// Two-model decision vector; alternative to `weights`.
    #[serde(default)]
    pub x: Option<Vec<f64>>,
    /// Per-model, per-block weights.
    #[serde(default)]
    pub weights: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub mode: WeightMode,
}

fn default_pattern() -> String {
    "layers.{n}.".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeManifest {
    pub recipe: MergeRecipe,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<BlockWeights>,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub output: FileDigest,
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        dir.join(p)
    } else {
        p.to_path_buf()
    }
}

fn digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: file_sha256(path)?,
    })
}

pub fn run(recipe_path: &Path, out: &Path, seed: Option<u64>) -> Result<MergeManifest> {
    let text = std::fs::read_to_string(recipe_path).map_err(|e| Error::Io {
        path: recipe_path.to_path_buf(),
        source: e,
    })?;
    let mut job: MergeJob = serde_json::from_str(&text)?;
    if let Some(s) = seed {
        job.recipe.seed = s;
    }
    let dir = recipe_path.parent().unwrap_or(Path::new("."));
    let model_paths: Vec<PathBuf> = job.models.iter().map(|p| resolve(dir, p)).collect();
    let base_path = job.base.as_ref().map(|p| resolve(dir, p));
    let models = model_paths
        .iter()
        .map(load_tensor_map)
        .collect::<Result<Vec<_>>>()?;
    let base = base_path.as_ref().map(load_tensor_map).transpose()?;
    let mut inputs = model_paths
        .iter()
        .map(|p| digest(p))
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = &base_path {
        inputs.push(digest(p)?);
    }

    let (merged, weights) = if job.recipe.strategy == Strategy::BlockWise {
        let spec = job.block_wise.as_ref().ok_or_else(|| {
            Error::Config("strategy block-wise needs a `block_wise` section".into())
        })?;
        let part_path = resolve(dir, &spec.partition);
        let part_text = std::fs::read_to_string(&part_path).map_err(|e| Error::Io {
            path: part_path.clone(),
            source: e,
        })?;
        let partition = serde_json::from_str::<PartitionReport>(&part_text)?.partition();
        inputs.push(digest(&part_path)?);
        let first = models
            .first()
            .ok_or_else(|| Error::Arity("no models to merge".into()))?;
        let index = infer_layer_index(first, &spec.layer_pattern)?;
        let n_blocks = partition.num_decision_blocks();
        let weights = match (&spec.x, &spec.weights) {
            (Some(x), None) => decision_vector_to_weights(x, n_blocks)?,
            (None, Some(w)) => BlockWeights::new(w.clone(), spec.mode),
            _ => {
                return Err(Error::Config(
                    "give exactly one of `x` and `weights`".into(),
                ))
            }
        };
        let merged = block_wise_merge(&models, base.as_ref(), &partition, &index, &weights)?;
        (merged, Some(weights))
    } else {
        let base = base.ok_or_else(|| {
            Error::Config(format!(
                "strategy {} needs a base model",
                job.recipe.strategy
            ))
        })?;
        (merge_model_level(&models, &base, &job.recipe)?, None)
    };

    save_tensor_map(&merged, out)?;
    let manifest = MergeManifest {
        seed: job.recipe.seed,
        recipe: job.recipe,
        weights,
        inputs,
        output: digest(out)?,
    };
    let manifest_path = out.with_file_name("merge_manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    std::fs::write(&manifest_path, bytes).map_err(|e| Error::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    Ok(manifest)
}
