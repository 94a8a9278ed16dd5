//! Descriptor post-processing pipelines: neuron selection, concatenation,
//! PCA projection and L2 normalization, applied in declared order.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::pca::{project, PcaModel};
use crate::soup::read_checkpoint_file;

/// Smallest row norm accepted by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDecl {
    pub tag: String,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub enum Stage {
    SelectNeurons {
        indices: Vec<usize>,
    },
    /// Joins the declared sources (in declared order) into one set.
    Concat,
    PcaProject {
        model: Arc<PcaModel<f64>>,
        path: Option<PathBuf>,
    },
    L2Normalize,
}

impl Stage {
    fn name(&self) -> &'static str {
        match self {
            Stage::SelectNeurons { .. } => "select",
            Stage::Concat => "concat",
            Stage::PcaProject { .. } => "pca",
            Stage::L2Normalize => "normalize",
        }
    }
}

/// One problem found while chaining stage dimensions.
#[derive(Debug, Clone, PartialEq)]
pub enum ChainViolation {
    DimChain { stage: usize, got: usize, expected: usize },
    MultipleSourcesWithoutConcat,
    MisplacedConcat { stage: usize },
    BadIndices { stage: usize, reason: String },
    NoSources,
}

impl fmt::Display for ChainViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainViolation::DimChain { stage, got, expected } => {
                write!(f, "stage {stage}: dim chain: {got} \u{2260} {expected}")
            }
            ChainViolation::MultipleSourcesWithoutConcat => {
                write!(f, "several sources declared but stage 0 is not concat")
            }
            ChainViolation::MisplacedConcat { stage } => write!(f, "stage {stage}: concat must be the first stage"),
            ChainViolation::BadIndices { stage, reason } => write!(f, "stage {stage}: {reason}"),
            ChainViolation::NoSources => write!(f, "no sources declared"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DescriptorPipeline {
    sources: Vec<SourceDecl>,
    stages: Vec<Stage>,
    output_dim: usize,
}

impl DescriptorPipeline {
    pub fn new(sources: Vec<SourceDecl>, stages: Vec<Stage>) -> Result<Self> {
        let (violations, output_dim) = check_chain(&sources, &stages);
        if !violations.is_empty() {
            let msg: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(Error::Pipeline(msg.join("; ")));
        }
        Ok(Self {
            sources,
            stages,
            output_dim,
        })
    }

    pub fn sources(&self) -> &[SourceDecl] {
        &self.sources
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }
}

/// Walks the stage list and collects every dimension or placement problem.
pub fn check_chain(sources: &[SourceDecl], stages: &[Stage]) -> (Vec<ChainViolation>, usize) {
    let mut out = Vec::new();
    if sources.is_empty() {
        out.push(ChainViolation::NoSources);
        return (out, 0);
    }
    let mut dim = sources[0].dim;
    for (i, stage) in stages.iter().enumerate() {
        match stage {
            Stage::Concat => {
                if i != 0 {
                    out.push(ChainViolation::MisplacedConcat { stage: i });
                }
                dim = sources.iter().map(|s| s.dim).sum();
            }
            Stage::SelectNeurons { indices } => {
                let mut seen = HashSet::new();
                if indices.is_empty() {
                    out.push(ChainViolation::BadIndices {
                        stage: i,
                        reason: "empty index list".into(),
                    });
                }
                if let Some(&bad) = indices.iter().find(|&&j| j >= dim) {
                    out.push(ChainViolation::BadIndices {
                        stage: i,
                        reason: format!("index {bad} out of range for dim {dim}"),
                    });
                }
                if let Some(&dup) = indices.iter().find(|&&j| !seen.insert(j)) {
                    out.push(ChainViolation::BadIndices {
                        stage: i,
                        reason: format!("index {dup} repeated"),
                    });
                }
                dim = indices.len();
            }
            Stage::PcaProject { model, .. } => {
                if model.input_dim() != dim {
                    out.push(ChainViolation::DimChain {
                        stage: i,
                        got: dim,
                        expected: model.input_dim(),
                    });
                }
                dim = model.output_dim();
            }
            Stage::L2Normalize => {}
        }
    }
    if sources.len() > 1 && !matches!(stages.first(), Some(Stage::Concat)) {
        out.push(ChainViolation::MultipleSourcesWithoutConcat);
    }
    (out, dim)
}

/// Runs the stages in order. Sources are matched by id; the output keeps the
/// first source's row order.
pub fn apply_pipeline(p: &DescriptorPipeline, sources: &[EmbeddingSet]) -> Result<EmbeddingSet> {
    if sources.len() != p.sources.len() {
        return Err(Error::Invalid(format!(
            "pipeline declares {} sources, got {}",
            p.sources.len(),
            sources.len()
        )));
    }
    for (decl, set) in p.sources.iter().zip(sources) {
        if decl.dim != set.dim() {
            return Err(Error::Shape(format!(
                "source {:?} declared dim {}, got {}",
                decl.tag,
                decl.dim,
                set.dim()
            )));
        }
    }
    for set in &sources[1..] {
        check_same_ids(&sources[0], set)?;
    }
    let mut current = sources[0].clone();
    for stage in &p.stages {
        current = match stage {
            Stage::Concat => concat_embeddings(sources)?,
            Stage::SelectNeurons { indices } => select_columns(&current, indices)?,
            Stage::PcaProject { model, .. } => project(model, &current)?,
            Stage::L2Normalize => l2_normalize(&current)?,
        };
    }
    Ok(current)
}

fn check_same_ids(first: &EmbeddingSet, other: &EmbeddingSet) -> Result<()> {
    let a: HashSet<&str> = first.ids().iter().map(String::as_str).collect();
    let b: HashSet<&str> = other.ids().iter().map(String::as_str).collect();
    if a == b {
        return Ok(());
    }
    let mut extra: Vec<&str> = b.difference(&a).copied().collect();
    if extra.is_empty() {
        extra = a.difference(&b).copied().collect();
    }
    extra.sort_unstable();
    Err(Error::IdMismatch(extra.join(", ")))
}

/// Horizontal concatenation aligned by id, in list order.
pub fn concat_embeddings(sets: &[EmbeddingSet]) -> Result<EmbeddingSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Invalid("concat of an empty list".into()))?;
    if sets.len() == 1 {
        return Ok(first.clone());
    }
    let mut positions = Vec::with_capacity(sets.len());
    for set in sets {
        check_same_ids(first, set)?;
        let pos: HashMap<&str, usize> = set.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        positions.push(pos);
    }
    let dim: usize = sets.iter().map(EmbeddingSet::dim).sum();
    let mut data = Vec::with_capacity(first.len() * dim);
    for id in first.ids() {
        for (set, pos) in sets.iter().zip(&positions) {
            data.extend_from_slice(set.row(pos[id.as_str()]));
        }
    }
    EmbeddingSet::new(first.ids().to_vec(), dim, data, false)
}

/// Column gather: `out[:, j] = set[:, indices[j]]`.
pub fn select_columns(set: &EmbeddingSet, indices: &[usize]) -> Result<EmbeddingSet> {
    if indices.is_empty() {
        return Err(Error::Invalid("empty neuron selection".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&j| j >= set.dim()) {
        return Err(Error::OutOfRange(format!("neuron {bad} of a {}-dim set", set.dim())));
    }
    let mut data = Vec::with_capacity(set.len() * indices.len());
    for row in set.rows() {
        data.extend(indices.iter().map(|&j| row[j]));
    }
    EmbeddingSet::new(set.ids().to_vec(), indices.len(), data, false)
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let d = set.dim();
    let mut data = set.data().to_vec();
    let bad = data
        .par_chunks_mut(d)
        .enumerate()
        .filter_map(|(i, row)| {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if !(norm > MIN_NORM) {
                return Some(i);
            }
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
            None
        })
        .min();
    if let Some(i) = bad {
        return Err(Error::ZeroNorm {
            id: set.ids()[i].clone(),
        });
    }
    EmbeddingSet::new(set.ids().to_vec(), d, data, true)
}

/// `k` distinct indices from `0..d` by a partial Fisher–Yates shuffle driven
/// by ChaCha8 seeded with `seed`.
pub fn select_random_neurons(d: usize, k: usize, seed: u64) -> Result<Stage> {
    if k > d || k == 0 {
        return Err(Error::OutOfRange(format!("cannot select {k} of {d} neurons")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..d).collect();
    for i in 0..k {
        let j = rng.gen_range(i..d);
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(Stage::SelectNeurons { indices: pool })
}

/// JSON pipeline document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub sources: Vec<SourceDecl>,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StageSpec {
    Select {
        indices: Vec<usize>,
    },
    Concat,
    /// Path to a UCKP file holding `pca.*` tensors; relative paths resolve
    /// against the spec file's directory.
    Pca {
        model: PathBuf,
    },
    Normalize,
}

impl PipelineSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Pipeline(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pipeline spec serializes")
    }
}

/// Resolves model files and validates the stage chain.
pub fn build_pipeline(spec: &PipelineSpec, base_dir: &Path) -> Result<DescriptorPipeline> {
    let mut stages = Vec::with_capacity(spec.stages.len());
    for (i, s) in spec.stages.iter().enumerate() {
        stages.push(match s {
            StageSpec::Select { indices } => Stage::SelectNeurons {
                indices: indices.clone(),
            },
            StageSpec::Concat => Stage::Concat,
            StageSpec::Normalize => Stage::L2Normalize,
            StageSpec::Pca { model } => {
                let path = if model.is_absolute() {
                    model.clone()
                } else {
                    base_dir.join(model)
                };
                if !path.is_file() {
                    return Err(Error::Pipeline(format!(
                        "stage {i}: missing model file {}",
                        path.display()
                    )));
                }
                let ckpt = read_checkpoint_file(&path)?;
                Stage::PcaProject {
                    model: Arc::new(PcaModel::from_checkpoint(&ckpt)?),
                    path: Some(path),
                }
            }
        });
    }
    DescriptorPipeline::new(spec.sources.clone(), stages)
}

/// Reads and builds a pipeline from a JSON file.
pub fn load_pipeline(path: &Path) -> Result<DescriptorPipeline> {
    let text = std::fs::read_to_string(path)?;
    let spec = PipelineSpec::from_json(&text)?;
    build_pipeline(&spec, path.parent().unwrap_or(Path::new(".")))
}

impl fmt::Display for DescriptorPipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<String> = self.sources.iter().map(|s| format!("{}[{}]", s.tag, s.dim)).collect();
        let stages: Vec<&str> = self.stages.iter().map(Stage::name).collect();
        write!(
            f,
            "{} -> {} -> {}",
            tags.join("+"),
            stages.join(" -> "),
            self.output_dim
        )
    }
}
