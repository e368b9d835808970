use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curvature::DEFAULT_DAMPING;
use crate::error::{Error, Result};
use crate::finetune::{Checkpoint, Optimizer, TrainConfig};
use crate::gradfeat::LayerSelector;
use crate::influence::DEFAULT_SEED_SET_SIZE;
use crate::oracle::{LmOracleConfig, NoiseSpec, QuadraticOracleConfig};
use crate::select::{QualityCriterion, DEFAULT_K_CLUSTERS, DEFAULT_PROJ_DIM};
use crate::toylm::ModelConfig;

const SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["seed", "out"]),
    ("data", &["candidates", "seeds", "valid", "test"]),
    (
        "model",
        &["embed_dim", "context_window", "hidden_dim", "num_mlp_layers"],
    ),
    (
        "train",
        &[
            "learning_rate",
            "epochs",
            "batch_size",
            "optimizer",
            "eval_every_steps",
            "checkpoint",
        ],
    ),
    (
        "influence",
        &["lambda", "selector", "quality", "seed_set_size"],
    ),
    (
        "diversity",
        &["k_clusters", "proj_dim", "n_select", "selector"],
    ),
    ("evaluate", &["params", "test", "baseline"]),
    (
        "oracle",
        &[
            "testbed",
            "n_candidates",
            "n_tests",
            "dim",
            "noise",
            "noise_rate",
            "base_epochs",
            "base_learning_rate",
            "learning_rate",
            "steps",
            "epsilon",
            "lambda",
        ],
    ),
    ("corpus", &["n", "noise_rate", "shift", "output"]),
];

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed `key = value` file with `[section]` headers. `#` and `;` start
/// comment lines. Keys outside `[section]`s, unknown sections or keys, and
/// repeated keys are errors.
#[derive(Clone, Debug, Default)]
pub struct Ini {
    base_dir: PathBuf,
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl Ini {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut ini = Ini {
            base_dir: base_dir.to_path_buf(),
            sections: BTreeMap::new(),
        };
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(Error::Config(format!("line {lineno}: unknown section [{name}]")));
                }
                ini.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected `key = value`")))?;
            let key = key.trim();
            let section = current
                .as_ref()
                .ok_or_else(|| Error::Config(format!("line {lineno}: `{key}` outside any section")))?;
            let keys = SCHEMA.iter().find(|(s, _)| s == section).unwrap().1;
            if !keys.contains(&key) {
                return Err(Error::Config(format!(
                    "line {lineno}: unknown key `{key}` in [{section}]"
                )));
            }
            let prev = ini.sections.get_mut(section).unwrap().insert(
                key.to_string(),
                Entry {
                    value: value.trim().to_string(),
                    line: lineno,
                },
            );
            if let Some(p) = prev {
                return Err(Error::Config(format!(
                    "line {lineno}: `{key}` already set on line {}",
                    p.line
                )));
            }
        }
        Ok(ini)
    }

    /// Overrides (or adds) a value, as a command-line flag would.
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections.entry(section.to_string()).or_default().insert(
            key.to_string(),
            Entry {
                value: value.into(),
                line: 0,
            },
        );
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &dir)
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section).and_then(|s| s.get(key))
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.entry(section, key).map(|e| e.value.as_str())
    }

    fn parse_with<T>(
        &self,
        section: &str,
        key: &str,
        f: impl FnOnce(&str) -> std::result::Result<T, String>,
    ) -> Result<Option<T>> {
        match self.entry(section, key) {
            None => Ok(None),
            Some(e) => f(&e.value).map(Some).map_err(|why| {
                Error::Config(format!("line {}: [{section}] {key}: {why}", e.line))
            }),
        }
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.parse_with(section, key, |v| v.parse::<T>().map_err(|e| e.to_string()))
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    /// A path value, resolved against the config file's directory.
    pub fn path(&self, section: &str, key: &str) -> Option<PathBuf> {
        self.raw(section, key).map(|v| self.base_dir.join(v))
    }

    fn selector(&self, section: &str, default: LayerSelector) -> Result<LayerSelector> {
        Ok(self
            .parse_with(section, "selector", parse_selector)?
            .unwrap_or(default))
    }
}

/// `final`, `stride:N`, or a comma-separated list of dense layer indices.
pub fn parse_selector(v: &str) -> std::result::Result<LayerSelector, String> {
    let v = v.trim();
    if v == "final" {
        return Ok(LayerSelector::FinalOnly);
    }
    if let Some(s) = v.strip_prefix("stride:") {
        return s
            .trim()
            .parse()
            .map(LayerSelector::Stride)
            .map_err(|e| format!("bad stride: {e}"));
    }
    v.split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(LayerSelector::Explicit)
        .map_err(|_| format!("expected `final`, `stride:N` or a layer list, got `{v}`"))
}

/// `strict` or `fraction:τ`.
pub fn parse_quality(v: &str) -> std::result::Result<QualityCriterion, String> {
    let v = v.trim();
    if v == "strict" {
        return Ok(QualityCriterion::Strict);
    }
    let tau = v
        .strip_prefix("fraction:")
        .ok_or_else(|| format!("expected `strict` or `fraction:τ`, got `{v}`"))?;
    let tau: f64 = tau.trim().parse().map_err(|e| format!("bad τ: {e}"))?;
    let q = QualityCriterion::Fraction(tau);
    q.validate().map_err(|e| e.to_string())?;
    Ok(q)
}

/// A fixed count, or `auto` to scale with the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Count {
    Auto,
    Fixed(usize),
}

fn parse_count(v: &str) -> std::result::Result<Count, String> {
    if v == "auto" {
        Ok(Count::Auto)
    } else {
        v.parse().map(Count::Fixed).map_err(|e| format!("{e}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub candidates: PathBuf,
    pub seeds: PathBuf,
    pub valid: PathBuf,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceConfig {
    pub lambda: f64,
    pub selector: LayerSelector,
    pub quality: QualityCriterion,
    pub seed_set_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityConfig {
    /// `auto` = min(512, pool / 4).
    pub k_clusters: Count,
    /// `auto` = min(400, feature dim).
    pub proj_dim: Count,
    pub n_select: usize,
    pub selector: LayerSelector,
}

/// Everything one selection run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: DataPaths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub influence: InfluenceConfig,
    pub diversity: DiversityConfig,
    pub seed: u64,
    pub out: PathBuf,
}

pub const DEFAULT_N_SELECT: usize = 1000;

pub fn parse_optimizer(v: &str) -> std::result::Result<Optimizer, String> {
    match v {
        "sgd" => Ok(Optimizer::Sgd),
        "adam" => Ok(Optimizer::Adam),
        _ => Err(format!("expected `sgd` or `adam`, got `{v}`")),
    }
}

fn parse_checkpoint(v: &str) -> std::result::Result<Checkpoint, String> {
    match v {
        "best" => Ok(Checkpoint::Best),
        "last" => Ok(Checkpoint::Last),
        _ => Err(format!("expected `best` or `last`, got `{v}`")),
    }
}

pub fn seed(ini: &Ini) -> Result<u64> {
    ini.get_or("run", "seed", 0)
}

pub fn out_dir(ini: &Ini) -> PathBuf {
    ini.path("run", "out").unwrap_or_else(|| ini.base_dir.join("out"))
}

pub fn model_config(ini: &Ini) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let cfg = ModelConfig {
        embed_dim: ini.get_or("model", "embed_dim", d.embed_dim)?,
        context_window: ini.get_or("model", "context_window", d.context_window)?,
        hidden_dim: ini.get_or("model", "hidden_dim", d.hidden_dim)?,
        num_mlp_layers: ini.get_or("model", "num_mlp_layers", d.num_mlp_layers)?,
        ..d
    };
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

/// Training settings; defaults are the large-model recipe (lr 1e-5, 3 epochs, batch 64, SGD).
pub fn train_config(ini: &Ini, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::large_scale();
    let cfg = TrainConfig {
        learning_rate: ini.get_or("train", "learning_rate", d.learning_rate)?,
        epochs: ini.get_or("train", "epochs", d.epochs)?,
        batch_size: ini.get_or("train", "batch_size", d.batch_size)?,
        eval_every_steps: ini.get_or("train", "eval_every_steps", d.eval_every_steps)?,
        optimizer: ini
            .parse_with("train", "optimizer", parse_optimizer)?
            .unwrap_or(d.optimizer),
        checkpoint: ini
            .parse_with("train", "checkpoint", parse_checkpoint)?
            .unwrap_or(d.checkpoint),
        seed,
    };
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

fn require_path(ini: &Ini, section: &str, key: &str) -> Result<PathBuf> {
    let p = ini
        .path(section, key)
        .ok_or_else(|| Error::Config(format!("[{section}] {key} is required")))?;
    if !p.exists() {
        return Err(Error::Config(format!(
            "[{section}] {key}: {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

impl PipelineConfig {
    pub fn from_ini(ini: &Ini) -> Result<Self> {
        let seed = seed(ini)?;
        let test = match ini.path("data", "test") {
            Some(_) => Some(require_path(ini, "data", "test")?),
            None => None,
        };
        let data = DataPaths {
            candidates: require_path(ini, "data", "candidates")?,
            seeds: require_path(ini, "data", "seeds")?,
            valid: require_path(ini, "data", "valid")?,
            test,
        };
        let lambda: f64 = ini.get_or("influence", "lambda", DEFAULT_DAMPING)?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("[influence] lambda must be positive, got {lambda}")));
        }
        let influence = InfluenceConfig {
            lambda,
            selector: ini.selector("influence", LayerSelector::influence_preset())?,
            quality: ini
                .parse_with("influence", "quality", parse_quality)?
                .unwrap_or_default(),
            seed_set_size: ini.get_or("influence", "seed_set_size", DEFAULT_SEED_SET_SIZE)?,
        };
        if influence.seed_set_size == 0 {
            return Err(Error::Config("[influence] seed_set_size must be at least 1".into()));
        }
        let diversity = DiversityConfig {
            k_clusters: ini
                .parse_with("diversity", "k_clusters", parse_count)?
                .unwrap_or(Count::Fixed(DEFAULT_K_CLUSTERS)),
            proj_dim: ini
                .parse_with("diversity", "proj_dim", parse_count)?
                .unwrap_or(Count::Fixed(DEFAULT_PROJ_DIM)),
            n_select: ini.get_or("diversity", "n_select", DEFAULT_N_SELECT)?,
            selector: ini.selector("diversity", LayerSelector::diversity_preset())?,
        };
        if diversity.n_select == 0 {
            return Err(Error::Config("[diversity] n_select must be at least 1".into()));
        }
        let model = model_config(ini)?;
        influence
            .selector
            .resolve(&model)
            .map_err(|e| Error::Config(format!("[influence] selector: {e}")))?;
        diversity
            .selector
            .resolve(&model)
            .map_err(|e| Error::Config(format!("[diversity] selector: {e}")))?;
        Ok(Self {
            data,
            model,
            train: train_config(ini, seed)?,
            influence,
            diversity,
            seed,
            out: out_dir(ini),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ini(&Ini::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OracleTestbed {
    Quadratic(QuadraticOracleConfig),
    ToyLm(LmOracleConfig),
}

pub fn oracle_config(ini: &Ini) -> Result<OracleTestbed> {
    let seed = seed(ini)?;
    let testbed = ini.raw("oracle", "testbed").unwrap_or("toy_lm");
    let eps: Option<f64> = ini.get("oracle", "epsilon")?;
    match testbed {
        "quadratic" => {
            let d = QuadraticOracleConfig::default();
            Ok(OracleTestbed::Quadratic(QuadraticOracleConfig {
                n_candidates: ini.get_or("oracle", "n_candidates", d.n_candidates)?,
                dim: ini.get_or("oracle", "dim", d.dim)?,
                noise: ini.get_or("oracle", "noise", d.noise)?,
                learning_rate: ini.get_or("oracle", "learning_rate", d.learning_rate)?,
                steps: ini.get_or("oracle", "steps", d.steps)?,
                epsilon: eps,
                lambda: ini.get_or("oracle", "lambda", d.lambda)?,
                seed,
            }))
        }
        "toy_lm" => {
            let d = LmOracleConfig::default();
            Ok(OracleTestbed::ToyLm(LmOracleConfig {
                n_candidates: ini.get_or("oracle", "n_candidates", d.n_candidates)?,
                n_tests: ini.get_or("oracle", "n_tests", d.n_tests)?,
                noise_rate: ini.get_or("oracle", "noise_rate", d.noise_rate)?,
                shift: d.shift,
                base_epochs: ini.get_or("oracle", "base_epochs", d.base_epochs)?,
                base_learning_rate: ini.get_or("oracle", "base_learning_rate", d.base_learning_rate)?,
                learning_rate: ini.get_or("oracle", "learning_rate", d.learning_rate)?,
                steps: ini.get_or("oracle", "steps", d.steps)?,
                epsilon: eps,
                lambda: ini.get("oracle", "lambda")?,
                seed,
            }))
        }
        other => Err(Error::Config(format!(
            "[oracle] testbed must be `quadratic` or `toy_lm`, got `{other}`"
        ))),
    }
}

/// Synthetic corpus request and its output file.
pub fn corpus_config(ini: &Ini) -> Result<(NoiseSpec, PathBuf)> {
    let spec = NoiseSpec {
        n: ini.get_or("corpus", "n", 500)?,
        noise_rate: ini.get_or("corpus", "noise_rate", 0.1)?,
        seed: seed(ini)?,
        shift: ini.get_or("corpus", "shift", 3)?,
    };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let output = ini
        .path("corpus", "output")
        .unwrap_or_else(|| out_dir(ini).join("corpus.jsonl"));
    Ok((spec, output))
}
