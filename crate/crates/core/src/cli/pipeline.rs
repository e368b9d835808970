use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curvature::{accumulate, prepare_inverse, read_factors, write_factors, DampedInverse};
use crate::error::{Error, Result};
use crate::finetune::{train, TrainHistory};
use crate::gradfeat::{batch_extract, GradCache};
use crate::influence::{influence_matrix, read_matrix, write_matrix, InfluenceMatrix, SeedSet};
use crate::numkit::Rng;
use crate::select::{
    diversify, quality_filter_rows, scaled_k_clusters, scaled_proj_dim, PoolEntry,
    SelectionConfigEcho, SelectionReport,
};
use crate::toylm::{load_params, save_params, Params};

use super::config::{Count, PipelineConfig};
use super::data::{load_records, read_json, write_json, write_lines, Record};

/// Pipeline stages in execution order.
pub const STAGES: [&str; 6] = ["finetune", "grads", "curvature", "influence", "filter", "diversify"];

const INIT_STREAM: u64 = 11;
const DIVERSIFY_STREAM: u64 = 12;

pub fn stage_index(name: &str) -> Result<usize> {
    STAGES
        .iter()
        .position(|s| *s == name)
        .ok_or_else(|| Error::Config(format!("unknown stage `{name}`; stages are {}", STAGES.join(", "))))
}

/// Artifact locations inside the output directory.
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
    fn meta(&self, stage: &str) -> PathBuf {
        self.dir.join("cache").join(format!("{stage}.json"))
    }
    pub fn model(&self) -> PathBuf {
        self.path("model.bin")
    }
    pub fn selected(&self) -> PathBuf {
        self.path("selected.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.path("report.json")
    }
    pub fn influence(&self) -> PathBuf {
        self.path("influence.bin")
    }
}

#[derive(Serialize, Deserialize)]
struct StageMeta {
    stage: String,
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct QualityPass {
    rows: Vec<usize>,
    ids: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn hash_of<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(value)?.as_bytes()))
}

/// Whether a stage was recomputed or reused.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub cached: bool,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub stages: Vec<StageLog>,
    /// Present when the run reached the diversify stage.
    pub report: Option<SelectionReport>,
}

struct Runner {
    art: Artifacts,
    resume: Option<usize>,
    log: Vec<StageLog>,
}

impl Runner {
    fn check_meta(&self, stage: &str, hash: &str) -> std::result::Result<(), String> {
        let path = self.art.meta(stage);
        if !path.exists() {
            return Err("no cached artifacts".into());
        }
        let meta: StageMeta = read_json(&path).map_err(|e| e.to_string())?;
        if meta.config_hash != hash {
            return Err(format!(
                "config hash {} does not match cached {}",
                &hash[..12],
                &meta.config_hash[..meta.config_hash.len().min(12)]
            ));
        }
        Ok(())
    }

    /// Reuses a stage whose cached hash matches, otherwise recomputes it. With
    /// a resume point, stages before it must come from cache and stages from
    /// it onwards are always recomputed.
    fn run<T>(
        &mut self,
        stage: &str,
        hash: &str,
        load: impl FnOnce(&Artifacts) -> Result<T>,
        compute: impl FnOnce(&Artifacts) -> Result<T>,
    ) -> Result<T> {
        let idx = stage_index(stage)?;
        let forced = self.resume.is_some_and(|r| idx >= r);
        if !forced {
            let cached = self
                .check_meta(stage, hash)
                .and_then(|()| load(&self.art).map_err(|e| e.to_string()));
            match cached {
                Ok(v) => {
                    self.log.push(StageLog {
                        stage: stage.into(),
                        cached: true,
                        config_hash: hash.into(),
                    });
                    return Ok(v);
                }
                Err(reason) if self.resume.is_some() => {
                    return Err(Error::Cache {
                        stage: stage.into(),
                        reason,
                    })
                }
                Err(_) => {}
            }
        }
        let v = compute(&self.art).map_err(|e| e.in_stage(stage))?;
        write_json(
            &self.art.meta(stage),
            &StageMeta {
                stage: stage.into(),
                config_hash: hash.into(),
            },
        )?;
        self.log.push(StageLog {
            stage: stage.into(),
            cached: false,
            config_hash: hash.into(),
        });
        Ok(v)
    }
}

fn load_seeds(cfg: &PipelineConfig) -> Result<Vec<Record>> {
    let mut seeds = load_records(&cfg.data.seeds)?;
    let want = cfg.influence.seed_set_size;
    if seeds.len() < want {
        return Err(Error::Config(format!(
            "seed_set_size is {want} but {} holds only {} examples",
            cfg.data.seeds.display(),
            seeds.len()
        )));
    }
    seeds.truncate(want);
    Ok(seeds)
}

/// Runs the selection pipeline through stage `until`.
///
/// Every stage records a hash of the configuration it depends on (chained from
/// upstream stages and input file contents). Without `resume`, stages whose
/// cached hash matches are reused and the rest recomputed; with `resume`,
/// earlier stages must load from a matching cache or the run fails with a
/// cache error.
pub fn cmd_pipeline(cfg: &PipelineConfig, resume: Option<&str>, until: &str) -> Result<PipelineOutcome> {
    let resume = resume.map(stage_index).transpose()?;
    let until = stage_index(until)?;
    if let Some(r) = resume {
        if r > until {
            return Err(Error::Config(format!(
                "resume stage `{}` comes after the last requested stage `{}`",
                STAGES[r], STAGES[until]
            )));
        }
    }
    std::fs::create_dir_all(cfg.out.join("cache")).map_err(|e| Error::io(&cfg.out, e))?;
    let mut runner = Runner {
        art: Artifacts::new(&cfg.out),
        resume,
        log: Vec::new(),
    };
    let done = |runner: Runner| {
        let text: Vec<String> = runner
            .log
            .iter()
            .map(|l| format!("{} {}", l.stage, if l.cached { "cached" } else { "computed" }))
            .collect();
        write_lines(&runner.art.path("pipeline.log"), &text)?;
        Ok::<_, Error>(runner.log)
    };

    let candidates = load_records(&cfg.data.candidates)?;
    let cand_examples: Vec<_> = candidates.iter().map(|r| r.example.clone()).collect();

    // finetune
    let ft_hash = hash_of(&(
        "finetune",
        &cfg.model,
        &cfg.train,
        cfg.seed,
        file_hash(&cfg.data.candidates)?,
        file_hash(&cfg.data.valid)?,
    ))?;
    let params: Params = runner.run(
        "finetune",
        &ft_hash,
        |a| load_params(&a.model()),
        |a| {
            let valid: Vec<_> = load_records(&cfg.data.valid)?
                .into_iter()
                .map(|r| r.example)
                .collect();
            let init = Params::init(cfg.model, &mut Rng::new(cfg.seed, INIT_STREAM))?;
            let (params, history): (Params, TrainHistory) =
                train(&init, &cand_examples, &valid, &cfg.train)?;
            save_params(&params, &a.model())?;
            write_json(&a.path("finetune_history.json"), &history)?;
            Ok(params)
        },
    )?;
    if until == 0 {
        return Ok(PipelineOutcome {
            stages: done(runner)?,
            report: None,
        });
    }

    // grads
    let grads_hash = hash_of(&(
        "grads",
        &ft_hash,
        &cfg.influence.selector,
        cfg.influence.seed_set_size,
        file_hash(&cfg.data.seeds)?,
    ))?;
    let (seed_cache, cand_cache): (GradCache, GradCache) = runner.run(
        "grads",
        &grads_hash,
        |a| Ok((GradCache::read(&a.path("seed_grads.bin"))?, GradCache::read(&a.path("cand_grads.bin"))?)),
        |a| {
            let seeds: Vec<_> = load_seeds(cfg)?.into_iter().map(|r| r.example).collect();
            let s = batch_extract(&params, &seeds, &cfg.influence.selector, &a.path("seed_grads.bin"))?;
            let c = batch_extract(&params, &cand_examples, &cfg.influence.selector, &a.path("cand_grads.bin"))?;
            Ok((s, c))
        },
    )?;
    if until == 1 {
        return Ok(PipelineOutcome {
            stages: done(runner)?,
            report: None,
        });
    }

    // curvature
    let curv_hash = hash_of(&("curvature", &ft_hash, &cfg.influence.selector))?;
    let factors = runner.run(
        "curvature",
        &curv_hash,
        |a| read_factors(&a.path("factors.bin")),
        |a| {
            let f = accumulate(&cand_examples, &params, &cfg.influence.selector)?;
            write_factors(&f, &a.path("factors.bin"))?;
            Ok(f)
        },
    )?;
    if until == 2 {
        return Ok(PipelineOutcome {
            stages: done(runner)?,
            report: None,
        });
    }

    // influence
    let inf_hash = hash_of(&("influence", &grads_hash, &curv_hash, cfg.influence.lambda))?;
    let matrix: InfluenceMatrix = runner.run(
        "influence",
        &inf_hash,
        |a| {
            let (m, embedded) = read_matrix(&a.influence())?;
            if embedded.as_deref() != Some(inf_hash.as_str()) {
                return Err(Error::Cache {
                    stage: "influence".into(),
                    reason: "matrix header carries a different config hash".into(),
                });
            }
            Ok(m)
        },
        |a| {
            let inv: DampedInverse = prepare_inverse(&factors, cfg.influence.lambda)?;
            let m = influence_matrix(&inv, &SeedSet::from_cache(&seed_cache)?, &cand_cache)?;
            write_matrix(&m, &a.influence(), Some(&inf_hash))?;
            Ok(m)
        },
    )?;
    if until == 3 {
        return Ok(PipelineOutcome {
            stages: done(runner)?,
            report: None,
        });
    }

    // filter
    let filter_hash = hash_of(&("filter", &inf_hash, &cfg.influence.quality, cfg.diversity.n_select))?;
    let pass: QualityPass = runner.run(
        "filter",
        &filter_hash,
        |a| read_json(&a.path("quality.json")),
        |a| {
            let rows = quality_filter_rows(&matrix, &cfg.influence.quality)?;
            if cfg.diversity.n_select > rows.len() {
                return Err(Error::Input(format!(
                    "n_select {} larger than quality-pass pool of {}",
                    cfg.diversity.n_select,
                    rows.len()
                )));
            }
            let ids = rows.iter().map(|&r| matrix.candidate_ids[r].clone()).collect();
            let pass = QualityPass { rows, ids };
            write_json(&a.path("quality.json"), &pass)?;
            Ok(pass)
        },
    )?;
    if until == 4 {
        return Ok(PipelineOutcome {
            stages: done(runner)?,
            report: None,
        });
    }

    // diversify
    let div_hash = hash_of(&("diversify", &filter_hash, &cfg.diversity, cfg.seed))?;
    let report: SelectionReport = runner.run(
        "diversify",
        &div_hash,
        |a| {
            let r: SelectionReport = read_json(&a.report())?;
            if !a.selected().exists() {
                return Err(Error::Input("selected JSONL missing".into()));
            }
            Ok(r)
        },
        |a| {
            let pool: Vec<_> = pass.rows.iter().map(|&r| candidates[r].example.clone()).collect();
            let feats = batch_extract(&params, &pool, &cfg.diversity.selector, &a.path("pool_grads.bin"))?;
            let k = match cfg.diversity.k_clusters {
                Count::Auto => scaled_k_clusters(pool.len()),
                Count::Fixed(k) => k,
            };
            let proj = match cfg.diversity.proj_dim {
                Count::Auto => scaled_proj_dim(feats.dim),
                Count::Fixed(p) => p,
            };
            let d = diversify(
                &feats.features(),
                cfg.diversity.n_select,
                k,
                proj,
                &Rng::new(cfg.seed, DIVERSIFY_STREAM),
            )?;
            let row_of: std::collections::HashMap<&str, usize> = candidates
                .iter()
                .enumerate()
                .map(|(i, r)| (r.example.id.as_str(), i))
                .collect();
            write_lines(
                &a.selected(),
                d.ids.iter().map(|id| candidates[row_of[id.as_str()]].line.as_str()),
            )?;
            let report = SelectionReport {
                quality_pass_ids: pass.ids.clone(),
                pool: pass
                    .ids
                    .iter()
                    .zip(&d.pool_clusters)
                    .map(|(id, &cluster)| PoolEntry {
                        id: id.clone(),
                        cluster,
                    })
                    .collect(),
                selected_ids: d.ids,
                selected_clusters: d.clusters,
                take_counts: d.take_counts,
                config: SelectionConfigEcho {
                    lambda: cfg.influence.lambda,
                    quality: cfg.influence.quality,
                    k_clusters: k,
                    proj_dim: proj,
                    n_select: cfg.diversity.n_select,
                    seed_set_size: cfg.influence.seed_set_size,
                    rng_seed: cfg.seed,
                },
            };
            write_json(&a.report(), &report)?;
            Ok(report)
        },
    )?;
    Ok(PipelineOutcome {
        stages: done(runner)?,
        report: Some(report),
    })
}
