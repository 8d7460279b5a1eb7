//! Run configuration and on-disk artifacts.
//!
//! A run directory holds everything needed to audit or report a run:
//!
//! ```text
//! config.json            effective configuration
//! e_matrix_mae.csv       row t = after domain t, column i = domain i
//! e_matrix_rmse.csv
//! e_matrix_final_*.csv   same, for the last-epoch model of each step
//! loss_log.jsonl         one record per optimizer step
//! val_log.jsonl          one record per epoch
//! instrumentation.json
//! unseen.json            only with a held-out domain
//! checkpoints/step_<t>.bin (+ .json manifest)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_synth::{
    generate_domain, load_dataset, save_dataset, AugmentConfig, DomainDataset, DomainSpec,
};
use crate::error::{Error, Result};
use crate::lifelong::{
    run_joint, DomainScore, DomainSource, EpochRecord, Instrumentation, LifelongRun, LossLogRecord,
    Mode, TrainSettings,
};
use crate::losses::LossConfig;
use crate::metrics::{EvalMatrix, Measure};
use crate::model::{save_checkpoint, OptimizerConfig};

pub const ARCHITECTURE: &str = "tiny-fcn";

/// Network and optimizer block of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: String,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: ARCHITECTURE.into(),
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// One JSON document describing data, schedule and losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub domain_specs: Vec<DomainSpec>,
    pub order: Vec<String>,
    pub mode: Mode,
    pub unseen: Option<String>,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub epochs_per_domain: usize,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    /// Parent of the per-domain dataset directories.
    pub data_dir: PathBuf,
    /// Parent of run directories.
    pub output_dir: PathBuf,
    /// Run directory name; derived from mode and seed when absent.
    pub run_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainSettings::default();
        Self {
            domain_specs: Vec::new(),
            order: Vec::new(),
            mode: Mode::Flcb,
            unseen: None,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            epochs_per_domain: t.epochs_per_domain,
            batch_size: t.batch_size,
            augment: t.augment,
            data_dir: "data".into(),
            output_dir: "runs".into(),
            run_id: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain_specs.is_empty() {
            return Err(Error::Config("domain_specs is empty".into()));
        }
        let names: Vec<&str> = self.domain_specs.iter().map(|s| s.name.as_str()).collect();
        for (i, spec) in self.domain_specs.iter().enumerate() {
            spec.validate()
                .map_err(|e| Error::Config(format!("domain_specs[{i}]: {e}")))?;
            if names[..i].contains(&spec.name.as_str()) {
                return Err(Error::Config(format!(
                    "domain {:?} is declared twice",
                    spec.name
                )));
            }
        }
        if let Some(u) = &self.unseen {
            if !names.contains(&u.as_str()) {
                return Err(Error::Config(format!(
                    "unseen domain {u:?} is not declared"
                )));
            }
        }
        if self.order.is_empty() {
            return Err(Error::Config("order is empty".into()));
        }
        for (i, name) in self.order.iter().enumerate() {
            if !names.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "order names undeclared domain {name:?}"
                )));
            }
            if self.unseen.as_deref() == Some(name.as_str()) {
                return Err(Error::Config(format!(
                    "order includes the unseen domain {name:?}"
                )));
            }
            if self.order[..i].contains(name) {
                return Err(Error::Config(format!("order lists {name:?} twice")));
            }
        }
        if self.model.architecture != ARCHITECTURE {
            return Err(Error::Config(format!(
                "unknown architecture {:?}; only {ARCHITECTURE:?} is available",
                self.model.architecture
            )));
        }
        self.loss
            .validate()
            .map_err(|e| Error::Config(format!("loss: {e}")))?;
        self.settings().validate()
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            epochs_per_domain: self.epochs_per_domain,
            batch_size: self.batch_size,
            augment: self.augment,
            optimizer: self.model.optimizer.clone(),
            seed: self.model.seed,
        }
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-seed{}", self.mode.as_str(), self.model.seed))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_id())
    }

    pub fn domain_dir(&self, name: &str) -> PathBuf {
        self.data_dir.join(name)
    }

    fn spec(&self, name: &str) -> &DomainSpec {
        self.domain_specs
            .iter()
            .find(|s| s.name == name)
            .expect("validated")
    }
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

fn prepare_target(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(dir)? {
        if !force {
            return Err(Error::State(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes every declared domain below `data_dir`.
pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let datasets = cfg
        .domain_specs
        .iter()
        .map(generate_domain)
        .collect::<Result<Vec<_>>>()?;
    prepare_target(&cfg.data_dir, force)?;
    let mut dirs = Vec::new();
    for ds in &datasets {
        let dir = cfg.domain_dir(&ds.spec.name);
        save_dataset(ds, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Everything a finished run leaves behind, before serialization.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub eval: EvalMatrix,
    pub eval_final: EvalMatrix,
    pub log: Vec<LossLogRecord>,
    pub epoch_log: Vec<EpochRecord>,
    pub instr: Instrumentation,
    pub unseen: Option<DomainScore>,
}

fn load_domain(cfg: &RunConfig, name: &str) -> Result<DomainDataset> {
    let ds = load_dataset(&cfg.domain_dir(name))?;
    if &ds.spec != cfg.spec(name) {
        return Err(Error::Config(format!(
            "data for {name:?} was generated from a different spec; rerun gen-data"
        )));
    }
    Ok(ds)
}

fn joint_matrix(names: Vec<String>, scores: &[DomainScore]) -> Result<EvalMatrix> {
    let mut m = EvalMatrix::new(names);
    let mae: Vec<f64> = scores.iter().map(|s| s.mae).collect();
    let rmse: Vec<f64> = scores.iter().map(|s| s.rmse).collect();
    m.push_row(&mae, &rmse)?;
    Ok(m)
}

/// Trains according to `cfg` and writes the run directory.
pub fn train(cfg: &RunConfig, run_dir: &Path, force: bool) -> Result<RunArtifacts> {
    cfg.validate()?;
    for name in cfg.order.iter().chain(&cfg.unseen) {
        let dir = cfg.domain_dir(name);
        if !dir.join("meta.json").is_file() {
            return Err(Error::Config(format!(
                "no dataset for {name:?} at {}; run gen-data first",
                dir.display()
            )));
        }
    }
    prepare_target(run_dir, force)?;
    write(&run_dir.join("config.json"), &cfg.to_json())?;
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let ckpt = |t: usize| ckpt_dir.join(format!("step_{t}.bin"));

    let unseen = cfg
        .unseen
        .as_deref()
        .map(|n| load_domain(cfg, n))
        .transpose()?;
    let artifacts = match cfg.mode {
        Mode::Joint => {
            let data = cfg
                .order
                .iter()
                .map(|n| load_domain(cfg, n))
                .collect::<Result<Vec<_>>>()?;
            let out = run_joint(&data, &cfg.loss, &cfg.settings())?;
            save_checkpoint(&out.model, 1, &ckpt(1))?;
            let unseen = match &unseen {
                Some(ds) => {
                    let s = crate::lifelong::evaluate_seen(&out.model, &[ds.clone().into()])?;
                    s.into_iter().next()
                }
                None => None,
            };
            RunArtifacts {
                eval: joint_matrix(cfg.order.clone(), &out.scores)?,
                eval_final: joint_matrix(cfg.order.clone(), &out.final_scores)?,
                log: out.log,
                epoch_log: out.epoch_log,
                instr: out.instr,
                unseen,
            }
        }
        mode => {
            let sources = cfg
                .order
                .iter()
                .map(|n| {
                    // Validate eagerly so a bad spec fails before any training.
                    load_domain(cfg, n).map(|_| DomainSource::Disk {
                        name: n.clone(),
                        dir: cfg.domain_dir(n),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut run = LifelongRun::new(mode, cfg.loss, cfg.settings(), sources)?;
            run.run_to_end()?;
            for (t, model) in run.checkpoints.iter().enumerate() {
                save_checkpoint(model, t + 1, &ckpt(t + 1))?;
            }
            let unseen = unseen
                .as_ref()
                .map(|ds| run.evaluate_unseen(ds))
                .transpose()?;
            RunArtifacts {
                eval: run.eval,
                eval_final: run.eval_final,
                log: run.log,
                epoch_log: run.epoch_log,
                instr: run.instr,
                unseen,
            }
        }
    };
    write_artifacts(run_dir, &artifacts)?;
    Ok(artifacts)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

fn write_artifacts(dir: &Path, a: &RunArtifacts) -> Result<()> {
    write(&dir.join("e_matrix_mae.csv"), &a.eval.to_csv(Measure::Mae))?;
    write(
        &dir.join("e_matrix_rmse.csv"),
        &a.eval.to_csv(Measure::Rmse),
    )?;
    write(
        &dir.join("e_matrix_final_mae.csv"),
        &a.eval_final.to_csv(Measure::Mae),
    )?;
    write(
        &dir.join("e_matrix_final_rmse.csv"),
        &a.eval_final.to_csv(Measure::Rmse),
    )?;
    write(&dir.join("loss_log.jsonl"), &jsonl(&a.log))?;
    write(&dir.join("val_log.jsonl"), &jsonl(&a.epoch_log))?;
    write(
        &dir.join("instrumentation.json"),
        &serde_json::to_string_pretty(&a.instr).expect("counters serialize"),
    )?;
    if let Some(u) = &a.unseen {
        write(
            &dir.join("unseen.json"),
            &serde_json::to_string_pretty(u).expect("score serializes"),
        )?;
    }
    Ok(())
}

/// Reads `loss_log.jsonl` back.
pub fn read_loss_log(run_dir: &Path) -> Result<Vec<LossLogRecord>> {
    let path = run_dir.join("loss_log.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .map(|(k, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::parse(&path, format!("line {}: {e}", k + 1)))
        })
        .collect()
}
