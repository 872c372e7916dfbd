//! Experiment orchestration behind the command-line tool: pretraining on
//! the source task, federated runs with CSV metrics, and evaluation of a
//! saved model.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data;
use crate::error::{FatError, Result};
use crate::federation::{self, RunHistory};
use crate::model::{self, ModelParams};
use crate::trainer::{self, SiloDataset};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT_FILE: &str = "final.ckpt";
pub const CONFIG_COPY_FILE: &str = "config.toml";

/// File name of silo `k` in an exported dataset directory.
pub fn silo_file_name(silo_id: usize) -> String {
    format!("silo_{silo_id}.fatdata")
}

pub const TEST_SET_FILE: &str = "test.fatdata";
pub const SOURCE_SET_FILE: &str = "source.fatdata";

/// Trains a fresh model centrally on the source task.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let spec = cfg.dataset_spec();
    let source = data::generate_pretrain_source(&spec)?;
    let mut params = model::init_model(cfg.model, cfg.init_seed())?;
    for round in 0..cfg.pretrain.rounds {
        let local = cfg.local.with_seed(cfg.pretrain_seed(round));
        params = trainer::supervised_training(&source, &params, &local)?.params;
    }
    let provenance = format!(
        "source=rectangles samples={} rounds={} epochs={} seed={}",
        source.len(),
        cfg.pretrain.rounds,
        cfg.local.epochs,
        cfg.experiment.seed
    );
    Ok(Checkpoint { params, provenance })
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<Checkpoint> {
    let ckpt = pretrain(cfg)?;
    checkpoint::save_checkpoint(out, &ckpt.params, &ckpt.provenance)?;
    Ok(ckpt)
}

/// The warm-start checkpoint if one is configured, otherwise a seeded
/// random initialization.
pub fn initial_model(cfg: &ExperimentConfig) -> Result<ModelParams> {
    match &cfg.experiment.pretrain_checkpoint {
        Some(path) => Ok(checkpoint::load_checkpoint_for(path, cfg.model)?.params),
        None => model::init_model(cfg.model, cfg.init_seed()),
    }
}

/// Training silos and test set: generated from the spec, or read from
/// `data_dir` when given (see [`cmd_export_data`]).
pub fn load_data(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<(Vec<SiloDataset>, SiloDataset)> {
    let spec = cfg.dataset_spec();
    match data_dir {
        None => Ok((data::generate_silos(&spec)?, data::generate_test_set(&spec)?)),
        Some(dir) => {
            let silos = (0..spec.n_silos)
                .map(|k| checkpoint::load_dataset(&dir.join(silo_file_name(k))))
                .collect::<Result<Vec<_>>>()?;
            let test = checkpoint::load_dataset(&dir.join(TEST_SET_FILE))?;
            Ok((silos, test))
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, data_dir: Option<&Path>, jobs: usize) -> Result<RunHistory> {
    cfg.validate()?;
    let (silos, test) = load_data(cfg, data_dir)?;
    let theta0 = initial_model(cfg)?;
    federation::run(&cfg.federation(), &silos, &theta0, &test, jobs)
}

pub fn csv_header(n_classes: usize) -> String {
    let mut h = String::from("round,phase,mode,seed");
    for c in 0..n_classes {
        write!(h, ",dice_class{c}").expect("write to string");
    }
    h.push_str(",mean_train_loss,wall_ms");
    h
}

/// One row per evaluation. `wall_ms` is written as 0 unless the config
/// asks for measured times.
pub fn metrics_csv(cfg: &ExperimentConfig, history: &RunHistory) -> String {
    let mut out = csv_header(cfg.model.n_classes);
    out.push('\n');
    for r in &history.records {
        write!(out, "{},{},{},{}", r.round, r.phase, cfg.experiment.mode, cfg.experiment.seed).expect("write");
        for d in &r.dice {
            write!(out, ",{d}").expect("write");
        }
        let wall = if cfg.experiment.record_wall_time { r.wall_ms } else { 0 };
        writeln!(out, ",{},{wall}", r.mean_train_loss).expect("write");
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub history: RunHistory,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Runs the configured experiment and writes `metrics.csv`, `final.ckpt`
/// and a copy of the config into `out_dir`.
pub fn cmd_run(cfg: &ExperimentConfig, out_dir: &Path, data_dir: Option<&Path>, jobs: usize) -> Result<RunOutputs> {
    let history = run_experiment(cfg, data_dir, jobs)?;
    let expected_evals = (0..cfg.experiment.total_rounds)
        .filter(|t| (t + 1) % cfg.experiment.eval_every == 0 || t + 1 == cfg.experiment.total_rounds)
        .count();
    if history.records.len() != expected_evals || history.final_params.descriptor() != cfg.model {
        return Err(FatError::InvalidArgument("run history is inconsistent with the config".into()));
    }
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    fs::write(&metrics_path, metrics_csv(cfg, &history))?;
    let checkpoint_path = out_dir.join(FINAL_CHECKPOINT_FILE);
    let provenance = format!(
        "run mode={} rounds={} seed={}",
        cfg.experiment.mode, cfg.experiment.total_rounds, cfg.experiment.seed
    );
    checkpoint::save_checkpoint(&checkpoint_path, &history.final_params, &provenance)?;
    cfg.save(&out_dir.join(CONFIG_COPY_FILE))?;
    Ok(RunOutputs {
        history,
        metrics_path,
        checkpoint_path,
    })
}

/// Per-class Dice of a saved model.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub dice: Vec<f64>,
    pub n_samples: usize,
}

impl DiceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,dice\n");
        for (c, d) in self.dice.iter().enumerate() {
            writeln!(out, "{c},{d}").expect("write");
        }
        out
    }
}

/// Evaluates a checkpoint on the configured test set, or on a dataset file.
pub fn cmd_evaluate(ckpt: &Path, cfg: &ExperimentConfig, dataset: Option<&Path>) -> Result<DiceReport> {
    cfg.validate()?;
    let params = checkpoint::load_checkpoint_for(ckpt, cfg.model)?.params;
    let test = match dataset {
        Some(p) => checkpoint::load_dataset(p)?,
        None => data::generate_test_set(&cfg.dataset_spec())?,
    };
    Ok(DiceReport {
        dice: federation::evaluate(&params, &test)?,
        n_samples: test.len(),
    })
}

/// Writes every training silo, the test set and the pretraining source.
pub fn cmd_export_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let spec = cfg.dataset_spec();
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for silo in data::generate_silos(&spec)? {
        let p = out_dir.join(silo_file_name(silo.silo_id()));
        checkpoint::save_dataset(&p, &silo)?;
        written.push(p);
    }
    for (name, set) in [
        (TEST_SET_FILE, data::generate_test_set(&spec)?),
        (SOURCE_SET_FILE, data::generate_pretrain_source(&spec)?),
    ] {
        let p = out_dir.join(name);
        checkpoint::save_dataset(&p, &set)?;
        written.push(p);
    }
    Ok(written)
}
