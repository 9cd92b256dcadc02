//! Staged training schedules.
//!
//! Supervised runs go through three stages:
//!
//! | stage | trains | loss |
//! |---|---|---|
//! | 1 | F, C | CE |
//! | 2 | F, R | CE + MSE |
//! | 3 | F, C, R | CE + MSE |
//!
//! Semisupervised runs replace stage 1's CE with the flip-consistency loss
//! and drop stage 2. Vanilla runs train F and R on MSE alone.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::TrainError;
use crate::nn::{
    loss_ce, loss_mse_cos, loss_unsupervised, predict_from_heads, Checkpoint, Component, FreezeMask, Graph, Model,
    ModelSpec, NodeId, Optimizer, OptimizerKind,
};
use crate::synth::{Dataset, Image, OrientationSample};
use crate::Orientation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vanilla,
    Supervised,
    Semisupervised,
}

impl FromStr for Mode {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "supervised" => Ok(Mode::Supervised),
            "semisupervised" => Ok(Mode::Semisupervised),
            other => Err(TrainError::Config(format!(
                "unknown mode `{other}` (expected vanilla, supervised or semisupervised)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Vanilla => "vanilla",
            Mode::Supervised => "supervised",
            Mode::Semisupervised => "semisupervised",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Budgets and resolution as published.
    Paper,
    /// Iterations / 100 with 32-pixel images.
    Desk,
}

impl FromStr for Scale {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(TrainError::Config(format!("unknown scale `{other}` (expected paper or desk)"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSet {
    pub ce: bool,
    pub mse: bool,
    pub unsup: bool,
}

impl LossSet {
    /// Loss names joined with `+`, e.g. `CE+MSE`.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.ce {
            parts.push("CE");
        }
        if self.mse {
            parts.push("MSE");
        }
        if self.unsup {
            parts.push("UNSUP");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_id: u8,
    #[serde(with = "freeze_serde")]
    pub freeze: FreezeMask,
    pub losses: LossSet,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub flip_augment: bool,
}

mod freeze_serde {
    use super::FreezeMask;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        train_f: bool,
        train_c: bool,
        train_r: bool,
    }

    pub fn serialize<S: Serializer>(m: &FreezeMask, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            train_f: m.train_f,
            train_c: m.train_c,
            train_r: m.train_r,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<FreezeMask, D::Error> {
        let r = Repr::deserialize(d)?;
        Ok(FreezeMask {
            train_f: r.train_f,
            train_c: r.train_c,
            train_r: r.train_r,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub scale: Scale,
    pub stages: Vec<StagePlan>,
    /// Optimizer state is reset at every stage boundary.
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub image_side: usize,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Mid-stage checkpoint cadence in iterations; 0 writes only stage
    /// boundaries.
    pub checkpoint_every: usize,
    /// Log cadence in iterations; the first and last iteration of every
    /// stage are always logged.
    pub log_every: usize,
    /// Trailing fraction of the dataset held out from training.
    pub holdout_fraction: f64,
    /// Semisupervised stage 3 uses flip-consistency pseudo-labels instead of
    /// true semicircle labels.
    pub pseudo_label_only: bool,
}

const PAPER_ITERS: [usize; 3] = [250_000, 150_000, 100_000];
const PAPER_LR: [f64; 3] = [1e-5, 1e-5, 5e-6];
const PAPER_SIDE: usize = 224;
const DESK_ITERS: [usize; 3] = [2_500, 1_500, 1_000];
const DESK_LR: [f64; 3] = [6e-3, 6e-3, 3e-3];
const DESK_SIDE: usize = 32;
const BATCH: usize = 16;

const ALL_F_C: FreezeMask = FreezeMask {
    train_f: true,
    train_c: true,
    train_r: false,
};
const ALL_F_R: FreezeMask = FreezeMask {
    train_f: true,
    train_c: false,
    train_r: true,
};

/// Published or desk-scale schedule for `mode`.
pub fn default_config(mode: Mode, scale: Scale) -> RunConfig {
    let (iters, lr, side) = match scale {
        Scale::Paper => (PAPER_ITERS, PAPER_LR, PAPER_SIDE),
        Scale::Desk => (DESK_ITERS, DESK_LR, DESK_SIDE),
    };
    let plan = |stage_id: u8, freeze, losses, i: usize| StagePlan {
        stage_id,
        freeze,
        losses,
        iterations: iters[i],
        learning_rate: lr[i],
        batch_size: BATCH,
        flip_augment: true,
    };
    let ce = LossSet {
        ce: true,
        mse: false,
        unsup: false,
    };
    let ce_mse = LossSet {
        ce: true,
        mse: true,
        unsup: false,
    };
    let stages = match mode {
        Mode::Supervised => vec![
            plan(1, ALL_F_C, ce, 0),
            plan(2, ALL_F_R, ce_mse, 1),
            plan(3, FreezeMask::ALL, ce_mse, 2),
        ],
        Mode::Semisupervised => vec![
            plan(
                1,
                ALL_F_C,
                LossSet {
                    ce: false,
                    mse: false,
                    unsup: true,
                },
                0,
            ),
            plan(3, FreezeMask::ALL, ce_mse, 2),
        ],
        Mode::Vanilla => vec![StagePlan {
            iterations: iters.iter().sum(),
            ..plan(
                1,
                ALL_F_R,
                LossSet {
                    ce: false,
                    mse: true,
                    unsup: false,
                },
                0,
            )
        }],
    };
    RunConfig {
        mode,
        scale,
        stages,
        optimizer: OptimizerKind::Adam,
        seed: 7,
        image_side: side,
        dataset: None,
        out_dir: None,
        checkpoint_every: 0,
        log_every: 100,
        holdout_fraction: 0.1,
        pseudo_label_only: false,
    }
}

impl RunConfig {
    /// Checks the stage plans against the schedule of `mode`.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        let ids: Vec<u8> = self.stages.iter().map(|s| s.stage_id).collect();
        let expected: &[u8] = match self.mode {
            Mode::Supervised => &[1, 2, 3],
            Mode::Semisupervised => &[1, 3],
            Mode::Vanilla => &[1],
        };
        if ids != expected {
            return bad(format!("{} mode runs stages {expected:?}, config has {ids:?}", self.mode));
        }
        let reference = default_config(self.mode, self.scale);
        for (s, r) in self.stages.iter().zip(&reference.stages) {
            let mut want_losses = r.losses;
            if self.mode == Mode::Semisupervised && s.stage_id == 3 && self.pseudo_label_only {
                want_losses = LossSet {
                    ce: false,
                    mse: true,
                    unsup: true,
                };
            }
            if s.freeze != r.freeze || s.losses != want_losses {
                return bad(format!(
                    "stage {} must train {} with {}",
                    s.stage_id,
                    describe_mask(r.freeze),
                    want_losses.describe()
                ));
            }
            if s.freeze.is_empty() {
                return bad(format!("stage {} trains no component", s.stage_id));
            }
            if s.batch_size == 0 || (s.losses.unsup && s.batch_size < 2) {
                return bad(format!("stage {} batch size {} is too small", s.stage_id, s.batch_size));
            }
            if !(s.learning_rate.is_finite() && s.learning_rate >= 0.0) {
                return bad(format!("stage {} learning rate {} is invalid", s.stage_id, s.learning_rate));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout fraction {} must lie in [0, 1)", self.holdout_fraction));
        }
        if self.image_side < 16 || self.image_side % 4 != 0 {
            return bad(format!("image side {} must be a multiple of 4 and at least 16", self.image_side));
        }
        Ok(())
    }

    /// Applies the semisupervised pseudo-label switch to the stage-3 losses.
    pub fn set_pseudo_label_only(&mut self, on: bool) {
        self.pseudo_label_only = on;
        if self.mode == Mode::Semisupervised {
            if let Some(s) = self.stages.iter_mut().find(|s| s.stage_id == 3) {
                s.losses = LossSet {
                    ce: !on,
                    mse: true,
                    unsup: on,
                };
            }
        }
    }

    pub fn stage_mut(&mut self, stage_id: u8) -> Result<&mut StagePlan, TrainError> {
        let mode = self.mode;
        self.stages
            .iter_mut()
            .find(|s| s.stage_id == stage_id)
            .ok_or_else(|| TrainError::Config(format!("{mode} mode has no stage {stage_id}")))
    }

    /// Parses the flat `key = value` configuration format. `mode` and `scale`
    /// select the defaults; every other key overrides one field.
    ///
    /// Keys: `mode`, `scale`, `seed`, `optimizer`, `dataset`, `out_dir`, `image_side`,
    /// `batch_size`, `checkpoint_every`, `log_every`, `holdout_fraction`,
    /// `pseudo_label_only`, and per stage `stageN.lr`, `stageN.iters`,
    /// `stageN.batch_size`, `stageN.flip_augment`. `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self, TrainError> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", n + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let find = |key: &str| entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let mode: Mode = find("mode")
            .ok_or_else(|| TrainError::Config("configuration needs a `mode`".into()))?
            .parse()?;
        let scale: Scale = find("scale").unwrap_or("desk").parse()?;
        let mut config = default_config(mode, scale);
        for (k, v) in &entries {
            if k != "mode" && k != "scale" {
                config.set(k, v)?;
            }
        }
        Ok(config)
    }

    /// Sets one configuration key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, TrainError> {
            v.parse()
                .map_err(|_| TrainError::Config(format!("`{key}` has invalid value `{v}`")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse().map_err(TrainError::Config)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "image_side" => self.image_side = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "holdout_fraction" => self.holdout_fraction = parse(key, value)?,
            "pseudo_label_only" => {
                let on = parse(key, value)?;
                self.set_pseudo_label_only(on);
            }
            "batch_size" => {
                let b: usize = parse(key, value)?;
                self.stages.iter_mut().for_each(|s| s.batch_size = b);
            }
            _ => {
                let Some((stage, field)) = key.strip_prefix("stage").and_then(|r| r.split_once('.')) else {
                    return Err(TrainError::Config(format!("unknown configuration key `{key}`")));
                };
                let id: u8 = parse(key, stage)?;
                let plan = self.stage_mut(id)?;
                match field {
                    "lr" => plan.learning_rate = parse(key, value)?,
                    "iters" => plan.iterations = parse(key, value)?,
                    "batch_size" => plan.batch_size = parse(key, value)?,
                    "flip_augment" => plan.flip_augment = parse(key, value)?,
                    _ => return Err(TrainError::Config(format!("unknown configuration key `{key}`"))),
                }
            }
        }
        Ok(())
    }

    /// Flat text form accepted by [`RunConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "mode = {}\nscale = {}\nseed = {}\noptimizer = {}\n",
            self.mode, self.scale, self.seed, self.optimizer
        );
        if let Some(d) = &self.dataset {
            out.push_str(&format!("dataset = {}\n", d.display()));
        }
        if let Some(d) = &self.out_dir {
            out.push_str(&format!("out_dir = {}\n", d.display()));
        }
        out.push_str(&format!(
            "image_side = {}\ncheckpoint_every = {}\nlog_every = {}\nholdout_fraction = {}\npseudo_label_only = {}\n",
            self.image_side, self.checkpoint_every, self.log_every, self.holdout_fraction, self.pseudo_label_only
        ));
        for s in &self.stages {
            let id = s.stage_id;
            out.push_str(&format!(
                "stage{id}.lr = {}\nstage{id}.iters = {}\nstage{id}.batch_size = {}\nstage{id}.flip_augment = {}\n",
                s.learning_rate, s.iterations, s.batch_size, s.flip_augment
            ));
        }
        out
    }

    /// Fields that determine the trained parameters; a resume must match all
    /// of them.
    fn fingerprint(&self, dataset_digest: &str) -> BTreeMap<String, String> {
        let mut f = BTreeMap::new();
        f.insert("mode".into(), self.mode.to_string());
        f.insert("seed".into(), self.seed.to_string());
        f.insert("optimizer".into(), self.optimizer.to_string());
        f.insert("image_side".into(), self.image_side.to_string());
        f.insert("holdout_fraction".into(), self.holdout_fraction.to_string());
        f.insert("pseudo_label_only".into(), self.pseudo_label_only.to_string());
        f.insert("dataset_sha256".into(), dataset_digest.to_string());
        for s in &self.stages {
            let id = s.stage_id;
            f.insert(format!("stage{id}.iters"), s.iterations.to_string());
            f.insert(format!("stage{id}.lr"), s.learning_rate.to_string());
            f.insert(format!("stage{id}.batch_size"), s.batch_size.to_string());
            f.insert(format!("stage{id}.flip_augment"), s.flip_augment.to_string());
            f.insert(format!("stage{id}.losses"), s.losses.describe());
        }
        f.insert("stages".into(), self.stages.len().to_string());
        f
    }
}

fn describe_mask(m: FreezeMask) -> String {
    Component::ALL
        .iter()
        .filter(|&&c| m.trains(c))
        .map(|c| c.name())
        .collect::<Vec<_>>()
        .join(",")
}

/// One logged iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: u8,
    pub iteration: usize,
    pub total: f64,
    pub ce: Option<f64>,
    pub mse: Option<f64>,
    pub unsup: Option<f64>,
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "stage,iteration,total,ce,mse,unsup,holdout_accuracy";

impl TrainLog {
    pub fn stage_records(&self, stage: u8) -> impl Iterator<Item = &TrainRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    /// First logged record of a stage.
    pub fn stage_start(&self, stage: u8) -> Option<&TrainRecord> {
        self.stage_records(stage).next()
    }

    pub fn stage_end(&self, stage: u8) -> Option<&TrainRecord> {
        self.stage_records(stage).last()
    }

    /// CSV with a fixed header; absent values are `NA`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.stage,
                r.iteration,
                r.total,
                opt(r.ce),
                opt(r.mse),
                opt(r.unsup),
                opt(r.holdout_accuracy)
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next() != Some(TRAIN_LOG_HEADER) {
            return Err(TrainError::Config("training log has an unexpected header".into()));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || TrainError::Config(format!("training log line {} is malformed", n + 2));
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 7 {
                return Err(bad());
            }
            let opt = |s: &str| -> Result<Option<f64>, TrainError> {
                if s == "NA" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad())
                }
            };
            records.push(TrainRecord {
                stage: cells[0].parse().map_err(|_| bad())?,
                iteration: cells[1].parse().map_err(|_| bad())?,
                total: cells[2].parse().map_err(|_| bad())?,
                ce: opt(cells[3])?,
                mse: opt(cells[4])?,
                unsup: opt(cells[5])?,
                holdout_accuracy: opt(cells[6])?,
            });
        }
        Ok(Self { records })
    }

    /// Drops records at or beyond a resume position.
    pub fn truncate_to(&mut self, stages: &[StagePlan], position: Position) {
        let order = |stage: u8| stages.iter().position(|s| s.stage_id == stage).unwrap_or(usize::MAX);
        self.records.retain(|r| {
            let si = order(r.stage);
            si < position.stage_index || (si == position.stage_index && r.iteration < position.iteration)
        });
    }
}

/// Where a run stands: `iteration` iterations of stage `stage_index`
/// (index into the plan list) are complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub stage_index: usize,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage_id: u8,
    pub iterations: usize,
    /// SHA-256 of each frozen component's parameters, constant across the stage.
    pub frozen_digests: Vec<(Component, String)>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub log: TrainLog,
    /// Checkpoints written at stage boundaries, in order.
    pub stage_checkpoints: Vec<(u8, Checkpoint)>,
    pub stages: Vec<StageSummary>,
    /// Set when nothing was left to run.
    pub notice: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains a fresh model seeded from `config.seed`.
pub fn run(config: &RunConfig, dataset: &Dataset) -> Result<RunOutcome, TrainError> {
    config.validate()?;
    check_dataset(config, dataset)?;
    let model = Model::new(ModelSpec::desk(config.image_side), config.seed)?;
    Trainer::new(config, dataset)?.execute(
        model,
        None,
        Position {
            stage_index: 0,
            iteration: 0,
        },
    )
}

/// Continues a run from a checkpoint written by [`run`].
///
/// The configuration and dataset must match the ones recorded in the
/// checkpoint; the result is bit-identical to an uninterrupted run.
pub fn resume(checkpoint: &Checkpoint, config: &RunConfig, dataset: &Dataset) -> Result<RunOutcome, TrainError> {
    config.validate()?;
    check_dataset(config, dataset)?;
    let trainer = Trainer::new(config, dataset)?;
    let expected = config.fingerprint(&trainer.dataset_digest);
    for (key, want) in &expected {
        match checkpoint.metadata.get(&format!("run.{key}")) {
            Some(have) if have == want => {}
            Some(have) => {
                return Err(TrainError::Resume(format!(
                    "`{key}` differs: checkpoint has {have}, configuration has {want}"
                )))
            }
            None => return Err(TrainError::Resume(format!("checkpoint does not record `{key}`"))),
        }
    }
    let field = |k: &str| -> Result<usize, TrainError> {
        checkpoint
            .metadata
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TrainError::Resume(format!("checkpoint lacks `{k}`")))
    };
    let position = Position {
        stage_index: field("progress.stage_index")?,
        iteration: field("progress.iteration")?,
    };
    if checkpoint.model.spec() != &ModelSpec::desk(config.image_side) {
        return Err(TrainError::Resume("checkpoint architecture differs from the configuration".into()));
    }
    let optimizer = match (config.optimizer, &checkpoint.optimizer) {
        (OptimizerKind::Adam, Some(state)) if state.fits(&checkpoint.model) => Some(Optimizer::Adam(state.clone())),
        (OptimizerKind::Adam, None) if position.iteration > 0 => {
            return Err(TrainError::Resume("mid-stage checkpoint lacks the optimizer state".into()))
        }
        (OptimizerKind::Adam, Some(_)) => {
            return Err(TrainError::Resume("optimizer state does not match the model".into()))
        }
        _ => None,
    };
    trainer.execute(checkpoint.model.clone(), optimizer, position)
}

fn check_dataset(config: &RunConfig, dataset: &Dataset) -> Result<(), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if dataset.image_side() != config.image_side {
        return Err(TrainError::Config(format!(
            "dataset image side {} does not match configured side {}",
            dataset.image_side(),
            config.image_side
        )));
    }
    Ok(())
}

/// Splits `dataset` into training and held-out parts.
pub fn split_holdout(dataset: &Dataset, fraction: f64) -> (&[OrientationSample], &[OrientationSample]) {
    let n = dataset.len();
    let hold = ((n as f64) * fraction).floor() as usize;
    let hold = hold.min(n.saturating_sub(1));
    dataset.samples.split_at(n - hold)
}

struct Trainer<'a> {
    config: &'a RunConfig,
    train: &'a [OrientationSample],
    holdout: &'a [OrientationSample],
    /// Mirrors of `train`, same order.
    mirrored: Vec<OrientationSample>,
    dataset_digest: String,
}

impl<'a> Trainer<'a> {
    fn new(config: &'a RunConfig, dataset: &'a Dataset) -> Result<Self, TrainError> {
        let (train, holdout) = split_holdout(dataset, config.holdout_fraction);
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mirrored = train
            .iter()
            .map(|s| OrientationSample::new(s.image.mirrored(), crate::angle::mirror(s.theta)))
            .collect();
        Ok(Self {
            config,
            train,
            holdout,
            mirrored,
            dataset_digest: sha256_hex(&dataset.to_bytes()),
        })
    }

    /// Pool entry `i`: originals first, then their mirrors when augmenting.
    fn pool_sample(&self, i: usize) -> &OrientationSample {
        let n = self.train.len();
        if i < n {
            &self.train[i]
        } else {
            &self.mirrored[i - n]
        }
    }

    /// Mirror partner of pool entry `i`.
    fn partner(&self, i: usize) -> &OrientationSample {
        let n = self.train.len();
        if i < n {
            &self.mirrored[i]
        } else {
            &self.train[i - n]
        }
    }

    fn holdout_accuracy(&self, model: &Model) -> Result<Option<f64>, TrainError> {
        if self.holdout.is_empty() {
            return Ok(None);
        }
        let images: Vec<&Image> = self.holdout.iter().map(|s| &s.image).collect();
        let mut correct = 0usize;
        for (chunk, samples) in images.chunks(64).zip(self.holdout.chunks(64)) {
            for (out, s) in model.infer(chunk)?.iter().zip(samples) {
                if predict_from_heads(out).class_index == s.decomposition.class_index {
                    correct += 1;
                }
            }
        }
        Ok(Some(correct as f64 / self.holdout.len() as f64))
    }

    fn progress_checkpoint(&self, model: &Model, optimizer: Option<&Optimizer>, position: Position) -> Checkpoint {
        let mut ck = Checkpoint::new(model.clone());
        if let Some(Optimizer::Adam(state)) = optimizer {
            ck.optimizer = Some(state.clone());
        }
        for (k, v) in self.config.fingerprint(&self.dataset_digest) {
            ck.metadata.insert(format!("run.{k}"), v);
        }
        ck.metadata.insert("progress.stage_index".into(), position.stage_index.to_string());
        ck.metadata.insert("progress.iteration".into(), position.iteration.to_string());
        ck
    }

    fn write(&self, ck: &Checkpoint, name: &str) -> Result<(), TrainError> {
        if let Some(dir) = &self.config.out_dir {
            fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
            ck.save(dir.join(name))?;
        }
        Ok(())
    }

    /// Runs from `start`. `resumed` carries the optimizer state of a
    /// mid-stage checkpoint.
    fn execute(&self, mut model: Model, resumed: Option<Optimizer>, start: Position) -> Result<RunOutcome, TrainError> {
        let stages = &self.config.stages;
        let mut outcome = RunOutcome {
            model: model.clone(),
            log: TrainLog::default(),
            stage_checkpoints: Vec::new(),
            stages: Vec::new(),
            notice: None,
        };
        let done = start.stage_index >= stages.len()
            || (start.stage_index == stages.len() - 1 && start.iteration >= stages[start.stage_index].iterations);
        if done {
            outcome.notice = Some("run already complete; nothing to resume".into());
            return Ok(outcome);
        }
        model.zero_grads();
        let mut resumed = resumed;
        for (si, plan) in stages.iter().enumerate().skip(start.stage_index) {
            let first = if si == start.stage_index { start.iteration } else { 0 };
            let mut optimizer = match resumed.take() {
                Some(o) if first > 0 => o,
                _ => Optimizer::new(self.config.optimizer, &model),
            };
            let digests = frozen_digests(&model, plan.freeze);
            let mut sampler = BatchSampler::new(self.config.seed, plan, self.pool_len(plan));
            for iteration in first..plan.iterations {
                let log_now = iteration == 0
                    || iteration + 1 == plan.iterations
                    || (self.config.log_every > 0 && iteration % self.config.log_every == 0);
                let accuracy = if log_now { self.holdout_accuracy(&model)? } else { None };
                let record = self.step(&mut model, &mut optimizer, plan, &mut sampler, iteration)?;
                if log_now {
                    outcome.log.records.push(TrainRecord {
                        holdout_accuracy: accuracy,
                        ..record
                    });
                }
                for (component, digest) in &digests {
                    if &sha256_hex(&model.component_bytes(*component)) != digest {
                        return Err(TrainError::FreezeViolation {
                            stage: plan.stage_id,
                            iteration,
                            component: component.name(),
                        });
                    }
                }
                let completed = iteration + 1;
                if self.config.checkpoint_every > 0
                    && completed % self.config.checkpoint_every == 0
                    && completed < plan.iterations
                {
                    let ck = self.progress_checkpoint(
                        &model,
                        Some(&optimizer),
                        Position {
                            stage_index: si,
                            iteration: completed,
                        },
                    );
                    self.write(&ck, &format!("stage{}_iter{completed}.ckpt", plan.stage_id))?;
                }
            }
            let next = Position {
                stage_index: si + 1,
                iteration: 0,
            };
            let ck = self.progress_checkpoint(&model, None, next);
            self.write(&ck, &format!("stage{}.ckpt", plan.stage_id))?;
            outcome.stage_checkpoints.push((plan.stage_id, ck));
            outcome.stages.push(StageSummary {
                stage_id: plan.stage_id,
                iterations: plan.iterations,
                frozen_digests: digests,
            });
        }
        if let Some((_, ck)) = outcome.stage_checkpoints.last() {
            self.write(ck, "final.ckpt")?;
        }
        outcome.model = model;
        Ok(outcome)
    }

    fn pool_len(&self, plan: &StagePlan) -> usize {
        if plan.flip_augment {
            2 * self.train.len()
        } else {
            self.train.len()
        }
    }

    /// One forward/backward/update; returns the losses of the batch before
    /// the update.
    fn step(
        &self,
        model: &mut Model,
        optimizer: &mut Optimizer,
        plan: &StagePlan,
        sampler: &mut BatchSampler,
        iteration: usize,
    ) -> Result<TrainRecord, TrainError> {
        let losses = plan.losses;
        let mut graph = Graph::new();
        let bound = model.bind(&mut graph);
        let mut terms: Vec<(&'static str, NodeId)> = Vec::new();
        let batch: Vec<&OrientationSample>;
        let out;
        if losses.unsup {
            let pairs = (plan.batch_size / 2).max(1);
            let idx = sampler.batch(iteration, pairs);
            batch = idx.iter().map(|&i| self.pool_sample(i)).collect();
            let partners: Vec<&Image> = idx.iter().map(|&i| &self.partner(i).image).collect();
            let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
            out = model.forward_on(&mut graph, &bound, &images)?;
            let flipped = model.forward_on(&mut graph, &bound, &partners)?;
            terms.push(("UNSUP", loss_unsupervised(&mut graph, out.logits, flipped.logits)?));
        } else {
            let idx = sampler.batch(iteration, plan.batch_size);
            batch = idx.iter().map(|&i| self.pool_sample(i)).collect();
            let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
            out = model.forward_on(&mut graph, &bound, &images)?;
        }
        if losses.ce {
            let labels: Vec<usize> = batch.iter().map(|s| s.decomposition.logit_index()).collect();
            terms.push(("CE", loss_ce(&mut graph, out.logits, &labels)?));
        }
        if losses.mse {
            let thetas: Vec<Orientation> = batch.iter().map(|s| s.theta).collect();
            terms.push(("MSE", loss_mse_cos(&mut graph, out.cos_pred, &thetas)?));
        }
        let mut record = TrainRecord {
            stage: plan.stage_id,
            iteration,
            total: 0.0,
            ce: None,
            mse: None,
            unsup: None,
            holdout_accuracy: None,
        };
        for &(name, node) in &terms {
            let v = graph.value(node).item().expect("scalar loss");
            if !v.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    stage: plan.stage_id,
                    iteration,
                    loss: name,
                    value: v,
                });
            }
            match name {
                "CE" => record.ce = Some(v),
                "MSE" => record.mse = Some(v),
                _ => record.unsup = Some(v),
            }
        }
        let mut total = terms[0].1;
        for &(_, node) in &terms[1..] {
            total = graph.add(total, node)?;
        }
        record.total = graph.value(total).item().expect("scalar loss");
        graph.backward(total)?;
        model.accumulate_grads(&graph, &bound);
        optimizer.step(model, plan.freeze, plan.learning_rate)?;
        Ok(record)
    }
}

fn frozen_digests(model: &Model, freeze: FreezeMask) -> Vec<(Component, String)> {
    freeze
        .frozen()
        .map(|c| (c, sha256_hex(&model.component_bytes(c))))
        .collect()
}

/// Epoch-shuffled sampling that depends only on `(seed, stage, iteration)`,
/// so a resumed run draws the same batches.
struct BatchSampler {
    seed: u64,
    stage: u8,
    pool: usize,
    epoch: Option<(usize, Vec<usize>)>,
}

impl BatchSampler {
    fn new(seed: u64, plan: &StagePlan, pool: usize) -> Self {
        Self {
            seed,
            stage: plan.stage_id,
            pool,
            epoch: None,
        }
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.pool).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_BA7C_0000_0000);
            rng.set_stream(((self.stage as u64) << 48) | epoch as u64);
            perm.shuffle(&mut rng);
            self.epoch = Some((epoch, perm));
        }
        &self.epoch.as_ref().unwrap().1
    }

    fn batch(&mut self, iteration: usize, size: usize) -> Vec<usize> {
        (0..size)
            .map(|j| {
                let p = iteration * size + j;
                let (epoch, at) = (p / self.pool, p % self.pool);
                self.permutation(epoch)[at]
            })
            .collect()
    }
}

/// Writes the training log CSV.
pub fn write_log(log: &TrainLog, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    fs::write(path, log.to_csv()).map_err(|e| TrainError::io(path, e))
}
