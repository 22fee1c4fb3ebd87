use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterSpec;
use crate::duration::DurationConfig;
use crate::error::{Error, Result};
use crate::flow::{LossMaskPolicy, PathParams};
use crate::ode::SolverConfig;
use crate::optim::OptimizerConfig;
use crate::tasks::{TaskKind, TaskSpec, TwoModeTask};
use crate::transformer::BackboneConfig;

/// What pre-training fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainData {
    /// The task corpus with every annotation removed.
    Task,
    /// The two-cluster toy distribution.
    TwoMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub pretrain_data: PretrainData,
    pub pretrain_steps: usize,
    pub duration_pretrain_steps: usize,
    /// Acoustic fine-tuning steps before the per-task multiplier.
    pub finetune_steps: usize,
    pub batch_size: usize,
    /// Zero writes only the initial and final checkpoints.
    pub checkpoint_every: usize,
    pub encoder_fit_steps: usize,
    pub corpus_size: usize,
    /// Share of the training split used for fine-tuning.
    pub data_fraction: f64,
    pub loss_mask: LossMaskPolicy,
    pub finetune_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            pretrain_data: PretrainData::Task,
            pretrain_steps: 2000,
            duration_pretrain_steps: 600,
            finetune_steps: 1500,
            batch_size: 8,
            checkpoint_every: 500,
            encoder_fit_steps: 2000,
            corpus_size: 1000,
            data_fraction: 1.0,
            loss_mask: LossMaskPolicy::Infilling,
            finetune_lr: 2e-3,
        }
    }
}

impl Schedule {
    /// Emphasis gets 0.6 of the acoustic steps of the other tasks.
    pub fn acoustic_finetune_steps(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Emphasis => (self.finetune_steps as f64 * 0.6).round() as usize,
            _ => self.finetune_steps,
        }
    }

    /// The duration model fine-tunes for twice the acoustic steps.
    pub fn duration_finetune_steps(&self, task: TaskKind) -> usize {
        2 * self.acoustic_finetune_steps(task)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model: 1,
            data: 2,
            train: 3,
        }
    }
}

impl Seeds {
    /// Replaces every seed with one derived from `seed`.
    pub fn from_master(seed: u64) -> Self {
        use crate::numerics::derive_seed;
        Self {
            model: derive_seed(seed, 1),
            data: derive_seed(seed, 2),
            train: derive_seed(seed, 3),
        }
    }
}

/// Everything a run depends on. Stored as TOML in every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub duration: DurationConfig,
    pub path: PathParams,
    pub task: TaskSpec,
    #[serde(default)]
    pub toy: TwoModeTask,
    #[serde(default)]
    pub adapter: Option<AdapterSpec>,
    pub solver: SolverConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub seeds: Seeds,
    #[serde(default)]
    pub output_dir: Option<String>,
}

/// The sections that fix parameter shapes and data; adapter, schedule and
/// solver choices may differ between a base run and its fine-tunes.
#[derive(Serialize)]
struct FingerprintView<'a> {
    backbone: &'a BackboneConfig,
    duration: &'a DurationConfig,
    path: &'a PathParams,
    task: TaskSpec,
    toy: &'a TwoModeTask,
}

impl RunConfig {
    pub fn desk(task: TaskKind) -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            duration: DurationConfig::desk(),
            path: PathParams::default(),
            task: TaskSpec::desk(task),
            toy: TwoModeTask::default(),
            adapter: None,
            solver: SolverConfig::default(),
            optimizer: OptimizerConfig {
                warmup_steps: 100,
                ..OptimizerConfig::default()
            },
            schedule: Schedule::default(),
            seeds: Seeds::default(),
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.duration.validate()?;
        self.path.validate()?;
        self.task.validate()?;
        self.solver.validate()?;
        if let Some(a) = &self.adapter {
            a.validate()?;
        }
        if self.task.n_symbols > self.backbone.vocab_size || self.task.n_symbols > self.duration.vocab_size {
            return Err(Error::Config("task symbols exceed a model vocabulary".into()));
        }
        if self.task.feature_dim != self.backbone.feature_dim || self.toy.feature_dim != self.backbone.feature_dim {
            return Err(Error::Config("task feature_dim differs from the backbone's".into()));
        }
        if self.task.max_frames() > self.backbone.max_seq_len || self.toy.frames > self.backbone.max_seq_len {
            return Err(Error::Config("utterances can exceed max_seq_len".into()));
        }
        if self.task.max_symbols > self.duration.max_symbols {
            return Err(Error::Config(
                "utterances can exceed the duration model's max_symbols".into(),
            ));
        }
        let s = &self.schedule;
        if s.batch_size == 0 || s.corpus_size == 0 {
            return Err(Error::Config("batch_size and corpus_size must be positive".into()));
        }
        if !(s.data_fraction > 0.0 && s.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data_fraction {} outside (0, 1]",
                s.data_fraction
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// SHA-256 of the shape- and data-determining sections, hex encoded.
    /// The annotation kind and rate are left out: they do not change the
    /// annotation-free pre-training data, so one base run serves every task.
    pub fn fingerprint(&self) -> String {
        let mut task = self.task.clone();
        task.task = TaskKind::Emphasis;
        task.annotation_rate = 0.0;
        let view = FingerprintView {
            backbone: &self.backbone,
            duration: &self.duration,
            path: &self.path,
            task,
            toy: &self.toy,
        };
        let bytes = serde_json::to_vec(&view).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
