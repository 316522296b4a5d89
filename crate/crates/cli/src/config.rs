//! Experiment configuration.

use std::path::Path;

use anyhow::{bail, Context, Result};
use kap_core::diffcore::OptimizerKind;
use kap_core::losses::{DistillConfig, NormKind};
use kap_core::meta::{MetaConfig, MetaGradMode, TrainConfig};
use kap_core::metrics::EvalConfig;
use kap_core::nets::{HiddenLayer, NetworkSpec};
use kap_core::synthdata::{SplitCounts, WorldSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

/// Offset between a run seed and its teacher's initialization seed.
pub const TEACHER_SEED_OFFSET: u64 = 1_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Optim {
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    pub beta: f64,
    pub inner_steps: usize,
    pub mode: MetaGradMode,
    pub norm: NormKind,
    pub start_fresh: bool,
    pub phi_clip: Option<f64>,
    pub fd_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub sigmas: Vec<f64>,
    /// Norm exponents, 1 or 2.
    pub norms: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub world: WorldSpec,
    pub counts: SplitCounts,
    pub noise_seed: u64,
    /// Hidden layers shared by teacher and student so their traces align.
    pub hidden: Vec<HiddenLayer>,
    pub teacher: Schedule,
    /// Student batch size, learning rate `α` and θ optimizer; also used by
    /// meta-training.
    pub student: Optim,
    pub distill: DistillConfig,
    pub meta: MetaSection,
    /// Regularized training on the target set.
    pub target: Schedule,
    pub sweep: SweepSection,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn default_config() -> Self {
        Self::from_json(DEFAULT_CONFIG).expect("bundled config is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        for (name, batch_size, lr) in [
            ("teacher", self.teacher.batch_size, self.teacher.lr),
            ("student", self.student.batch_size, self.student.lr),
            ("target", self.target.batch_size, self.target.lr),
        ] {
            if batch_size == 0 || !(lr > 0.0) {
                bail!("{name}: batch_size must be >= 1 and lr > 0");
            }
        }
        self.teacher_spec(0).validate()?;
        self.distill.validate(&self.student_spec(0))?;
        self.meta_config(0).validate()?;
        for &s in &self.sweep.sigmas {
            if !(s >= 0.0) {
                bail!("sweep sigma {s} must be >= 0");
            }
        }
        for &p in &self.sweep.norms {
            NormKind::from_exponent(p)?;
        }
        if self.eval.thresholds.len() < 2 {
            bail!("eval.thresholds needs at least two values");
        }
        if self.eval.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            bail!("eval.thresholds must be strictly increasing");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn teacher_spec(&self, seed: u64) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.world.sup_dim,
            hidden: self.hidden.clone(),
            output_dim: self.world.label_dim(),
            init_seed: seed + TEACHER_SEED_OFFSET,
        }
    }

    pub fn student_spec(&self, seed: u64) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.world.weak_input_dim(),
            hidden: self.hidden.clone(),
            output_dim: self.world.label_dim(),
            init_seed: seed,
        }
    }

    pub fn teacher_config(&self, seed: u64) -> TrainConfig {
        schedule_config(&self.teacher, seed)
    }

    /// Student settings; the iteration count comes from the distill schedule.
    pub fn student_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iters: 0,
            batch_size: self.student.batch_size,
            lr: self.student.lr,
            optimizer: self.student.optimizer,
            seed,
        }
    }

    pub fn target_config(&self, seed: u64) -> TrainConfig {
        schedule_config(&self.target, seed)
    }

    /// Meta-training runs for as long as distillation fine-tuning.
    pub fn meta_config(&self, seed: u64) -> MetaConfig {
        MetaConfig {
            batch_size: self.student.batch_size,
            iters: self.distill.finetune_iters,
            alpha: self.student.lr,
            beta: self.meta.beta,
            inner_steps: self.meta.inner_steps,
            mode: self.meta.mode,
            norm: self.meta.norm,
            seed,
            theta_optimizer: self.student.optimizer,
            start_fresh: self.meta.start_fresh,
            phi_clip: self.meta.phi_clip,
            fd_eps: self.meta.fd_eps,
        }
    }
}

fn schedule_config(s: &Schedule, seed: u64) -> TrainConfig {
    TrainConfig {
        iters: s.iters,
        batch_size: s.batch_size,
        lr: s.lr,
        optimizer: s.optimizer,
        seed,
    }
}
