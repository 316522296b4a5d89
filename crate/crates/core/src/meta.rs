//! Training procedures.
//!
//! * [`train_teacher`] fits the superior-view network.
//! * [`distill_student`] warms a weak-view student up on the regression loss
//!   and fine-tunes it on `G` (regression plus distillation).
//! * [`meta_train`] learns per-parameter regularizer weights `φ` so that a
//!   gradient step on `F = L_REG + R(θ; φ)` lowers `G`: each iteration takes
//!   an inner step on `F`, moves `φ` against `∇_φ G(θ̈)` and then updates `θ`
//!   on `G`.
//! * [`meta_test`] trains a fresh network on a target set with `F` and a
//!   frozen `φ`; [`baseline_train`] does the same with no or a constant
//!   regularizer.
//!
//! For the weighted ℓ2 regularizer one inner step has the closed form
//! `θ̈ = θ ⊙ (1 − 2αφ) − α∇L_REG(θ)`, so `∂θ̈/∂φ = −2αθ` and the
//! meta-gradient needs a single backward pass at `θ̈`. The ℓ1 variant uses
//! `∂θ̈/∂φ = −α·sign(θ)`. Longer unrolls are only differentiated by finite
//! differences.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{finite_diff_grad, sign, Optimizer, OptimizerKind, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::losses::{
    loss_f_grad, loss_g, loss_g_grad, regularizer_r, DistillBatch, DistillConfig, LossParts, NormKind,
    RegularizerWeights,
};
use crate::nets::{check_aligned, Network, NetworkSpec};
use crate::synthdata::{SourceSplit, TargetSplit};

/// Runs are aborted once any recorded loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("batch_size must be >= 1 and lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradMode {
    #[default]
    ClosedForm,
    FiniteDiffOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Batch size `N`.
    pub batch_size: usize,
    /// Meta-iterations `K`.
    pub iters: usize,
    /// Student learning rate `α`, used by the inner step and the θ update.
    pub alpha: f64,
    /// Regularizer learning rate `β`.
    pub beta: f64,
    /// Inner steps `l`.
    pub inner_steps: usize,
    pub mode: MetaGradMode,
    pub norm: NormKind,
    pub seed: u64,
    /// Optimizer for the outer θ update; inner steps and φ are always plain SGD.
    pub theta_optimizer: OptimizerKind,
    /// Start θ from a fresh initialization instead of the warmed-up student.
    pub start_fresh: bool,
    /// Symmetric bound applied to φ after every update.
    pub phi_clip: Option<f64>,
    /// Probe size of the finite-difference oracle.
    pub fd_eps: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            iters: 1000,
            alpha: 2.5e-4,
            beta: 1e-3,
            inner_steps: 1,
            mode: MetaGradMode::ClosedForm,
            norm: NormKind::L2,
            seed: 0,
            theta_optimizer: OptimizerKind::Adam,
            start_fresh: false,
            phi_clip: None,
            fd_eps: 1e-6,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.inner_steps == 0 {
            return bad("batch_size and inner_steps must be >= 1");
        }
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) {
            return bad("alpha must be > 0 and beta >= 0");
        }
        if self.mode == MetaGradMode::ClosedForm && self.inner_steps != 1 {
            return bad("closed-form meta-gradient requires inner_steps = 1");
        }
        Ok(())
    }

    /// The θ-path settings as a [`TrainConfig`] with `iters` iterations.
    pub fn theta_config(&self, iters: usize) -> TrainConfig {
        TrainConfig {
            iters,
            batch_size: self.batch_size,
            lr: self.alpha,
            optimizer: self.theta_optimizer,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Teacher,
    Regression,
    Warmup,
    Finetune,
    MetaTrain,
    MetaTest,
}

impl Phase {
    /// Batch-order stream; phases that must see the same batches share one.
    fn stream(self) -> u64 {
        match self {
            Phase::Teacher => 1,
            Phase::Warmup => 2,
            Phase::Finetune | Phase::MetaTrain => 3,
            Phase::Regression | Phase::MetaTest => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Teacher => "teacher",
            Phase::Regression => "regression",
            Phase::Warmup => "warmup",
            Phase::Finetune => "finetune",
            Phase::MetaTrain => "meta-train",
            Phase::MetaTest => "meta-test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub parts: LossParts,
}

#[derive(Clone, Debug)]
pub struct TrainedNet {
    pub net: Network,
    pub series: Vec<LossRecord>,
}

/// Shuffled-epoch minibatch indices.
#[derive(Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64, stream: u64) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(Error::Empty("training set or batch"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            rng,
            order,
            pos: 0,
            batch,
        })
    }

    fn for_phase(n: usize, batch: usize, seed: u64, phase: Phase) -> Result<Self> {
        Self::new(n, batch, seed, phase.stream())
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Paired rows gathered for one iteration.
#[derive(Clone, Debug)]
pub struct SourceBatch {
    pub x: Tensor,
    pub x_sup: Tensor,
    pub y: Tensor,
}

impl SourceBatch {
    pub fn gather(split: &SourceSplit, idx: &[usize]) -> Self {
        Self {
            x: split.x.select_rows(idx),
            x_sup: split.x_sup.select_rows(idx),
            y: split.y.select_rows(idx),
        }
    }

    pub fn as_distill(&self) -> DistillBatch<'_> {
        DistillBatch {
            x: &self.x,
            x_sup: &self.x_sup,
            y: &self.y,
        }
    }
}

fn guard(iteration: usize, parts: &LossParts) -> Result<()> {
    let worst = [parts.total, parts.reg, parts.act, parts.att, parts.r]
        .into_iter()
        .fold(
            0.0f64,
            |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY },
        );
    if worst > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            iteration,
            loss: parts.total,
        });
    }
    Ok(())
}

fn divergence_from(iteration: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Diverged {
            iteration,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Minimizes `L_REG` (+ `R(θ; φ)` when `phi` is given) on `(x, y)` pairs,
/// starting from `net`.
fn fit_regression(
    mut net: Network,
    data: &TargetSplit,
    phi: Option<&RegularizerWeights>,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<TrainedNet> {
    cfg.validate()?;
    if let Some(phi) = phi {
        phi.check_matches(&net.params)?;
    }
    let mut sampler = BatchSampler::for_phase(data.len(), cfg.batch_size, cfg.seed, phase)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut series = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let idx = sampler.next_batch();
        let (x, y) = (data.x.select_rows(&idx), data.y.select_rows(&idx));
        let (parts, grads) = loss_f_grad(&net, &x, &y, phi).map_err(|e| divergence_from(it, e))?;
        guard(it, &parts)?;
        series.push(LossRecord {
            iteration: it,
            phase,
            parts,
        });
        opt.step(&mut net.params, &grads).map_err(|e| divergence_from(it, e))?;
    }
    Ok(TrainedNet { net, series })
}

/// Trains the superior-view network on `(x̃, y)`.
pub fn train_teacher(source: &SourceSplit, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<TrainedNet> {
    fit_regression(
        Network::init(spec.clone())?,
        &source.superior_pairs(),
        None,
        cfg,
        Phase::Teacher,
    )
}

/// Constant-weight `σ·Σ|θ|^p` regularizer of a baseline arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantRegularizer {
    pub norm: NormKind,
    pub sigma: f64,
}

/// Trains a fresh network on `(x, y)` with no or a constant regularizer.
pub fn baseline_train(
    data: &TargetSplit,
    spec: &NetworkSpec,
    reg: Option<ConstantRegularizer>,
    cfg: &TrainConfig,
) -> Result<TrainedNet> {
    let net = Network::init(spec.clone())?;
    let phi = match reg {
        Some(c) if !(c.sigma >= 0.0) => {
            return Err(Error::InvalidConfig(format!("sigma {} must be >= 0", c.sigma)));
        }
        Some(c) => Some(RegularizerWeights::constant(&net.params, c.sigma, c.norm)),
        None => None,
    };
    fit_regression(net, data, phi.as_ref(), cfg, Phase::Regression)
}

/// Trains a fresh network on the target set with `F` and frozen `φ`.
pub fn meta_test(
    target: &TargetSplit,
    spec: &NetworkSpec,
    phi: &RegularizerWeights,
    cfg: &TrainConfig,
) -> Result<TrainedNet> {
    let net = Network::init(spec.clone())?;
    phi.check_matches(&net.params)?;
    fit_regression(net, target, Some(phi), cfg, Phase::MetaTest)
}

/// Regression-only warmup of the weak-view student on the source set.
pub fn warmup_student(source: &SourceSplit, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<TrainedNet> {
    fit_regression(
        Network::init(spec.clone())?,
        &source.weak_pairs(),
        None,
        cfg,
        Phase::Warmup,
    )
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: Network,
    pub warmup: Vec<LossRecord>,
    pub finetune: Vec<LossRecord>,
}

/// Fine-tunes `student` on `G` for `cfg.iters` iterations.
fn finetune_on_g(
    mut student: Network,
    source: &SourceSplit,
    teacher: &Network,
    dcfg: &DistillConfig,
    cfg: &TrainConfig,
) -> Result<TrainedNet> {
    cfg.validate()?;
    let mut sampler = BatchSampler::for_phase(source.len(), cfg.batch_size, cfg.seed, Phase::Finetune)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut series = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let batch = SourceBatch::gather(source, &sampler.next_batch());
        let (parts, grads) =
            loss_g_grad(&student, teacher, &batch.as_distill(), dcfg).map_err(|e| divergence_from(it, e))?;
        guard(it, &parts)?;
        series.push(LossRecord {
            iteration: it,
            phase: Phase::Finetune,
            parts,
        });
        opt.step(&mut student.params, &grads)
            .map_err(|e| divergence_from(it, e))?;
    }
    Ok(TrainedNet { net: student, series })
}

/// Two-phase distillation: `dcfg.warmup_iters` on `L_REG`, then
/// `dcfg.finetune_iters` on `G`. Batch size, learning rate, optimizer and
/// seed come from `cfg`; `cfg.iters` is ignored.
pub fn distill_student(
    source: &SourceSplit,
    teacher: &Network,
    spec: &NetworkSpec,
    dcfg: &DistillConfig,
    cfg: &TrainConfig,
) -> Result<DistillOutcome> {
    check_aligned(&teacher.spec, spec)?;
    dcfg.validate(spec)?;
    let warm = warmup_student(
        source,
        spec,
        &TrainConfig {
            iters: dcfg.warmup_iters,
            ..cfg.clone()
        },
    )?;
    let fine = finetune_on_g(
        warm.net,
        source,
        teacher,
        dcfg,
        &TrainConfig {
            iters: dcfg.finetune_iters,
            ..cfg.clone()
        },
    )?;
    Ok(DistillOutcome {
        student: fine.net,
        warmup: warm.series,
        finetune: fine.series,
    })
}

/// The weak-view comparison arm for [`distill_student`]: the same schedule and
/// batches with the regression loss in both phases.
pub fn regression_student(
    source: &SourceSplit,
    spec: &NetworkSpec,
    dcfg: &DistillConfig,
    cfg: &TrainConfig,
) -> Result<DistillOutcome> {
    let warm = warmup_student(
        source,
        spec,
        &TrainConfig {
            iters: dcfg.warmup_iters,
            ..cfg.clone()
        },
    )?;
    let fine = fit_regression(
        warm.net,
        &source.weak_pairs(),
        None,
        &TrainConfig {
            iters: dcfg.finetune_iters,
            ..cfg.clone()
        },
        Phase::Finetune,
    )?;
    Ok(DistillOutcome {
        student: fine.net,
        warmup: warm.series,
        finetune: fine.series,
    })
}

/// One plain step on `F` given `∇L_REG`: `θ ⊙ (1 − 2αφ) − α∇L_REG` (ℓ2) or
/// `θ − αφ ⊙ sign(θ) − α∇L_REG` (ℓ1).
pub fn decay_step(theta: &ParamSet, phi: &RegularizerWeights, grad_reg: &ParamSet, alpha: f64) -> Result<ParamSet> {
    let decayed = match phi.norm {
        NormKind::L2 => theta.zip_map(&phi.weights, |t, p| t * (1.0 - 2.0 * alpha * p))?,
        NormKind::L1 => theta.zip_map(&phi.weights, |t, p| t - alpha * p * sign(t))?,
    };
    let out = decayed.zip_map(grad_reg, |t, g| t - alpha * g)?;
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "inner_update" });
    }
    Ok(out)
}

/// Diagonal of `∂θ̈/∂φ` for one step from `theta`.
pub fn phi_jacobian(theta: &ParamSet, norm: NormKind, alpha: f64) -> ParamSet {
    match norm {
        NormKind::L2 => theta.map(|t| -2.0 * alpha * t),
        NormKind::L1 => theta.map(|t| -alpha * sign(t)),
    }
}

/// `steps` plain gradient steps on `F` from `theta`, each via [`decay_step`].
pub fn inner_update(
    theta: &Network,
    phi: &RegularizerWeights,
    x: &Tensor,
    y: &Tensor,
    alpha: f64,
    steps: usize,
) -> Result<Network> {
    if steps == 0 {
        return Err(Error::InvalidConfig("inner_steps must be >= 1".into()));
    }
    phi.check_matches(&theta.params)?;
    let mut cur = theta.clone();
    for _ in 0..steps {
        let (_, g) = loss_f_grad(&cur, x, y, None)?;
        cur.params = decay_step(&cur.params, phi, &g, alpha)?;
    }
    Ok(cur)
}

/// Result of one meta-gradient evaluation.
#[derive(Clone, Debug)]
pub struct MetaGrad {
    /// Parameters after the inner steps.
    pub inner: Network,
    /// `G` at the inner parameters.
    pub g: LossParts,
    /// `∇_φ G(θ̈(φ))`, laid out like `φ`.
    pub grad: ParamSet,
}

/// Everything [`meta_grad_phi`] needs besides `θ` and `φ`.
pub struct MetaGradInputs<'a> {
    pub batch: &'a SourceBatch,
    pub teacher: &'a Network,
    pub distill: &'a DistillConfig,
    pub alpha: f64,
    pub inner_steps: usize,
    pub mode: MetaGradMode,
    pub fd_eps: f64,
}

/// Gradient of `φ ↦ G(θ̈(φ))` on one batch.
pub fn meta_grad_phi(theta: &Network, phi: &RegularizerWeights, inp: &MetaGradInputs<'_>) -> Result<MetaGrad> {
    let b = inp.batch;
    let inner = inner_update(theta, phi, &b.x, &b.y, inp.alpha, inp.inner_steps)?;
    match inp.mode {
        MetaGradMode::ClosedForm => {
            if inp.inner_steps != 1 {
                return Err(Error::InvalidConfig(
                    "closed-form meta-gradient requires inner_steps = 1".into(),
                ));
            }
            let (g, d_inner) = loss_g_grad(&inner, inp.teacher, &b.as_distill(), inp.distill)?;
            let jac = phi_jacobian(&theta.params, phi.norm, inp.alpha);
            let grad = d_inner.zip_map(&jac, |a, j| a * j)?;
            Ok(MetaGrad { inner, g, grad })
        }
        MetaGradMode::FiniteDiffOracle => {
            let g = loss_g(&inner, inp.teacher, &b.as_distill(), inp.distill)?;
            let grad = finite_diff_grad(
                |w| {
                    let probe = RegularizerWeights {
                        weights: w.clone(),
                        norm: phi.norm,
                    };
                    let th = inner_update(theta, &probe, &b.x, &b.y, inp.alpha, inp.inner_steps)?;
                    Ok(loss_g(&th, inp.teacher, &b.as_distill(), inp.distill)?.total)
                },
                &phi.weights,
                inp.fd_eps,
            )?;
            Ok(MetaGrad { inner, g, grad })
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetaOutcome {
    /// Learned regularizer weights.
    pub phi: RegularizerWeights,
    /// Student after the last θ update.
    pub student: Network,
    pub warmup: Vec<LossRecord>,
    /// `G(θ_k)` terms with `R(θ_k; φ_k)` per meta-iteration.
    pub series: Vec<LossRecord>,
}

/// Learns `φ` on the paired source set. `θ` starts from the regression
/// warmup (`dcfg.warmup_iters` steps with the θ-path settings) unless
/// `mcfg.start_fresh` is set.
pub fn meta_train(
    source: &SourceSplit,
    teacher: &Network,
    spec: &NetworkSpec,
    dcfg: &DistillConfig,
    mcfg: &MetaConfig,
) -> Result<MetaOutcome> {
    mcfg.validate()?;
    check_aligned(&teacher.spec, spec)?;
    dcfg.validate(spec)?;
    let (mut student, warmup) = if mcfg.start_fresh {
        (Network::init(spec.clone())?, Vec::new())
    } else {
        let w = warmup_student(source, spec, &mcfg.theta_config(dcfg.warmup_iters))?;
        (w.net, w.series)
    };
    let mut phi = RegularizerWeights::zeros(&student.params, mcfg.norm);
    let mut sampler = BatchSampler::for_phase(source.len(), mcfg.batch_size, mcfg.seed, Phase::MetaTrain)?;
    let mut opt = Optimizer::new(mcfg.theta_optimizer, mcfg.alpha)?;
    let mut series = Vec::with_capacity(mcfg.iters);
    for it in 0..mcfg.iters {
        let batch = SourceBatch::gather(source, &sampler.next_batch());
        let inputs = MetaGradInputs {
            batch: &batch,
            teacher,
            distill: dcfg,
            alpha: mcfg.alpha,
            inner_steps: mcfg.inner_steps,
            mode: mcfg.mode,
            fd_eps: mcfg.fd_eps,
        };
        let r = regularizer_r(&student.params, &phi)?;

        // E-step and M-step
        let mg = meta_grad_phi(&student, &phi, &inputs).map_err(|e| divergence_from(it, e))?;
        phi.weights = phi.weights.zip_map(&mg.grad, |p, g| p - mcfg.beta * g)?;
        if let Some(limit) = mcfg.phi_clip {
            phi.clip(limit);
        }
        if !phi.weights.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: f64::NAN,
            });
        }

        // θ update on G at the current θ
        let (mut parts, grads) =
            loss_g_grad(&student, teacher, &batch.as_distill(), dcfg).map_err(|e| divergence_from(it, e))?;
        parts.r = r;
        guard(it, &parts)?;
        series.push(LossRecord {
            iteration: it,
            phase: Phase::MetaTrain,
            parts,
        });
        opt.step(&mut student.params, &grads)
            .map_err(|e| divergence_from(it, e))?;
    }
    Ok(MetaOutcome {
        phi,
        student,
        warmup,
        series,
    })
}

/// Exponential moving average of the total loss, seeded with the first value.
pub fn loss_ema(series: &[LossRecord], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut acc = None;
    for r in series {
        let v = match acc {
            None => r.parts.total,
            Some(a) => decay * a + (1.0 - decay) * r.parts.total,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}
