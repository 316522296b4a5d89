//! Scalar objectives: regression, activation matching, attention transfer,
//! the weighted parameter regularizer and the composite objectives `G`
//! (regression plus distillation) and `F` (regression plus regularizer).
//!
//! Every per-sample loss is averaged over the leading batch dimension.
//! Each objective is defined once as a graph builder taking a [`Tape`]; the
//! value-level functions evaluate those builders on a throwaway tape.

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{check_aligned, forward_on_tape, ActivationTrace, Network, NetworkSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L1,
    #[default]
    L2,
}

impl NormKind {
    pub fn exponent(self) -> u32 {
        match self {
            NormKind::L1 => 1,
            NormKind::L2 => 2,
        }
    }

    pub fn from_exponent(p: u32) -> Result<Self> {
        match p {
            1 => Ok(NormKind::L1),
            2 => Ok(NormKind::L2),
            _ => Err(Error::InvalidConfig(format!("norm exponent {p} (expected 1 or 2)"))),
        }
    }
}

/// Per-parameter regularizer weights, laid out exactly like the student.
/// Values may be negative.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerWeights {
    pub weights: ParamSet,
    pub norm: NormKind,
}

impl RegularizerWeights {
    /// All-zero weights, under which `F` equals the plain regression loss.
    pub fn zeros(layout: &ParamSet, norm: NormKind) -> Self {
        Self::constant(layout, 0.0, norm)
    }

    pub fn constant(layout: &ParamSet, sigma: f64, norm: NormKind) -> Self {
        Self {
            weights: layout.filled_like(sigma),
            norm,
        }
    }

    pub fn check_matches(&self, theta: &ParamSet) -> Result<()> {
        self.weights.check_layout(theta)
    }

    /// Clamps every weight to `[-limit, limit]`.
    pub fn clip(&mut self, limit: f64) {
        for t in self.weights.tensors_mut() {
            for v in t.data_mut() {
                *v = v.clamp(-limit, limit);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight on the attention term.
    pub lambda: f64,
    /// Hidden layers whose attention maps are matched.
    pub attention_layers: Vec<usize>,
    pub warmup_iters: usize,
    pub finetune_iters: usize,
}

impl DistillConfig {
    /// Attention on every hidden layer of `spec`, with the weight of 1e3 used
    /// for ResNet-scale features.
    pub fn all_layers(spec: &NetworkSpec) -> Self {
        Self {
            lambda: 1.0e3,
            attention_layers: (0..spec.hidden.len()).collect(),
            warmup_iters: 0,
            finetune_iters: 0,
        }
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        if let Some(&bad) = self.attention_layers.iter().find(|&&i| i >= spec.hidden.len()) {
            return Err(Error::InvalidConfig(format!(
                "attention layer {bad} out of range for {} hidden layers",
                spec.hidden.len()
            )));
        }
        Ok(())
    }
}

/// Individual terms of a composite objective. Terms that do not apply to a
/// given objective are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub reg: f64,
    pub act: f64,
    pub att: f64,
    pub r: f64,
}

fn batch_rows(t: &Tensor) -> usize {
    t.rows()
}

// ---------------------------------------------------------------------------
// graph builders

/// Mean over the batch of `‖pred_i − y_i‖²`.
pub fn reg_loss_graph(tape: &mut Tape, pred: Var, y: Var) -> Result<Var> {
    let b = batch_rows(tape.value(pred));
    let d = tape.sub(pred, y)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / b as f64)
}

/// `(B, C·S)` activations to normalized `(B, S)` attention maps.
pub fn attention_graph(tape: &mut Tape, q: Var, channels: usize, spatial: usize) -> Result<Var> {
    let sq = tape.square(q)?;
    let a = tape.sum_channels(sq, channels, spatial)?;
    tape.normalize_rows(a)
}

/// Sum over `layers` of the squared distance between normalized attention
/// maps, averaged over the batch. Hidden nodes are `(B, width)`.
pub fn att_loss_graph(
    tape: &mut Tape,
    student: &[Var],
    teacher: &[Var],
    shapes: &[(usize, usize)],
    layers: &[usize],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &i in layers {
        let (&s, &t, &(c, sp)) = match (student.get(i), teacher.get(i), shapes.get(i)) {
            (Some(s), Some(t), Some(sh)) => (s, t, sh),
            _ => {
                return Err(Error::InvalidConfig(format!("attention layer {i} out of range")));
            }
        };
        let a_s = attention_graph(tape, s, c, sp)?;
        let a_t = attention_graph(tape, t, c, sp)?;
        let d = tape.sub(a_s, a_t)?;
        let sq = tape.square(d)?;
        let term = tape.sum(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let Some(total) = total else {
        let zero = tape.constant_owned(Tensor::scalar(0.0));
        return Ok(zero);
    };
    let b = student.first().map(|&v| batch_rows(tape.value(v))).unwrap_or(1);
    tape.scale(total, 1.0 / b as f64)
}

/// `Σ φ_i θ_i²` (ℓ2) or `Σ φ_i |θ_i|` (ℓ1), with `φ` held constant.
pub fn regularizer_graph(tape: &mut Tape, theta: &[Var], phi: &RegularizerWeights) -> Result<Var> {
    if theta.len() != phi.weights.len() {
        return Err(Error::Layout(format!(
            "{} parameter nodes for {} regularizer tensors",
            theta.len(),
            phi.weights.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&th, w) in theta.iter().zip(phi.weights.tensors()) {
        if tape.value(th).shape() != w.shape() {
            return Err(Error::Layout("regularizer shape mismatch".into()));
        }
        let mag = match phi.norm {
            NormKind::L2 => tape.square(th)?,
            NormKind::L1 => tape.abs(th)?,
        };
        let wv = tape.constant(w);
        let weighted = tape.mul(wv, mag)?;
        let term = tape.sum(weighted)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or(Error::Empty("regularizer"))
}

/// Graph nodes for the terms of `G`.
#[derive(Clone, Copy, Debug)]
pub struct GNodes {
    pub total: Var,
    pub reg: Var,
    pub act: Var,
    pub att: Var,
}

impl GNodes {
    pub fn parts(&self, tape: &Tape) -> LossParts {
        LossParts {
            total: tape.scalar_value(self.total),
            reg: tape.scalar_value(self.reg),
            act: tape.scalar_value(self.act),
            att: tape.scalar_value(self.att),
            r: 0.0,
        }
    }
}

/// Everything needed to evaluate `G` on one paired batch.
pub struct DistillBatch<'a> {
    pub x: &'a Tensor,
    pub x_sup: &'a Tensor,
    pub y: &'a Tensor,
}

/// Records `G = L_REG + L_ACT + λ·L_ATT`. Teacher activations enter through
/// `detach`, so no gradient reaches `teacher` even when its nodes are
/// watched.
pub fn g_graph(
    tape: &mut Tape,
    student: (&NetworkSpec, &[Var]),
    teacher: (&NetworkSpec, &[Var]),
    batch: &DistillBatch<'_>,
    cfg: &DistillConfig,
) -> Result<GNodes> {
    check_aligned(teacher.0, student.0)?;
    let x = tape.constant(batch.x);
    let xs = tape.constant(batch.x_sup);
    let y = tape.constant(batch.y);
    let fs = forward_on_tape(tape, student.0, student.1, x)?;
    let ft = forward_on_tape(tape, teacher.0, teacher.1, xs)?;
    let teacher_hidden: Vec<Var> = ft.hidden.iter().map(|&h| tape.detach(h)).collect();
    let reg = reg_loss_graph(tape, fs.output, y)?;
    let (&ls, &lt) = match (fs.hidden.last(), teacher_hidden.last()) {
        (Some(s), Some(t)) => (s, t),
        _ => return Err(Error::InvalidSpec("distillation needs a hidden layer".into())),
    };
    let act = reg_loss_graph(tape, ls, lt)?;
    let att = att_loss_graph(
        tape,
        &fs.hidden,
        &teacher_hidden,
        &student.0.trace_shapes(),
        &cfg.attention_layers,
    )?;
    let weighted = tape.scale(att, cfg.lambda)?;
    let dist = tape.add(act, weighted)?;
    let total = tape.add(reg, dist)?;
    Ok(GNodes { total, reg, act, att })
}

/// Records `F = L_REG + R(θ; φ)`; returns `(total, reg, r)` nodes.
pub fn f_graph(
    tape: &mut Tape,
    student: (&NetworkSpec, &[Var]),
    x: &Tensor,
    y: &Tensor,
    phi: Option<&RegularizerWeights>,
) -> Result<(Var, Var, Option<Var>)> {
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let fwd = forward_on_tape(tape, student.0, student.1, xv)?;
    let reg = reg_loss_graph(tape, fwd.output, yv)?;
    match phi {
        Some(phi) => {
            let r = regularizer_graph(tape, student.1, phi)?;
            Ok((tape.add(reg, r)?, reg, Some(r)))
        }
        None => Ok((reg, reg, None)),
    }
}

// ---------------------------------------------------------------------------
// value-level API

pub fn reg_loss(pred: &Tensor, y: &Tensor) -> Result<f64> {
    if pred.shape() != y.shape() {
        return Err(Error::shape(
            "reg_loss",
            format!("{:?} vs {:?}", pred.shape(), y.shape()),
        ));
    }
    let mut tape = Tape::new();
    let (p, t) = (tape.constant(pred), tape.constant(y));
    let l = reg_loss_graph(&mut tape, p, t)?;
    Ok(tape.scalar_value(l))
}

/// Batched `(B, C, S)` or single `(C, S)` layer as a `(B, C·S)` matrix.
fn as_rows(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [c, s] => t.reshape(&[1, c * s]),
        [b, c, s] => t.reshape(&[*b, c * s]),
        other => Err(Error::shape("trace", format!("unexpected layer shape {other:?}"))),
    }
}

fn layer_cs(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [c, s] | [_, c, s] => Ok((*c, *s)),
        other => Err(Error::shape("trace", format!("unexpected layer shape {other:?}"))),
    }
}

/// Squared distance between the final hidden activations, batch-averaged.
pub fn act_loss(student: &ActivationTrace, teacher: &ActivationTrace) -> Result<f64> {
    let (s, t) = match (student.last(), teacher.last()) {
        (Some(s), Some(t)) => (s, t),
        _ => return Err(Error::Empty("activation trace")),
    };
    if s.shape() != t.shape() {
        return Err(Error::shape("act_loss", format!("{:?} vs {:?}", s.shape(), t.shape())));
    }
    reg_loss(&as_rows(s)?, &as_rows(t)?)
}

/// Channel-wise attention of a `(C, S)` map, ℓ2-normalized; the zero map when
/// the raw attention has (near) zero norm.
pub fn attention_map(q: &Tensor) -> Result<Tensor> {
    let (c, s) = match q.shape() {
        [c, s] => (*c, *s),
        other => return Err(Error::shape("attention_map", format!("expected (C, S), got {other:?}"))),
    };
    let mut tape = Tape::new();
    let qv = tape.constant_owned(q.reshape(&[1, c * s])?);
    let a = attention_graph(&mut tape, qv, c, s)?;
    tape.value(a).reshape(&[s])
}

pub fn att_loss(student: &ActivationTrace, teacher: &ActivationTrace, layers: &[usize]) -> Result<f64> {
    if student.layers.len() != teacher.layers.len() {
        return Err(Error::shape("att_loss", "trace lengths differ"));
    }
    let mut tape = Tape::new();
    let mut sv = Vec::new();
    let mut tv = Vec::new();
    let mut shapes = Vec::new();
    for (s, t) in student.layers.iter().zip(&teacher.layers) {
        if s.shape() != t.shape() {
            return Err(Error::shape("att_loss", format!("{:?} vs {:?}", s.shape(), t.shape())));
        }
        shapes.push(layer_cs(s)?);
        sv.push(tape.constant_owned(as_rows(s)?));
        tv.push(tape.constant_owned(as_rows(t)?));
    }
    let l = att_loss_graph(&mut tape, &sv, &tv, &shapes, layers)?;
    Ok(tape.scalar_value(l))
}

/// `L_ACT + λ·L_ATT`.
pub fn dist_loss(student: &ActivationTrace, teacher: &ActivationTrace, cfg: &DistillConfig) -> Result<f64> {
    Ok(act_loss(student, teacher)? + cfg.lambda * att_loss(student, teacher, &cfg.attention_layers)?)
}

pub fn regularizer_r(theta: &ParamSet, phi: &RegularizerWeights) -> Result<f64> {
    phi.check_matches(theta)?;
    let mut tape = Tape::new();
    let vars = tape.constants(theta);
    let r = regularizer_graph(&mut tape, &vars, phi)?;
    Ok(tape.scalar_value(r))
}

/// Value and student gradient of `G` on one paired batch.
pub fn loss_g_grad(
    student: &Network,
    teacher: &Network,
    batch: &DistillBatch<'_>,
    cfg: &DistillConfig,
) -> Result<(LossParts, ParamSet)> {
    let mut tape = Tape::new();
    let sv = tape.watch(&student.params);
    let tv = tape.constants(&teacher.params);
    let nodes = g_graph(&mut tape, (&student.spec, &sv), (&teacher.spec, &tv), batch, cfg)?;
    let grads = tape.backward(nodes.total)?;
    Ok((nodes.parts(&tape), grads.collect(&sv, &student.params)?))
}

pub fn loss_g(
    student: &Network,
    teacher: &Network,
    batch: &DistillBatch<'_>,
    cfg: &DistillConfig,
) -> Result<LossParts> {
    let mut tape = Tape::new();
    let sv = tape.constants(&student.params);
    let tv = tape.constants(&teacher.params);
    let nodes = g_graph(&mut tape, (&student.spec, &sv), (&teacher.spec, &tv), batch, cfg)?;
    Ok(nodes.parts(&tape))
}

/// Value and gradient of `F` (or of plain `L_REG` when `phi` is `None`).
pub fn loss_f_grad(
    student: &Network,
    x: &Tensor,
    y: &Tensor,
    phi: Option<&RegularizerWeights>,
) -> Result<(LossParts, ParamSet)> {
    if let Some(phi) = phi {
        phi.check_matches(&student.params)?;
    }
    let mut tape = Tape::new();
    let sv = tape.watch(&student.params);
    let (total, reg, r) = f_graph(&mut tape, (&student.spec, &sv), x, y, phi)?;
    let grads = tape.backward(total)?;
    let parts = LossParts {
        total: tape.scalar_value(total),
        reg: tape.scalar_value(reg),
        r: r.map(|r| tape.scalar_value(r)).unwrap_or(0.0),
        ..LossParts::default()
    };
    Ok((parts, grads.collect(&sv, &student.params)?))
}

pub fn loss_f(student: &Network, x: &Tensor, y: &Tensor, phi: Option<&RegularizerWeights>) -> Result<LossParts> {
    if let Some(phi) = phi {
        phi.check_matches(&student.params)?;
    }
    let mut tape = Tape::new();
    let sv = tape.constants(&student.params);
    let (total, reg, r) = f_graph(&mut tape, (&student.spec, &sv), x, y, phi)?;
    Ok(LossParts {
        total: tape.scalar_value(total),
        reg: tape.scalar_value(reg),
        r: r.map(|r| tape.scalar_value(r)).unwrap_or(0.0),
        ..LossParts::default()
    })
}
