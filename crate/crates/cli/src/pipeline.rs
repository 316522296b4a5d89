//! Per-arm training runs and their on-disk outputs.
//!
//! Every run writes to `<out>/<arm>/seed<k>/`: checkpoints, `losses.csv`,
//! `metrics.csv`, `histogram.csv` and the effective `config.json`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use kap_core::checkpoint::{load_network, load_regularizer, save_network, save_regularizer};
use kap_core::diffcore::Tensor;
use kap_core::losses::{NormKind, RegularizerWeights};
use kap_core::meta::{
    baseline_train, distill_student, meta_test, meta_train, regression_student, train_teacher, ConstantRegularizer,
    LossRecord,
};
use kap_core::metrics::{evaluate, MetricsRecord, ParamStats};
use kap_core::nets::Network;
use kap_core::synthdata::{load_bundle, DatasetBundle};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const THREADS_ENV: &str = "KAP_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Teacher,
    Baseline,
    Distill,
    MetaTrain,
    MetaTest,
    Sweep,
}

impl Arm {
    /// Dependency order.
    pub const ALL: [Arm; 6] = [
        Arm::Teacher,
        Arm::Baseline,
        Arm::Distill,
        Arm::MetaTrain,
        Arm::MetaTest,
        Arm::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Teacher => "teacher",
            Arm::Baseline => "baseline",
            Arm::Distill => "distill",
            Arm::MetaTrain => "meta-train",
            Arm::MetaTest => "meta-test",
            Arm::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .with_context(|| format!("unknown arm {s:?}"))
    }
}

/// Setting labels used in metrics rows.
pub const SOURCE: &str = "source";
pub const TARGET: &str = "target";

pub fn sweep_setting(norm: NormKind, sigma: f64) -> String {
    format!("l{}-sigma{:e}", norm.exponent(), sigma)
}

/// Loads a dataset and checks it was generated from `cfg`.
pub fn load_data(cfg: &ExperimentConfig, path: &Path) -> Result<DatasetBundle> {
    let bundle = load_bundle(path).with_context(|| format!("loading data from {}", path.display()))?;
    if bundle.world != cfg.world || bundle.counts != cfg.counts || bundle.noise_seed != cfg.noise_seed {
        bail!(
            "{} was generated from a different world, counts or noise seed",
            path.display()
        );
    }
    Ok(bundle)
}

/// Parallel run cap from `KAP_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("{THREADS_ENV} must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(1),
    }
}

pub struct Pipeline<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a DatasetBundle,
    pub out: PathBuf,
    hash: String,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub arm: Arm,
    pub seed: u64,
    pub dir: PathBuf,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    config_hash: &'a str,
    arm: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
}

struct RunWriter {
    arm: Arm,
    seed: u64,
    run_id: String,
    hash: String,
    dir: PathBuf,
    losses: Vec<(String, LossRecord)>,
    evals: Vec<(MetricsRecord, ParamStats)>,
    extra_stats: Vec<(String, ParamStats)>,
}

impl RunWriter {
    fn losses(&mut self, setting: &str, series: &[LossRecord]) {
        self.losses.extend(series.iter().map(|r| (setting.to_string(), *r)));
    }

    fn finish(self, cfg: &ExperimentConfig) -> Result<RunOutput> {
        let echo = ConfigEcho {
            config_hash: &self.hash,
            arm: self.arm.name(),
            seed: self.seed,
            config: cfg,
        };
        fs::write(
            self.dir.join("config.json"),
            serde_json::to_string_pretty(&echo)? + "\n",
        )?;

        let mut w = csv::Writer::from_path(self.dir.join("losses.csv"))?;
        w.write_record([
            "run_id",
            "config_hash",
            "arm",
            "seed",
            "setting",
            "phase",
            "iteration",
            "loss_total",
            "loss_reg",
            "loss_act",
            "loss_att",
            "loss_R",
        ])?;
        for (setting, r) in &self.losses {
            let p = r.parts;
            w.write_record([
                self.run_id.clone(),
                self.hash.clone(),
                self.arm.name().to_string(),
                self.seed.to_string(),
                setting.clone(),
                r.phase.name().to_string(),
                r.iteration.to_string(),
                p.total.to_string(),
                p.reg.to_string(),
                p.act.to_string(),
                p.att.to_string(),
                p.r.to_string(),
            ])?;
        }
        w.flush()?;

        let thresholds: Vec<f64> = cfg.eval.thresholds.clone();
        let mut w = csv::Writer::from_path(self.dir.join("metrics.csv"))?;
        let mut header: Vec<String> = ["run_id", "config_hash", "arm", "setting", "seed", "epe", "auc"]
            .map(String::from)
            .to_vec();
        header.extend(thresholds.iter().map(|t| format!("pck@{t}")));
        header.extend(["near_zero_frac".to_string(), "abs_max".to_string()]);
        w.write_record(&header)?;
        for (m, _) in &self.evals {
            let mut row = vec![
                self.run_id.clone(),
                self.hash.clone(),
                self.arm.name().to_string(),
                m.setting.clone(),
                m.seed.to_string(),
                m.epe.to_string(),
                m.auc.to_string(),
            ];
            row.extend(m.pck.iter().map(|(_, v)| v.to_string()));
            row.extend([m.near_zero_frac.to_string(), m.abs_max.to_string()]);
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(self.dir.join("histogram.csv"))?;
        w.write_record(["arm", "seed", "setting", "bin_lo", "bin_hi", "count"])?;
        let stats = self
            .evals
            .iter()
            .map(|(m, s)| (m.setting.as_str(), s))
            .chain(self.extra_stats.iter().map(|(n, s)| (n.as_str(), s)));
        for (setting, s) in stats {
            let h = &s.histogram;
            let width = h.bin_width();
            for (i, c) in h.counts.iter().enumerate() {
                let lo = h.lo + width * i as f64;
                w.write_record([
                    self.arm.name().to_string(),
                    self.seed.to_string(),
                    setting.to_string(),
                    lo.to_string(),
                    (lo + width).to_string(),
                    c.to_string(),
                ])?;
            }
        }
        w.flush()?;

        Ok(RunOutput {
            arm: self.arm,
            seed: self.seed,
            dir: self.dir,
            metrics: self.evals.into_iter().map(|(m, _)| m).collect(),
        })
    }
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data: &'a DatasetBundle, out: impl Into<PathBuf>) -> Self {
        Self {
            cfg,
            data,
            out: out.into(),
            hash: cfg.hash(),
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn run_dir(&self, arm: Arm, seed: u64) -> PathBuf {
        self.out.join(arm.name()).join(format!("seed{seed}"))
    }

    fn writer(&self, arm: Arm, seed: u64) -> Result<RunWriter> {
        let dir = self.run_dir(arm, seed);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(RunWriter {
            arm,
            seed,
            run_id: format!("{}-seed{}-{}", arm.name(), seed, &self.hash[..12]),
            hash: self.hash.clone(),
            dir,
            losses: Vec::new(),
            evals: Vec::new(),
            extra_stats: Vec::new(),
        })
    }

    fn eval(
        &self,
        setting: &str,
        seed: u64,
        net: &Network,
        x: &Tensor,
        y: &Tensor,
    ) -> Result<(MetricsRecord, ParamStats)> {
        let pred = net.predict(x)?;
        Ok(evaluate(setting, seed, &pred, y, &net.params, &self.cfg.eval)?)
    }

    /// The seed's teacher: its checkpoint when the teacher arm has run, a
    /// fresh (identical) training run otherwise.
    fn teacher(&self, seed: u64) -> Result<Network> {
        let spec = self.cfg.teacher_spec(seed);
        let path = self.run_dir(Arm::Teacher, seed).join("teacher.ckpt.json");
        if path.exists() {
            let net = load_network(&path)?;
            if net.spec != spec {
                bail!("{} does not match the configured teacher", path.display());
            }
            return Ok(net);
        }
        Ok(train_teacher(&self.data.source_train, &spec, &self.cfg.teacher_config(seed))?.net)
    }

    pub fn run(&self, arm: Arm, seed: u64) -> Result<RunOutput> {
        self.run_inner(arm, seed)
            .with_context(|| format!("arm {arm}, seed {seed}"))
    }

    fn run_inner(&self, arm: Arm, seed: u64) -> Result<RunOutput> {
        let cfg = self.cfg;
        let d = self.data;
        let student_spec = cfg.student_spec(seed);
        let (sv, tt) = (&d.source_val, &d.target_test);
        if arm == Arm::MetaTest {
            // fail before creating any output
            self.phi_path_checked(seed)?;
        }
        let mut w = self.writer(arm, seed)?;
        match arm {
            Arm::Teacher => {
                let t = train_teacher(&d.source_train, &cfg.teacher_spec(seed), &cfg.teacher_config(seed))?;
                save_network(&t.net, &w.dir.join("teacher.ckpt.json"))?;
                w.losses(SOURCE, &t.series);
                w.evals.push(self.eval(SOURCE, seed, &t.net, &sv.x_sup, &sv.y)?);
            }
            Arm::Baseline => {
                let src = regression_student(&d.source_train, &student_spec, &cfg.distill, &cfg.student_config(seed))?;
                save_network(&src.student, &w.dir.join("student-source.ckpt.json"))?;
                w.losses(SOURCE, &src.warmup);
                w.losses(SOURCE, &src.finetune);
                w.evals.push(self.eval(SOURCE, seed, &src.student, &sv.x, &sv.y)?);

                let tgt = baseline_train(&d.target_train, &student_spec, None, &cfg.target_config(seed))?;
                save_network(&tgt.net, &w.dir.join("net-target.ckpt.json"))?;
                w.losses(TARGET, &tgt.series);
                w.evals.push(self.eval(TARGET, seed, &tgt.net, &tt.x, &tt.y)?);
            }
            Arm::Distill => {
                let teacher = self.teacher(seed)?;
                let out = distill_student(
                    &d.source_train,
                    &teacher,
                    &student_spec,
                    &cfg.distill,
                    &cfg.student_config(seed),
                )?;
                save_network(&out.student, &w.dir.join("student.ckpt.json"))?;
                w.losses(SOURCE, &out.warmup);
                w.losses(SOURCE, &out.finetune);
                w.evals.push(self.eval(SOURCE, seed, &out.student, &sv.x, &sv.y)?);
            }
            Arm::MetaTrain => {
                let teacher = self.teacher(seed)?;
                let out = meta_train(
                    &d.source_train,
                    &teacher,
                    &student_spec,
                    &cfg.distill,
                    &cfg.meta_config(seed),
                )?;
                save_regularizer(&student_spec, &out.phi, &w.dir.join("phi.ckpt.json"))?;
                save_network(&out.student, &w.dir.join("student.ckpt.json"))?;
                w.losses(SOURCE, &out.warmup);
                w.losses(SOURCE, &out.series);
                w.evals.push(self.eval(SOURCE, seed, &out.student, &sv.x, &sv.y)?);
                let phi_stats =
                    kap_core::metrics::param_stats(&out.phi.weights, cfg.eval.near_zero_eps, cfg.eval.histogram_bins)?;
                w.extra_stats.push(("phi".to_string(), phi_stats));
            }
            Arm::MetaTest => {
                let phi = self.regularizer(seed)?;
                let out = meta_test(&d.target_train, &student_spec, &phi, &cfg.target_config(seed))?;
                save_network(&out.net, &w.dir.join("net.ckpt.json"))?;
                w.losses(TARGET, &out.series);
                w.evals.push(self.eval(TARGET, seed, &out.net, &tt.x, &tt.y)?);
            }
            Arm::Sweep => {
                for &p in &cfg.sweep.norms {
                    let norm = NormKind::from_exponent(p)?;
                    for &sigma in &cfg.sweep.sigmas {
                        let setting = sweep_setting(norm, sigma);
                        let reg = ConstantRegularizer { norm, sigma };
                        let out = baseline_train(&d.target_train, &student_spec, Some(reg), &cfg.target_config(seed))?;
                        save_network(&out.net, &w.dir.join(format!("net-{setting}.ckpt.json")))?;
                        w.losses(&setting, &out.series);
                        w.evals.push(self.eval(&setting, seed, &out.net, &tt.x, &tt.y)?);
                    }
                }
            }
        }
        w.finish(cfg)
    }

    fn phi_path_checked(&self, seed: u64) -> Result<PathBuf> {
        let path = self.run_dir(Arm::MetaTrain, seed).join("phi.ckpt.json");
        if !path.exists() {
            bail!(
                "missing regularizer checkpoint {}; run the meta-train arm for seed {seed} first",
                path.display()
            );
        }
        Ok(path)
    }

    fn regularizer(&self, seed: u64) -> Result<RegularizerWeights> {
        let path = self.phi_path_checked(seed)?;
        let (spec, phi) = load_regularizer(&path)?;
        let want = self.cfg.student_spec(seed);
        if spec.input_dim != want.input_dim || spec.hidden != want.hidden || spec.output_dim != want.output_dim {
            bail!("{} was learned for a different student layout", path.display());
        }
        Ok(phi)
    }

    /// Runs `arms` in order for every seed; seeds run in parallel on up to
    /// `threads` workers.
    pub fn run_all(&self, arms: &[Arm], seeds: &[u64], threads: usize) -> Result<Vec<RunOutput>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .context("building worker pool")?;
        let per_seed: Vec<Result<Vec<RunOutput>>> = pool.install(|| {
            seeds
                .par_iter()
                .map(|&seed| arms.iter().map(|&arm| self.run(arm, seed)).collect())
                .collect()
        });
        let mut out = Vec::new();
        for r in per_seed {
            out.extend(r?);
        }
        Ok(out)
    }
}
