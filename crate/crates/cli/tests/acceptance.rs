//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report is always shown.
//! The exit status is non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kap_cli::config::ExperimentConfig;
use kap_cli::pipeline::{sweep_setting, threads_from_env, Arm, Pipeline, SOURCE, TARGET};
use kap_cli::report::{median, read_runs, MetricsRow};
use kap_core::diffcore::{finite_diff_grad, max_relative_error, value_and_grad, ParamSet, Tape, Tensor};
use kap_core::losses::{
    act_loss, att_loss, attention_map, dist_loss, f_graph, g_graph, loss_f, loss_f_grad, loss_g, reg_loss,
    regularizer_graph, regularizer_r, DistillBatch, DistillConfig, NormKind, RegularizerWeights,
};
use kap_core::meta::{
    baseline_train, decay_step, inner_update, loss_ema, meta_grad_phi, meta_test, meta_train, phi_jacobian,
    ConstantRegularizer, LossRecord, MetaGradInputs, MetaGradMode, Phase, SourceBatch, TrainConfig,
};
use kap_core::metrics::{auc, epe, param_stats, pck_curve};
use kap_core::nets::{Activation, ActivationTrace, HiddenLayer, Network, NetworkSpec};
use kap_core::synthdata::{gen_bundle, load_bundle, save_bundle, DatasetBundle, World};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_like(layout: &ParamSet, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ParamSet {
    let mut p = layout.zeros_like();
    let flat: Vec<f64> = (0..p.numel()).map(|_| rng.random_range(lo..hi)).collect();
    p.set_flat(&flat).unwrap();
    p
}

/// A random student/teacher pair with at most 500 student parameters and a paired batch.
struct State {
    student: Network,
    teacher: Network,
    batch: SourceBatch,
    cfg: DistillConfig,
}

fn random_state(seed: u64) -> State {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
    let hidden = vec![
        HiddenLayer::new(8, 2, acts[seed as usize % 3]),
        HiddenLayer::new(12, 4, acts[(seed as usize + 1) % 3]),
    ];
    let spec = |input_dim, init_seed| NetworkSpec {
        input_dim,
        hidden: hidden.clone(),
        output_dim: 3,
        init_seed,
    };
    let student = Network::init(spec(4, seed)).unwrap();
    let teacher = Network::init(spec(5, seed + 1000)).unwrap();
    assert!(student.params.numel() <= 500);
    let b = 6;
    State {
        batch: SourceBatch {
            x: rand_tensor(&mut rng, b, 4),
            x_sup: rand_tensor(&mut rng, b, 5),
            y: rand_tensor(&mut rng, b, 3),
        },
        cfg: DistillConfig {
            lambda: 5.0,
            ..DistillConfig::all_layers(&student.spec)
        },
        student,
        teacher,
    }
}

fn max_abs_diff(a: &ParamSet, b: &ParamSet) -> f64 {
    a.values()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn with_params(net: &Network, p: &ParamSet) -> Network {
    Network::with_params(net.spec.clone(), p.clone()).unwrap()
}

fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut abs: f64 = 0.0;
    let seeds = 20;
    for seed in 0..seeds {
        let s = random_state(seed);
        let b = s.batch.as_distill();
        let mut tape = Tape::new();
        let sv = tape.watch(&s.student.params);
        let tv = tape.constants(&s.teacher.params);
        let nodes = g_graph(&mut tape, (&s.student.spec, &sv), (&s.teacher.spec, &tv), &b, &s.cfg).unwrap();
        let grad = |root| tape.backward(root).unwrap().collect(&sv, &s.student.params).unwrap();
        let fd = |f: &dyn Fn(&Network) -> kap_core::Result<f64>| {
            finite_diff_grad(|p| f(&with_params(&s.student, p)), &s.student.params, 1e-6).unwrap()
        };
        let teacher_trace = s.teacher.forward_trace(&s.batch.x_sup).unwrap().1;
        let trace = |n: &Network| -> ActivationTrace { n.forward_trace(&s.batch.x).unwrap().1 };
        let pairs = [
            (grad(nodes.reg), fd(&|n| reg_loss(&n.predict(&s.batch.x)?, &s.batch.y))),
            (grad(nodes.act), fd(&|n| act_loss(&trace(n), &teacher_trace))),
            (
                grad(nodes.att),
                fd(&|n| att_loss(&trace(n), &teacher_trace, &s.cfg.attention_layers)),
            ),
            (grad(nodes.total), fd(&|n| Ok(loss_g(n, &s.teacher, &b, &s.cfg)?.total))),
        ];
        for (a, n) in &pairs {
            worst = worst.max(max_relative_error(a, n, 1e-8).unwrap());
            abs = abs.max(max_abs_diff(a, n));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        for norm in [NormKind::L2, NormKind::L1] {
            let phi = RegularizerWeights {
                weights: random_like(&s.student.params, &mut rng, -0.5, 1.0),
                norm,
            };
            let (_, gr) = value_and_grad(&s.student.params, |t, v| regularizer_graph(t, v, &phi)).unwrap();
            let nr = finite_diff_grad(|p| regularizer_r(p, &phi), &s.student.params, 1e-6).unwrap();
            let (_, gf) = loss_f_grad(&s.student, &s.batch.x, &s.batch.y, Some(&phi)).unwrap();
            let nf = fd(&|n| Ok(loss_f(n, &s.batch.x, &s.batch.y, Some(&phi))?.total));
            worst = worst.max(max_relative_error(&gr, &nr, 1e-8).unwrap());
            worst = worst.max(max_relative_error(&gf, &nf, 1e-8).unwrap());
            abs = abs.max(max_abs_diff(&gr, &nr)).max(max_abs_diff(&gf, &nf));
        }
    }
    (
        worst < 1e-5,
        format!("{seeds} seeds, L_REG/L_ACT/L_ATT/G/F/R, max relative error {worst:.2e} (< 1e-5), max absolute difference {abs:.2e}"),
    )
}

fn meta_inputs<'a>(s: &'a State, alpha: f64, mode: MetaGradMode) -> MetaGradInputs<'a> {
    MetaGradInputs {
        batch: &s.batch,
        teacher: &s.teacher,
        distill: &s.cfg,
        alpha,
        inner_steps: 1,
        mode,
        fd_eps: 1e-6,
    }
}

fn scalar_toy() -> (f64, f64) {
    let one = |v: f64| {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(v)).unwrap();
        p
    };
    let (theta, alpha) = (one(2.0), 0.1);
    let phi = RegularizerWeights {
        weights: one(0.0),
        norm: NormKind::L2,
    };
    let grad_reg = theta.map(|t| 2.0 * (t - 1.0));
    let inner = decay_step(&theta, &phi, &grad_reg, alpha).unwrap();
    let closed = inner
        .map(|t| 2.0 * t)
        .zip_map(&phi_jacobian(&theta, NormKind::L2, alpha), |a, j| a * j)
        .unwrap()
        .to_flat()[0];
    let fd = finite_diff_grad(
        |w| {
            let p = RegularizerWeights {
                weights: w.clone(),
                norm: NormKind::L2,
            };
            Ok(decay_step(&theta, &p, &grad_reg, alpha)?.to_flat()[0].powi(2))
        },
        &phi.weights,
        1e-6,
    )
    .unwrap()
    .to_flat()[0];
    (closed, fd)
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut abs: f64 = 0.0;
    let states = 10;
    for seed in 0..states {
        let s = random_state(seed + 100);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for norm in [NormKind::L2, NormKind::L1] {
            let phi = RegularizerWeights {
                weights: random_like(&s.student.params, &mut rng, -0.5, 0.5),
                norm,
            };
            let closed = meta_grad_phi(&s.student, &phi, &meta_inputs(&s, 0.05, MetaGradMode::ClosedForm)).unwrap();
            let oracle =
                meta_grad_phi(&s.student, &phi, &meta_inputs(&s, 0.05, MetaGradMode::FiniteDiffOracle)).unwrap();
            worst = worst.max(max_relative_error(&closed.grad, &oracle.grad, 1e-8).unwrap());
            abs = abs.max(max_abs_diff(&closed.grad, &oracle.grad));
        }
    }
    let (toy, toy_fd) = scalar_toy();
    let toy_ok = (toy + 1.44).abs() <= 1e-14 && (toy_fd + 1.44).abs() <= 1e-8;
    (
        worst < 1e-5 && toy_ok,
        format!("{states} states x {{l1, l2}}, max relative error {worst:.2e} (< 1e-5), max absolute difference {abs:.2e}; scalar toy {toy} (FD {toy_fd:.9})"),
    )
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    let states = 10;
    for seed in 0..states {
        let s = random_state(seed + 200);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for norm in [NormKind::L2, NormKind::L1] {
            let phi = RegularizerWeights {
                weights: random_like(&s.student.params, &mut rng, -1.0, 1.0),
                norm,
            };
            let alpha = 0.05;
            let closed = inner_update(&s.student, &phi, &s.batch.x, &s.batch.y, alpha, 1).unwrap();
            let (_, gf) = value_and_grad(&s.student.params, |t, v| {
                Ok(f_graph(t, (&s.student.spec, v), &s.batch.x, &s.batch.y, Some(&phi))?.0)
            })
            .unwrap();
            let generic = s.student.params.zip_map(&gf, |t, g| t - alpha * g).unwrap();
            for (a, b) in closed.params.values().zip(generic.values()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    (
        worst <= 1e-12,
        format!("{states} states x {{l1, l2}}, max element-wise difference {worst:.2e} (<= 1e-12)"),
    )
}

fn criterion_4(cfg: &ExperimentConfig, data: &DatasetBundle) -> Outcome {
    let spec = cfg.student_spec(0);
    let train = TrainConfig {
        iters: 300,
        ..cfg.target_config(0)
    };
    let target = &data.target_train;
    let layout = Network::init(spec.clone()).unwrap().params;
    let none = baseline_train(target, &spec, None, &train).unwrap();
    let zero = meta_test(target, &spec, &RegularizerWeights::zeros(&layout, NormKind::L2), &train).unwrap();
    let zero_ok = zero.net == none.net;

    let sigma = 1e-3;
    let l2 = baseline_train(
        target,
        &spec,
        Some(ConstantRegularizer {
            norm: NormKind::L2,
            sigma,
        }),
        &train,
    )
    .unwrap();
    let constant = meta_test(
        target,
        &spec,
        &RegularizerWeights::constant(&layout, sigma, NormKind::L2),
        &train,
    )
    .unwrap();
    let const_ok = constant.net == l2.net;

    let teacher = kap_core::meta::train_teacher(
        &data.source_train,
        &cfg.teacher_spec(0),
        &TrainConfig {
            iters: 200,
            ..cfg.teacher_config(0)
        },
    )
    .unwrap()
    .net;
    let mut mcfg = cfg.meta_config(0);
    mcfg.beta = 0.0;
    mcfg.iters = 100;
    let dcfg = DistillConfig {
        warmup_iters: 50,
        finetune_iters: 100,
        ..cfg.distill.clone()
    };
    let frozen = meta_train(&data.source_train, &teacher, &spec, &dcfg, &mcfg).unwrap();
    let beta_ok = frozen.phi.weights.values().all(|v| v == 0.0);
    (
        zero_ok && const_ok && beta_ok,
        format!("phi=0 vs none bitwise: {zero_ok}; phi=sigma vs l2 baseline bitwise: {const_ok}; beta=0 keeps phi: {beta_ok}"),
    )
}

struct PipelineRun {
    dir: PathBuf,
    rows: Vec<MetricsRow>,
}

fn run_pipeline(cfg: &ExperimentConfig, root: &Path) -> PipelineRun {
    fs::create_dir_all(root).unwrap();
    let data_path = root.join("data.jsonl");
    let world = World::build(&cfg.world).unwrap();
    save_bundle(&gen_bundle(&world, cfg.counts, cfg.noise_seed).unwrap(), &data_path).unwrap();
    let data = load_bundle(&data_path).unwrap();
    let runs = root.join("runs");
    let threads = threads_from_env().unwrap();
    Pipeline::new(cfg, &data, &runs)
        .run_all(&Arm::ALL, &cfg.seeds, threads)
        .unwrap();
    PipelineRun {
        rows: read_runs(&runs).unwrap(),
        dir: root.to_path_buf(),
    }
}

fn by_seed<'a>(rows: &'a [MetricsRow], arm: Arm, setting: &str) -> BTreeMap<u64, &'a MetricsRow> {
    kap_cli::report::select(rows, arm.name(), setting)
}

fn criterion_5(run: &PipelineRun) -> Outcome {
    let teacher = by_seed(&run.rows, Arm::Teacher, SOURCE);
    let base = by_seed(&run.rows, Arm::Baseline, SOURCE);
    let distill = by_seed(&run.rows, Arm::Distill, SOURCE);
    let mut ok = 0;
    let mut detail = Vec::new();
    for (seed, b) in &base {
        let (t, d) = (teacher[seed].epe, distill[seed].epe);
        if t < b.epe && d < b.epe {
            ok += 1;
        }
        detail.push(format!("s{seed} {t:.3}/{:.3}/{d:.3}", b.epe));
    }
    (
        ok >= 4,
        format!(
            "{ok}/{} seeds with teacher < baseline and distilled < baseline (EPE teacher/baseline/distilled: {})",
            base.len(),
            detail.join(", ")
        ),
    )
}

fn median_epe(rows: &[MetricsRow], arm: Arm, setting: &str) -> f64 {
    median(&by_seed(rows, arm, setting).values().map(|r| r.epe).collect::<Vec<_>>())
}

fn criterion_6(cfg: &ExperimentConfig, run: &PipelineRun) -> Outcome {
    let meta = median_epe(&run.rows, Arm::MetaTest, TARGET);
    let none = median_epe(&run.rows, Arm::Baseline, TARGET);
    let (best_setting, best) = cfg
        .sweep
        .sigmas
        .iter()
        .map(|&s| {
            let name = sweep_setting(NormKind::L2, s);
            let m = median_epe(&run.rows, Arm::Sweep, &name);
            (name, m)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    (
        meta < none && meta <= 1.05 * best,
        format!("median target EPE: meta-learned R {meta:.4}, none {none:.4}, best constant l2 ({best_setting}) {best:.4}; need R < none and R <= {:.4}", 1.05 * best),
    )
}

fn criterion_7() -> Outcome {
    let mut decreased = 0;
    for seed in 0..10 {
        let s = random_state(seed + 300);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = RegularizerWeights {
            weights: random_like(&s.student.params, &mut rng, -0.5, 0.5),
            norm: NormKind::L2,
        };
        let inp = meta_inputs(&s, 0.05, MetaGradMode::ClosedForm);
        let mg = meta_grad_phi(&s.student, &phi, &inp).unwrap();
        let stepped = RegularizerWeights {
            weights: phi.weights.zip_map(&mg.grad, |p, g| p - 1e-4 * g).unwrap(),
            norm: phi.norm,
        };
        let after = meta_grad_phi(&s.student, &stepped, &inp).unwrap().g.total;
        if after < mg.g.total {
            decreased += 1;
        }
    }
    (decreased >= 9, format!("{decreased}/10 states strictly decrease G"))
}

fn criterion_8(run: &PipelineRun) -> Outcome {
    let meta = by_seed(&run.rows, Arm::MetaTest, TARGET);
    let none = by_seed(&run.rows, Arm::Baseline, TARGET);
    let mut ok = 0;
    let mut detail = Vec::new();
    for (seed, n) in &none {
        let m = meta[seed];
        if m.near_zero_frac > n.near_zero_frac && m.abs_max >= n.abs_max {
            ok += 1;
        }
        detail.push(format!(
            "s{seed} near-zero {:.4}/{:.4} abs-max {:.3}/{:.3}",
            m.near_zero_frac, n.near_zero_frac, m.abs_max, n.abs_max
        ));
    }
    (
        ok >= 4,
        format!("{ok}/{} seeds (meta/none: {})", none.len(), detail.join(", ")),
    )
}

fn criterion_9() -> Outcome {
    let t = |shape: &[usize], d: &[f64]| Tensor::new(shape.to_vec(), d.to_vec()).unwrap();
    let tr = |layers: Vec<Tensor>| ActivationTrace { layers };
    let mut failed: Vec<&str> = Vec::new();
    let mut check = |name: &'static str, ok: bool| {
        if !ok {
            failed.push(name);
        }
    };

    let y = t(&[1, 3], &[3.0, 4.0, 12.0]);
    check("epe identity", epe(&y, &y).unwrap() == 0.0);
    check("epe 5-12-13", epe(&t(&[1, 3], &[0.0; 3]), &y).unwrap() == 13.0);
    check(
        "epe mean over joints",
        epe(&t(&[1, 6], &[0.0; 6]), &t(&[1, 6], &[3.0, 4.0, 12.0, 0.0, 0.0, 0.0])).unwrap() == 6.5,
    );
    let pck = pck_curve(&[1.0, 2.0, 3.0], &[0.0, 2.0, 3.0, 10.0]).unwrap();
    check("pck count", pck[1].1 == 2.0 / 3.0);
    check("pck saturation", pck[2].1 == 1.0 && pck[3].1 == 1.0);
    check("pck floor", pck[0].1 == 0.0);
    check(
        "auc constant",
        auc(&[(0.0, 1.0), (0.5, 1.0), (2.0, 1.0)]).unwrap() == 1.0,
    );
    check("auc ramp", auc(&[(0.0, 0.0), (1.0, 1.0)]).unwrap() == 0.5);
    check(
        "auc trapezoid",
        auc(&[(0.0, 0.0), (1.0, 0.5), (2.0, 1.0)]).unwrap() == 0.5,
    );
    let mut p = ParamSet::new();
    p.push("w", t(&[3], &[0.0, 0.0, 1.0])).unwrap();
    let st = param_stats(&p, 1e-3, 11).unwrap();
    check("param stats count", st.near_zero_frac == 2.0 / 3.0 && st.abs_max == 1.0);
    let z = p.map(|_| 0.0);
    let st = param_stats(&z, 1e-3, 11).unwrap();
    check(
        "param stats all zero",
        st.near_zero_frac == 1.0 && st.abs_max == 0.0 && st.histogram.counts.len() == 1,
    );

    let yb = t(&[2, 2], &[3.0, 4.0, 1.0, 0.0]);
    check("reg identity", reg_loss(&yb, &yb).unwrap() == 0.0);
    check(
        "reg 3-4",
        reg_loss(&t(&[1, 2], &[0.0, 0.0]), &t(&[1, 2], &[3.0, 4.0])).unwrap() == 25.0,
    );
    check(
        "reg batch mean",
        reg_loss(&t(&[2, 2], &[0.0, 0.0, 1.0, 0.0]), &yb).unwrap() == 12.5,
    );
    let ones = tr(vec![Tensor::filled(&[8, 8], 1.0)]);
    check("act identity", act_loss(&ones, &ones).unwrap() == 0.0);
    check(
        "act 64",
        act_loss(&tr(vec![Tensor::zeros(&[8, 8])]), &ones).unwrap() == 64.0,
    );
    let h = 1.0 / 2f64.sqrt();
    let a = attention_map(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    check("attention symmetric", a.data().iter().all(|v| (v - h).abs() <= 1e-9));
    let a = attention_map(&Tensor::filled(&[3, 4], 1.0)).unwrap();
    check("attention uniform", a.data().iter().all(|v| (v - 0.5).abs() <= 1e-9));
    let a = attention_map(&t(&[2, 1], &[3.0, 4.0])).unwrap();
    check("attention single position", (a.data()[0] - 1.0).abs() <= 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let unit = (0..20).all(|_| {
        let q = rand_tensor(&mut rng, 4, 6);
        let n: f64 = attention_map(&q)
            .unwrap()
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        (n - 1.0).abs() <= 1e-9
    });
    check("attention unit norm", unit);
    let xs = tr(vec![t(&[2, 2], &[1.0, 0.0, 0.0, 0.0])]);
    let ys = tr(vec![t(&[2, 2], &[0.0, 1.0, 0.0, 0.0])]);
    check("att identity", att_loss(&xs, &xs, &[0]).unwrap() == 0.0);
    check("att one-hots", att_loss(&xs, &ys, &[0]).unwrap() == 2.0);
    let x2 = tr(vec![xs.layers[0].clone(), t(&[1, 2], &[1.0, 1.0])]);
    let y2 = tr(vec![ys.layers[0].clone(), t(&[1, 2], &[1.0, 0.0])]);
    let (la, lb) = (att_loss(&x2, &y2, &[0]).unwrap(), att_loss(&x2, &y2, &[1]).unwrap());
    check(
        "att additive",
        (att_loss(&x2, &y2, &[0, 1]).unwrap() - (la + lb)).abs() <= 1e-15,
    );

    // act 0.5 and att 1e-3 at λ = 1e3
    let c = 0.9995f64;
    let s = (1.0 - c * c).sqrt();
    let student = tr(vec![t(&[1, 2], &[1.0, 0.0]), Tensor::zeros(&[1, 2])]);
    let teacher = tr(vec![
        t(&[1, 2], &[c.sqrt(), s.sqrt()]),
        t(&[1, 2], &[0.5f64.sqrt(), 0.0]),
    ]);
    let mut dcfg = DistillConfig {
        lambda: 1e3,
        attention_layers: vec![0],
        warmup_iters: 0,
        finetune_iters: 0,
    };
    check(
        "dist 1.5",
        (dist_loss(&student, &teacher, &dcfg).unwrap() - 1.5).abs() <= 1e-9,
    );
    dcfg.lambda = 0.0;
    check(
        "dist lambda 0",
        dist_loss(&student, &teacher, &dcfg).unwrap() == act_loss(&student, &teacher).unwrap(),
    );

    let pair = |a: f64, b: f64| {
        let mut p = ParamSet::new();
        p.push("w", t(&[2], &[a, b])).unwrap();
        p
    };
    let r =
        |theta: ParamSet, w: ParamSet, norm| regularizer_r(&theta, &RegularizerWeights { weights: w, norm }).unwrap();
    check("R zero prior", r(pair(1.0, 2.0), pair(0.0, 0.0), NormKind::L2) == 0.0);
    check("R l2", r(pair(1.0, 2.0), pair(0.5, 0.25), NormKind::L2) == 1.5);
    check("R l1", r(pair(-2.0, 3.0), pair(1.0, 0.5), NormKind::L1) == 3.5);

    let st = random_state(7);
    let zero = RegularizerWeights::zeros(&st.student.params, NormKind::L2);
    let f = loss_f(&st.student, &st.batch.x, &st.batch.y, Some(&zero)).unwrap();
    check("F with zero prior", f.total == f.reg);
    let same = DistillConfig {
        lambda: 0.0,
        ..st.cfg.clone()
    };
    let b = DistillBatch {
        x: &st.batch.x,
        x_sup: &st.batch.x,
        y: &st.batch.y,
    };
    let g = loss_g(&st.student, &st.student, &b, &same).unwrap();
    check("G reduces to regression", g.total == g.reg);

    let n = 33;
    (
        failed.is_empty(),
        if failed.is_empty() {
            format!("{n} metric and loss examples exact")
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let name = p.file_name().unwrap().to_string_lossy().to_string();
                if name.ends_with(".ckpt.json") || name == "metrics.csv" {
                    out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
                }
            }
        }
    }
    out
}

fn criterion_10(cfg: &ExperimentConfig, first: &PipelineRun, scratch: &Path) -> Outcome {
    let second = run_pipeline(cfg, &scratch.join("rerun"));
    let a = artifacts(&first.dir.join("runs"));
    let b = artifacts(&second.dir.join("runs"));
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let data_same = fs::read(first.dir.join("data.jsonl")).unwrap() == fs::read(second.dir.join("data.jsonl")).unwrap();
    (
        !a.is_empty() && a.len() == b.len() && differing.is_empty() && data_same,
        format!(
            "{} checkpoints and metric files compared, {} differ; dataset identical: {data_same}",
            a.len(),
            differing.len()
        ),
    )
}

/// EMA (decay 0.99) of G during meta-training is lower at K than at K/10.
fn ema_sanity(run: &PipelineRun, cfg: &ExperimentConfig) -> Outcome {
    let mut ok = 0;
    let mut detail = Vec::new();
    for &seed in &cfg.seeds {
        let path = run
            .dir
            .join("runs")
            .join(Arm::MetaTrain.name())
            .join(format!("seed{seed}"))
            .join("losses.csv");
        let mut r = csv::Reader::from_path(&path).unwrap();
        let h = r.headers().unwrap().clone();
        let col = |n: &str| h.iter().position(|x| x == n).unwrap();
        let (phase, total) = (col("phase"), col("loss_total"));
        let series: Vec<LossRecord> = r
            .records()
            .map(|rec| rec.unwrap())
            .filter(|rec| &rec[phase] == Phase::MetaTrain.name())
            .enumerate()
            .map(|(i, rec)| LossRecord {
                iteration: i,
                phase: Phase::MetaTrain,
                parts: kap_core::losses::LossParts {
                    total: rec[total].parse().unwrap(),
                    ..Default::default()
                },
            })
            .collect();
        let ema = loss_ema(&series, 0.99);
        let k = ema.len();
        let (early, late) = (ema[k / 10], ema[k - 1]);
        if late < early {
            ok += 1;
        }
        detail.push(format!("s{seed} {early:.2}->{late:.2}"));
    }
    (
        ok == cfg.seeds.len(),
        format!("{ok}/{} seeds ({})", cfg.seeds.len(), detail.join(", ")),
    )
}

fn main() {
    let cfg = ExperimentConfig::default_config();
    let scratch = tempfile::tempdir().unwrap();
    let mut results: Vec<(String, bool)> = Vec::new();
    let mut report = |label: &str, name: &str, start: Instant, (ok, detail): Outcome| {
        println!(
            "{label} {} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        results.push((label.to_string(), ok));
    };

    let t = Instant::now();
    report("criterion 1", "gradient correctness", t, criterion_1());
    let t = Instant::now();
    report("criterion 2", "meta-gradient equivalence", t, criterion_2());
    let t = Instant::now();
    report("criterion 3", "E-step equivalence", t, criterion_3());

    let data = gen_bundle(&World::build(&cfg.world).unwrap(), cfg.counts, cfg.noise_seed).unwrap();
    let t = Instant::now();
    report("criterion 4", "degeneracy contracts", t, criterion_4(&cfg, &data));

    let t = Instant::now();
    let run = run_pipeline(&cfg, &scratch.path().join("first"));
    println!(
        "pipeline: default config, {} seeds, all arms [{:.1}s]",
        cfg.seeds.len(),
        t.elapsed().as_secs_f64()
    );
    let t = Instant::now();
    report("criterion 5", "distillation gain", t, criterion_5(&run));
    let t = Instant::now();
    report("criterion 6", "generalization gain", t, criterion_6(&cfg, &run));
    let t = Instant::now();
    report("criterion 7", "descent direction", t, criterion_7());
    let t = Instant::now();
    report("criterion 8", "histogram property", t, criterion_8(&run));
    let t = Instant::now();
    report("criterion 9", "metric unit tests", t, criterion_9());
    let t = Instant::now();
    report(
        "criterion 10",
        "determinism",
        t,
        criterion_10(&cfg, &run, scratch.path()),
    );
    let t = Instant::now();
    report("sanity", "meta-training EMA decreases", t, ema_sanity(&run, &cfg));

    let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} checks passed", results.len());
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
