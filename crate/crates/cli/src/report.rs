//! Aggregation of per-run metrics into summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::pipeline::{Arm, SOURCE, TARGET};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub config_hash: String,
    pub arm: String,
    pub setting: String,
    pub seed: u64,
    pub epe: f64,
    pub auc: f64,
    pub pck: Vec<(f64, f64)>,
    pub near_zero_frac: f64,
    pub abs_max: f64,
}

pub fn read_metrics_file(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: missing column {name}", path.display()))
    };
    let (run_id, hash, arm, setting, seed, epe, auc, nz, am) = (
        col("run_id")?,
        col("config_hash")?,
        col("arm")?,
        col("setting")?,
        col("seed")?,
        col("epe")?,
        col("auc")?,
        col("near_zero_frac")?,
        col("abs_max")?,
    );
    let pck_cols: Vec<(usize, f64)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("pck@").map(|t| (i, t)))
        .map(|(i, t)| Ok((i, t.parse::<f64>().with_context(|| format!("bad threshold {t}"))?)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .with_context(|| format!("{}: bad number {:?}", path.display(), &rec[i]))
        };
        rows.push(MetricsRow {
            run_id: rec[run_id].to_string(),
            config_hash: rec[hash].to_string(),
            arm: rec[arm].to_string(),
            setting: rec[setting].to_string(),
            seed: rec[seed].parse()?,
            epe: num(epe)?,
            auc: num(auc)?,
            pck: pck_cols.iter().map(|&(i, t)| Ok((t, num(i)?))).collect::<Result<_>>()?,
            near_zero_frac: num(nz)?,
            abs_max: num(am)?,
        });
    }
    Ok(rows)
}

/// Every `metrics.csv` under `runs/<arm>/seed<k>/`, ordered by arm, setting and seed.
pub fn read_runs(runs: &Path) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for path in run_files(runs, "metrics.csv")? {
        rows.extend(read_metrics_file(&path)?);
    }
    if rows.is_empty() {
        bail!("no metrics found under {}", runs.display());
    }
    rows.sort_by(|a, b| (&a.arm, &a.setting, a.seed).cmp(&(&b.arm, &b.setting, b.seed)));
    Ok(rows)
}

fn run_files(runs: &Path, name: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for arm in sorted_dirs(runs)? {
        for seed in sorted_dirs(&arm)? {
            let f = seed.join(name);
            if f.is_file() {
                out.push(f);
            }
        }
    }
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Rows of one `(arm, setting)` keyed by seed.
pub fn select<'a>(rows: &'a [MetricsRow], arm: &str, setting: &str) -> BTreeMap<u64, &'a MetricsRow> {
    rows.iter()
        .filter(|r| r.arm == arm && r.setting == setting)
        .map(|r| (r.seed, r))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub arm: String,
    pub setting: String,
    pub seeds: usize,
    pub epe: f64,
    pub auc: f64,
    pub near_zero_frac: f64,
    pub abs_max: f64,
    pub pck: Vec<(f64, f64)>,
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(&str, &str), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.arm, &r.setting)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((arm, setting), g)| {
            let m = |f: fn(&MetricsRow) -> f64| median(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            let pck = g[0]
                .pck
                .iter()
                .enumerate()
                .map(|(i, &(t, _))| (t, median(&g.iter().map(|r| r.pck[i].1).collect::<Vec<_>>())))
                .collect();
            GroupSummary {
                arm: arm.to_string(),
                setting: setting.to_string(),
                seeds: g.len(),
                epe: m(|r| r.epe),
                auc: m(|r| r.auc),
                near_zero_frac: m(|r| r.near_zero_frac),
                abs_max: m(|r| r.abs_max),
                pck,
            }
        })
        .collect()
}

/// Candidate vs reference EPE over the seeds both have.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub name: String,
    pub candidate: (String, String),
    pub reference: (String, String),
    pub candidate_epe: f64,
    pub reference_epe: f64,
    /// Seeds where the candidate's EPE is strictly lower.
    pub wins: usize,
    pub paired: usize,
}

impl Comparison {
    pub fn gain(&self) -> f64 {
        self.reference_epe - self.candidate_epe
    }
}

pub fn compare(
    rows: &[MetricsRow],
    name: &str,
    candidate: (&str, &str),
    reference: (&str, &str),
) -> Option<Comparison> {
    let c = select(rows, candidate.0, candidate.1);
    let r = select(rows, reference.0, reference.1);
    let paired: Vec<(f64, f64)> = c
        .iter()
        .filter_map(|(s, cr)| r.get(s).map(|rr| (cr.epe, rr.epe)))
        .collect();
    if paired.is_empty() {
        return None;
    }
    Some(Comparison {
        name: name.to_string(),
        candidate: (candidate.0.to_string(), candidate.1.to_string()),
        reference: (reference.0.to_string(), reference.1.to_string()),
        candidate_epe: median(&paired.iter().map(|p| p.0).collect::<Vec<_>>()),
        reference_epe: median(&paired.iter().map(|p| p.1).collect::<Vec<_>>()),
        wins: paired.iter().filter(|p| p.0 < p.1).count(),
        paired: paired.len(),
    })
}

/// Sweep setting with the lowest median EPE among those starting with `prefix`.
pub fn best_sweep_setting(summary: &[GroupSummary], prefix: &str) -> Option<String> {
    summary
        .iter()
        .filter(|g| g.arm == Arm::Sweep.name() && g.setting.starts_with(prefix))
        .min_by(|a, b| a.epe.total_cmp(&b.epe))
        .map(|g| g.setting.clone())
}

pub fn standard_comparisons(rows: &[MetricsRow]) -> Vec<Comparison> {
    let summary = summarize(rows);
    let mut out = Vec::new();
    let (teacher, base, distill, mt) = (
        Arm::Teacher.name(),
        Arm::Baseline.name(),
        Arm::Distill.name(),
        Arm::MetaTest.name(),
    );
    out.extend(compare(
        rows,
        "teacher vs weak baseline",
        (teacher, SOURCE),
        (base, SOURCE),
    ));
    out.extend(compare(
        rows,
        "distilled vs weak baseline",
        (distill, SOURCE),
        (base, SOURCE),
    ));
    out.extend(compare(rows, "meta-regularized vs none", (mt, TARGET), (base, TARGET)));
    for prefix in ["l1-", "l2-"] {
        if let Some(best) = best_sweep_setting(&summary, prefix) {
            let name = format!("meta-regularized vs best {}", &prefix[..2]);
            out.extend(compare(rows, &name, (mt, TARGET), (Arm::Sweep.name(), &best)));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Report {
    pub summary: Vec<GroupSummary>,
    pub comparisons: Vec<Comparison>,
    pub markdown: String,
}

pub fn build_report(runs: &Path, out: &Path) -> Result<Report> {
    let rows = read_runs(runs)?;
    let hashes: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
    if hashes.len() > 1 {
        bail!("runs under {} mix {} config hashes", runs.display(), hashes.len());
    }
    fs::create_dir_all(out)?;
    let summary = summarize(&rows);
    let comparisons = standard_comparisons(&rows);

    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record([
        "arm",
        "setting",
        "seeds",
        "median_epe",
        "median_auc",
        "median_near_zero_frac",
        "median_abs_max",
    ])?;
    for g in &summary {
        w.write_record([
            g.arm.clone(),
            g.setting.clone(),
            g.seeds.to_string(),
            g.epe.to_string(),
            g.auc.to_string(),
            g.near_zero_frac.to_string(),
            g.abs_max.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("gains.csv"))?;
    w.write_record([
        "comparison",
        "candidate",
        "reference",
        "candidate_median_epe",
        "reference_median_epe",
        "gain",
        "seeds_won",
        "seeds",
    ])?;
    for c in &comparisons {
        w.write_record([
            c.name.clone(),
            format!("{}/{}", c.candidate.0, c.candidate.1),
            format!("{}/{}", c.reference.0, c.reference.1),
            c.candidate_epe.to_string(),
            c.reference_epe.to_string(),
            c.gain().to_string(),
            c.wins.to_string(),
            c.paired.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("pck.csv"))?;
    w.write_record(["arm", "setting", "threshold", "median_pck"])?;
    for g in &summary {
        for (t, v) in &g.pck {
            w.write_record([g.arm.clone(), g.setting.clone(), t.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;

    let mut hist = csv::Writer::from_path(out.join("histogram.csv"))?;
    let mut wrote_header = false;
    for path in run_files(runs, "histogram.csv")? {
        let mut r = csv::Reader::from_path(&path)?;
        if !wrote_header {
            hist.write_record(r.headers()?)?;
            wrote_header = true;
        }
        for rec in r.records() {
            hist.write_record(&rec?)?;
        }
    }
    hist.flush()?;

    fs::write(out.join("pck.svg"), pck_svg(&summary))?;
    let mut markdown = markdown(&summary, &comparisons);
    if let Some(path) = run_files(runs, "config.json")?.first() {
        markdown.push_str(&calibration_note(path)?);
    }
    fs::write(out.join("report.md"), &markdown)?;
    Ok(Report {
        summary,
        comparisons,
        markdown,
    })
}

fn markdown(summary: &[GroupSummary], comparisons: &[Comparison]) -> String {
    let mut s = String::from(
        "# Results\n\n| arm | setting | seeds | EPE | AUC | near-zero | abs max |\n|---|---|---|---|---|---|---|\n",
    );
    for g in summary {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            g.arm, g.setting, g.seeds, g.epe, g.auc, g.near_zero_frac, g.abs_max
        );
    }
    s.push_str("\n| comparison | candidate EPE | reference EPE | gain | seeds won |\n|---|---|---|---|---|\n");
    for c in comparisons {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:+.4} | {}/{} |",
            c.name,
            c.candidate_epe,
            c.reference_epe,
            c.gain(),
            c.wins,
            c.paired
        );
    }
    s
}

/// Constants that were rescaled for the small networks of this artifact.
fn calibration_note(config_echo: &Path) -> Result<String> {
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(config_echo)?)
        .with_context(|| format!("parsing {}", config_echo.display()))?;
    let c = &echo["config"];
    let mut s = String::from("\n## Calibration\n\n");
    let _ = writeln!(
        s,
        "- attention weight lambda = {} (set for the attention-map sizes of these networks)",
        c["distill"]["lambda"]
    );
    let _ = writeln!(
        s,
        "- student step size alpha = {} ({})",
        c["student"]["lr"],
        text(&c["student"]["optimizer"])
    );
    let _ = writeln!(
        s,
        "- prior step size beta = {} (SGD, {} prior)",
        c["meta"]["beta"],
        text(&c["meta"]["norm"])
    );
    let _ = writeln!(s, "- batch size N = {}", c["student"]["batch_size"]);
    let _ = writeln!(s, "- config hash {}", text(&echo["config_hash"]));
    Ok(s)
}

fn text(v: &serde_json::Value) -> String {
    v.as_str().map_or_else(|| v.to_string(), str::to_string)
}

/// Median PCK curves of the target-domain groups.
fn pck_svg(summary: &[GroupSummary]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 8] = [
        "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
    ];
    let groups: Vec<&GroupSummary> = summary.iter().filter(|g| g.setting != SOURCE).collect();
    let tmax = groups
        .iter()
        .flat_map(|g| g.pck.last().map(|p| p.0))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{xm}\" y=\"{yl}\" text-anchor=\"middle\">threshold (max {tmax:.3})</text>\n\
         <text x=\"12\" y=\"{ym}\" transform=\"rotate(-90 12 {ym})\" text-anchor=\"middle\">PCK</text>\n",
        y0 = H - PAD,
        x1 = W - PAD,
        xm = W / 2.0,
        yl = H - 12.0,
        ym = H / 2.0,
    );
    for (i, g) in groups.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = g
            .pck
            .iter()
            .map(|&(t, v)| {
                let x = PAD + (W - 2.0 * PAD) * t / tmax;
                let y = H - PAD - (H - 2.0 * PAD) * v;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{color}\">{}/{}</text>",
            pts.join(" "),
            W - PAD - 150.0,
            PAD + 14.0 * i as f64,
            g.arm,
            g.setting
        );
    }
    s.push_str("</svg>\n");
    s
}
