//! Pose-style evaluation metrics and parameter distribution statistics.

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Euclidean distance of every predicted joint to its ground truth. Rows are
/// samples holding `3J` coordinates laid out joint by joint.
pub fn joint_distances(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("epe", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let width = pred.len() / pred.rows();
    if width == 0 || !width.is_multiple_of(3) {
        return Err(Error::shape("epe", format!("row width {width} is not 3J")));
    }
    Ok(pred
        .data()
        .chunks(3)
        .zip(gt.data().chunks(3))
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect())
}

/// Mean per-joint position error over samples and joints.
pub fn epe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let d = joint_distances(pred, gt)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Fraction of distances `<=` each threshold.
pub fn pck_curve(distances: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if distances.is_empty() {
        return Err(Error::Empty("joint distances"));
    }
    if thresholds.iter().any(|&t| !(t >= 0.0)) || thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("thresholds must be >= 0 and ascending".into()));
    }
    let n = distances.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, distances.iter().filter(|&&d| d <= t).count() as f64 / n))
        .collect())
}

/// Trapezoidal area under a PCK curve, normalized by the threshold range.
pub fn auc(curve: &[(f64, f64)]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::InvalidConfig("AUC needs at least two points".into()));
    }
    let (t0, t1) = (curve[0].0, curve[curve.len() - 1].0);
    if !(t1 > t0) {
        return Err(Error::InvalidConfig(format!("degenerate threshold range [{t0}, {t1}]")));
    }
    // a constant curve integrates to exactly its value
    if curve.iter().all(|p| p.1 == curve[0].1) {
        return Ok(curve[0].1);
    }
    let area: f64 = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(area / (t1 - t0))
}

/// `n` evenly spaced thresholds from 0 to `max`.
pub fn linear_thresholds(max: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![max];
    }
    (0..n).map(|i| max * i as f64 / (n - 1) as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStats {
    pub histogram: Histogram,
    pub near_zero_frac: f64,
    pub abs_max: f64,
}

/// Histogram over `[-max|θ|, max|θ|]` plus near-zero fraction and max magnitude.
pub fn param_stats(params: &ParamSet, near_zero_eps: f64, bins: usize) -> Result<ParamStats> {
    if params.numel() == 0 {
        return Err(Error::Empty("parameter set"));
    }
    if !(near_zero_eps > 0.0) || bins == 0 {
        return Err(Error::InvalidConfig("near_zero_eps must be > 0 and bins >= 1".into()));
    }
    let n = params.numel();
    let abs_max = params.values().fold(0.0f64, |m, v| m.max(v.abs()));
    let near = params.values().filter(|v| v.abs() < near_zero_eps).count();
    let histogram = if abs_max == 0.0 {
        Histogram {
            lo: 0.0,
            hi: 0.0,
            counts: vec![n],
        }
    } else {
        let mut counts = vec![0; bins];
        for v in params.values() {
            let pos = (v + abs_max) / (2.0 * abs_max) * bins as f64;
            counts[(pos.floor() as usize).min(bins - 1)] += 1;
        }
        Histogram {
            lo: -abs_max,
            hi: abs_max,
            counts,
        }
    };
    Ok(ParamStats {
        histogram,
        near_zero_frac: near as f64 / n as f64,
        abs_max,
    })
}

/// One evaluation of a trained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub setting: String,
    pub seed: u64,
    pub epe: f64,
    pub pck: Vec<(f64, f64)>,
    pub auc: f64,
    pub near_zero_frac: f64,
    pub abs_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub near_zero_eps: f64,
    pub histogram_bins: usize,
}

/// Scores `pred` against `gt` and summarizes `params`.
pub fn evaluate(
    setting: &str,
    seed: u64,
    pred: &Tensor,
    gt: &Tensor,
    params: &ParamSet,
    cfg: &EvalConfig,
) -> Result<(MetricsRecord, ParamStats)> {
    let d = joint_distances(pred, gt)?;
    let pck = pck_curve(&d, &cfg.thresholds)?;
    let stats = param_stats(params, cfg.near_zero_eps, cfg.histogram_bins)?;
    let record = MetricsRecord {
        setting: setting.to_string(),
        seed,
        epe: d.iter().sum::<f64>() / d.len() as f64,
        auc: auc(&pck)?,
        pck,
        near_zero_frac: stats.near_zero_frac,
        abs_max: stats.abs_max,
    };
    Ok((record, stats))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn rows(data: &[f64], width: usize) -> Tensor {
        Tensor::new(vec![data.len() / width, width], data.to_vec()).unwrap()
    }

    #[test]
    fn epe_examples() {
        let gt = rows(&[3.0, 4.0, 12.0], 3);
        assert_eq!(epe(&gt, &gt).unwrap(), 0.0);
        assert_eq!(epe(&rows(&[0.0; 3], 3), &gt).unwrap(), 13.0);
        let two = rows(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 6);
        let gt2 = rows(&[3.0, 4.0, 12.0, 1.0, 1.0, 1.0], 6);
        assert_eq!(epe(&two, &gt2).unwrap(), 6.5);
        assert!(epe(&two, &gt).is_err());
        assert!(epe(&rows(&[0.0; 4], 4), &rows(&[0.0; 4], 4)).is_err());
    }

    #[test]
    fn pck_examples() {
        let d = [1.0, 2.0, 3.0];
        assert_eq!(pck_curve(&d, &[2.0]).unwrap(), vec![(2.0, 2.0 / 3.0)]);
        assert_eq!(pck_curve(&d, &[3.0, 10.0]).unwrap(), vec![(3.0, 1.0), (10.0, 1.0)]);
        assert_eq!(pck_curve(&d, &[0.0]).unwrap(), vec![(0.0, 0.0)]);
        assert!(pck_curve(&[], &[1.0]).is_err());
        assert!(pck_curve(&d, &[2.0, 1.0]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(0.0, 1.0), (5.0, 1.0), (9.0, 1.0)]).unwrap(), 1.0);
        let ramp: Vec<(f64, f64)> = (0..=10).map(|i| (i as f64, i as f64 / 10.0)).collect();
        assert!((auc(&ramp).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(auc(&[(0.0, 0.0), (1.0, 0.5), (2.0, 1.0)]).unwrap(), 0.5);
        assert!(auc(&[(0.0, 1.0)]).is_err());
        assert!(auc(&[(1.0, 0.2), (1.0, 0.4)]).is_err());
    }

    fn params(xs: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(xs.to_vec()).unwrap()).unwrap();
        p
    }

    #[test]
    fn param_stats_examples() {
        let s = param_stats(&params(&[0.0, 0.0, 1.0]), 1e-3, 4).unwrap();
        assert!((s.near_zero_frac - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.abs_max, 1.0);
        assert_eq!(s.histogram.counts, vec![0, 0, 2, 1]);

        let z = param_stats(&params(&[0.0; 5]), 1e-3, 10).unwrap();
        assert_eq!(z.near_zero_frac, 1.0);
        assert_eq!(z.abs_max, 0.0);
        assert_eq!(z.histogram.counts, vec![5]);

        assert!(param_stats(&ParamSet::new(), 1e-3, 3).is_err());
    }

    proptest! {
        #[test]
        fn histogram_conserves_count(xs in prop::collection::vec(-5.0f64..5.0, 1..60), bins in 1usize..20) {
            let s = param_stats(&params(&xs), 1e-3, bins).unwrap();
            prop_assert_eq!(s.histogram.counts.iter().sum::<usize>(), xs.len());
        }

        #[test]
        fn pck_is_monotone(ds in prop::collection::vec(0.0f64..50.0, 1..40), mut ts in prop::collection::vec(0.0f64..60.0, 2..10)) {
            ts.sort_by(f64::total_cmp);
            let c = pck_curve(&ds, &ts).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0].1 <= w[1].1));
            prop_assert!(c.iter().all(|p| (0.0..=1.0).contains(&p.1)));
        }

        #[test]
        fn auc_of_constant_curve_is_exact(c in 0.0f64..=1.0, n in 2usize..30, hi in 0.5f64..100.0) {
            let curve: Vec<(f64, f64)> = linear_thresholds(hi, n).into_iter().map(|t| (t, c)).collect();
            prop_assert_eq!(auc(&curve).unwrap(), c);
        }

        #[test]
        fn epe_is_translation_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 6),
            b in prop::collection::vec(-10.0f64..10.0, 6),
            off in prop::collection::vec(-100.0f64..100.0, 3),
        ) {
            let shift = |v: &[f64]| v.iter().enumerate().map(|(i, x)| x + off[i % 3]).collect::<Vec<_>>();
            let e0 = epe(&rows(&a, 6), &rows(&b, 6)).unwrap();
            let e1 = epe(&rows(&shift(&a), 6), &rows(&shift(&b), 6)).unwrap();
            prop_assert!((e0 - e1).abs() < 1e-9);
        }
    }
}
