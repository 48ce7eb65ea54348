//! Evaluation protocols: PCK / PCKh, inter-ocular NME with its cumulative
//! error distribution, and MPJPE under root alignment (protocol 1) or
//! similarity Procrustes alignment (protocol 2).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::LandmarkSet;

/// Failure threshold and CED range for normalized mean error.
pub const NME_FAILURE: f64 = 0.08;
pub const CED_POINTS: usize = 200;
/// PCK curves are sampled on `[0, PCK_CURVE_MAX]`.
pub const PCK_CURVE_MAX: f64 = 0.5;
pub const PCK_CURVE_POINTS: usize = 51;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// Per-joint rate (PCK), normalized error (NME) or millimeters (MPJPE).
    pub per_joint: Vec<f64>,
    /// Number of evaluated instances behind each `per_joint` entry.
    pub per_joint_count: Vec<usize>,
    pub mean: f64,
    /// `(threshold, rate)` samples, non-decreasing in both.
    pub curve: Vec<(f64, f64)>,
    pub auc: Option<f64>,
    pub failure_rate: Option<f64>,
    pub samples: usize,
    /// Sample indices dropped as degenerate.
    pub excluded: Vec<usize>,
}

impl MetricReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("threshold,rate\n");
        for (t, r) in &self.curve {
            s.push_str(&format!("{t},{r}\n"));
        }
        s
    }
}

/// Which ground-truth joints take part in a PCK evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stratum {
    All,
    Visible,
    /// In the image but not visible (occluded).
    Invisible,
}

impl Stratum {
    fn admits(self, gt: &LandmarkSet, i: usize) -> bool {
        gt.in_image()[i]
            && match self {
                Stratum::All => true,
                Stratum::Visible => gt.visible()[i],
                Stratum::Invisible => !gt.visible()[i],
            }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn linspace(hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| hi * i as f64 / (n - 1) as f64)
}

/// Trapezoidal area under `curve`, divided by its threshold span.
fn normalized_area(curve: &[(f64, f64)]) -> f64 {
    let span = curve.last().map(|c| c.0).unwrap_or(0.0) - curve.first().map(|c| c.0).unwrap_or(0.0);
    if span <= 0.0 {
        return 0.0;
    }
    let area: f64 = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    area / span
}

fn check_pairs(preds: &[LandmarkSet], gts: &[LandmarkSet]) -> Result<usize> {
    if preds.len() != gts.len() {
        return Err(Error::shape(gts.len(), preds.len()));
    }
    let k = gts.first().map(|g| g.len()).unwrap_or(0);
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != k || g.len() != k || p.dim() != g.dim() {
            return Err(Error::shape((k, g.dim()), (p.len(), p.dim())));
        }
    }
    Ok(k)
}

/// Fraction of joints with `‖pred − gt‖ ≤ thr · ref_len`, per joint and
/// pooled over all admitted joints.
pub fn pck(preds: &[LandmarkSet], gts: &[LandmarkSet], ref_lens: &[f64], thr: f64, stratum: Stratum) -> Result<MetricReport> {
    let k = check_pairs(preds, gts)?;
    if ref_lens.len() != gts.len() {
        return Err(Error::shape(gts.len(), ref_lens.len()));
    }
    if let Some(r) = ref_lens.iter().find(|r| !(**r > 0.0)) {
        return Err(Error::invalid(format!("reference length must be positive, got {r}")));
    }
    // Normalized errors of admitted joints, per joint.
    let mut errs: Vec<Vec<f64>> = vec![Vec::new(); k];
    for ((p, g), &r) in preds.iter().zip(gts).zip(ref_lens) {
        for (i, e) in errs.iter_mut().enumerate() {
            if stratum.admits(g, i) {
                e.push(dist(p.point(i), g.point(i)) / r);
            }
        }
    }
    let rate_at = |t: f64| -> (Vec<usize>, usize) {
        let hits: Vec<usize> = errs.iter().map(|e| e.iter().filter(|&&d| d <= t).count()).collect();
        let total = hits.iter().sum();
        (hits, total)
    };
    let counts: Vec<usize> = errs.iter().map(Vec::len).collect();
    let n_all: usize = counts.iter().sum();
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    let (hits, total) = rate_at(thr);
    let curve: Vec<(f64, f64)> = linspace(PCK_CURVE_MAX, PCK_CURVE_POINTS)
        .map(|t| (t, ratio(rate_at(t).1, n_all)))
        .collect();
    Ok(MetricReport {
        metric: format!("pck@{thr}/{stratum:?}").to_lowercase(),
        per_joint: hits.iter().zip(&counts).map(|(&h, &n)| ratio(h, n)).collect(),
        per_joint_count: counts,
        mean: ratio(total, n_all),
        auc: Some(normalized_area(&curve)),
        curve,
        failure_rate: None,
        samples: gts.len(),
        excluded: Vec::new(),
    })
}

/// PCK at half the head-segment length.
pub fn pckh(preds: &[LandmarkSet], gts: &[LandmarkSet], head_lens: &[f64], stratum: Stratum) -> Result<MetricReport> {
    let mut r = pck(preds, gts, head_lens, 0.5, stratum)?;
    r.metric = format!("pckh@0.5/{stratum:?}").to_lowercase();
    Ok(r)
}

/// Mean point-to-point error over inter-ocular distance, with the CED on
/// `[0, 0.08]`, its normalized area and the failure rate above 0.08.
/// Samples with coincident eye landmarks are excluded.
pub fn nme_interocular(preds: &[LandmarkSet], gts: &[LandmarkSet], eyes: (usize, usize)) -> Result<MetricReport> {
    let k = check_pairs(preds, gts)?;
    if eyes.0 >= k || eyes.1 >= k {
        return Err(Error::invalid(format!("eye indices {eyes:?} out of range for {k} landmarks")));
    }
    let mut per_sample = Vec::with_capacity(gts.len());
    let mut excluded = Vec::new();
    let mut joint_sum = vec![0.0; k];
    for (s, (p, g)) in preds.iter().zip(gts).enumerate() {
        let iod = dist(g.point(eyes.0), g.point(eyes.1));
        if !(iod > 0.0) {
            tracing::warn!(sample = s, "zero inter-ocular distance; sample excluded");
            excluded.push(s);
            continue;
        }
        let mut sum = 0.0;
        for (i, js) in joint_sum.iter_mut().enumerate() {
            let e = dist(p.point(i), g.point(i)) / iod;
            *js += e;
            sum += e;
        }
        per_sample.push(sum / k as f64);
    }
    let n = per_sample.len();
    let frac = |t: f64| {
        if n == 0 {
            0.0
        } else {
            per_sample.iter().filter(|&&e| e <= t).count() as f64 / n as f64
        }
    };
    let curve: Vec<(f64, f64)> = linspace(NME_FAILURE, CED_POINTS).map(|t| (t, frac(t))).collect();
    let failure = if n == 0 {
        0.0
    } else {
        per_sample.iter().filter(|&&e| e > NME_FAILURE).count() as f64 / n as f64
    };
    Ok(MetricReport {
        metric: "nme_interocular".into(),
        per_joint: joint_sum.iter().map(|s| if n == 0 { 0.0 } else { s / n as f64 }).collect(),
        per_joint_count: vec![n; k],
        mean: if n == 0 { 0.0 } else { per_sample.iter().sum::<f64>() / n as f64 },
        auc: Some(normalized_area(&curve)),
        curve,
        failure_rate: Some(failure),
        samples: gts.len(),
        excluded,
    })
}

/// MPJPE evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Root joint subtracted from both poses.
    RootAligned = 1,
    /// Similarity (rotation, translation, scale) Procrustes alignment of the
    /// prediction onto the ground truth.
    Procrustes = 2,
}

impl Protocol {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Protocol::RootAligned),
            2 => Ok(Protocol::Procrustes),
            _ => Err(Error::invalid(format!("protocol must be 1 or 2, got {n}"))),
        }
    }
}

/// Least-squares similarity transform `(s, R, t)` minimizing
/// `Σ ‖gt_i − (s R pred_i + t)‖²`.
#[derive(Clone, Copy, Debug)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.scale * self.rotation * Vector3::from(p) + self.translation;
        [v.x, v.y, v.z]
    }
}

pub fn procrustes(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Similarity> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let n = gt.len() as f64;
    let mean = |ps: &[[f64; 3]]| ps.iter().map(|&p| Vector3::from(p)).sum::<Vector3<f64>>() / n;
    let (mx, my) = (mean(pred), mean(gt));
    let var_y: f64 = gt.iter().map(|&q| (Vector3::from(q) - my).norm_squared()).sum::<f64>() / n;
    if !(var_y > 0.0) {
        return Err(Error::invalid("degenerate ground truth: all joints coincide"));
    }
    let var_x: f64 = pred.iter().map(|&p| (Vector3::from(p) - mx).norm_squared()).sum::<f64>() / n;
    let mut cov = Matrix3::zeros();
    for (&p, &q) in pred.iter().zip(gt) {
        cov += (Vector3::from(q) - my) * (Vector3::from(p) - mx).transpose();
    }
    cov /= n;
    if var_x == 0.0 {
        return Ok(Similarity {
            scale: 0.0,
            rotation: Matrix3::identity(),
            translation: my,
        });
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var_x;
    let translation = my - scale * rotation * mx;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Per-joint errors of one sample under `protocol`; `root` is the joint
/// used for protocol-1 centering.
pub fn joint_errors(pred: &[[f64; 3]], gt: &[[f64; 3]], protocol: Protocol, root: usize) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || root >= gt.len() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let d3 = |a: [f64; 3], b: [f64; 3]| dist(&a, &b);
    Ok(match protocol {
        Protocol::RootAligned => {
            let (rp, rg) = (pred[root], gt[root]);
            pred.iter()
                .zip(gt)
                .map(|(p, g)| {
                    let a = [p[0] - rp[0], p[1] - rp[1], p[2] - rp[2]];
                    let b = [g[0] - rg[0], g[1] - rg[1], g[2] - rg[2]];
                    d3(a, b)
                })
                .collect()
        }
        Protocol::Procrustes => {
            let t = procrustes(pred, gt)?;
            pred.iter().zip(gt).map(|(&p, &g)| d3(t.apply(p), g)).collect()
        }
    })
}

/// Mean per-joint position error over all samples.
pub fn mpjpe(preds: &[Vec<[f64; 3]>], gts: &[Vec<[f64; 3]>], protocol: Protocol, root: usize) -> Result<MetricReport> {
    if preds.len() != gts.len() || gts.is_empty() {
        return Err(Error::shape(gts.len(), preds.len()));
    }
    let k = gts[0].len();
    let mut joint_sum = vec![0.0; k];
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        if g.len() != k {
            return Err(Error::shape(k, g.len()));
        }
        let e = joint_errors(p, g, protocol, root)?;
        for (s, v) in joint_sum.iter_mut().zip(&e) {
            *s += v;
        }
        total += e.iter().sum::<f64>() / k as f64;
    }
    let n = gts.len() as f64;
    Ok(MetricReport {
        metric: format!("mpjpe/protocol{}", protocol as u32),
        per_joint: joint_sum.iter().map(|s| s / n).collect(),
        per_joint_count: vec![gts.len(); k],
        mean: total / n,
        curve: Vec::new(),
        auc: None,
        failure_rate: None,
        samples: gts.len(),
        excluded: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn set(points: &[[f64; 2]]) -> LandmarkSet {
        LandmarkSet::from_points2(points).unwrap()
    }

    #[test]
    fn exact_predictions_score_perfectly() {
        let g = vec![set(&[[1.0, 2.0], [3.0, 4.0]]); 3];
        let r = pck(&g, &g, &[1.0; 3], 0.2, Stratum::All).unwrap();
        assert_eq!(r.mean, 1.0);
        let eyes = vec![set(&[[0.0, 0.0], [10.0, 0.0], [5.0, 5.0]]); 2];
        let n = nme_interocular(&eyes, &eyes, (0, 1)).unwrap();
        assert_eq!((n.mean, n.auc, n.failure_rate), (0.0, Some(1.0), Some(0.0)));
    }

    #[test]
    fn pck_counts_match_hand_computation() {
        let gts = vec![set(&[[0.0, 0.0], [0.0, 0.0]]), set(&[[0.0, 0.0], [0.0, 0.0]])];
        let preds = vec![set(&[[0.1, 0.0], [0.3, 0.0]]), set(&[[0.0, 0.25], [0.0, 0.15]])];
        let r = pck(&preds, &gts, &[1.0, 1.0], 0.2, Stratum::All).unwrap();
        assert_eq!(r.per_joint, vec![0.5, 0.5]);
        assert_eq!(r.mean, 0.5);
        assert!(r.curve.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn stratification_splits_on_visibility() {
        let gt = set(&[[0.0, 0.0], [5.0, 5.0]])
            .with_flags(vec![true, false], vec![true, true])
            .unwrap();
        let pred = set(&[[0.0, 0.0], [9.0, 9.0]]);
        let v = pck(&[pred.clone()], &[gt.clone()], &[1.0], 0.2, Stratum::Visible).unwrap();
        let i = pck(&[pred], &[gt], &[1.0], 0.2, Stratum::Invisible).unwrap();
        assert_eq!((v.mean, v.per_joint_count.clone()), (1.0, vec![1, 0]));
        assert_eq!((i.mean, i.per_joint_count), (0.0, vec![0, 1]));
    }

    #[test]
    fn uniform_error_beyond_threshold_fails() {
        let gt = set(&[[0.0, 0.0], [10.0, 0.0]]);
        let pred = set(&[[0.0, 1.0], [10.0, 1.0]]);
        let r = nme_interocular(&[pred], &[gt], (0, 1)).unwrap();
        assert_abs_diff_eq!(r.mean, 0.1, epsilon = 1e-12);
        assert_eq!(r.failure_rate, Some(1.0));
        assert_eq!(r.curve.len(), CED_POINTS);
        assert_abs_diff_eq!(r.failure_rate.unwrap(), 1.0 - r.curve.last().unwrap().1);
    }

    #[test]
    fn zero_iod_is_excluded() {
        let g = set(&[[0.0, 0.0], [0.0, 0.0]]);
        let r = nme_interocular(&[g.clone()], &[g], (0, 1)).unwrap();
        assert_eq!(r.excluded, vec![0]);
    }

    fn pose() -> Vec<[f64; 3]> {
        vec![[0.0, 0.0, 0.0], [100.0, 20.0, 5.0], [-40.0, 80.0, 30.0], [10.0, -60.0, 90.0], [50.0, 50.0, -20.0]]
    }

    #[test]
    fn rigid_motion_vanishes_under_protocol_two() {
        let gt = pose();
        let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
        let pred: Vec<[f64; 3]> = gt
            .iter()
            .map(|p| [c * p[0] - s * p[1] + 7.0, s * p[0] + c * p[1] - 3.0, p[2] + 11.0])
            .collect();
        let p2 = mpjpe(&[pred.clone()], &[gt.clone()], Protocol::Procrustes, 0).unwrap();
        let p1 = mpjpe(&[pred], &[gt], Protocol::RootAligned, 0).unwrap();
        assert!(p2.mean < 1e-8);
        assert!(p1.mean > 1.0);
    }

    #[test]
    fn common_offset_vanishes_under_protocol_one() {
        let gt = pose();
        let pred: Vec<[f64; 3]> = gt.iter().map(|p| [p[0] + 1.0, p[1], p[2]]).collect();
        assert_eq!(mpjpe(&[pred], &[gt], Protocol::RootAligned, 0).unwrap().mean, 0.0);
    }

    #[test]
    fn degenerate_ground_truth_is_rejected() {
        let gt = vec![[1.0, 1.0, 1.0]; 4];
        assert!(mpjpe(&[pose()[..4].to_vec()], &[gt], Protocol::Procrustes, 0).is_err());
    }

    #[test]
    fn reflection_is_not_used() {
        let gt = pose();
        let pred: Vec<[f64; 3]> = gt.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let t = procrustes(&pred, &gt).unwrap();
        assert_abs_diff_eq!(t.rotation.determinant(), 1.0, epsilon = 1e-9);
    }
}
