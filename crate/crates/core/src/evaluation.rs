//! Metric bundles for trained models: what `eval` writes and what the
//! directional experiments compare.

use serde::{Deserialize, Serialize};

use crate::data::PoseDataset;
use crate::error::{Error, Result};
use crate::heatmap::LandmarkSet;
use crate::lifting3d::{as_landmarks, PairedData};
use crate::metrics::{mpjpe, nme_interocular, pck, pckh, MetricReport, Protocol, Stratum};
use crate::synthdata::{plausibility_oracle, OracleScale, OracleTolerance, SkeletonSpec, WRISTS_ELBOWS};

pub const PCK_THRESHOLD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plausibility {
    /// Fraction of evaluated predictions that pass the oracle.
    pub rate: f64,
    pub evaluated: usize,
    /// Bone-length violations per evaluated bone.
    pub bone_violation_rate: f64,
    pub tolerance: OracleTolerance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub samples: usize,
    pub pck: MetricReport,
    pub pck_visible: MetricReport,
    pub pck_invisible: MetricReport,
    pub pckh: MetricReport,
    /// PCK@0.2 restricted to occluded wrists and elbows.
    pub invisible_wrists_elbows: f64,
    pub plausibility: Option<Plausibility>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceReport {
    pub samples: usize,
    pub nme: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftReport {
    pub samples: usize,
    pub protocol1: MetricReport,
    pub protocol2: MetricReport,
    pub plausibility: Plausibility,
}

/// Oracle tolerance for poses decoded from heatmaps with cells of `cell`
/// spec units: a quarter-cell position uncertainty on top of the skeleton's
/// own length tolerance.
pub fn decoder_tolerance(spec: &SkeletonSpec, cell: f64) -> OracleTolerance {
    OracleTolerance {
        position: cell / 4.0,
        ..OracleTolerance::strict(spec)
    }
}

fn ground_truth(ds: &PoseDataset) -> (Vec<LandmarkSet>, Vec<f64>, Vec<f64>) {
    let ex = ds.examples();
    (
        ex.iter().map(|e| e.landmarks.clone()).collect(),
        ex.iter().map(|e| e.eval_ref).collect(),
        ex.iter().map(|e| e.fake_ref).collect(),
    )
}

/// Scores `poses` (one per sample) with the oracle; `None` entries are
/// skipped.
pub fn plausibility(poses: &[Option<&LandmarkSet>], spec: &SkeletonSpec, scale: OracleScale, tol: OracleTolerance) -> Plausibility {
    let mut pass = 0usize;
    let mut n = 0usize;
    let mut bad_bones = 0usize;
    for p in poses.iter().flatten() {
        let r = plausibility_oracle(p, spec, scale, tol);
        n += 1;
        pass += r.plausible as usize;
        bad_bones += r.bone_violations();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Plausibility {
        rate: ratio(pass, n),
        evaluated: n,
        bone_violation_rate: ratio(bad_bones, n * spec.bones.len()),
        tolerance: tol,
    }
}

/// Body-pose metrics of `preds` (crop pixels) against `ds`. Plausibility is
/// scored on samples whose joints all lie inside the crop.
pub fn evaluate_pose(preds: &[LandmarkSet], ds: &PoseDataset, spec: Option<&SkeletonSpec>) -> Result<PoseReport> {
    if preds.len() != ds.len() {
        return Err(Error::shape(ds.len(), preds.len()));
    }
    let (gts, refs, heads) = ground_truth(ds);
    let pck_inv = pck(preds, &gts, &refs, PCK_THRESHOLD, Stratum::Invisible)?;
    let (mut hit, mut total) = (0.0, 0usize);
    for &j in &WRISTS_ELBOWS {
        if j < pck_inv.per_joint.len() {
            hit += pck_inv.per_joint[j] * pck_inv.per_joint_count[j] as f64;
            total += pck_inv.per_joint_count[j];
        }
    }
    let plaus = spec.map(|s| {
        let cell = ds.input_size as f64 / ds.grid.width as f64;
        let px = ds.examples().first().map_or(1.0, |e| e.source_scale);
        let candidates: Vec<Option<&LandmarkSet>> = preds
            .iter()
            .zip(&gts)
            .map(|(p, g)| g.in_image().iter().all(|&b| b).then_some(p))
            .collect();
        plausibility(&candidates, s, OracleScale::Fixed(px), decoder_tolerance(s, cell * px))
    });
    Ok(PoseReport {
        samples: ds.len(),
        pck: pck(preds, &gts, &refs, PCK_THRESHOLD, Stratum::All)?,
        pck_visible: pck(preds, &gts, &refs, PCK_THRESHOLD, Stratum::Visible)?,
        invisible_wrists_elbows: if total == 0 { 0.0 } else { hit / total as f64 },
        pck_invisible: pck_inv,
        pckh: pckh(preds, &gts, &heads, Stratum::All)?,
        plausibility: plaus,
    })
}

pub fn evaluate_face(preds: &[LandmarkSet], ds: &PoseDataset, eyes: (usize, usize)) -> Result<FaceReport> {
    let (gts, _, _) = ground_truth(ds);
    Ok(FaceReport {
        samples: ds.len(),
        nme: nme_interocular(preds, &gts, eyes)?,
    })
}

/// Both MPJPE protocols and the strict bone-length oracle on 3D predictions
/// (millimetres).
pub fn evaluate_lift(preds: &[Vec<[f64; 3]>], data: &PairedData, spec: &SkeletonSpec) -> Result<LiftReport> {
    let lms = as_landmarks(preds)?;
    let refs: Vec<Option<&LandmarkSet>> = lms.iter().map(Some).collect();
    Ok(LiftReport {
        samples: data.len(),
        protocol1: mpjpe(preds, &data.gt3d, Protocol::RootAligned, spec.root)?,
        protocol2: mpjpe(preds, &data.gt3d, Protocol::Procrustes, spec.root)?,
        plausibility: plausibility(
            &refs,
            spec,
            OracleScale::Fixed(1.0 / spec.mm_per_px),
            OracleTolerance::strict(spec),
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::synthdata::{forward_kinematics, generate_dataset, generate_pairs, sample_pose, PoseParams, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decoder_tolerance_is_a_quarter_cell() {
        let s = SkeletonSpec::mpii16();
        let t = decoder_tolerance(&s, 8.0);
        assert_eq!(t.position, 2.0);
        assert_eq!(t.length, s.length_tolerance);
    }

    #[test]
    fn plausibility_counts_poses_and_bones() {
        let s = SkeletonSpec::mpii16();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let good = sample_pose(&s, &SynthConfig::default(), &mut rng);
        // Doubling every coordinate doubles every bone.
        let bad = good.map_points(|p| p.iter().map(|v| 2.0 * v).collect()).unwrap();
        let strict = OracleTolerance::strict(&s);
        let r = plausibility(&[Some(&good), None, Some(&bad)], &s, OracleScale::Fixed(1.0), strict);
        assert_eq!(r.evaluated, 2);
        assert_eq!(r.rate, 0.5);
        assert_eq!(r.bone_violation_rate, 0.5);
        let empty = plausibility(&[None], &s, OracleScale::Fixed(1.0), strict);
        assert_eq!((empty.rate, empty.evaluated), (0.0, 0));
    }

    #[test]
    fn perfect_pose_predictions_score_fully() {
        let s = SkeletonSpec::mpii16();
        let synth = SynthConfig::default();
        let cfg = TrainConfig {
            input_size: 32,
            ..Default::default()
        };
        let samples = generate_dataset(&s, &synth, 12, 0).unwrap();
        let ds = PoseDataset::from_samples(&samples, &synth, &cfg, &s).unwrap();
        let preds: Vec<LandmarkSet> = ds.examples().iter().map(|e| e.landmarks.clone()).collect();
        let r = evaluate_pose(&preds, &ds, Some(&s)).unwrap();
        assert_eq!(r.pck.mean, 1.0);
        assert_eq!(r.pckh.mean, 1.0);
        let p = r.plausibility.unwrap();
        assert_eq!(p.rate, 1.0);
        assert!(p.evaluated > 0 && p.evaluated <= 12);
        assert!(evaluate_pose(&preds[1..], &ds, None).is_err());
    }

    #[test]
    fn ground_truth_lifts_have_zero_error() {
        let s = SkeletonSpec::mpii16();
        let data = PairedData::new(&generate_pairs(&s, 20, 0.5, 4), &s, 0.0, 0).unwrap();
        let r = evaluate_lift(&data.gt3d, &data, &s).unwrap();
        assert!(r.protocol1.mean < 1e-9 && r.protocol2.mean < 1e-6);
        assert_eq!(r.plausibility.rate, 1.0);
        assert_eq!(r.plausibility.bone_violation_rate, 0.0);
    }

    #[test]
    fn stretched_lifts_violate_bones() {
        let s = SkeletonSpec::mpii16();
        let data = PairedData::new(&generate_pairs(&s, 5, 0.5, 5), &s, 0.0, 0).unwrap();
        let rest = forward_kinematics(&s, &PoseParams::rest(&s));
        let preds: Vec<Vec<[f64; 3]>> = (0..data.len())
            .map(|_| rest.iter().map(|p| p.map(|v| 1.5 * v * s.mm_per_px)).collect())
            .collect();
        let r = evaluate_lift(&preds, &data, &s).unwrap();
        assert_eq!(r.plausibility.rate, 0.0);
        assert!(r.plausibility.bone_violation_rate > 0.5);
        assert!(r.protocol2.mean <= r.protocol1.mean);
    }
}
