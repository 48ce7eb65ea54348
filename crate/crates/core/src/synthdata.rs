//! Synthetic articulated stick figures: a 16-joint skeleton with angle
//! limits, forward kinematics in 2D (image plane) and 3D (with out-of-plane
//! bone elevations and a yawed orthographic camera), an image renderer with
//! occluders and clutter, and an analytic plausibility oracle.
//!
//! Angles are in radians in image convention (x right, y down, positive =
//! clockwise on screen). Every bone's in-plane direction is its reference
//! bone's direction plus a relative angle; the root bone (pelvis → thorax)
//! sets the global orientation and is the only bone with an absolute limit.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::heatmap::{Annotation, LandmarkSet, SCALE_UNIT};
use crate::imaging::Image;

pub const JOINT_NAMES: [&str; 16] = [
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax", "upper_neck", "head_top",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
];

pub const PELVIS: usize = 6;
pub const THORAX: usize = 7;
pub const NECK: usize = 8;
pub const HEAD: usize = 9;
pub const R_HIP: usize = 2;
pub const L_HIP: usize = 3;
/// Joints reported in the occlusion analysis: wrists and elbows.
pub const WRISTS_ELBOWS: [usize; 4] = [10, 11, 14, 15];

/// Millimetres per canvas pixel of the default spec.
pub const MM_PER_PX: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
    /// Length in canvas pixels.
    pub length: f64,
    /// Bone whose direction this bone's angle is relative to; `None` for the
    /// root bone.
    pub reference: Option<usize>,
    pub rest: f64,
    pub limits: (f64, f64),
    /// Out-of-plane elevation limits for 3D poses.
    pub depth_limits: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub names: Vec<String>,
    /// Bones in topological order (a bone's reference precedes it).
    pub bones: Vec<Bone>,
    pub root: usize,
    pub mm_per_px: f64,
    /// Joint pairs defining the torso and head-segment reference lengths.
    pub torso: (usize, usize),
    pub head: (usize, usize),
    pub length_tolerance: f64,
}

fn deg(d: f64) -> f64 {
    d.to_radians()
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        Self::mpii16()
    }
}

impl SkeletonSpec {
    /// The default 16-joint body in MPII joint order.
    pub fn mpii16() -> Self {
        // (parent, child, length px, reference bone, rest°, limits°, depth°)
        // for the right side; the left side mirrors it.
        type Row = (usize, usize, f64, Option<usize>, f64, (f64, f64), (f64, f64));
        let rows: [Row; 15] = [
            (PELVIS, THORAX, 13.0, None, -90.0, (-110.0, -70.0), (0.0, 0.0)),
            (THORAX, NECK, 4.0, Some(0), 0.0, (-20.0, 20.0), (-15.0, 25.0)),
            (NECK, HEAD, 7.0, Some(1), 0.0, (-25.0, 25.0), (-20.0, 30.0)),
            (THORAX, 12, 6.0, Some(0), -90.0, (-100.0, -80.0), (-10.0, 10.0)),
            (12, 11, 9.0, Some(3), -90.0, (-150.0, 30.0), (-30.0, 60.0)),
            (11, 10, 8.0, Some(4), 30.0, (-10.0, 140.0), (0.0, 60.0)),
            (THORAX, 13, 6.0, Some(0), 90.0, (80.0, 100.0), (-10.0, 10.0)),
            (13, 14, 9.0, Some(6), 90.0, (-30.0, 150.0), (-30.0, 60.0)),
            (14, 15, 8.0, Some(7), -30.0, (-140.0, 10.0), (0.0, 60.0)),
            (PELVIS, R_HIP, 4.5, Some(0), -107.0, (-115.0, -100.0), (0.0, 0.0)),
            (R_HIP, 1, 11.0, Some(9), -73.0, (-113.0, -23.0), (-20.0, 50.0)),
            (1, 0, 11.0, Some(10), 10.0, (-5.0, 70.0), (-50.0, 0.0)),
            (PELVIS, L_HIP, 4.5, Some(0), 107.0, (100.0, 115.0), (0.0, 0.0)),
            (L_HIP, 4, 11.0, Some(12), 73.0, (23.0, 113.0), (-20.0, 50.0)),
            (4, 5, 11.0, Some(13), -10.0, (-70.0, 5.0), (-50.0, 0.0)),
        ];
        let bones = rows
            .iter()
            .map(|&(parent, child, length, reference, rest, lim, dl)| Bone {
                parent,
                child,
                length,
                reference,
                rest: deg(rest),
                limits: (deg(lim.0), deg(lim.1)),
                depth_limits: (deg(dl.0), deg(dl.1)),
            })
            .collect();
        SkeletonSpec {
            names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            bones,
            root: PELVIS,
            mm_per_px: MM_PER_PX,
            torso: (PELVIS, NECK),
            head: (NECK, HEAD),
            length_tolerance: 0.10,
        }
    }

    pub fn joints(&self) -> usize {
        self.names.len()
    }

    /// Checks that bones form a tree spanning all joints from the root, with
    /// references preceding their users and non-empty limits.
    pub fn validate(&self) -> Result<()> {
        let k = self.joints();
        if self.bones.len() + 1 != k {
            return Err(Error::invalid("skeleton must have K-1 bones"));
        }
        let mut placed = vec![false; k];
        placed[self.root] = true;
        for (i, b) in self.bones.iter().enumerate() {
            if b.parent >= k || b.child >= k || !placed[b.parent] || placed[b.child] {
                return Err(Error::invalid(format!("bone {i} breaks the tree order")));
            }
            placed[b.child] = true;
            if b.reference.is_some_and(|r| r >= i) || (b.reference.is_none() && b.parent != self.root) {
                return Err(Error::invalid(format!("bone {i} has an invalid reference")));
            }
            if !(b.limits.0 <= b.limits.1) || !(b.depth_limits.0 <= b.depth_limits.1) || !(b.length > 0.0) {
                return Err(Error::invalid(format!("bone {i} has empty limits or non-positive length")));
            }
        }
        Ok(())
    }

    fn ref_len(&self, pts: &[[f64; 3]], pair: (usize, usize)) -> f64 {
        norm3(sub3(pts[pair.0], pts[pair.1]))
    }

    /// Mean bone length of the spec in the requested units.
    pub fn mean_bone_length(&self, mm: bool) -> f64 {
        let s = if mm { self.mm_per_px } else { 1.0 };
        self.bones.iter().map(|b| b.length * s).sum::<f64>() / self.bones.len() as f64
    }
}

/// Joint angles of one pose: relative in-plane angle and out-of-plane
/// elevation per bone.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams {
    pub angles: Vec<f64>,
    pub elevations: Vec<f64>,
}

impl PoseParams {
    pub fn rest(spec: &SkeletonSpec) -> Self {
        PoseParams {
            angles: spec.bones.iter().map(|b| b.rest).collect(),
            elevations: spec.bones.iter().map(|b| 0.0f64.clamp(b.depth_limits.0, b.depth_limits.1)).collect(),
        }
    }

    /// Angles drawn as `rest + noise · U(−1, 1) · half-range`, clamped inside
    /// the limits.
    pub fn sample<R: Rng>(spec: &SkeletonSpec, noise: f64, depth: bool, rng: &mut R) -> Self {
        let mut p = Self::rest(spec);
        for (i, b) in spec.bones.iter().enumerate() {
            let (lo, hi) = b.limits;
            let t: f64 = rng.gen_range(-1.0..=1.0);
            let v = if t >= 0.0 { b.rest + t * noise * (hi - b.rest) } else { b.rest + t * noise * (b.rest - lo) };
            p.angles[i] = v.clamp(lo, hi);
            if depth {
                let (dlo, dhi) = b.depth_limits;
                let e0 = 0.0f64.clamp(dlo, dhi);
                let t: f64 = rng.gen_range(-1.0..=1.0);
                let e = if t >= 0.0 { e0 + t * noise * (dhi - e0) } else { e0 + t * noise * (e0 - dlo) };
                p.elevations[i] = e.clamp(dlo, dhi);
            }
        }
        p
    }
}

/// Forward kinematics in the body frame (x right, y down, z toward the
/// viewer) with the root at the origin; lengths in canvas pixels.
pub fn forward_kinematics(spec: &SkeletonSpec, params: &PoseParams) -> Vec<[f64; 3]> {
    let mut pts = vec![[0.0; 3]; spec.joints()];
    let mut dir = vec![0.0; spec.bones.len()];
    for (i, b) in spec.bones.iter().enumerate() {
        dir[i] = match b.reference {
            Some(r) => dir[r] + params.angles[i],
            None => params.angles[i],
        };
        let e = params.elevations[i];
        let d = [e.cos() * dir[i].cos(), e.cos() * dir[i].sin(), e.sin()];
        let p = pts[b.parent];
        pts[b.child] = [p[0] + b.length * d[0], p[1] + b.length * d[1], p[2] + b.length * d[2]];
    }
    pts
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Wraps into `(−π, π]`.
fn wrap(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OracleScale {
    /// Bone lengths compared against the spec at a given scale (spec units
    /// per input unit).
    Fixed(f64),
    /// Scale fitted by least squares over all bones.
    Fit,
}

/// Tolerances of the plausibility check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTolerance {
    /// Relative bone-length tolerance.
    pub length: f64,
    /// Per-joint position uncertainty in spec units (canvas pixels), e.g.
    /// the quantization of a heatmap decoder. Each bone gains `2·position`
    /// of length slack and the matching worst-case direction slack
    /// `asin(2·position / length)`.
    pub position: f64,
    /// Slack added to every angle interval, in radians.
    pub angle: f64,
}

impl OracleTolerance {
    pub fn strict(spec: &SkeletonSpec) -> Self {
        OracleTolerance {
            length: spec.length_tolerance,
            position: 0.0,
            angle: 1e-9,
        }
    }

    /// Worst-case direction error of a bone of `length` spec units.
    fn direction_slack(&self, length: f64) -> f64 {
        let r = 2.0 * self.position / length;
        if r >= 1.0 {
            PI
        } else {
            r.asin()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    BoneLength { bone: usize, length: f64, expected: f64 },
    Angle { bone: usize, joint: String, angle: f64, limits: (f64, f64) },
    Elevation { bone: usize, angle: f64, limits: (f64, f64) },
    Degenerate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub plausible: bool,
    pub violations: Vec<Violation>,
}

impl OracleResult {
    pub fn bone_violations(&self) -> usize {
        self.violations
            .iter()
            .filter(|v| matches!(v, Violation::BoneLength { .. }))
            .count()
    }
}

/// Body frame (lateral, up, normal) recovered from the spine and hip line.
fn body_frame(spec: &SkeletonSpec, pts: &[[f64; 3]]) -> Option<[[f64; 3]; 3]> {
    let spine = &spec.bones[0];
    let up = sub3(pts[spine.child], pts[spine.parent]);
    let n_up = norm3(up);
    if n_up == 0.0 {
        return None;
    }
    let up = scale3(up, 1.0 / n_up);
    let hip = sub3(pts[L_HIP], pts[R_HIP]);
    let lat = sub3(hip, scale3(up, dot3(hip, up)));
    let n_lat = norm3(lat);
    if n_lat < 1e-9 {
        return None;
    }
    let lat = scale3(lat, 1.0 / n_lat);
    Some([lat, up, cross3(up, lat)])
}

/// Checks bone lengths and joint-angle limits. 2D poses check in-plane
/// angles only; 3D poses additionally check out-of-plane elevations in the
/// body frame. Invariant to rotations and translations of the whole pose.
pub fn plausibility_oracle(pose: &LandmarkSet, spec: &SkeletonSpec, scale: OracleScale, tol: OracleTolerance) -> OracleResult {
    let k = spec.joints();
    let mut violations = Vec::new();
    if pose.len() != k {
        return OracleResult {
            plausible: false,
            violations: vec![Violation::Degenerate],
        };
    }
    let pts: Vec<[f64; 3]> = (0..k)
        .map(|i| {
            let p = pose.point(i);
            [p[0], p[1], if pose.dim() == 3 { p[2] } else { 0.0 }]
        })
        .collect();
    let lens: Vec<f64> = spec.bones.iter().map(|b| norm3(sub3(pts[b.child], pts[b.parent]))).collect();
    let s = match scale {
        OracleScale::Fixed(s) => s,
        OracleScale::Fit => {
            let num: f64 = spec.bones.iter().zip(&lens).map(|(b, l)| b.length * l).sum();
            let den: f64 = lens.iter().map(|l| l * l).sum();
            if den == 0.0 {
                return OracleResult {
                    plausible: false,
                    violations: vec![Violation::Degenerate],
                };
            }
            num / den
        }
    };
    for (i, (b, &l)) in spec.bones.iter().zip(&lens).enumerate() {
        let got = l * s;
        if (got - b.length).abs() > tol.length * b.length + 2.0 * tol.position {
            violations.push(Violation::BoneLength {
                bone: i,
                length: got,
                expected: b.length,
            });
        }
    }
    // In-plane directions: for 3D, projected on the recovered frontal plane
    // and expressed in the body frame.
    let frame = if pose.dim() == 3 {
        match body_frame(spec, &pts) {
            Some(f) => Some(f),
            None => {
                violations.push(Violation::Degenerate);
                return OracleResult {
                    plausible: false,
                    violations,
                };
            }
        }
    } else {
        None
    };
    let mut dirs = Vec::with_capacity(spec.bones.len());
    for (i, b) in spec.bones.iter().enumerate() {
        let v = sub3(pts[b.child], pts[b.parent]);
        let (x, y, z) = match &frame {
            // Body frame x = lateral toward the left hip ; image x points to
            // the subject's left as well, image y = −up.
            Some([lat, up, n]) => (dot3(v, *lat), -dot3(v, *up), dot3(v, *n)),
            None => (v[0], v[1], 0.0),
        };
        dirs.push(y.atan2(x));
        if frame.is_some() && lens[i] > 0.0 {
            let e = (z / lens[i]).clamp(-1.0, 1.0).asin();
            let (lo, hi) = b.depth_limits;
            let slack = tol.angle + tol.direction_slack(b.length);
            if e < lo - slack || e > hi + slack {
                violations.push(Violation::Elevation {
                    bone: i,
                    angle: e,
                    limits: b.depth_limits,
                });
            }
        }
    }
    for (i, b) in spec.bones.iter().enumerate() {
        let Some(r) = b.reference else { continue };
        if lens[i] == 0.0 || lens[r] == 0.0 {
            violations.push(Violation::Degenerate);
            continue;
        }
        let rel = wrap(dirs[i] - dirs[r]);
        let (lo, hi) = b.limits;
        // Limits may extend beyond ±π; test the representative nearest the
        // interval.
        let mid = (lo + hi) / 2.0;
        let rel = mid + wrap(rel - mid);
        let slack = tol.angle + tol.direction_slack(b.length) + tol.direction_slack(spec.bones[r].length);
        if rel < lo - slack || rel > hi + slack {
            violations.push(Violation::Angle {
                bone: i,
                joint: spec.names[b.parent].clone(),
                angle: rel,
                limits: b.limits,
            });
        }
    }
    OracleResult {
        plausible: violations.is_empty(),
        violations,
    }
}

/// Rendering and sampling controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub canvas: usize,
    /// Network input side; the crop covers the whole canvas.
    pub crop: usize,
    pub occlusion_rate: f64,
    pub clutter: f64,
    /// Angular spread relative to the limits, in `[0, 1]`.
    pub pose_noise: f64,
    /// Maximum displacement of the pelvis from the canvas center (pixels).
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: 64,
            crop: 32,
            occlusion_rate: 0.3,
            clutter: 0.5,
            pose_noise: 0.8,
            jitter: 6.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.occlusion_rate) || !(0.0..=1.0).contains(&self.clutter) {
            return Err(Error::invalid("occlusion rate and clutter must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.pose_noise) || self.canvas < 16 || self.crop == 0 {
            return Err(Error::invalid("invalid synthesis settings"));
        }
        Ok(())
    }
}

/// Samples a 2D pose placed on the canvas (pelvis near the center).
pub fn sample_pose<R: Rng>(spec: &SkeletonSpec, cfg: &SynthConfig, rng: &mut R) -> LandmarkSet {
    let params = PoseParams::sample(spec, cfg.pose_noise, false, rng);
    let body = forward_kinematics(spec, &params);
    let c = cfg.canvas as f64 / 2.0 - 0.5;
    let off = [
        c + rng.gen_range(-1.0..=1.0) * cfg.jitter,
        c + 1.0 + rng.gen_range(-1.0..=1.0) * cfg.jitter,
    ];
    let pts: Vec<[f64; 2]> = body.iter().map(|p| [p[0] + off[0], p[1] + off[1]]).collect();
    LandmarkSet::from_points2(&pts).expect("finite kinematics")
}

/// A 3D pose in millimetres (root-centered) and its orthographic
/// projection seen by a camera yawed about the body's vertical axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose3dSample {
    pub coords2d: Vec<[f64; 2]>,
    pub coords3d: Vec<[f64; 3]>,
    pub camera: u32,
    pub yaw: f64,
}

/// Number of discrete camera yaws; camera id `c` looks from
/// `−MAX_YAW + 2·MAX_YAW·c/(CAMERAS−1)`.
pub const CAMERAS: u32 = 4;
pub const MAX_YAW_DEG: f64 = 40.0;

pub fn sample_pose3d<R: Rng>(spec: &SkeletonSpec, noise: f64, rng: &mut R) -> Pose3dSample {
    let params = PoseParams::sample(spec, noise, true, rng);
    let body = forward_kinematics(spec, &params);
    let camera = rng.gen_range(0..CAMERAS);
    let yaw = deg(-MAX_YAW_DEG + 2.0 * MAX_YAW_DEG * camera as f64 / (CAMERAS - 1) as f64);
    let (c, s) = (yaw.cos(), yaw.sin());
    let mm = spec.mm_per_px;
    let coords3d: Vec<[f64; 3]> = body
        .iter()
        .map(|p| [mm * (c * p[0] + s * p[2]), mm * p[1], mm * (-s * p[0] + c * p[2])])
        .collect();
    let coords2d = coords3d.iter().map(|p| [p[0], p[1]]).collect();
    Pose3dSample {
        coords2d,
        coords3d,
        camera,
        yaw,
    }
}

/// Generated image with its annotation on the canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkSet,
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Limb stroke radius in canvas pixels.
const LIMB_RADIUS: f64 = 1.5;
const TORSO_RADIUS: f64 = 2.0;
const HEAD_RADIUS: f64 = 3.5;
const OCCLUDER_MAX: f64 = 6.0;
/// Largest occluder offset from its joint, as a fraction of the radius.
const OCCLUDER_SHIFT: f64 = 0.6;
const OCCLUDER_MIN: f64 = 3.0;

/// Renders `pose` (canvas pixels) with occluders over a random subset of
/// in-image joints (each chosen with probability `occlusion_rate`) and
/// `clutter` controlling background texture and distractor strokes.
/// Returns the image and the landmarks with visibility flags.
pub fn render_sample<R: Rng>(
    pose: &LandmarkSet,
    spec: &SkeletonSpec,
    canvas: usize,
    occlusion_rate: f64,
    clutter: f64,
    rng: &mut R,
) -> Result<Sample> {
    if !(0.0..=1.0).contains(&occlusion_rate) || !(0.0..=1.0).contains(&clutter) {
        return Err(Error::invalid("rates must be in [0, 1]"));
    }
    let k = pose.len();
    let size = canvas as f64;
    let pts: Vec<[f64; 2]> = (0..k).map(|i| pose.point2(i)).collect();
    let in_image: Vec<bool> = pts
        .iter()
        .map(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= size - 1.0 && p[1] <= size - 1.0)
        .collect();

    // Background: base color, low-frequency waves and per-pixel grain.
    let base = random_color(rng);
    let alt = random_color(rng);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.05..0.4), rng.gen_range(0.0..PI), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let mut img = Image::new(canvas, canvas);
    for y in 0..canvas {
        for x in 0..canvas {
            let w: f64 = waves
                .iter()
                .map(|&(f, th, ph)| ((x as f64 * th.cos() + y as f64 * th.sin()) * f + ph).sin())
                .sum::<f64>()
                / 3.0;
            let grain: f32 = rng.gen_range(-1.0..1.0) * 0.08 * clutter as f32;
            let t = (0.5 + 0.5 * w * clutter) as f32;
            let c = lerp3(base, alt, t * 0.6);
            let n = canvas * canvas;
            for ch in 0..3 {
                img.data[ch * n + y * canvas + x] = (c[ch] + grain).clamp(0.0, 1.0);
            }
        }
    }
    let body = random_color(rng);
    // Distractor sticks, half of them in a body-like color.
    let n_distract = (clutter * 6.0).round() as usize;
    for _ in 0..n_distract {
        let a = [rng.gen_range(0.0..size), rng.gen_range(0.0..size)];
        let th: f64 = rng.gen_range(0.0..2.0 * PI);
        let l = rng.gen_range(6.0..12.0);
        let color = if rng.gen_bool(0.5) { lerp3(body, random_color(rng), 0.3) } else { random_color(rng) };
        img.stroke(a, [a[0] + l * th.cos(), a[1] + l * th.sin()], LIMB_RADIUS, color);
    }

    // Figure: torso and head first, then limbs with side-dependent shading.
    let light = lerp3(body, [1.0; 3], 0.35);
    let dark = lerp3(body, [0.0; 3], 0.35);
    let side_color = |j: usize| -> [f32; 3] {
        match j {
            0..=2 | 10..=12 => dark,
            3..=5 | 13..=15 => light,
            _ => body,
        }
    };
    for b in &spec.bones {
        let r = if b.child == THORAX || b.child == R_HIP || b.child == L_HIP || b.child == 12 || b.child == 13 {
            TORSO_RADIUS
        } else {
            LIMB_RADIUS
        };
        if b.child == HEAD {
            continue;
        }
        img.stroke(pts[b.parent], pts[b.child], r, side_color(b.child));
    }
    let head_c = [(pts[NECK][0] + pts[HEAD][0]) / 2.0, (pts[NECK][1] + pts[HEAD][1]) / 2.0];
    img.disk(head_c, HEAD_RADIUS, body);

    // Occluders: textured disks over selected joints, shifted off the joint
    // so the disk center does not give its position away, and sized to stay
    // clear of every unselected in-image joint.
    let selected: Vec<bool> = (0..k).map(|i| in_image[i] && rng.gen_bool(occlusion_rate)).collect();
    let mut visible = in_image.clone();
    let clearance = |c: [f64; 2]| {
        (0..k)
            .filter(|&o| in_image[o] && !selected[o])
            .map(|o| ((pts[o][0] - c[0]).powi(2) + (pts[o][1] - c[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    for j in 0..k {
        if !selected[j] {
            continue;
        }
        visible[j] = false;
        let r0 = rng.gen_range(OCCLUDER_MIN..OCCLUDER_MAX);
        let th: f64 = rng.gen_range(0.0..2.0 * PI);
        let shift = rng.gen_range(0.0..OCCLUDER_SHIFT) * r0;
        let shifted = [pts[j][0] + shift * th.cos(), pts[j][1] + shift * th.sin()];
        let r = r0.min(clearance(shifted) - 1.0);
        let (center, radius) = if r >= shift + 0.6 {
            (shifted, r)
        } else {
            (pts[j], r0.min(clearance(pts[j]) - 1.0).max(0.6))
        };
        let (c1, c2) = (random_color(rng), random_color(rng));
        let (fx, fy) = (rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5));
        img.textured_disk(center, radius, |x, y| {
            let t = (((x as f64 * fx).sin() * (y as f64 * fy).cos()) * 0.5 + 0.5) as f32;
            lerp3(c1, c2, t)
        });
    }
    let landmarks = pose.clone().with_flags(visible, in_image)?;
    Ok(Sample { image: img, landmarks })
}

/// Per-sample generator, seeded by `(seed, index)` so samples are
/// independent of generation order.
pub fn generate_sample(spec: &SkeletonSpec, cfg: &SynthConfig, index: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let pose = sample_pose(spec, cfg, &mut rng);
    render_sample(&pose, spec, cfg.canvas, cfg.occlusion_rate, cfg.clutter, &mut rng)
}

pub fn generate_dataset(spec: &SkeletonSpec, cfg: &SynthConfig, n: usize, first_index: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    spec.validate()?;
    exec::map_indexed(n, |i| generate_sample(spec, cfg, first_index + i as u64))
        .into_iter()
        .collect()
}

pub fn generate_pairs(spec: &SkeletonSpec, n: usize, noise: f64, seed: u64) -> Vec<Pose3dSample> {
    exec::map_indexed(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        sample_pose3d(spec, noise, &mut rng)
    })
}

/// Annotation whose crop maps the whole canvas onto `cfg.crop` pixels.
pub fn annotation_for(sample: &Sample, cfg: &SynthConfig, image: &str) -> Annotation {
    let lms = &sample.landmarks;
    let c = cfg.canvas as f64 / 2.0 - 0.5;
    Annotation {
        image: image.to_string(),
        coords: (0..lms.len()).map(|i| lms.point2(i)).collect(),
        visible: lms.visible().to_vec(),
        center: [c, c],
        scale: cfg.canvas as f64 / SCALE_UNIT,
        in_image: Some(lms.in_image().to_vec()),
    }
}

/// Writes `images/NNNNNN.png`, `annotations.jsonl` and `skeleton.json`.
pub fn write_dataset(dir: &Path, samples: &[Sample], spec: &SkeletonSpec, cfg: &SynthConfig) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut ann = fs::File::create(dir.join("annotations.jsonl"))?;
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        s.image.save_png(&dir.join(&rel))?;
        writeln!(ann, "{}", serde_json::to_string(&annotation_for(s, cfg, &rel))?)?;
    }
    fs::write(dir.join("skeleton.json"), serde_json::to_string_pretty(spec)?)?;
    fs::write(dir.join("synth.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

pub fn write_pairs(path: &Path, pairs: &[Pose3dSample]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for p in pairs {
        writeln!(f, "{}", serde_json::to_string(p)?)?;
    }
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<Pose3dSample>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Reference lengths (torso, head segment) of one pose, in its own units.
pub fn reference_lengths(spec: &SkeletonSpec, lms: &LandmarkSet) -> (f64, f64) {
    let pts: Vec<[f64; 3]> = (0..lms.len())
        .map(|i| {
            let p = lms.point(i);
            [p[0], p[1], if lms.dim() == 3 { p[2] } else { 0.0 }]
        })
        .collect();
    (spec.ref_len(&pts, spec.torso), spec.ref_len(&pts, spec.head))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strict() -> (SkeletonSpec, OracleTolerance) {
        let s = SkeletonSpec::default();
        let t = OracleTolerance::strict(&s);
        (s, t)
    }

    #[test]
    fn default_spec_is_a_valid_tree() {
        let s = SkeletonSpec::default();
        s.validate().unwrap();
        assert_eq!(s.joints(), 16);
    }

    #[test]
    fn zero_noise_gives_rest_pose() {
        let s = SkeletonSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(PoseParams::sample(&s, 0.0, true, &mut rng), PoseParams::rest(&s));
    }

    #[test]
    fn sampled_poses_pass_the_oracle() {
        let (s, t) = strict();
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p = sample_pose(&s, &cfg, &mut rng);
            let r = plausibility_oracle(&p, &s, OracleScale::Fixed(1.0), t);
            assert!(r.plausible, "{:?}", r.violations);
            let q = sample_pose3d(&s, 1.0, &mut rng);
            let l = LandmarkSet::from_points3(&q.coords3d).unwrap();
            let r = plausibility_oracle(&l, &s, OracleScale::Fixed(1.0 / s.mm_per_px), t);
            assert!(r.plausible, "{:?}", r.violations);
        }
    }

    #[test]
    fn oracle_is_rigid_invariant() {
        let (s, t) = strict();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = sample_pose3d(&s, 1.0, &mut rng);
        let (c, sn) = (0.7f64.cos(), 0.7f64.sin());
        let moved: Vec<[f64; 3]> = q
            .coords3d
            .iter()
            .map(|p| [c * p[0] - sn * p[1] + 5.0, sn * p[0] + c * p[1], p[2] - 9.0])
            .collect();
        let l = LandmarkSet::from_points3(&moved).unwrap();
        assert!(plausibility_oracle(&l, &s, OracleScale::Fixed(1.0 / s.mm_per_px), t).plausible);
    }

    #[test]
    fn swapped_ankles_break_the_knees() {
        let (s, t) = strict();
        let pts = forward_kinematics(&s, &PoseParams::rest(&s));
        let mut p2: Vec<[f64; 2]> = pts.iter().map(|p| [p[0], p[1]]).collect();
        p2.swap(0, 5);
        let r = plausibility_oracle(&LandmarkSet::from_points2(&p2).unwrap(), &s, OracleScale::Fixed(1.0), t);
        assert!(!r.plausible);
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Angle { joint, .. } if joint.ends_with("knee"))));
    }

    #[test]
    fn occlusion_rate_zero_keeps_everything_visible() {
        let s = SkeletonSpec::default();
        let cfg = SynthConfig {
            occlusion_rate: 0.0,
            ..Default::default()
        };
        for i in 0..20 {
            let smp = generate_sample(&s, &cfg, i).unwrap();
            let l = &smp.landmarks;
            assert_eq!(l.visible(), l.in_image());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = SkeletonSpec::default();
        let cfg = SynthConfig::default();
        assert_eq!(generate_sample(&s, &cfg, 7).unwrap(), generate_sample(&s, &cfg, 7).unwrap());
        assert_ne!(generate_sample(&s, &cfg, 7).unwrap(), generate_sample(&s, &cfg, 8).unwrap());
    }

    #[test]
    fn occluded_joints_are_covered() {
        let s = SkeletonSpec::default();
        let cfg = SynthConfig {
            occlusion_rate: 0.5,
            clutter: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = sample_pose(&s, &cfg, &mut rng);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = r1.clone();
        let clean = render_sample(&pose, &s, 64, 0.0, 0.0, &mut r1).unwrap();
        let occ = render_sample(&pose, &s, 64, 0.5, 0.0, &mut r2).unwrap();
        // Same draws up to the occluder stage, so pixels differ only where
        // occluders landed.
        for i in 0..16 {
            if !occ.landmarks.visible()[i] && occ.landmarks.in_image()[i] {
                let p = pose.point2(i);
                let (x, y) = (p[0].round() as usize, p[1].round() as usize);
                assert_ne!(clean.image.rgb(x, y), occ.image.rgb(x, y), "joint {i}");
            }
        }
    }
}
