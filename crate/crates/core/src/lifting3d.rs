//! 2D→3D lifting: a residual fully connected regressor on root-centered
//! joint coordinates, optionally refined against the 3D pose discriminator.
//!
//! Inputs and targets are divided by the skeleton's mean bone length, so one
//! normalized unit is one average bone; predictions are mapped back to
//! millimetres on the way out.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::discriminators::{build_discriminator, discriminator_term, generator_adversarial_term, Variant};
use crate::error::{Error, Result};
use crate::heatmap::LandmarkSet;
use crate::metrics::{mpjpe, Protocol};
use crate::nn::{update_running_stats, BatchNorm, Bound, Builder, Linear, ParamSet};
use crate::optim::RmsProp;
use crate::synthdata::{Pose3dSample, SkeletonSpec};
use crate::tensor::{Scalar, Tensor};

const INIT_STREAM: u64 = 5;
const TRAIN_STREAM: u64 = 17;
const NOISE_STREAM: u64 = 18;

#[derive(Clone, Copy, Debug)]
struct Layer {
    linear: Linear,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct LifterModel<T: Scalar> {
    pub params: ParamSet<T>,
    pub joints: usize,
    pub root: usize,
    /// Normalizer of the 2D inputs and 3D outputs (input units, millimetres).
    pub scale2d: f64,
    pub scale3d: f64,
    pub dropout: f64,
    input: Layer,
    blocks: Vec<[Layer; 2]>,
    output: Linear,
}

pub fn build_lifter<T: Scalar>(cfg: &TrainConfig, spec: &SkeletonSpec) -> Result<LifterModel<T>> {
    cfg.validate()?;
    if spec.joints() != cfg.joints {
        return Err(Error::config(format!(
            "skeleton has {} joints, config expects {}",
            spec.joints(),
            cfg.joints
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    let mut params = ParamSet::new();
    let mut b = Builder::new(&mut params, &mut rng);
    let (k, w) = (cfg.joints, cfg.lifter_width);
    let layer = |b: &mut Builder<'_, T, ChaCha8Rng>, name: &str, inp: usize| {
        let mut s = b.scope(name);
        Layer {
            linear: s.linear("fc", inp, w),
            bn: s.batch_norm("bn", w),
        }
    };
    let input = layer(&mut b, "input", 2 * k);
    let blocks = (0..cfg.lifter_blocks)
        .map(|i| {
            let mut s = b.scope(&format!("block{i}"));
            [layer(&mut s, "a", w), layer(&mut s, "b", w)]
        })
        .collect();
    let output = b.linear("output", w, 3 * k);
    let unit = spec.mean_bone_length(true);
    Ok(LifterModel {
        params,
        joints: k,
        root: spec.root,
        scale2d: unit,
        scale3d: unit,
        dropout: cfg.dropout,
        input,
        blocks,
        output,
    })
}

/// Per-forward randomness: `None` means inference (frozen statistics, no
/// dropout).
pub type Train<'a> = Option<&'a mut ChaCha8Rng>;

impl<T: Scalar> LifterModel<T> {
    fn layer(&self, g: &mut Graph<T>, p: &Bound, l: &Layer, x: Var, train: &mut Train<'_>) -> Result<Var> {
        let h = l.linear.forward(g, p, x)?;
        let h = l.bn.forward(g, p, h, train.is_some())?;
        let h = g.relu(h);
        match train {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let inv = T::c(1.0 / keep);
                let mask = (0..g.value(h).len())
                    .map(|_| if rng.gen::<f64>() < keep { inv } else { T::zero() })
                    .collect();
                g.dropout(h, mask)
            }
            _ => Ok(h),
        }
    }

    /// Normalized `[B, 2K]` → normalized `[B, 3K]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, mut train: Train<'_>) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != 2 * self.joints {
            return Err(Error::shape(format!("[B, {}]", 2 * self.joints), s));
        }
        let mut h = self.layer(g, p, &self.input, x, &mut train)?;
        for blk in &self.blocks {
            let a = self.layer(g, p, &blk[0], h, &mut train)?;
            let b = self.layer(g, p, &blk[1], a, &mut train)?;
            h = g.add(h, b)?;
        }
        self.output.forward(g, p, h)
    }

    /// Root-centered, scaled input row for one 2D pose.
    pub fn normalize_input(&self, pose2d: &[[f64; 2]]) -> Result<Vec<f64>> {
        if pose2d.len() != self.joints {
            return Err(Error::shape(self.joints, pose2d.len()));
        }
        if pose2d.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("2D pose contains non-finite coordinates"));
        }
        let r = pose2d[self.root];
        Ok(pose2d
            .iter()
            .flat_map(|p| [(p[0] - r[0]) / self.scale2d, (p[1] - r[1]) / self.scale2d])
            .collect())
    }

    /// Inference on a batch of 2D poses; root-centered millimetres out.
    pub fn lift_batch(&self, poses: &[Vec<[f64; 2]>]) -> Result<Vec<Vec<[f64; 3]>>> {
        let k = self.joints;
        let mut rows = Vec::with_capacity(poses.len() * 2 * k);
        for p in poses {
            rows.extend(self.normalize_input(p)?.into_iter().map(T::c));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::from_vec(&[poses.len(), 2 * k], rows)?);
        let y = self.forward(&mut g, &bound, x, None)?;
        Ok(g.value(y)
            .data()
            .chunks(3 * k)
            .map(|row| {
                row.chunks(3)
                    .map(|c| [c[0].f64() * self.scale3d, c[1].f64() * self.scale3d, c[2].f64() * self.scale3d])
                    .collect()
            })
            .collect())
    }

    pub fn lift(&self, pose2d: &[[f64; 2]]) -> Result<Vec<[f64; 3]>> {
        Ok(self.lift_batch(&[pose2d.to_vec()])?.remove(0))
    }
}

/// Paired samples in the lifter's normalized space.
#[derive(Clone, Debug)]
pub struct PairedData {
    pub joints: usize,
    /// `[N, 2K]`, noise included.
    pub inputs: Vec<f32>,
    /// `[N, 3K]`.
    pub targets: Vec<f32>,
    /// Noisy 2D inputs in their original units.
    pub poses2d: Vec<Vec<[f64; 2]>>,
    /// Root-centered ground truth in millimetres.
    pub gt3d: Vec<Vec<[f64; 3]>>,
}

impl PairedData {
    /// Adds `N(0, noise_std²)` to every 2D coordinate (input units), drawn
    /// from a stream of `seed`.
    pub fn new(samples: &[Pose3dSample], spec: &SkeletonSpec, noise_std: f64, seed: u64) -> Result<Self> {
        let k = spec.joints();
        if samples.is_empty() {
            return Err(Error::invalid("no paired samples"));
        }
        let unit = spec.mean_bone_length(true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(NOISE_STREAM);
        let normal = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
        let mut d = PairedData {
            joints: k,
            inputs: Vec::with_capacity(samples.len() * 2 * k),
            targets: Vec::with_capacity(samples.len() * 3 * k),
            poses2d: Vec::with_capacity(samples.len()),
            gt3d: Vec::with_capacity(samples.len()),
        };
        for (n, s) in samples.iter().enumerate() {
            if s.coords2d.len() != k || s.coords3d.len() != k {
                return Err(Error::invalid(format!(
                    "sample {n}: expected {k} paired joints, got {} 2D / {} 3D",
                    s.coords2d.len(),
                    s.coords3d.len()
                )));
            }
            let all = s.coords2d.iter().flatten().chain(s.coords3d.iter().flatten());
            if all.into_iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("sample {n}: non-finite coordinates")));
            }
            let p2: Vec<[f64; 2]> = s
                .coords2d
                .iter()
                .map(|p| {
                    if noise_std > 0.0 {
                        [p[0] + normal.sample(&mut rng), p[1] + normal.sample(&mut rng)]
                    } else {
                        *p
                    }
                })
                .collect();
            let r2 = p2[spec.root];
            for p in &p2 {
                d.inputs.push(((p[0] - r2[0]) / unit) as f32);
                d.inputs.push(((p[1] - r2[1]) / unit) as f32);
            }
            let r3 = s.coords3d[spec.root];
            let gt: Vec<[f64; 3]> = s
                .coords3d
                .iter()
                .map(|p| [p[0] - r3[0], p[1] - r3[1], p[2] - r3[2]])
                .collect();
            for p in &gt {
                d.targets.extend(p.iter().map(|v| (v / unit) as f32));
            }
            d.poses2d.push(p2);
            d.gt3d.push(gt);
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.gt3d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt3d.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> (Tensor<f32>, Vec<f32>) {
        let k = self.joints;
        let x: Vec<f32> = idx.iter().flat_map(|&i| self.inputs[i * 2 * k..(i + 1) * 2 * k].iter().copied()).collect();
        let y: Vec<f32> = idx.iter().flat_map(|&i| self.targets[i * 3 * k..(i + 1) * 3 * k].iter().copied()).collect();
        (Tensor::from_vec(&[idx.len(), 2 * k], x).expect("row layout"), y)
    }
}

/// `1` where a joint's 3D error is below `delta` (normalized units, i.e.
/// mean bone lengths), for one `[3K]` row.
pub fn pose3d_fake_labels(pred: &[f32], gt: &[f32], delta: f64) -> Vec<f64> {
    pred.chunks(3)
        .zip(gt.chunks(3))
        .map(|(p, q)| {
            let d = p.iter().zip(q).map(|(a, b)| (a - b).powi(2) as f64).sum::<f64>().sqrt();
            if d < delta {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// `(1/B) Σ_b ‖ŷ_b − y_b‖²` on a `[B, 3K]` prediction.
pub fn lifter_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &[T]) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::shape("[B>0, 3K]", s));
    }
    let w = vec![T::c(1.0 / s[0] as f64); s[0] * s[1]];
    g.weighted_sq_err(pred, target, &w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub l_p3d: Option<f64>,
    pub val_mpjpe: Option<f64>,
}

pub struct LiftOutcome {
    /// Best validation snapshot (or the final model without validation).
    pub model: LifterModel<f32>,
    pub history: Vec<LiftEpoch>,
}

/// Trains the lifter, with the P3D discriminator when `adversarial`.
pub fn train_lifter(
    cfg: &TrainConfig,
    spec: &SkeletonSpec,
    train: &PairedData,
    val: Option<&PairedData>,
    adversarial: bool,
    verbose: bool,
) -> Result<LiftOutcome> {
    if train.is_empty() || train.joints != cfg.joints {
        return Err(Error::invalid("paired data does not match the config"));
    }
    let mut model = build_lifter::<f32>(cfg, spec)?;
    let mut opt = RmsProp::new(&model.params, cfg.learning_rate);
    let mut disc = if adversarial {
        Some(build_discriminator::<f32>(cfg, Variant::P3d)?)
    } else {
        None
    };
    let mut opt_d = disc.as_ref().map(|d| RmsProp::new(&d.params, cfg.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let k = cfg.joints;
    let form = cfg.adversarial_form;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, ParamSet<f32>)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut sum, mut sum_d, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // Batch normalization needs two samples for a variance.
            if chunk.len() < 2 {
                continue;
            }
            let b = chunk.len();
            let (x, y) = train.rows(chunk);
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let xv = g.constant(x);
            let pred = model.forward(&mut g, &p, xv, Some(&mut rng))?;
            let stats = g.take_batch_stats();
            let pred_vals = g.value(pred).data().to_vec();
            let sup = lifter_loss(&mut g, pred, &y)?;
            let mut terms = vec![(sup, 1.0f32)];
            let mut fake = Vec::new();
            if let (Some(d), Some(od)) = (&mut disc, &mut opt_d) {
                for i in 0..b {
                    let r = i * 3 * k..(i + 1) * 3 * k;
                    fake.extend(pose3d_fake_labels(&pred_vals[r.clone()], &y[r], cfg.delta));
                }
                let t: Vec<f32> = fake.iter().map(|&v| v as f32).collect();
                let ones = vec![1.0f32; b * k];
                let mut ld = 0.0;
                for (input, targets) in [(pred_vals.clone(), &t), (y.clone(), &ones)] {
                    let mut gd = Graph::new();
                    let dp = d.params.bind(&mut gd, true);
                    let xin = gd.constant(Tensor::from_vec(&[b, 3 * k], input)?);
                    let logits = d.forward_p3d(&mut gd, &dp, xin)?;
                    let loss = discriminator_term(&mut gd, logits, targets, form)?;
                    ld += gd.value(loss).data()[0] as f64;
                    let grads = gd.backward(loss)?;
                    let grads = d.params.collect_grads(&dp, &grads);
                    od.step(&mut d.params, &grads);
                }
                sum_d += ld * b as f64;
                if cfg.beta > 0.0 {
                    let dp = d.params.bind(&mut g, false);
                    let logits = d.forward_p3d(&mut g, &dp, pred)?;
                    if let Some(adv) = generator_adversarial_term(&mut g, logits, &fake, form)? {
                        terms.push((adv, cfg.beta as f32));
                    }
                }
            }
            let total = g.weighted_sum(&terms)?;
            let lv = g.value(sup).data()[0] as f64;
            let tv = g.value(total).data()[0] as f64;
            if !lv.is_finite() || !tv.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: json!({"component": "lifter", "indices": chunk}).to_string(),
                });
            }
            let grads = g.backward(total)?;
            let grads = model.params.collect_grads(&p, &grads);
            opt.step(&mut model.params, &grads);
            update_running_stats(&mut model.params, &stats, b);
            sum += lv * b as f64;
            n += b;
            step += 1;
        }
        let n = n.max(1) as f64;
        let val_mpjpe = val.map(|v| evaluate_lifter(&model, v, Protocol::RootAligned)).transpose()?;
        if let Some(m) = val_mpjpe {
            if best.as_ref().map_or(true, |b| m < b.0) {
                best = Some((m, model.params.clone()));
            }
        }
        history.push(LiftEpoch {
            epoch,
            loss: sum / n,
            l_p3d: disc.as_ref().map(|_| sum_d / n),
            val_mpjpe,
        });
        if verbose {
            let h = history.last().unwrap();
            tracing::info!(epoch = h.epoch, loss = h.loss, l_p3d = h.l_p3d, val_mpjpe = h.val_mpjpe, "lift epoch done");
        }
    }
    if let Some((_, p)) = best {
        model.params = p;
    }
    Ok(LiftOutcome { model, history })
}

/// Mean per-joint position error (mm) of the lifter on `data`.
pub fn evaluate_lifter(model: &LifterModel<f32>, data: &PairedData, protocol: Protocol) -> Result<f64> {
    let preds = model.lift_batch(&data.poses2d)?;
    Ok(mpjpe(&preds, &data.gt3d, protocol, model.root)?.mean)
}

/// The training-set mean pose, the trivial lifter.
pub fn mean_pose(data: &PairedData) -> Vec<[f64; 3]> {
    let k = data.joints;
    let mut m = vec![[0.0; 3]; k];
    for pose in &data.gt3d {
        for (acc, p) in m.iter_mut().zip(pose) {
            for c in 0..3 {
                acc[c] += p[c];
            }
        }
    }
    let n = data.len() as f64;
    m.iter().map(|p| [p[0] / n, p[1] / n, p[2] / n]).collect()
}

/// 3D predictions as landmark sets (all joints present).
pub fn as_landmarks(poses: &[Vec<[f64; 3]>]) -> Result<Vec<LandmarkSet>> {
    poses.iter().map(|p| LandmarkSet::from_points3(p)).collect()
}

pub fn save_lifter(model: &LifterModel<f32>, cfg: &TrainConfig, spec: &SkeletonSpec, path: &std::path::Path) -> Result<()> {
    let mut ck = Checkpoint::new(json!({
        "kind": "lifter",
        "config": cfg.to_text(),
        "skeleton": spec,
    }));
    ck.push_params("L", &model.params);
    ck.save(path)
}

pub fn load_lifter(path: &std::path::Path) -> Result<(LifterModel<f32>, TrainConfig, SkeletonSpec)> {
    let ck = Checkpoint::load(path)?;
    if ck.meta["kind"] != "lifter" {
        return Err(Error::Format(format!("{} is not a lifter checkpoint", path.display())));
    }
    let cfg = TrainConfig::from_text(ck.meta["config"].as_str().unwrap_or(""))?;
    let spec: SkeletonSpec = serde_json::from_value(ck.meta["skeleton"].clone())?;
    let mut m = build_lifter::<f32>(&cfg, &spec)?;
    ck.load_params("L", &mut m.params)?;
    Ok((m, cfg, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_pairs;

    fn cfg() -> TrainConfig {
        TrainConfig {
            task: crate::config::Task::Lift3d,
            lifter_width: 32,
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 1,
            ..Default::default()
        }
    }

    #[test]
    fn arity_follows_k() {
        let spec = SkeletonSpec::default();
        let m = build_lifter::<f32>(&cfg(), &spec).unwrap();
        let out = m.lift(&vec![[1.0, 2.0]; 16]).unwrap();
        assert_eq!(out.len(), 16);
        assert!(m.lift(&vec![[1.0, 2.0]; 15]).is_err());
    }

    #[test]
    fn nan_input_is_rejected() {
        let spec = SkeletonSpec::default();
        let m = build_lifter::<f32>(&cfg(), &spec).unwrap();
        let mut p = vec![[1.0, 2.0]; 16];
        p[3][1] = f64::NAN;
        assert!(m.lift(&p).is_err());
    }

    #[test]
    fn zero_parameters_give_constant_output() {
        let spec = SkeletonSpec::default();
        let mut m = build_lifter::<f32>(&cfg(), &spec).unwrap();
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            if m.params.is_trainable(id) {
                m.params.get_mut(id).data_mut().fill(0.0);
            }
        }
        let a = m.lift(&vec![[1.0, 2.0]; 16]).unwrap();
        let b = m.lift(&(0..16).map(|i| [i as f64 * 3.0, -(i as f64)]).collect::<Vec<_>>()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inference_is_repeatable() {
        let spec = SkeletonSpec::default();
        let pairs = generate_pairs(&spec, 64, 0.8, 3);
        let data = PairedData::new(&pairs, &spec, 40.0, 3).unwrap();
        let out = train_lifter(&cfg(), &spec, &data, None, false, false).unwrap();
        let a = out.model.lift_batch(&data.poses2d[..4]).unwrap();
        let b = out.model.lift_batch(&data.poses2d[..4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unpaired_samples_are_rejected() {
        let spec = SkeletonSpec::default();
        let mut pairs = generate_pairs(&spec, 4, 0.8, 3);
        pairs[2].coords3d.pop();
        assert!(PairedData::new(&pairs, &spec, 0.0, 0).is_err());
    }

    #[test]
    fn fake_labels_threshold_per_joint() {
        let gt = [0.0f32; 6];
        let pred = [0.3f32, 0.0, 0.0, 0.0, 0.5, 0.0];
        assert_eq!(pose3d_fake_labels(&pred, &gt, 0.5), vec![1.0, 0.0]);
    }

    #[test]
    fn adversarial_training_runs_and_checkpoints() {
        let spec = SkeletonSpec::default();
        let pairs = generate_pairs(&spec, 96, 0.8, 4);
        let data = PairedData::new(&pairs, &spec, 40.0, 4).unwrap();
        let c = TrainConfig { disc3d_width: 16, ..cfg() };
        let out = train_lifter(&c, &spec, &data, Some(&data), true, false).unwrap();
        assert!(out.history.iter().all(|h| h.l_p3d.is_some()));
        let dir = std::env::temp_dir().join(format!("lift_ck_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("lifter.spck");
        save_lifter(&out.model, &c, &spec, &path).unwrap();
        let (back, _, _) = load_lifter(&path).unwrap();
        assert_eq!(back.lift_batch(&data.poses2d[..3]).unwrap(), out.model.lift_batch(&data.poses2d[..3]).unwrap());
        std::fs::remove_dir_all(dir).ok();
    }
}
