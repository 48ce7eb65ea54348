//! Pose (P), confidence (C) and 3D pose (P3D) discriminators, the fake-label
//! rules and the discriminator objective.
//!
//! P and C share an encoder-decoder: 3×3 convolutions with leaky rectifiers,
//! `depth` max-pool levels down, nearest upsampling back up with skip
//! concatenation of the matching encoder level, then global average pooling
//! and a linear layer to K logits. P additionally sees the image, resampled
//! to the heatmap grid. P3D is five fully connected layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var};
use crate::config::{AdversarialForm, TrainConfig};
use crate::error::{Error, Result};
use crate::heatmap::LandmarkSet;
use crate::imaging::CHANNELS;
use crate::nn::{Bound, Builder, Conv, Linear, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const LEAK: f64 = 0.2;
pub const P3D_WIDTH: usize = 128;
pub const P3D_LAYERS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    P2d,
    C2d,
    P3d,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::P2d => "P2D",
            Variant::C2d => "C2D",
            Variant::P3d => "P3D",
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    EncDec {
        enc: Vec<Conv>,
        dec: Vec<Conv>,
        head: Linear,
    },
    Mlp(Vec<Linear>),
}

#[derive(Clone, Debug)]
pub struct DiscriminatorModel<T: Scalar> {
    pub variant: Variant,
    pub params: ParamSet<T>,
    /// Output arity.
    pub joints: usize,
    pub in_channels: usize,
    body: Body,
}

fn stream(v: Variant) -> u64 {
    match v {
        Variant::P2d => 2,
        Variant::C2d => 3,
        Variant::P3d => 4,
    }
}

/// Heatmap channels per sample seen by P and C: pose, plus occlusion when
/// the multi-task head is on.
pub fn heatmap_channels(cfg: &TrainConfig) -> usize {
    if cfg.occlusion_enabled() {
        2 * cfg.joints
    } else {
        cfg.joints
    }
}

pub fn build_discriminator<T: Scalar>(cfg: &TrainConfig, variant: Variant) -> Result<DiscriminatorModel<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream(variant));
    let mut params = ParamSet::new();
    let mut b = Builder::new(&mut params, &mut rng);
    let k = cfg.joints;
    let (in_channels, body) = match variant {
        Variant::P2d | Variant::C2d => {
            let cin = heatmap_channels(cfg) + if variant == Variant::P2d { CHANNELS } else { 0 };
            let w = cfg.disc_width;
            let mut enc = vec![b.conv("enc0", cin, w, 3, 1)];
            for l in 1..=cfg.disc_depth {
                enc.push(b.conv(&format!("enc{l}"), w, w, 3, 1));
            }
            let dec = (0..cfg.disc_depth)
                .map(|l| b.conv(&format!("dec{l}"), 2 * w, w, 3, 1))
                .collect();
            let head = b.linear("head", w, k);
            (cin, Body::EncDec { enc, dec, head })
        }
        Variant::P3d => {
            let w = cfg.disc3d_width;
            let mut dims = vec![3 * k];
            dims.extend(std::iter::repeat(w).take(P3D_LAYERS - 1));
            dims.push(k);
            let layers = dims
                .windows(2)
                .enumerate()
                .map(|(i, d)| b.linear(&format!("fc{i}"), d[0], d[1]))
                .collect();
            (3 * k, Body::Mlp(layers))
        }
    };
    Ok(DiscriminatorModel {
        variant,
        params,
        joints: k,
        in_channels,
        body,
    })
}

impl<T: Scalar> DiscriminatorModel<T> {
    /// K logits per sample for an already assembled input (`[B, C, H, W]`
    /// for P/C, `[B, 3K]` for P3D).
    pub fn logits(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<Var> {
        let s = g.shape(input).to_vec();
        if s.len() < 2 || s[1] != self.in_channels {
            return Err(Error::shape(format!("[B, {}, ..]", self.in_channels), s));
        }
        let slope = T::c(LEAK);
        match &self.body {
            Body::EncDec { enc, dec, head } => {
                let mut skips = Vec::with_capacity(enc.len());
                let mut h = input;
                for (l, c) in enc.iter().enumerate() {
                    if l > 0 {
                        h = g.max_pool2(h)?;
                    }
                    h = c.forward(g, p, h)?;
                    h = g.leaky_relu(h, slope);
                    skips.push(h);
                }
                for (l, c) in dec.iter().enumerate().rev() {
                    let up = g.upsample2(h)?;
                    let cat = g.concat(&[up, skips[l]])?;
                    h = c.forward(g, p, cat)?;
                    h = g.leaky_relu(h, slope);
                }
                let pooled = g.global_avg_pool(h)?;
                head.forward(g, p, pooled)
            }
            Body::Mlp(layers) => {
                let mut h = input;
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(g, p, h)?;
                    if i + 1 < layers.len() {
                        h = g.leaky_relu(h, slope);
                    }
                }
                Ok(h)
            }
        }
    }

    /// Logits of P on (image at grid resolution, pose, occlusion).
    pub fn forward_p(&self, g: &mut Graph<T>, p: &Bound, image: Var, pose: Var, occ: Option<Var>) -> Result<Var> {
        self.expect(Variant::P2d)?;
        let mut parts = vec![image, pose];
        parts.extend(occ);
        let x = g.concat(&parts)?;
        self.logits(g, p, x)
    }

    pub fn forward_c(&self, g: &mut Graph<T>, p: &Bound, pose: Var, occ: Option<Var>) -> Result<Var> {
        self.expect(Variant::C2d)?;
        let x = match occ {
            Some(o) => g.concat(&[pose, o])?,
            None => pose,
        };
        self.logits(g, p, x)
    }

    /// Logits of P3D on flattened root-centered poses `[B, 3K]`.
    pub fn forward_p3d(&self, g: &mut Graph<T>, p: &Bound, pose3d: Var) -> Result<Var> {
        self.expect(Variant::P3d)?;
        self.logits(g, p, pose3d)
    }

    fn expect(&self, v: Variant) -> Result<()> {
        if self.variant == v {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{} discriminator used as {}",
                self.variant.tag(),
                v.tag()
            )))
        }
    }

    /// Frozen evaluation: per-sample probabilities `[B, K]`.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let l = self.logits(&mut g, &p, x)?;
        Ok(g.value(l).map(sigmoid))
    }
}

/// `1` where `‖pred_i − gt_i‖ / ref_len < delta`, else `0`. Joints whose
/// ground truth lies outside the image carry no structural evidence and are
/// labeled `1`.
pub fn pose_fake_labels(pred: &LandmarkSet, gt: &LandmarkSet, ref_len: f64, delta: f64) -> Result<Vec<f64>> {
    if !(ref_len > 0.0) || !ref_len.is_finite() {
        return Err(Error::invalid(format!("reference length must be positive, got {ref_len}")));
    }
    if pred.len() != gt.len() || pred.dim() != gt.dim() {
        return Err(Error::shape((gt.len(), gt.dim()), (pred.len(), pred.dim())));
    }
    Ok((0..gt.len())
        .map(|i| {
            if !gt.in_image()[i] {
                return 1.0;
            }
            let d = dist(pred.point(i), gt.point(i)) / ref_len;
            if d < delta {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `1` where the channel residual `‖y_i − ŷ_i‖₂ < epsilon`, else `0`, for
/// one sample's `[K, H, W]` stacks.
pub fn confidence_fake_labels<T: Scalar>(pred: &[T], gt: &[T], k: usize, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    if pred.len() != gt.len() || k == 0 || gt.len() % k != 0 {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let hw = gt.len() / k;
    Ok((0..k)
        .map(|i| {
            let r = pred[i * hw..(i + 1) * hw]
                .iter()
                .zip(&gt[i * hw..(i + 1) * hw])
                .map(|(&p, &y)| (p.f64() - y.f64()).powi(2))
                .sum::<f64>()
                .sqrt();
            if r < epsilon {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

/// One term of the discriminator objective: per-element loss of `logits`
/// (`[B, K]`) against `targets`, averaged over the batch.
pub fn discriminator_term<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[T],
    form: AdversarialForm,
) -> Result<Var> {
    let b = g.shape(logits)[0];
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let w = vec![T::c(1.0 / b as f64); b];
    match form {
        AdversarialForm::CrossEntropy => g.bce_with_logits(logits, targets, &w),
        AdversarialForm::Literal => g.literal_adversarial(logits, targets, &w),
    }
}

/// Real outputs against all-ones plus fake outputs against `fake_target`;
/// the discriminator descends this (i.e. ascends the adversarial objective).
pub fn discriminator_loss<T: Scalar>(
    g: &mut Graph<T>,
    real_logits: Var,
    fake_logits: Var,
    fake_target: &[T],
    form: AdversarialForm,
) -> Result<Var> {
    let ones = vec![T::one(); g.value(real_logits).len()];
    let real = discriminator_term(g, real_logits, &ones, form)?;
    let fake = discriminator_term(g, fake_logits, fake_target, form)?;
    g.weighted_sum(&[(real, T::one()), (fake, T::one())])
}

/// Per-sample weights of the generator's adversarial term: `1/B`, or `0`
/// for a sample whose `k` fake labels are all ones.
pub fn gate_weights<T: Scalar>(labels: &[f64], k: usize) -> Vec<T> {
    let b = labels.len() / k.max(1);
    labels
        .chunks(k.max(1))
        .map(|l| if l.iter().all(|&v| v == 1.0) { T::zero() } else { T::c(1.0 / b as f64) })
        .collect()
}

/// Generator-side adversarial term `Σ_b w_b Σ_k ℓ(D(G(x))[b,k], 1)` with
/// gated weights. `None` when every sample is gated: the term is then not
/// built and contributes nothing.
pub fn generator_adversarial_term<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    fake_labels: &[f64],
    form: AdversarialForm,
) -> Result<Option<Var>> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || fake_labels.len() != s[0] * s[1] {
        return Err(Error::shape(s, fake_labels.len()));
    }
    let w: Vec<T> = gate_weights(fake_labels, s[1]);
    if w.iter().all(|&v| v == T::zero()) {
        return Ok(None);
    }
    let ones = vec![T::one(); fake_labels.len()];
    let t = match form {
        AdversarialForm::CrossEntropy => g.bce_with_logits(logits, &ones, &w)?,
        AdversarialForm::Literal => g.literal_adversarial(logits, &ones, &w)?,
    };
    Ok(Some(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg() -> TrainConfig {
        TrainConfig {
            joints: 16,
            input_size: 32,
            disc_width: 8,
            ..Default::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn outputs_are_bounded_with_k_entries() {
        let c = cfg();
        for v in [Variant::P2d, Variant::C2d, Variant::P3d] {
            let d = build_discriminator::<f64>(&c, v).unwrap();
            let x = if v == Variant::P3d {
                random(&[3, 48], 1)
            } else {
                random(&[3, d.in_channels, 8, 8], 1)
            };
            let y = d.predict(&x).unwrap();
            assert_eq!(y.shape(), &[3, 16]);
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zero_params_give_one_half() {
        let mut d = build_discriminator::<f64>(&cfg(), Variant::P2d).unwrap();
        let ids: Vec<_> = d.params.ids().collect();
        for id in ids {
            d.params.get_mut(id).data_mut().fill(0.0);
        }
        let y = d.predict(&random(&[2, d.in_channels, 8, 8], 3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn p_sees_image_and_both_heatmap_sets() {
        let d = build_discriminator::<f64>(&cfg(), Variant::P2d).unwrap();
        assert_eq!(d.in_channels, 3 + 32);
        let face = TrainConfig {
            task: crate::config::Task::Face,
            eyes: Some((0, 1)),
            ..cfg()
        };
        assert_eq!(build_discriminator::<f64>(&face, Variant::C2d).unwrap().in_channels, 16);
    }

    #[test]
    fn c_is_sensitive_to_channel_permutation() {
        let d = build_discriminator::<f64>(&cfg(), Variant::C2d).unwrap();
        let x = random(&[1, 32, 8, 8], 5);
        let mut swapped = x.clone();
        let hw = 64;
        let (a, b) = x.data().split_at(hw);
        swapped.data_mut()[..hw].copy_from_slice(&b[..hw]);
        swapped.data_mut()[hw..2 * hw].copy_from_slice(a);
        assert_ne!(d.predict(&x).unwrap(), d.predict(&swapped).unwrap());
    }

    #[test]
    fn wrong_variant_or_arity_is_rejected() {
        let d = build_discriminator::<f64>(&cfg(), Variant::C2d).unwrap();
        let mut g = Graph::new();
        let p = d.params.bind(&mut g, false);
        let x = g.constant(random(&[1, 48], 0));
        assert!(d.forward_p3d(&mut g, &p, x).is_err());
        let bad = g.constant(random(&[1, 5, 8, 8], 0));
        assert!(d.logits(&mut g, &p, bad).is_err());
    }

    #[test]
    fn pose_labels_follow_threshold() {
        let gt = LandmarkSet::from_points2(&[[0.0, 0.0], [10.0, 0.0]]).unwrap();
        let pred = LandmarkSet::from_points2(&[[0.1, 0.0], [10.3, 0.0]]).unwrap();
        assert_eq!(pose_fake_labels(&pred, &gt, 1.0, 0.2).unwrap(), vec![1.0, 0.0]);
        assert_eq!(pose_fake_labels(&gt, &gt, 1.0, 0.2).unwrap(), vec![1.0, 1.0]);
        assert!(pose_fake_labels(&pred, &gt, 0.0, 0.2).is_err());
    }

    #[test]
    fn confidence_labels_flag_a_missing_blob() {
        let grid = crate::heatmap::GridSpec::for_input(32, 8);
        let gt = LandmarkSet::from_points2(&[[10.0, 10.0], [20.0, 14.0]]).unwrap();
        let y = crate::heatmap::encode_heatmaps(&gt, grid, 1.0).unwrap().into_values();
        let mut pred = y.clone();
        pred[64..].fill(0.0);
        let eps = 0.5 * crate::heatmap::ideal_blob_norm(1.0);
        assert_eq!(confidence_fake_labels(&pred, &y, 2, eps).unwrap(), vec![1.0, 0.0]);
        assert_eq!(confidence_fake_labels(&y, &y, 2, eps).unwrap(), vec![1.0, 1.0]);
        assert!(confidence_fake_labels(&y[..64], &y, 2, eps).is_err());
    }

    #[test]
    fn perfect_discriminator_reaches_optimum() {
        let mut g = Graph::<f64>::new();
        let real = g.param(Tensor::full(&[1, 2], 60.0));
        let fake = g.param(Tensor::from_vec(&[1, 2], vec![60.0, -60.0]).unwrap());
        let l = discriminator_loss(&mut g, real, fake, &[1.0, 0.0], AdversarialForm::CrossEntropy).unwrap();
        assert!(g.value(l).data()[0] < 1e-20);
    }

    #[test]
    fn all_ones_fake_target_mirrors_real_term() {
        let mut g = Graph::<f64>::new();
        let x = g.param(random(&[2, 3], 9));
        let ones = [1.0; 6];
        let a = discriminator_term(&mut g, x, &ones, AdversarialForm::CrossEntropy).unwrap();
        let l = discriminator_loss(&mut g, x, x, &ones, AdversarialForm::CrossEntropy).unwrap();
        assert!((g.value(l).data()[0] - 2.0 * g.value(a).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn non_binary_targets_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(random(&[1, 2], 2));
        assert!(discriminator_loss(&mut g, x, x, &[0.5, 1.0], AdversarialForm::CrossEntropy).is_err());
    }
}
