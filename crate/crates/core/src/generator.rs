//! Stacked multi-task heatmap generator.
//!
//! Stem: 7×7 stride-2 conv, residual, 2×2 max-pool, two residuals — the
//! input side shrinks by 4. Each stack runs an hourglass and a residual,
//! then two heads (pose, occlusion) of two 1×1 convolutions each. The next
//! stack sees `x + proj(features) + proj(pose) + proj(occ)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::imaging::CHANNELS;
use crate::nn::{Bound, Builder, Conv, ParamSet, Residual, RESIDUAL_GAIN};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
struct Hourglass {
    up: Residual,
    down: Residual,
    inner: Option<Box<Hourglass>>,
    bottom: Option<Residual>,
    after: Residual,
}

impl Hourglass {
    fn build<T: Scalar, R: rand::Rng>(b: &mut Builder<'_, T, R>, width: usize, depth: usize) -> Self {
        let up = b.residual("up", width, width);
        let down = b.residual("down", width, width);
        let (inner, bottom) = if depth > 1 {
            let mut s = b.scope("inner");
            (Some(Box::new(Hourglass::build(&mut s, width, depth - 1))), None)
        } else {
            (None, Some(b.residual("bottom", width, width)))
        };
        let after = b.residual("after", width, width);
        Hourglass {
            up,
            down,
            inner,
            bottom,
            after,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let up = self.up.forward(g, p, x)?;
        let low = g.max_pool2(x)?;
        let low = self.down.forward(g, p, low)?;
        let low = match (&self.inner, &self.bottom) {
            (Some(h), _) => h.forward(g, p, low)?,
            (None, Some(r)) => r.forward(g, p, low)?,
            _ => unreachable!("hourglass level has either an inner level or a bottom"),
        };
        let low = self.after.forward(g, p, low)?;
        let low = g.upsample2(low)?;
        g.add(up, low)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub first: Conv,
    pub second: Conv,
}

impl Head {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(g, p, x)?;
        let h = g.relu(h);
        self.second.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
struct Stack {
    hourglass: Hourglass,
    post: Residual,
    feature: Conv,
    pose: Head,
    occ: Option<Head>,
    /// Re-injection projections (absent on the last stack).
    reinject: Option<(Conv, Conv, Option<Conv>)>,
}

/// Per-stack outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct StackOutput {
    pub pose: Var,
    pub occ: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct GeneratorModel<T: Scalar> {
    pub params: ParamSet<T>,
    pub joints: usize,
    pub width: usize,
    pub input_size: usize,
    pub multitask: bool,
    stem: (Conv, Residual, Residual, Residual),
    stacks: Vec<Stack>,
}

/// Seed-stream offset so the generator's draws are independent of other
/// networks initialized from the same config seed.
const INIT_STREAM: u64 = 1;

pub fn build_generator<T: Scalar>(cfg: &TrainConfig) -> Result<GeneratorModel<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    let mut params = ParamSet::new();
    let f = cfg.width;
    let k = cfg.joints;
    let multitask = cfg.occlusion_enabled();
    let mut b = Builder::new(&mut params, &mut rng);
    let stem = {
        let mut s = b.scope("stem");
        (
            s.conv("conv", CHANNELS, f, 7, 2),
            s.residual("res1", f, f),
            s.residual("res2", f, f),
            s.residual("res3", f, f),
        )
    };
    let mut stacks = Vec::with_capacity(cfg.stacks);
    for n in 0..cfg.stacks {
        let mut s = b.scope(&format!("stack{n}"));
        let hourglass = {
            let mut h = s.scope("hourglass");
            Hourglass::build(&mut h, f, cfg.hourglass_depth)
        };
        let post = s.residual("post", f, f);
        let feature = s.conv("feature", f, f, 1, 1);
        let head = |s: &mut Builder<'_, T, ChaCha8Rng>, name: &str| {
            let mut h = s.scope(name);
            Head {
                first: h.conv("conv1", f, k, 1, 1),
                second: h.conv_with_gain("conv2", k, k, 1, 1, RESIDUAL_GAIN),
            }
        };
        let pose = head(&mut s, "pose");
        let occ = multitask.then(|| head(&mut s, "occ"));
        let reinject = (n + 1 < cfg.stacks).then(|| {
            let mut r = s.scope("reinject");
            (
                r.conv_with_gain("feature", f, f, 1, 1, RESIDUAL_GAIN),
                r.conv_with_gain("pose", k, f, 1, 1, RESIDUAL_GAIN),
                multitask.then(|| r.conv_with_gain("occ", k, f, 1, 1, RESIDUAL_GAIN)),
            )
        });
        stacks.push(Stack {
            hourglass,
            post,
            feature,
            pose,
            occ,
            reinject,
        });
    }
    Ok(GeneratorModel {
        params,
        joints: k,
        width: f,
        input_size: cfg.input_size,
        multitask,
        stem,
        stacks,
    })
}

impl<T: Scalar> GeneratorModel<T> {
    pub fn num_stacks(&self) -> usize {
        self.stacks.len()
    }

    pub fn heatmap_size(&self) -> usize {
        self.input_size / 4
    }

    /// Sets every output-head parameter to zero.
    pub fn zero_heads(&mut self) {
        let heads: Vec<Head> = self
            .stacks
            .iter()
            .flat_map(|s| std::iter::once(s.pose).chain(s.occ))
            .collect();
        for h in heads {
            for id in [h.first.w, h.first.b, h.second.w, h.second.b] {
                self.params.get_mut(id).data_mut().fill(T::zero());
            }
        }
    }

    /// Parameter names of stack `n`'s output heads.
    pub fn head_param_names(&self, n: usize) -> Vec<String> {
        let s = &self.stacks[n];
        std::iter::once(s.pose)
            .chain(s.occ)
            .flat_map(|h| [h.first.w, h.first.b, h.second.w, h.second.b])
            .map(|id| self.params.name(id).to_string())
            .collect()
    }

    /// Records the forward pass of `images` (`[B, 3, S, S]`) on `g`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Vec<StackOutput>> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != CHANNELS || s[2] != self.input_size || s[3] != self.input_size {
            return Err(Error::shape(
                format!("[B, {CHANNELS}, {0}, {0}]", self.input_size),
                s,
            ));
        }
        let (conv, r1, r2, r3) = &self.stem;
        let x = conv.forward(g, p, images)?;
        let x = r1.forward(g, p, x)?;
        let x = g.max_pool2(x)?;
        let x = r2.forward(g, p, x)?;
        let mut x = r3.forward(g, p, x)?;
        let mut outs = Vec::with_capacity(self.stacks.len());
        for st in &self.stacks {
            let h = st.hourglass.forward(g, p, x)?;
            let h = st.post.forward(g, p, h)?;
            let h = g.relu(h);
            let feat = st.feature.forward(g, p, h)?;
            let feat = g.relu(feat);
            let pose = st.pose.forward(g, p, feat)?;
            let occ = st.occ.map(|o| o.forward(g, p, feat)).transpose()?;
            if let Some((rf, rp, ro)) = &st.reinject {
                let f = rf.forward(g, p, feat)?;
                let mut next = g.add(x, f)?;
                let y = rp.forward(g, p, pose)?;
                next = g.add(next, y)?;
                if let (Some(ro), Some(occ)) = (ro, occ) {
                    let z = ro.forward(g, p, occ)?;
                    next = g.add(next, z)?;
                }
                x = next;
            }
            outs.push(StackOutput { pose, occ });
        }
        Ok(outs)
    }

    /// Frozen forward pass; returns per-stack `(pose, occ)` tensors.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<(Tensor<T>, Option<Tensor<T>>)>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let outs = self.forward(&mut g, &p, x)?;
        Ok(outs
            .iter()
            .map(|o| (g.value(o.pose).clone(), o.occ.map(|v| g.value(v).clone())))
            .collect())
    }
}

/// Pose heatmaps of the last stack, clipped into `[0, 1]`.
pub fn final_pose<T: Scalar>(outs: &[(Tensor<T>, Option<Tensor<T>>)]) -> Tensor<T> {
    outs.last()
        .expect("at least one stack")
        .0
        .map(|v| v.max(T::zero()).min(T::one()))
}

/// Supervised heatmap objective:
/// `(1/2MN) Σ_n Σ_i (‖y_i − ŷ_{n,i}‖² + ‖z_i − ẑ_{n,i}‖²)`, where the mask
/// (`[M·K]`) drops channels of joints outside the image.
pub fn generator_mse_loss<T: Scalar>(
    g: &mut Graph<T>,
    outs: &[StackOutput],
    gt_pose: &[T],
    gt_occ: Option<&[T]>,
    mask: &[bool],
) -> Result<Var> {
    let first = outs.first().ok_or_else(|| Error::invalid("no stack outputs"))?;
    let shape = g.shape(first.pose).to_vec();
    let m = shape[0];
    if m == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if mask.len() != m * shape[1] {
        return Err(Error::shape(m * shape[1], mask.len()));
    }
    let norm = T::c(1.0 / (2.0 * m as f64 * outs.len() as f64));
    let w: Vec<T> = mask
        .iter()
        .map(|&keep| if keep { norm } else { T::zero() })
        .collect();
    let mut terms = Vec::new();
    for o in outs {
        terms.push((g.weighted_sq_err(o.pose, gt_pose, &w)?, T::one()));
        match (o.occ, gt_occ) {
            (Some(v), Some(z)) => terms.push((g.weighted_sq_err(v, z, &w)?, T::one())),
            (None, None) => {}
            _ => return Err(Error::invalid("occlusion outputs and targets must both be present")),
        }
    }
    g.weighted_sum(&terms)
}
