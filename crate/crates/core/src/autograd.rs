//! Eager reverse-mode automatic differentiation over `Tensor`s.
//!
//! Every op computes its value on construction and records what its backward
//! pass needs. `Graph::backward` walks the tape in reverse from a scalar.
//! Image tensors are laid out `[batch, channels, height, width]`.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output columns `lo..hi` whose input column `ox·stride + kj − pad`
    /// lies inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(self.stride)
        };
        let hi = if self.w + self.pad <= kj {
            0
        } else {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.out_w)
        };
        (lo.min(hi), hi)
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Batch statistics observed by a training-mode batch norm, tagged with the
/// caller-supplied id of the layer that produced them.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub layer: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<Vec<T>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        dims: (usize, usize, usize),
    },
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
        dims: (usize, usize, usize),
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SqErr {
        pred: Var,
        target: Vec<T>,
        weights: Vec<T>,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
    LiteralAdv {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by `Graph::backward`, indexed by `Var`.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Samples handled per partial weight-gradient buffer. Fixed so that the
/// reduction order never depends on the thread count.
const GRAD_CHUNK: usize = 4;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            stats: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats<T>> {
        std::mem::take(&mut self.stats)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] {
            return Err(Error::shape(format!("conv input {xs:?}"), ws));
        }
        let (batch, in_ch, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_ch, kernel) = (ws[0], ws[2]);
        if h + 2 * pad < kernel || wd + 2 * pad < kernel || stride == 0 {
            return Err(Error::shape("input at least kernel size", xs));
        }
        let geom = ConvGeom {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            h,
            w: wd,
            out_h: (h + 2 * pad - kernel) / stride + 1,
            out_w: (wd + 2 * pad - kernel) / stride + 1,
        };
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return Err(Error::shape([out_ch], self.shape(b)));
            }
        }
        let xv = self.value(x);
        let wv = self.value(w).data();
        let in_item = in_ch * h * wd;
        let n_chunks = batch.div_ceil(GRAD_CHUNK);
        // One column matrix [krows, cs·out_hw] per chunk of samples, so each
        // GEMM covers several samples and the weights are packed once.
        let cols: Vec<Vec<T>> = exec::map_indexed(n_chunks, |ci| {
            let (s0, cs) = chunk_bounds(ci, batch);
            let ld = cs * geom.out_hw();
            let mut m = vec![T::zero(); geom.col_rows() * ld];
            for j in 0..cs {
                let item = &xv.data()[(s0 + j) * in_item..(s0 + j + 1) * in_item];
                im2col_into(item, &geom, &mut m, ld, j * geom.out_hw());
            }
            m
        });
        let out_item = out_ch * geom.out_hw();
        let mut out = vec![T::zero(); batch * out_item];
        let bias = b.map(|b| self.value(b).data().to_vec());
        let krows = geom.col_rows();
        let ohw = geom.out_hw();
        exec::for_each_chunk_mut(&mut out, GRAD_CHUNK * out_item, |ci, o| {
            let cs = o.len() / out_item;
            let ld = cs * ohw;
            let mut tmp = vec![T::zero(); out_ch * ld];
            let beta = match &bias {
                Some(bias) => {
                    for (c, row) in tmp.chunks_mut(ld).enumerate() {
                        row.fill(bias[c]);
                    }
                    T::one()
                }
                None => T::zero(),
            };
            T::gemm(
                out_ch,
                krows,
                ld,
                T::one(),
                wv,
                (krows as isize, 1),
                &cols[ci],
                (ld as isize, 1),
                beta,
                &mut tmp,
                (ld as isize, 1),
            );
            scatter_chunk(&tmp, o, out_ch, ohw, cs);
        });
        let value = Tensor::from_vec(&[batch, out_ch, geom.out_h, geom.out_w], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            ng,
        ))
    }

    /// `y = x · wᵀ + b` with `x: [B, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear weight [_, {}]", xs.get(1).unwrap_or(&0)), ws));
        }
        let (batch, inp, outp) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * outp];
        let mut beta = T::zero();
        if let Some(b) = b {
            if self.shape(b) != [outp] {
                return Err(Error::shape([outp], self.shape(b)));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(outp) {
                row.copy_from_slice(bv);
            }
            beta = T::one();
        }
        T::gemm(
            batch,
            inp,
            outp,
            T::one(),
            self.value(x).data(),
            (inp as isize, 1),
            self.value(w).data(),
            (1, inp as isize),
            beta,
            &mut out,
            (outp as isize, 1),
        );
        let value = Tensor::from_vec(&[batch, outp], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(self.shape(a), self.shape(b)));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        let ng = self.ng(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    /// 2×2 max pooling with stride 2. Ties keep the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape("[B, C, even H, even W]", s));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, oh, ow], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, ng))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("[B, C, H, W]", s));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for plane in 0..b * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[plane * 4 * h * w + y * 2 * w + xx] = xv[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, 2 * h, 2 * w], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Upsample2(x), ng))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let batch = first[0];
        let rest = &first[2..];
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != batch || &s[2..] != rest {
                return Err(Error::shape(&first, s));
            }
            total_c += s[1];
        }
        let mut out = Vec::with_capacity(batch * total_c * rest.iter().product::<usize>());
        for bi in 0..batch {
            for &p in parts {
                out.extend_from_slice(self.value(p).item(bi));
            }
        }
        let mut shape = vec![batch, total_c];
        shape.extend_from_slice(rest);
        let value = Tensor::from_vec(&shape, out)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("[B, C, H, W]", s));
        }
        let hw = s[2] * s[3];
        let inv = T::c(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec(&[s[0], s[1]], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Training-mode batch normalization over `[B, C, S...]` with statistics
    /// pooled over batch and spatial positions. The observed statistics are
    /// recorded under `layer` for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        layer: usize,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, c) = (s[0], s[1]);
        let sp: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape([c], self.shape(gamma)));
        }
        if b * sp < 2 {
            return Err(Error::invalid("batch norm needs at least two values per channel"));
        }
        let n = T::c((b * sp) as f64);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * sp;
                mean[ci] += xv[off..off + sp].iter().copied().sum::<T>();
            }
        }
        for m in &mut mean {
            *m = *m / n;
        }
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * sp;
                for &v in &xv[off..off + sp] {
                    let d = v - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        for v in &mut var {
            *v = *v / n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * sp;
                for j in off..off + sp {
                    xhat[j] = (xv[j] - mean[ci]) * inv_std[ci];
                    out[j] = g[ci] * xhat[j] + bt[ci];
                }
            }
        }
        self.stats.push(BatchStats {
            layer,
            mean,
            var,
        });
        let value = Tensor::from_vec(&s, out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (b, c, sp),
            },
            ng,
        ))
    }

    /// Per-channel `y = x * scale + shift` with constant coefficients, as used
    /// by batch norm at inference.
    pub fn channel_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, c) = (s[0], s[1]);
        let sp: usize = s[2..].iter().product();
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape([c], scale.len()));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * sp;
                for j in off..off + sp {
                    out[j] = xv[j] * scale[ci] + shift[ci];
                }
            }
        }
        let value = Tensor::from_vec(&s, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(
            value,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
                dims: (b, c, sp),
            },
            ng,
        ))
    }

    /// Elementwise multiplication by a fixed mask (already scaled by the
    /// keep-probability reciprocal).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape(self.value(x).len(), mask.len()));
        }
        let mut v = self.value(x).clone();
        for (a, &m) in v.data_mut().iter_mut().zip(&mask) {
            *a *= m;
        }
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Dropout { x, mask }, ng))
    }

    /// `Σ_{b,c} weights[b·C + c] · ‖pred[b,c] − target[b,c]‖²` where `c`
    /// indexes axis 1 and the norm runs over the remaining axes.
    pub fn weighted_sq_err(&mut self, pred: Var, target: &[T], weights: &[T]) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        let pv = self.value(pred).data();
        if target.len() != pv.len() {
            return Err(Error::shape(pv.len(), target.len()));
        }
        if weights.len() != s[0] * s[1] {
            return Err(Error::shape(s[0] * s[1], weights.len()));
        }
        let sp = pv.len() / weights.len();
        let mut total = T::zero();
        for (ch, &wgt) in weights.iter().enumerate() {
            if wgt == T::zero() {
                continue;
            }
            let off = ch * sp;
            let mut acc = T::zero();
            for j in off..off + sp {
                let d = pv[j] - target[j];
                acc += d * d;
            }
            total += wgt * acc;
        }
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SqErr {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// `Σ_b weights[b] Σ_k BCE(σ(logits[b,k]), targets[b,k])`, evaluated in
    /// the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], weights: &[T]) -> Result<Var> {
        let (total, ng) = self.check_logit_loss(logits, targets, weights, |s, t| {
            // max(s, 0) - s t + log(1 + e^{-|s|})
            s.max(T::zero()) - s * t + (-s.abs()).exp().ln_1p()
        })?;
        Ok(self.push(
            Tensor::scalar(total),
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// `−Σ_b weights[b] Σ_k log(1 − |σ(logits[b,k]) − targets[b,k]|)`, the
    /// adversarial objective evaluated exactly as written on probabilities.
    pub fn literal_adversarial(&mut self, logits: Var, targets: &[T], weights: &[T]) -> Result<Var> {
        let (total, ng) = self.check_logit_loss(logits, targets, weights, |s, t| {
            let p = sigmoid(s);
            -(T::one() - (p - t).abs()).max(T::min_positive_value()).ln()
        })?;
        Ok(self.push(
            Tensor::scalar(total),
            Op::LiteralAdv {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    fn check_logit_loss(
        &self,
        logits: Var,
        targets: &[T],
        weights: &[T],
        f: impl Fn(T, T) -> T,
    ) -> Result<(T, bool)> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] * s[1] || weights.len() != s[0] {
            return Err(Error::shape(s, (targets.len(), weights.len())));
        }
        if targets.iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(Error::invalid("discriminator targets must be 0 or 1"));
        }
        let k = s[1];
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for (b, &wgt) in weights.iter().enumerate() {
            if wgt == T::zero() {
                continue;
            }
            let mut acc = T::zero();
            for j in b * k..(b + 1) * k {
                acc += f(lv[j], targets[j]);
            }
            total += wgt * acc;
        }
        Ok((total, self.ng(&[logits])))
    }

    /// `Σ coef · term` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape(1, self.value(v).len()));
            }
            total += c * self.value(v).data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("scalar loss", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.conv_backward(*x, *w, *b, geom, cols, g, grads)?,
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (batch, inp) = (xv.shape()[0], xv.shape()[1]);
                let outp = wv.shape()[0];
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); batch * inp];
                    T::gemm(
                        batch,
                        outp,
                        inp,
                        T::one(),
                        g.data(),
                        (outp as isize, 1),
                        wv.data(),
                        (inp as isize, 1),
                        T::zero(),
                        &mut dx,
                        (inp as isize, 1),
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&[batch, inp], dx)?);
                }
                if self.needs_grad(*w) {
                    let mut dw = vec![T::zero(); outp * inp];
                    T::gemm(
                        outp,
                        batch,
                        inp,
                        T::one(),
                        g.data(),
                        (1, outp as isize),
                        xv.data(),
                        (inp as isize, 1),
                        T::zero(),
                        &mut dw,
                        (inp as isize, 1),
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(&[outp, inp], dw)?);
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let mut db = vec![T::zero(); outp];
                        for row in g.data().chunks(outp) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[outp], db)?);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *dv = T::zero();
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                for (dv, &x) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if x <= T::zero() {
                        *dv *= *slope;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = Tensor::zeros(self.shape(*x));
                let dd = d.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    dd[idx as usize] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let mut d = Tensor::zeros(&s);
                let dd = d.data_mut();
                let gd = g.data();
                for plane in 0..s[0] * s[1] {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dd[plane * h * w + (y / 2) * w + xx / 2] += gd[plane * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat(parts) => {
                let batch = g.shape()[0];
                let item = g.item_len();
                let mut offset = 0;
                let sizes: Vec<usize> = parts.iter().map(|p| self.value(*p).item_len()).collect();
                for (pi, &p) in parts.iter().enumerate() {
                    let n = sizes[pi];
                    if self.needs_grad(p) {
                        let mut d = Vec::with_capacity(batch * n);
                        for bi in 0..batch {
                            let base = bi * item + offset;
                            d.extend_from_slice(&g.data()[base..base + n]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(self.shape(p), d)?);
                    }
                    offset += n;
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let hw = s[2] * s[3];
                let inv = T::c(1.0 / hw as f64);
                let mut d = Vec::with_capacity(s.iter().product());
                for &gv in g.data() {
                    d.extend(std::iter::repeat(gv * inv).take(hw));
                }
                self.accumulate(grads, *x, Tensor::from_vec(&s, d)?);
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, d);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (b, c, sp),
            } => {
                let (b, c, sp) = (*b, *c, *sp);
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * sp;
                        for j in off..off + sp {
                            dgamma[ci] += gd[j] * xhat[j];
                            dbeta[ci] += gd[j];
                        }
                    }
                }
                if self.needs_grad(*x) {
                    let n = T::c((b * sp) as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * sp;
                            // dx = γ·inv_std/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
                            let k = gam[ci] * inv_std[ci] / n;
                            for j in off..off + sp {
                                dx[j] = k * (n * gd[j] - dbeta[ci] - xhat[j] * dgamma[ci]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::ChannelAffine {
                x,
                scale,
                dims: (b, c, sp),
            } => {
                let mut d = g.clone();
                let dd = d.data_mut();
                for bi in 0..*b {
                    for ci in 0..*c {
                        let off = (bi * c + ci) * sp;
                        for v in &mut dd[off..off + sp] {
                            *v *= scale[ci];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Dropout { x, mask } => {
                let mut d = g.clone();
                for (v, &m) in d.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                self.accumulate(grads, *x, d);
            }
            Op::SqErr {
                pred,
                target,
                weights,
            } => {
                let up = g.data()[0];
                let pv = self.value(*pred).data();
                let sp = pv.len() / weights.len();
                let mut d = vec![T::zero(); pv.len()];
                let two = T::c(2.0);
                for (ch, &wgt) in weights.iter().enumerate() {
                    if wgt == T::zero() {
                        continue;
                    }
                    let k = two * wgt * up;
                    for j in ch * sp..(ch + 1) * sp {
                        d[j] = k * (pv[j] - target[j]);
                    }
                }
                self.accumulate(grads, *pred, Tensor::from_vec(self.shape(*pred), d)?);
            }
            Op::Bce {
                logits,
                targets,
                weights,
            } => {
                let d = self.logit_grad(*logits, targets, weights, g.data()[0], |s, t| {
                    sigmoid(s) - t
                });
                self.accumulate(grads, *logits, Tensor::from_vec(self.shape(*logits), d)?);
            }
            Op::LiteralAdv {
                logits,
                targets,
                weights,
            } => {
                let d = self.logit_grad(*logits, targets, weights, g.data()[0], |s, t| {
                    let p = sigmoid(s);
                    let q = T::one() - (p - t).abs();
                    if q <= T::min_positive_value() {
                        return T::zero();
                    }
                    let sign = if p > t { T::one() } else { -T::one() };
                    sign * p * (T::one() - p) / q
                });
                self.accumulate(grads, *logits, Tensor::from_vec(self.shape(*logits), d)?);
            }
            Op::WeightedSum(terms) => {
                let up = g.data()[0];
                for &(v, c) in terms {
                    self.accumulate(grads, v, Tensor::scalar(up * c));
                }
            }
        }
        Ok(())
    }

    fn logit_grad(
        &self,
        logits: Var,
        targets: &[T],
        weights: &[T],
        up: T,
        f: impl Fn(T, T) -> T,
    ) -> Vec<T> {
        let lv = self.value(logits).data();
        let k = lv.len() / weights.len();
        let mut d = vec![T::zero(); lv.len()];
        for (b, &wgt) in weights.iter().enumerate() {
            if wgt == T::zero() {
                continue;
            }
            for j in b * k..(b + 1) * k {
                d[j] = up * wgt * f(lv[j], targets[j]);
            }
        }
        d
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: &[Vec<T>],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let batch = g.shape()[0];
        let krows = geom.col_rows();
        let ohw = geom.out_hw();
        let out_item = geom.out_ch * ohw;
        let in_item = geom.in_ch * geom.h * geom.w;
        let wv = self.value(w).data();
        let gd = g.data();
        let n_chunks = batch.div_ceil(GRAD_CHUNK);
        let want_w = self.needs_grad(w);
        let want_x = self.needs_grad(x);
        // Per chunk: output gradient gathered to [out_ch, cs·out_hw], then the
        // weight-gradient partial and the input-gradient block.
        let parts = exec::map_indexed(n_chunks, |ci| {
            let (s0, cs) = chunk_bounds(ci, batch);
            let ld = cs * ohw;
            let gc = gather_chunk(&gd[s0 * out_item..(s0 + cs) * out_item], geom.out_ch, ohw, cs);
            let dw = want_w.then(|| {
                let mut acc = vec![T::zero(); geom.out_ch * krows];
                T::gemm(
                    geom.out_ch,
                    ld,
                    krows,
                    T::one(),
                    &gc,
                    (ld as isize, 1),
                    &cols[ci],
                    (1, ld as isize),
                    T::zero(),
                    &mut acc,
                    (krows as isize, 1),
                );
                acc
            });
            let dx = want_x.then(|| {
                let mut dcols = vec![T::zero(); krows * ld];
                T::gemm(
                    krows,
                    geom.out_ch,
                    ld,
                    T::one(),
                    wv,
                    (1, krows as isize),
                    &gc,
                    (ld as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (ld as isize, 1),
                );
                let mut dx = vec![T::zero(); cs * in_item];
                for j in 0..cs {
                    col2im_from(&dcols, ld, j * ohw, geom, &mut dx[j * in_item..(j + 1) * in_item]);
                }
                dx
            });
            (dw, dx)
        });
        if want_w {
            let mut dw = Tensor::zeros(self.shape(w));
            for (p, _) in &parts {
                for (a, &v) in dw.data_mut().iter_mut().zip(p.as_ref().expect("weight grad")) {
                    *a += v;
                }
            }
            self.accumulate(grads, w, dw);
        }
        if let Some(b) = b {
            if self.needs_grad(b) {
                let mut db = vec![T::zero(); geom.out_ch];
                for s in 0..batch {
                    for (c, row) in gd[s * out_item..(s + 1) * out_item].chunks(ohw).enumerate() {
                        db[c] += row.iter().copied().sum::<T>();
                    }
                }
                self.accumulate(grads, b, Tensor::from_vec(&[geom.out_ch], db)?);
            }
        }
        if want_x {
            let mut dx = Vec::with_capacity(batch * in_item);
            for (_, d) in parts {
                dx.extend(d.expect("input grad"));
            }
            self.accumulate(grads, x, Tensor::from_vec(self.shape(x), dx)?);
        }
        Ok(())
    }
}

fn chunk_bounds(ci: usize, batch: usize) -> (usize, usize) {
    let s0 = ci * GRAD_CHUNK;
    (s0, GRAD_CHUNK.min(batch - s0))
}

/// `[cs][rows][hw]` → `[rows][cs·hw]`.
fn gather_chunk<T: Scalar>(src: &[T], rows: usize, hw: usize, cs: usize) -> Vec<T> {
    let ld = cs * hw;
    let mut out = vec![T::zero(); rows * ld];
    for j in 0..cs {
        for r in 0..rows {
            let from = &src[(j * rows + r) * hw..(j * rows + r + 1) * hw];
            out[r * ld + j * hw..r * ld + (j + 1) * hw].copy_from_slice(from);
        }
    }
    out
}

/// `[rows][cs·hw]` → `[cs][rows][hw]`.
fn scatter_chunk<T: Scalar>(src: &[T], dst: &mut [T], rows: usize, hw: usize, cs: usize) {
    let ld = cs * hw;
    for j in 0..cs {
        for r in 0..rows {
            dst[(j * rows + r) * hw..(j * rows + r + 1) * hw]
                .copy_from_slice(&src[r * ld + j * hw..r * ld + (j + 1) * hw]);
        }
    }
}

pub fn sigmoid<T: Scalar>(s: T) -> T {
    if s >= T::zero() {
        T::one() / (T::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (T::one() + e)
    }
}

/// Writes the column matrix of one sample into `cols` (row stride `ld`,
/// starting at column `off`).
fn im2col_into<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, off: usize) {
    for c in 0..g.in_ch {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + g.out_hw()];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let (lo, hi) = g.valid_cols(kj);
                    if g.stride == 1 {
                        let ix0 = lo + kj - g.pad;
                        drow[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col_into`.
fn col2im_from<T: Scalar>(cols: &[T], ld: usize, off: usize, g: &ConvGeom, dx: &mut [T]) {
    for c in 0..g.in_ch {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * ld + off..row * ld + off + g.out_hw()];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let (lo, hi) = g.valid_cols(kj);
                    if g.stride == 1 {
                        let ix0 = base + lo + kj - g.pad;
                        for (d, &v) in dx[ix0..ix0 + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in srow.iter().enumerate().take(hi).skip(lo) {
                            dx[base + ox * g.stride + kj - g.pad] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `build` w.r.t. every element of every
    /// listed input.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], t.shape());
            for j in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, tt)| {
                            let mut tt = tt.clone();
                            if k == i {
                                tt.data_mut()[j] += delta;
                            }
                            g2.param(tt)
                        })
                        .collect();
                    let l = build(&mut g2, &vs);
                    g2.value(l).data()[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
                assert!(err < 1e-4 || (a - numeric).abs() < 1e-8, "input {i} elem {j}: {a} vs {numeric}");
            }
        }
    }

    fn probe(t: &Tensor<f64>) -> Vec<f64> {
        (0..t.len()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()
    }

    fn dot_loss(g: &mut Graph<f64>, v: Var) -> Var {
        let t = g.value(v).clone();
        let w = probe(&t);
        let zeros = vec![0.0; t.len()];
        // Σ (v - 0)² weighted, plus linear probe through a second sq-err
        let flat = g.reshape(v, &[1, 1, t.len()]).unwrap();
        let sq = g.weighted_sq_err(flat, &w, &[1.0]).unwrap();
        let sq2 = g.weighted_sq_err(flat, &zeros, &[0.5]).unwrap();
        g.weighted_sum(&[(sq, 1.0), (sq2, 0.3)]).unwrap()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, stride, pad) in [(3, 1, 1), (1, 1, 0), (3, 2, 1), (7, 2, 3)] {
            let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
            let w = rand_tensor(&mut rng, &[3, 2, k, k]);
            let b = rand_tensor(&mut rng, &[3]);
            check(vec![x, w, b], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
                dot_loss(g, y)
            });
        }
    }

    #[test]
    fn pooling_and_structure_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let y = rand_tensor(&mut rng, &[2, 1, 4, 4]);
        check(vec![x, y], |g, v| {
            let c = g.concat(&[v[0], v[1]]).unwrap();
            let p = g.max_pool2(c).unwrap();
            let r = g.leaky_relu(p, 0.2);
            let u = g.upsample2(r).unwrap();
            let s = g.scale(u, 1.5);
            let a = g.add(s, c).unwrap();
            let r2 = g.relu(a);
            let gp = g.global_avg_pool(r2).unwrap();
            dot_loss(g, gp)
        });
    }

    #[test]
    fn linear_and_batch_norm_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[5, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3]);
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        check(vec![x, w, b, gamma, beta], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let n = g.batch_norm_train(y, v[3], v[4], 1e-5, 0).unwrap();
            let m: Vec<f64> = (0..15).map(|i| if i % 4 == 0 { 0.0 } else { 1.25 }).collect();
            let d = g.dropout(n, m).unwrap();
            dot_loss(g, d)
        });
    }

    #[test]
    fn logit_losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        check(vec![x.clone()], |g, v| g.bce_with_logits(v[0], &targets, &[1.0, 0.5, 2.0]).unwrap());
        check(vec![x], |g, v| g.literal_adversarial(v[0], &targets, &[1.0, 0.0, 2.0]).unwrap());
    }

    #[test]
    fn literal_and_bce_agree_on_binary_targets() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(&[1, 4], vec![-2.0, -0.1, 0.3, 4.0]).unwrap());
        let t = [0.0, 1.0, 1.0, 0.0];
        let a = g.bce_with_logits(x, &t, &[1.0]).unwrap();
        let b = g.literal_adversarial(x, &t, &[1.0]).unwrap();
        approx::assert_relative_eq!(g.value(a).data()[0], g.value(b).data()[0], max_relative = 1e-12);
    }

    #[test]
    fn targets_outside_binary_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[1, 2]));
        assert!(g.bce_with_logits(x, &[0.5, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[1, 2], 1.0));
        let d = g.detach(x);
        let l = g.weighted_sq_err(d, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn conv_is_identical_in_both_exec_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[9, 3, 8, 8]).cast::<f32>();
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]).cast::<f32>();
        let run = || {
            let mut g = Graph::<f32>::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let target = vec![0.5f32; g.value(y).len()];
            let l = g.weighted_sq_err(y, &target, &vec![1.0; 36]).unwrap();
            let gr = g.backward(l).unwrap();
            (g.value(y).clone(), gr.get(wv).cloned(), gr.get(xv).cloned())
        };
        exec::set_mode(exec::Mode::Sequential);
        let a = run();
        exec::set_mode(exec::Mode::Parallel);
        let b = run();
        assert_eq!(a, b);
    }
}
