//! Named parameter storage and the layers the networks are assembled from.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named arrays. Non-trainable entries hold buffers
/// such as batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.trainable)
            .map(|((n, v), &t)| (n.as_str(), v, t))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(v, _)| v.len())
            .sum()
    }

    /// Puts every entry on the tape. With `grad == false` all entries become
    /// constants, which is how a network is run frozen.
    pub fn bind(&self, g: &mut Graph<T>, grad: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| {
                if grad && t {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients for every entry, zero-filled where nothing flowed.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, &var)| grads.get_or_zeros(var, v.shape()))
            .collect()
    }

    /// Replaces values from `(name, tensor)` pairs, requiring an exact match
    /// of names and shapes.
    pub fn load(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Format(format!(
                "expected {} parameter arrays, found {}",
                self.values.len(),
                entries.len()
            )));
        }
        for (name, t) in entries {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    t.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = t.clone();
        }
        Ok(())
    }
}

/// Tape handles for a `ParamSet`, indexed by `ParamId`.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Creates parameters under a dotted name prefix with fan-in scaled
/// Gaussian initialization.
pub struct Builder<'a, T, R> {
    set: &'a mut ParamSet<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(set: &'a mut ParamSet<T>, rng: &'a mut R) -> Self {
        Builder {
            set,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> Builder<'b, T, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            set: self.set,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::c(z * std)
            })
            .collect();
        let t = Tensor::from_vec(shape, data).expect("shape product");
        let full = self.full_name(name);
        self.set.add(full, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> ParamId {
        let full = self.full_name(name);
        self.set.add(full, Tensor::full(shape, T::c(value)), trainable)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Conv {
        self.conv_with_gain(name, cin, cout, kernel, stride, 1.0)
    }

    /// He-initialized convolution with the weight scale multiplied by `gain`.
    pub fn conv_with_gain(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, gain: f64) -> Conv {
        let mut s = self.scope(name);
        let fan_in = (cin * kernel * kernel) as f64;
        let w = s.gaussian("weight", &[cout, cin, kernel, kernel], gain * (2.0 / fan_in).sqrt());
        let b = s.constant("bias", &[cout], 0.0, true);
        Conv {
            w,
            b,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        let mut s = self.scope(name);
        let w = s.gaussian("weight", &[out, inp], (2.0 / inp as f64).sqrt());
        let b = s.constant("bias", &[out], 0.0, true);
        Linear { w, b }
    }

    pub fn batch_norm(&mut self, name: &str, ch: usize) -> BatchNorm {
        let mut s = self.scope(name);
        let gamma = s.constant("gamma", &[ch], 1.0, true);
        let beta = s.constant("beta", &[ch], 0.0, true);
        let running_mean = s.constant("running_mean", &[ch], 0.0, false);
        let running_var = s.constant("running_var", &[ch], 1.0, false);
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn residual(&mut self, name: &str, cin: usize, cout: usize) -> Residual {
        let mut s = self.scope(name);
        let mid = (cout / 2).max(1);
        let c1 = s.conv("conv1", cin, mid, 1, 1);
        let c2 = s.conv("conv2", mid, mid, 3, 1);
        let c3 = s.conv_with_gain("conv3", mid, cout, 1, 1, RESIDUAL_GAIN);
        let skip = (cin != cout).then(|| s.conv("skip", cin, cout, 1, 1));
        Residual { c1, c2, c3, skip }
    }
}

/// Init scale of a residual branch's last convolution. Without
/// normalization layers, full-scale branches double the activation variance
/// per block; near-identity blocks keep deep stacks at unit scale.
pub const RESIDUAL_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    /// Batch statistics in training mode, frozen running statistics
    /// otherwise.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, train: bool) -> Result<Var> {
        if train {
            return g.batch_norm_train(
                x,
                p.var(self.gamma),
                p.var(self.beta),
                T::c(BN_EPS),
                self.running_mean.index(),
            );
        }
        let mean = g.value(p.var(self.running_mean)).data().to_vec();
        let var = g.value(p.var(self.running_var)).data().to_vec();
        let gamma = g.value(p.var(self.gamma)).data().to_vec();
        let beta = g.value(p.var(self.beta)).data().to_vec();
        let scale: Vec<T> = gamma
            .iter()
            .zip(&var)
            .map(|(&gm, &v)| gm / (v + T::c(BN_EPS)).sqrt())
            .collect();
        let shift: Vec<T> = beta
            .iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        // gamma/beta enter as constants here; inference never backpropagates
        // into them.
        g.channel_affine(x, &scale, &shift)
    }
}

/// Folds observed batch statistics into the running averages.
pub fn update_running_stats<T: Scalar>(set: &mut ParamSet<T>, stats: &[crate::autograd::BatchStats<T>], count: usize) {
    let m = T::c(BN_MOMENTUM);
    let unbias = if count > 1 {
        T::c(count as f64 / (count - 1) as f64)
    } else {
        T::one()
    };
    for st in stats {
        let mean_id = ParamId(st.layer);
        let var_id = ParamId(st.layer + 1);
        for (r, &b) in set.get_mut(mean_id).data_mut().iter_mut().zip(&st.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in set.get_mut(var_id).data_mut().iter_mut().zip(&st.var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
}

/// Pre-activation bottleneck block: three convolutions (1×1, 3×3, 1×1) with
/// rectifiers in front of each, plus an identity (or 1×1 projected) skip.
#[derive(Clone, Copy, Debug)]
pub struct Residual {
    pub c1: Conv,
    pub c2: Conv,
    pub c3: Conv,
    pub skip: Option<Conv>,
}

impl Residual {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.relu(x);
        let h = self.c1.forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.c2.forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.c3.forward(g, p, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builder_names_are_scoped() {
        let mut set = ParamSet::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut set, &mut rng);
        let mut s = b.scope("stem");
        s.residual("res0", 4, 8);
        assert!(set.find("stem.res0.conv2.weight").is_some());
        assert!(set.find("stem.res0.skip.bias").is_some());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut set = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = Builder::new(&mut set, &mut rng).batch_norm("bn", 1);
        let mut g = Graph::new();
        let p = set.bind(&mut g, true);
        let x = g.constant(Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut g, &p, x, true).unwrap();
        let stats = g.take_batch_stats();
        update_running_stats(&mut set, &stats, 2);
        assert!((set.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        // biased var 1, unbiased 2: 0.9 * 1 + 0.1 * 2
        assert!((set.get(bn.running_var).data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut set = ParamSet::<f32>::new();
        set.add("a", Tensor::zeros(&[2]), true);
        assert!(set.load(&[("a".into(), Tensor::zeros(&[3]))]).is_err());
        assert!(set.load(&[("a".into(), Tensor::full(&[2], 1.0))]).is_ok());
    }
}
