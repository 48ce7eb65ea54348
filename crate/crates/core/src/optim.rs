use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};

/// RMSprop with the Torch7 defaults: `v ← ρv + (1−ρ)g²`,
/// `θ ← θ − lr·g / (√v + ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp<T> {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    square_avg: Vec<Tensor<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        RmsProp {
            lr,
            decay: 0.99,
            eps: 1e-8,
            square_avg: params.iter().map(|(_, v, _)| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn state(&self) -> &[Tensor<T>] {
        &self.square_avg
    }

    pub fn set_state(&mut self, state: Vec<Tensor<T>>) {
        self.square_avg = state;
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) {
        let lr = T::c(self.lr);
        let rho = T::c(self.decay);
        let one_minus = T::one() - rho;
        let eps = T::c(self.eps);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !params.is_trainable(id) {
                continue;
            }
            let sq = self.square_avg[i].data_mut();
            let g = grads[i].data();
            let p = params.get_mut(id).data_mut();
            for ((pv, &gv), s) in p.iter_mut().zip(g).zip(sq.iter_mut()) {
                *s = rho * *s + one_minus * gv * gv;
                *pv -= lr * gv / (s.sqrt() + eps);
            }
        }
    }
}
