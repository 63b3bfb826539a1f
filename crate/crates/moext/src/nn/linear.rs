use ndarray::{Array2, Axis, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

use super::{init_weight, join, Mode, Module, Param, Scalar};

/// Fully connected layer, y = x W^T + b.
pub struct Linear<F: Scalar> {
    pub weight: Param<F>, // (out, in)
    pub bias: Param<F>,   // (out,)
    cache: Option<Array2<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = init_weight::<F, _>(rng, Ix2(out_dim, in_dim), in_dim);
        let bias = init_weight::<F, _>(rng, Ix1(out_dim), in_dim);
        Self {
            weight: Param::new(weight.into_dyn()),
            bias: Param::new(bias.into_dyn()),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: Mode) -> Array2<F> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.outer_iter_mut() {
            row.scaled_add(F::one(), &b);
        }
        if mode == Mode::Train {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Array2<F>) -> Array2<F> {
        let x = self.cache.take().expect("linear backward without forward");
        let dw = gy.t().dot(&x);
        self.weight
            .grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .scaled_add(F::one(), &dw);
        let db = gy.sum_axis(Axis(0));
        self.bias
            .grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .scaled_add(F::one(), &db);
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        gy.dot(&w)
    }
}

impl<F: Scalar> Module<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}
