use ndarray::{Array1, Array4, Axis, Ix1};

use super::{join, Mode, Module, Param, Scalar};

/// Batch normalization over (n, h, w) per channel.
///
/// Training mode normalizes with batch statistics and updates running
/// averages with momentum; evaluation mode uses the running averages, which
/// makes outputs independent of batch composition.
pub struct BatchNorm2d<F: Scalar> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: F,
    pub eps: F,
    cache: Option<Cache<F>>,
}

struct Cache<F> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
    train: bool,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels).into_dyn()),
            beta: Param::new(Array1::zeros(channels).into_dyn()),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: F::of_f64(0.9),
            eps: F::of_f64(1e-5),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let count = F::from_usize(n * h * w).unwrap();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ci in 0..c {
                    let ch = x.index_axis(Axis(1), ci);
                    let m = ch.sum() / count;
                    let v = ch.mapv(|t| (t - m) * (t - m)).sum() / count;
                    mean[ci] = m;
                    var[ci] = v;
                }
                let one = F::one();
                for ci in 0..c {
                    self.running_mean[ci] =
                        self.momentum * self.running_mean[ci] + (one - self.momentum) * mean[ci];
                    self.running_var[ci] =
                        self.momentum * self.running_var[ci] + (one - self.momentum) * var[ci];
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for ci in 0..c {
            let m = mean[ci];
            let is = inv_std[ci];
            xhat.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|t| (t - m) * is);
        }
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xhat.clone();
        for ci in 0..c {
            let g = gamma[ci];
            let b = beta[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|t| g * t + b);
        }
        if mode == Mode::Train {
            self.cache = Some(Cache {
                xhat,
                inv_std,
                train: true,
            });
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("bn backward without forward");
        let (n, c, h, w) = gy.dim();
        let count = F::from_usize(n * h * w).unwrap();
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut dx = Array4::zeros((n, c, h, w));
        let mut dgamma = self
            .gamma
            .grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let mut dbeta = self
            .beta
            .grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap();
        for ci in 0..c {
            let g = gy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_gy = g.sum();
            let sum_gy_xhat = (&g * &xh).sum();
            dgamma[ci] += sum_gy_xhat;
            dbeta[ci] += sum_gy;
            let scale = gamma[ci] * cache.inv_std[ci];
            let mut d = dx.index_axis_mut(Axis(1), ci);
            if cache.train {
                ndarray::Zip::from(&mut d).and(&g).and(&xh).for_each(|o, &gv, &xv| {
                    *o = scale * (gv - sum_gy / count - xv * sum_gy_xhat / count);
                });
            } else {
                ndarray::Zip::from(&mut d).and(&g).for_each(|o, &gv| {
                    *o = scale * gv;
                });
            }
        }
        dx
    }
}

impl<F: Scalar> Module<F> for BatchNorm2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn train_mode_normalizes_batch() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Array4::from_shape_fn((4, 2, 3, 3), |(a, b, c, d)| {
            (a * 7 + b * 3 + c + d) as f64 * 0.13
        });
        let y = bn.forward(&x, Mode::Train);
        for ci in 0..2 {
            let ch = y.index_axis(Axis(1), ci);
            let m: f64 = ch.sum() / 36.0;
            let v: f64 = ch.mapv(|t| (t - m) * (t - m)).sum() / 36.0;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.running_mean[0] = 0.3;
        bn.running_var[0] = 2.0;
        let x1 = Array4::from_elem((1, 1, 2, 2), 0.7);
        let mut x2 = Array4::from_elem((2, 1, 2, 2), -5.0);
        x2.index_axis_mut(Axis(0), 0).fill(0.7);
        let y1 = bn.forward(&x1, Mode::Eval);
        let y2 = bn.forward(&x2, Mode::Eval);
        assert_eq!(y1[[0, 0, 0, 0]], y2[[0, 0, 0, 0]]);
    }
}
