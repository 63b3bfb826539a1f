use ndarray::{s, Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::nn::{join, ConvBlock, Mode, Module, Param, Scalar};

/// Motion extractor: M = C2(Concat(C1(|S_a - S_o|), S_a)).
///
/// The Conv blocks operate on 1x1 spatial maps, so features are lifted to
/// (n, d, 1, 1) before the blocks and flattened back afterwards.
pub struct MotionExtractor<F: Scalar> {
    pub c1: ConvBlock<F>,
    pub c2: ConvBlock<F>,
    sign: Option<Array2<F>>, // sign(S_a - S_o), zero branch at equality
}

impl<F: Scalar> MotionExtractor<F> {
    pub fn new(feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c1: ConvBlock::new(feature_dim, feature_dim, rng),
            c2: ConvBlock::new(2 * feature_dim, feature_dim, rng),
            sign: None,
        }
    }

    /// Element-wise absolute difference of the two shape feature batches.
    pub fn shape_delta(s_o: &Array2<F>, s_a: &Array2<F>) -> Array2<F> {
        assert_eq!(s_o.dim(), s_a.dim(), "shape feature batch mismatch");
        (s_a - s_o).mapv(|v| v.abs())
    }

    pub fn forward(&mut self, s_o: &Array2<F>, s_a: &Array2<F>, mode: Mode) -> Array2<F> {
        let (n, d) = s_o.dim();
        let delta = Self::shape_delta(s_o, s_a);
        if mode == Mode::Train {
            self.sign = Some((s_a - s_o).mapv(|v| {
                if v > F::zero() {
                    F::one()
                } else if v < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            }));
        }
        let delta4 = delta.into_shape_with_order((n, d, 1, 1)).unwrap();
        let h1 = self.c1.forward(&delta4, mode);
        let mut cat = Array4::zeros((n, 2 * d, 1, 1));
        cat.slice_mut(s![.., ..d, .., ..]).assign(&h1);
        cat.slice_mut(s![.., d.., .., ..])
            .assign(&s_a.view().into_shape_with_order((n, d, 1, 1)).unwrap());
        let m4 = self.c2.forward(&cat, mode);
        m4.into_shape_with_order((n, d)).unwrap()
    }

    /// Returns (dL/dS_o, dL/dS_a).
    pub fn backward(&mut self, g_m: &Array2<F>) -> (Array2<F>, Array2<F>) {
        let (n, d) = g_m.dim();
        let g_m4 = g_m.to_owned().into_shape_with_order((n, d, 1, 1)).unwrap();
        let g_cat = self.c2.backward(&g_m4);
        let g_h1 = g_cat.slice(s![.., ..d, .., ..]).to_owned();
        let g_sa_direct = g_cat
            .slice(s![.., d.., .., ..])
            .to_owned()
            .into_shape_with_order((n, d))
            .unwrap();
        let g_delta = self
            .c1
            .backward(&g_h1)
            .into_shape_with_order((n, d))
            .unwrap();
        let sign = self.sign.take().expect("motion backward without forward");
        let g_sa = &g_delta * &sign + g_sa_direct;
        let g_so = -(&g_delta * &sign);
        (g_so, g_sa)
    }
}

impl<F: Scalar> Module<F> for MotionExtractor<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.c1.visit_params(&join(prefix, "c1"), f);
        self.c2.visit_params(&join(prefix, "c2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn delta_is_zero_for_equal_inputs() {
        let s = array![[0.3f64, -0.7, 2.0]];
        let delta = MotionExtractor::shape_delta(&s, &s);
        assert!(delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_is_symmetric() {
        let a = array![[0.3f64, -0.7, 2.0], [1.0, 0.0, -1.0]];
        let b = array![[-0.1f64, 0.4, 1.0], [2.0, 2.0, 2.0]];
        assert_eq!(
            MotionExtractor::shape_delta(&a, &b),
            MotionExtractor::shape_delta(&b, &a)
        );
    }

    #[test]
    fn output_dimension_matches_feature_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ext = MotionExtractor::<f64>::new(6, &mut rng);
        let s_o = Array2::from_shape_fn((3, 6), |(i, j)| (i as f64 - j as f64) * 0.2);
        let s_a = Array2::from_shape_fn((3, 6), |(i, j)| (i * j) as f64 * 0.1);
        let m = ext.forward(&s_o, &s_a, Mode::Train);
        assert_eq!(m.dim(), (3, 6));
    }
}
