use ndarray::{s, Array2, Array4, Ix1, Ix4};
use rand_chacha::ChaCha8Rng;

use super::norm::BatchNorm2d;
use super::pool::Relu4;
use super::{init_weight, join, Mode, Module, Param, Scalar};

/// 3x3 convolution, stride 1, padding 1 (spatial size preserved).
pub struct Conv2d<F: Scalar> {
    pub weight: Param<F>, // (out, in, 3, 3)
    pub bias: Param<F>,   // (out,)
    cache: Option<Cache<F>>,
}

struct Cache<F> {
    cols: Array2<F>, // (in*9, n*h*w)
    n: usize,
    h: usize,
    w: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * 9;
        let weight = init_weight::<F, _>(rng, Ix4(out_ch, in_ch, 3, 3), fan_in);
        let bias = init_weight::<F, _>(rng, Ix1(out_ch), fan_in);
        Self {
            weight: Param::new(weight.into_dyn()),
            bias: Param::new(bias.into_dyn()),
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let out_ch = self.out_channels();
        let cols = im2col3(x);
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((out_ch, c * 9))
            .unwrap()
            .to_owned();
        let mut y2 = w2.dot(&cols); // (out, n*h*w)
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, b) in y2.outer_iter_mut().zip(bias.iter()) {
            row.mapv_inplace(|v| v + *b);
        }
        let y = y2
            .into_shape_with_order((out_ch, n, h, w))
            .unwrap()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        if mode == Mode::Train {
            self.cache = Some(Cache { cols, n, h, w });
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("conv backward without forward");
        let (n, h, w) = (cache.n, cache.h, cache.w);
        let out_ch = self.out_channels();
        let in_ch = self.in_channels();
        let gy2 = gy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_shape_with_order((out_ch, n * h * w))
            .unwrap()
            .to_owned();
        let dw = gy2.dot(&cache.cols.t()); // (out, in*9)
        self.weight
            .grad
            .view_mut()
            .into_shape_with_order((out_ch, in_ch * 9))
            .unwrap()
            .scaled_add(F::one(), &dw);
        let db = gy2.sum_axis(ndarray::Axis(1));
        self.bias
            .grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .scaled_add(F::one(), &db);
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((out_ch, in_ch * 9))
            .unwrap()
            .to_owned();
        let dcols = w2.t().dot(&gy2); // (in*9, n*h*w)
        col2im3(&dcols, n, in_ch, h, w)
    }
}

impl<F: Scalar> Module<F> for Conv2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Lower a padded 3x3 neighborhood into columns: (c*9, n*h*w).
fn im2col3<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * 9, n * h * w));
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let y0 = (-dy).max(0) as usize;
                let y1 = h - dy.max(0) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = w - dx.max(0) as usize;
                let row = ci * 9 + ky * 3 + kx;
                let mut dst = cols
                    .row_mut(row)
                    .into_shape_with_order((n, h, w))
                    .unwrap();
                let src = x.slice(s![
                    ..,
                    ci,
                    (y0 as isize + dy) as usize..(y1 as isize + dy) as usize,
                    (x0 as isize + dx) as usize..(x1 as isize + dx) as usize
                ]);
                dst.slice_mut(s![.., y0..y1, x0..x1]).assign(&src);
            }
        }
    }
    cols
}

/// Adjoint of `im2col3`: scatter-add columns back to image layout.
fn col2im3<F: Scalar>(cols: &Array2<F>, n: usize, c: usize, h: usize, w: usize) -> Array4<F> {
    let mut x = Array4::zeros((n, c, h, w));
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let y0 = (-dy).max(0) as usize;
                let y1 = h - dy.max(0) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = w - dx.max(0) as usize;
                let row = ci * 9 + ky * 3 + kx;
                let src = cols.row(row).into_shape_with_order((n, h, w)).unwrap();
                let mut dst = x.slice_mut(s![
                    ..,
                    ci,
                    (y0 as isize + dy) as usize..(y1 as isize + dy) as usize,
                    (x0 as isize + dx) as usize..(x1 as isize + dx) as usize
                ]);
                dst.scaled_add(F::one(), &src.slice(s![.., y0..y1, x0..x1]));
            }
        }
    }
    x
}

/// Two units of (3x3 conv, batch norm, ReLU); spatial size preserved.
pub struct ConvBlock<F: Scalar> {
    pub conv1: Conv2d<F>,
    pub bn1: BatchNorm2d<F>,
    relu1: Relu4<F>,
    pub conv2: Conv2d<F>,
    pub bn2: BatchNorm2d<F>,
    relu2: Relu4<F>,
}

impl<F: Scalar> ConvBlock<F> {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(in_ch, out_ch, rng),
            bn1: BatchNorm2d::new(out_ch),
            relu1: Relu4::new(),
            conv2: Conv2d::new(out_ch, out_ch, rng),
            bn2: BatchNorm2d::new(out_ch),
            relu2: Relu4::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let y = self.conv1.forward(x, mode);
        let y = self.bn1.forward(&y, mode);
        let y = self.relu1.forward(&y, mode);
        let y = self.conv2.forward(&y, mode);
        let y = self.bn2.forward(&y, mode);
        self.relu2.forward(&y, mode)
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let g = self.relu2.backward(gy);
        let g = self.bn2.backward(&g);
        let g = self.conv2.backward(&g);
        let g = self.relu1.backward(&g);
        let g = self.bn1.backward(&g);
        self.conv1.backward(&g)
    }
}

impl<F: Scalar> Module<F> for ConvBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;

    #[test]
    fn conv_preserves_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::<f64>::new(2, 5, &mut rng);
        let x = Array4::from_shape_fn((3, 2, 7, 9), |(a, b, c, d)| {
            (a + 2 * b + 3 * c + 5 * d) as f64 * 0.01
        });
        let y = conv.forward(&x, Mode::Eval);
        assert_eq!(y.dim(), (3, 5, 7, 9));
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(2, 3, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, b, c, d)| {
            ((b * 16 + c * 4 + d) as f64).sin()
        });
        let y = conv.forward(&x, Mode::Eval);
        let w = conv
            .weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let bias = conv.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        for o in 0..3 {
            for yy in 0..4usize {
                for xx in 0..4usize {
                    let mut acc = bias[o];
                    for ci in 0..2 {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = yy as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy >= 0 && iy < 4 && ix >= 0 && ix < 4 {
                                    acc += w[[o, ci, ky, kx]]
                                        * x[[0, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((y[[0, o, yy, xx]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn block_preserves_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = ConvBlock::<f32>::new(3, 8, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 6, 6), |(a, b, c, d)| {
            (a + b + c + d) as f32 * 0.1
        });
        let y = block.forward(&x, Mode::Train);
        assert_eq!(y.dim(), (2, 8, 6, 6));
    }
}
