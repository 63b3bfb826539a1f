use ndarray::{s, Array2, Array4};

use super::{Mode, Module, Param, Scalar};

/// 2x2 max pooling, stride 2. Input spatial dims must be even.
pub struct MaxPool2<F: Scalar> {
    argmax: Option<Array4<u8>>, // window-local index 0..=3
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> MaxPool2<F> {
    pub fn new() -> Self {
        Self {
            argmax: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::zeros((n, c, oh, ow));
        let mut arg = Array4::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = x[[ni, ci, 2 * oy, 2 * ox]];
                        let mut bi = 0u8;
                        for k in 1..4u8 {
                            let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                            let v = x[[ni, ci, 2 * oy + dy, 2 * ox + dx]];
                            if v > best {
                                best = v;
                                bi = k;
                            }
                        }
                        y[[ni, ci, oy, ox]] = best;
                        arg[[ni, ci, oy, ox]] = bi;
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.argmax = Some(arg);
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let arg = self.argmax.take().expect("maxpool backward without forward");
        let (n, c, oh, ow) = gy.dim();
        let mut dx = Array4::zeros((n, c, oh * 2, ow * 2));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let k = arg[[ni, ci, oy, ox]];
                        let (dy, dxo) = ((k / 2) as usize, (k % 2) as usize);
                        dx[[ni, ci, 2 * oy + dy, 2 * ox + dxo]] += gy[[ni, ci, oy, ox]];
                    }
                }
            }
        }
        dx
    }
}

/// 2x2 average pooling with stride 1 (h,w -> h-1,w-1).
pub struct AvgPool2x2Stride1<F: Scalar> {
    in_dim: Option<(usize, usize, usize, usize)>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> AvgPool2x2Stride1<F> {
    pub fn new() -> Self {
        Self {
            in_dim: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let q = F::of_f64(0.25);
        let mut y = Array4::zeros((n, c, h - 1, w - 1));
        {
            let a = x.slice(s![.., .., ..h - 1, ..w - 1]);
            let b = x.slice(s![.., .., ..h - 1, 1..]);
            let cc = x.slice(s![.., .., 1.., ..w - 1]);
            let d = x.slice(s![.., .., 1.., 1..]);
            ndarray::Zip::from(&mut y)
                .and(&a)
                .and(&b)
                .and(&cc)
                .and(&d)
                .for_each(|o, &p, &q2, &r, &t| *o = (p + q2 + r + t) * q);
        }
        if mode == Mode::Train {
            self.in_dim = Some((n, c, h, w));
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = self.in_dim.take().expect("avgpool backward without forward");
        let q = F::of_f64(0.25);
        let g = gy.mapv(|v| v * q);
        let mut dx = Array4::zeros((n, c, h, w));
        dx.slice_mut(s![.., .., ..h - 1, ..w - 1]).scaled_add(F::one(), &g);
        dx.slice_mut(s![.., .., ..h - 1, 1..]).scaled_add(F::one(), &g);
        dx.slice_mut(s![.., .., 1.., ..w - 1]).scaled_add(F::one(), &g);
        dx.slice_mut(s![.., .., 1.., 1..]).scaled_add(F::one(), &g);
        dx
    }
}

/// Nearest-neighbor 2x upsampling.
pub struct UpsampleNearest2<F: Scalar> {
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> UpsampleNearest2<F> {
    pub fn new() -> Self {
        Self {
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, _mode: Mode) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
        for dy in 0..2 {
            for dx in 0..2 {
                y.slice_mut(s![.., .., dy..;2, dx..;2]).assign(x);
            }
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let (n, c, h2, w2) = gy.dim();
        let mut dx = Array4::zeros((n, c, h2 / 2, w2 / 2));
        for dy in 0..2 {
            for dx2 in 0..2 {
                dx.scaled_add(F::one(), &gy.slice(s![.., .., dy..;2, dx2..;2]));
            }
        }
        dx
    }
}

/// Global average pooling (n,c,h,w) -> (n,c).
pub struct GlobalAvgPool<F: Scalar> {
    in_dim: Option<(usize, usize, usize, usize)>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> GlobalAvgPool<F> {
    pub fn new() -> Self {
        Self {
            in_dim: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array2<F> {
        let (n, c, h, w) = x.dim();
        let count = F::from_usize(h * w).unwrap();
        let mut y = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                y[[ni, ci]] = x.slice(s![ni, ci, .., ..]).sum() / count;
            }
        }
        if mode == Mode::Train {
            self.in_dim = Some((n, c, h, w));
        }
        y
    }

    pub fn backward(&mut self, gy: &Array2<F>) -> Array4<F> {
        let (n, c, h, w) = self.in_dim.take().expect("gap backward without forward");
        let count = F::from_usize(h * w).unwrap();
        let mut dx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                dx.slice_mut(s![ni, ci, .., ..]).fill(gy[[ni, ci]] / count);
            }
        }
        dx
    }
}

/// ReLU on 4-D activations.
pub struct Relu4<F: Scalar> {
    mask: Option<Array4<F>>,
}

impl<F: Scalar> Relu4<F> {
    pub fn new() -> Self {
        Self { mask: None }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let y = x.mapv(|v| if v > F::zero() { v } else { F::zero() });
        if mode == Mode::Train {
            self.mask = Some(x.mapv(|v| if v > F::zero() { F::one() } else { F::zero() }));
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let mask = self.mask.take().expect("relu backward without forward");
        gy * &mask
    }
}

/// ReLU on 2-D activations.
pub struct Relu2<F: Scalar> {
    mask: Option<Array2<F>>,
}

impl<F: Scalar> Relu2<F> {
    pub fn new() -> Self {
        Self { mask: None }
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: Mode) -> Array2<F> {
        let y = x.mapv(|v| if v > F::zero() { v } else { F::zero() });
        if mode == Mode::Train {
            self.mask = Some(x.mapv(|v| if v > F::zero() { F::one() } else { F::zero() }));
        }
        y
    }

    pub fn backward(&mut self, gy: &Array2<F>) -> Array2<F> {
        let mask = self.mask.take().expect("relu backward without forward");
        gy * &mask
    }
}

// Relu structs carry no parameters; blanket Module impls for symmetry.
impl<F: Scalar> Module<F> for Relu4<F> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param<F>)) {}
}

impl<F: Scalar> Module<F> for Relu2<F> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param<F>)) {}
}
