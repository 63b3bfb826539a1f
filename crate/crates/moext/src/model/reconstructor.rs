use ndarray::{s, Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    join, AvgPool2x2Stride1, BatchNorm2d, Conv2d, ConvBlock, Mode, Module, Param, Relu4, Scalar,
    UpsampleNearest2,
};

use super::ModelConfig;

struct UpConv<F: Scalar> {
    up: UpsampleNearest2<F>,
    conv: Conv2d<F>,
    bn: BatchNorm2d<F>,
    relu: Relu4<F>,
}

impl<F: Scalar> UpConv<F> {
    fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: UpsampleNearest2::new(),
            conv: Conv2d::new(in_ch, out_ch, rng),
            bn: BatchNorm2d::new(out_ch),
            relu: Relu4::new(),
        }
    }

    fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let y = self.up.forward(x, mode);
        let y = self.conv.forward(&y, mode);
        let y = self.bn.forward(&y, mode);
        self.relu.forward(&y, mode)
    }

    fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let g = self.relu.backward(gy);
        let g = self.bn.backward(&g);
        let g = self.conv.backward(&g);
        self.up.backward(&g)
    }
}

impl<F: Scalar> Module<F> for UpConv<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }
}

/// Apex reconstruction module: Concat(M, T_o) -> image.
///
/// Every forward pass asserts the intermediate shape trace against the
/// configured architecture; any deviation is an error, not a warning.
pub struct Reconstructor<F: Scalar> {
    head: Vec<UpConv<F>>, // 1x1 -> 8x8 at feature_dim channels
    avgpool: AvgPool2x2Stride1<F>,
    stages: Vec<UpConv<F>>,
    blocks: Vec<ConvBlock<F>>,
    up_final: UpsampleNearest2<F>,
    conv_final: Conv2d<F>,
    relu_final: Relu4<F>,
    expected_trace: Vec<(usize, usize, usize)>,
    feature_dim: usize,
}

impl<F: Scalar> Reconstructor<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let f = cfg.feature_dim;
        let mut head = Vec::new();
        let mut in_ch = 2 * f;
        for _ in 0..3 {
            head.push(UpConv::new(in_ch, f, rng));
            in_ch = f;
        }
        let mut stages = Vec::new();
        for &ch in &cfg.recon_stage_channels {
            stages.push(UpConv::new(in_ch, ch, rng));
            in_ch = ch;
        }
        let mut blocks = Vec::new();
        for _ in 0..cfg.recon_num_blocks {
            blocks.push(ConvBlock::new(in_ch, cfg.recon_block_channels, rng));
            in_ch = cfg.recon_block_channels;
        }
        Self {
            head,
            avgpool: AvgPool2x2Stride1::new(),
            stages,
            blocks,
            up_final: UpsampleNearest2::new(),
            conv_final: Conv2d::new(in_ch, 3, rng),
            relu_final: Relu4::new(),
            expected_trace: cfg.recon_trace(),
            feature_dim: f,
        }
    }

    /// Concatenate motion and texture features and reconstruct the apex
    /// frame. Returns the image and the observed shape trace.
    pub fn forward(
        &mut self,
        motion: &Array2<F>,
        texture: &Array2<F>,
        mode: Mode,
    ) -> Result<(Array4<F>, Vec<(usize, usize, usize)>)> {
        let (n, d) = motion.dim();
        assert_eq!(d, self.feature_dim, "motion feature dim");
        assert_eq!(texture.dim(), (n, d), "texture feature dim");
        let mut x = Array4::zeros((n, 2 * d, 1, 1));
        x.slice_mut(s![.., ..d, .., ..])
            .assign(&motion.view().into_shape_with_order((n, d, 1, 1)).unwrap());
        x.slice_mut(s![.., d.., .., ..])
            .assign(&texture.view().into_shape_with_order((n, d, 1, 1)).unwrap());

        let mut trace = vec![chw(&x)];
        for step in &mut self.head {
            x = step.forward(&x, mode);
        }
        trace.push(chw(&x));
        x = self.avgpool.forward(&x, mode);
        trace.push(chw(&x));
        for stage in &mut self.stages {
            x = stage.forward(&x, mode);
            trace.push(chw(&x));
        }
        for block in &mut self.blocks {
            x = block.forward(&x, mode);
        }
        trace.push(chw(&x));
        x = self.up_final.forward(&x, mode);
        trace.push(chw(&x));
        x = self.conv_final.forward(&x, mode);
        x = self.relu_final.forward(&x, mode);
        trace.push(chw(&x));

        if trace != self.expected_trace {
            return Err(Error::Shape(format!(
                "reconstructor trace {:?} deviates from architecture {:?}",
                trace, self.expected_trace
            )));
        }
        Ok((x, trace))
    }

    /// Returns (dL/dM, dL/dT_o).
    pub fn backward(&mut self, gy: &Array4<F>) -> (Array2<F>, Array2<F>) {
        let g = self.relu_final.backward(gy);
        let g = self.conv_final.backward(&g);
        let mut g = self.up_final.backward(&g);
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g);
        }
        for stage in self.stages.iter_mut().rev() {
            g = stage.backward(&g);
        }
        g = self.avgpool.backward(&g);
        for step in self.head.iter_mut().rev() {
            g = step.backward(&g);
        }
        let (n, c2, _, _) = g.dim();
        let d = c2 / 2;
        let g2 = g.into_shape_with_order((n, c2)).unwrap();
        let g_m = g2.slice(s![.., ..d]).to_owned();
        let g_t = g2.slice(s![.., d..]).to_owned();
        (g_m, g_t)
    }
}

fn chw<F: Scalar>(x: &Array4<F>) -> (usize, usize, usize) {
    let (_, c, h, w) = x.dim();
    (c, h, w)
}

impl<F: Scalar> Module<F> for Reconstructor<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, step) in self.head.iter_mut().enumerate() {
            step.visit_params(&join(prefix, &format!("head{i}")), f);
        }
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit_params(&join(prefix, &format!("stage{i}")), f);
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&join(prefix, &format!("block{i}")), f);
        }
        self.conv_final.visit_params(&join(prefix, "conv_final"), f);
    }
}
