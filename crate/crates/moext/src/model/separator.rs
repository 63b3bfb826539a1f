use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    join, ConvBlock, GlobalAvgPool, Linear, MaxPool2, Mode, Module, Param, Scalar,
};

use super::ModelConfig;

/// Backbone: repeated (Conv block, 2x max pool) stages producing generic
/// feature maps shared by the shape and texture branches.
pub struct Backbone<F: Scalar> {
    stages: Vec<(ConvBlock<F>, MaxPool2<F>)>,
}

impl<F: Scalar> Backbone<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for &out_ch in &cfg.backbone_channels {
            stages.push((ConvBlock::new(in_ch, out_ch, rng), MaxPool2::new()));
            in_ch = out_ch;
        }
        Self { stages }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let mut y = x.clone();
        for (block, pool) in &mut self.stages {
            y = block.forward(&y, mode);
            y = pool.forward(&y, mode);
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let mut g = gy.clone();
        for (block, pool) in self.stages.iter_mut().rev() {
            g = pool.backward(&g);
            g = block.backward(&g);
        }
        g
    }
}

impl<F: Scalar> Module<F> for Backbone<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, (block, _)) in self.stages.iter_mut().enumerate() {
            block.visit_params(&join(prefix, &format!("stage{i}")), f);
        }
    }
}

/// One branch of the separator: Conv block, global average pool, fully
/// connected projection to the feature dimension.
pub struct Branch<F: Scalar> {
    block: ConvBlock<F>,
    gap: GlobalAvgPool<F>,
    fc: Linear<F>,
}

impl<F: Scalar> Branch<F> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let in_ch = *cfg.backbone_channels.last().unwrap();
        Self {
            block: ConvBlock::new(in_ch, cfg.branch_channels, rng),
            gap: GlobalAvgPool::new(),
            fc: Linear::new(cfg.branch_channels, cfg.feature_dim, rng),
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array2<F> {
        let y = self.block.forward(x, mode);
        let y = self.gap.forward(&y, mode);
        self.fc.forward(&y, mode)
    }

    pub fn backward(&mut self, gy: &Array2<F>) -> Array4<F> {
        let g = self.fc.backward(gy);
        let g = self.gap.backward(&g);
        self.block.backward(&g)
    }
}

impl<F: Scalar> Module<F> for Branch<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.block.visit_params(&join(prefix, "block"), f);
        self.fc.visit_params(&join(prefix, "fc"), f);
    }
}

/// Feature separator: backbone plus shape branch, with an optional texture
/// branch (present in pre-training, absent in the classification network).
pub struct Separator<F: Scalar> {
    pub backbone: Backbone<F>,
    pub shape_branch: Branch<F>,
    pub texture_branch: Option<Branch<F>>,
}

impl<F: Scalar> Separator<F> {
    pub fn new(cfg: &ModelConfig, with_texture: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            backbone: Backbone::new(cfg, rng),
            shape_branch: Branch::new(cfg, rng),
            texture_branch: with_texture.then(|| Branch::new(cfg, rng)),
        }
    }

    /// Separate a batch into shape features and (if present) texture features.
    pub fn forward(
        &mut self,
        x: &Array4<F>,
        mode: Mode,
    ) -> Result<(Array2<F>, Option<Array2<F>>)> {
        let features = self.backbone.forward(x, mode);
        check_finite(&features, "backbone")?;
        let shape = self.shape_branch.forward(&features, mode);
        check_finite2(&shape, "shape_branch")?;
        let texture = match &mut self.texture_branch {
            Some(branch) => {
                let t = branch.forward(&features, mode);
                check_finite2(&t, "texture_branch")?;
                Some(t)
            }
            None => None,
        };
        Ok((shape, texture))
    }

    pub fn backward(&mut self, g_shape: &Array2<F>, g_texture: Option<&Array2<F>>) -> Array4<F> {
        let mut g_features = self.shape_branch.backward(g_shape);
        if let (Some(branch), Some(gt)) = (&mut self.texture_branch, g_texture) {
            g_features = g_features + branch.backward(gt);
        }
        self.backbone.backward(&g_features)
    }
}

impl<F: Scalar> Module<F> for Separator<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.backbone.visit_params(&join(prefix, "backbone"), f);
        self.shape_branch
            .visit_params(&join(prefix, "shape_branch"), f);
        if let Some(branch) = &mut self.texture_branch {
            branch.visit_params(&join(prefix, "texture_branch"), f);
        }
    }
}

fn check_finite<F: Scalar>(x: &Array4<F>, layer: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            context: layer.to_string(),
            msg: "non-finite activation".to_string(),
        })
    }
}

fn check_finite2<F: Scalar>(x: &Array2<F>, layer: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            context: layer.to_string(),
            msg: "non-finite activation".to_string(),
        })
    }
}
