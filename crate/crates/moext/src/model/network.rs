use std::collections::{BTreeMap, HashSet};

use ndarray::{concatenate, s, Array1, Array2, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Mode, Module, Param, Scalar};

use super::{
    Classifier, ModelConfig, MotionExtractor, Projector, Reconstructor, Separator,
};

/// Everything produced by one pre-training forward pass.
pub struct PretrainOutput<F: Scalar> {
    pub x_rec: Array4<F>,
    pub s_o: Array2<F>,
    pub s_a: Array2<F>,
    pub t_o: Array2<F>,
    pub t_a: Array2<F>,
    pub motion: Array2<F>,
    pub trace: Vec<(usize, usize, usize)>,
}

/// Pre-training network: separator with both branches, motion extractor,
/// reconstructor, and the shared projection head for the contrastive losses.
pub struct PretrainModel<F: Scalar> {
    pub cfg: ModelConfig,
    pub separator: Separator<F>,
    pub motion: MotionExtractor<F>,
    pub reconstructor: Reconstructor<F>,
    pub projector: Projector<F>,
}

impl<F: Scalar> PretrainModel<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            cfg: cfg.clone(),
            separator: Separator::new(cfg, true, &mut rng),
            motion: MotionExtractor::new(cfg.feature_dim, &mut rng),
            reconstructor: Reconstructor::new(cfg, &mut rng),
            projector: Projector::new(cfg.feature_dim, &mut rng),
        })
    }

    /// X~_a = R(E(F(X_o), F(X_a)), F(X_o)).
    ///
    /// Onset and apex batches pass through the separator as one concatenated
    /// batch, so the module caches exactly one forward for backward.
    pub fn forward_pretrain(
        &mut self,
        x_o: &Array4<F>,
        x_a: &Array4<F>,
        mode: Mode,
    ) -> Result<PretrainOutput<F>> {
        let n = x_o.dim().0;
        assert_eq!(x_o.dim(), x_a.dim(), "onset/apex batch shape mismatch");
        let both = concatenate(Axis(0), &[x_o.view(), x_a.view()]).unwrap();
        let (shape, texture) = self.separator.forward(&both, mode)?;
        let texture = texture.expect("pretrain separator has a texture branch");
        let s_o = shape.slice(s![..n, ..]).to_owned();
        let s_a = shape.slice(s![n.., ..]).to_owned();
        let t_o = texture.slice(s![..n, ..]).to_owned();
        let t_a = texture.slice(s![n.., ..]).to_owned();
        let motion = self.motion.forward(&s_o, &s_a, mode);
        let (x_rec, trace) = self.reconstructor.forward(&motion, &t_o, mode)?;
        Ok(PretrainOutput {
            x_rec,
            s_o,
            s_a,
            t_o,
            t_a,
            motion,
            trace,
        })
    }

    /// Backward pass of the whole pre-training loss. `g_rec` is the gradient
    /// of the loss with respect to the reconstruction; the feature gradients
    /// come from the contrastive losses and may be zero when ablated.
    pub fn backward_pretrain(
        &mut self,
        g_rec: &Array4<F>,
        g_s_o: &Array2<F>,
        g_s_a: &Array2<F>,
        g_t_o: &Array2<F>,
        g_t_a: &Array2<F>,
    ) {
        let (n, d) = g_s_o.dim();
        let (g_motion, g_t_rec) = self.reconstructor.backward(g_rec);
        let (g_so_m, g_sa_m) = self.motion.backward(&g_motion);
        let mut g_shape = Array2::zeros((2 * n, d));
        g_shape.slice_mut(s![..n, ..]).assign(&(&g_so_m + g_s_o));
        g_shape.slice_mut(s![n.., ..]).assign(&(&g_sa_m + g_s_a));
        let mut g_texture = Array2::zeros((2 * n, d));
        g_texture.slice_mut(s![..n, ..]).assign(&(&g_t_rec + g_t_o));
        g_texture.slice_mut(s![n.., ..]).assign(g_t_a);
        self.separator.backward(&g_shape, Some(&g_texture));
    }
}

impl<F: Scalar> Module<F> for PretrainModel<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.separator.visit_params(&join(prefix, "separator"), f);
        self.motion.visit_params(&join(prefix, "motion"), f);
        self.reconstructor
            .visit_params(&join(prefix, "reconstructor"), f);
        self.projector.visit_params(&join(prefix, "projector"), f);
    }
}

/// Classification network: shape-only separator, motion extractor (or the
/// raw |S_a - S_o| ablation), linear classifier with softmax.
pub struct FinetuneModel<F: Scalar> {
    pub cfg: ModelConfig,
    pub separator: Separator<F>,
    pub motion: Option<MotionExtractor<F>>,
    pub classifier: Classifier<F>,
    batch_n: Option<usize>,
    delta_sign: Option<Array2<F>>,
}

impl<F: Scalar> FinetuneModel<F> {
    pub fn new(cfg: &ModelConfig, use_motion_extractor: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let separator = Separator::new(cfg, false, &mut rng);
        let motion = use_motion_extractor.then(|| MotionExtractor::new(cfg.feature_dim, &mut rng));
        let classifier = Classifier::new(cfg.feature_dim, cfg.num_classes, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            separator,
            motion,
            classifier,
            batch_n: None,
            delta_sign: None,
        })
    }

    pub fn forward_classify(
        &mut self,
        x_o: &Array4<F>,
        x_a: &Array4<F>,
        mode: Mode,
    ) -> Result<Array2<F>> {
        let n = x_o.dim().0;
        assert_eq!(x_o.dim(), x_a.dim(), "onset/apex batch shape mismatch");
        let both = concatenate(Axis(0), &[x_o.view(), x_a.view()]).unwrap();
        let (shape, _) = self.separator.forward(&both, mode)?;
        let s_o = shape.slice(s![..n, ..]).to_owned();
        let s_a = shape.slice(s![n.., ..]).to_owned();
        let m = match &mut self.motion {
            Some(ext) => ext.forward(&s_o, &s_a, mode),
            None => {
                if mode == Mode::Train {
                    self.delta_sign = Some((&s_a - &s_o).mapv(|v| {
                        if v > F::zero() {
                            F::one()
                        } else if v < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        }
                    }));
                }
                MotionExtractor::shape_delta(&s_o, &s_a)
            }
        };
        if mode == Mode::Train {
            self.batch_n = Some(n);
        }
        Ok(self.classifier.forward(&m, mode))
    }

    /// Backward of mean cross-entropy through the whole network.
    pub fn backward_cross_entropy(&mut self, labels: &Array1<usize>) {
        let n = self.batch_n.take().expect("backward without forward");
        let g_m = self.classifier.backward_cross_entropy(labels);
        let (g_so, g_sa) = match &mut self.motion {
            Some(ext) => ext.backward(&g_m),
            None => {
                let sign = self.delta_sign.take().expect("missing delta sign cache");
                let g = &g_m * &sign;
                (-g.clone(), g)
            }
        };
        let mut g_shape = Array2::zeros((2 * n, g_so.dim().1));
        g_shape.slice_mut(s![..n, ..]).assign(&g_so);
        g_shape.slice_mut(s![n.., ..]).assign(&g_sa);
        self.separator.backward(&g_shape, None);
    }
}

impl<F: Scalar> Module<F> for FinetuneModel<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.separator.visit_params(&join(prefix, "separator"), f);
        if let Some(ext) = &mut self.motion {
            ext.visit_params(&join(prefix, "motion"), f);
        }
        self.classifier.visit_params(&join(prefix, "classifier"), f);
    }
}

/// Snapshot all parameters as (path, values) in visiting order.
pub fn export_params<F: Scalar, M: Module<F>>(model: &mut M) -> Vec<(String, ArrayD<F>)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |name, p| {
        out.push((name.to_string(), p.value.clone()));
    });
    out
}

/// Report of an `import_params` call.
#[derive(Debug, Default)]
pub struct ImportReport {
    pub loaded: usize,
    /// Archive entries with no matching parameter in the model (e.g. the
    /// texture branch when loading a pre-train checkpoint into the
    /// classification network).
    pub ignored: Vec<String>,
    /// Model parameters the archive did not provide.
    pub missing: Vec<String>,
}

/// Load parameters by path. Shape mismatches are errors; names missing on
/// either side are reported so callers can decide whether that is fatal.
pub fn import_params<F: Scalar, M: Module<F>>(
    model: &mut M,
    params: &BTreeMap<String, ArrayD<F>>,
) -> Result<ImportReport> {
    let mut report = ImportReport::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut err: Option<Error> = None;
    model.visit_params("", &mut |name, p| {
        seen.insert(name.to_string());
        match params.get(name) {
            Some(v) => {
                if v.shape() != p.value.shape() {
                    if err.is_none() {
                        err = Some(Error::Checkpoint(format!(
                            "shape mismatch for {name}: archive {:?} vs model {:?}",
                            v.shape(),
                            p.value.shape()
                        )));
                    }
                } else {
                    p.value.assign(v);
                    report.loaded += 1;
                }
            }
            None => report.missing.push(name.to_string()),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    for key in params.keys() {
        if !seen.contains(key) {
            report.ignored.push(key.clone());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, size: usize, salt: f64) -> Array4<f64> {
        Array4::from_shape_fn((n, 3, size, size), |(a, b, c, d)| {
            (((a * 31 + b * 17 + c * 7 + d) as f64 + salt) * 0.37).sin() * 0.5 + 0.5
        })
    }

    #[test]
    fn pretrain_output_shapes() {
        let cfg = ModelConfig::tiny(2);
        let mut model = PretrainModel::<f64>::new(&cfg, 42).unwrap();
        let x_o = batch(2, cfg.input_size, 0.0);
        let x_a = batch(2, cfg.input_size, 1.0);
        let out = model.forward_pretrain(&x_o, &x_a, Mode::Eval).unwrap();
        assert_eq!(out.x_rec.dim(), x_a.dim());
        assert_eq!(out.s_o.dim(), (2, cfg.feature_dim));
        assert_eq!(out.t_a.dim(), (2, cfg.feature_dim));
        assert_eq!(out.motion.dim(), (2, cfg.feature_dim));
    }

    #[test]
    fn pretrain_matches_manual_composition_in_eval() {
        let cfg = ModelConfig::tiny(2);
        let mut model = PretrainModel::<f64>::new(&cfg, 43).unwrap();
        let x_o = batch(2, cfg.input_size, 0.0);
        let x_a = batch(2, cfg.input_size, 2.0);
        let out = model.forward_pretrain(&x_o, &x_a, Mode::Eval).unwrap();
        // Compose the same components by hand.
        let (s_o, t_o) = model.separator.forward(&x_o, Mode::Eval).unwrap();
        let (s_a, _) = model.separator.forward(&x_a, Mode::Eval).unwrap();
        let m = model.motion.forward(&s_o, &s_a, Mode::Eval);
        let (x_rec, _) = model
            .reconstructor
            .forward(&m, &t_o.unwrap(), Mode::Eval)
            .unwrap();
        let diff = (&out.x_rec - &x_rec).mapv(f64::abs).sum();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let cfg = ModelConfig::tiny(2);
        let mut model = PretrainModel::<f64>::new(&cfg, 44).unwrap();
        let x_o = batch(4, cfg.input_size, 0.0);
        let x_a = batch(4, cfg.input_size, 3.0);
        let full = model.forward_pretrain(&x_o, &x_a, Mode::Eval).unwrap();
        let single = model
            .forward_pretrain(
                &x_o.slice(s![..1, .., .., ..]).to_owned(),
                &x_a.slice(s![..1, .., .., ..]).to_owned(),
                Mode::Eval,
            )
            .unwrap();
        let diff = (&full.x_rec.slice(s![..1, .., .., ..]) - &single.x_rec)
            .mapv(f64::abs)
            .fold(0.0, |a, &b| f64::max(a, b));
        assert!(diff < 1e-12, "batch dependence in eval mode: {diff}");
    }

    #[test]
    fn classify_output_shape_and_rows_sum() {
        let cfg = ModelConfig::tiny(3);
        let mut model = FinetuneModel::<f64>::new(&cfg, true, 45).unwrap();
        let x_o = batch(3, cfg.input_size, 0.0);
        let x_a = batch(3, cfg.input_size, 4.0);
        let p = model.forward_classify(&x_o, &x_a, Mode::Eval).unwrap();
        assert_eq!(p.dim(), (3, 3));
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn classify_matches_manual_composition() {
        let cfg = ModelConfig::tiny(3);
        let mut model = FinetuneModel::<f64>::new(&cfg, true, 46).unwrap();
        let x_o = batch(2, cfg.input_size, 0.0);
        let x_a = batch(2, cfg.input_size, 5.0);
        let p = model.forward_classify(&x_o, &x_a, Mode::Eval).unwrap();
        let (s_o, _) = model.separator.forward(&x_o, Mode::Eval).unwrap();
        let (s_a, _) = model.separator.forward(&x_a, Mode::Eval).unwrap();
        let m = model.motion.as_mut().unwrap().forward(&s_o, &s_a, Mode::Eval);
        let p2 = model.classifier.forward(&m, Mode::Eval);
        let diff = (&p - &p2).mapv(f64::abs).sum();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn finetune_has_fewer_params_than_pretrain() {
        let cfg = ModelConfig::tiny(3);
        let mut pre = PretrainModel::<f64>::new(&cfg, 1).unwrap();
        let mut fine = FinetuneModel::<f64>::new(&cfg, true, 1).unwrap();
        assert!(fine.param_count() < pre.param_count());
    }

    #[test]
    fn param_roundtrip_by_name() {
        let cfg = ModelConfig::tiny(2);
        let mut a = PretrainModel::<f64>::new(&cfg, 7).unwrap();
        let mut b = PretrainModel::<f64>::new(&cfg, 8).unwrap();
        let snap: BTreeMap<_, _> = export_params(&mut a).into_iter().collect();
        let report = import_params(&mut b, &snap).unwrap();
        assert!(report.ignored.is_empty());
        assert!(report.missing.is_empty());
        let x_o = batch(1, cfg.input_size, 0.0);
        let x_a = batch(1, cfg.input_size, 6.0);
        let ya = a.forward_pretrain(&x_o, &x_a, Mode::Eval).unwrap();
        let yb = b.forward_pretrain(&x_o, &x_a, Mode::Eval).unwrap();
        assert_eq!(ya.x_rec, yb.x_rec);
    }
}
