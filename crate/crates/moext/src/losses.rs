//! Training objectives: pixel reconstruction, shape/texture contrastive,
//! onset/apex shape contrastive, their weighted sum, and cross-entropy.
//!
//! Each contrastive loss has a forward-only entry point plus a combined
//! forward+gradient path used by the trainer. Gradients flow through the
//! shared projection head back to the raw features.

use ndarray::{Array1, Array2, Array3, Array4, Axis, s};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Projector;
use crate::nn::{Mode, Scalar};

/// Hyperparameters of the pre-training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Hinge margin, valid in [0.2, 0.5].
    pub epsilon: f64,
    /// Weight of the shape/texture contrastive loss.
    pub alpha1: f64,
    /// Weight of the onset/apex shape contrastive loss.
    pub alpha2: f64,
    /// Expansion set size.
    pub m: usize,
    /// Number of input sets per batch.
    pub n: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            alpha1: 0.5,
            alpha2: 1.0,
            m: 3,
            n: 20,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.2..=0.5).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon {} outside [0.2, 0.5]",
                self.epsilon
            )));
        }
        if self.m < 1 || self.n < 1 {
            return Err(Error::Config("m and n must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which expansion set an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Onset,
    Apex,
}

/// Set label of instance `j` within a 2m-instance input set: the first m
/// instances are the onset expansion set, the rest the apex expansion set.
pub fn origin_of(j: usize, m: usize) -> Origin {
    if j < m {
        Origin::Onset
    } else {
        Origin::Apex
    }
}

/// Per-instance features of a pre-training batch: (n, 2m, d) arrays of
/// shape and texture features, instance order as in `origin_of`.
#[derive(Debug, Clone)]
pub struct PretrainFeatures<F: Scalar> {
    pub shape: Array3<F>,
    pub texture: Array3<F>,
}

impl<F: Scalar> PretrainFeatures<F> {
    pub fn new(shape: Array3<F>, texture: Array3<F>) -> Result<Self> {
        if shape.dim() != texture.dim() {
            return Err(Error::Shape(format!(
                "shape {:?} vs texture {:?}",
                shape.dim(),
                texture.dim()
            )));
        }
        if shape.dim().1 % 2 != 0 {
            return Err(Error::Shape("instance count must be 2m".into()));
        }
        Ok(Self { shape, texture })
    }

    pub fn n(&self) -> usize {
        self.shape.dim().0
    }

    pub fn m(&self) -> usize {
        self.shape.dim().1 / 2
    }
}

/// Mean absolute per-pixel difference, averaged over the batch.
pub fn reconstruction_loss<F: Scalar>(x_a: &Array4<F>, x_rec: &Array4<F>) -> Result<F> {
    if x_a.dim() != x_rec.dim() {
        return Err(Error::Shape(format!(
            "reconstruction target {:?} vs output {:?}",
            x_a.dim(),
            x_rec.dim()
        )));
    }
    let count = F::from_usize(x_a.len()).unwrap();
    Ok((x_a - x_rec).mapv(|v| v.abs()).sum() / count)
}

/// Reconstruction loss plus its gradient with respect to the reconstruction.
pub fn reconstruction_loss_grad<F: Scalar>(
    x_a: &Array4<F>,
    x_rec: &Array4<F>,
) -> Result<(F, Array4<F>)> {
    let loss = reconstruction_loss(x_a, x_rec)?;
    let scale = F::one() / F::from_usize(x_a.len()).unwrap();
    let grad = ndarray::Zip::from(x_rec).and(x_a).map_collect(|&r, &a| {
        if r > a {
            scale
        } else if r < a {
            -scale
        } else {
            F::zero()
        }
    });
    Ok((loss, grad))
}

/// S-bar: element-wise mean of all shape features in the batch.
pub fn mean_shape_anchor<F: Scalar>(shape: &Array3<F>) -> Result<Array1<F>> {
    let (n, k, _) = shape.dim();
    if n == 0 || k == 0 {
        return Err(Error::Empty("mean_shape_anchor".into()));
    }
    let count = F::from_usize(n * k).unwrap();
    Ok(shape.sum_axis(Axis(0)).sum_axis(Axis(0)) / count)
}

fn euclid<F: Scalar>(a: &Array1<F>, b: &Array1<F>) -> F {
    (a - b).mapv(|v| v * v).sum().sqrt()
}

/// Shape/texture contrastive loss on already-projected embeddings.
fn st_from_projected<F: Scalar>(
    p_shape: &Array3<F>,
    p_texture: &Array3<F>,
    p_bar: &Array1<F>,
    eps: F,
) -> F {
    let (n, k, _) = p_shape.dim();
    let mut acc = F::zero();
    for i in 0..n {
        for j in 0..k {
            let ps = p_shape.slice(s![i, j, ..]).to_owned();
            let pt = p_texture.slice(s![i, j, ..]).to_owned();
            let term = euclid(p_bar, &ps) - euclid(&ps, &pt) + eps;
            if term > F::zero() {
                acc += term;
            }
        }
    }
    acc / F::from_usize(n * k).unwrap()
}

/// Onset/apex shape contrastive loss on already-projected embeddings; sums
/// run over all ordered pairs (j, k) including the diagonal.
fn ss_from_projected<F: Scalar>(p_shape: &Array3<F>, m: usize, eps: F) -> F {
    let (n, k2, _) = p_shape.dim();
    let mut acc = F::zero();
    for i in 0..n {
        for j in 0..k2 {
            let pj = p_shape.slice(s![i, j, ..]).to_owned();
            for k in 0..k2 {
                let pk = p_shape.slice(s![i, k, ..]).to_owned();
                let dist = euclid(&pj, &pk);
                if origin_of(j, m) == origin_of(k, m) {
                    acc += dist;
                } else if eps > dist {
                    acc += eps - dist;
                }
            }
        }
    }
    acc / F::from_usize(n * k2 * k2).unwrap()
}

fn project_all<F: Scalar>(
    feats: &PretrainFeatures<F>,
    projector: &mut Projector<F>,
    mode: Mode,
) -> (Array3<F>, Array3<F>, Array1<F>, Array1<F>) {
    let (n, k, d) = feats.shape.dim();
    let s_bar = mean_shape_anchor(&feats.shape).expect("non-empty batch");
    let rows = 2 * n * k + 1;
    let mut stacked = Array2::zeros((rows, d));
    stacked
        .slice_mut(s![..n * k, ..])
        .assign(&feats.shape.view().into_shape_with_order((n * k, d)).unwrap());
    stacked
        .slice_mut(s![n * k..2 * n * k, ..])
        .assign(&feats.texture.view().into_shape_with_order((n * k, d)).unwrap());
    stacked.slice_mut(s![rows - 1, ..]).assign(&s_bar);
    let projected = projector.forward(&stacked, mode);
    let p_shape = projected
        .slice(s![..n * k, ..])
        .to_owned()
        .into_shape_with_order((n, k, d))
        .unwrap();
    let p_texture = projected
        .slice(s![n * k..2 * n * k, ..])
        .to_owned()
        .into_shape_with_order((n, k, d))
        .unwrap();
    let p_bar = projected.slice(s![rows - 1, ..]).to_owned();
    (p_shape, p_texture, p_bar, s_bar)
}

/// L_st: hinge on (distance of shape to the batch anchor) minus (distance of
/// shape to its paired texture), margin epsilon.
pub fn st_loss<F: Scalar>(
    feats: &PretrainFeatures<F>,
    projector: &mut Projector<F>,
    cfg: &LossConfig,
) -> Result<F> {
    cfg.validate()?;
    let (p_shape, p_texture, p_bar, _) = project_all(feats, projector, Mode::Eval);
    Ok(st_from_projected(
        &p_shape,
        &p_texture,
        &p_bar,
        F::of_f64(cfg.epsilon),
    ))
}

/// L_ss: pull instances of the same expansion set together, push onset and
/// apex sets at least epsilon apart.
pub fn ss_loss<F: Scalar>(
    feats: &PretrainFeatures<F>,
    projector: &mut Projector<F>,
    cfg: &LossConfig,
) -> Result<F> {
    cfg.validate()?;
    let (p_shape, _, _, _) = project_all(feats, projector, Mode::Eval);
    Ok(ss_from_projected(&p_shape, feats.m(), F::of_f64(cfg.epsilon)))
}

/// L = L_re + alpha1 * L_st + alpha2 * L_ss.
pub fn total_pretrain_loss<F: Scalar>(l_re: F, l_st: F, l_ss: F, cfg: &LossConfig) -> Result<F> {
    for (name, v) in [("l_re", l_re), ("l_st", l_st), ("l_ss", l_ss)] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                context: "total_pretrain_loss".into(),
                msg: format!("{name} is not finite"),
            });
        }
    }
    Ok(l_re + F::of_f64(cfg.alpha1) * l_st + F::of_f64(cfg.alpha2) * l_ss)
}

/// Result of the combined contrastive forward/backward pass.
pub struct ContrastiveGrads<F: Scalar> {
    pub st: F,
    pub ss: F,
    /// d(alpha1 L_st + alpha2 L_ss) / d shape features, (n, 2m, d).
    pub d_shape: Array3<F>,
    /// Same for texture features.
    pub d_texture: Array3<F>,
}

/// Compute both contrastive losses and their gradients with respect to the
/// raw features, backpropagating once through the shared projector (whose
/// parameter grads are accumulated with the alpha weights applied).
pub fn contrastive_losses_grad<F: Scalar>(
    feats: &PretrainFeatures<F>,
    projector: &mut Projector<F>,
    cfg: &LossConfig,
) -> Result<ContrastiveGrads<F>> {
    cfg.validate()?;
    let (n, k, d) = feats.shape.dim();
    let m = feats.m();
    let eps = F::of_f64(cfg.epsilon);
    let a1 = F::of_f64(cfg.alpha1);
    let a2 = F::of_f64(cfg.alpha2);
    let (p_shape, p_texture, p_bar, _) = project_all(feats, projector, Mode::Train);

    let st = st_from_projected(&p_shape, &p_texture, &p_bar, eps);
    let ss = ss_from_projected(&p_shape, m, eps);

    // Gradients with respect to projected embeddings.
    let mut g_ps: Array3<F> = Array3::zeros((n, k, d));
    let mut g_pt: Array3<F> = Array3::zeros((n, k, d));
    let mut g_pbar: Array1<F> = Array1::zeros(d);

    let st_scale = a1 / F::from_usize(n * k).unwrap();
    for i in 0..n {
        for j in 0..k {
            let ps = p_shape.slice(s![i, j, ..]).to_owned();
            let pt = p_texture.slice(s![i, j, ..]).to_owned();
            let d1 = euclid(&p_bar, &ps);
            let d2 = euclid(&ps, &pt);
            if d1 - d2 + eps > F::zero() {
                if d1 > F::zero() {
                    let u1 = (&p_bar - &ps).mapv(|v| v / d1);
                    g_pbar.scaled_add(st_scale, &u1);
                    g_ps.slice_mut(s![i, j, ..]).scaled_add(-st_scale, &u1);
                }
                if d2 > F::zero() {
                    let u2 = (&ps - &pt).mapv(|v| v / d2);
                    g_ps.slice_mut(s![i, j, ..]).scaled_add(-st_scale, &u2);
                    g_pt.slice_mut(s![i, j, ..]).scaled_add(st_scale, &u2);
                }
            }
        }
    }

    let ss_scale = a2 / F::from_usize(n * k * k).unwrap();
    for i in 0..n {
        for j in 0..k {
            let pj = p_shape.slice(s![i, j, ..]).to_owned();
            for kk in 0..k {
                let pk = p_shape.slice(s![i, kk, ..]).to_owned();
                let dist = euclid(&pj, &pk);
                if dist == F::zero() {
                    continue;
                }
                let u = (&pj - &pk).mapv(|v| v / dist);
                if origin_of(j, m) == origin_of(kk, m) {
                    g_ps.slice_mut(s![i, j, ..]).scaled_add(ss_scale, &u);
                    g_ps.slice_mut(s![i, kk, ..]).scaled_add(-ss_scale, &u);
                } else if eps > dist {
                    g_ps.slice_mut(s![i, j, ..]).scaled_add(-ss_scale, &u);
                    g_ps.slice_mut(s![i, kk, ..]).scaled_add(ss_scale, &u);
                }
            }
        }
    }

    // One backward through the projector for the whole stacked batch.
    let rows = 2 * n * k + 1;
    let mut g_proj = Array2::zeros((rows, d));
    g_proj
        .slice_mut(s![..n * k, ..])
        .assign(&g_ps.view().into_shape_with_order((n * k, d)).unwrap());
    g_proj
        .slice_mut(s![n * k..2 * n * k, ..])
        .assign(&g_pt.view().into_shape_with_order((n * k, d)).unwrap());
    g_proj.slice_mut(s![rows - 1, ..]).assign(&g_pbar);
    let g_inputs = projector.backward(&g_proj);

    let mut d_shape = g_inputs
        .slice(s![..n * k, ..])
        .to_owned()
        .into_shape_with_order((n, k, d))
        .unwrap();
    let d_texture = g_inputs
        .slice(s![n * k..2 * n * k, ..])
        .to_owned()
        .into_shape_with_order((n, k, d))
        .unwrap();
    // The anchor is the mean of all raw shape features.
    let g_sbar = g_inputs.slice(s![rows - 1, ..]).to_owned();
    let spread = g_sbar.mapv(|v| v / F::from_usize(n * k).unwrap());
    for i in 0..n {
        for j in 0..k {
            d_shape.slice_mut(s![i, j, ..]).scaled_add(F::one(), &spread);
        }
    }

    Ok(ContrastiveGrads {
        st,
        ss,
        d_shape,
        d_texture,
    })
}

/// Mean negative log probability of the true class. Probabilities below the
/// floor are clamped; the number of clamped entries is returned alongside.
pub fn cross_entropy<F: Scalar>(probs: &Array2<F>, labels: &[usize]) -> Result<(F, usize)> {
    let (n, c) = probs.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {} probability rows",
            labels.len(),
            n
        )));
    }
    let floor = F::of_f64(1e-12);
    let mut acc = F::zero();
    let mut clamped = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::Shape(format!("label {label} out of range 0..{c}")));
        }
        let mut p = probs[[i, label]];
        if p < floor {
            p = floor;
            clamped += 1;
        }
        acc -= p.ln();
    }
    if clamped > 0 {
        log::warn!("cross_entropy clamped {clamped} probabilities at 1e-12");
    }
    Ok((acc / F::from_usize(n).unwrap(), clamped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_projector(d: usize) -> Projector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Projector::<f64>::new(d, &mut rng);
        p.fc1.weight.value.fill(0.0);
        p.fc2.weight.value.fill(0.0);
        p.fc1.bias.value.fill(0.0);
        p.fc2.bias.value.fill(0.0);
        for i in 0..d {
            p.fc1.weight.value[[i, i]] = 1.0;
            p.fc2.weight.value[[i, i]] = 1.0;
        }
        p
    }

    fn cfg(m: usize, n: usize) -> LossConfig {
        LossConfig {
            epsilon: 0.3,
            alpha1: 0.5,
            alpha2: 1.0,
            m,
            n,
        }
    }

    #[test]
    fn reconstruction_loss_identical_is_zero() {
        let x = Array4::from_elem((2, 3, 4, 4), 0.42);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_loss_ones_vs_zeros() {
        let a = Array4::<f64>::ones((2, 3, 4, 4));
        let b = Array4::<f64>::zeros((2, 3, 4, 4));
        assert_eq!(reconstruction_loss(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn reconstruction_loss_half_pixels_differ() {
        let a = Array4::<f64>::zeros((1, 1, 2, 2));
        let mut b = a.clone();
        b[[0, 0, 0, 0]] = 0.4;
        b[[0, 0, 0, 1]] = 0.4;
        assert!((reconstruction_loss(&a, &b).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_loss_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array4::from_shape_simple_fn((2, 3, 5, 5), || rng.gen::<f64>());
        let b = Array4::from_shape_simple_fn((2, 3, 5, 5), || rng.gen::<f64>());
        assert_eq!(
            reconstruction_loss(&a, &b).unwrap(),
            reconstruction_loss(&b, &a).unwrap()
        );
    }

    #[test]
    fn anchor_of_constant_features_is_the_constant() {
        let v = array![1.0, -2.0, 3.0];
        let mut shape = Array3::zeros((2, 4, 3));
        for i in 0..2 {
            for j in 0..4 {
                shape.slice_mut(s![i, j, ..]).assign(&v);
            }
        }
        assert_eq!(mean_shape_anchor(&shape).unwrap(), v);
    }

    #[test]
    fn anchor_of_opposite_features_is_zero() {
        let mut shape = Array3::zeros((1, 2, 3));
        shape.slice_mut(s![0, 0, ..]).assign(&array![1.0, 2.0, 3.0]);
        shape
            .slice_mut(s![0, 1, ..])
            .assign(&array![-1.0, -2.0, -3.0]);
        assert_eq!(mean_shape_anchor(&shape).unwrap(), array![0.0, 0.0, 0.0]);
    }

    #[test]
    fn anchor_matches_bruteforce_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = Array3::from_shape_simple_fn((3, 4, 5), || rng.gen::<f64>() - 0.5);
        let anchor = mean_shape_anchor(&shape).unwrap();
        for d in 0..5 {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..4 {
                    acc += shape[[i, j, d]];
                }
            }
            assert!((anchor[d] - acc / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn st_loss_collapsed_features_equals_epsilon() {
        // All shape features identical and textures equal to shapes: both
        // distances are zero, every term is exactly epsilon.
        let d = 4;
        let mut shape = Array3::zeros((2, 4, d));
        shape.fill(0.7);
        let feats = PretrainFeatures::new(shape.clone(), shape).unwrap();
        let mut proj = identity_projector(d);
        let l = st_loss(&feats, &mut proj, &cfg(2, 2)).unwrap();
        assert!((l - 0.3).abs() < 1e-15);
    }

    #[test]
    fn st_loss_inactive_hinge_is_zero() {
        // Texture far from shape, all shapes at the anchor.
        let d = 2;
        let mut shape = Array3::zeros((1, 2, d));
        shape.fill(0.0);
        let mut texture = Array3::zeros((1, 2, d));
        texture.fill(50.0);
        let feats = PretrainFeatures::new(shape, texture).unwrap();
        let mut proj = identity_projector(d);
        let l = st_loss(&feats, &mut proj, &cfg(1, 1)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn ss_loss_collapsed_embeddings_is_half_epsilon() {
        let d = 3;
        let shape = Array3::from_elem((2, 6, d), 0.2);
        let feats = PretrainFeatures::new(shape.clone(), shape).unwrap();
        let mut proj = identity_projector(d);
        let l = ss_loss(&feats, &mut proj, &cfg(3, 2)).unwrap();
        assert!((l - 0.15).abs() < 1e-15, "got {l}");
    }

    #[test]
    fn ss_loss_m1_separated_is_zero() {
        let d = 2;
        let mut shape = Array3::zeros((1, 2, d));
        shape.slice_mut(s![0, 1, ..]).assign(&array![10.0, 0.0]);
        let feats = PretrainFeatures::new(shape.clone(), shape).unwrap();
        let mut proj = identity_projector(d);
        let l = ss_loss(&feats, &mut proj, &cfg(1, 1)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn ss_loss_invariant_under_within_set_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let m = 3;
        let shape = Array3::from_shape_simple_fn((2, 2 * m, d), || rng.gen::<f64>());
        let mut proj = identity_projector(d);
        let feats = PretrainFeatures::new(shape.clone(), shape.clone()).unwrap();
        let l1 = ss_loss(&feats, &mut proj, &cfg(m, 2)).unwrap();
        // Swap instances 0 and 2 of the onset set in set 0.
        let mut permuted = shape.clone();
        let row0 = shape.slice(s![0, 0, ..]).to_owned();
        let row2 = shape.slice(s![0, 2, ..]).to_owned();
        permuted.slice_mut(s![0, 0, ..]).assign(&row2);
        permuted.slice_mut(s![0, 2, ..]).assign(&row0);
        let feats2 = PretrainFeatures::new(permuted.clone(), permuted).unwrap();
        let l2 = ss_loss(&feats2, &mut proj, &cfg(m, 2)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights_components() {
        let c = cfg(3, 1);
        assert_eq!(total_pretrain_loss(0.0, 0.0, 0.0, &c).unwrap(), 0.0);
        assert_eq!(total_pretrain_loss(1.0, 2.0, 3.0, &c).unwrap(), 5.0);
        let l1: f64 = total_pretrain_loss(0.4, 0.6, 0.8, &c).unwrap();
        let l2 = total_pretrain_loss(0.8, 1.2, 1.6, &c).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-15);
    }

    #[test]
    fn total_loss_rejects_non_finite() {
        let c = cfg(3, 1);
        assert!(total_pretrain_loss(f64::NAN, 0.0, 0.0, &c).is_err());
        assert!(total_pretrain_loss(0.0, f64::INFINITY, 0.0, &c).is_err());
    }

    #[test]
    fn cross_entropy_certain_prediction_is_zero() {
        let p = array![[1.0, 0.0, 0.0]];
        let (l, clamped) = cross_entropy(&p, &[0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln3() {
        let third = 1.0 / 3.0;
        let p = array![[third, third, third], [third, third, third]];
        let (l, _) = cross_entropy(&p, &[0, 2]).unwrap();
        assert!((l - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_and_counts() {
        let p = array![[0.0, 1.0]];
        let (l, clamped) = cross_entropy(&p, &[0]).unwrap();
        assert_eq!(clamped, 1);
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-6);
    }

    #[test]
    fn contrastive_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let (n, m) = (2, 2);
        let shape = Array3::from_shape_simple_fn((n, 2 * m, d), || rng.gen::<f64>() - 0.5);
        let texture = Array3::from_shape_simple_fn((n, 2 * m, d), || rng.gen::<f64>() - 0.5);
        let c = cfg(m, n);
        let mut proj = Projector::<f64>::new(d, &mut rng);

        let feats = PretrainFeatures::new(shape.clone(), texture.clone()).unwrap();
        let out = contrastive_losses_grad(&feats, &mut proj, &c).unwrap();

        let weighted = |s: &Array3<f64>, t: &Array3<f64>, p: &mut Projector<f64>| {
            let f = PretrainFeatures::new(s.clone(), t.clone()).unwrap();
            c.alpha1 * st_loss(&f, p, &c).unwrap() + c.alpha2 * ss_loss(&f, p, &c).unwrap()
        };

        let h = 1e-5;
        for idx in [[0, 0, 0], [1, 3, 2], [0, 2, 3], [1, 1, 1]] {
            let mut plus = shape.clone();
            plus[idx] += h;
            let mut minus = shape.clone();
            minus[idx] -= h;
            let fd = (weighted(&plus, &texture, &mut proj)
                - weighted(&minus, &texture, &mut proj))
                / (2.0 * h);
            assert!(
                (out.d_shape[idx] - fd).abs() < 1e-6,
                "shape grad {idx:?}: analytic {} vs fd {fd}",
                out.d_shape[idx]
            );

            let mut plus = texture.clone();
            plus[idx] += h;
            let mut minus = texture.clone();
            minus[idx] -= h;
            let fd = (weighted(&shape, &plus, &mut proj)
                - weighted(&shape, &minus, &mut proj))
                / (2.0 * h);
            assert!(
                (out.d_texture[idx] - fd).abs() < 1e-6,
                "texture grad {idx:?}: analytic {} vs fd {fd}",
                out.d_texture[idx]
            );
        }
    }

    #[test]
    fn invalid_epsilon_rejected() {
        let mut c = cfg(3, 1);
        c.epsilon = 0.7;
        assert!(c.validate().is_err());
    }
}
