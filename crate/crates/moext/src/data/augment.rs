//! Training-set augmentation (mirror + rotations, 10x) and the expansion
//! sets used by the contrastive pre-training losses.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::align::{warp_affine, Similarity};

/// Horizontal mirror (an involution).
pub fn mirror(img: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| img[[ch, y, w - 1 - x]])
}

/// Rotate about the image center by `angle_deg`, bilinear with edge clamp.
pub fn rotate(img: &Array3<f32>, angle_deg: f64) -> Array3<f32> {
    let (_, h, w) = img.dim();
    let theta = angle_deg.to_radians();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    // Inverse rotation expressed as a similarity about the origin.
    let (a, b) = (theta.cos(), -theta.sin());
    let inv = Similarity {
        a,
        b,
        tx: cx - (a * cx - b * cy),
        ty: cy - (b * cx + a * cy),
    };
    warp_affine(img, &inv, h, w)
}

/// Mirror + eight same-angle-per-pair rotations in [-10, 10] degrees: every
/// input pair becomes ten pairs, the motion between onset and apex intact.
pub fn augment_training_set(
    pairs: &[(Array3<f32>, Array3<f32>)],
    seed: u64,
) -> Vec<(Array3<f32>, Array3<f32>)> {
    let mut out = Vec::with_capacity(pairs.len() * 10);
    for (i, (onset, apex)) in pairs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        out.push((onset.clone(), apex.clone()));
        out.push((mirror(onset), mirror(apex)));
        for _ in 0..8 {
            let angle: f64 = rng.gen_range(-10.0..=10.0);
            out.push((rotate(onset, angle), rotate(apex, angle)));
        }
    }
    out
}

/// The augmentation operations available to expansion sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpansionOp {
    /// Additive uniform noise with amplitude 0.05, clipped to [0, 1].
    Noise,
    /// Contrast scaling x1.3 about mid-gray, clipped to [0, 1].
    Contrast,
    /// Grayscale conversion replicated to all three channels.
    Grayscale,
}

pub const EXPANSION_OPS: [ExpansionOp; 3] =
    [ExpansionOp::Noise, ExpansionOp::Contrast, ExpansionOp::Grayscale];

pub const NOISE_AMPLITUDE: f32 = 0.05;
pub const CONTRAST_FACTOR: f32 = 1.3;

fn apply_op(img: &Array3<f32>, op: ExpansionOp, noise: Option<&Array3<f32>>) -> Array3<f32> {
    match op {
        ExpansionOp::Noise => {
            let noise = noise.expect("noise field required for the noise op");
            (img + noise).mapv(|v| v.clamp(0.0, 1.0))
        }
        ExpansionOp::Contrast => {
            img.mapv(|v| ((v - 0.5) * CONTRAST_FACTOR + 0.5).clamp(0.0, 1.0))
        }
        ExpansionOp::Grayscale => {
            let (c, h, w) = img.dim();
            let mut out = Array3::zeros((c, h, w));
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += img[[ch, y, x]];
                    }
                    let gray = acc / c as f32;
                    for ch in 0..c {
                        out[[ch, y, x]] = gray;
                    }
                }
            }
            out
        }
    }
}

/// Build the onset and apex expansion sets: instance 0 of each is the
/// original, the other m-1 apply distinct ops (sampled without replacement)
/// in the same order to both frames. The noise field, when drawn, is shared
/// by the onset/apex pair so the inter-frame motion is unchanged.
pub fn build_expansion_sets(
    onset: &Array3<f32>,
    apex: &Array3<f32>,
    m: usize,
    seed: u64,
) -> Result<(Vec<Array3<f32>>, Vec<Array3<f32>>)> {
    if m < 2 {
        return Err(Error::Config(format!("expansion size m={m}, need m >= 2")));
    }
    if m - 1 > EXPANSION_OPS.len() {
        return Err(Error::Config(format!(
            "m-1 = {} exceeds the {} available augmentation ops",
            m - 1,
            EXPANSION_OPS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = EXPANSION_OPS.to_vec();
    ops.shuffle(&mut rng);
    ops.truncate(m - 1);
    let mut onset_set = vec![onset.clone()];
    let mut apex_set = vec![apex.clone()];
    for op in ops {
        let noise = (op == ExpansionOp::Noise).then(|| {
            Array3::from_shape_simple_fn(onset.dim(), || {
                rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE)
            })
        });
        onset_set.push(apply_op(onset, op, noise.as_ref()));
        apex_set.push(apply_op(apex, op, noise.as_ref()));
    }
    Ok((onset_set, apex_set))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_img(salt: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            ((c * 7 + y * 3 + x + salt) % 11) as f32 / 11.0
        })
    }

    #[test]
    fn three_pairs_become_thirty() {
        let pairs: Vec<_> = (0..3).map(|i| (test_img(i), test_img(i + 10))).collect();
        let out = augment_training_set(&pairs, 9);
        assert_eq!(out.len(), 30);
    }

    #[test]
    fn mirror_is_an_involution() {
        let img = test_img(0);
        assert_eq!(mirror(&mirror(&img)), img);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = test_img(1);
        let out = rotate(&img, 0.0);
        let max_err = (&out - &img).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        assert!(max_err < 1e-6);
    }

    #[test]
    fn augmentation_is_deterministic() {
        let pairs = vec![(test_img(0), test_img(1))];
        let a = augment_training_set(&pairs, 3);
        let b = augment_training_set(&pairs, 3);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.0, pb.0);
            assert_eq!(pa.1, pb.1);
        }
    }

    #[test]
    fn expansion_sets_have_m_instances_and_exact_originals() {
        let onset = test_img(0);
        let apex = test_img(5);
        let (so, sa) = build_expansion_sets(&onset, &apex, 3, 11).unwrap();
        assert_eq!(so.len(), 3);
        assert_eq!(sa.len(), 3);
        assert_eq!(so[0], onset);
        assert_eq!(sa[0], apex);
    }

    #[test]
    fn grayscale_channels_are_equal() {
        let img = test_img(2);
        let gray = apply_op(&img, ExpansionOp::Grayscale, None);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(gray[[0, y, x]], gray[[1, y, x]]);
                assert_eq!(gray[[1, y, x]], gray[[2, y, x]]);
            }
        }
    }

    #[test]
    fn noise_deviation_is_bounded() {
        let img = Array3::from_elem((3, 8, 8), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Array3::from_shape_simple_fn(img.dim(), || {
            rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE)
        });
        let out = apply_op(&img, ExpansionOp::Noise, Some(&noise));
        let dev = (&out - &img).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        assert!(dev <= NOISE_AMPLITUDE + 1e-6);
    }

    #[test]
    fn too_large_m_is_a_config_error() {
        let img = test_img(0);
        assert!(build_expansion_sets(&img, &img, 5, 0).is_err());
    }
}
