//! Five-point similarity alignment to a canonical 224x224 face crop.

use ndarray::Array3;

use crate::error::{Error, Result};

pub const CROP_SIZE: usize = 224;

/// Canonical positions of (left eye, right eye, nose, left mouth corner,
/// right mouth corner) in a `size` x `size` crop.
pub fn template_points(size: usize) -> [(f64, f64); 5] {
    let s = size as f64;
    [
        (0.35 * s, 0.40 * s),
        (0.65 * s, 0.40 * s),
        (0.50 * s, 0.55 * s),
        (0.38 * s, 0.72 * s),
        (0.62 * s, 0.72 * s),
    ]
}

/// Similarity transform (x, y) -> (a x - b y + tx, b x + a y + ty).
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.a * x - self.b * y + self.tx,
            self.b * x + self.a * y + self.ty,
        )
    }

    pub fn inverse(&self) -> Result<Similarity> {
        let det = self.a * self.a + self.b * self.b;
        if det < 1e-12 {
            return Err(Error::Numeric {
                context: "similarity inverse".into(),
                msg: "degenerate transform".into(),
            });
        }
        let a = self.a / det;
        let b = -self.b / det;
        Ok(Similarity {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        })
    }
}

/// Least-squares similarity (rotation + uniform scale + translation, no
/// reflection) mapping `src` points onto `dst` points.
pub fn similarity_transform(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Similarity> {
    if src.len() != dst.len() || src.len() < 2 {
        return Err(Error::Shape(format!(
            "similarity needs >= 2 matched points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mean = |pts: &[(f64, f64)]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x, ay + y));
        (sx / n, sy / n)
    };
    let (mx_s, my_s) = mean(src);
    let (mx_d, my_d) = mean(dst);
    let mut dot = 0.0;
    let mut cross = 0.0;
    let mut norm = 0.0;
    for (&(sx, sy), &(dx, dy)) in src.iter().zip(dst) {
        let (sx, sy) = (sx - mx_s, sy - my_s);
        let (dx, dy) = (dx - mx_d, dy - my_d);
        dot += sx * dx + sy * dy;
        cross += sx * dy - sy * dx;
        norm += sx * sx + sy * sy;
    }
    if norm < 1e-12 {
        return Err(Error::Numeric {
            context: "similarity_transform".into(),
            msg: "degenerate (coincident) source points".into(),
        });
    }
    let a = dot / norm;
    let b = cross / norm;
    Ok(Similarity {
        a,
        b,
        tx: mx_d - (a * mx_s - b * my_s),
        ty: my_d - (b * mx_s + a * my_s),
    })
}

fn bilinear(img: &Array3<f32>, c: usize, x: f64, y: f64) -> f32 {
    let (_, h, w) = img.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let v00 = img[[c, y0, x0]];
    let v01 = img[[c, y0, x1]];
    let v10 = img[[c, y1, x0]];
    let v11 = img[[c, y1, x1]];
    v00 * (1.0 - fx) * (1.0 - fy)
        + v01 * fx * (1.0 - fy)
        + v10 * (1.0 - fx) * fy
        + v11 * fx * fy
}

/// Warp by sampling the input at `inv(output pixel)` with bilinear
/// interpolation and edge clamping.
pub fn warp_affine(img: &Array3<f32>, inv: &Similarity, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, _, _) = img.dim();
    Array3::from_shape_fn((c, out_h, out_w), |(ch, y, x)| {
        let (sx, sy) = inv.apply((x as f64, y as f64));
        bilinear(img, ch, sx, sy)
    })
}

/// Align a face to the canonical template from its 5 detected landmarks and
/// crop to 3 x 224 x 224.
pub fn align_and_crop(img: &Array3<f32>, landmarks: &[(f64, f64); 5]) -> Result<Array3<f32>> {
    let (_, h, w) = img.dim();
    for &(x, y) in landmarks {
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            return Err(Error::Shape(format!(
                "landmark ({x}, {y}) outside {w}x{h} image"
            )));
        }
    }
    let fwd = similarity_transform(landmarks, &template_points(CROP_SIZE))?;
    let inv = fwd.inverse()?;
    Ok(warp_affine(img, &inv, CROP_SIZE, CROP_SIZE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_landmarks_already_canonical() {
        let img = Array3::from_shape_fn((3, CROP_SIZE, CROP_SIZE), |(c, y, x)| {
            ((c + 1) * (y * 31 + x * 7) % 255) as f32 / 255.0
        });
        let out = align_and_crop(&img, &template_points(CROP_SIZE)).unwrap();
        let max_err = (&out - &img).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        assert!(max_err < 1e-6, "{max_err}");
    }

    #[test]
    fn output_shape_is_always_canonical() {
        let img = Array3::from_elem((3, 100, 130), 0.5);
        let lm = [
            (40.0, 40.0),
            (80.0, 40.0),
            (60.0, 55.0),
            (45.0, 70.0),
            (75.0, 70.0),
        ];
        let out = align_and_crop(&img, &lm).unwrap();
        assert_eq!(out.dim(), (3, 224, 224));
    }

    #[test]
    fn known_affine_is_recovered() {
        // Push the template through a known similarity, then ask for the fit
        // back: the composed map must return each point to the template.
        let known = Similarity {
            a: 0.9 * (0.2f64).cos(),
            b: 0.9 * (0.2f64).sin(),
            tx: 12.0,
            ty: -5.0,
        };
        let template = template_points(CROP_SIZE);
        let moved: Vec<(f64, f64)> = template.iter().map(|&p| known.apply(p)).collect();
        let fit = similarity_transform(&moved, &template).unwrap();
        for (&src, &dst) in moved.iter().zip(&template) {
            let (x, y) = fit.apply(src);
            assert!((x - dst.0).abs() < 1.0 && (y - dst.1).abs() < 1.0);
        }
    }

    #[test]
    fn landmark_outside_bounds_rejected() {
        let img = Array3::zeros((3, 50, 50));
        let mut lm = template_points(CROP_SIZE);
        lm[0] = (300.0, 10.0);
        assert!(align_and_crop(&img, &lm).is_err());
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = Similarity {
            a: 1.3,
            b: -0.4,
            tx: 3.0,
            ty: 7.0,
        };
        let inv = t.inverse().unwrap();
        let (x, y) = inv.apply(t.apply((5.0, -2.0)));
        assert!((x - 5.0).abs() < 1e-10 && (y + 2.0).abs() < 1e-10);
    }
}
