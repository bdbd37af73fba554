use rand::Rng;

use super::LabeledSample;
use crate::tensor::Tensor;

/// A crop box in pixel units on the source image, plus a flip decision. Both
/// views of a sample share one draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub const ASPECT: (f64, f64) = (0.75, 1.3);
    pub const AREA: (f64, f64) = (0.7, 1.0);

    pub fn identity(height: usize, width: usize) -> Self {
        AugmentParams {
            top: 0.0,
            left: 0.0,
            height: height as f64,
            width: width as f64,
            flip: false,
        }
    }

    /// Area fraction and width/height aspect ratio drawn uniformly, box
    /// placed uniformly inside the image, flip with probability one half.
    pub fn sample<R: Rng>(height: usize, width: usize, rng: &mut R) -> Self {
        let area = rng.random_range(Self::AREA.0..=Self::AREA.1);
        let aspect = rng.random_range(Self::ASPECT.0..=Self::ASPECT.1);
        let (h, w) = (height as f64, width as f64);
        let ch = (h * (area / aspect).sqrt()).min(h);
        let cw = (w * (area * aspect).sqrt()).min(w);
        let top = rng.random_range(0.0..=h - ch);
        let left = rng.random_range(0.0..=w - cw);
        let flip = rng.random_bool(0.5);
        AugmentParams {
            top,
            left,
            height: ch,
            width: cw,
            flip,
        }
    }

    /// Crop, resize back to the input extents bilinearly, then flip.
    pub fn apply(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let (h, w) = image.dims2().expect("images are two-dimensional");
        let src = image.data();
        let (sy, sx) = (self.height / h as f64, self.width / w as f64);
        let sample_axis = |i: usize, scale: f64, offset: f64, extent: usize| {
            let p = (offset + (i as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, p - i0 as f64)
        };
        let cols: Vec<_> = (0..w).map(|c| sample_axis(c, sx, self.left, w)).collect();
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            let (r0, r1, fy) = sample_axis(r, sy, self.top, h);
            for &(c0, c1, fx) in &cols {
                let v = |rr: usize, cc: usize| src[rr * w + cc] as f64;
                let top = v(r0, c0) * (1.0 - fx) + v(r0, c1) * fx;
                let bottom = v(r1, c0) * (1.0 - fx) + v(r1, c1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
        if self.flip {
            for row in out.chunks_mut(w) {
                row.reverse();
            }
        }
        Tensor::new(&[h, w], out).expect("same extents")
    }
}

/// Random crop and horizontal flip, applied identically to both views. The
/// label and subject are untouched.
pub fn augment<R: Rng>(sample: &LabeledSample, rng: &mut R) -> LabeledSample {
    let (h, w) = sample.frontal.dims2().expect("images are two-dimensional");
    let params = AugmentParams::sample(h, w, rng);
    LabeledSample {
        frontal: params.apply(&sample.frontal),
        lateral: params.apply(&sample.lateral),
        label: sample.label,
        subject_id: sample.subject_id.clone(),
    }
}
