use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar field on a `Dz×Dy×Dx` grid, stored with `x` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    voxels: Vec<f32>,
}

/// Ray direction of a parallel projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Rays along `y` (anterior–posterior); the image is `Dz×Dx`.
    Frontal,
    /// Rays along `x` (left–right); the image is `Dz×Dy`.
    Lateral,
}

impl Volume {
    pub fn new(extents: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        if extents.contains(&0) {
            return Err(Error::InvalidShape(extents.to_vec()));
        }
        if voxels.len() != extents.iter().product::<usize>() {
            return Err(Error::InvalidArgument(format!(
                "{} voxels for extents {extents:?}",
                voxels.len()
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "volume" });
        }
        Ok(Volume { extents, voxels })
    }

    pub fn filled(extents: [usize; 3], value: f32) -> Result<Self> {
        Volume::new(extents, vec![value; extents.iter().product()])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        let [_, dy, dx] = self.extents;
        self.voxels[(z * dy + y) * dx + x]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let [_, dy, dx] = self.extents;
        self.voxels[(z * dy + y) * dx + x] = v;
    }
}

/// Mean along the rays, before any normalization.
pub fn line_integral(volume: &Volume, axis: Axis) -> Tensor<f64> {
    let [dz, dy, dx] = volume.extents;
    let (cols, depth) = match axis {
        Axis::Frontal => (dx, dy),
        Axis::Lateral => (dy, dx),
    };
    let mut out = vec![0.0f64; dz * cols];
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let c = if axis == Axis::Frontal { x } else { y };
                out[z * cols + c] += volume.get(z, y, x) as f64;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= depth as f64);
    Tensor::new(&[dz, cols], out).expect("nonempty volume")
}

/// Rescale to `[0, 1]` by min and max; a constant image maps to 0.5.
pub fn min_max_normalize(image: &Tensor<f64>) -> Tensor<f32> {
    let d = image.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = d
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.5 })
        .collect();
    Tensor::new(image.shape(), data).expect("same shape")
}

/// Simulated radiograph: ray means, min–max normalized.
pub fn parallel_project(volume: &Volume, axis: Axis) -> Tensor<f32> {
    min_max_normalize(&line_integral(volume, axis))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_volume_is_half_grey() {
        let v = Volume::filled([3, 4, 5], 2.5).unwrap();
        let f = parallel_project(&v, Axis::Frontal);
        assert_eq!(f.shape(), [3, 5]);
        assert!(f.data().iter().all(|&p| p == 0.5));
        assert_eq!(parallel_project(&v, Axis::Lateral).shape(), [3, 4]);
    }

    #[test]
    fn impulse_lands_on_projected_pixel() {
        let mut v = Volume::filled([4, 5, 6], 0.0).unwrap();
        v.set(2, 3, 1, 7.0);
        let f = parallel_project(&v, Axis::Frontal);
        let l = parallel_project(&v, Axis::Lateral);
        for z in 0..4 {
            for x in 0..6 {
                assert_eq!(f.get(&[z, x]).unwrap(), if (z, x) == (2, 1) { 1.0 } else { 0.0 });
            }
            for y in 0..5 {
                assert_eq!(l.get(&[z, y]).unwrap(), if (z, y) == (2, 3) { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Volume::filled([0, 2, 2], 1.0).is_err());
    }
}
