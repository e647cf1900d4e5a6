use super::{bilinear_sample, patch_shape, PatchRegion, Point};
use crate::nn::Tensor;

/// Resamples the region's square window to an `out_size x out_size` patch.
///
/// Output pixel `j` samples the window at `left + (j + 0.5) * side / out_size`,
/// so a window exactly `out_size` wide on integer bounds is a plain crop.
pub fn extract(image: &Tensor, region: &PatchRegion, out_size: usize) -> Tensor {
    extract_mapped(image, region, out_size, |p| p)
}

/// Like [`extract`], with the window given in another frame: every sample
/// point goes through `to_image` before being read from `image`.
pub(crate) fn extract_mapped(image: &Tensor, region: &PatchRegion, out_size: usize, to_image: impl Fn(Point) -> Point) -> Tensor {
    let side = 2.0 * region.half_extent;
    let step = side / out_size as f64;
    let left = region.center.x - region.half_extent;
    let top = region.center.y - region.half_extent;
    let mut patch = Tensor::zeros(patch_shape(out_size));
    for y in 0..out_size {
        let sy = top + (y as f64 + 0.5) * step;
        for x in 0..out_size {
            let p = to_image(Point::new(left + (x as f64 + 0.5) * step, sy));
            for c in 0..3 {
                patch.set(0, c, y, x, bilinear_sample(image, c, p).clamp(0.0, 1.0));
            }
        }
    }
    patch
}
