use super::{FaceRecord, Keypoints, PemConfig, PemError, Point};
use crate::nn::Tensor;

/// Source pixel offsets (within one channel plane) and weights for a bilinear
/// read at `p`, clamping to the border.
fn bilinear_taps(w: usize, h: usize, p: Point) -> ([usize; 4], [f64; 4]) {
    // pixel centers sit at half-integers; both coordinates are non-negative, so truncation floors
    let sx = (p.x - 0.5).clamp(0.0, (w - 1) as f64);
    let sy = (p.y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = sx as i32 as usize;
    let y0 = sy as i32 as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    (
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    )
}

fn apply_taps(plane: &[f32], (idx, wt): &([usize; 4], [f64; 4])) -> f32 {
    idx.iter().zip(wt).map(|(&i, &k)| plane[i] as f64 * k).sum::<f64>() as f32
}

/// Bilinear sample of channel `c` at continuous position `p`, clamping to the border.
pub fn bilinear_sample(image: &Tensor, c: usize, p: Point) -> f32 {
    let [_, _, h, w] = image.shape().0;
    let plane = &image.data()[c * h * w..(c + 1) * h * w];
    apply_taps(plane, &bilinear_taps(w, h, p))
}

/// Similarity transform taking `kp` to the aligned frame, and its inverse.
struct Alignment {
    mid: Point,
    sin: f64,
    cos: f64,
    scale: f64,
}

impl Alignment {
    fn new(kp: &Keypoints, cfg: &PemConfig) -> Result<Self, PemError> {
        let (l, r) = (kp.left_eye_outer, kp.right_eye_outer);
        let iod = kp.inter_ocular();
        if !(iod > 0.0 && iod.is_finite()) {
            return Err(PemError::Geometry(format!("inter-ocular distance is {iod}")));
        }
        if cfg.target_inter_ocular <= 0.0 {
            return Err(PemError::Geometry("target inter-ocular distance must be positive".into()));
        }
        let (sin, cos) = (r.y - l.y).atan2(r.x - l.x).sin_cos();
        Ok(Alignment {
            mid: l.midpoint(r),
            sin,
            cos,
            scale: cfg.target_inter_ocular / iod,
        })
    }

    /// `mid + scale * R(-angle) (p - mid)`
    fn forward(&self, p: Point) -> Point {
        let (dx, dy) = (p.x - self.mid.x, p.y - self.mid.y);
        Point::new(
            self.mid.x + self.scale * (self.cos * dx + self.sin * dy),
            self.mid.y + self.scale * (-self.sin * dx + self.cos * dy),
        )
    }

    fn inverse(&self, q: Point) -> Point {
        let (dx, dy) = ((q.x - self.mid.x) / self.scale, (q.y - self.mid.y) / self.scale);
        Point::new(self.mid.x + self.cos * dx - self.sin * dy, self.mid.y + self.sin * dx + self.cos * dy)
    }
}

/// Keypoints as [`align`] would place them, without resampling any pixels.
pub fn aligned_keypoints(kp: &Keypoints, cfg: &PemConfig) -> Result<Keypoints, PemError> {
    let t = Alignment::new(kp, cfg)?;
    Ok(kp.map(|p| t.forward(p)))
}

/// Aligned keypoints plus the map from aligned-frame points back into the
/// unaligned image, with the same checks as [`align`].
pub(crate) fn alignment_map(record: &FaceRecord, cfg: &PemConfig) -> Result<(Keypoints, impl Fn(Point) -> Point), PemError> {
    record.validate()?;
    let t = Alignment::new(&record.keypoints, cfg)?;
    let keypoints = record.keypoints.map(|p| t.forward(p));
    keypoints
        .validate(record.width(), record.height())
        .map_err(|e| PemError::Geometry(format!("aligned face leaves the canvas: {e}")))?;
    Ok((keypoints, move |q| t.inverse(q)))
}

/// Rotates and scales the face about the eye midpoint so the eye line is
/// horizontal and the inter-ocular distance equals `cfg.target_inter_ocular`.
/// The canvas keeps its size; pixels are resampled bilinearly.
pub fn align(record: &FaceRecord, cfg: &PemConfig) -> Result<FaceRecord, PemError> {
    record.validate()?;
    let t = Alignment::new(&record.keypoints, cfg)?;
    let keypoints = record.keypoints.map(|p| t.forward(p));
    let (w, h) = (record.width(), record.height());
    keypoints
        .validate(w, h)
        .map_err(|e| PemError::Geometry(format!("aligned face leaves the canvas: {e}")))?;

    let mut image = Tensor::zeros(record.image.shape());
    let plane = w * h;
    let (s0, rest) = record.image.data().split_at(plane);
    let (s1, s2) = rest.split_at(plane);
    let (d0, rest) = image.data_mut().split_at_mut(plane);
    let (d1, d2) = rest.split_at_mut(plane);
    let (src, dst) = ([s0, s1, s2], [d0, d1, d2]);
    // the inverse map is affine, so step it along each row
    let origin = t.inverse(Point::new(0.5, 0.5));
    let step_x = t.inverse(Point::new(1.5, 0.5));
    let step_y = t.inverse(Point::new(0.5, 1.5));
    let (ax, ay) = (step_x.x - origin.x, step_x.y - origin.y);
    let (bx, by) = (step_y.x - origin.x, step_y.y - origin.y);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let p = Point::new(origin.x + xf * ax + yf * bx, origin.y + xf * ay + yf * by);
            let (idx, wt) = bilinear_taps(w, h, p);
            let wt = wt.map(|k| k as f32);
            for c in 0..3 {
                let s = src[c];
                let v = s[idx[0]] * wt[0] + s[idx[1]] * wt[1] + s[idx[2]] * wt[2] + s[idx[3]] * wt[3];
                dst[c][y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(FaceRecord {
        image,
        keypoints,
        source_id: record.source_id.clone(),
    })
}
