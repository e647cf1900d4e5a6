//! Rendered stand-in faces with known keypoints, for exercising the
//! extraction pipeline without a landmark model.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{FaceRecord, Keypoints, Point};
use crate::nn::{Shape, Tensor};

/// Canonical upright keypoints in inter-ocular units, relative to the eye midpoint.
///
/// The lower face is long relative to real proportions so the default region
/// and exclusion-zone constants leave a few pixels of clearance everywhere.
pub const TEMPLATE: [(f64, f64); 6] = [
    (-0.5, 0.0),   // left_eye_outer
    (0.5, 0.0),    // right_eye_outer
    (0.0, 0.6),    // nose_tip
    (-0.3, 1.35),  // mouth_left
    (0.3, 1.35),   // mouth_right
    (0.0, 2.65),   // chin_bottom
];

/// Canvas used by [`random_face`].
pub const CANVAS_WIDTH: usize = 256;
pub const CANVAS_HEIGHT: usize = 384;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FacePose {
    pub eye_mid: Point,
    pub inter_ocular: f64,
    /// Clockwise in image coordinates (y down), degrees.
    pub roll_deg: f64,
    /// Per-coordinate Gaussian landmark noise, in inter-ocular units.
    pub noise: f64,
}

impl FacePose {
    pub fn upright(eye_mid: Point, inter_ocular: f64) -> Self {
        FacePose {
            eye_mid,
            inter_ocular,
            roll_deg: 0.0,
            noise: 0.0,
        }
    }
}

pub fn keypoints<R: Rng + ?Sized>(pose: &FacePose, rng: &mut R) -> Keypoints {
    let (sin, cos) = pose.roll_deg.to_radians().sin_cos();
    let noise = Normal::new(0.0, pose.noise.max(0.0)).expect("finite sigma");
    let mut pts = [Point::new(0.0, 0.0); 6];
    for (p, &(u, v)) in pts.iter_mut().zip(&TEMPLATE) {
        let (u, v) = if pose.noise > 0.0 {
            (u + noise.sample(rng), v + noise.sample(rng))
        } else {
            (u, v)
        };
        let (u, v) = (u * pose.inter_ocular, v * pose.inter_ocular);
        *p = Point::new(pose.eye_mid.x + cos * u - sin * v, pose.eye_mid.y + sin * u + cos * v);
    }
    Keypoints {
        left_eye_outer: pts[0],
        right_eye_outer: pts[1],
        nose_tip: pts[2],
        mouth_left: pts[3],
        mouth_right: pts[4],
        chin_bottom: pts[5],
    }
}

fn segment_distance_sq(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    let q = a.lerp(b, t);
    (p.x - q.x).powi(2) + (p.y - q.y).powi(2)
}

/// Draws a skin-toned canvas with dark eyes, nose tip and mouth at the keypoints.
pub fn render(kp: &Keypoints, width: usize, height: usize, tone: [f32; 3]) -> Tensor {
    let iod = kp.inter_ocular();
    let eye_in = |outer: Point, other: Point| outer.lerp(other, 0.2);
    let eyes = [eye_in(kp.left_eye_outer, kp.right_eye_outer), eye_in(kp.right_eye_outer, kp.left_eye_outer)];
    let (eye_r2, nose_r2, mouth_r2) = ((0.13 * iod).powi(2), (0.08 * iod).powi(2), (0.05 * iod).powi(2));
    let within = |p: Point, c: Point, r2: f64| (p.x - c.x).powi(2) + (p.y - c.y).powi(2) < r2;
    // every feature pixel lies inside this box
    let pad = 0.13 * iod;
    let pts = [eyes[0], eyes[1], kp.nose_tip, kp.mouth_left, kp.mouth_right];
    let (lo_y, hi_y) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| (lo.min(q.y - pad), hi.max(q.y + pad)));
    let (lo_x, hi_x) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| (lo.min(q.x - pad), hi.max(q.x + pad)));
    let mut img = Tensor::zeros(Shape::new(1, 3, height, width));
    let plane = width * height;
    let data = img.data_mut();
    // shade = 0.9 + 0.1 sin(2x/w - y/h), split into per-column and per-row terms
    let cols: Vec<(f64, f64)> = (0..width).map(|x| (x as f64 / width as f64 * 2.0).sin_cos()).collect();
    for y in 0..height {
        let (sv, cv) = (y as f64 / height as f64).sin_cos();
        for x in 0..width {
            let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
            let (su, cu) = cols[x];
            let shade = 0.9 + 0.1 * (su * cv - cu * sv);
            let mut rgb = tone.map(|t| t * shade as f32);
            let feature = if p.x < lo_x || p.x > hi_x || p.y < lo_y || p.y > hi_y {
                None
            } else if eyes.iter().any(|e| within(p, *e, eye_r2)) {
                Some([0.12, 0.1, 0.1])
            } else if within(p, kp.nose_tip, nose_r2) {
                Some([0.45, 0.3, 0.28])
            } else if segment_distance_sq(p, kp.mouth_left, kp.mouth_right) < mouth_r2 {
                Some([0.5, 0.15, 0.18])
            } else {
                None
            };
            if let Some(f) = feature {
                rgb = f;
            }
            for (c, v) in rgb.iter().enumerate() {
                data[c * plane + y * width + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Random pose on the standard canvas: inter-ocular 60-110 px, roll ±20°,
/// eye midpoint within ±8 px of `(128, 64)`, landmark noise 0.02.
pub fn random_pose<R: Rng + ?Sized>(rng: &mut R) -> FacePose {
    FacePose {
        eye_mid: Point::new(128.0 + rng.gen_range(-8.0..8.0), 64.0 + rng.gen_range(-8.0..8.0)),
        inter_ocular: rng.gen_range(60.0..110.0),
        roll_deg: rng.gen_range(-20.0..20.0),
        noise: 0.02,
    }
}

pub fn random_tone<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    let base: f32 = rng.gen_range(0.45..0.9);
    [base, base * rng.gen_range(0.7..0.85), base * rng.gen_range(0.55..0.75)]
}

/// Random face on the standard canvas with its keypoint set.
pub fn random_face<R: Rng + ?Sized>(rng: &mut R, source_id: impl Into<String>) -> FaceRecord {
    let pose = random_pose(rng);
    let kp = keypoints(&pose, rng);
    let tone = random_tone(rng);
    FaceRecord {
        image: render(&kp, CANVAS_WIDTH, CANVAS_HEIGHT, tone),
        keypoints: kp,
        source_id: source_id.into(),
    }
}
