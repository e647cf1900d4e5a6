use log::warn;
use rand::Rng;
use serde::Serialize;

use super::{Disc, Keypoints, PatchRegion, PemConfig, PemError, Point, RegionId};

/// Disc around a landmark that no patch window may touch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExclusionZone {
    pub keypoint: &'static str,
    pub disc: Disc,
}

/// One disc per keypoint, radii scaled by the inter-ocular distance.
pub fn exclusion_zones(keypoints: &Keypoints, cfg: &PemConfig) -> Vec<ExclusionZone> {
    let iod = keypoints.inter_ocular();
    keypoints
        .named()
        .into_iter()
        .map(|(name, center)| {
            let factor = match name {
                "left_eye_outer" | "right_eye_outer" => cfg.eye_radius,
                "nose_tip" => cfg.nose_radius,
                "mouth_left" | "mouth_right" => cfg.mouth_radius,
                _ => cfg.chin_radius,
            };
            ExclusionZone {
                keypoint: name,
                disc: Disc {
                    center,
                    radius: factor * iod,
                },
            }
        })
        .collect()
}

fn cheek_center(eye: Point, mouth: Point, nose: Point, offset: f64) -> Point {
    let mid = eye.midpoint(mouth);
    let (dx, dy) = (mid.x - nose.x, mid.y - nose.y);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return mid;
    }
    Point::new(mid.x + offset * dx / len, mid.y + offset * dy / len)
}

/// Left cheek, right cheek and chin windows, in that order. Fails closed if
/// any window leaves the image or touches an exclusion zone.
pub fn candidate_regions(keypoints: &Keypoints, width: usize, height: usize, cfg: &PemConfig) -> Result<[PatchRegion; 3], PemError> {
    let iod = keypoints.inter_ocular();
    if !(iod > 0.0) {
        return Err(PemError::Geometry(format!("inter-ocular distance is {iod}")));
    }
    let offset = cfg.cheek_offset * iod;
    let half_extent = cfg.half_extent * iod;
    let mouth_mid = keypoints.mouth_left.midpoint(keypoints.mouth_right);
    let centers = [
        cheek_center(keypoints.left_eye_outer, keypoints.mouth_left, keypoints.nose_tip, offset),
        cheek_center(keypoints.right_eye_outer, keypoints.mouth_right, keypoints.nose_tip, offset),
        mouth_mid.lerp(keypoints.chin_bottom, cfg.chin_fraction),
    ];
    let zones = exclusion_zones(keypoints, cfg);
    let mut out = [PatchRegion {
        center: Point::new(0.0, 0.0),
        half_extent,
        region_id: RegionId::LeftCheek,
        jitter_offset: (0, 0),
    }; 3];
    for ((slot, center), region_id) in out.iter_mut().zip(centers).zip(RegionId::ALL) {
        let region = PatchRegion {
            center,
            half_extent,
            region_id,
            jitter_offset: (0, 0),
        };
        if !region.in_bounds(width, height) {
            return Err(PemError::Infeasible {
                region: region_id,
                reason: format!("window around ({:.1}, {:.1}) leaves the {width}x{height} image", center.x, center.y),
            });
        }
        if let Some(zone) = region.first_overlap(&zones) {
            return Err(PemError::Infeasible {
                region: region_id,
                reason: format!("window touches the {} exclusion zone", zone.keypoint),
            });
        }
        *slot = region;
    }
    Ok(out)
}

/// Shifts the region by integer offsets drawn from `[-max_shift, max_shift]^2`,
/// redrawing until the shifted window is valid. Gives back the unshifted
/// region after `max_attempts` failures.
pub fn jitter<R: Rng + ?Sized>(
    region: &PatchRegion,
    zones: &[ExclusionZone],
    width: usize,
    height: usize,
    rng: &mut R,
    max_shift: i32,
    max_attempts: usize,
) -> PatchRegion {
    if max_shift <= 0 {
        return *region;
    }
    for _ in 0..max_attempts {
        let dx = rng.gen_range(-max_shift..=max_shift);
        let dy = rng.gen_range(-max_shift..=max_shift);
        let shifted = PatchRegion {
            center: Point::new(region.center.x + dx as f64, region.center.y + dy as f64),
            jitter_offset: (region.jitter_offset.0 + dx, region.jitter_offset.1 + dy),
            ..*region
        };
        if shifted.is_valid(zones, width, height) {
            return shifted;
        }
    }
    warn!(
        "{:?}: no valid shift within {max_attempts} attempts, keeping the unshifted window",
        region.region_id
    );
    *region
}
