//! Patch extraction: aligns a face from six keypoints, builds the left-cheek,
//! right-cheek and chin regions, keeps them clear of discs around every
//! keypoint, jitters them and resamples the chosen windows into patches.
//!
//! Everything here is a pure function of the inputs and the seed.

mod align;
mod extract;
mod geometry;
mod regions;
pub mod synthetic;

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use align::{align, aligned_keypoints, bilinear_sample};
use align::alignment_map;
pub use extract::extract;
use extract::extract_mapped;
pub use geometry::{Disc, Point, Square};
pub use regions::{candidate_regions, exclusion_zones, jitter, ExclusionZone};

use crate::nn::{w32, NnError, Shape, Tensor};

#[derive(Debug, Error)]
pub enum PemError {
    #[error("degenerate geometry: {0}")]
    Geometry(String),
    #[error("{region:?} region is infeasible: {reason}")]
    Infeasible { region: RegionId, reason: String },
    #[error("k must be 1, 2 or 3, got {0}")]
    InvalidK(usize),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("keypoints: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// The six landmarks the geometry is derived from. Left/right are image-left
/// and image-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoints {
    pub left_eye_outer: Point,
    pub right_eye_outer: Point,
    pub nose_tip: Point,
    pub mouth_left: Point,
    pub mouth_right: Point,
    pub chin_bottom: Point,
}

impl Keypoints {
    pub fn inter_ocular(&self) -> f64 {
        self.left_eye_outer.distance(self.right_eye_outer)
    }

    pub fn named(&self) -> [(&'static str, Point); 6] {
        [
            ("left_eye_outer", self.left_eye_outer),
            ("right_eye_outer", self.right_eye_outer),
            ("nose_tip", self.nose_tip),
            ("mouth_left", self.mouth_left),
            ("mouth_right", self.mouth_right),
            ("chin_bottom", self.chin_bottom),
        ]
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Keypoints {
        Keypoints {
            left_eye_outer: f(self.left_eye_outer),
            right_eye_outer: f(self.right_eye_outer),
            nose_tip: f(self.nose_tip),
            mouth_left: f(self.mouth_left),
            mouth_right: f(self.mouth_right),
            chin_bottom: f(self.chin_bottom),
        }
    }

    /// Checks the inter-ocular distance is positive and every point lies within `width x height`.
    pub fn validate(&self, width: usize, height: usize) -> Result<(), PemError> {
        let iod = self.inter_ocular();
        if !(iod > 0.0 && iod.is_finite()) {
            return Err(PemError::Geometry(format!("inter-ocular distance is {iod}")));
        }
        for (name, p) in self.named() {
            if !p.is_finite() || p.x < 0.0 || p.y < 0.0 || p.x > width as f64 || p.y > height as f64 {
                return Err(PemError::Geometry(format!("{name} ({}, {}) outside {width}x{height} image", p.x, p.y)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Keypoints, PemError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Keypoints, PemError> {
        let text = fs::read_to_string(path).map_err(|e| PemError::Io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceRecord {
    /// `[1,3,H,W]`, values in `[0,1]`.
    pub image: Tensor,
    pub keypoints: Keypoints,
    pub source_id: String,
}

impl FaceRecord {
    pub fn new(image: Tensor, keypoints: Keypoints, source_id: impl Into<String>) -> Result<Self, PemError> {
        let record = FaceRecord {
            image,
            keypoints,
            source_id: source_id.into(),
        };
        record.validate()?;
        Ok(record)
    }

    pub fn width(&self) -> usize {
        self.image.shape().w()
    }

    pub fn height(&self) -> usize {
        self.image.shape().h()
    }

    pub fn validate(&self) -> Result<(), PemError> {
        let s = self.image.shape();
        if s.n() != 1 || s.c() != 3 {
            return Err(PemError::Geometry(format!("face image must be 1x3xHxW, got {s}")));
        }
        self.keypoints.validate(self.width(), self.height())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionId {
    LeftCheek,
    RightCheek,
    Chin,
}

impl RegionId {
    pub const ALL: [RegionId; 3] = [RegionId::LeftCheek, RegionId::RightCheek, RegionId::Chin];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchRegion {
    pub center: Point,
    pub half_extent: f64,
    pub region_id: RegionId,
    /// Integer displacement applied by [`jitter`]; `(0, 0)` for candidate regions.
    pub jitter_offset: (i32, i32),
}

impl PatchRegion {
    pub fn square(&self) -> Square {
        Square {
            center: self.center,
            half_extent: self.half_extent,
        }
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.square().inside(width, height)
    }

    /// First zone the window touches, if any.
    pub fn first_overlap<'a>(&self, zones: &'a [ExclusionZone]) -> Option<&'a ExclusionZone> {
        let sq = self.square();
        zones.iter().find(|z| sq.intersects(&z.disc))
    }

    pub fn is_valid(&self, zones: &[ExclusionZone], width: usize, height: usize) -> bool {
        self.in_bounds(width, height) && self.first_overlap(zones).is_none()
    }
}

/// Geometry constants, all in units of the inter-ocular distance unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PemConfig {
    /// Inter-ocular distance after alignment, in pixels.
    pub target_inter_ocular: f64,
    pub cheek_offset: f64,
    pub half_extent: f64,
    /// How far from the mouth midpoint toward the chin the chin window sits.
    pub chin_fraction: f64,
    pub eye_radius: f64,
    pub nose_radius: f64,
    pub mouth_radius: f64,
    pub chin_radius: f64,
    pub max_shift: f64,
    pub max_jitter_attempts: usize,
    /// Patch side length in pixels.
    pub patch_size: usize,
}

impl Default for PemConfig {
    fn default() -> Self {
        PemConfig {
            target_inter_ocular: 96.0,
            cheek_offset: 0.25,
            half_extent: 0.22,
            chin_fraction: 0.6,
            eye_radius: 0.35,
            nose_radius: 0.30,
            mouth_radius: 0.30,
            chin_radius: 0.20,
            max_shift: 0.08,
            max_jitter_attempts: 32,
            patch_size: 64,
        }
    }
}

impl PemConfig {
    /// Jitter bound in whole pixels for a face with the given inter-ocular distance.
    pub fn max_shift_px(&self, inter_ocular: f64) -> i32 {
        (self.max_shift * inter_ocular).floor().max(0.0) as i32
    }
}

/// Extracted skin patches with the windows they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// Each `[1,3,S,S]`.
    pub patches: Vec<Tensor>,
    /// One per patch when produced by [`select_patches`]; empty for patch sets
    /// rebuilt from raw pixels (for example off the wire).
    pub regions: Vec<PatchRegion>,
    pub seed: u64,
}

impl PatchSet {
    pub fn from_patches(patches: Vec<Tensor>) -> Self {
        PatchSet {
            patches,
            regions: Vec::new(),
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_size(&self) -> Option<usize> {
        self.patches.first().map(|p| p.shape().h())
    }

    pub fn to_w32(&self) -> Result<Vec<u8>, NnError> {
        let names: Vec<String> = (0..self.patches.len()).map(|i| format!("patch{i}")).collect();
        w32::encode(names.iter().map(String::as_str).zip(&self.patches))
    }

    /// Reads patches written by [`Self::to_w32`]; provenance is not stored in the tensor file.
    pub fn from_w32(bytes: &[u8]) -> Result<Self, NnError> {
        let entries = w32::decode(bytes)?;
        let mut patches = Vec::with_capacity(entries.len());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != format!("patch{i}") {
                return Err(NnError::Format(format!("entry {i} is named {name:?}, expected patch{i}")));
            }
            let s = t.shape();
            if s.n() != 1 || s.c() != 3 || s.h() != s.w() {
                return Err(NnError::Format(format!("patch{i} has shape {s}, expected 1x3xSxS")));
            }
            patches.push(t);
        }
        if patches.windows(2).any(|w| w[0].shape() != w[1].shape()) {
            return Err(NnError::Format("patches differ in size".into()));
        }
        Ok(PatchSet::from_patches(patches))
    }
}

/// Draws `k` distinct regions uniformly, jitters and extracts each.
///
/// `record` must already be aligned.
pub fn select_patches(record: &FaceRecord, k: usize, cfg: &PemConfig, seed: u64) -> Result<PatchSet, PemError> {
    select_with(&record.keypoints, record.width(), record.height(), k, cfg, seed, |r| {
        extract(&record.image, r, cfg.patch_size)
    })
}

/// Aligns and extracts in one call. Patch pixels are read from the unaligned
/// image through the inverse alignment, so each is interpolated once.
pub fn extract_face(record: &FaceRecord, k: usize, cfg: &PemConfig, seed: u64) -> Result<PatchSet, PemError> {
    let (keypoints, to_image) = alignment_map(record, cfg)?;
    select_with(&keypoints, record.width(), record.height(), k, cfg, seed, |r| {
        extract_mapped(&record.image, r, cfg.patch_size, &to_image)
    })
}

/// Region choice and jitter on an aligned `w x h` frame; `sample` turns each
/// final window into a patch.
fn select_with(
    keypoints: &Keypoints,
    w: usize,
    h: usize,
    k: usize,
    cfg: &PemConfig,
    seed: u64,
    sample: impl Fn(&PatchRegion) -> Tensor,
) -> Result<PatchSet, PemError> {
    if !(1..=3).contains(&k) {
        return Err(PemError::InvalidK(k));
    }
    let zones = exclusion_zones(keypoints, cfg);
    let candidates = candidate_regions(keypoints, w, h, cfg)?;
    let max_shift = cfg.max_shift_px(keypoints.inter_ocular());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, candidates.len(), k).into_vec();
    let mut patches = Vec::with_capacity(k);
    let mut regions = Vec::with_capacity(k);
    for i in picks {
        let region = jitter(&candidates[i], &zones, w, h, &mut rng, max_shift, cfg.max_jitter_attempts);
        patches.push(sample(&region));
        regions.push(region);
    }
    Ok(PatchSet { patches, regions, seed })
}

/// Extent of an `[1,3,S,S]` patch.
pub fn patch_shape(size: usize) -> Shape {
    Shape::new(1, 3, size, size)
}
