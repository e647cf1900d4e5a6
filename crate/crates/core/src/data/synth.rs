//! Texture generator standing in for real presentation-attack captures.
//!
//! Bona fide: smooth low-frequency skin-tone field plus fine Gaussian grain.
//! Print: the same base under a rotated halftone dot lattice.
//! Screen: the base modulated by two slightly rotated interfering gratings.
//! Recapture: the base Gaussian-blurred and contrast-compressed.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{derive_seed, AttackType, DataError, DatasetManifest, Sample, SampleRecord};
use crate::nn::{Shape, Tensor};
use crate::pem::PatchSet;

/// Patches stored per sample so every branch arity can draw from one corpus.
pub const PATCHES_PER_SAMPLE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"skinpatch-synth-v1");
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Tone {
    rgb: [f64; 3],
    grain: f64,
}

fn draw_tone<R: Rng + ?Sized>(rng: &mut R) -> Tone {
    let base = rng.gen_range(0.45..0.85);
    Tone {
        rgb: [base, base * rng.gen_range(0.7..0.85), base * rng.gen_range(0.55..0.75)],
        grain: rng.gen_range(0.015..0.03),
    }
}

/// `[3][S*S]` planes of a smooth field with fine grain.
fn base_planes<R: Rng + ?Sized>(tone: &Tone, size: usize, rng: &mut R) -> [Vec<f64>; 3] {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.02..0.06),
            )
        })
        .collect();
    let grain = Normal::new(0.0, tone.grain).expect("positive sigma");
    let chroma = Normal::new(0.0, tone.grain * 0.3).expect("positive sigma");
    let s = size as f64;
    let mut planes = [vec![0.0; size * size], vec![0.0; size * size], vec![0.0; size * size]];
    for y in 0..size {
        for x in 0..size {
            let shade: f64 = 1.0
                + waves
                    .iter()
                    .map(|&(fx, fy, ph, amp)| amp * (2.0 * PI * (fx * x as f64 + fy * y as f64) / s + ph).sin())
                    .sum::<f64>();
            let g = grain.sample(rng);
            for (c, plane) in planes.iter_mut().enumerate() {
                plane[y * size + x] = tone.rgb[c] * shade + g + chroma.sample(rng);
            }
        }
    }
    planes
}

fn rotated(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (sin, cos) = angle.sin_cos();
    (cos * x + sin * y, -sin * x + cos * y)
}

fn halftone<R: Rng + ?Sized>(planes: &mut [Vec<f64>; 3], size: usize, rng: &mut R) {
    let period = rng.gen_range(3.0..6.0);
    let angle = rng.gen_range(0.0..PI / 2.0);
    let depth = rng.gen_range(0.15..0.3);
    let (px, py) = (rng.gen_range(0.0..period), rng.gen_range(0.0..period));
    for y in 0..size {
        for x in 0..size {
            let (u, v) = rotated(x as f64 + px, y as f64 + py, angle);
            let dot = 0.25 * (1.0 + (2.0 * PI * u / period).cos()) * (1.0 + (2.0 * PI * v / period).cos());
            for plane in planes.iter_mut() {
                plane[y * size + x] *= 1.0 - depth * dot;
            }
        }
    }
}

fn moire<R: Rng + ?Sized>(planes: &mut [Vec<f64>; 3], size: usize, rng: &mut R) {
    let p1 = rng.gen_range(4.0..9.0);
    let p2 = rng.gen_range(4.0..9.0);
    let a1 = rng.gen_range(0.0..PI);
    let a2 = a1 + rng.gen_range(5.0f64..20.0).to_radians() * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let (ph1, ph2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let amp = rng.gen_range(0.06..0.15);
    for y in 0..size {
        for x in 0..size {
            let (u1, _) = rotated(x as f64, y as f64, a1);
            let (u2, _) = rotated(x as f64, y as f64, a2);
            let g = (2.0 * PI * u1 / p1 + ph1).sin() + (2.0 * PI * u2 / p2 + ph2).sin();
            for plane in planes.iter_mut() {
                plane[y * size + x] += amp * 0.5 * g;
            }
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

fn blur(plane: &[f64], size: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * plane[y * size + reflect(x as isize + k as isize - r, size)])
                .sum();
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[reflect(y as isize + k as isize - r, size) * size + x])
                .sum();
        }
    }
    out
}

fn recapture<R: Rng + ?Sized>(planes: &mut [Vec<f64>; 3], size: usize, rng: &mut R) {
    let sigma = rng.gen_range(1.0..2.0);
    let contrast = rng.gen_range(0.6..0.85);
    let kernel = gaussian_kernel(sigma);
    for plane in planes.iter_mut() {
        let blurred = blur(plane, size, &kernel);
        let mean = blurred.iter().sum::<f64>() / blurred.len() as f64;
        *plane = blurred.into_iter().map(|v| mean + contrast * (v - mean)).collect();
    }
}

fn to_tensor(planes: [Vec<f64>; 3], size: usize) -> Tensor {
    let data = planes.into_iter().flatten().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::new(Shape::new(1, 3, size, size), data).expect("3 planes of S*S")
}

/// One bona-fide patch with a fresh tone.
pub fn bona_fide_patch<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    let tone = draw_tone(rng);
    to_tensor(base_planes(&tone, size, rng), size)
}

/// Generates the `k` patches of one presentation from its own seed. The
/// patches share a skin tone; attack parameters are drawn per patch.
pub fn attack_sample(attack: AttackType, size: usize, k: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tone = draw_tone(&mut rng);
    (0..k)
        .map(|_| {
            let mut planes = base_planes(&tone, size, &mut rng);
            match attack {
                AttackType::None => {}
                AttackType::PrintHalftone => halftone(&mut planes, size, &mut rng),
                AttackType::ScreenMoire => moire(&mut planes, size, &mut rng),
                AttackType::RecaptureBlur => recapture(&mut planes, size, &mut rng),
            }
            to_tensor(planes, size)
        })
        .collect()
}

/// Sample `j` of a corpus: index `j` cycles through bona fide and the three attack types.
fn sample_kind(j: usize) -> AttackType {
    match j % 4 {
        0 => AttackType::None,
        1 => AttackType::PrintHalftone,
        2 => AttackType::ScreenMoire,
        _ => AttackType::RecaptureBlur,
    }
}

/// Generates `n_per_class` bona-fide samples and `n_per_class` of each attack
/// type in memory.
pub fn synth_samples(cfg: &SynthConfig) -> Vec<(SampleRecord, Sample)> {
    (0..4 * cfg.n_per_class)
        .map(|j| {
            let attack_type = sample_kind(j);
            let seed = derive_seed(cfg.seed, j as u64);
            let patches = attack_sample(attack_type, cfg.patch_size, PATCHES_PER_SAMPLE, seed);
            let record = SampleRecord {
                patchset: format!("patches/{j:06}.w32").into(),
                label: attack_type.label(),
                attack_type,
                seed,
            };
            let sample = Sample {
                patches,
                label: attack_type.label(),
                attack_type,
            };
            (record, sample)
        })
        .collect()
}

/// Writes a corpus under `out_dir`: `patches/*.w32`, `manifest.jsonl` and `meta.json`.
pub fn synth_generate(out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest, DataError> {
    if cfg.n_per_class == 0 {
        return Err(DataError::Invalid("n_per_class must be at least 1".into()));
    }
    if cfg.patch_size == 0 {
        return Err(DataError::Invalid("patch size must be positive".into()));
    }
    let patch_dir = out_dir.join("patches");
    fs::create_dir_all(&patch_dir).map_err(|e| DataError::Io(patch_dir.display().to_string(), e))?;
    let mut records = Vec::with_capacity(4 * cfg.n_per_class);
    for (record, sample) in synth_samples(cfg) {
        let path = out_dir.join(&record.patchset);
        let bytes = PatchSet::from_patches(sample.patches).to_w32()?;
        fs::write(&path, bytes).map_err(|e| DataError::Io(path.display().to_string(), e))?;
        records.push(record);
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
        patch_size: cfg.patch_size,
        generator_digest: cfg.digest(),
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mean absolute 4-neighbour Laplacian over all channels.
    fn laplacian_energy(t: &Tensor) -> f64 {
        let [_, c, h, w] = t.shape().0;
        let mut sum = 0.0;
        let mut n = 0;
        for ch in 0..c {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let v = |yy: usize, xx: usize| t.at(0, ch, yy, xx) as f64;
                    sum += (v(y - 1, x) + v(y + 1, x) + v(y, x - 1) + v(y, x + 1) - 4.0 * v(y, x)).abs();
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    #[test]
    fn moire_is_sharper_than_recapture() {
        let n = 200;
        let mut wins = 0;
        for i in 0..n {
            let m = attack_sample(AttackType::ScreenMoire, 32, 1, derive_seed(1, i));
            let b = attack_sample(AttackType::RecaptureBlur, 32, 1, derive_seed(2, i));
            if laplacian_energy(&m[0]) > laplacian_energy(&b[0]) {
                wins += 1;
            }
        }
        assert!(wins * 100 >= 95 * n as usize, "{wins}/{n}");
    }

    #[test]
    fn patches_are_finite_and_in_range() {
        for attack in [AttackType::None, AttackType::PrintHalftone, AttackType::ScreenMoire, AttackType::RecaptureBlur] {
            for seed in 0..10 {
                for p in attack_sample(attack, 16, 3, seed) {
                    assert!(p.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
                }
            }
        }
    }

    #[test]
    fn sample_generation_is_seeded() {
        let a = attack_sample(AttackType::ScreenMoire, 16, 3, 77);
        let b = attack_sample(AttackType::ScreenMoire, 16, 3, 77);
        let c = attack_sample(AttackType::ScreenMoire, 16, 3, 78);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn class_counts() {
        let cfg = SynthConfig {
            n_per_class: 100,
            patch_size: 4,
            seed: 3,
        };
        let samples = synth_samples(&cfg);
        let bona = samples.iter().filter(|(r, _)| r.attack_type == AttackType::None).count();
        assert_eq!(bona, 100);
        assert_eq!(samples.len() - bona, 300);
        for a in AttackType::ATTACKS {
            assert_eq!(samples.iter().filter(|(r, _)| r.attack_type == a).count(), 100);
        }
    }

    #[test]
    fn digest_tracks_config() {
        let a = SynthConfig {
            n_per_class: 1,
            patch_size: 8,
            seed: 0,
        };
        let b = SynthConfig { seed: 1, ..a.clone() };
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
    }
}
