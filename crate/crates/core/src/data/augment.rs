//! Random horizontal flip and per-channel brightness/contrast jitter.

use rand::Rng;

use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Per-channel gain in `[0.8, 1.2]`.
    pub gain: [f32; 3],
    /// Per-channel offset in `[-0.1, 0.1]`.
    pub offset: [f32; 3],
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        gain: [1.0; 3],
        offset: [0.0; 3],
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip = rng.gen_bool(0.5);
        let mut gain = [1.0; 3];
        let mut offset = [0.0; 3];
        for c in 0..3 {
            gain[c] = rng.gen_range(0.8..=1.2);
            offset[c] = rng.gen_range(-0.1..=0.1);
        }
        AugmentParams { flip, gain, offset }
    }
}

/// Applies `params` in place to every item of an `[N,3,H,W]` tensor:
/// optional mirror, then `clamp(gain * x + offset, 0, 1)` per channel.
pub fn apply(t: &mut Tensor, params: &AugmentParams) {
    let [n, c, h, w] = t.shape().0;
    let data = t.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let plane = &mut data[((i * c + ch) * h) * w..((i * c + ch + 1) * h) * w];
            if params.flip {
                for row in plane.chunks_mut(w) {
                    row.reverse();
                }
            }
            let (a, b) = (params.gain[ch % 3], params.offset[ch % 3]);
            if a != 1.0 || b != 0.0 {
                for v in plane.iter_mut() {
                    *v = (a * *v + b).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Augments a single `[1,3,S,S]` patch with freshly drawn parameters.
pub fn augment<R: Rng + ?Sized>(patch: &Tensor, rng: &mut R) -> Tensor {
    let mut out = patch.clone();
    apply(&mut out, &AugmentParams::sample(rng));
    out
}

/// Draws independent parameters for each item of a batch.
pub fn augment_batch<R: Rng + ?Sized>(batch: &mut Tensor, rng: &mut R) {
    let [n, c, h, w] = batch.shape().0;
    let per = c * h * w;
    for i in 0..n {
        let params = AugmentParams::sample(rng);
        let mut item = batch.item(i);
        apply(&mut item, &params);
        batch.data_mut()[i * per..(i + 1) * per].copy_from_slice(item.data());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, _, _, _| rng.gen_range(0.0..=1.0))
    }

    #[test]
    fn identity_params() {
        let p = patch(1);
        let mut q = p.clone();
        apply(&mut q, &AugmentParams::IDENTITY);
        assert_eq!(p, q);
    }

    #[test]
    fn double_flip_is_identity() {
        let p = patch(2);
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let mut q = p.clone();
        apply(&mut q, &flip);
        assert_ne!(p, q);
        assert_eq!(q.at(0, 1, 3, 0), p.at(0, 1, 3, 7));
        apply(&mut q, &flip);
        assert_eq!(p, q);
    }

    #[test]
    fn output_stays_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = patch(3);
        for _ in 0..10_000 {
            let q = augment(&p, &mut rng);
            assert!(q.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn parameters_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut flips = 0;
        for _ in 0..10_000 {
            let a = AugmentParams::sample(&mut rng);
            flips += a.flip as usize;
            assert!(a.gain.iter().all(|g| (0.8..=1.2).contains(g)));
            assert!(a.offset.iter().all(|o| (-0.1..=0.1).contains(o)));
        }
        assert!((4_700..5_300).contains(&flips));
    }
}
