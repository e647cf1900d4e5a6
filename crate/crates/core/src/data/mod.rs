//! Synthetic bona-fide / attack patch corpus, its on-disk manifest, minibatch
//! shuffling and training-time augmentation.

pub mod augment;
mod manifest;
mod synth;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::augment;
pub use manifest::{load_dataset, load_manifest, DatasetManifest, SampleRecord, MANIFEST_FILE, META_FILE};
pub use synth::{attack_sample, bona_fide_patch, synth_generate, synth_samples, SynthConfig, PATCHES_PER_SAMPLE};

use crate::model::{Label, ModelError};
use crate::nn::{NnError, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Invalid(String),
    #[error("record {record}: {source}")]
    Record {
        record: String,
        #[source]
        source: Box<DataError>,
    },
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackType {
    None,
    PrintHalftone,
    ScreenMoire,
    RecaptureBlur,
}

impl AttackType {
    pub const ATTACKS: [AttackType; 3] = [AttackType::PrintHalftone, AttackType::ScreenMoire, AttackType::RecaptureBlur];

    pub fn label(self) -> Label {
        match self {
            AttackType::None => Label::BonaFide,
            _ => Label::Attack,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackType::None => "None",
            AttackType::PrintHalftone => "PrintHalftone",
            AttackType::ScreenMoire => "ScreenMoire",
            AttackType::RecaptureBlur => "RecaptureBlur",
        }
    }
}

/// One presentation: `k` stored `[1,3,S,S]` patches and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patches: Vec<Tensor>,
    pub label: Label,
    pub attack_type: AttackType,
}

/// In-memory labelled patch sets sharing one patch size.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub patch_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// Stacks the chosen patches into one `[B,3,S,S]` tensor per branch:
    /// branch `b` receives patch `slots[i][b]` of sample `indices[i]`.
    pub fn branch_inputs(&self, indices: &[usize], slots: &[Vec<usize>]) -> Result<Vec<Tensor>, ModelError> {
        let k = slots.first().map_or(0, Vec::len);
        (0..k)
            .map(|b| {
                let items: Vec<&Tensor> = indices
                    .iter()
                    .zip(slots)
                    .map(|(&i, s)| {
                        let sample = &self.samples[i];
                        sample.patches.get(s[b]).ok_or(ModelError::Arity {
                            expected: s[b] + 1,
                            actual: sample.patches.len(),
                        })
                    })
                    .collect::<Result<_, _>>()?;
                Ok(Tensor::stack(&items)?)
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            patch_size: self.patch_size,
        }
    }

    /// Stratified split into train / validation / test by per-class shuffling.
    ///
    /// `train` and `val` are fractions; the test part takes the remainder.
    pub fn split(&self, train: f64, val: f64, seed: u64) -> (Dataset, Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
        for label in [Label::BonaFide, Label::Attack] {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.samples[i].label == label).collect();
            idx.shuffle(&mut rng);
            let n_train = (idx.len() as f64 * train).round() as usize;
            let n_val = ((idx.len() as f64 * val).round() as usize).min(idx.len() - n_train);
            tr.extend_from_slice(&idx[..n_train]);
            va.extend_from_slice(&idx[n_train..n_train + n_val]);
            te.extend_from_slice(&idx[n_train + n_val..]);
        }
        for part in [&mut tr, &mut va, &mut te] {
            part.sort_unstable();
        }
        (self.subset(&tr), self.subset(&va), self.subset(&te))
    }
}

/// SplitMix64 finalizer of `master + (index + 1) * golden`; decorrelates per-item seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Epoch shuffle of `0..n` cut into batches of `batch_size`; the last batch may be short.
pub fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
