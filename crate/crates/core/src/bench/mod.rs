//! Latency comparison of the two ways to get a face to the server: sealing the
//! whole image with AES-256-GCM, or sending only skin patches in the clear.
//!
//! Transmission is modelled from payload size; encryption, decryption and
//! inference are measured, or replayed from a fixed table.

mod crypto;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crypto::{decrypt, encrypt, CipherPayload, NonceLadder, KEY_LEN, NONCE_LEN, TAG_LEN};

use crate::imageio::{dequantize, quantize};
use crate::model::{ModelError, Scorer};
use crate::nn::{Shape, Tensor};
use crate::pem::PatchSet;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("authentication failed")]
    Authentication,
    #[error("malformed payload: {0}")]
    Format(String),
    #[error("nonce reused under the same key")]
    NonceReuse,
    #[error("nonce counter exhausted")]
    NonceExhausted,
    #[error("invalid latency breakdown: {0}")]
    Breakdown(String),
    #[error("ratio undefined: traditional total is zero")]
    UndefinedRatio,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("fixture: {0}")]
    Json(#[from] serde_json::Error),
}

/// Side length of the face crop sent on the traditional path.
pub const FACE_SIZE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub rtt_ms: f64,
    pub bandwidth_bytes_per_ms: f64,
}

impl ChannelConfig {
    pub fn new(rtt_ms: f64, bandwidth_bytes_per_ms: f64) -> Result<Self, BenchError> {
        if !(rtt_ms >= 0.0 && rtt_ms.is_finite()) {
            return Err(BenchError::Param(format!("rtt_ms must be finite and non-negative, got {rtt_ms}")));
        }
        if !(bandwidth_bytes_per_ms > 0.0 && bandwidth_bytes_per_ms.is_finite()) {
            return Err(BenchError::Param(format!("bandwidth must be positive, got {bandwidth_bytes_per_ms}")));
        }
        Ok(ChannelConfig {
            rtt_ms,
            bandwidth_bytes_per_ms,
        })
    }
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            rtt_ms: 3.0,
            bandwidth_bytes_per_ms: 1_000.0,
        }
    }
}

/// `rtt + bytes / bandwidth`, in milliseconds.
pub fn simulate_transmission(payload_bytes: usize, ch: &ChannelConfig) -> f64 {
    ch.rtt_ms + payload_bytes as f64 / ch.bandwidth_bytes_per_ms
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Traditional,
    PatchPath,
}

/// Per-stage durations in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimes {
    pub t_trans: f64,
    pub t_encry: f64,
    pub t_decry: f64,
    pub t_infer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyBreakdown {
    pub mode: Mode,
    pub t_trans_ms: f64,
    pub t_encry_ms: f64,
    pub t_decry_ms: f64,
    pub t_infer_ms: f64,
    pub t_total_ms: f64,
}

impl LatencyBreakdown {
    /// Sums the stages into the total. Rejects negative or non-finite stages,
    /// and any crypto time on the patch path.
    pub fn new(mode: Mode, stages: StageTimes) -> Result<Self, BenchError> {
        let parts = [stages.t_trans, stages.t_encry, stages.t_decry, stages.t_infer];
        if parts.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(BenchError::Breakdown(format!("stage times must be finite and non-negative: {parts:?}")));
        }
        if mode == Mode::PatchPath && (stages.t_encry != 0.0 || stages.t_decry != 0.0) {
            return Err(BenchError::Breakdown("the patch path performs no encryption or decryption".into()));
        }
        Ok(LatencyBreakdown {
            mode,
            t_trans_ms: stages.t_trans,
            t_encry_ms: stages.t_encry,
            t_decry_ms: stages.t_decry,
            t_infer_ms: stages.t_infer,
            t_total_ms: stages.t_trans + stages.t_encry + stages.t_decry + stages.t_infer,
        })
    }

    pub fn stages(&self) -> StageTimes {
        StageTimes {
            t_trans: self.t_trans_ms,
            t_encry: self.t_encry_ms,
            t_decry: self.t_decry_ms,
            t_infer: self.t_infer_ms,
        }
    }
}

/// Both rows of a replayable latency table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyFixture {
    pub traditional: StageTimes,
    pub ours: StageTimes,
}

impl LatencyFixture {
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path).map_err(|e| BenchError::Io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Replays both rows through the pipeline with a fixed timing source.
    pub fn replay(&self) -> Result<ComparisonReport, BenchError> {
        let traditional = replay(Mode::Traditional, &TimingSource::Fixed(*self))?;
        let ours = replay(Mode::PatchPath, &TimingSource::Fixed(*self))?;
        compare(&traditional, &ours)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimingSource {
    /// Measure crypto and inference; model transmission from payload size.
    WallClock,
    /// Report the stored stage times instead of running the stages.
    Fixed(LatencyFixture),
}

fn replay(mode: Mode, timing: &TimingSource) -> Result<LatencyBreakdown, BenchError> {
    match timing {
        TimingSource::Fixed(f) => LatencyBreakdown::new(
            mode,
            match mode {
                Mode::Traditional => f.traditional,
                Mode::PatchPath => f.ours,
            },
        ),
        TimingSource::WallClock => Err(BenchError::Param("replay needs a fixed timing source".into())),
    }
}

/// 8-bit CHW bytes of a `[1,3,H,W]` tensor.
pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|&v| quantize(v)).collect()
}

/// The bytes a patch-only client sends: each patch's 8-bit pixels in order.
pub fn patch_payload(patches: &PatchSet) -> Vec<u8> {
    patches.patches.iter().flat_map(|p| tensor_bytes(p)).collect()
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Owns the key, the nonce ladder and the model for a sequence of runs.
pub struct Pipeline<'a> {
    model: &'a (dyn Scorer + Sync),
    channel: ChannelConfig,
    key: [u8; KEY_LEN],
    nonces: NonceLadder,
}

impl<'a> Pipeline<'a> {
    pub fn new(model: &'a (dyn Scorer + Sync), channel: ChannelConfig, key: [u8; KEY_LEN]) -> Self {
        Pipeline {
            model,
            channel,
            key,
            nonces: NonceLadder::new(*b"SPFB"),
        }
    }

    /// Registers a nonce used outside the ladder; fails if the ladder or a
    /// previous call already used it.
    pub fn claim_nonce(&mut self, nonce: [u8; NONCE_LEN]) -> Result<(), BenchError> {
        self.nonces.claim(nonce)
    }

    fn infer(&self, patches: &PatchSet) -> Result<f64, BenchError> {
        let start = Instant::now();
        let scores = self.model.score_batch(&patches.patches)?;
        std::hint::black_box(scores);
        Ok(elapsed_ms(start))
    }

    /// Traditional: quantize the face, seal it, model the transfer of the
    /// ciphertext, open it, rebuild the tensor and score. Patch path: quantize
    /// the patches, model their transfer and score. Both paths score the same
    /// patches so only crypto and payload size differ.
    pub fn run(&mut self, mode: Mode, face: &Tensor, patches: &PatchSet, timing: &TimingSource) -> Result<LatencyBreakdown, BenchError> {
        if let TimingSource::Fixed(_) = timing {
            return replay(mode, timing);
        }
        let stages = match mode {
            Mode::Traditional => {
                let plain = tensor_bytes(face);
                let nonce = self.nonces.next_nonce()?;
                let start = Instant::now();
                let sealed = encrypt(&plain, &self.key, &nonce)?;
                let t_encry = elapsed_ms(start);
                let t_trans = simulate_transmission(sealed.wire_len(), &self.channel);
                let start = Instant::now();
                let opened = decrypt(&sealed, &self.key)?;
                let t_decry = elapsed_ms(start);
                let image = Tensor::new(face.shape(), opened.iter().map(|&b| dequantize(b)).collect())
                    .map_err(|e| BenchError::Format(e.to_string()))?;
                std::hint::black_box(image);
                StageTimes {
                    t_trans,
                    t_encry,
                    t_decry,
                    t_infer: self.infer(patches)?,
                }
            }
            Mode::PatchPath => StageTimes {
                t_trans: simulate_transmission(patch_payload(patches).len(), &self.channel),
                t_encry: 0.0,
                t_decry: 0.0,
                t_infer: self.infer(patches)?,
            },
        };
        LatencyBreakdown::new(mode, stages)
    }

    /// Alternates traditional and patch-path runs `trials` times on one
    /// dedicated thread and returns the pairs.
    pub fn run_trials(&mut self, trials: usize, face: &Tensor, patches: &PatchSet) -> Result<Vec<(LatencyBreakdown, LatencyBreakdown)>, BenchError> {
        std::thread::scope(|s| {
            s.spawn(|| {
                (0..trials)
                    .map(|_| {
                        let t = self.run(Mode::Traditional, face, patches, &TimingSource::WallClock)?;
                        let p = self.run(Mode::PatchPath, face, patches, &TimingSource::WallClock)?;
                        Ok((t, p))
                    })
                    .collect()
            })
            .join()
            .expect("timing thread panicked")
        })
    }
}

/// A mid-grey `[1,3,224,224]` face crop for the traditional path.
pub fn face_placeholder() -> Tensor {
    Tensor::full(Shape::new(1, 3, FACE_SIZE, FACE_SIZE), 0.5)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Stage-wise median over runs of a single mode.
pub fn median_breakdown(runs: &[LatencyBreakdown]) -> Result<LatencyBreakdown, BenchError> {
    let Some(first) = runs.first() else {
        return Err(BenchError::Param("no runs to summarize".into()));
    };
    if runs.iter().any(|r| r.mode != first.mode) {
        return Err(BenchError::Param("runs mix modes".into()));
    }
    let stage = |f: fn(&LatencyBreakdown) -> f64| median(runs.iter().map(f).collect());
    LatencyBreakdown::new(
        first.mode,
        StageTimes {
            t_trans: stage(|r| r.t_trans_ms),
            t_encry: stage(|r| r.t_encry_ms),
            t_decry: stage(|r| r.t_decry_ms),
            t_infer: stage(|r| r.t_infer_ms),
        },
    )
}

/// Outcome of repeated wall-clock trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiveSummary {
    pub trials: usize,
    /// Trials in which the patch path finished first.
    pub patch_faster: usize,
    /// Comparison of the stage-wise medians.
    pub median: ComparisonReport,
}

pub fn summarize(pairs: &[(LatencyBreakdown, LatencyBreakdown)]) -> Result<LiveSummary, BenchError> {
    let (trad, patch): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
    Ok(LiveSummary {
        trials: pairs.len(),
        patch_faster: pairs.iter().filter(|(t, p)| p.t_total_ms < t.t_total_ms).count(),
        median: compare(&median_breakdown(&trad)?, &median_breakdown(&patch)?)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub traditional: LatencyBreakdown,
    pub patch: LatencyBreakdown,
    /// `patch.total / traditional.total`.
    pub ratio: f64,
    /// Patch minus traditional, per stage.
    pub deltas: StageTimes,
    /// `(encrypt + decrypt) / total` on the traditional path.
    pub crypto_share: f64,
}

pub fn compare(traditional: &LatencyBreakdown, patch: &LatencyBreakdown) -> Result<ComparisonReport, BenchError> {
    if traditional.t_total_ms == 0.0 {
        return Err(BenchError::UndefinedRatio);
    }
    let (t, p) = (traditional.stages(), patch.stages());
    Ok(ComparisonReport {
        traditional: *traditional,
        patch: *patch,
        ratio: patch.t_total_ms / traditional.t_total_ms,
        deltas: StageTimes {
            t_trans: p.t_trans - t.t_trans,
            t_encry: p.t_encry - t.t_encry,
            t_decry: p.t_decry - t.t_decry,
            t_infer: p.t_infer - t.t_infer,
        },
        crypto_share: (traditional.t_encry_ms + traditional.t_decry_ms) / traditional.t_total_ms,
    })
}

impl ComparisonReport {
    /// Fixed-width table of both rows, all times in ms.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>12} {:>9} {:>9} {:>10} {:>9}",
            "method", "transmission", "encry", "decry", "inference", "total"
        );
        for (name, b) in [("traditional", &self.traditional), ("ours", &self.patch)] {
            let _ = writeln!(
                out,
                "{:<12} {:>12.2} {:>9.2} {:>9.2} {:>10.2} {:>9.2}",
                name, b.t_trans_ms, b.t_encry_ms, b.t_decry_ms, b.t_infer_ms, b.t_total_ms
            );
        }
        let _ = writeln!(
            out,
            "ratio {:.1}% ({:.4}); encryption+decryption share of traditional {:.1}%",
            100.0 * self.ratio,
            self.ratio,
            100.0 * self.crypto_share
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
