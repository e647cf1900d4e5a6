use super::{DecisionConfig, Label, ModelError, Score};
use crate::data::Dataset;
use crate::metrics::{self, MetricsReport};
use crate::nn::Tensor;

/// Anything that maps per-branch patch batches to scores.
pub trait Scorer {
    fn branches(&self) -> usize;
    fn score_batch(&self, branch_inputs: &[Tensor]) -> Result<Vec<Score>, ModelError>;
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Raw per-sample scores, in dataset order, for threshold sweeps.
    pub pairs: Vec<(Score, Label)>,
}

const EVAL_BATCH: usize = 64;

/// Scores every sample of `dataset`, routing its first `k` stored patches to
/// the `k` branches, and reports metrics at `cfg.threshold`.
pub fn evaluate(scorer: &dyn Scorer, dataset: &Dataset, cfg: &DecisionConfig) -> Result<Evaluation, ModelError> {
    let pairs = score_all(scorer, dataset)?;
    let report = metrics::report(&pairs, cfg.threshold)?;
    Ok(Evaluation { report, pairs })
}

/// Scores every sample with its first `k` stored patches, in dataset order.
pub fn score_all(scorer: &dyn Scorer, dataset: &Dataset) -> Result<Vec<(Score, Label)>, ModelError> {
    let k = scorer.branches();
    let mut pairs = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let slots: Vec<Vec<usize>> = chunk.iter().map(|_| (0..k).collect()).collect();
        let inputs = dataset.branch_inputs(chunk, &slots)?;
        let scores = scorer.score_batch(&inputs)?;
        pairs.extend(scores.into_iter().zip(chunk.iter().map(|&i| dataset.samples[i].label)));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AttackType, Sample};
    use crate::nn::Shape;
    use rand::{Rng, SeedableRng};

    struct Constant(f32);

    impl Scorer for Constant {
        fn branches(&self) -> usize {
            2
        }

        fn score_batch(&self, inputs: &[Tensor]) -> Result<Vec<Score>, ModelError> {
            Ok(vec![Score::from_bona_fide(self.0); inputs[0].shape().n()])
        }
    }

    /// Reads the bona-fide probability out of the first pixel of branch 0.
    struct PixelOracle;

    impl Scorer for PixelOracle {
        fn branches(&self) -> usize {
            2
        }

        fn score_batch(&self, inputs: &[Tensor]) -> Result<Vec<Score>, ModelError> {
            let n = inputs[0].shape().n();
            Ok((0..n).map(|i| Score::from_bona_fide(inputs[0].at(i, 0, 0, 0))).collect())
        }
    }

    fn dataset(labels: &[Label], first_pixels: &[f32]) -> Dataset {
        let samples = labels
            .iter()
            .zip(first_pixels)
            .map(|(&label, &p)| Sample {
                patches: (0..3).map(|_| Tensor::full(Shape::new(1, 3, 4, 4), p)).collect(),
                label,
                attack_type: if label == Label::BonaFide { AttackType::None } else { AttackType::PrintHalftone },
            })
            .collect();
        Dataset { samples, patch_size: 4 }
    }

    #[test]
    fn bona_fide_only_has_zero_bpcer() {
        let ds = dataset(&[Label::BonaFide; 10], &[0.0; 10]);
        let pairs = score_all(&Constant(1.0), &ds).unwrap();
        let counts = metrics::confusion(&pairs, 0.5).unwrap();
        assert_eq!(metrics::bpcer(&counts).unwrap(), 0.0);
    }

    #[test]
    fn attack_only_has_full_apcer() {
        let ds = dataset(&[Label::Attack; 10], &[0.0; 10]);
        let pairs = score_all(&Constant(1.0), &ds).unwrap();
        let counts = metrics::confusion(&pairs, 0.5).unwrap();
        assert_eq!(metrics::apcer(&counts).unwrap(), 1.0);
    }

    #[test]
    fn counts_match_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let n = 300;
        let labels: Vec<Label> = (0..n).map(|_| if rng.gen_bool(0.4) { Label::BonaFide } else { Label::Attack }).collect();
        let px: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ds = dataset(&labels, &px);
        let eval = evaluate(&PixelOracle, &ds, &DecisionConfig::new(0.37).unwrap()).unwrap();
        let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
        for (l, p) in labels.iter().zip(&px) {
            let accepted = *p as f64 > 0.37;
            match (l, accepted) {
                (Label::Attack, false) => tp += 1,
                (Label::Attack, true) => fn_ += 1,
                (Label::BonaFide, true) => tn += 1,
                (Label::BonaFide, false) => fp += 1,
            }
        }
        let c = eval.report.counts;
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (tp, tn, fp, fn_));
        assert_eq!(eval.pairs.len(), n);
    }
}
