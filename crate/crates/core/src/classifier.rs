//! Binary logistic regression trained by full-batch gradient descent.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PairLabel, QuestionPair};
use crate::features::{FeatureSchema, FeatureVector};
use crate::par::ExecPolicy;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("{label:?} class has {count} pairs; at least 2 are needed to split")]
    ClassTooSmall { label: PairLabel, count: usize },
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("no training examples")]
    Empty,
    #[error("non-finite feature value in pair ({query_id}, {candidate_id})")]
    NonFinite { query_id: u64, candidate_id: u64 },
    #[error("schema mismatch: model uses [{expected}], input has [{found}]")]
    SchemaMismatch { expected: String, found: String },
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("invalid model file: {0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<QuestionPair>,
    pub test: Vec<QuestionPair>,
}

impl DataSplit {
    pub fn test_duplicates(&self) -> impl Iterator<Item = &QuestionPair> {
        self.test.iter().filter(|p| p.label == PairLabel::Duplicate)
    }
}

fn shuffled_take(
    pairs: &[QuestionPair],
    n_train: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<QuestionPair>, Vec<QuestionPair>) {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(rng);
    let mut train_idx = idx[..n_train].to_vec();
    let mut test_idx = idx[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    (
        train_idx.into_iter().map(|i| pairs[i]).collect(),
        test_idx.into_iter().map(|i| pairs[i]).collect(),
    )
}

/// Split pairs into train and test. With `stratified`, each class keeps
/// `floor(train_fraction * n)` of its pairs for training.
pub fn split(
    duplicates: &[QuestionPair],
    non_duplicates: &[QuestionPair],
    spec: &SplitSpec,
) -> Result<DataSplit, ClassifierError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(ClassifierError::BadFraction(spec.train_fraction));
    }
    for (label, pairs) in [
        (PairLabel::Duplicate, duplicates),
        (PairLabel::NonDuplicate, non_duplicates),
    ] {
        if pairs.len() < 2 {
            return Err(ClassifierError::ClassTooSmall {
                label,
                count: pairs.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_train = |n: usize| ((spec.train_fraction * n as f64).floor() as usize).clamp(1, n - 1);
    if spec.stratified {
        let (mut train, mut test) = shuffled_take(duplicates, n_train(duplicates.len()), &mut rng);
        let (train_n, test_n) =
            shuffled_take(non_duplicates, n_train(non_duplicates.len()), &mut rng);
        train.extend(train_n);
        test.extend(test_n);
        Ok(DataSplit { train, test })
    } else {
        let all: Vec<QuestionPair> = duplicates.iter().chain(non_duplicates).copied().collect();
        let (train, test) = shuffled_take(&all, n_train(all.len()), &mut rng);
        Ok(DataSplit { train, test })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.1,
            epochs: 500,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ClassifierError::Hyperparams(
                "learning_rate must be > 0".into(),
            ));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(ClassifierError::Hyperparams("l2 must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(ClassifierError::Hyperparams("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub schema: FeatureSchema,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub training_meta: TrainingMeta,
}

/// One labeled training row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub pair: QuestionPair,
    pub features: FeatureVector,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Dense design matrix extracted from examples.
#[derive(Debug, Clone)]
pub struct Design {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl Design {
    pub fn from_examples(
        examples: &[TrainingExample],
    ) -> Result<(Arc<FeatureSchema>, Self), ClassifierError> {
        let first = examples.first().ok_or(ClassifierError::Empty)?;
        let schema = Arc::clone(first.features.schema());
        let mut rows = Vec::with_capacity(examples.len());
        let mut labels = Vec::with_capacity(examples.len());
        for ex in examples {
            if ex.features.schema() != &schema {
                return Err(ClassifierError::SchemaMismatch {
                    expected: schema.describe(),
                    found: ex.features.schema().describe(),
                });
            }
            if ex.features.values().iter().any(|v| !v.is_finite()) {
                return Err(ClassifierError::NonFinite {
                    query_id: ex.pair.query_id,
                    candidate_id: ex.pair.candidate_id,
                });
            }
            rows.push(ex.features.values().to_vec());
            labels.push(ex.pair.label.as_f64());
        }
        Ok((schema, Design { rows, labels }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub grad_weights: Vec<f64>,
    pub grad_bias: f64,
}

#[derive(Clone)]
struct Partial {
    loss: f64,
    grad: Vec<f64>,
    grad_bias: f64,
}

/// Mean negative log-likelihood plus `(l2 / 2) * |w|^2` (bias unpenalized),
/// and its gradient. Row terms are summed with the fixed-shape reduction
/// tree of [`ExecPolicy::tree_reduce`], so results are bit-identical for any
/// policy.
pub fn loss_and_gradient(
    weights: &[f64],
    bias: f64,
    design: &Design,
    l2: f64,
    exec: &ExecPolicy,
) -> LossGradient {
    let n = design.rows.len().max(1) as f64;
    let d = weights.len();
    let indices: Vec<usize> = (0..design.rows.len()).collect();
    let total = exec.tree_reduce(
        &indices,
        Partial {
            loss: 0.0,
            grad: vec![0.0; d],
            grad_bias: 0.0,
        },
        |chunk| {
            let mut p = Partial {
                loss: 0.0,
                grad: vec![0.0; d],
                grad_bias: 0.0,
            };
            for &i in chunk {
                let x = &design.rows[i];
                let y = design.labels[i];
                let z = bias + x.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>();
                p.loss += softplus(z) - y * z;
                let r = sigmoid(z) - y;
                for (g, xi) in p.grad.iter_mut().zip(x) {
                    *g += r * xi;
                }
                p.grad_bias += r;
            }
            p
        },
        |mut a, b| {
            a.loss += b.loss;
            for (x, y) in a.grad.iter_mut().zip(&b.grad) {
                *x += y;
            }
            a.grad_bias += b.grad_bias;
            a
        },
    );
    let penalty = 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    LossGradient {
        loss: total.loss / n + penalty,
        grad_weights: total
            .grad
            .iter()
            .zip(weights)
            .map(|(g, w)| g / n + l2 * w)
            .collect(),
        grad_bias: total.grad_bias / n,
    }
}

/// Train from zero initialization. Returns the model and the loss before
/// each epoch followed by the final loss (`epochs + 1` values).
pub fn train_with_history(
    examples: &[TrainingExample],
    hp: &Hyperparams,
    exec: &ExecPolicy,
) -> Result<(TrainedModel, Vec<f64>), ClassifierError> {
    hp.validate()?;
    let (schema, design) = Design::from_examples(examples)?;
    let mut weights = vec![0.0; schema.len()];
    let mut bias = 0.0;
    let mut history = Vec::with_capacity(hp.epochs + 1);
    for _ in 0..hp.epochs {
        let lg = loss_and_gradient(&weights, bias, &design, hp.l2, exec);
        history.push(lg.loss);
        for (w, g) in weights.iter_mut().zip(&lg.grad_weights) {
            *w -= hp.learning_rate * g;
        }
        bias -= hp.learning_rate * lg.grad_bias;
    }
    let final_loss = loss_and_gradient(&weights, bias, &design, hp.l2, exec).loss;
    history.push(final_loss);
    let model = TrainedModel {
        schema: schema.as_ref().clone(),
        weights,
        bias,
        training_meta: TrainingMeta {
            seed: hp.seed,
            epochs: hp.epochs,
            learning_rate: hp.learning_rate,
            l2: hp.l2,
            final_loss,
        },
    };
    Ok((model, history))
}

pub fn train(
    examples: &[TrainingExample],
    hp: &Hyperparams,
    exec: &ExecPolicy,
) -> Result<TrainedModel, ClassifierError> {
    train_with_history(examples, hp, exec).map(|(m, _)| m)
}

/// Smallest and largest probabilities returned, keeping results strictly
/// inside (0, 1) even when the logit saturates.
const P_MIN: f64 = f64::MIN_POSITIVE;
const P_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

impl TrainedModel {
    pub fn decision(&self, values: &[f64]) -> f64 {
        self.bias
            + values
                .iter()
                .zip(&self.weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
    }

    pub fn predict_proba(&self, features: &FeatureVector) -> Result<f64, ClassifierError> {
        if features.schema().as_ref() != &self.schema {
            return Err(ClassifierError::SchemaMismatch {
                expected: self.schema.describe(),
                found: features.schema().describe(),
            });
        }
        Ok(sigmoid(self.decision(features.values())).clamp(P_MIN, P_MAX))
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.weights.len() != self.schema.len() {
            return Err(ClassifierError::Model(format!(
                "{} weights for {} features",
                self.weights.len(),
                self.schema.len()
            )));
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(ClassifierError::Model("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn to_writer<W: Write>(&self, out: W) -> Result<(), ClassifierError> {
        serde_json::to_writer_pretty(out, self).map_err(|e| ClassifierError::Model(e.to_string()))
    }

    pub fn from_reader<R: Read>(input: R) -> Result<Self, ClassifierError> {
        let model: TrainedModel =
            serde_json::from_reader(input).map_err(|e| ClassifierError::Model(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}
