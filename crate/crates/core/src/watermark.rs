//! Watermark embedding by training with trigger samples, and black-box ownership
//! verification.

use std::fmt::Write as _;

use crate::attacks::AttackDescriptor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Architecture, Classifier, Example, History, Predictor, TrainConfig};
use crate::trigger::TriggerSet;

pub const DEFAULT_DELTA: f64 = 0.15;

/// Everything needed to train a marked model from scratch.
#[derive(Debug, Clone)]
pub struct EmbeddingJob<'a> {
    pub arch: Architecture,
    /// Output classes of the marked model (`c + 1` for new-class labels).
    pub class_count: usize,
    pub train: Vec<Example<'a>>,
    pub val: Vec<Example<'a>>,
    /// `B₁`, mixed into training.
    pub triggers_train: &'a TriggerSet,
    /// `B₂`, mixed into validation.
    pub triggers_val: &'a TriggerSet,
    pub init_seed: u64,
    pub train_config: TrainConfig,
}

fn with_triggers<'a>(clean: &[Example<'a>], triggers: &'a TriggerSet, class_count: usize) -> Result<Vec<Example<'a>>> {
    let mut out = clean.to_vec();
    if !triggers.is_empty() {
        let label = triggers.label()?;
        if label >= class_count {
            return Err(Error::arg(format!("trigger label {label} >= class count {class_count}")));
        }
        out.extend(triggers.samples.iter().map(|s| (s, label)));
    }
    Ok(out)
}

/// Trains a fresh model on `D₁ ∪ B₁`, validating on `D₂ ∪ B₂`.
pub fn embed(job: &EmbeddingJob) -> Result<(Classifier, History)> {
    let train = with_triggers(&job.train, job.triggers_train, job.class_count)?;
    let val = with_triggers(&job.val, job.triggers_val, job.class_count)?;
    if let Some((_, l)) = train.iter().chain(&val).find(|(_, l)| *l >= job.class_count) {
        return Err(Error::arg(format!("label {l} >= class count {}", job.class_count)));
    }
    let model = Classifier::init(job.arch.clone(), job.class_count, job.init_seed)?;
    nn::train(&model, &train, &val, &job.train_config)
}

/// `|acc(m0, U) − acc(m1, U)|`.
pub fn fidelity_gap<A: Predictor + ?Sized, B: Predictor + ?Sized>(m0: &A, m1: &B, clean: &[Example]) -> Result<f64> {
    Ok((nn::evaluate(m0, clean)? - nn::evaluate(m1, clean)?).abs())
}

/// Fraction of triggers classified as their assigned label.
pub fn trigger_accuracy<P: Predictor + ?Sized>(model: &P, triggers: &TriggerSet) -> Result<f64> {
    if triggers.is_empty() {
        return Err(Error::arg("trigger set is empty"));
    }
    let label = triggers.label()?;
    let samples: Vec<Example> = triggers.samples.iter().map(|s| (s, label)).collect();
    nn::evaluate(model, &samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub accuracy: f64,
    pub delta: f64,
    pub verified: bool,
    pub ids: Vec<u64>,
    pub predicted: Vec<usize>,
    pub expected: usize,
    pub attack: Option<String>,
}

/// `1 − accuracy ≤ δ`, boundary inclusive.
pub fn decide(accuracy: f64, delta: f64) -> bool {
    // Accuracies are k/n; a tiny slack keeps 1 − 0.85 ≤ 0.15 true despite rounding.
    1.0 - accuracy <= delta + 1e-12
}

impl VerificationReport {
    /// Recomputes the decision from the stored predictions.
    pub fn recomputed_decision(&self) -> bool {
        let hits = self.predicted.iter().filter(|&&p| p == self.expected).count();
        decide(hits as f64 / self.predicted.len() as f64, self.delta)
    }

    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n");
        let _ = writeln!(s, "  \"accuracy\": {},", self.accuracy);
        let _ = writeln!(s, "  \"delta\": {},", self.delta);
        let _ = writeln!(s, "  \"verified\": {},", self.verified);
        let _ = writeln!(s, "  \"expected_label\": {},", self.expected);
        let _ = writeln!(s, "  \"trigger_count\": {},", self.predicted.len());
        match &self.attack {
            Some(a) => {
                let _ = writeln!(s, "  \"attack\": \"{a}\"");
            }
            None => {
                let _ = writeln!(s, "  \"attack\": null");
            }
        }
        s.push_str("}\n");
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,predicted,expected,correct\n");
        for (id, p) in self.ids.iter().zip(&self.predicted) {
            let _ = writeln!(s, "{id},{p},{},{}", self.expected, u8::from(*p == self.expected));
        }
        s
    }
}

/// Queries `model` on every trigger (attacked first when an image attack is given) and
/// applies the threshold rule. Only `predict` is ever called on the model.
pub fn verify<P: Predictor + ?Sized>(
    model: &P,
    triggers: &TriggerSet,
    delta: f64,
    attack: Option<&AttackDescriptor>,
) -> Result<VerificationReport> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::arg(format!("delta {delta} outside [0, 1]")));
    }
    if triggers.is_empty() {
        return Err(Error::arg("trigger set is empty"));
    }
    let expected = triggers.label()?;
    if let Some(a) = attack {
        if !a.is_image_attack() {
            return Err(Error::arg(format!("{a} is not an input attack")));
        }
    }
    let query = |img: &Image| -> Result<usize> {
        match attack {
            Some(a) => model.predict(&a.apply_image(img)?),
            None => model.predict(img),
        }
    };
    let predicted = crate::par::map(&triggers.samples, query).into_iter().collect::<Result<Vec<_>>>()?;
    let hits = predicted.iter().filter(|&&p| p == expected).count();
    let accuracy = hits as f64 / predicted.len() as f64;
    let ids = if triggers.source_ids.len() == predicted.len() {
        triggers.source_ids.clone()
    } else {
        (0..predicted.len() as u64).collect()
    };
    Ok(VerificationReport {
        accuracy,
        delta,
        verified: decide(accuracy, delta),
        ids,
        predicted,
        expected,
        attack: attack.map(|a| a.to_string()),
    })
}
