//! Test-time pipeline of the leave-out ensemble: entropy-gradient input
//! perturbation, temperature-scaled scoring and remapped class averaging.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{expand_to_global, MlpClassifier};
use crate::tensor::{self, Tensor};

/// OOD score definitions. Every variant is oriented so that a higher score
/// means "more in-distribution"; entropy terms therefore enter negated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScoreVariant {
    Softmax,
    Entropy,
    SoftmaxPlusEntropy,
    SoftmaxAtTemp,
    EntropyAtTemp,
    SoftmaxPlusEntropyAtTemp,
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 6] = [
        ScoreVariant::Softmax,
        ScoreVariant::Entropy,
        ScoreVariant::SoftmaxPlusEntropy,
        ScoreVariant::SoftmaxAtTemp,
        ScoreVariant::EntropyAtTemp,
        ScoreVariant::SoftmaxPlusEntropyAtTemp,
    ];

    pub fn at_temperature(self) -> bool {
        matches!(
            self,
            Self::SoftmaxAtTemp | Self::EntropyAtTemp | Self::SoftmaxPlusEntropyAtTemp
        )
    }

    fn uses_softmax(self) -> bool {
        !matches!(self, Self::Entropy | Self::EntropyAtTemp)
    }

    fn uses_entropy(self) -> bool {
        !matches!(self, Self::Softmax | Self::SoftmaxAtTemp)
    }

    /// Temperature the variant is evaluated at, given the configured one.
    pub fn effective_temperature(self, temperature: f64) -> f64 {
        if self.at_temperature() {
            temperature
        } else {
            1.0
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Entropy => "entropy",
            Self::SoftmaxPlusEntropy => "softmax+entropy",
            Self::SoftmaxAtTemp => "softmax@temp",
            Self::EntropyAtTemp => "entropy@temp",
            Self::SoftmaxPlusEntropyAtTemp => "softmax+entropy@temp",
        }
    }
}

impl fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown score variant `{s}`; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub temperature: f64,
    pub epsilon: f64,
    pub score_variant: ScoreVariant,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            temperature: 1000.0,
            epsilon: 0.002,
            score_variant: ScoreVariant::SoftmaxPlusEntropyAtTemp,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be nonnegative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub predicted_class: usize,
    pub ood_score: f64,
    pub per_classifier_scores: Vec<f64>,
}

/// One signed-gradient step that lowers the at-temperature entropy:
/// `x − ε·sign(∂H(softmax(f(x)/T))/∂x)`, with `sign(0) = 0`.
pub fn perturb_input(
    classifier: &MlpClassifier,
    x: &Tensor,
    epsilon: f64,
    temperature: f64,
) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    if epsilon == 0.0 {
        // Still validates the input width.
        classifier.forward_logits(&x.select_rows(&[]))?;
        return Ok(x.clone());
    }
    let mut tape = Tape::new();
    let params = classifier.register_constants(&mut tape);
    let input = tape.variable(x.clone());
    let logits = classifier.forward_tape(&mut tape, &params, input)?;
    let probs = tape.softmax_temp(logits, temperature)?;
    let entropy = tape.entropy(probs)?;
    let total = tape.sum(entropy);
    tape.backward(total)?;
    let mut out = x.clone();
    if let Some(grad) = tape.grad(input) {
        for (v, &g) in out.data_mut().iter_mut().zip(grad.data()) {
            if g > 0.0 {
                *v -= epsilon;
            } else if g < 0.0 {
                *v += epsilon;
            }
        }
    }
    Ok(out)
}

/// Per-sample score of one classifier on (already perturbed) inputs.
///
/// The softmax term is the maximum over the retained classes; the entropy
/// term is the entropy of the whole head's softmax.
pub fn classifier_ood_score(
    classifier: &MlpClassifier,
    x: &Tensor,
    temperature: f64,
    variant: ScoreVariant,
) -> Result<Vec<f64>> {
    let probs = classifier.predict_probs(x, variant.effective_temperature(temperature))?;
    let class_probs = classifier.class_probs(&probs);
    let entropy = tensor::entropy(&probs)?;
    Ok((0..probs.rows())
        .map(|r| {
            let mut score = 0.0;
            if variant.uses_softmax() {
                score += class_probs.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
            if variant.uses_entropy() {
                score -= entropy.data()[r];
            }
            score
        })
        .collect())
}

/// K leave-out classifiers over a shared global label space.
#[derive(Clone, Debug)]
pub struct Ensemble {
    classifiers: Vec<MlpClassifier>,
    class_count: usize,
}

impl Ensemble {
    /// Checks shared input width, valid local maps, and that no class is left
    /// out by more than one classifier.
    pub fn new(classifiers: Vec<MlpClassifier>, class_count: usize) -> Result<Self> {
        let Some(first) = classifiers.first() else {
            return Err(Error::Validation("ensemble needs at least one classifier".into()));
        };
        let d_in = first.input_dim();
        let mut left_out_by: Vec<Option<usize>> = vec![None; class_count];
        for (i, c) in classifiers.iter().enumerate() {
            if c.input_dim() != d_in {
                return Err(Error::Validation(format!(
                    "classifier {i} takes {} inputs, classifier 0 takes {d_in}",
                    c.input_dim()
                )));
            }
            let mut covered = vec![false; class_count];
            for &g in c.local_map() {
                if g >= class_count || std::mem::replace(&mut covered[g], true) {
                    return Err(Error::Validation(format!(
                        "classifier {i} has an invalid local map {:?}",
                        c.local_map()
                    )));
                }
            }
            for (g, &cov) in covered.iter().enumerate() {
                if !cov {
                    if let Some(j) = left_out_by[g] {
                        return Err(Error::Validation(format!(
                            "class {g} is left out by both classifiers {j} and {i}"
                        )));
                    }
                    left_out_by[g] = Some(i);
                }
            }
        }
        Ok(Self {
            classifiers,
            class_count,
        })
    }

    pub fn classifiers(&self) -> &[MlpClassifier] {
        &self.classifiers
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.classifiers[0].input_dim()
    }

    /// Sum over classifiers of the globally remapped T=1 softmax of the
    /// unperturbed input.
    pub fn class_scores(&self, x: &Tensor) -> Result<Tensor> {
        let parts = self
            .classifiers
            .par_iter()
            .map(|c| {
                let probs = c.class_probs(&c.predict_probs(x, 1.0)?);
                expand_to_global(&probs, c.local_map(), self.class_count)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = Tensor::zeros(&[x.rows(), self.class_count]);
        for p in parts {
            for (t, v) in total.data_mut().iter_mut().zip(p.data()) {
                *t += v;
            }
        }
        Ok(total)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let s = self.class_scores(x)?;
        Ok((0..s.rows()).map(|r| tensor::argmax(s.row(r))).collect())
    }

    /// Per-classifier OOD scores, each on that classifier's own perturbed
    /// input; outer index is the classifier.
    pub fn classifier_scores(&self, x: &Tensor, cfg: &DetectorConfig) -> Result<Vec<Vec<f64>>> {
        cfg.validate()?;
        let t = cfg.score_variant.effective_temperature(cfg.temperature);
        self.classifiers
            .par_iter()
            .map(|c| {
                let perturbed = perturb_input(c, x, cfg.epsilon, t)?;
                classifier_ood_score(c, &perturbed, cfg.temperature, cfg.score_variant)
            })
            .collect()
    }

    /// Summed OOD score per sample.
    pub fn ood_scores(&self, x: &Tensor, cfg: &DetectorConfig) -> Result<Vec<f64>> {
        let per = self.classifier_scores(x, cfg)?;
        Ok((0..x.rows())
            .map(|r| per.iter().map(|s| s[r]).sum())
            .collect())
    }
}

/// Class prediction and OOD score for every row of `x`.
pub fn detect(ensemble: &Ensemble, x: &Tensor, cfg: &DetectorConfig) -> Result<Vec<DetectionResult>> {
    let predictions = ensemble.predict(x)?;
    let per = ensemble.classifier_scores(x, cfg)?;
    Ok(predictions
        .into_iter()
        .enumerate()
        .map(|(r, predicted_class)| {
            let per_classifier_scores: Vec<f64> = per.iter().map(|s| s[r]).collect();
            DetectionResult {
                predicted_class,
                ood_score: per_classifier_scores.iter().sum(),
                per_classifier_scores,
            }
        })
        .collect())
}
