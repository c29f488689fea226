//! Aggregating constituent models into one prediction.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::data::FeatureVector;
use crate::learner::{argmax, softmax, LearnerError, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VoteRule {
    #[default]
    HardMajority,
    SoftMean,
}

impl fmt::Display for VoteRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoteRule::HardMajority => "hard",
            VoteRule::SoftMean => "soft",
        })
    }
}

impl FromStr for VoteRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hard" | "majority" => Ok(VoteRule::HardMajority),
            "soft" | "mean" => Ok(VoteRule::SoftMean),
            other => Err(format!("unknown vote rule `{other}` (expected hard or soft)")),
        }
    }
}

/// Most frequent label; ties go to the lowest class index.
pub fn majority_vote(labels: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0u32; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteDetail {
    pub per_model: Vec<usize>,
    pub counts: Vec<u32>,
    pub mean_proba: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub models: Vec<ModelParams>,
    pub vote: VoteRule,
}

impl Ensemble {
    pub fn new(models: Vec<ModelParams>, vote: VoteRule) -> Result<Self, LearnerError> {
        let first = models.first().ok_or(LearnerError::Config("ensemble needs at least one model".into()))?;
        if models.iter().any(|m| m.dims != first.dims || m.mode != first.mode) {
            return Err(LearnerError::Config("ensemble members disagree on dims or mode".into()));
        }
        Ok(Ensemble { models, vote })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.models[0].dims.num_classes
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<(usize, VoteDetail), LearnerError> {
        let k = self.num_classes();
        let first = &self.models[0];
        if x.dim != first.dims.input_dim {
            return Err(LearnerError::DimMismatch { expected: first.dims.input_dim, got: x.dim });
        }
        let shared = self.models.iter().all(|m| Arc::ptr_eq(&m.backbone, &first.backbone));
        let h = shared.then(|| first.backbone.hidden_activations(x));
        let mut per_model = Vec::with_capacity(self.models.len());
        let mut mean_proba = vec![0.0; k];
        for m in &self.models {
            let p = match &h {
                Some(h) => softmax(&m.logits_from_hidden(h)),
                None => m.predict_proba(x)?,
            };
            per_model.push(argmax(&p));
            for (acc, v) in mean_proba.iter_mut().zip(&p) {
                *acc += v;
            }
        }
        let n = self.models.len() as f64;
        mean_proba.iter_mut().for_each(|v| *v /= n);
        let mut counts = vec![0u32; k];
        for &l in &per_model {
            counts[l] += 1;
        }
        let label = match self.vote {
            VoteRule::HardMajority => majority_vote(&per_model, k),
            VoteRule::SoftMean => argmax(&mean_proba),
        };
        Ok((label, VoteDetail { per_model, counts, mean_proba }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{init_params, HeadMode, ModelDims};

    #[test]
    fn majority_ties_go_low() {
        assert_eq!(majority_vote(&[1, 1, 0, 2, 1], 3), 1);
        assert_eq!(majority_vote(&[0, 0, 1, 1], 2), 0);
        assert_eq!(majority_vote(&[2, 1], 3), 1);
        assert_eq!(majority_vote(&[2], 3), 2);
    }

    #[test]
    fn vote_rule_parse() {
        assert_eq!("hard".parse::<VoteRule>().unwrap(), VoteRule::HardMajority);
        assert_eq!("soft".parse::<VoteRule>().unwrap(), VoteRule::SoftMean);
        assert!("avg".parse::<VoteRule>().is_err());
        assert_eq!(VoteRule::default().to_string(), "hard");
    }

    #[test]
    fn shared_backbone_matches_per_model_path() {
        let d = ModelDims::new(64, 16, 3).unwrap();
        let base = init_params(d, HeadMode::FcOnly, 4, 0).unwrap();
        let models: Vec<_> = (0..3)
            .map(|s| ModelParams::init_with_backbone(base.backbone.clone(), d, HeadMode::FcOnly, 4, s).unwrap())
            .collect();
        let x = FeatureVector { dim: 64, indices: vec![1, 9, 40], values: vec![0.5, 0.5, 0.7071] };
        let shared = Ensemble::new(models.clone(), VoteRule::SoftMean).unwrap();
        let (label, detail) = shared.predict(&x).unwrap();
        let mut acc = vec![0.0; 3];
        for m in &models {
            let p = m.predict_proba(&x).unwrap();
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v / 3.0;
            }
        }
        for (a, b) in acc.iter().zip(&detail.mean_proba) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(label, argmax(&acc));
        assert_eq!(detail.counts.iter().sum::<u32>(), 3);
    }

    #[test]
    fn empty_ensemble_rejected() {
        assert!(Ensemble::new(vec![], VoteRule::HardMajority).is_err());
    }
}
