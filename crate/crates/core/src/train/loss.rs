use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_sd: f64,
    pub w_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_sd: 1.0, w_m: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_sd >= 0.0 && self.w_m >= 0.0) || self.w_sd + self.w_m <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with a positive sum (w_sd={}, w_m={})",
                self.w_sd, self.w_m
            )));
        }
        Ok(())
    }
}

/// Sign applied to each head's gradient where it enters the shared base;
/// −1 makes the base unlearn features that help that head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuppressionFlags {
    pub s_sd: i8,
    pub s_m: i8,
}

impl Default for SuppressionFlags {
    fn default() -> Self {
        SuppressionFlags { s_sd: 1, s_m: 1 }
    }
}

impl SuppressionFlags {
    pub fn new(s_sd: i8, s_m: i8) -> Result<Self> {
        let s = SuppressionFlags { s_sd, s_m };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.s_sd, self.s_m].iter().all(|v| *v == 1 || *v == -1) {
            return Err(Error::Config(format!(
                "suppression flags must be +1 or -1 (s_sd={}, s_m={})",
                self.s_sd, self.s_m
            )));
        }
        Ok(())
    }

    pub fn is_joint(&self) -> bool {
        self.s_sd == 1 && self.s_m == 1
    }
}

fn log_sum_exp(l: [f64; 2]) -> f64 {
    let m = l[0].max(l[1]);
    m + ((l[0] - m).exp() + (l[1] - m).exp()).ln()
}

/// Cross-entropy of one sample.
pub(crate) fn cross_entropy(logits: [f64; 2], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

/// Mean cross-entropy (natural log); labels are class indices, 1 = spoof.
pub fn spoof_loss(logits: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Param(format!("label {l} is not live (0) or spoof (1)")));
    }
    Ok(logits.iter().zip(labels).map(|(l, &y)| cross_entropy(*l, y)).sum::<f64>() / labels.len() as f64)
}

/// Squared distance over the descriptor width for one sample.
pub(crate) fn descriptor_mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Batch mean of the per-dimension squared error.
pub fn match_loss(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if p.len() != t.len() || p.is_empty() {
            return Err(Error::Shape(format!("descriptor of width {} vs target {}", p.len(), t.len())));
        }
        acc += descriptor_mse(p, t);
    }
    Ok(acc / pred.len() as f64)
}

pub fn total_loss(l_sd: f64, l_m: f64, w: &LossWeights) -> f64 {
    w.w_m * l_m + w.w_sd * l_sd
}
