//! Binary cross-entropy and pooled ROC AUC.

use std::io::Write;

use thiserror::Error;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("AUC is undefined: log has {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("prediction log columns have different lengths")]
    Ragged,
}

pub fn bce(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `∂ bce(σ(z), a) / ∂z` given `prob = σ(z)`. Zero inside the clamp region,
/// where the loss is flat.
pub fn bce_logit_grad(prob: f64, label: u8) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&prob) {
        return 0.0;
    }
    prob - f64::from(label)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionLog {
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
    pub student_ids: Vec<String>,
    pub steps: Vec<usize>,
    pub skills: Vec<usize>,
}

impl PredictionLog {
    pub fn push(&mut self, student_id: &str, step: usize, skill: usize, prob: f64, label: u8) {
        self.probs.push(prob);
        self.labels.push(label);
        self.student_ids.push(student_id.to_string());
        self.steps.push(step);
        self.skills.push(skill);
    }

    /// Log with only scores and labels, for metric computation.
    pub fn from_scores(probs: Vec<f64>, labels: Vec<u8>) -> Self {
        let n = probs.len();
        Self {
            probs,
            labels,
            student_ids: vec![String::new(); n],
            steps: vec![0; n],
            skills: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn extend(&mut self, other: PredictionLog) {
        self.probs.extend(other.probs);
        self.labels.extend(other.labels);
        self.student_ids.extend(other.student_ids);
        self.steps.extend(other.steps);
        self.skills.extend(other.skills);
    }

    /// CSV with header `student_id,step,skill,prob,label`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["student_id", "step", "skill", "prob", "label"])?;
        for i in 0..self.len() {
            w.write_record([
                self.student_ids[i].clone(),
                self.steps[i].to_string(),
                self.skills[i].to_string(),
                self.probs[i].to_string(),
                self.labels[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    fn class_counts(&self) -> Result<(usize, usize), MetricsError> {
        if self.labels.len() != self.probs.len() {
            return Err(MetricsError::Ragged);
        }
        let positives = self.labels.iter().filter(|&&l| l == 1).count();
        let negatives = self.labels.len() - positives;
        if positives == 0 || negatives == 0 {
            return Err(MetricsError::SingleClass { positives, negatives });
        }
        Ok((positives, negatives))
    }
}

/// Mann–Whitney AUC over all predictions pooled, ties sharing their
/// average rank.
pub fn auc(log: &PredictionLog) -> Result<f64, MetricsError> {
    let (positives, negatives) = log.class_counts()?;
    let mut order: Vec<usize> = (0..log.len()).collect();
    order.sort_by(|&a, &b| log.probs[a].total_cmp(&log.probs[b]));

    // Sum of 1-based ranks of the positives, with tied blocks averaged.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && log.probs[order[j]] == log.probs[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_block = order[i..j].iter().filter(|&&k| log.labels[k] == 1).count();
        rank_sum += avg_rank * pos_in_block as f64;
        i = j;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Pair-counting AUC; quadratic, used as an oracle for [`auc`].
pub fn auc_bruteforce(log: &PredictionLog) -> Result<f64, MetricsError> {
    let (positives, negatives) = log.class_counts()?;
    let mut score = 0.0;
    for (i, &pi) in log.probs.iter().enumerate() {
        if log.labels[i] != 1 {
            continue;
        }
        for (j, &pj) in log.probs.iter().enumerate() {
            if log.labels[j] == 1 {
                continue;
            }
            if pi > pj {
                score += 1.0;
            } else if pi == pj {
                score += 0.5;
            }
        }
    }
    Ok(score / (positives as f64 * negatives as f64))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
