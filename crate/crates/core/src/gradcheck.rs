//! Central finite-difference check of the analytic gradients, covering
//! every parameter array and every interaction embedding.

use rand::Rng as _;

use crate::data::{Batch, InteractionSequence};
use crate::linalg::{rng_for, Rng};
use crate::model::{backward_batch, forward_batch, AttentionWindow, GradientSet, ModelConfig, ModelError, ModelParams};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Differences at or below this are accepted regardless of relative size.
pub const ABS_FLOOR: f64 = 1e-9;
/// Coordinates smaller than this are left out of `max_rel_error`.
pub const SIGNIFICANT: f64 = 1e-6;

/// `|S| = 4`, all dims 3 except a 2-d response embedding.
pub fn tiny_config(attention: bool, window: AttentionWindow) -> ModelConfig {
    ModelConfig {
        num_skills: 4,
        skill_dim: 3,
        response_dim: 2,
        hidden_dim: 3,
        attention_dim: 3,
        attention,
        window,
    }
}

/// A batch of `rows` random sequences; row 0 has `max_len` steps, the rest
/// are shorter so padding is exercised.
pub fn random_batch(num_skills: usize, rows: usize, max_len: usize, rng: &mut Rng) -> Batch {
    let seqs: Vec<InteractionSequence> = (0..rows)
        .map(|r| {
            let n = if r == 0 { max_len } else { rng.random_range(2..=max_len) };
            InteractionSequence::new(
                format!("g{r}"),
                (0..n).map(|_| rng.random_range(0..num_skills)).collect(),
                (0..n).map(|_| rng.random_range(0..2u8)).collect(),
            )
        })
        .collect();
    let refs: Vec<&InteractionSequence> = seqs.iter().collect();
    Batch::from_sequences(&refs, num_skills)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    /// Parameter array name, or `d_embed[row][step]`.
    pub array: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest relative error among coordinates of magnitude at least
    /// [`SIGNIFICANT`].
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, array: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        let m = Mismatch {
            array: array.to_string(),
            index,
            analytic,
            numeric,
            rel_error: rel,
        };
        if scale >= SIGNIFICANT && rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = Some(m.clone());
        }
        if diff > ABS_FLOOR && rel > REL_TOLERANCE {
            self.failures.push(m);
        }
    }
}

pub fn grad_check(config: &ModelConfig, seed: u64) -> Result<GradCheckReport, ModelError> {
    grad_check_with(config, seed, |p, b| {
        let trace = forward_batch(p, b, None)?;
        backward_batch(p, &trace, b)
    })
}

/// Runs the check against any gradient routine; used for negative controls.
pub fn grad_check_with<F>(config: &ModelConfig, seed: u64, analytic: F) -> Result<GradCheckReport, ModelError>
where
    F: Fn(&ModelParams, &Batch) -> Result<GradientSet, ModelError>,
{
    let params = ModelParams::init(*config, &mut rng_for(seed, "gradcheck-init"));
    let batch = random_batch(config.num_skills, 3, 5, &mut rng_for(seed, "gradcheck-batch"));
    check_at(&params, &batch, analytic)
}

pub fn check_at<F>(params: &ModelParams, batch: &Batch, analytic: F) -> Result<GradCheckReport, ModelError>
where
    F: Fn(&ModelParams, &Batch) -> Result<GradientSet, ModelError>,
{
    let grads = analytic(params, batch)?;
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
    };

    let mut probe = params.clone();
    for (a, (name, analytic_vals)) in grads.params.arrays().into_iter().enumerate() {
        for i in 0..analytic_vals.len() {
            let original = probe.arrays()[a].1[i];
            probe.arrays_mut()[a].1[i] = original + FD_STEP;
            let up = forward_batch(&probe, batch, None)?.loss;
            probe.arrays_mut()[a].1[i] = original - FD_STEP;
            let down = forward_batch(&probe, batch, None)?.loss;
            probe.arrays_mut()[a].1[i] = original;
            report.record(name, i, analytic_vals[i], (up - down) / (2.0 * FD_STEP));
        }
    }

    let dim = params.config.input_dim();
    let mut offsets: Vec<Vec<Vec<f64>>> = batch
        .seq_lens
        .iter()
        .map(|&n| vec![vec![0.0; dim]; n])
        .collect();
    for row in 0..batch.len() {
        for step in 0..batch.seq_lens[row] {
            for d in 0..dim {
                offsets[row][step][d] = FD_STEP;
                let up = forward_batch(params, batch, Some(&offsets))?.loss;
                offsets[row][step][d] = -FD_STEP;
                let down = forward_batch(params, batch, Some(&offsets))?.loss;
                offsets[row][step][d] = 0.0;
                report.record(
                    &format!("d_embed[{row}][{step}]"),
                    d,
                    grads.d_embed[row][step][d],
                    (up - down) / (2.0 * FD_STEP),
                );
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_for_every_attention_mode() {
        for (attention, window) in [
            (true, AttentionWindow::Causal),
            (true, AttentionWindow::Global),
            (false, AttentionWindow::Causal),
        ] {
            for seed in 0..3 {
                let r = grad_check(&tiny_config(attention, window), seed).unwrap();
                assert!(r.passed(), "{attention} {window:?} seed {seed}: {:?}", r.worst);
            }
        }
    }

    #[test]
    fn flipped_attention_gradient_is_caught() {
        let r = grad_check_with(&tiny_config(true, AttentionWindow::Causal), 2, |p, b| {
            let trace = forward_batch(p, b, None)?;
            let mut g = backward_batch(p, &trace, b)?;
            g.params.attn_w.as_mut_slice().iter_mut().for_each(|x| *x = -*x);
            Ok(g)
        })
        .unwrap();
        assert!(!r.passed());
        assert!(r.failures.iter().all(|m| m.array == "attn_w"));
    }
}
