//! Fast-gradient adversarial perturbations on interaction embeddings and
//! the joint clean + adversarial objective.

use thiserror::Error;

use crate::data::Batch;
use crate::linalg::{l2_norm, ShapeError};
use crate::model::{backward_batch, forward_batch, ModelError, ModelParams};

#[derive(Debug, Error, PartialEq)]
pub enum AdversarialError {
    #[error("epsilon must be finite and >= 0, got {0}")]
    BadEpsilon(f64),
    #[error("beta must be finite and >= 0, got {0}")]
    BadBeta(f64),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which embeddings share one ε-ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PerturbationScope {
    /// Each sequence's concatenated embedding gradient is normalized alone.
    #[default]
    PerSequence,
    /// One norm over every embedding gradient in the batch.
    PerBatch,
}

/// Offsets `r'` for one sequence, one vector per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub offsets: Vec<Vec<f64>>,
    pub epsilon: f64,
}

impl Perturbation {
    pub fn norm(&self) -> f64 {
        concat_norm(&self.offsets)
    }
}

fn concat_norm(vs: &[Vec<f64>]) -> f64 {
    vs.iter().map(|v| l2_norm(v).powi(2)).sum::<f64>().sqrt()
}

fn check_epsilon(epsilon: f64) -> Result<(), AdversarialError> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(AdversarialError::BadEpsilon(epsilon));
    }
    Ok(())
}

fn scaled(grad: &[Vec<f64>], factor: f64) -> Vec<Vec<f64>> {
    grad.iter().map(|v| v.iter().map(|g| factor * g).collect()).collect()
}

/// `r' = ε g / ‖g‖₂` with the norm over the whole sequence. A zero gradient
/// gives a zero perturbation.
pub fn fgsm_perturbation(grad: &[Vec<f64>], epsilon: f64) -> Result<Perturbation, AdversarialError> {
    check_epsilon(epsilon)?;
    let norm = concat_norm(grad);
    let factor = if norm > 0.0 { epsilon / norm } else { 0.0 };
    Ok(Perturbation {
        offsets: scaled(grad, factor),
        epsilon,
    })
}

/// Perturbations for every row of a batch from its embedding gradients.
pub fn batch_perturbations(
    d_embed: &[Vec<Vec<f64>>],
    epsilon: f64,
    scope: PerturbationScope,
) -> Result<Vec<Perturbation>, AdversarialError> {
    match scope {
        PerturbationScope::PerSequence => d_embed.iter().map(|g| fgsm_perturbation(g, epsilon)).collect(),
        PerturbationScope::PerBatch => {
            check_epsilon(epsilon)?;
            let norm = d_embed.iter().map(|g| concat_norm(g).powi(2)).sum::<f64>().sqrt();
            let factor = if norm > 0.0 { epsilon / norm } else { 0.0 };
            Ok(d_embed
                .iter()
                .map(|g| Perturbation {
                    offsets: scaled(g, factor),
                    epsilon,
                })
                .collect())
        }
    }
}

/// `e'_i = e_i + r'_i`.
pub fn make_adversarial(embeddings: &[Vec<f64>], r: &Perturbation) -> Result<Vec<Vec<f64>>, AdversarialError> {
    let same = embeddings.len() == r.offsets.len()
        && embeddings.iter().zip(&r.offsets).all(|(e, d)| e.len() == d.len());
    if !same {
        return Err(ShapeError::Mismatch {
            op: "make_adversarial",
            left: format!("{} embeddings", embeddings.len()),
            right: format!("{} offsets", r.offsets.len()),
        }
        .into());
    }
    Ok(embeddings
        .iter()
        .zip(&r.offsets)
        .map(|(e, d)| e.iter().zip(d).map(|(a, b)| a + b).collect())
        .collect())
}

pub fn joint_loss(clean_loss: f64, adv_loss: f64, beta: f64) -> f64 {
    clean_loss + beta * adv_loss
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub scope: PerturbationScope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointStep {
    pub clean_loss: f64,
    pub adv_loss: Option<f64>,
    pub total_loss: f64,
    /// Gradient of `clean + β · adversarial` w.r.t. every parameter.
    pub grads: ModelParams,
    /// `‖∂L/∂E‖₂` over the whole batch from the clean pass.
    pub embed_grad_norm: f64,
}

/// Clean forward/backward, then (when `adversarial` is given) a second
/// forward/backward on `E + r'` with `r'` held constant. The adversarial
/// gradient flows into the embedding tables through `E`.
pub fn joint_step(
    p: &ModelParams,
    batch: &Batch,
    adversarial: Option<&AdversarialConfig>,
) -> Result<JointStep, AdversarialError> {
    let clean = forward_batch(p, batch, None)?;
    let clean_grads = backward_batch(p, &clean, batch)?;
    let embed_grad_norm = clean_grads
        .d_embed
        .iter()
        .map(|g| concat_norm(g).powi(2))
        .sum::<f64>()
        .sqrt();
    let mut grads = clean_grads.params;

    let Some(cfg) = adversarial else {
        return Ok(JointStep {
            clean_loss: clean.loss,
            adv_loss: None,
            total_loss: clean.loss,
            grads,
            embed_grad_norm,
        });
    };
    if !cfg.beta.is_finite() || cfg.beta < 0.0 {
        return Err(AdversarialError::BadBeta(cfg.beta));
    }
    let perturbations = batch_perturbations(&clean_grads.d_embed, cfg.epsilon, cfg.scope)?;
    let offsets: Vec<Vec<Vec<f64>>> = perturbations.into_iter().map(|r| r.offsets).collect();
    let adv = forward_batch(p, batch, Some(&offsets))?;
    let adv_grads = backward_batch(p, &adv, batch)?;
    grads.add_scaled(&adv_grads.params, cfg.beta);
    Ok(JointStep {
        clean_loss: clean.loss,
        adv_loss: Some(adv.loss),
        total_loss: joint_loss(clean.loss, adv.loss, cfg.beta),
        grads,
        embed_grad_norm,
    })
}
