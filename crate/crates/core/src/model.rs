//! Attentive-LSTM knowledge-tracing network with a hand-derived backward
//! pass.
//!
//! Per sequence of `T` interactions the model
//!
//! 1. embeds each interaction response-aware: `[skill ⊕ response]` for a
//!    correct answer, `[response ⊕ skill]` for a wrong one;
//! 2. runs a single-layer LSTM from zero state over the first `T - 1`
//!    embeddings (the last one never feeds a prediction);
//! 3. for every target step `k = 1..T-1` aggregates the hidden states
//!    strictly before `k - 1` with additive attention, concatenates that
//!    context with `h[k-1]`, and scores all skills with a sigmoid head,
//!    reading off the probability for skill `s[k]`.
//!
//! The sequence loss is the mean BCE over its `T - 1` targets; a batch loss
//! is the mean of its sequence losses.

use rand::Rng as _;
use thiserror::Error;

use crate::linalg::{dot, sigmoid, softmax, Matrix, Rng, ShapeError};
use crate::metrics::{bce, bce_logit_grad};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("skill id {skill} out of range for {num_skills} skills")]
    SkillOutOfRange { skill: usize, num_skills: usize },
    #[error("response {0} is not 0 or 1")]
    InvalidResponse(u8),
    #[error("trace does not match batch: {0}")]
    TraceMismatch(String),
}

/// How attention weights are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionWindow {
    /// Softmax over exactly the states summed for each target, recomputed
    /// per target step.
    #[default]
    Causal,
    /// One softmax per sequence over every state that can enter a window
    /// (`h[0..T-2]`); each target sums its causal prefix of those weights.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_skills: usize,
    pub skill_dim: usize,
    pub response_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub attention: bool,
    pub window: AttentionWindow,
}

impl ModelConfig {
    /// 256-d skill and 96-d response embeddings, 80 hidden units, 80-d
    /// attention projection.
    pub fn with_defaults(num_skills: usize) -> Self {
        Self {
            num_skills,
            skill_dim: 256,
            response_dim: 96,
            hidden_dim: 80,
            attention_dim: 80,
            attention: true,
            window: AttentionWindow::Causal,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.skill_dim + self.response_dim
    }

    pub fn composite_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

pub const PARAM_NAMES: [&str; 10] = [
    "skill_emb",
    "response_emb",
    "gate_w",
    "gate_u",
    "gate_b",
    "attn_w",
    "attn_b",
    "attn_u",
    "head_w",
    "head_b",
];

/// Trainable arrays. The LSTM gates are stacked in the order input,
/// forget, candidate, output; each block has `hidden_dim` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `|S| × d_s`
    pub skill_emb: Matrix,
    /// `2 × d_a`; row 0 is the wrong-answer embedding, row 1 the right one.
    pub response_emb: Matrix,
    /// `4 d_h × (d_s + d_a)`
    pub gate_w: Matrix,
    /// `4 d_h × d_h`
    pub gate_u: Matrix,
    pub gate_b: Vec<f64>,
    /// `d_w × d_h`
    pub attn_w: Matrix,
    pub attn_b: Vec<f64>,
    pub attn_u: Vec<f64>,
    /// `|S| × 2 d_h`; the first `d_h` columns read the attention context.
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

fn glorot(rng: &mut Rng, m: &mut [f64], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for x in m {
        *x = rng.random_range(-limit..=limit);
    }
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let ModelConfig {
            num_skills: s,
            hidden_dim: h,
            attention_dim: w,
            ..
        } = config;
        Self {
            config,
            skill_emb: Matrix::zeros(s, config.skill_dim),
            response_emb: Matrix::zeros(2, config.response_dim),
            gate_w: Matrix::zeros(4 * h, config.input_dim()),
            gate_u: Matrix::zeros(4 * h, h),
            gate_b: vec![0.0; 4 * h],
            attn_w: Matrix::zeros(w, h),
            attn_b: vec![0.0; w],
            attn_u: vec![0.0; w],
            head_w: Matrix::zeros(s, 2 * h),
            head_b: vec![0.0; s],
        }
    }

    /// Glorot-uniform weights, zero biases, forget-gate bias 1.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(config);
        let h = config.hidden_dim;
        glorot(rng, p.skill_emb.as_mut_slice(), config.skill_dim, config.num_skills);
        glorot(rng, p.response_emb.as_mut_slice(), config.response_dim, 2);
        for gate in 0..4 {
            let block = gate * h * config.input_dim()..(gate + 1) * h * config.input_dim();
            glorot(rng, &mut p.gate_w.as_mut_slice()[block], config.input_dim(), h);
            let block = gate * h * h..(gate + 1) * h * h;
            glorot(rng, &mut p.gate_u.as_mut_slice()[block], h, h);
        }
        p.gate_b[h..2 * h].fill(1.0);
        glorot(rng, p.attn_w.as_mut_slice(), h, config.attention_dim);
        glorot(rng, &mut p.attn_u, config.attention_dim, 1);
        glorot(rng, p.head_w.as_mut_slice(), 2 * h, config.num_skills);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn arrays(&self) -> [(&'static str, &[f64]); 10] {
        [
            (PARAM_NAMES[0], self.skill_emb.as_slice()),
            (PARAM_NAMES[1], self.response_emb.as_slice()),
            (PARAM_NAMES[2], self.gate_w.as_slice()),
            (PARAM_NAMES[3], self.gate_u.as_slice()),
            (PARAM_NAMES[4], &self.gate_b),
            (PARAM_NAMES[5], self.attn_w.as_slice()),
            (PARAM_NAMES[6], &self.attn_b),
            (PARAM_NAMES[7], &self.attn_u),
            (PARAM_NAMES[8], self.head_w.as_slice()),
            (PARAM_NAMES[9], &self.head_b),
        ]
    }

    pub fn arrays_mut(&mut self) -> [(&'static str, &mut [f64]); 10] {
        [
            (PARAM_NAMES[0], self.skill_emb.as_mut_slice()),
            (PARAM_NAMES[1], self.response_emb.as_mut_slice()),
            (PARAM_NAMES[2], self.gate_w.as_mut_slice()),
            (PARAM_NAMES[3], self.gate_u.as_mut_slice()),
            (PARAM_NAMES[4], &mut self.gate_b),
            (PARAM_NAMES[5], self.attn_w.as_mut_slice()),
            (PARAM_NAMES[6], &mut self.attn_b),
            (PARAM_NAMES[7], &mut self.attn_u),
            (PARAM_NAMES[8], self.head_w.as_mut_slice()),
            (PARAM_NAMES[9], &mut self.head_b),
        ]
    }

    /// Row/column shape of each array, in [`PARAM_NAMES`] order. Vectors
    /// report `(len, 1)`.
    pub fn shapes(&self) -> [(usize, usize); 10] {
        [
            self.skill_emb.shape(),
            self.response_emb.shape(),
            self.gate_w.shape(),
            self.gate_u.shape(),
            (self.gate_b.len(), 1),
            self.attn_w.shape(),
            (self.attn_b.len(), 1),
            (self.attn_u.len(), 1),
            self.head_w.shape(),
            (self.head_b.len(), 1),
        ]
    }

    pub fn num_values(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// `self += scale · other`, array by array.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), (_, src)) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.arrays()
            .iter()
            .flat_map(|(_, a)| a.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, a)| a.iter().all(|x| x.is_finite()))
    }
}

/// Response-aware interaction embedding.
pub fn embed_interaction(p: &ModelParams, skill: usize, response: u8) -> Result<Vec<f64>, ModelError> {
    if skill >= p.config.num_skills {
        return Err(ModelError::SkillOutOfRange {
            skill,
            num_skills: p.config.num_skills,
        });
    }
    let s = p.skill_emb.row(skill);
    let out = match response {
        1 => [s, p.response_emb.row(1)].concat(),
        0 => [p.response_emb.row(0), s].concat(),
        other => return Err(ModelError::InvalidResponse(other)),
    };
    Ok(out)
}

/// Activations of one LSTM step, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub input: Vec<f64>,
    /// Post-activation gates `[i, f, g, o]`, `4 d_h` long.
    pub gates: Vec<f64>,
    pub cell: Vec<f64>,
    pub tanh_cell: Vec<f64>,
    pub hidden: Vec<f64>,
}

fn lstm_forward(p: &ModelParams, input: Vec<f64>, h_prev: &[f64], c_prev: &[f64]) -> StepCache {
    let h = p.config.hidden_dim;
    let mut gates: Vec<f64> = (0..4 * h)
        .map(|r| dot(p.gate_w.row(r), &input) + dot(p.gate_u.row(r), h_prev) + p.gate_b[r])
        .collect();
    for (r, z) in gates.iter_mut().enumerate() {
        *z = if (2 * h..3 * h).contains(&r) { z.tanh() } else { sigmoid(*z) };
    }
    let cell: Vec<f64> = (0..h)
        .map(|u| gates[h + u] * c_prev[u] + gates[u] * gates[2 * h + u])
        .collect();
    let tanh_cell: Vec<f64> = cell.iter().map(|c| c.tanh()).collect();
    let hidden = (0..h).map(|u| gates[3 * h + u] * tanh_cell[u]).collect();
    StepCache {
        input,
        gates,
        cell,
        tanh_cell,
        hidden,
    }
}

/// One LSTM cell update, returning `(h_t, c_t)`.
pub fn lstm_step(p: &ModelParams, input: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let cfg = p.config;
    if input.len() != cfg.input_dim() || h_prev.len() != cfg.hidden_dim || c_prev.len() != cfg.hidden_dim {
        return Err(ShapeError::Mismatch {
            op: "lstm_step",
            left: format!("input {} hidden {}", cfg.input_dim(), cfg.hidden_dim),
            right: format!("e {} h {} c {}", input.len(), h_prev.len(), c_prev.len()),
        }
        .into());
    }
    let step = lstm_forward(p, input.to_vec(), h_prev, c_prev);
    Ok((step.hidden, step.cell))
}

/// `tanh(W_w h + b_w)` and its score against `u_w`.
fn attention_projection(p: &ModelParams, h: &[f64]) -> (Vec<f64>, f64) {
    let u: Vec<f64> = (0..p.config.attention_dim)
        .map(|r| (dot(p.attn_w.row(r), h) + p.attn_b[r]).tanh())
        .collect();
    let score = dot(&u, &p.attn_u);
    (u, score)
}

fn weighted_sum(weights: &[f64], states: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, h) in weights.iter().zip(states) {
        crate::linalg::axpy(*w, h, &mut out);
    }
    out
}

/// Attention context over a window of hidden states. An empty window
/// yields the zero vector.
pub fn khs_attention(p: &ModelParams, states: &[Vec<f64>]) -> Vec<f64> {
    let dim = p.config.hidden_dim;
    if states.is_empty() {
        return vec![0.0; dim];
    }
    let scores: Vec<f64> = states.iter().map(|h| attention_projection(p, h).1).collect();
    let weights = softmax(&scores).expect("non-empty window");
    weighted_sum(&weights, states, dim)
}

pub fn compose(context: &[f64], hidden: &[f64]) -> Vec<f64> {
    [context, hidden].concat()
}

/// Per-skill mastery probabilities from a composite state, plus the entry
/// for `next_skill`.
pub fn predict_step(p: &ModelParams, composite: &[f64], next_skill: usize) -> Result<(Vec<f64>, f64), ModelError> {
    if next_skill >= p.config.num_skills {
        return Err(ModelError::SkillOutOfRange {
            skill: next_skill,
            num_skills: p.config.num_skills,
        });
    }
    let probs = head_probs(p, composite)?;
    let selected = probs[next_skill];
    Ok((probs, selected))
}

fn head_probs(p: &ModelParams, composite: &[f64]) -> Result<Vec<f64>, ModelError> {
    Ok(crate::linalg::affine(&p.head_w, composite, &p.head_b)?
        .into_iter()
        .map(sigmoid)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetCache {
    pub skill: usize,
    pub label: u8,
    /// Attention weights over the states summed for this target.
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
    pub probs: Vec<f64>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTrace {
    pub skills: Vec<usize>,
    pub responses: Vec<u8>,
    pub steps: Vec<StepCache>,
    /// `u_j` for every state that can enter an attention window.
    pub attn_proj: Vec<Vec<f64>>,
    pub attn_scores: Vec<f64>,
    /// Set only for [`AttentionWindow::Global`].
    pub global_weights: Option<Vec<f64>>,
    /// Target `k` (1-based step) lives at index `k - 1`.
    pub targets: Vec<TargetCache>,
    pub loss: f64,
}

impl SequenceTrace {
    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }
}

/// Forward pass over one sequence. `perturbation`, when given, is added to
/// the interaction embeddings (one vector per step).
pub fn forward_one(
    p: &ModelParams,
    skills: &[usize],
    responses: &[u8],
    perturbation: Option<&[Vec<f64>]>,
) -> Result<SequenceTrace, ModelError> {
    let cfg = p.config;
    let n = skills.len();
    if responses.len() != n {
        return Err(ModelError::TraceMismatch(format!(
            "{} skills vs {} responses",
            n,
            responses.len()
        )));
    }
    if let Some(r) = perturbation {
        if r.len() != n || r.iter().any(|v| v.len() != cfg.input_dim()) {
            return Err(ShapeError::Mismatch {
                op: "forward_one",
                left: format!("{n} steps x {}", cfg.input_dim()),
                right: format!("perturbation with {} steps", r.len()),
            }
            .into());
        }
    }
    let d_h = cfg.hidden_dim;
    let lstm_steps = n.saturating_sub(1);

    let mut steps: Vec<StepCache> = Vec::with_capacity(lstm_steps);
    let zeros = vec![0.0; d_h];
    for t in 0..lstm_steps {
        let mut e = embed_interaction(p, skills[t], responses[t])?;
        if let Some(r) = perturbation {
            for (x, d) in e.iter_mut().zip(&r[t]) {
                *x += d;
            }
        }
        let (h_prev, c_prev) = match steps.last() {
            Some(s) => (s.hidden.as_slice(), s.cell.as_slice()),
            None => (zeros.as_slice(), zeros.as_slice()),
        };
        let step = lstm_forward(p, e, h_prev, c_prev);
        steps.push(step);
    }
    // Validate the final interaction too, even though it is never embedded.
    if let Some(&s) = skills.last() {
        if s >= cfg.num_skills {
            return Err(ModelError::SkillOutOfRange {
                skill: s,
                num_skills: cfg.num_skills,
            });
        }
    }

    let windowed = n.saturating_sub(2);
    let (attn_proj, attn_scores): (Vec<Vec<f64>>, Vec<f64>) = if cfg.attention {
        steps[..windowed]
            .iter()
            .map(|s| attention_projection(p, &s.hidden))
            .unzip()
    } else {
        (Vec::new(), Vec::new())
    };
    let global_weights = match (cfg.attention, cfg.window) {
        (true, AttentionWindow::Global) if windowed > 0 => Some(softmax(&attn_scores)?),
        _ => None,
    };

    let mut targets = Vec::with_capacity(lstm_steps);
    let mut loss = 0.0;
    for k in 1..n {
        let window = k - 1;
        let states: Vec<Vec<f64>>;
        let (weights, context) = if !cfg.attention || window == 0 {
            (Vec::new(), vec![0.0; d_h])
        } else {
            states = steps[..window].iter().map(|s| s.hidden.clone()).collect();
            let weights = match &global_weights {
                Some(g) => g[..window].to_vec(),
                None => softmax(&attn_scores[..window])?,
            };
            let ctx = weighted_sum(&weights, &states, d_h);
            (weights, ctx)
        };
        let composite = compose(&context, &steps[k - 1].hidden);
        let (probs, prob) = predict_step(p, &composite, skills[k])?;
        let label = responses[k];
        loss += bce(prob, label);
        targets.push(TargetCache {
            skill: skills[k],
            label,
            weights,
            context,
            probs,
            prob,
        });
    }
    if !targets.is_empty() {
        loss /= targets.len() as f64;
    }

    Ok(SequenceTrace {
        skills: skills.to_vec(),
        responses: responses.to_vec(),
        steps,
        attn_proj,
        attn_scores,
        global_weights,
        targets,
        loss,
    })
}

/// Accumulates `scale · ∂(sequence loss)/∂θ` into `grads` and returns the
/// gradient w.r.t. each step's interaction embedding (scaled likewise).
pub fn backward_one(p: &ModelParams, trace: &SequenceTrace, scale: f64, grads: &mut ModelParams) -> Vec<Vec<f64>> {
    let cfg = p.config;
    let d_h = cfg.hidden_dim;
    let n = trace.len();
    let lstm_steps = trace.steps.len();
    let mut d_embed = vec![vec![0.0; cfg.input_dim()]; n];
    if trace.targets.is_empty() {
        return d_embed;
    }
    let per_target = scale / trace.targets.len() as f64;

    let mut d_hidden = vec![vec![0.0; d_h]; lstm_steps];
    let mut d_context: Vec<Vec<f64>> = Vec::with_capacity(trace.targets.len());
    for (idx, tgt) in trace.targets.iter().enumerate() {
        let k = idx + 1;
        let d_logit = per_target * bce_logit_grad(tgt.prob, tgt.label);
        let h_last = &trace.steps[k - 1].hidden;
        {
            let row = grads.head_w.row_mut(tgt.skill);
            crate::linalg::axpy(d_logit, &tgt.context, &mut row[..d_h]);
            crate::linalg::axpy(d_logit, h_last, &mut row[d_h..]);
        }
        grads.head_b[tgt.skill] += d_logit;
        let w_row = p.head_w.row(tgt.skill);
        crate::linalg::axpy(d_logit, &w_row[d_h..], &mut d_hidden[k - 1]);
        d_context.push(w_row[..d_h].iter().map(|w| d_logit * w).collect());
    }

    if cfg.attention {
        let windowed = trace.attn_scores.len();
        let mut d_score = vec![0.0; windowed];
        match &trace.global_weights {
            None => {
                for (idx, tgt) in trace.targets.iter().enumerate() {
                    let window = tgt.weights.len();
                    if window == 0 {
                        continue;
                    }
                    let dc = &d_context[idx];
                    let d_weight: Vec<f64> = (0..window).map(|j| dot(dc, &trace.steps[j].hidden)).collect();
                    let mean = dot(&tgt.weights, &d_weight);
                    for j in 0..window {
                        crate::linalg::axpy(tgt.weights[j], dc, &mut d_hidden[j]);
                        d_score[j] += tgt.weights[j] * (d_weight[j] - mean);
                    }
                }
            }
            Some(alpha) => {
                let mut d_weight = vec![0.0; windowed];
                for (idx, tgt) in trace.targets.iter().enumerate() {
                    let dc = &d_context[idx];
                    for j in 0..tgt.weights.len() {
                        d_weight[j] += dot(dc, &trace.steps[j].hidden);
                        crate::linalg::axpy(alpha[j], dc, &mut d_hidden[j]);
                    }
                }
                let mean = dot(alpha, &d_weight);
                for j in 0..windowed {
                    d_score[j] = alpha[j] * (d_weight[j] - mean);
                }
            }
        }
        for j in 0..windowed {
            if d_score[j] == 0.0 {
                continue;
            }
            let u = &trace.attn_proj[j];
            crate::linalg::axpy(d_score[j], u, &mut grads.attn_u);
            let d_pre: Vec<f64> = u
                .iter()
                .zip(&p.attn_u)
                .map(|(ui, wi)| d_score[j] * wi * (1.0 - ui * ui))
                .collect();
            grads.attn_w.add_outer(1.0, &d_pre, &trace.steps[j].hidden);
            crate::linalg::axpy(1.0, &d_pre, &mut grads.attn_b);
            p.attn_w.add_transpose_matvec(&d_pre, &mut d_hidden[j]);
        }
    }

    let zeros = vec![0.0; d_h];
    let mut d_h_next = vec![0.0; d_h];
    let mut d_c_next = vec![0.0; d_h];
    let mut d_pre = vec![0.0; 4 * d_h];
    for t in (0..lstm_steps).rev() {
        let step = &trace.steps[t];
        let (h_prev, c_prev) = if t == 0 {
            (&zeros, &zeros)
        } else {
            (&trace.steps[t - 1].hidden, &trace.steps[t - 1].cell)
        };
        let g = &step.gates;
        for u in 0..d_h {
            let dh = d_hidden[t][u] + d_h_next[u];
            let (i, f, c, o) = (g[u], g[d_h + u], g[2 * d_h + u], g[3 * d_h + u]);
            let tc = step.tanh_cell[u];
            let dc = d_c_next[u] + dh * o * (1.0 - tc * tc);
            d_pre[u] = dc * c * i * (1.0 - i);
            d_pre[d_h + u] = dc * c_prev[u] * f * (1.0 - f);
            d_pre[2 * d_h + u] = dc * i * (1.0 - c * c);
            d_pre[3 * d_h + u] = dh * tc * o * (1.0 - o);
            d_c_next[u] = dc * f;
        }
        grads.gate_w.add_outer(1.0, &d_pre, &step.input);
        grads.gate_u.add_outer(1.0, &d_pre, h_prev);
        crate::linalg::axpy(1.0, &d_pre, &mut grads.gate_b);
        p.gate_w.add_transpose_matvec(&d_pre, &mut d_embed[t]);
        d_h_next.fill(0.0);
        p.gate_u.add_transpose_matvec(&d_pre, &mut d_h_next);
    }

    let d_s = cfg.skill_dim;
    let d_a = cfg.response_dim;
    for t in 0..lstm_steps {
        let de = &d_embed[t];
        let skill = trace.skills[t];
        if trace.responses[t] == 1 {
            crate::linalg::axpy(1.0, &de[..d_s], grads.skill_emb.row_mut(skill));
            crate::linalg::axpy(1.0, &de[d_s..], grads.response_emb.row_mut(1));
        } else {
            crate::linalg::axpy(1.0, &de[..d_a], grads.response_emb.row_mut(0));
            crate::linalg::axpy(1.0, &de[d_a..], grads.skill_emb.row_mut(skill));
        }
    }
    d_embed
}

/// Per-row embedding perturbations for a batch, `[row][step][dim]`.
pub type EmbeddingOffsets = [Vec<Vec<f64>>];

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub sequences: Vec<SequenceTrace>,
    pub loss: f64,
}

impl ForwardTrace {
    /// Rows that carry at least one prediction target.
    pub fn scored_rows(&self) -> usize {
        self.sequences.iter().filter(|s| !s.targets.is_empty()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub params: ModelParams,
    /// `∂L/∂e` per batch row and step; padded steps are absent.
    pub d_embed: Vec<Vec<Vec<f64>>>,
}

/// Masked forward pass over a batch. Only the first `seq_lens[i]` cells of
/// each row are read.
pub fn forward_batch(
    p: &ModelParams,
    batch: &crate::data::Batch,
    perturbation: Option<&EmbeddingOffsets>,
) -> Result<ForwardTrace, ModelError> {
    if let Some(r) = perturbation {
        if r.len() != batch.len() {
            return Err(ModelError::TraceMismatch(format!(
                "{} perturbation rows for {} batch rows",
                r.len(),
                batch.len()
            )));
        }
    }
    let sequences = (0..batch.len())
        .map(|i| {
            let (skills, responses) = batch.row(i);
            forward_one(p, skills, responses, perturbation.map(|r| r[i].as_slice()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let scored: Vec<f64> = sequences.iter().filter(|s| !s.targets.is_empty()).map(|s| s.loss).collect();
    let loss = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(ForwardTrace { sequences, loss })
}

/// Exact gradients of the batch loss w.r.t. every parameter and every
/// interaction embedding.
pub fn backward_batch(p: &ModelParams, trace: &ForwardTrace, batch: &crate::data::Batch) -> Result<GradientSet, ModelError> {
    if trace.sequences.len() != batch.len() {
        return Err(ModelError::TraceMismatch(format!(
            "{} traced rows for {} batch rows",
            trace.sequences.len(),
            batch.len()
        )));
    }
    for (i, seq) in trace.sequences.iter().enumerate() {
        let (skills, responses) = batch.row(i);
        if seq.skills != skills || seq.responses != responses {
            return Err(ModelError::TraceMismatch(format!("row {i} differs from traced sequence")));
        }
    }
    let mut grads = p.zeros_like();
    let scored = trace.scored_rows();
    let scale = if scored == 0 { 0.0 } else { 1.0 / scored as f64 };
    let d_embed = trace
        .sequences
        .iter()
        .map(|seq| backward_one(p, seq, scale, &mut grads))
        .collect();
    Ok(GradientSet { params: grads, d_embed })
}

/// Per-step mastery rows for one sequence: row 0 comes from the zero
/// composite state (before any interaction), row `k` from the state after
/// `k` interactions. Returns `len` rows of `|S|` probabilities.
pub fn mastery_rows(p: &ModelParams, trace: &SequenceTrace) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut rows = Vec::with_capacity(trace.len());
    if !trace.is_empty() {
        rows.push(head_probs(p, &vec![0.0; p.config.composite_dim()])?);
    }
    rows.extend(trace.targets.iter().map(|t| t.probs.clone()));
    Ok(rows)
}
