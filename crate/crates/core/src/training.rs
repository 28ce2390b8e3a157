//! Training loop: Adam updates, step-decay schedule, early stopping on
//! validation loss, best-AUC checkpoint selection and the ε×β sweep.

use std::io::Write;
use std::time::Instant;

use thiserror::Error;

use crate::adversarial::{joint_step, AdversarialConfig, AdversarialError};
use crate::config::TrainConfig;
use crate::data::{make_batches, Dataset, DataError, FoldSplit, InteractionSequence};
use crate::linalg::{rng_for, rng_for_indexed};
use crate::metrics::{auc, PredictionLog};
use crate::model::{forward_batch, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        last_good: Box<ModelParams>,
    },
    #[error("empty training split")]
    EmptySplit,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adversarial(#[from] AdversarialError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64, hyper: AdamHyper) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let arrays = params
        .arrays_mut()
        .into_iter()
        .zip(grads.arrays())
        .zip(state.m.arrays_mut().into_iter().zip(state.v.arrays_mut()));
    for (((_, theta), (_, g)), ((_, m), (_, v))) in arrays {
        for i in 0..theta.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}

/// Patience counter over validation loss. `patience == 0` never stops.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    lowest: f64,
    since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            lowest: f64::INFINITY,
            since_improvement: 0,
        }
    }

    /// Records one epoch's loss; returns true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.lowest {
            self.lowest = loss;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        self.patience > 0 && self.since_improvement >= self.patience
    }

    pub fn lowest(&self) -> f64 {
        self.lowest
    }
}

/// `base · decay^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, base: f64, decay: f64, every: usize) -> f64 {
    base * decay.powi((epoch / every.max(1)) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub lr: f64,
    /// Mean over batches of the clean-pass embedding-gradient norm.
    pub embed_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    /// Running minimum of validation loss after each epoch.
    pub best_val_loss: Vec<f64>,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
    pub mean_embedding_norm: f64,
    pub config: TrainConfig,
}

impl RunRecord {
    /// CSV with header `epoch,train_loss,val_loss,val_auc,lr`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss", "val_auc", "lr"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
                e.val_auc.to_string(),
                e.lr.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn min_val_loss(&self) -> f64 {
        self.best_val_loss.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// Parameters from the epoch with the best validation AUC.
    pub best: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean of per-sequence mean BCE.
    pub loss: f64,
    /// NaN when the labels are single-class.
    pub auc: f64,
    pub log: PredictionLog,
}

/// Scores `seqs` in input order with no shuffling.
pub fn evaluate(p: &ModelParams, seqs: &[InteractionSequence], batch_size: usize) -> Result<Evaluation, ModelError> {
    let mut log = PredictionLog::default();
    let mut loss_sum = 0.0;
    let mut scored = 0usize;
    for batch in make_batches(seqs, batch_size, p.config.num_skills, None) {
        let trace = forward_batch(p, &batch, None)?;
        for (row, seq) in trace.sequences.iter().enumerate() {
            if seq.targets.is_empty() {
                continue;
            }
            loss_sum += seq.loss;
            scored += 1;
            for (idx, t) in seq.targets.iter().enumerate() {
                log.push(&batch.student_ids[row], idx + 1, t.skill, t.prob, t.label);
            }
        }
    }
    let loss = if scored == 0 { f64::NAN } else { loss_sum / scored as f64 };
    let auc = auc(&log).unwrap_or(f64::NAN);
    Ok(Evaluation { loss, auc, log })
}

fn mean_embedding_norm(p: &ModelParams) -> f64 {
    let mut total = 0.0;
    let s = p.config.num_skills;
    for k in 0..s {
        for a in 0..2u8 {
            if let Ok(e) = crate::model::embed_interaction(p, k, a) {
                total += crate::linalg::l2_norm(&e);
            }
        }
    }
    if s == 0 {
        0.0
    } else {
        total / (2 * s) as f64
    }
}

/// Trains on `train`, validating on `val` after each epoch. Early stopping
/// watches validation loss; the returned parameters maximize validation
/// AUC.
pub fn train(
    config: &TrainConfig,
    num_skills: usize,
    train: &[InteractionSequence],
    val: &[InteractionSequence],
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let started = Instant::now();
    let mut params = ModelParams::init(config.model_config(num_skills), &mut rng_for(config.seed, "init"));
    let mut adam = AdamState::new(&params);
    let hyper = AdamHyper {
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        eps: config.adam_eps,
    };
    let adversarial = config.runs_adversarial_pass().then_some(AdversarialConfig {
        epsilon: config.epsilon,
        beta: config.beta,
        scope: config.perturbation_scope,
    });

    let mut epochs = Vec::new();
    let mut best_val_loss = Vec::new();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let lr = lr_at(epoch, config.lr, config.lr_decay, config.lr_decay_every);
        let mut shuffle = rng_for_indexed(config.seed, "batches", epoch as u64);
        let batches = make_batches(train, config.batch_size, num_skills, Some(&mut shuffle));
        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        let mut grad_norm_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let step = joint_step(&params, batch, adversarial.as_ref())?;
            if !step.total_loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    loss: step.total_loss,
                    last_good: Box::new(params),
                });
            }
            let mut grads = step.grads;
            if let Some(limit) = config.clip_norm {
                let norm = grads.global_norm();
                if norm > limit {
                    let shrink = limit / norm;
                    for (_, g) in grads.arrays_mut() {
                        g.iter_mut().for_each(|x| *x *= shrink);
                    }
                }
            }
            let before = params.clone();
            adam_step(&mut params, &grads, &mut adam, lr, hyper);
            if !params.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    loss: step.total_loss,
                    last_good: Box::new(before),
                });
            }
            loss_sum += step.clean_loss * batch.len() as f64;
            rows += batch.len();
            grad_norm_sum += step.embed_grad_norm;
        }
        let eval = evaluate(&params, val, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / rows as f64,
            val_loss: eval.loss,
            val_auc: eval.auc,
            lr,
            embed_grad_norm: grad_norm_sum / batches.len() as f64,
        };
        log::debug!(
            "epoch {epoch}: train {:.5} val {:.5} auc {:.5}",
            record.train_loss,
            record.val_loss,
            record.val_auc
        );
        epochs.push(record);

        let stop = stopper.observe(eval.loss);
        best_val_loss.push(stopper.lowest());
        let improved_auc = match &best {
            None => true,
            Some((_, auc, _)) => eval.auc > *auc,
        };
        if improved_auc {
            best = Some((epoch, eval.auc, params.clone()));
        }
        if stop {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_auc, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        record: RunRecord {
            epochs,
            best_epoch,
            best_val_auc,
            best_val_loss,
            stopped_early,
            wall_time_secs: started.elapsed().as_secs_f64(),
            mean_embedding_norm: mean_embedding_norm(&best_params),
            config: config.clone(),
        },
        best: best_params,
    })
}

/// The train/val/test sequences of one fold, each segmented to
/// `max_seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldData {
    pub train: Vec<InteractionSequence>,
    pub val: Vec<InteractionSequence>,
    pub test: Vec<InteractionSequence>,
}

pub fn fold_data(config: &TrainConfig, dataset: &Dataset, fold: &FoldSplit) -> FoldData {
    let seg = |idx: &[usize]| {
        Dataset {
            sequences: dataset.select(idx),
            num_skills: dataset.num_skills,
        }
        .segmented(config.max_seq_len, config.segment_mode)
        .sequences
    };
    FoldData {
        train: seg(&fold.train),
        val: seg(&fold.val),
        test: seg(&fold.test),
    }
}

pub fn train_fold(config: &TrainConfig, dataset: &Dataset, fold: &FoldSplit) -> Result<TrainOutcome, TrainError> {
    let data = fold_data(config, dataset, fold);
    train(config, dataset.num_skills, &data.train, &data.val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub epsilons: Vec<f64>,
    pub betas: Vec<f64>,
    /// `auc[i][j]`: mean best validation AUC for `epsilons[i]`, `betas[j]`.
    pub auc: Vec<Vec<f64>>,
}

impl SweepGrid {
    /// `(epsilon index, beta index)` of the largest cell; first wins ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for (i, row) in self.auc.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > self.auc[best.0][best.1] {
                    best = (i, j);
                }
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epsilon".to_string()];
        header.extend(self.betas.iter().map(|b| format!("beta={b}")));
        w.write_record(&header)?;
        for (eps, row) in self.epsilons.iter().zip(&self.auc) {
            let mut rec = vec![eps.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_line(&self) -> String {
        let (i, j) = self.argmax();
        format!(
            "best: epsilon={} beta={} val_auc={:.4}",
            self.epsilons[i], self.betas[j], self.auc[i][j]
        )
    }
}

/// Trains every (ε, β) pair on each fold and averages the best validation
/// AUC. A β of 0 disables the adversarial term, so that column is trained
/// once per fold and shared by every ε row.
pub fn sweep(
    config: &TrainConfig,
    dataset: &Dataset,
    folds: &[FoldSplit],
    epsilons: &[f64],
    betas: &[f64],
) -> Result<SweepGrid, TrainError> {
    let mut grid = vec![vec![0.0; betas.len()]; epsilons.len()];
    for fold in folds {
        let data = fold_data(config, dataset, fold);
        let run = |eps: f64, beta: f64| -> Result<f64, TrainError> {
            let mut c = config.clone();
            c.epsilon = eps;
            c.beta = beta;
            c.fold = fold.fold_index;
            log::info!("sweep fold {} epsilon {eps} beta {beta}", fold.fold_index);
            Ok(train(&c, dataset.num_skills, &data.train, &data.val)?.record.best_val_auc)
        };
        for (j, &beta) in betas.iter().enumerate() {
            if beta == 0.0 {
                let v = run(0.0, 0.0)?;
                for row in grid.iter_mut() {
                    row[j] += v;
                }
                continue;
            }
            for (i, &eps) in epsilons.iter().enumerate() {
                grid[i][j] += run(eps, beta)?;
            }
        }
    }
    let n = folds.len().max(1) as f64;
    for row in &mut grid {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(SweepGrid {
        epsilons: epsilons.to_vec(),
        betas: betas.to_vec(),
        auc: grid,
    })
}
