//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng as _;

use atkt::adversarial::{fgsm_perturbation, PerturbationScope};
use atkt::checkpoint::Checkpoint;
use atkt::config::{AdversarialPass, TrainConfig};
use atkt::data::{generate_synthetic, make_batches, make_folds, Batch, InteractionSequence, SyntheticSpec};
use atkt::gradcheck::{grad_check, random_batch, tiny_config};
use atkt::linalg::{l2_norm, rng_for, rng_for_indexed};
use atkt::metrics::{auc, auc_bruteforce, PredictionLog};
use atkt::model::{backward_batch, embed_interaction, forward_batch, forward_one, AttentionWindow, ModelConfig, ModelParams};
use atkt::training::{adam_step, evaluate, train, train_fold, AdamHyper, AdamState};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let mut checked = 0;
    for seed in 0..20u64 {
        for (attention, window) in [
            (true, AttentionWindow::Causal),
            (true, AttentionWindow::Global),
            (false, AttentionWindow::Causal),
        ] {
            let r = grad_check(&tiny_config(attention, window), seed).map_err(|e| e.to_string())?;
            checked += r.checked;
            worst = worst.max(r.max_rel_error);
            if !r.passed() {
                failed.push(format!("seed {seed} {attention}/{window:?}: {:?}", r.worst));
            }
        }
    }
    check(
        failed.is_empty() && worst <= 1e-4,
        format!("{checked} coordinates over 20 seeds, max rel error {worst:.2e} {failed:?}"),
    )
}

fn batch_loss(p: &ModelParams, batch: &Batch, offsets: &[Vec<Vec<f64>>]) -> f64 {
    forward_batch(p, batch, Some(offsets)).unwrap().loss
}

fn fgsm_properties() -> Outcome {
    let mut norm_err = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = rng_for(seed, "acceptance-norm");
        let steps = rng.random_range(1..40);
        let g: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..7).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let eps = rng.random_range(0.01..15.0);
        let r = fgsm_perturbation(&g, eps).map_err(|e| e.to_string())?;
        norm_err = norm_err.max((r.norm() - eps).abs());
    }

    let cfg = ModelConfig {
        num_skills: 6,
        skill_dim: 8,
        response_dim: 4,
        hidden_dim: 8,
        attention_dim: 8,
        attention: true,
        window: AttentionWindow::Causal,
    };
    let mut wins = 0;
    for seed in 0..100u64 {
        let p = ModelParams::init(cfg, &mut rng_for(seed, "acceptance-fgsm-init"));
        let mut rng = rng_for(seed, "acceptance-fgsm");
        let batch = random_batch(cfg.num_skills, 1, 12, &mut rng);
        let trace = forward_batch(&p, &batch, None).unwrap();
        let grads = backward_batch(&p, &trace, &batch).unwrap();
        let (skills, responses) = batch.row(0);
        let scale = skills
            .iter()
            .zip(responses)
            .map(|(&s, &a)| l2_norm(&embed_interaction(&p, s, a).unwrap()))
            .sum::<f64>()
            / skills.len() as f64;
        let eps = 1e-3 * scale;
        let r = fgsm_perturbation(&grads.d_embed[0], eps).unwrap();
        let raw: Vec<Vec<f64>> = r
            .offsets
            .iter()
            .map(|v| v.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let rho = fgsm_perturbation(&raw, eps).unwrap();
        let zero = vec![vec![0.0; cfg.input_dim()]; skills.len()];
        let base = batch_loss(&p, &batch, &[zero]);
        let adv = batch_loss(&p, &batch, &[r.offsets]) - base;
        let rand = batch_loss(&p, &batch, &[rho.offsets]) - base;
        if adv >= rand {
            wins += 1;
        }
    }
    check(
        norm_err <= 1e-9 && wins >= 95,
        format!("max |norm - eps| {norm_err:.2e}, FGSM >= random in {wins}/100"),
    )
}

fn auc_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let mut rng = rng_for(seed, "acceptance-auc");
        let n = rng.random_range(2..=500);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let levels = rng.random_range(2..20) as f64;
        let probs: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(0.0..1.0f64) * levels).round() / levels)
            .collect();
        let log = PredictionLog::from_scores(probs, labels);
        let a = auc(&log).map_err(|e| e.to_string())?;
        let b = auc_bruteforce(&log).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs());
    }
    check(worst <= 1e-12, format!("max |rank - pairwise| {worst:.2e} over 200 tied logs"))
}

fn small_config() -> TrainConfig {
    TrainConfig {
        skill_dim: 16,
        response_dim: 8,
        hidden_dim: 32,
        attention_dim: 16,
        ..TrainConfig::default()
    }
}

fn capacity() -> Outcome {
    let data = generate_synthetic(&SyntheticSpec {
        num_students: 8,
        num_skills: 5,
        seq_len: 20,
        learn_rate: 0.3,
        guess: 0.2,
        slip: 0.1,
        seed: 3,
    })
    .map_err(|e| e.to_string())?;
    let config = TrainConfig {
        lr: 0.01,
        max_epochs: 500,
        patience: 0,
        batch_size: 8,
        ..small_config()
    };
    let out = train(&config, 5, &data.sequences, &data.sequences).map_err(|e| e.to_string())?;
    let hit = out
        .record
        .epochs
        .iter()
        .find(|e| e.val_loss < 0.05 && e.val_auc == 1.0);
    match hit {
        Some(e) => Ok(format!("train BCE {:.4} with AUC 1.0 at epoch {}", e.val_loss, e.epoch)),
        None => {
            let last = out.record.epochs.last().unwrap();
            Err(format!("final train BCE {:.4}, AUC {:.4}", last.val_loss, last.val_auc))
        }
    }
}

fn sigmoid_ref(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot_ref(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// A plain LSTM feeding the second half of the head, written against the
/// raw parameter arrays.
fn plain_lstm_predictions(p: &ModelParams, skills: &[usize], responses: &[u8]) -> Vec<f64> {
    let h = p.config.hidden_dim;
    let gate_w = p.gate_w.as_slice();
    let gate_u = p.gate_u.as_slice();
    let inputs = p.config.input_dim();
    let mut hidden = vec![0.0; h];
    let mut cell = vec![0.0; h];
    let mut out = Vec::new();
    for t in 0..skills.len() - 1 {
        let s = p.skill_emb.row(skills[t]);
        let e: Vec<f64> = if responses[t] == 1 {
            s.iter().chain(p.response_emb.row(1)).copied().collect()
        } else {
            p.response_emb.row(0).iter().chain(s).copied().collect()
        };
        let mut z = vec![0.0; 4 * h];
        for r in 0..4 * h {
            let wx = dot_ref(&gate_w[r * inputs..(r + 1) * inputs], &e);
            let uh = dot_ref(&gate_u[r * h..(r + 1) * h], &hidden);
            z[r] = wx + uh + p.gate_b[r];
        }
        let mut next_h = vec![0.0; h];
        for u in 0..h {
            let i = sigmoid_ref(z[u]);
            let f = sigmoid_ref(z[h + u]);
            let g = z[2 * h + u].tanh();
            let o = sigmoid_ref(z[3 * h + u]);
            cell[u] = f * cell[u] + i * g;
            next_h[u] = o * cell[u].tanh();
        }
        hidden = next_h;
        let k = skills[t + 1];
        let logit = dot_ref(&p.head_w.row(k)[h..], &hidden) + p.head_b[k];
        out.push(sigmoid_ref(logit));
    }
    out
}

fn atkt_bin(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_atkt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("atkt {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn ablation_wiring() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    fs::write(
        p.join("small.cfg"),
        "skill_dim = 8\nresponse_dim = 4\nhidden_dim = 8\nattention_dim = 8\nmax_epochs = 2\nlr = 0.01\n",
    )
    .map_err(|e| e.to_string())?;
    atkt_bin(&["synth", "--out", "d.txt", "--students", "50", "--skills", "6", "--len", "16"], p)?;
    atkt_bin(
        &["train", "--config", "small.cfg", "--data", "d.txt", "--out", "plain", "--no-attention", "--no-timestamp"],
        p,
    )?;
    let ck = Checkpoint::parse(&fs::read_to_string(p.join("plain/checkpoint.atkt")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    if ck.config.attention || ck.params.config.attention {
        return Err("--no-attention did not reach the model config".into());
    }
    let data = generate_synthetic(&SyntheticSpec {
        num_students: 50,
        num_skills: 6,
        seq_len: 16,
        learn_rate: 0.3,
        guess: 0.2,
        slip: 0.1,
        seed: 1,
    })
    .map_err(|e| e.to_string())?;
    let mut compared = 0;
    for seq in &data.sequences {
        let trace = forward_one(&ck.params, &seq.skills, &seq.responses, None).map_err(|e| e.to_string())?;
        let reference = plain_lstm_predictions(&ck.params, &seq.skills, &seq.responses);
        for (t, want) in trace.targets.iter().zip(&reference) {
            if t.prob.to_bits() != want.to_bits() {
                return Err(format!("prediction {} differs from reference {want}", t.prob));
            }
            compared += 1;
        }
    }

    let config = TrainConfig {
        max_epochs: 1,
        ..small_config()
    };
    let mut params = ModelParams::init(config.model_config(6), &mut rng_for(4, "init"));
    let mut adam = AdamState::new(&params);
    let mut windows = 0;
    let mut worst = 0.0f64;
    for batch in make_batches(&data.sequences, config.batch_size, 6, Some(&mut rng_for_indexed(4, "batches", 0))) {
        let trace = forward_batch(&params, &batch, None).map_err(|e| e.to_string())?;
        for seq in &trace.sequences {
            for t in seq.targets.iter().filter(|t| !t.weights.is_empty()) {
                worst = worst.max((t.weights.iter().sum::<f64>() - 1.0).abs());
                windows += 1;
            }
        }
        let grads = backward_batch(&params, &trace, &batch).map_err(|e| e.to_string())?;
        adam_step(&mut params, &grads.params, &mut adam, config.lr, AdamHyper::default());
    }
    check(
        worst <= 1e-10 && windows > 0,
        format!("{compared} predictions bit-identical; {windows} windows, max |sum - 1| {worst:.2e}"),
    )
}

fn regularization_effect() -> Outcome {
    let data = generate_synthetic(&SyntheticSpec {
        num_students: 2000,
        num_skills: 10,
        seq_len: 50,
        learn_rate: 0.3,
        guess: 0.2,
        slip: 0.1,
        seed: 77,
    })
    .map_err(|e| e.to_string())?;
    let base = TrainConfig {
        hidden_dim: 32,
        attention_dim: 32,
        lr: 0.01,
        max_epochs: 20,
        patience: 0,
        epsilon: 10.0,
        perturbation_scope: PerturbationScope::PerBatch,
        ..small_config()
    };
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let folds = make_folds(data.sequences.len(), seed).map_err(|e| e.to_string())?;
        let mut best = [0.0; 2];
        for (i, beta) in [0.0, 1.0].into_iter().enumerate() {
            let c = TrainConfig {
                seed,
                beta,
                ..base.clone()
            };
            best[i] = train_fold(&c, &data, &folds[0]).map_err(|e| e.to_string())?.record.min_val_loss();
        }
        if best[1] <= best[0] {
            wins += 1;
        }
        pairs.push(format!("{:.4}/{:.4}", best[1], best[0]));
    }
    check(wins >= 4, format!("AT <= no-AT best val loss in {wins}/5 seeds (AT/no-AT: {})", pairs.join(" ")))
}

fn beta_zero_equivalence() -> Outcome {
    let data = generate_synthetic(&SyntheticSpec {
        num_students: 120,
        num_skills: 8,
        seq_len: 25,
        learn_rate: 0.3,
        guess: 0.2,
        slip: 0.1,
        seed: 5,
    })
    .map_err(|e| e.to_string())?;
    let folds = make_folds(data.sequences.len(), 2).map_err(|e| e.to_string())?;
    let run = |adversarial: AdversarialPass| {
        let c = TrainConfig {
            max_epochs: 8,
            seed: 2,
            epsilon: 10.0,
            beta: 0.0,
            adversarial,
            ..small_config()
        };
        train_fold(&c, &data, &folds[0]).map(|o| o.record)
    };
    let on = run(AdversarialPass::Always).map_err(|e| e.to_string())?;
    let off = run(AdversarialPass::Off).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    if on.epochs.len() != off.epochs.len() {
        return Err("trajectories differ in length".into());
    }
    for (a, b) in on.epochs.iter().zip(&off.epochs) {
        for (x, y) in [
            (a.train_loss, b.train_loss),
            (a.val_loss, b.val_loss),
            (a.val_auc, b.val_auc),
            (a.lr, b.lr),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    check(worst <= 1e-9, format!("{} epochs, max trajectory difference {worst:.2e}", on.epochs.len()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    fs::write(
        p.join("small.cfg"),
        "skill_dim = 8\nresponse_dim = 4\nhidden_dim = 8\nattention_dim = 8\nmax_epochs = 2\nlr = 0.01\n\
         epsilon = 5\nbeta = 0.5\nsweep_epsilons = 1,5\nsweep_betas = 0,1\n",
    )
    .map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        atkt_bin(&["synth", "--out", &format!("{run}.txt"), "--students", "40", "--skills", "5", "--len", "14"], p)?;
        atkt_bin(
            &["train", "--config", "small.cfg", "--data", "a.txt", "--out", &format!("{run}/train"), "--no-timestamp"],
            p,
        )?;
        atkt_bin(
            &["eval", "--checkpoint", &format!("{run}/train/checkpoint.atkt"), "--data", "a.txt", "--out", &format!("{run}/preds.csv")],
            p,
        )?;
        atkt_bin(&["sweep", "--config", "small.cfg", "--data", "a.txt", "--out", &format!("{run}/sweep")], p)?;
        atkt_bin(
            &["trace", "--checkpoint", &format!("{run}/train/checkpoint.atkt"), "--data", "a.txt", "--out", &format!("{run}/trace")],
            p,
        )?;
        files = vec!["train/run.csv", "preds.csv", "sweep/sweep.csv", "trace/trace.csv", "trace/bars.csv", "train/checkpoint.atkt"];
    }
    if fs::read(p.join("a.txt")).ok() != fs::read(p.join("b.txt")).ok() {
        return Err("synthetic data differs".into());
    }
    for f in &files {
        let a = fs::read(p.join("a").join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(p.join("b").join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{f} differs between reruns"));
        }
    }
    Ok(format!("{} outputs byte-identical across reruns", files.len() + 1))
}

fn checkpoint_round_trip() -> Outcome {
    let data = generate_synthetic(&SyntheticSpec {
        num_students: 30,
        num_skills: 5,
        seq_len: 15,
        learn_rate: 0.3,
        guess: 0.2,
        slip: 0.1,
        seed: 8,
    })
    .map_err(|e| e.to_string())?;
    let config = TrainConfig {
        max_epochs: 3,
        ..small_config()
    };
    let out = train(&config, 5, &data.sequences, &data.sequences).map_err(|e| e.to_string())?;
    let ck = Checkpoint {
        config: config.clone(),
        params: out.best.clone(),
        meta: Vec::new(),
    };
    let back = Checkpoint::parse(&ck.to_text()).map_err(|e| e.to_string())?;
    let a = evaluate(&out.best, &data.sequences, 24).map_err(|e| e.to_string())?.auc;
    let b = evaluate(&back.params, &data.sequences, 24).map_err(|e| e.to_string())?.auc;
    check((a - b).abs() <= 1e-12, format!("AUC {a:.6} before, {b:.6} after reload"))
}

fn causality() -> Outcome {
    let cfg = tiny_config(true, AttentionWindow::Causal);
    let p = ModelParams::init(cfg, &mut rng_for(11, "init"));
    let seq = InteractionSequence::new("c", vec![0, 1, 2, 3, 1, 0, 2], vec![1, 0, 1, 1, 0, 0, 1]);
    let n = seq.len();
    let base = forward_one(&p, &seq.skills, &seq.responses, None).map_err(|e| e.to_string())?;
    for k in 0..n {
        let mut offsets = vec![vec![0.0; cfg.input_dim()]; n];
        offsets[k].iter_mut().for_each(|x| *x = 1e-3);
        let moved = forward_one(&p, &seq.skills, &seq.responses, Some(&offsets)).map_err(|e| e.to_string())?;
        for (idx, (a, b)) in base.targets.iter().zip(&moved.targets).enumerate() {
            let t = idx + 1;
            let changed = a.prob != b.prob;
            if changed != (t > k) {
                return Err(format!("perturbing step {k} {} prediction at step {t}", if changed { "changed" } else { "left" }));
            }
        }
    }
    Ok(format!("influence is strictly upper-triangular over {n} steps"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 gradient oracle", gradient_oracle),
        ("2 FGSM properties", fgsm_properties),
        ("3 AUC oracle equivalence", auc_oracle),
        ("4 capacity sanity", capacity),
        ("5 attention ablation wiring", ablation_wiring),
        ("6 regularization effect", regularization_effect),
        ("7 beta=0 equivalence", beta_zero_equivalence),
        ("8 determinism", determinism),
        ("checkpoint round trip", checkpoint_round_trip),
        ("causality", causality),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{name}] {detail} ({secs:.1}s)"),
            Err(detail) => {
                failures += 1;
                println!("FAIL [{name}] {detail} ({secs:.1}s)");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
