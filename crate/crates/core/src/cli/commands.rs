use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{
    generate_synthetic, make_folds, parse_triple_line, Dataset, FoldSplit, InteractionSequence, SegmentMode,
    SyntheticSpec, NUM_FOLDS,
};
use crate::metrics::{mean_std, PredictionLog};
use crate::training::{evaluate, fold_data, sweep, train_fold, Evaluation, TrainError};

use super::svg;
use super::trace::{default_tracked, mastery_trace};
use super::{Cli, CliError, Command, EvalArgs, PrepareArgs, RunArgs, SegmentArg, SplitArg, SynthArgs, TraceArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.atkt";
pub const LAST_GOOD_FILE: &str = "checkpoint.last-good.atkt";

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare(a) => prepare(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Sweep(a) => sweep_cmd(&a),
        Command::Trace(a) => trace_cmd(&a),
        Command::Synth(a) => synth(&a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Numerical(format!("csv: {e}")))?;
    Ok(buf)
}

fn read_dataset(path: &Path) -> Result<(Dataset, usize), CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parsed = parse_triple_line(&text)?;
    parsed.dataset.validate()?;
    Ok((parsed.dataset, parsed.dropped_short))
}

fn load_config(args: &RunArgs) -> Result<TrainConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(fold) = args.fold {
        config.fold = fold;
    }
    if args.no_attention {
        config.attention = false;
    }
    if config.fold >= NUM_FOLDS {
        return Err(CliError::Usage(format!("fold must be below {NUM_FOLDS}, got {}", config.fold)));
    }
    Ok(config)
}

fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn prepare(a: &PrepareArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.data).map_err(io_err(&a.data))?;
    let parsed = parse_triple_line(&text)?;
    if parsed.dataset.sequences.is_empty() && parsed.dropped_short == 0 {
        return Err(CliError::Data(format!("{}: no interaction groups", a.data.display())));
    }
    parsed.dataset.validate()?;
    let mode = match a.segment {
        SegmentArg::Split => SegmentMode::Split,
        SegmentArg::Truncate => SegmentMode::Truncate,
    };
    let prepared = parsed.dataset.segmented(a.max_seq_len, mode);
    write_file(&a.out, prepared.to_triple_lines())?;
    let st = prepared.stats();
    println!(
        "{} students, {} skills, {} responses",
        group_digits(st.students),
        group_digits(st.skills),
        group_digits(st.responses)
    );
    if parsed.dropped_short > 0 {
        println!("dropped {} sequences shorter than 2", parsed.dropped_short);
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let ds = generate_synthetic(&SyntheticSpec {
        num_students: a.students,
        num_skills: a.skills,
        seq_len: a.len,
        learn_rate: a.learn,
        guess: a.guess,
        slip: a.slip,
        seed: a.seed,
    })?;
    write_file(&a.out, ds.to_triple_lines())
}

fn fold_indices(all: bool, single: usize) -> Vec<usize> {
    if all {
        (0..NUM_FOLDS).collect()
    } else {
        vec![single]
    }
}

fn fold_dir(out: &Path, all: bool, k: usize) -> PathBuf {
    if all {
        out.join(format!("fold-{k}"))
    } else {
        out.to_path_buf()
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct FoldResult {
    best_val_auc: f64,
    test: Evaluation,
}

fn train_one(
    config: &TrainConfig,
    dataset: &Dataset,
    fold: &FoldSplit,
    out: &Path,
    no_timestamp: bool,
) -> Result<FoldResult, CliError> {
    log::info!("training fold {} seed {}", fold.fold_index, config.seed);
    let meta = |extra: Vec<(&str, String)>| -> Vec<(String, String)> {
        let mut m = vec![
            ("fold".to_string(), fold.fold_index.to_string()),
            ("seed".to_string(), config.seed.to_string()),
            ("num_sequences".to_string(), dataset.sequences.len().to_string()),
        ];
        m.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
        m
    };
    let outcome = match train_fold(config, dataset, fold) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            batch,
            loss,
            last_good,
        }) => {
            let ck = Checkpoint {
                config: config.clone(),
                params: *last_good,
                meta: meta(vec![("diverged_epoch", epoch.to_string()), ("diverged_batch", batch.to_string())]),
            };
            let path = out.join(LAST_GOOD_FILE);
            write_file(&path, ck.to_text())?;
            return Err(CliError::Numerical(format!(
                "loss {loss} at epoch {epoch}, batch {batch}; last good parameters saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let rec = &outcome.record;
    let data = fold_data(config, dataset, fold);
    let test = evaluate(&outcome.best, &data.test, config.batch_size)?;

    let ck = Checkpoint {
        config: config.clone(),
        params: outcome.best.clone(),
        meta: meta(vec![
            ("best_epoch", rec.best_epoch.to_string()),
            ("best_val_auc", rec.best_val_auc.to_string()),
        ]),
    };
    write_file(&out.join(CHECKPOINT_FILE), ck.to_text())?;
    write_file(&out.join("run.csv"), csv_bytes(|b| rec.write_csv(b))?)?;
    let train_curve: Vec<f64> = rec.epochs.iter().map(|e| e.train_loss).collect();
    let val_curve: Vec<f64> = rec.epochs.iter().map(|e| e.val_loss).collect();
    write_file(&out.join("loss_curve.svg"), svg::loss_curve(&train_curve, &val_curve))?;

    let grad_norm = rec.epochs.iter().map(|e| e.embed_grad_norm).sum::<f64>() / rec.epochs.len().max(1) as f64;
    let mut summary = format!(
        "fold = {}\nseed = {}\nepochs = {}\nbest_epoch = {}\nbest_val_auc = {}\nmin_val_loss = {}\n\
         test_loss = {}\ntest_auc = {}\nstopped_early = {}\nmean_embedding_norm = {}\nmean_embed_grad_norm = {}\n",
        fold.fold_index,
        config.seed,
        rec.epochs.len(),
        rec.best_epoch,
        rec.best_val_auc,
        rec.min_val_loss(),
        test.loss,
        test.auc,
        rec.stopped_early,
        rec.mean_embedding_norm,
        grad_norm,
    );
    if !no_timestamp {
        summary.push_str(&format!(
            "wall_time_secs = {:.3}\nfinished_at_unix = {}\n",
            rec.wall_time_secs,
            unix_now()
        ));
    }
    write_file(&out.join("summary.txt"), summary)?;
    println!(
        "fold {}: best epoch {}, val AUC {:.4}, test AUC {:.4}",
        fold.fold_index, rec.best_epoch, rec.best_val_auc, test.auc
    );
    Ok(FoldResult {
        best_val_auc: rec.best_val_auc,
        test,
    })
}

fn print_mean_std(label: &str, values: &[f64]) {
    let (m, s) = mean_std(values);
    println!("{label}: {m:.4} ± {s:.4}");
}

fn train_cmd(a: &RunArgs) -> Result<(), CliError> {
    let config = load_config(a)?;
    let (dataset, _) = read_dataset(&a.data)?;
    let folds = make_folds(dataset.sequences.len(), config.seed)?;
    let mut rows = Vec::new();
    for k in fold_indices(a.all_folds, config.fold) {
        let mut c = config.clone();
        c.fold = k;
        let r = train_one(&c, &dataset, &folds[k], &fold_dir(&a.out, a.all_folds, k), a.no_timestamp)?;
        rows.push((k, r));
    }
    if a.all_folds {
        let bytes = csv_bytes(|b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["fold", "best_val_auc", "test_loss", "test_auc"])?;
            for (k, r) in &rows {
                w.write_record([
                    k.to_string(),
                    r.best_val_auc.to_string(),
                    r.test.loss.to_string(),
                    r.test.auc.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        })?;
        write_file(&a.out.join("folds.csv"), bytes)?;
        let aucs: Vec<f64> = rows.iter().map(|(_, r)| r.test.auc).collect();
        print_mean_std("test AUC", &aucs);
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Checkpoint::parse(&text)?)
}

fn check_skills(ck: &Checkpoint, dataset: &Dataset) -> Result<(), CliError> {
    let model = ck.params.config.num_skills;
    if dataset.num_skills > model {
        return Err(CliError::Data(format!(
            "dataset uses {} skills but the checkpoint was trained on {model}",
            dataset.num_skills
        )));
    }
    Ok(())
}

fn split_sequences(
    ck: &Checkpoint,
    dataset: &Dataset,
    fold: usize,
    split: SplitArg,
) -> Result<Vec<InteractionSequence>, CliError> {
    if split == SplitArg::All {
        return Ok(dataset.segmented(ck.config.max_seq_len, ck.config.segment_mode).sequences);
    }
    if let Some(n) = ck.meta_value("num_sequences") {
        if n != dataset.sequences.len().to_string() {
            return Err(CliError::Data(format!(
                "checkpoint split was built over {n} sequences, dataset has {}",
                dataset.sequences.len()
            )));
        }
    }
    let folds = make_folds(dataset.sequences.len(), ck.config.seed)?;
    let f = folds
        .get(fold)
        .ok_or_else(|| CliError::Usage(format!("fold must be below {NUM_FOLDS}, got {fold}")))?;
    let data = fold_data(&ck.config, dataset, f);
    Ok(match split {
        SplitArg::Train => data.train,
        SplitArg::Val => data.val,
        _ => data.test,
    })
}

fn eval_one(ck: &Checkpoint, dataset: &Dataset, fold: usize, split: SplitArg) -> Result<Evaluation, CliError> {
    check_skills(ck, dataset)?;
    let seqs = split_sequences(ck, dataset, fold, split)?;
    Ok(evaluate(&ck.params, &seqs, ck.config.batch_size)?)
}

fn write_log(path: &Path, log: &PredictionLog) -> Result<(), CliError> {
    write_file(path, csv_bytes(|b| log.write_csv(b))?)
}

fn eval_cmd(a: &EvalArgs) -> Result<(), CliError> {
    let (dataset, _) = read_dataset(&a.data)?;
    if a.all_folds {
        let mut aucs = Vec::new();
        for k in 0..NUM_FOLDS {
            let ck = load_checkpoint(&a.checkpoint.join(format!("fold-{k}")).join(CHECKPOINT_FILE))?;
            let ev = eval_one(&ck, &dataset, k, a.split)?;
            println!("fold {k}: AUC {:.4}", ev.auc);
            if let Some(dir) = &a.out {
                write_log(&dir.join(format!("preds-fold-{k}.csv")), &ev.log)?;
            }
            aucs.push(ev.auc);
        }
        print_mean_std("AUC", &aucs);
        return Ok(());
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let fold = match a.fold {
        Some(k) => k,
        None => ck
            .meta_value("fold")
            .and_then(|v| v.parse().ok())
            .unwrap_or(ck.config.fold),
    };
    let ev = eval_one(&ck, &dataset, fold, a.split)?;
    println!("AUC {:.4} loss {:.6} ({} predictions)", ev.auc, ev.loss, ev.log.len());
    if let Some(path) = &a.out {
        write_log(path, &ev.log)?;
    }
    Ok(())
}

fn sweep_cmd(a: &RunArgs) -> Result<(), CliError> {
    let config = load_config(a)?;
    let (dataset, _) = read_dataset(&a.data)?;
    let all = make_folds(dataset.sequences.len(), config.seed)?;
    let folds: Vec<FoldSplit> = fold_indices(a.all_folds, config.fold)
        .into_iter()
        .map(|k| all[k].clone())
        .collect();
    let grid = sweep(&config, &dataset, &folds, &config.sweep_epsilons, &config.sweep_betas)?;
    write_file(&a.out.join("sweep.csv"), csv_bytes(|b| grid.write_csv(b))?)?;
    let line = grid.summary_line();
    write_file(&a.out.join("summary.txt"), format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn trace_cmd(a: &TraceArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (dataset, _) = read_dataset(&a.data)?;
    check_skills(&ck, &dataset)?;
    let seq = match &a.student {
        Some(id) => dataset
            .sequences
            .iter()
            .find(|s| &s.student_id == id)
            .ok_or_else(|| CliError::Data(format!("no student {id:?} in {}", a.data.display())))?,
        None => dataset
            .sequences
            .first()
            .ok_or_else(|| CliError::Data("dataset has no usable sequences".into()))?,
    };
    let tracked = if a.skills.is_empty() {
        default_tracked(seq)
    } else {
        a.skills.clone()
    };
    let t = mastery_trace(&ck.params, seq, &tracked)?;
    write_file(&a.out.join("trace.csv"), csv_bytes(|b| t.write_grid_csv(b))?)?;
    write_file(&a.out.join("attempts.csv"), csv_bytes(|b| t.write_attempts_csv(b))?)?;
    write_file(&a.out.join("bars.csv"), csv_bytes(|b| t.write_bars_csv(b))?)?;
    write_file(&a.out.join("trace.svg"), t.to_svg())?;
    println!(
        "traced student {} over {} steps, {} skills",
        seq.student_id,
        t.grid.len(),
        t.skill_ids.len()
    );
    Ok(())
}
