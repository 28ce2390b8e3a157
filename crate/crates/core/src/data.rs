//! Student interaction logs: parsing, cross-validation splits, batching and
//! a synthetic two-state mastery generator.
//!
//! The on-disk format is the usual triple-line layout used by preprocessed
//! knowledge-tracing benchmarks:
//!
//! ```text
//! 3            <- interaction count, optionally "3,student-id"
//! 1,2,1        <- skill ids
//! 1,0,1        <- responses (0 wrong, 1 right)
//! ```

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use thiserror::Error;

use crate::linalg::{rng_for, Rng};

pub const NUM_FOLDS: usize = 5;
pub const DEFAULT_MAX_SEQ_LEN: usize = 500;
pub const DEFAULT_BATCH_SIZE: usize = 24;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("need at least {needed} sequences to build folds, got {got}")]
    TooFewSequences { needed: usize, got: usize },
    #[error("skill id {skill} out of range for {num_skills} skills")]
    SkillOutOfRange { skill: usize, num_skills: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    pub student_id: String,
    pub skills: Vec<usize>,
    pub responses: Vec<u8>,
}

impl InteractionSequence {
    pub fn new(student_id: impl Into<String>, skills: Vec<usize>, responses: Vec<u8>) -> Self {
        assert_eq!(skills.len(), responses.len(), "skills/responses length mismatch");
        Self {
            student_id: student_id.into(),
            skills,
            responses,
        }
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    /// Number of prediction targets (every step but the first).
    pub fn num_targets(&self) -> usize {
        self.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub sequences: Vec<InteractionSequence>,
    pub num_skills: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DatasetStats {
    pub students: usize,
    pub skills: usize,
    pub responses: usize,
}

impl Dataset {
    /// Builds a dataset with `num_skills = 1 + max skill id`, or `min_skills`
    /// when that is larger.
    pub fn new(sequences: Vec<InteractionSequence>, min_skills: Option<usize>) -> Self {
        let inferred = sequences
            .iter()
            .flat_map(|s| s.skills.iter())
            .max()
            .map_or(0, |m| m + 1);
        Self {
            sequences,
            num_skills: inferred.max(min_skills.unwrap_or(0)),
        }
    }

    pub fn stats(&self) -> DatasetStats {
        let mut seen = vec![false; self.num_skills];
        for s in &self.sequences {
            for &k in &s.skills {
                seen[k] = true;
            }
        }
        DatasetStats {
            students: self.sequences.len(),
            skills: seen.iter().filter(|&&b| b).count(),
            responses: self.sequences.iter().map(InteractionSequence::len).sum(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for s in &self.sequences {
            if let Some(&skill) = s.skills.iter().find(|&&k| k >= self.num_skills) {
                return Err(DataError::SkillOutOfRange {
                    skill,
                    num_skills: self.num_skills,
                });
            }
        }
        Ok(())
    }

    /// Writes the triple-line format. The count line always carries the
    /// student id (`n,id`), which the parser reads back.
    pub fn to_triple_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.sequences {
            let _ = writeln!(out, "{},{}", s.len(), s.student_id);
            out.push_str(&join(&s.skills));
            out.push('\n');
            out.push_str(&join(&s.responses));
            out.push('\n');
        }
        out
    }

    pub fn segmented(&self, max_len: usize, mode: SegmentMode) -> Dataset {
        Dataset {
            sequences: self
                .sequences
                .iter()
                .flat_map(|s| segment_long(s, max_len, mode))
                .collect(),
            num_skills: self.num_skills,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Vec<InteractionSequence> {
        indices.iter().map(|&i| self.sequences[i].clone()).collect()
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    pub dataset: Dataset,
    /// Groups dropped because they held fewer than two interactions.
    pub dropped_short: usize,
}

fn parse_err(line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_list<T, F>(line_no: usize, text: &str, what: &str, mut check: F) -> Result<Vec<T>, DataError>
where
    F: FnMut(u64) -> Option<T>,
{
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|tok| {
            let tok = tok.trim();
            let v: u64 = tok
                .parse()
                .map_err(|_| parse_err(line_no, format!("non-integer {what} token {tok:?}")))?;
            check(v).ok_or_else(|| parse_err(line_no, format!("invalid {what} value {v}")))
        })
        .collect()
}

/// Parses triple-line text. LF and CRLF endings are accepted, blank lines
/// before a count line are ignored. Groups with fewer than two interactions are
/// dropped and counted.
pub fn parse_triple_line(text: &str) -> Result<ParseOutcome, DataError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').trim()));

    let mut sequences = Vec::new();
    let mut dropped_short = 0usize;
    let mut group = 0usize;
    while let Some((count_line, header)) = lines.by_ref().find(|(_, l)| !l.is_empty()) {
        let (count_tok, id) = match header.split_once(',') {
            Some((c, id)) => (c.trim(), id.trim().to_string()),
            None => (header, group.to_string()),
        };
        let n: usize = count_tok
            .parse()
            .map_err(|_| parse_err(count_line, format!("non-integer count {count_tok:?}")))?;
        let (skill_line, skill_text) = lines
            .next()
            .ok_or_else(|| parse_err(count_line, "missing skill line"))?;
        let (resp_line, resp_text) = lines
            .next()
            .ok_or_else(|| parse_err(skill_line, "missing response line"))?;
        let skills = parse_list(skill_line, skill_text, "skill", |v| usize::try_from(v).ok())?;
        let responses = parse_list(resp_line, resp_text, "response", |v| match v {
            0 | 1 => Some(v as u8),
            _ => None,
        })?;
        if skills.len() != n {
            return Err(parse_err(
                skill_line,
                format!("expected {n} skill ids, found {}", skills.len()),
            ));
        }
        if responses.len() != n {
            return Err(parse_err(
                resp_line,
                format!("expected {n} responses, found {}", responses.len()),
            ));
        }
        group += 1;
        if n < 2 {
            dropped_short += 1;
            continue;
        }
        sequences.push(InteractionSequence::new(id, skills, responses));
    }
    if dropped_short > 0 {
        log::info!("dropped {dropped_short} sequences shorter than 2 interactions");
    }
    Ok(ParseOutcome {
        dataset: Dataset::new(sequences, None),
        dropped_short,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SegmentMode {
    /// Split into consecutive chunks of at most `max_len`.
    #[default]
    Split,
    /// Keep only the first `max_len` interactions.
    Truncate,
}

pub fn segment_long(seq: &InteractionSequence, max_len: usize, mode: SegmentMode) -> Vec<InteractionSequence> {
    assert!(max_len >= 2, "max_len must be at least 2");
    let chunks: Vec<InteractionSequence> = seq
        .skills
        .chunks(max_len)
        .zip(seq.responses.chunks(max_len))
        .map(|(s, r)| InteractionSequence::new(seq.student_id.clone(), s.to_vec(), r.to_vec()))
        .filter(|c| c.len() >= 2)
        .collect();
    match mode {
        SegmentMode::Split => chunks,
        SegmentMode::Truncate => chunks.into_iter().take(1).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Student-level 5-fold split. Students are shuffled once by `seed` and cut
/// into five near-equal parts; fold `k` tests on part `k`, validates on part
/// `(k + 1) % 5` and trains on the other three (3:1:1).
pub fn make_folds(num_sequences: usize, seed: u64) -> Result<Vec<FoldSplit>, DataError> {
    if num_sequences < NUM_FOLDS {
        return Err(DataError::TooFewSequences {
            needed: NUM_FOLDS,
            got: num_sequences,
        });
    }
    let mut order: Vec<usize> = (0..num_sequences).collect();
    order.shuffle(&mut rng_for(seed, "folds"));

    let base = num_sequences / NUM_FOLDS;
    let extra = num_sequences % NUM_FOLDS;
    // Larger parts occupy non-adjacent positions first so that every
    // (test, val) neighbour pair stays within one sequence of 2/5 of n.
    const SPREAD: [usize; NUM_FOLDS] = [0, 2, 4, 1, 3];
    let mut parts = Vec::with_capacity(NUM_FOLDS);
    let mut start = 0;
    for p in 0..NUM_FOLDS {
        let rank = SPREAD.iter().position(|&q| q == p).unwrap_or(NUM_FOLDS);
        let size = base + usize::from(rank < extra);
        parts.push(order[start..start + size].to_vec());
        start += size;
    }

    Ok((0..NUM_FOLDS)
        .map(|k| {
            let val_part = (k + 1) % NUM_FOLDS;
            let train = (0..NUM_FOLDS)
                .filter(|&p| p != k && p != val_part)
                .flat_map(|p| parts[p].iter().copied())
                .collect();
            FoldSplit {
                fold_index: k,
                train,
                val: parts[val_part].clone(),
                test: parts[k].clone(),
            }
        })
        .collect())
}

/// Padded mini-batch. Padded skill cells hold `pad_skill` (= number of
/// skills) and padded responses hold 0; neither is ever read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub skills: Vec<Vec<usize>>,
    pub responses: Vec<Vec<u8>>,
    pub mask: Vec<Vec<bool>>,
    pub seq_lens: Vec<usize>,
    pub student_ids: Vec<String>,
    pub pad_skill: usize,
}

impl Batch {
    pub fn from_sequences(seqs: &[&InteractionSequence], pad_skill: usize) -> Self {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut batch = Batch {
            skills: Vec::with_capacity(seqs.len()),
            responses: Vec::with_capacity(seqs.len()),
            mask: Vec::with_capacity(seqs.len()),
            seq_lens: Vec::with_capacity(seqs.len()),
            student_ids: Vec::with_capacity(seqs.len()),
            pad_skill,
        };
        for s in seqs {
            let n = s.len();
            let mut skills = s.skills.clone();
            skills.resize(width, pad_skill);
            let mut responses = s.responses.clone();
            responses.resize(width, 0);
            batch.skills.push(skills);
            batch.responses.push(responses);
            batch.mask.push((0..width).map(|j| j < n).collect());
            batch.seq_lens.push(n);
            batch.student_ids.push(s.student_id.clone());
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.seq_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq_lens.is_empty()
    }

    pub fn width(&self) -> usize {
        self.skills.first().map_or(0, Vec::len)
    }

    /// The real (unpadded) prefix of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[u8]) {
        let n = self.seq_lens[i];
        (&self.skills[i][..n], &self.responses[i][..n])
    }
}

/// Groups sequences into batches of `batch_size`. With `shuffle` the order
/// is permuted by the given stream first; without it input order is kept.
pub fn make_batches(
    seqs: &[InteractionSequence],
    batch_size: usize,
    pad_skill: usize,
    shuffle: Option<&mut Rng>,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let rows: Vec<&InteractionSequence> = idx.iter().map(|&i| &seqs[i]).collect();
            Batch::from_sequences(&rows, pad_skill)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_students: usize,
    pub num_skills: usize,
    pub seq_len: usize,
    pub learn_rate: f64,
    pub guess: f64,
    pub slip: f64,
    pub seed: u64,
}

/// Two-state per-skill mastery process. Each student starts with every
/// skill unmastered; each step draws a skill uniformly, answers correctly
/// with probability `1 - slip` when mastered and `guess` otherwise, then
/// becomes mastered with probability `learn_rate`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    for (name, v) in [
        ("guess", spec.guess),
        ("slip", spec.slip),
        ("learn_rate", spec.learn_rate),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(DataError::Invalid(format!("{name} = {v} must lie in [0, 1]")));
        }
    }
    if spec.num_skills == 0 {
        return Err(DataError::Invalid("num_skills must be positive".into()));
    }
    let mut rng = rng_for(spec.seed, "synthetic");
    let sequences = (0..spec.num_students)
        .map(|student| {
            let mut mastered = vec![false; spec.num_skills];
            let mut skills = Vec::with_capacity(spec.seq_len);
            let mut responses = Vec::with_capacity(spec.seq_len);
            for _ in 0..spec.seq_len {
                let k = rng.random_range(0..spec.num_skills);
                let p_correct = if mastered[k] { 1.0 - spec.slip } else { spec.guess };
                let correct = rng.random::<f64>() < p_correct;
                if !mastered[k] && rng.random::<f64>() < spec.learn_rate {
                    mastered[k] = true;
                }
                skills.push(k);
                responses.push(u8::from(correct));
            }
            InteractionSequence::new(format!("syn{student}"), skills, responses)
        })
        .collect();
    Ok(Dataset {
        sequences,
        num_skills: spec.num_skills,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rng_for_indexed;
    use proptest::prelude::*;

    fn seq(n: usize) -> InteractionSequence {
        InteractionSequence::new("s", (0..n).map(|i| i % 3).collect(), vec![1; n])
    }

    #[test]
    fn parses_single_group() {
        let out = parse_triple_line("3\n1,2,1\n1,0,1\n").unwrap();
        assert_eq!(out.dataset.sequences.len(), 1);
        assert_eq!(out.dataset.sequences[0].skills, vec![1, 2, 1]);
        assert_eq!(out.dataset.sequences[0].responses, vec![1, 0, 1]);
        assert_eq!(out.dataset.num_skills, 3);
        assert_eq!(out.dropped_short, 0);
    }

    #[test]
    fn drops_short_groups() {
        let out = parse_triple_line("1\n5\n1\n").unwrap();
        assert!(out.dataset.sequences.is_empty());
        assert_eq!(out.dropped_short, 1);
    }

    #[test]
    fn tolerates_crlf_and_student_ids() {
        let out = parse_triple_line("2,alice\r\n0, 4\r\n0,1\r\n\r\n").unwrap();
        let s = &out.dataset.sequences[0];
        assert_eq!(s.student_id, "alice");
        assert_eq!(s.skills, vec![0, 4]);
        assert_eq!(out.dataset.num_skills, 5);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("3\n1,2\n1,0,1\n", 2),
            ("2\n1,x\n1,0\n", 2),
            ("2\n1,2\n1,2\n", 3),
            ("2\n1,2\n", 2),
            ("two\n1,2\n1,0\n", 1),
            ("2\n1,2\n0,1\n2\n1,1\n1\n", 6),
        ];
        for (text, want_line) in cases {
            match parse_triple_line(text) {
                Err(DataError::Parse { line, .. }) => assert_eq!(line, want_line, "{text:?}"),
                other => panic!("{text:?}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn folds_for_ten_sequences() {
        let folds = make_folds(10, 7).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!((f.test.len(), f.val.len(), f.train.len()), (2, 2, 6));
        }
        assert_eq!(folds, make_folds(10, 7).unwrap());
        assert_ne!(folds, make_folds(10, 8).unwrap());
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn folds_reject_tiny_datasets() {
        assert_eq!(
            make_folds(4, 1),
            Err(DataError::TooFewSequences { needed: 5, got: 4 })
        );
    }

    #[test]
    fn segmenting() {
        let lens = |n, mode| -> Vec<usize> {
            segment_long(&seq(n), 500, mode).iter().map(InteractionSequence::len).collect()
        };
        assert_eq!(lens(1200, SegmentMode::Split), vec![500, 500, 200]);
        assert_eq!(lens(500, SegmentMode::Split), vec![500]);
        assert_eq!(lens(501, SegmentMode::Split), vec![500]);
        assert_eq!(lens(1200, SegmentMode::Truncate), vec![500]);
    }

    #[test]
    fn batching_sizes_and_masks() {
        let seqs: Vec<_> = (0..50).map(|i| seq(2 + i % 4)).collect();
        let sizes: Vec<usize> = make_batches(&seqs, 24, 3, None).iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![24, 24, 2]);

        let pair = vec![seq(3), seq(5)];
        let b = &make_batches(&pair, 24, 3, None)[0];
        assert_eq!(b.width(), 5);
        assert_eq!(b.mask[0], vec![true, true, true, false, false]);
        assert_eq!(b.skills[0][3..], [3, 3]);
        assert_eq!(b.seq_lens, vec![3, 5]);
    }

    #[test]
    fn batch_order_depends_on_epoch_stream() {
        let seqs: Vec<_> = (0..30)
            .map(|i| InteractionSequence::new(format!("{i}"), vec![0, 1], vec![0, 1]))
            .collect();
        let order = |epoch| -> Vec<String> {
            let mut rng = rng_for_indexed(3, "batches", epoch);
            make_batches(&seqs, 24, 2, Some(&mut rng))
                .iter()
                .flat_map(|b| b.student_ids.clone())
                .collect()
        };
        assert_eq!(order(0), order(0));
        assert_ne!(order(0), order(1));
    }

    fn spec(guess: f64, slip: f64, learn_rate: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_students: 20,
            num_skills: 4,
            seq_len: 30,
            learn_rate,
            guess,
            slip,
            seed: 11,
        }
    }

    #[test]
    fn synthetic_forced_cases() {
        let d = generate_synthetic(&spec(0.0, 0.0, 0.0)).unwrap();
        assert!(d.sequences.iter().all(|s| s.responses.iter().all(|&r| r == 0)));
        let d = generate_synthetic(&spec(1.0, 0.7, 0.0)).unwrap();
        assert!(d.sequences.iter().all(|s| s.responses.iter().all(|&r| r == 1)));
        assert_eq!(generate_synthetic(&spec(0.2, 0.1, 0.3)), generate_synthetic(&spec(0.2, 0.1, 0.3)));
        assert!(generate_synthetic(&spec(1.5, 0.1, 0.3)).is_err());
    }

    /// Per-step correctness of the generator against a closed-form check:
    /// with `m` skills drawn uniformly, P(skill mastered before its k-th
    /// attempt) follows from the geometric learning process, so the
    /// correctness curve must climb from `guess` toward `1 - slip`.
    #[test]
    fn synthetic_correctness_rises_from_guess_to_mastery() {
        let d = generate_synthetic(&SyntheticSpec {
            num_students: 2000,
            num_skills: 10,
            seq_len: 50,
            learn_rate: 0.3,
            guess: 0.2,
            slip: 0.1,
            seed: 5,
        })
        .unwrap();
        let per_step: Vec<f64> = (0..50)
            .map(|t| d.sequences.iter().map(|s| f64::from(s.responses[t])).sum::<f64>() / 2000.0)
            .collect();
        assert!((per_step[0] - 0.2).abs() < 0.03, "{}", per_step[0]);
        // An attempt at step t is mastered iff some earlier attempt on the
        // same skill triggered learning: P = 1 - (1 - lr/m)^t.
        for (t, &p) in per_step.iter().enumerate() {
            let mastered = 1.0 - (1.0f64 - 0.3 / 10.0).powi(t as i32);
            let expect = 0.2 + (0.9 - 0.2) * mastered;
            assert!((p - expect).abs() < 0.04, "step {t}: {p} vs {expect}");
        }
        let smooth = |a: usize| per_step[a..a + 10].iter().sum::<f64>() / 10.0;
        assert!(smooth(0) < smooth(10) && smooth(10) < smooth(20) && smooth(20) < smooth(40));
    }

    proptest! {
        #[test]
        fn triple_line_round_trip(
            rows in proptest::collection::vec(
                proptest::collection::vec((0usize..20, 0u8..2), 2..12), 0..8)
        ) {
            let seqs: Vec<_> = rows.iter().enumerate().map(|(i, r)| {
                InteractionSequence::new(format!("u{i}"), r.iter().map(|p| p.0).collect(), r.iter().map(|p| p.1).collect())
            }).collect();
            let d = Dataset::new(seqs, None);
            let parsed = parse_triple_line(&d.to_triple_lines()).unwrap().dataset;
            prop_assert_eq!(parsed, d);
        }

        #[test]
        fn folds_partition_every_index(n in 5usize..200, seed in 0u64..1000) {
            for f in make_folds(n, seed).unwrap() {
                let mut all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                let part = n as f64 / 5.0;
                prop_assert!((f.test.len() as f64 - part).abs() <= 1.0);
                prop_assert!((f.val.len() as f64 - part).abs() <= 1.0);
                prop_assert!((f.train.len() as f64 - 3.0 * part).abs() <= 1.0);
            }
        }
    }
}
