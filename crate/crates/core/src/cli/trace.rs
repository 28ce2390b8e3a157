//! Per-step mastery traces for one student.

use std::io::Write;

use crate::data::InteractionSequence;
use crate::model::{forward_one, mastery_rows, ModelError, ModelParams};

use super::svg::{self, Attempt};

/// How many distinct skills are tracked when none are requested.
pub const DEFAULT_TRACKED: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct MasteryTrace {
    pub skill_ids: Vec<usize>,
    /// `grid[t][k]`: predicted mastery of `skill_ids[k]` before step `t`.
    pub grid: Vec<Vec<f64>>,
    pub attempts: Vec<Attempt>,
}

/// The first [`DEFAULT_TRACKED`] distinct skills in order of first attempt.
pub fn default_tracked(seq: &InteractionSequence) -> Vec<usize> {
    let mut out = Vec::new();
    for &s in &seq.skills {
        if !out.contains(&s) {
            out.push(s);
            if out.len() == DEFAULT_TRACKED {
                break;
            }
        }
    }
    out
}

pub fn mastery_trace(p: &ModelParams, seq: &InteractionSequence, tracked: &[usize]) -> Result<MasteryTrace, ModelError> {
    let num_skills = p.config.num_skills;
    if let Some(&skill) = tracked.iter().find(|&&s| s >= num_skills) {
        return Err(ModelError::SkillOutOfRange { skill, num_skills });
    }
    let trace = forward_one(p, &seq.skills, &seq.responses, None)?;
    let grid = mastery_rows(p, &trace)?
        .into_iter()
        .map(|row| tracked.iter().map(|&k| row[k]).collect())
        .collect();
    let attempts = seq
        .skills
        .iter()
        .zip(&seq.responses)
        .map(|(&skill, &r)| Attempt { skill, correct: r == 1 })
        .collect();
    Ok(MasteryTrace {
        skill_ids: tracked.to_vec(),
        grid,
        attempts,
    })
}

impl MasteryTrace {
    /// One row per step, one column per tracked skill.
    pub fn write_grid_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.skill_ids.iter().map(|s| format!("skill_{s}")))?;
        for row in &self.grid {
            w.write_record(row.iter().map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_attempts_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "skill", "correct"])?;
        for (t, a) in self.attempts.iter().enumerate() {
            w.write_record([t.to_string(), a.skill.to_string(), u8::from(a.correct).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mastery before the first interaction against the last row.
    pub fn write_bars_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["skill", "initial", "final"])?;
        if let (Some(first), Some(last)) = (self.grid.first(), self.grid.last()) {
            for (k, s) in self.skill_ids.iter().enumerate() {
                w.write_record([s.to_string(), first[k].to_string(), last[k].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_svg(&self) -> String {
        svg::mastery_heatmap(&self.grid, &self.skill_ids, &self.attempts)
    }
}
