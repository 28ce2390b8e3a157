//! Textual checkpoint container.
//!
//! Layout (version 1), UTF-8 with LF line endings:
//!
//! ```text
//! atkt-checkpoint 1
//! num_skills <N>
//! [config]
//! <TrainConfig key = value lines>
//! [meta]
//! <free key = value lines, e.g. best_epoch = 12>
//! [arrays]
//! <name> <rows> <cols>
//! <rows lines of `cols` space-separated f64 values>
//! ... one block per array, fixed order ...
//! [end]
//! sha256 <hex digest of every byte above this line>
//! ```
//!
//! Floats are written in Rust's shortest round-trip decimal form, so a
//! save/load cycle restores every parameter bit-for-bit.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, TrainConfig};
use crate::model::{ModelParams, PARAM_NAMES};

pub const MAGIC: &str = "atkt-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad header)")]
    BadHeader,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch")]
    Checksum,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("embedded config: {0}")]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub meta: Vec<(String, String)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut body = String::new();
        let _ = writeln!(body, "{MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(body, "num_skills {}", self.params.config.num_skills);
        body.push_str("[config]\n");
        body.push_str(&self.config.to_text());
        body.push_str("[meta]\n");
        for (k, v) in &self.meta {
            let _ = writeln!(body, "{k} = {v}");
        }
        body.push_str("[arrays]\n");
        for ((name, values), (rows, cols)) in self.params.arrays().into_iter().zip(self.params.shapes()) {
            let _ = writeln!(body, "{name} {rows} {cols}");
            for r in 0..rows {
                let row = &values[r * cols..(r + 1) * cols];
                let line: Vec<String> = row.iter().map(f64::to_string).collect();
                body.push_str(&line.join(" "));
                body.push('\n');
            }
        }
        body.push_str("[end]\n");
        let digest = Sha256::digest(body.as_bytes());
        let _ = writeln!(body, "sha256 {}", hex(&digest));
        body
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let end_marker = "[end]\n";
        let split = text.find(end_marker).ok_or(CheckpointError::BadHeader)? + end_marker.len();
        let (body, trailer) = text.split_at(split);
        let want = trailer
            .trim_end()
            .strip_prefix("sha256 ")
            .ok_or(CheckpointError::Checksum)?;
        if hex(&Sha256::digest(body.as_bytes())) != want {
            return Err(CheckpointError::Checksum);
        }

        let mut lines = body.lines().enumerate().map(|(i, l)| (i + 1, l));
        let malformed = |line: usize, message: &str| CheckpointError::Malformed {
            line,
            message: message.to_string(),
        };

        let (_, header) = lines.next().ok_or(CheckpointError::BadHeader)?;
        let version = header
            .strip_prefix(MAGIC)
            .map(str::trim)
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or(CheckpointError::BadHeader)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let (ln, skills_line) = lines.next().ok_or(CheckpointError::BadHeader)?;
        let num_skills: usize = skills_line
            .strip_prefix("num_skills ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| malformed(ln, "expected `num_skills <N>`"))?;

        let (ln, l) = lines.next().ok_or(CheckpointError::BadHeader)?;
        if l != "[config]" {
            return Err(malformed(ln, "expected [config]"));
        }
        let mut config_text = String::new();
        let mut meta = Vec::new();
        let mut in_meta = false;
        loop {
            let (ln, l) = lines.next().ok_or_else(|| malformed(0, "truncated before [arrays]"))?;
            match l {
                "[meta]" => in_meta = true,
                "[arrays]" => break,
                _ if in_meta => {
                    let (k, v) = l.split_once(" = ").ok_or_else(|| malformed(ln, "bad meta line"))?;
                    meta.push((k.to_string(), v.to_string()));
                }
                _ => {
                    config_text.push_str(l);
                    config_text.push('\n');
                }
            }
        }
        let config = TrainConfig::parse(&config_text)?;
        let mut params = ModelParams::zeros(config.model_config(num_skills));
        let shapes = params.shapes();
        for ((name, dst), (rows, cols)) in params.arrays_mut().into_iter().zip(shapes) {
            let (ln, head) = lines.next().ok_or_else(|| malformed(0, "truncated array section"))?;
            let parts: Vec<&str> = head.split(' ').collect();
            let shape_ok = parts.len() == 3
                && parts[0] == name
                && parts[1].parse::<usize>().ok() == Some(rows)
                && parts[2].parse::<usize>().ok() == Some(cols);
            if !shape_ok {
                return Err(malformed(ln, &format!("expected array header `{name} {rows} {cols}`, got {head:?}")));
            }
            for r in 0..rows {
                let (ln, row) = lines.next().ok_or_else(|| malformed(ln, "truncated array"))?;
                let vals: Vec<f64> = row
                    .split(' ')
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| malformed(ln, "non-numeric value"))?;
                if vals.len() != cols {
                    return Err(malformed(ln, &format!("expected {cols} values")));
                }
                dst[r * cols..(r + 1) * cols].copy_from_slice(&vals);
            }
        }
        let (ln, l) = lines.next().ok_or_else(|| malformed(0, "missing [end]"))?;
        if l != "[end]" {
            return Err(malformed(ln, "extra data after arrays"));
        }
        debug_assert_eq!(PARAM_NAMES.len(), shapes.len());
        Ok(Checkpoint { config, params, meta })
    }
}
