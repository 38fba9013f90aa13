//! Trajectory CSV format.
//!
//! ```text
//! # config_fingerprint=<hex>
//! seed,round,loss_gap,grad_norm,noise_norm,noise_sq_norm,increment
//! 7,0,1.2345678901234567e0,...
//! ```
//!
//! Reals are written with 17 significant digits in scientific notation; the
//! transition columns are left empty on each trajectory's final record. Lines
//! end in LF.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::training::{Trajectory, TrajectoryRecord};
use crate::error::{Error, Result};

pub const HEADER: &str = "seed,round,loss_gap,grad_norm,noise_norm,noise_sq_norm,increment";
pub const FINGERPRINT_PREFIX: &str = "# config_fingerprint=";

/// 17 significant digits, round-trip exact.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn format_opt(x: Option<f64>) -> String {
    x.map(format_real).unwrap_or_default()
}

pub fn write_trajectories<W: Write>(mut out: W, fingerprint: &str, trajectories: &[Trajectory]) -> Result<()> {
    writeln!(out, "{FINGERPRINT_PREFIX}{fingerprint}")?;
    writeln!(out, "{HEADER}")?;
    for t in trajectories {
        for r in &t.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                t.seed,
                r.round,
                format_real(r.loss_gap),
                format_real(r.grad_norm),
                format_opt(r.noise_norm),
                format_opt(r.noise_sq_norm),
                format_opt(r.increment),
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn to_string(fingerprint: &str, trajectories: &[Trajectory]) -> String {
    let mut buf = Vec::new();
    write_trajectories(&mut buf, fingerprint, trajectories).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("output is ASCII")
}

fn parse_real(field: &str, line: usize) -> Result<f64> {
    field.parse().map_err(|_| Error::Format(format!("line {line}: bad number {field:?}")))
}

fn parse_opt(field: &str, line: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_real(field, line).map(Some)
    }
}

/// Reads a trajectory file. Returns the embedded fingerprint and one
/// trajectory per seed, ordered by seed.
pub fn read_trajectories<R: BufRead>(input: R) -> Result<(String, Vec<Trajectory>)> {
    let mut lines = input.lines().enumerate();
    let fingerprint = match lines.next() {
        Some((_, line)) => {
            let line = line?;
            line.strip_prefix(FINGERPRINT_PREFIX)
                .ok_or_else(|| Error::Format("missing fingerprint comment on line 1".into()))?
                .to_string()
        }
        None => return Err(Error::Format("empty trajectory file".into())),
    };
    let header = lines.next().map(|(_, line)| line).transpose()?;
    if header.as_deref() != Some(HEADER) {
        return Err(Error::Format(format!("line 2: expected header {HEADER:?}")));
    }

    let mut by_seed: BTreeMap<u64, Vec<TrajectoryRecord>> = BTreeMap::new();
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!("line {lineno}: expected 7 fields, got {}", fields.len())));
        }
        let seed = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("line {lineno}: bad seed {:?}", fields[0])))?;
        let round = fields[1]
            .parse()
            .map_err(|_| Error::Format(format!("line {lineno}: bad round {:?}", fields[1])))?;
        let records = by_seed.entry(seed).or_default();
        if round != records.len() as u64 {
            return Err(Error::Format(format!("line {lineno}: seed {seed} rounds are not contiguous from 0")));
        }
        records.push(TrajectoryRecord {
            round,
            loss_gap: parse_real(fields[2], lineno)?,
            grad_norm: parse_real(fields[3], lineno)?,
            noise_norm: parse_opt(fields[4], lineno)?,
            noise_sq_norm: parse_opt(fields[5], lineno)?,
            increment: parse_opt(fields[6], lineno)?,
        });
    }
    let trajectories = by_seed
        .into_iter()
        .map(|(seed, records)| Trajectory {
            seed,
            fingerprint: fingerprint.clone(),
            records,
            max_upload_norms: Vec::new(),
            divergence_estimate: f64::NAN,
        })
        .collect();
    Ok((fingerprint, trajectories))
}
