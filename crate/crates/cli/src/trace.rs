//! Plain-text trace files. Every float is serialized in scientific
//! notation with 12 significant digits, so files re-parse to within 1e-10
//! relative of the values that produced them. Lines starting with `#` are
//! comments; tables carry a header row naming the columns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use connplan_core::belief::Belief;

use crate::{CliError, CliResult};

pub const PLAN_FILE: &str = "plan.txt";
pub const TIMESTEP_FILE: &str = "timesteps.txt";
pub const ITERATION_FILE: &str = "iterations.txt";
pub const ROLLOUT_FILE: &str = "rollouts.txt";
pub const SUMMARY_FILE: &str = "rollout_summary.txt";

/// 12 significant digits, locale-free.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.11e}")
}

pub fn parse_float(s: &str, what: &str) -> CliResult<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| CliError::Usage(format!("{what}: expected a number, got `{s}`")))?;
    if !v.is_finite() {
        return Err(CliError::Usage(format!("{what}: `{s}` is not finite")));
    }
    Ok(v)
}

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

/// Reloaded nominal plan: the initial beliefs and per-robot input rows,
/// ready to re-propagate.
#[derive(Debug, Clone)]
pub struct PlanFile {
    pub dt: f64,
    pub seed: u64,
    pub initial: Vec<Belief>,
    pub inputs: Vec<DMatrix<f64>>,
}

impl PlanFile {
    pub fn robots(&self) -> usize {
        self.initial.len()
    }

    pub fn horizon(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.nrows())
    }
}

/// Serializes the plan as flat `key = value` lines: header scalars, one
/// `belief.<i>` line per robot (mean then covariance lower triangle), one
/// `inputs.<t>` line per timestep (robot-major input coordinates).
pub fn write_plan_file(
    path: &Path,
    initial: &[Belief],
    inputs: &[DMatrix<f64>],
    dt: f64,
    seed: u64,
) -> CliResult<()> {
    let robots = initial.len();
    let horizon = inputs.first().map_or(0, |m| m.nrows());
    let input_dim = inputs.first().map_or(0, |m| m.ncols());
    let mut out = String::new();
    out.push_str("# nominal plan: initial beliefs and input rows\n");
    out.push_str("format = 1\n");
    let _ = writeln!(out, "robots = {robots}");
    let _ = writeln!(out, "horizon = {horizon}");
    let _ = writeln!(out, "input_dim = {input_dim}");
    let _ = writeln!(out, "dt = {}", fmt_float(dt));
    let _ = writeln!(out, "seed = {seed}");
    for (i, belief) in initial.iter().enumerate() {
        let _ = write!(out, "belief.{i} =");
        for v in belief.mean.iter() {
            let _ = write!(out, " {}", fmt_float(*v));
        }
        let d = belief.dim();
        for r in 0..d {
            for c in 0..=r {
                let _ = write!(out, " {}", fmt_float(belief.covariance[(r, c)]));
            }
        }
        out.push('\n');
    }
    for t in 0..horizon {
        let _ = write!(out, "inputs.{t} =");
        for rows in inputs {
            for c in 0..input_dim {
                let _ = write!(out, " {}", fmt_float(rows[(t, c)]));
            }
        }
        out.push('\n');
    }
    write_file(path, &out)
}

fn numbers(value: &str, what: &str) -> CliResult<Vec<f64>> {
    value
        .split_whitespace()
        .map(|s| parse_float(s, what))
        .collect()
}

/// State dimension whose mean-plus-lower-triangle flattening has `len`
/// entries.
fn belief_dim_for(len: usize) -> CliResult<usize> {
    for d in 1..=16 {
        if d + d * (d + 1) / 2 == len {
            return Ok(d);
        }
    }
    Err(CliError::Usage(format!(
        "belief line has {len} numbers, which matches no state dimension"
    )))
}

pub fn read_plan_file(path: &Path) -> CliResult<PlanFile> {
    let text = read_file(path)?;
    let mut scalars: BTreeMap<String, String> = BTreeMap::new();
    let mut beliefs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut input_rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{} line {line}: expected `key = value`", path.display()))
        })?;
        let key = key.trim();
        let value = value.trim();
        if let Some(i) = key.strip_prefix("belief.") {
            let i: usize = i.parse().map_err(|_| {
                CliError::Usage(format!("{} line {line}: bad belief index", path.display()))
            })?;
            beliefs.insert(i, numbers(value, "belief line")?);
        } else if let Some(t) = key.strip_prefix("inputs.") {
            let t: usize = t.parse().map_err(|_| {
                CliError::Usage(format!("{} line {line}: bad input row index", path.display()))
            })?;
            input_rows.insert(t, numbers(value, "input row")?);
        } else {
            scalars.insert(key.to_string(), value.to_string());
        }
    }
    let get = |k: &str| -> CliResult<&String> {
        scalars
            .get(k)
            .ok_or_else(|| CliError::Usage(format!("{}: missing `{k}`", path.display())))
    };
    let robots: usize = get("robots")?
        .parse()
        .map_err(|_| CliError::Usage("plan file: bad robots count".into()))?;
    let horizon: usize = get("horizon")?
        .parse()
        .map_err(|_| CliError::Usage("plan file: bad horizon".into()))?;
    let input_dim: usize = get("input_dim")?
        .parse()
        .map_err(|_| CliError::Usage("plan file: bad input_dim".into()))?;
    let dt = parse_float(get("dt")?, "plan dt")?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| CliError::Usage("plan file: bad seed".into()))?;

    let mut initial = Vec::with_capacity(robots);
    for i in 0..robots {
        let flat = beliefs
            .get(&i)
            .ok_or_else(|| CliError::Usage(format!("plan file: missing belief.{i}")))?;
        let d = belief_dim_for(flat.len())?;
        let mean = DVector::from_iterator(d, flat[..d].iter().copied());
        let mut cov = DMatrix::zeros(d, d);
        let mut k = d;
        for r in 0..d {
            for c in 0..=r {
                cov[(r, c)] = flat[k];
                cov[(c, r)] = flat[k];
                k += 1;
            }
        }
        initial.push(
            Belief::new(mean, cov)
                .map_err(|e| CliError::Usage(format!("plan file belief.{i}: {e}")))?,
        );
    }
    let mut inputs = vec![DMatrix::zeros(horizon, input_dim); robots];
    for t in 0..horizon {
        let row = input_rows
            .get(&t)
            .ok_or_else(|| CliError::Usage(format!("plan file: missing inputs.{t}")))?;
        if row.len() != robots * input_dim {
            return Err(CliError::Usage(format!(
                "plan file inputs.{t}: {} numbers for {robots} robots x {input_dim}",
                row.len()
            )));
        }
        for (i, rows) in inputs.iter_mut().enumerate() {
            for c in 0..input_dim {
                rows[(t, c)] = row[i * input_dim + c];
            }
        }
    }
    Ok(PlanFile {
        dt,
        seed,
        initial,
        inputs,
    })
}

/// Whitespace-separated numeric table with a named header row.
#[derive(Debug, Clone)]
pub struct TableFile {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TableFile {
    pub fn column(&self, name: &str) -> CliResult<Vec<f64>> {
        let idx = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("table has no column `{name}`")))?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }
}

pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let mut out = String::new();
    out.push_str(&header.join(" "));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_table(path: &Path) -> CliResult<TableFile> {
    let text = read_file(path)?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CliError::Usage(format!("{} is empty", path.display())))?
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (index, line) in lines.enumerate() {
        let row = numbers(line, "table row")?;
        if row.len() != header.len() {
            return Err(CliError::Usage(format!(
                "{} row {}: {} fields for {} columns",
                path.display(),
                index + 1,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(TableFile { header, rows })
}

/// Flat `key = value` summary files.
pub fn write_summary(path: &Path, entries: &[(String, String)]) -> CliResult<()> {
    let mut out = String::new();
    for (k, v) in entries {
        let _ = writeln!(out, "{k} = {v}");
    }
    write_file(path, &out)
}

pub fn read_summary(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = read_file(path)?;
    let mut map = BTreeMap::new();
    for (index, raw) in text.lines().enumerate() {
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| {
            CliError::Usage(format!(
                "{} line {}: expected `key = value`",
                path.display(),
                index + 1
            ))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}
