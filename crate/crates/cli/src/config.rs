//! Mission configuration files: flat `key = value` lines with dotted
//! section prefixes and one `robot.` block per robot.
//!
//! ```text
//! # three task robots, two relays
//! dynamics.dt = 0.2
//! connectivity.range = 40
//! planner.horizon = 100
//! validation.rollouts = 1000
//!
//! robot.role = primary
//! robot.position = -12 0
//! robot.targets = -22 14 ; -16 8
//!
//! robot.role = bridge
//! robot.position = -6 -4
//! ```
//!
//! A `robot.role` line opens a new robot block; the block's other keys
//! follow it. Task-bearing robots list one `x y` target per mission
//! segment, separated by `;`. Relays take no targets. Unknown keys,
//! duplicate keys, and malformed values are rejected with the offending
//! line number. Omitted scalars fall back to the documented defaults.

use nalgebra::Vector2;

use connplan_core::admm::{AdmmParams, StopRule};
use connplan_core::metric::ConnectivityConfig;
use connplan_core::sim::{default_initial_covariance, MissionSpec, RobotRole, RobotSpec};

use crate::{CliError, CliResult};

/// A parsed mission plus the driver settings that ride along in the file.
#[derive(Debug, Clone)]
pub struct ParsedConfig {
    pub mission: MissionSpec,
    /// Per-robot labels for trace headers.
    pub robot_ids: Vec<String>,
    pub rollouts: usize,
    pub seed: u64,
    /// Iteration cap for the convergence stop.
    pub max_iterations: usize,
    /// Planning budget for the time stop, seconds.
    pub time_budget_s: f64,
    pub comm_delay_s: f64,
}

impl ParsedConfig {
    /// Stop rule for the configured (or overridden) mode.
    pub fn stop_rule(&self, mode: StopMode, budget_override: Option<f64>) -> StopRule {
        match mode {
            StopMode::Converged => StopRule::Converged {
                rel_tol: 1e-4,
                window: 5,
                residual_tol: 1e-3,
                max_iterations: self.max_iterations,
                comm_delay_s: self.comm_delay_s,
            },
            StopMode::Time => StopRule::Time {
                budget_s: budget_override.unwrap_or(self.time_budget_s),
                comm_delay_s: self.comm_delay_s,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopMode {
    Converged,
    Time,
}

#[derive(Debug, Default)]
struct RobotDraft {
    line: usize,
    id: Option<String>,
    role: Option<RobotRole>,
    position: Option<Vector2<f64>>,
    targets: Option<Vec<Vector2<f64>>>,
}

struct Scalars {
    dt: f64,
    process_intensity: f64,
    measurement_variance: f64,
    input_limit: f64,
    range: f64,
    inner_range: f64,
    floor: f64,
    confidence: f64,
    barrier_gain: f64,
    rho: f64,
    subset_size: usize,
    step_shrink: f64,
    horizon: usize,
    ilqg_iterations: usize,
    stop: StopMode,
    max_iterations: usize,
    time_budget_s: f64,
    comm_delay_s: f64,
    rollouts: usize,
    seed: u64,
}

impl Default for Scalars {
    fn default() -> Self {
        Scalars {
            dt: 0.2,
            process_intensity: 0.1,
            measurement_variance: 1.0,
            input_limit: 5.0,
            range: 40.0,
            inner_range: 35.0,
            floor: 0.1,
            confidence: 0.997,
            barrier_gain: 0.001,
            rho: 1.0,
            subset_size: 2,
            step_shrink: 0.8,
            horizon: 250,
            ilqg_iterations: 3,
            stop: StopMode::Converged,
            max_iterations: 100,
            time_budget_s: 25.0,
            comm_delay_s: 0.2,
            rollouts: 1000,
            seed: 0,
        }
    }
}

fn fail(line: usize, message: impl AsRef<str>) -> CliError {
    CliError::Usage(format!("config line {line}: {}", message.as_ref()))
}

fn parse_f64(value: &str, key: &str, line: usize) -> CliResult<f64> {
    let v: f64 = value
        .parse()
        .map_err(|_| fail(line, format!("{key} expects a number, got `{value}`")))?;
    if !v.is_finite() {
        return Err(fail(line, format!("{key} must be finite")));
    }
    Ok(v)
}

fn parse_usize(value: &str, key: &str, line: usize) -> CliResult<usize> {
    value
        .parse()
        .map_err(|_| fail(line, format!("{key} expects a non-negative integer, got `{value}`")))
}

fn parse_u64(value: &str, key: &str, line: usize) -> CliResult<u64> {
    value
        .parse()
        .map_err(|_| fail(line, format!("{key} expects a non-negative integer, got `{value}`")))
}

fn parse_point(value: &str, key: &str, line: usize) -> CliResult<Vector2<f64>> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(fail(
            line,
            format!("{key} expects `x y`, got `{value}`"),
        ));
    }
    Ok(Vector2::new(
        parse_f64(parts[0], key, line)?,
        parse_f64(parts[1], key, line)?,
    ))
}

fn parse_targets(value: &str, line: usize) -> CliResult<Vec<Vector2<f64>>> {
    let mut targets = Vec::new();
    for part in value.split(';') {
        let trimmed = part.trim();
        if trimmed.is_empty() {
            return Err(fail(line, "robot.targets has an empty segment entry"));
        }
        targets.push(parse_point(trimmed, "robot.targets", line)?);
    }
    if targets.is_empty() {
        return Err(fail(line, "robot.targets needs at least one segment"));
    }
    Ok(targets)
}

pub fn parse_config(text: &str) -> CliResult<ParsedConfig> {
    let mut scalars = Scalars::default();
    let mut seen: Vec<&str> = Vec::new();
    let mut robots: Vec<RobotDraft> = Vec::new();

    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| fail(line, "expected `key = value`"))?;
        let key = key.trim();
        let value = value.trim();

        if let Some(field) = key.strip_prefix("robot.") {
            if field == "role" {
                let role = match value {
                    "primary" => RobotRole::Primary,
                    "bridge" => RobotRole::Bridge,
                    other => {
                        return Err(fail(
                            line,
                            format!("robot.role must be `primary` or `bridge`, got `{other}`"),
                        ))
                    }
                };
                robots.push(RobotDraft {
                    line,
                    role: Some(role),
                    ..RobotDraft::default()
                });
                continue;
            }
            let block = robots
                .last_mut()
                .ok_or_else(|| fail(line, format!("robot.{field} before any robot.role")))?;
            match field {
                "id" => {
                    if value.is_empty() || value.split_whitespace().count() != 1 {
                        return Err(fail(
                            line,
                            "robot.id must be a single whitespace-free token",
                        ));
                    }
                    if block.id.replace(value.to_string()).is_some() {
                        return Err(fail(line, "duplicate robot.id in this block"));
                    }
                }
                "position" => {
                    let p = parse_point(value, "robot.position", line)?;
                    if block.position.replace(p).is_some() {
                        return Err(fail(line, "duplicate robot.position in this block"));
                    }
                }
                "targets" => {
                    let t = parse_targets(value, line)?;
                    if block.targets.replace(t).is_some() {
                        return Err(fail(line, "duplicate robot.targets in this block"));
                    }
                }
                other => return Err(fail(line, format!("unknown key `robot.{other}`"))),
            }
            continue;
        }

        if seen.contains(&key) {
            return Err(fail(line, format!("duplicate key `{key}`")));
        }
        match key {
            "dynamics.dt" => scalars.dt = parse_f64(value, key, line)?,
            "dynamics.process_intensity" => {
                scalars.process_intensity = parse_f64(value, key, line)?
            }
            "dynamics.measurement_variance" => {
                scalars.measurement_variance = parse_f64(value, key, line)?
            }
            "dynamics.input_limit" => scalars.input_limit = parse_f64(value, key, line)?,
            "connectivity.range" => scalars.range = parse_f64(value, key, line)?,
            "connectivity.inner_range" => scalars.inner_range = parse_f64(value, key, line)?,
            "connectivity.floor" => scalars.floor = parse_f64(value, key, line)?,
            "connectivity.confidence" => scalars.confidence = parse_f64(value, key, line)?,
            "connectivity.barrier_gain" => scalars.barrier_gain = parse_f64(value, key, line)?,
            "planner.rho" => scalars.rho = parse_f64(value, key, line)?,
            "planner.subset_size" => scalars.subset_size = parse_usize(value, key, line)?,
            "planner.step_shrink" => scalars.step_shrink = parse_f64(value, key, line)?,
            "planner.horizon" => scalars.horizon = parse_usize(value, key, line)?,
            "planner.ilqg_iterations" => {
                scalars.ilqg_iterations = parse_usize(value, key, line)?
            }
            "planner.stop" => {
                scalars.stop = match value {
                    "converged" => StopMode::Converged,
                    "time" => StopMode::Time,
                    other => {
                        return Err(fail(
                            line,
                            format!("planner.stop must be `converged` or `time`, got `{other}`"),
                        ))
                    }
                }
            }
            "planner.max_iterations" => scalars.max_iterations = parse_usize(value, key, line)?,
            "planner.time_budget_s" => scalars.time_budget_s = parse_f64(value, key, line)?,
            "planner.comm_delay_s" => scalars.comm_delay_s = parse_f64(value, key, line)?,
            "validation.rollouts" => scalars.rollouts = parse_usize(value, key, line)?,
            "validation.seed" => scalars.seed = parse_u64(value, key, line)?,
            other => return Err(fail(line, format!("unknown key `{other}`"))),
        }
        // Borrow gymnastics: remember the canonical key name, not the
        // transient line slice.
        let canonical = KNOWN_SCALARS
            .iter()
            .find(|&&k| k == key)
            .expect("matched above");
        seen.push(canonical);
    }

    if robots.is_empty() {
        return Err(CliError::Usage(
            "config names no robots (need at least one robot.role block)".into(),
        ));
    }

    let mut specs = Vec::with_capacity(robots.len());
    let mut ids = Vec::with_capacity(robots.len());
    let mut per_robot_targets = Vec::with_capacity(robots.len());
    let mut segment_count: Option<usize> = None;
    for (i, draft) in robots.iter().enumerate() {
        let role = draft.role.expect("set when the block was opened");
        let position = draft.position.ok_or_else(|| {
            fail(draft.line, format!("robot block {i} is missing robot.position"))
        })?;
        match (role, &draft.targets) {
            (RobotRole::Primary, None) => {
                return Err(fail(
                    draft.line,
                    format!("primary robot block {i} is missing robot.targets"),
                ))
            }
            (RobotRole::Bridge, Some(_)) => {
                return Err(fail(
                    draft.line,
                    format!("bridge robot block {i} must not set robot.targets"),
                ))
            }
            (RobotRole::Primary, Some(t)) => {
                if let Some(count) = segment_count {
                    if t.len() != count {
                        return Err(fail(
                            draft.line,
                            format!(
                                "robot block {i} lists {} segment targets, earlier blocks list {count}",
                                t.len()
                            ),
                        ));
                    }
                } else {
                    segment_count = Some(t.len());
                }
            }
            (RobotRole::Bridge, None) => {}
        }
        specs.push(RobotSpec {
            role,
            initial_position: position,
        });
        ids.push(draft.id.clone().unwrap_or_else(|| format!("r{i}")));
        per_robot_targets.push(draft.targets.clone());
    }

    let segments_n = segment_count.unwrap_or(1);
    let segments: Vec<Vec<Option<Vector2<f64>>>> = (0..segments_n)
        .map(|s| {
            per_robot_targets
                .iter()
                .map(|t| t.as_ref().map(|list| list[s]))
                .collect()
        })
        .collect();

    let n = specs.len();
    let mission = MissionSpec {
        robots: specs,
        segments,
        horizon: scalars.horizon,
        dt: scalars.dt,
        process_intensity: scalars.process_intensity,
        measurement_variance: scalars.measurement_variance,
        input_limit: scalars.input_limit,
        initial_covariance: default_initial_covariance(),
        connectivity: ConnectivityConfig {
            delta: scalars.range,
            delta0: scalars.inner_range,
            epsilon: scalars.floor,
            confidence: scalars.confidence,
            barrier_gain: scalars.barrier_gain,
            n_robots: n,
            position_dim: 2,
        },
        admm: AdmmParams {
            rho: scalars.rho,
            eta: scalars.subset_size,
            gamma: scalars.step_shrink,
            ilqg_iterations: scalars.ilqg_iterations,
        },
        stop: StopRule::Converged {
            rel_tol: 1e-4,
            window: 5,
            residual_tol: 1e-3,
            max_iterations: scalars.max_iterations,
            comm_delay_s: scalars.comm_delay_s,
        },
    };
    let parsed = ParsedConfig {
        mission,
        robot_ids: ids,
        rollouts: scalars.rollouts,
        seed: scalars.seed,
        max_iterations: scalars.max_iterations,
        time_budget_s: scalars.time_budget_s,
        comm_delay_s: scalars.comm_delay_s,
    };
    let stop = parsed.stop_rule(scalars.stop, None);
    let mut parsed = parsed;
    parsed.mission.stop = stop;
    parsed.mission.validate().map_err(CliError::from)?;
    Ok(parsed)
}

const KNOWN_SCALARS: &[&str] = &[
    "dynamics.dt",
    "dynamics.process_intensity",
    "dynamics.measurement_variance",
    "dynamics.input_limit",
    "connectivity.range",
    "connectivity.inner_range",
    "connectivity.floor",
    "connectivity.confidence",
    "connectivity.barrier_gain",
    "planner.rho",
    "planner.subset_size",
    "planner.step_shrink",
    "planner.horizon",
    "planner.ilqg_iterations",
    "planner.stop",
    "planner.max_iterations",
    "planner.time_budget_s",
    "planner.comm_delay_s",
    "validation.rollouts",
    "validation.seed",
];

/// Configured stop mode, re-derived from the mission's rule.
pub fn stop_mode(parsed: &ParsedConfig) -> StopMode {
    match parsed.mission.stop {
        StopRule::Converged { .. } => StopMode::Converged,
        StopRule::Time { .. } => StopMode::Time,
    }
}

pub fn load_config(path: &std::path::Path) -> CliResult<ParsedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}
