//! The three subcommands: plan a mission into trace files, roll the plan
//! out under noise, and summarize the traces.

use std::path::{Path, PathBuf};

use connplan_core::ilqg::NominalPlan;
use connplan_core::metric::connectivity_cost;
use connplan_core::sim::{run_mission, run_rollouts, team_problem, RolloutContext};

use crate::config::{load_config, stop_mode, StopMode};
use crate::trace::{
    fmt_float, read_plan_file, read_summary, read_table, write_plan_file, write_summary,
    write_table, ITERATION_FILE, PLAN_FILE, ROLLOUT_FILE, SUMMARY_FILE, TIMESTEP_FILE,
};
use crate::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct PlanOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub stop: Option<StopMode>,
    pub time_budget_s: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RolloutOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub rollouts: Option<usize>,
    pub seed: Option<u64>,
}

/// Plans the configured mission and writes the nominal plan, the
/// per-timestep metric trace, and the per-iteration planner trace into the
/// output directory.
pub fn cmd_plan(opts: &PlanOptions) -> CliResult<String> {
    let parsed = load_config(&opts.config)?;
    let mut mission = parsed.mission.clone();
    // --time-budget-s alone implies the time stop; --stop wins when given.
    let mode = match (opts.stop, opts.time_budget_s) {
        (Some(m), _) => m,
        (None, Some(_)) => StopMode::Time,
        (None, None) => stop_mode(&parsed),
    };
    mission.stop = parsed.stop_rule(mode, opts.time_budget_s);
    let seed = opts.seed.unwrap_or(parsed.seed);

    std::fs::create_dir_all(&opts.out)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", opts.out.display())))?;

    let run = run_mission(&mission)?;

    let initial: Vec<_> = (0..mission.n_robots())
        .map(|i| run.plan.beliefs[i][0].clone())
        .collect();
    write_plan_file(
        &opts.out.join(PLAN_FILE),
        &initial,
        &run.plan.inputs,
        mission.dt,
        seed,
    )?;

    let mut header = vec!["t".to_string()];
    for id in &parsed.robot_ids {
        header.push(format!("{id}_x"));
        header.push(format!("{id}_y"));
    }
    header.push("lambda2_lb".to_string());
    header.push("barrier_cost".to_string());
    let mut rows = Vec::with_capacity(run.plan.horizon() + 1);
    for t in 0..=run.plan.horizon() {
        let mut row = vec![t.to_string()];
        for i in 0..mission.n_robots() {
            let mean = &run.plan.beliefs[i][t].mean;
            row.push(fmt_float(mean[0]));
            row.push(fmt_float(mean[1]));
        }
        let bound = run.metric_trace[t];
        row.push(fmt_float(bound));
        row.push(fmt_float(connectivity_cost(bound, &mission.connectivity)?));
        rows.push(row);
    }
    write_table(&opts.out.join(TIMESTEP_FILE), &header, &rows)?;

    let header: Vec<String> = [
        "segment",
        "iteration",
        "transformed_cost",
        "beta",
        "min_bound",
        "clock_s",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    for (s, segment) in run.segments.iter().enumerate() {
        for it in &segment.outcome.trace {
            rows.push(vec![
                s.to_string(),
                it.iteration.to_string(),
                fmt_float(it.transformed_cost),
                fmt_float(it.beta),
                fmt_float(it.min_bound),
                fmt_float(it.clock_s),
            ]);
        }
    }
    write_table(&opts.out.join(ITERATION_FILE), &header, &rows)?;

    let clock: f64 = run.segments.iter().map(|s| s.outcome.clock_s()).sum();
    let iterations: usize = run.segments.iter().map(|s| s.outcome.iterations()).sum();
    Ok(format!(
        "planned {} segment(s), {} robots, horizon {}: min bound {:.6}, {} iteration(s), simulated clock {:.2} s\n",
        run.segments.len(),
        mission.n_robots(),
        run.plan.horizon(),
        run.min_metric(),
        iterations,
        clock
    ))
}

/// Replays the written plan under sampled noise and writes per-rollout
/// records plus the validation summary.
pub fn cmd_rollout(opts: &RolloutOptions) -> CliResult<String> {
    let parsed = load_config(&opts.config)?;
    let mission = parsed.mission.clone();
    let count = opts.rollouts.unwrap_or(parsed.rollouts);
    let plan_file = read_plan_file(&opts.out.join(PLAN_FILE))?;

    if plan_file.robots() != mission.n_robots() {
        return Err(CliError::Usage(format!(
            "plan file covers {} robots, config names {}",
            plan_file.robots(),
            mission.n_robots()
        )));
    }
    if (plan_file.dt - mission.dt).abs() > 1e-9 * mission.dt.max(1.0) {
        return Err(CliError::Usage(format!(
            "plan file was built at dt = {}, config says {}",
            plan_file.dt, mission.dt
        )));
    }
    let seed = opts.seed.unwrap_or(plan_file.seed);

    let problem = team_problem(&mission, 0)?;
    let plan = NominalPlan::from_inputs(&problem, &plan_file.initial, plan_file.inputs.clone())?;
    let mut metric = Vec::with_capacity(plan.horizon() + 1);
    for t in 0..=plan.horizon() {
        metric.push(problem.engine.evaluate(&plan.beliefs_at(t))?.lambda2_lb);
    }
    let ctx = RolloutContext::new(&mission, &plan, &metric)?;
    let (records, summary) = run_rollouts(&ctx, count, seed)?;

    let header: Vec<String> = ["rollout", "min_lambda2", "violated_epsilon", "violated_metric"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.index.to_string(),
                fmt_float(r.min_lambda2),
                (r.violated_epsilon as u8).to_string(),
                (r.violated_metric as u8).to_string(),
            ]
        })
        .collect();
    write_table(&opts.out.join(ROLLOUT_FILE), &header, &rows)?;

    let verdict = if summary.pass { "pass" } else { "fail" };
    write_summary(
        &opts.out.join(SUMMARY_FILE),
        &[
            ("rollouts".into(), summary.rollouts.to_string()),
            ("seed".into(), seed.to_string()),
            (
                "below_epsilon".into(),
                summary.rollouts_below_epsilon.to_string(),
            ),
            (
                "below_metric".into(),
                summary.rollouts_below_metric.to_string(),
            ),
            (
                "worst_timestep_success".into(),
                fmt_float(summary.worst_timestep_success),
            ),
            ("binomial_sigma".into(), fmt_float(summary.binomial_sigma)),
            (
                "required_success".into(),
                fmt_float(summary.required_success),
            ),
            ("verdict".into(), verdict.into()),
        ],
    )?;

    Ok(format!(
        "rolled out {count} run(s): {} below the floor, {} below the bound, verdict {verdict}\n",
        summary.rollouts_below_epsilon, summary.rollouts_below_metric
    ))
}

/// Consolidates whatever traces the directory holds into one plain-text
/// report, recomputing every statistic from the files themselves.
pub fn cmd_report(out: &Path) -> CliResult<String> {
    let timesteps = read_table(&out.join(TIMESTEP_FILE))?;
    let iterations = read_table(&out.join(ITERATION_FILE))?;

    let bounds = timesteps.column("lambda2_lb")?;
    let barrier = timesteps.column("barrier_cost")?;
    if bounds.is_empty() {
        return Err(CliError::Usage("timestep trace has no rows".into()));
    }
    let min_bound = bounds.iter().copied().fold(f64::INFINITY, f64::min);
    let mut report = String::new();
    report.push_str("mission report\n");
    report.push_str(&format!(
        "  timesteps: {} (t = 0 .. {})\n",
        bounds.len(),
        bounds.len() - 1
    ));
    report.push_str(&format!("  min lambda2_lb = {}\n", fmt_float(min_bound)));
    report.push_str(&format!(
        "  final barrier cost = {}\n",
        fmt_float(*barrier.last().expect("nonempty"))
    ));

    let segments = iterations.column("segment")?;
    let costs = iterations.column("transformed_cost")?;
    let clocks = iterations.column("clock_s")?;
    let segment_count = segments.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if segment_count.is_finite() {
        report.push_str(&format!("  segments: {}\n", segment_count as usize + 1));
        for s in 0..=(segment_count as usize) {
            let idx: Vec<usize> = segments
                .iter()
                .enumerate()
                .filter(|(_, &v)| v as usize == s)
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let last = *idx.last().expect("nonempty");
            report.push_str(&format!(
                "    segment {s}: {} iteration(s), final transformed cost = {}, clock = {} s\n",
                idx.len(),
                fmt_float(costs[last]),
                fmt_float(clocks[last])
            ));
        }
    } else {
        report.push_str("  segments: planner trace is empty\n");
    }

    let rollout_path = out.join(ROLLOUT_FILE);
    if rollout_path.exists() {
        let rollouts = read_table(&rollout_path)?;
        let summary = read_summary(&out.join(SUMMARY_FILE))?;
        let n = rollouts.rows.len();
        report.push_str(&format!("  rollouts: {n}\n"));
        if n > 0 {
            let eps: f64 = rollouts.column("violated_epsilon")?.iter().sum();
            let met: f64 = rollouts.column("violated_metric")?.iter().sum();
            for (label, count) in [("floor", eps), ("bound", met)] {
                let fraction = count / n as f64;
                let sigma = (fraction * (1.0 - fraction) / n as f64).sqrt();
                report.push_str(&format!(
                    "    below {label}: {} (fraction {} +- {})\n",
                    count as usize,
                    fmt_float(fraction),
                    fmt_float(3.0 * sigma)
                ));
            }
        }
        let verdict = summary
            .get("verdict")
            .ok_or_else(|| CliError::Usage("rollout summary is missing `verdict`".into()))?;
        report.push_str(&format!("    verdict: {verdict}\n"));
    } else {
        report.push_str("  rollouts: none recorded\n");
    }
    Ok(report)
}
