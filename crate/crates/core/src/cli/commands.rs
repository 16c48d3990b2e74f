use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use super::{CliError, Command, CompareArgs, DeployArgs, InnerKind, LatticeArgs, RetryArgs, SkewArgs, StraddleArgs};
use crate::adversary::{construct_straddling, narrate_trace, run_straddle, search_schedules, witness_mixed, SearchOutcome, StraddleCrash};
use crate::deploy::{deploy_battery, detect_mixed, narrate_deploy, DeployKind, DeploySearch, FencePolicy};
use crate::lattice::{
    monte_carlo_atomicity, pr_atomic_analytic, pr_atomic_ternary, reliability_table, AtomicityClass, BinaryModelParams,
    TernaryModelParams,
};
use crate::optimizer::{
    adamw_step, moment_skew, skew_consistency_check, trajectory_divergence, AdamWHyperparams, EpochTypedOptimizerState,
    QuadraticTask, StepMode,
};
use crate::protocols::{
    compare_protocols, geometric_expected_attempts, run_retry_loop, BilateralConfig, ComparisonConfig, InnerProtocol,
    NaiveCheckpointConfig, ProtocolTally, RetryModel,
};
use crate::report::{CheckFailure, Report, Table};
use crate::sim::{derive_seed, DelayPolicy, SimConfig, VirtualTime};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn prob(name: &str, x: f64) -> Result<f64, CliError> {
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(usage(format!("--{name} must be in [0, 1], got {x}")))
    }
}

pub fn execute(command: &Command, seed: u64) -> Result<Report, CliError> {
    match command {
        Command::LatticeTable(a) => lattice_table(a, seed),
        Command::Straddle(a) => straddle(a, seed),
        Command::BilateralVsNaive(a) => bilateral_vs_naive(a, seed),
        Command::AdamwSkew(a) => adamw_skew(a, seed),
        Command::Retry(a) => retry(a, seed),
        Command::Deploy(a) => deploy(a, seed),
    }
}

fn lattice_table(a: &LatticeArgs, seed: u64) -> Result<Report, CliError> {
    let trials = a.trials.unwrap_or(10_000);
    let rows: Vec<(f64, u64, Option<f64>)> = match (a.q, a.n) {
        (None, None) => reliability_table().iter().map(|r| (r.q, r.n, Some(r.published))).collect(),
        (Some(q), Some(n)) => {
            BinaryModelParams::new(q, n).map_err(|e| usage(e.to_string()))?;
            vec![(q, n, None)]
        }
        _ => return Err(usage("--q and --n go together")),
    };
    if let Some(p) = a.p {
        for &(q, n, _) in &rows {
            TernaryModelParams::new(q, p, n).map_err(|e| usage(e.to_string()))?;
        }
    }
    let mut report = Report::new("lattice-table", seed);
    let mut columns = vec!["q", "n", "pr_atomic", "rounded", "published", "match"];
    if a.p.is_some() {
        columns.extend(["ternary_atomic_bound", "operational_bound"]);
    }
    if trials > 0 {
        columns.extend(["mc_pr_atomic", "mc_stderr", "mc_within_4se"]);
    }
    let mut table = Table::new("Pr[atomic] = q^n + (1-q)^n", &columns);
    let mut json_rows = Vec::new();
    let mut all_match = true;
    for (i, &(q, n, published)) in rows.iter().enumerate() {
        let params = BinaryModelParams { q, n };
        let pr = pr_atomic_analytic(params);
        let rounded = (pr * 1000.0).round() / 1000.0;
        let matched = published.map(|p| (rounded - p).abs() < 1e-9);
        if matched == Some(false) {
            all_match = false;
        }
        let mut row = vec![
            q.to_string(),
            n.to_string(),
            format!("{pr:.6}"),
            format!("{rounded:.3}"),
            published.map_or("-".into(), |p| format!("{p:.3}")),
            matched.map_or("-".into(), |m| if m { "yes".into() } else { "NO".into() }),
        ];
        let mut jr = json!({"q": q, "n": n, "pr_atomic": pr, "rounded": rounded, "published": published, "match": matched});
        if let Some(p) = a.p {
            let b = pr_atomic_ternary(TernaryModelParams::new(q, p, n).map_err(|e| usage(e.to_string()))?);
            row.push(format!("{:.6}", b.atomic_bound));
            row.push(format!("{:.6}", b.operational_bound));
            jr["ternary"] = json!(b);
        }
        if trials > 0 {
            let tp = TernaryModelParams::binary(q, n).map_err(run_err)?;
            let mc = monte_carlo_atomicity(tp, trials, derive_seed(seed, i as u64));
            let within = (mc.pr_atomic() - pr).abs() <= 4.0 * mc.stderr_atomic().max(f64::MIN_POSITIVE);
            row.push(format!("{:.6}", mc.pr_atomic()));
            row.push(format!("{:.6}", mc.stderr_atomic()));
            row.push(if within { "yes".into() } else { "no".into() });
            jr["monte_carlo"] = json!(mc);
            jr["mc_within_4se"] = json!(within);
        }
        table.push(row);
        json_rows.push(jr);
    }
    report.line(format!("{} row(s); Monte-Carlo trials per row: {trials}", rows.len()));
    if rows.iter().any(|r| r.2.is_some()) {
        report.line(if all_match {
            "analytic values match the published rows to 3 decimals".to_string()
        } else {
            "MISMATCH against the published rows".to_string()
        });
    }
    report.tables.push(table);
    report.json = json!({"trials": trials, "rows": json_rows, "all_match": all_match});
    if !all_match {
        report.failed = Some(CheckFailure::LatticeTable);
    }
    Ok(report)
}

fn straddle(a: &StraddleArgs, seed: u64) -> Result<Report, CliError> {
    let n = a.n.unwrap_or(2);
    let grid = a.grid.unwrap_or(100);
    let t_max = a.t_max.unwrap_or(10_000);
    let control = a.no_crash.unwrap_or(false);
    if n < 2 {
        return Err(usage(format!("--n must be at least 2 (two components are needed to mix), got {n}")));
    }
    if grid == 0 {
        return Err(usage("--grid must be positive"));
    }
    if t_max < 2 || t_max - 1 < grid {
        return Err(usage(format!("--t-max {t_max} leaves fewer than {grid} boundary times in [2, t_max]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times: Vec<u64> = sample(&mut rng, (t_max - 1) as usize, grid as usize)
        .into_iter()
        .map(|k| k as u64 + 2)
        .collect();
    times.sort_unstable();
    let crash = if control { StraddleCrash::None } else { StraddleCrash::AtBoundary };
    let results: Vec<(u64, AtomicityClass, String, u64)> = times
        .par_iter()
        .map(|&t_c| {
            let s = construct_straddling(n, n - 1, t_c).map_err(run_err)?;
            let out = run_straddle(&s, crash, 1).map_err(run_err)?;
            Ok((t_c, out.vector_class(), out.final_vector.to_string(), out.trace.hash()))
        })
        .collect::<Result<_, CliError>>()?;
    let mixed = results.iter().filter(|r| r.1 == AtomicityClass::Mixed).count() as u64;
    let mut report = Report::new("straddle", seed);
    let label = if control { "negative control (no crash)" } else { "mixed witnesses" };
    report.line(format!("{mixed}/{grid} {label}, n={n}, boundaries in [2, {t_max}]"));
    let mut table = Table::new("", &["t_c", "class", "vector", "trace_hash"]);
    for (t_c, class, vector, hash) in &results {
        table.push(vec![t_c.to_string(), class.to_string(), vector.clone(), format!("{hash:016x}")]);
    }
    report.tables.push(table);
    let mut body = json!({
        "n": n, "grid": grid, "t_max": t_max, "control": control, "mixed": mixed,
        "runs": results.iter().map(|(t, c, v, h)| json!({"t_c": t, "class": c, "vector": v, "trace_hash": format!("{h:016x}")})).collect::<Vec<_>>(),
    });
    if a.narrative.unwrap_or(false) && !control {
        let w = witness_mixed(n, times[0]).map_err(run_err)?;
        report.line(format!("first witness (t_c={}):", times[0]));
        report.line(w.narrative().trim_end().to_string());
        body["witness"] = w.to_json();
    }
    report.json = body;
    let ok = if control { mixed == 0 } else { mixed == grid };
    if !ok {
        report.failed = Some(CheckFailure::Straddle);
    }
    Ok(report)
}

fn tally_row(name: &str, t: &ProtocolTally) -> Vec<String> {
    vec![
        name.to_string(),
        t.runs.to_string(),
        t.top.to_string(),
        t.bottom.to_string(),
        t.mixed.to_string(),
        t.committed.to_string(),
        t.rolled_back.to_string(),
        t.no_decision.to_string(),
        t.disagreements.to_string(),
        format!("{:.6}", t.mixed_rate()),
        format!("{:.6}", t.disagreement_rate()),
    ]
}

fn bilateral_vs_naive(a: &CompareArgs, seed: u64) -> Result<Report, CliError> {
    let n = a.n.unwrap_or(8);
    if n == 0 {
        return Err(usage("--n must be positive"));
    }
    let runs = a.runs.unwrap_or(10_000);
    let mut cfg = ComparisonConfig::new(n, runs, prob("crash-prob", a.crash_prob.unwrap_or(0.001))?, seed);
    cfg.adversarial_every = a.adversarial_every;
    cfg.boundary = a.boundary.unwrap_or(cfg.boundary);
    cfg.ack_timeout = a.ack_timeout.unwrap_or(cfg.ack_timeout);
    let delay_max = a.delay_max.unwrap_or(10);
    cfg.delay = DelayPolicy::UniformRandom { lo: 1, hi: delay_max };
    cfg.delay.validate().map_err(|e| usage(e.to_string()))?;
    NaiveCheckpointConfig::new(cfg.epoch, VirtualTime(cfg.boundary)).validate().map_err(|e| usage(e.to_string()))?;
    BilateralConfig::new(cfg.epoch, cfg.ack_timeout).validate().map_err(|e| usage(e.to_string()))?;
    if cfg.adversarial_every.is_some() && (n < 2 || cfg.boundary < 2) {
        return Err(usage("--adversarial-every needs n ≥ 2 and boundary ≥ 2"));
    }
    let c = compare_protocols(&cfg).map_err(run_err)?;
    let mut report = Report::new("bilateral-vs-naive", seed);
    report.line(format!(
        "n={n}, runs={runs}, crash_prob={}, adversarial_every={}",
        cfg.faults.crash_prob,
        cfg.adversarial_every.map_or("-".into(), |k| k.to_string())
    ));
    report.line(format!("bilateral mixed final states: {}", c.bilateral.mixed));
    report.line(format!(
        "naive declared committed while not top: {} ({:.4}%)",
        c.naive.disagreements,
        100.0 * c.naive.disagreement_rate()
    ));
    let mut table = Table::new(
        "",
        &[
            "protocol", "runs", "top", "bottom", "mixed", "committed", "rolled_back", "no_decision", "disagree", "mixed_rate",
            "disagree_rate",
        ],
    );
    table.push(tally_row("naive", &c.naive));
    table.push(tally_row("bilateral", &c.bilateral));
    report.tables.push(table);
    report.json = json!({
        "n": n, "runs": runs, "crash_prob": cfg.faults.crash_prob,
        "adversarial_every": cfg.adversarial_every, "naive": c.naive, "bilateral": c.bilateral,
    });
    if c.bilateral.mixed > 0 {
        report.failed = Some(CheckFailure::Bilateral);
    }
    Ok(report)
}

const SKEW_TOLERANCE: f64 = 1e-12;

fn adamw_skew(a: &SkewArgs, seed: u64) -> Result<Report, CliError> {
    let d = AdamWHyperparams::default();
    let hyper = AdamWHyperparams {
        beta1: a.beta1.unwrap_or(d.beta1),
        beta2: a.beta2.unwrap_or(d.beta2),
        lr: a.lr.unwrap_or(0.01),
        eps: a.eps.unwrap_or(d.eps),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
    };
    hyper.validate().map_err(|e| usage(e.to_string()))?;
    let g = a.g.unwrap_or(1.0);
    let dim = a.dim.unwrap_or(1);
    let horizon = a.horizon.unwrap_or(50);
    let skew_epoch = a.skew_epoch.unwrap_or(1);
    let curvature = a.curvature.unwrap_or(1.0);
    let w0 = a.w0.unwrap_or(1.0);
    let noise = a.noise.unwrap_or(0.0);
    if dim == 0 {
        return Err(usage("--dim must be positive"));
    }
    if skew_epoch == 0 || skew_epoch >= horizon {
        return Err(usage(format!("need 1 ≤ --skew-epoch < --horizon, got {skew_epoch} and {horizon}")));
    }
    let curv: Vec<f64> = (0..dim).map(|i| curvature * (1.0 + i as f64)).collect();
    let task = QuadraticTask::new(curv, vec![0.0; dim], noise, seed).map_err(|e| usage(e.to_string()))?;

    // Δm check from fresh moments: the lost write is the gradient g.
    let s0 = EpochTypedOptimizerState::new(vec![w0; dim], seed);
    let g_skip = vec![g; dim];
    let s1 = adamw_step(&s0, &g_skip, &hyper, StepMode::Strict).map_err(run_err)?;
    let lagged = s1.with_lagged_moment(s0.m.clone());
    let g_next = task.gradient(&s1.w, 1);
    let observed = skew_consistency_check(&s1, &lagged, &g_next, &hyper).map_err(run_err)?;
    let expected = moment_skew(&g_skip, hyper.beta1);
    let err = observed
        .iter()
        .zip(&expected)
        .map(|(o, e)| (o - e).abs())
        .fold(0.0f64, f64::max);
    let ratio = if g != 0.0 { observed[0] / g } else { 0.0 };

    let traj = trajectory_divergence(&task, &hyper, &vec![w0; dim], skew_epoch, horizon).map_err(run_err)?;
    let last = traj.points.last().expect("horizon ≥ 1");
    let mut report = Report::new("adamw-skew", seed);
    report.line(format!(
        "beta1={} g={g}: observed dm={:.15e} expected {:.15e} (max error {err:.3e}, tolerance {SKEW_TOLERANCE:e})",
        hyper.beta1, observed[0], expected[0]
    ));
    report.line(format!("dm/g = {ratio:.15}"));
    report.line(format!(
        "trajectory: skew at epoch {skew_epoch}, distance at step {} = {:.6e}",
        last.step, last.distance
    ));
    let mut table = Table::new("divergence", &["step", "distance", "ref_loss", "mixed_loss"]);
    for p in &traj.points {
        table.push(vec![
            p.step.to_string(),
            format!("{:e}", p.distance),
            format!("{:e}", p.ref_loss),
            format!("{:e}", p.mixed_loss),
        ]);
    }
    report.tables.push(table);
    report.json = json!({
        "hyper": hyper, "g": g, "dim": dim, "observed_dm": observed, "expected_dm": expected,
        "max_error": err, "dm_over_g": ratio, "skew_epoch": skew_epoch, "horizon": horizon,
        "skipped_gradient": traj.skipped_gradient, "series": traj.points,
    });
    if !(err <= SKEW_TOLERANCE) {
        report.failed = Some(CheckFailure::AdamwSkew);
    }
    Ok(report)
}

fn retry(a: &RetryArgs, seed: u64) -> Result<Report, CliError> {
    let p0 = prob("p0", a.p0.unwrap_or(0.1))?;
    let n = a.n.unwrap_or(10);
    let alphas = a.alphas.clone().unwrap_or_else(|| vec![1.0, 1.25, 1.5]);
    let runs = a.runs.unwrap_or(10_000);
    let max_attempts = a.max_attempts.unwrap_or(50);
    let kind = a.protocol.unwrap_or_default();
    if n == 0 || runs == 0 || alphas.is_empty() {
        return Err(usage("--n, --runs and --alphas must be non-empty"));
    }
    let models: Vec<RetryModel> = alphas
        .iter()
        .map(|&alpha| RetryModel::new(p0, alpha, max_attempts).map_err(|e| usage(e.to_string())))
        .collect::<Result<_, _>>()?;
    let inner = match kind {
        InnerKind::Bilateral => InnerProtocol::Bilateral(BilateralConfig::new(1, 100)),
        InnerKind::Naive => InnerProtocol::Naive(NaiveCheckpointConfig::new(1, VirtualTime(100))),
    };
    let geometric = geometric_expected_attempts(p0, n);
    let mut table = Table::new(
        "",
        &["alpha", "runs", "mean_attempts", "geometric", "ratio", "success_rate", "mean_load"],
    );
    let mut json_rows = Vec::new();
    for model in &models {
        let stats: Vec<_> = (0..runs)
            .into_par_iter()
            .map(|i| {
                let base = SimConfig::new(n, DelayPolicy::UniformRandom { lo: 1, hi: 10 }, derive_seed(seed, i));
                run_retry_loop(&base, model, &inner)
            })
            .collect::<Result<_, _>>()
            .map_err(run_err)?;
        let attempts: u64 = stats.iter().map(|s| s.attempts as u64).sum();
        let succeeded = stats.iter().filter(|s| s.succeeded).count() as u64;
        let load: f64 = stats.iter().map(|s| s.total_load).sum();
        let mean = attempts as f64 / runs as f64;
        table.push(vec![
            model.alpha.to_string(),
            runs.to_string(),
            format!("{mean:.4}"),
            format!("{geometric:.4}"),
            format!("{:.4}", mean / geometric),
            format!("{:.4}", succeeded as f64 / runs as f64),
            format!("{:.4}", load / runs as f64),
        ]);
        json_rows.push(json!({
            "alpha": model.alpha, "runs": runs, "mean_attempts": mean, "geometric": geometric,
            "success_rate": succeeded as f64 / runs as f64, "mean_load": load / runs as f64,
        }));
    }
    let mut report = Report::new("retry", seed);
    report.line(format!(
        "p0={p0}, n={n}, max_attempts={max_attempts}, inner={}; geometric baseline 1/(1-P_fail) = {geometric:.4}",
        crate::protocols::ProtocolKind::from(kind)
    ));
    report.tables.push(table);
    report.json = json!({"p0": p0, "n": n, "max_attempts": max_attempts, "rows": json_rows});
    Ok(report)
}

fn deploy(a: &DeployArgs, seed: u64) -> Result<Report, CliError> {
    let sizes = a.nodes.clone().unwrap_or_else(|| vec![2, 16]);
    let budget = a.budget.unwrap_or(10_000);
    let crash_prob = prob("crash-prob", a.crash_prob.unwrap_or(0.2))?;
    let fence = if a.fence_abort.unwrap_or(false) {
        FencePolicy::Abort
    } else {
        FencePolicy::Shrink
    };
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(usage("--nodes must list positive fleet sizes"));
    }
    if budget == 0 {
        return Err(usage("--budget must be positive"));
    }
    let mut report = Report::new("deploy", seed);
    report.line(format!("budget={budget} schedules per fleet size, crash_prob={crash_prob}, fence={fence:?}"));
    let mut table = Table::new(
        "",
        &[
            "nodes", "naive_witness_at", "naive_mixed_runs", "naive_mixed_collectives", "consensus_mixed_collectives",
            "consensus_fenced", "consensus_aborted", "register_violations",
        ],
    );
    let mut json_rows = Vec::new();
    let mut consensus_mixed = 0;
    let mut first_narrative: Option<String> = None;
    for &n in &sizes {
        let mk = |kind| DeploySearch {
            nodes: n,
            kind,
            fence,
            crash_prob,
        };
        let naive = mk(DeployKind::Naive);
        let consensus = mk(DeployKind::Consensus);
        let found = search_schedules(&naive, |r| !detect_mixed(r).is_empty(), budget, seed).map_err(run_err)?;
        let witness_at = match &found {
            SearchOutcome::Found { index, run, .. } => {
                if first_narrative.is_none() {
                    first_narrative = Some(format!(
                        "naive witness, n={n}, schedule #{index}:\n{}{}",
                        narrate_deploy(run),
                        narrate_trace(&run.trace)
                    ));
                }
                Some(*index)
            }
            SearchOutcome::Exhausted { .. } => None,
        };
        let nb = deploy_battery(&naive, budget, seed).map_err(run_err)?;
        let cb = deploy_battery(&consensus, budget, seed).map_err(run_err)?;
        consensus_mixed += cb.mixed_collectives;
        table.push(vec![
            n.to_string(),
            witness_at.map_or("none".into(), |i| i.to_string()),
            nb.runs_with_mixed.to_string(),
            nb.mixed_collectives.to_string(),
            cb.mixed_collectives.to_string(),
            cb.fenced.to_string(),
            cb.aborted.to_string(),
            cb.register_violations.to_string(),
        ]);
        json_rows.push(json!({"nodes": n, "naive_witness_at": witness_at, "naive": nb, "consensus": cb}));
    }
    report.line(format!("consensus mixed collectives: {consensus_mixed}"));
    if let Some(text) = &first_narrative {
        report.line(text.trim_end().to_string());
    }
    report.tables.push(table);
    report.json = json!({
        "budget": budget, "crash_prob": crash_prob, "fence": fence, "sizes": json_rows,
        "witness_narrative": first_narrative,
    });
    if consensus_mixed > 0 {
        report.failed = Some(CheckFailure::Deploy);
    }
    Ok(report)
}
