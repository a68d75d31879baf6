use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use riskgame::discounted::{solve_discounted as solve, verify_nash_discounted, DiscountedVerification};
use riskgame::ergodic::{nash_search_ergodic, verify_nash_ergodic, ErgodicConfig, ErgodicSolution, SearchFailure, SearchOutcome};
use riskgame::markov::{check_assumptions, RecurrenceConfig, RecurrenceReport};
use riskgame::mc::{self, EstimatorReport, ReturnTimeReport, Strategy};
use riskgame::{GameSpec, MarkovProfile, Player, StationaryProfile};

use crate::manifest::{sha256_hex, RunManifest};
use crate::{CheckArgs, DiscountedArgs, ErgodicArgs, Estimator, SimulateArgs, VerifyArgs};

/// Failure classes with their exit status.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Assumption(String),
    Verification(String),
    Search(String),
    Internal(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Assumption(_) => 3,
            Failure::Verification(_) => 4,
            Failure::Search(_) => 5,
            Failure::Internal(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) => write!(f, "input: {}", m),
            Failure::Assumption(m) => write!(f, "assumption failed: {}", m),
            Failure::Verification(m) => write!(f, "verification failed: {}", m),
            Failure::Search(m) => write!(f, "equilibrium search failed: {}", m),
            Failure::Internal(m) => write!(f, "{}", m),
        }
    }
}

type Outcome = Result<(), Failure>;

fn internal(e: impl fmt::Display) -> Failure {
    Failure::Internal(e.to_string())
}

fn solver(e: riskgame::Error) -> Failure {
    match e {
        riskgame::Error::InvalidSpec(_) | riskgame::Error::Dimension(_) => Failure::Input(e.to_string()),
        other => Failure::Internal(other.to_string()),
    }
}

fn load_spec(path: &Path) -> Result<(GameSpec, String), Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Input(format!("{}: {}", path.display(), e)))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Failure::Input(e.to_string()))?;
    let spec = GameSpec::from_json_str(&text).map_err(|e| Failure::Input(format!("{}: {}", path.display(), e)))?;
    Ok((spec, sha256_hex(&bytes)))
}

fn write_json(out: Option<&Path>, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(internal)? + "\n";
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| internal(format!("{}: {}", path.display(), e))),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

fn finish(manifest: &mut RunManifest, out: Option<&PathBuf>) -> Outcome {
    if let Some(path) = out {
        manifest.output(path);
    }
    manifest.emit(out.map(|p| p.as_path())).map_err(internal)
}

pub fn check(args: &CheckArgs) -> Outcome {
    let (spec, hash) = load_spec(&args.spec)?;
    let config = RecurrenceConfig {
        enumeration_cap: args.enumeration_cap,
        ..RecurrenceConfig::default()
    };
    let report = check_assumptions(&spec, &config).map_err(solver)?;
    write_json(args.out.as_deref(), &report)?;
    let mut manifest = RunManifest::new("check", &args.spec, &hash);
    manifest.option("strict", args.strict).option("enumeration_cap", args.enumeration_cap);
    finish(&mut manifest, args.out.as_ref())?;
    if args.strict && !report.all_hold() {
        return Err(Failure::Assumption(report.diagnostics.join("; ")));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DiscountedOutput {
    pub kind: String,
    pub spec_sha256: String,
    pub eps: f64,
    pub tol: f64,
    pub horizon: usize,
    pub tail_bound: f64,
    /// `psi_i(0, k)`: per-stage cost scale, one entry per initial state.
    pub psi1: Vec<f64>,
    pub psi2: Vec<f64>,
    pub profile: MarkovProfile,
    pub verification: DiscountedVerification,
}

pub fn solve_discounted(args: &DiscountedArgs) -> Outcome {
    let (spec, hash) = load_spec(&args.spec)?;
    let sol = solve(&spec, args.eps).map_err(solver)?;
    let verification = verify_nash_discounted(&spec, &sol.profile, args.tol, args.eps).map_err(solver)?;
    let passed = verification.passed;
    let max_gap = verification.max_gap;
    let output = DiscountedOutput {
        kind: "discounted".into(),
        spec_sha256: hash.clone(),
        eps: args.eps,
        tol: args.tol,
        horizon: sol.values.horizon,
        tail_bound: sol.values.tail_bound,
        psi1: sol.values.psi1[0].clone(),
        psi2: sol.values.psi2[0].clone(),
        profile: sol.profile,
        verification,
    };
    write_json(args.out.as_deref(), &output)?;
    let mut manifest = RunManifest::new("solve-discounted", &args.spec, &hash);
    manifest.option("eps", args.eps).option("tol", args.tol);
    finish(&mut manifest, args.out.as_ref())?;
    if !passed {
        return Err(Failure::Verification(format!("max gap {:e}", max_gap)));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErgodicOutput {
    pub kind: String,
    pub spec_sha256: String,
    pub tol: f64,
    /// `solved`, `failed` or `refused`.
    pub status: String,
    pub warnings: Vec<String>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub solution: Option<ErgodicSolution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<SearchFailure>,
    pub recurrence: RecurrenceReport,
}

pub fn solve_ergodic(args: &ErgodicArgs) -> Outcome {
    let (spec, hash) = load_spec(&args.spec)?;
    let recurrence = check_assumptions(&spec, &RecurrenceConfig::default()).map_err(solver)?;
    let mut manifest = RunManifest::new("solve-ergodic", &args.spec, &hash);
    manifest
        .option("tol", args.tol)
        .option("force", args.force)
        .option("fallback", !args.no_fallback)
        .option("damping", args.damping)
        .option("max_rounds", args.max_rounds)
        .option("fallback_cap", args.fallback_cap);
    let mut output = ErgodicOutput {
        kind: "ergodic".into(),
        spec_sha256: hash.clone(),
        tol: args.tol,
        status: "refused".into(),
        warnings: Vec::new(),
        solution: None,
        failure: None,
        recurrence,
    };
    if !output.recurrence.all_hold() {
        if !args.force {
            let why = output.recurrence.diagnostics.join("; ");
            write_json(args.out.as_deref(), &output)?;
            finish(&mut manifest, args.out.as_ref())?;
            return Err(Failure::Assumption(why));
        }
        output.warnings.push("assumptions fail; solved anyway because of --force".into());
        output.warnings.extend(output.recurrence.diagnostics.iter().cloned());
    }
    let config = ErgodicConfig {
        tol: args.tol,
        damping: args.damping,
        max_rounds: args.max_rounds,
        fallback: !args.no_fallback,
        fallback_cap: args.fallback_cap,
        ..ErgodicConfig::default()
    };
    let result = match nash_search_ergodic(&spec, &config) {
        Ok(SearchOutcome::Converged(sol)) => {
            output.status = "solved".into();
            output.solution = Some(sol);
            Ok(())
        }
        Ok(SearchOutcome::Failed(fail)) => {
            output.status = "failed".into();
            let why = fail.reason.clone();
            output.failure = Some(fail);
            Err(Failure::Search(why))
        }
        Err(e @ (riskgame::Error::InvalidSpec(_) | riskgame::Error::Dimension(_))) => return Err(Failure::Input(e.to_string())),
        Err(e) => {
            output.status = "failed".into();
            output.warnings.push(e.to_string());
            Err(Failure::Search(e.to_string()))
        }
    };
    write_json(args.out.as_deref(), &output)?;
    finish(&mut manifest, args.out.as_ref())?;
    result
}

struct Loaded {
    kind: String,
    value: Value,
}

fn load_solution(path: &Path, spec_hash: &str) -> Result<Loaded, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {}", path.display(), e)))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {}", path.display(), e)))?;
    let recorded = value.get("spec_sha256").and_then(Value::as_str).unwrap_or_default();
    if recorded != spec_hash {
        return Err(Failure::Input(format!(
            "solution was produced for spec {} but this spec hashes to {}",
            recorded, spec_hash
        )));
    }
    let kind = value.get("kind").and_then(Value::as_str).unwrap_or_default().to_string();
    Ok(Loaded { kind, value })
}

fn field<T: serde::de::DeserializeOwned>(value: &Value, name: &str) -> Result<T, Failure> {
    let v = value.get(name).ok_or_else(|| Failure::Input(format!("solution has no `{}`", name)))?;
    serde_json::from_value(v.clone()).map_err(|e| Failure::Input(format!("`{}`: {}", name, e)))
}

enum Profile {
    Stationary(StationaryProfile),
    Markov(MarkovProfile),
}

impl Profile {
    fn as_strategy(&self) -> &dyn Strategy {
        match self {
            Profile::Stationary(p) => p,
            Profile::Markov(p) => p,
        }
    }

    fn stationary(&self) -> Result<&StationaryProfile, Failure> {
        match self {
            Profile::Stationary(p) => Ok(p),
            Profile::Markov(_) => Err(Failure::Input("this estimator needs a stationary profile".into())),
        }
    }
}

fn parse_player(p: u8) -> Result<Player, Failure> {
    match p {
        1 => Ok(Player::One),
        2 => Ok(Player::Two),
        other => Err(Failure::Input(format!("player must be 1 or 2, got {}", other))),
    }
}

#[derive(Debug, Serialize)]
struct SimulationOutput {
    kind: String,
    spec_sha256: String,
    player: Player,
    horizon: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<EstimatorReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    return_time: Option<ReturnTimeReport>,
}

fn chunks(n: usize, batches: usize) -> Vec<std::ops::Range<usize>> {
    let b = batches.clamp(1, n.max(1));
    (0..b).map(|i| (i * n / b)..((i + 1) * n / b)).collect()
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Outcome {
    let mut w = csv::Writer::from_path(path).map_err(internal)?;
    w.write_record(header).map_err(internal)?;
    for row in rows {
        w.write_record(&row).map_err(internal)?;
    }
    w.flush().map_err(internal)
}

pub fn simulate(args: &SimulateArgs) -> Outcome {
    let (spec, hash) = load_spec(&args.spec)?;
    let player = parse_player(args.player)?;
    let profile = match &args.solution {
        None => Profile::Stationary(spec.uniform_profile()),
        Some(path) => {
            let sol = load_solution(path, &hash)?;
            match sol.kind.as_str() {
                "discounted" => Profile::Markov(field(&sol.value, "profile")?),
                "ergodic" => Profile::Stationary(field(&sol.value, "profile")?),
                other => return Err(Failure::Input(format!("unknown solution kind `{}`", other))),
            }
        }
    };
    let state = args.state.unwrap_or(spec.ref_state);
    if state >= spec.n_states {
        return Err(Failure::Input(format!("state {} out of range", state)));
    }
    let mut output = SimulationOutput {
        kind: String::new(),
        spec_sha256: hash.clone(),
        player,
        horizon: None,
        report: None,
        return_time: None,
    };
    let fmt = |x: f64| format!("{}", x);
    let rows: Vec<Vec<String>>;
    let header: &[&str];
    match args.kind {
        Estimator::Discounted => {
            let horizon = match (&profile, args.horizon) {
                (_, Some(h)) => h,
                (Profile::Markov(p), None) => p.horizon(),
                (Profile::Stationary(_), None) => riskgame::discounted::horizon_for(spec.theta, spec.alpha, spec.max_cost_norm(), 1e-8),
            };
            let samples = mc::path_sums(&spec, profile.as_strategy(), player, state, horizon, spec.alpha, args.paths, args.seed).map_err(solver)?;
            let report = mc::estimate_discounted_cost_from(&spec, profile.as_strategy(), player, state, horizon, args.paths, args.seed).map_err(solver)?;
            header = &["batch", "paths", "mean_cost_sum", "estimate"];
            rows = chunks(samples.len(), args.batches)
                .into_iter()
                .enumerate()
                .map(|(b, r)| {
                    let xs: Vec<f64> = samples[r].iter().map(|s| s.cost_sum).collect();
                    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                    vec![b.to_string(), xs.len().to_string(), fmt(mean), fmt(mc::log_mean_exp(&xs, spec.theta).0)]
                })
                .collect();
            output.kind = "discounted".into();
            output.horizon = Some(horizon);
            output.report = Some(report);
        }
        Estimator::Ergodic => {
            let p = profile.stationary()?;
            let horizon = args.horizon.unwrap_or(2000);
            let samples = mc::ergodic_batches(&spec, p, player, horizon, args.batches, args.seed).map_err(solver)?;
            let report = mc::estimate_ergodic_cost(&spec, p, player, horizon, args.batches, args.seed).map_err(solver)?;
            header = &["batch", "steps", "cost_sum", "mean_cost", "end_state"];
            rows = samples
                .iter()
                .map(|s| {
                    vec![
                        s.path.to_string(),
                        s.steps.to_string(),
                        fmt(s.cost_sum),
                        fmt(s.cost_sum / s.steps.max(1) as f64),
                        s.end_state.to_string(),
                    ]
                })
                .collect();
            output.kind = "ergodic".into();
            output.horizon = Some(horizon);
            output.report = Some(report);
        }
        Estimator::ReturnTime => {
            let p = profile.stationary()?;
            let times = mc::return_times(&spec, p, state, args.paths, args.seed, args.cap).map_err(solver)?;
            let report = mc::sample_return_time(&spec, p, state, args.paths, args.rate, args.seed, args.cap).map_err(solver)?;
            header = &["batch", "paths", "censored", "mean_time", "mean_moment"];
            rows = chunks(times.len(), args.batches)
                .into_iter()
                .enumerate()
                .map(|(b, r)| {
                    let done: Vec<f64> = times[r.clone()].iter().flatten().map(|&t| t as f64).collect();
                    let n = done.len().max(1) as f64;
                    let mean = done.iter().sum::<f64>() / n;
                    let moment = done.iter().map(|t| args.rate.powf(*t)).sum::<f64>() / n;
                    vec![b.to_string(), r.len().to_string(), (r.len() - done.len()).to_string(), fmt(mean), fmt(moment)]
                })
                .collect();
            output.kind = "return-time".into();
            output.return_time = Some(report);
        }
    }
    if let Some(path) = &args.csv {
        write_csv(path, header, rows)?;
    }
    write_json(args.out.as_deref(), &output)?;
    let mut manifest = RunManifest::new("simulate", &args.spec, &hash);
    manifest
        .option("kind", &output.kind)
        .option("paths", args.paths)
        .option("horizon", output.horizon)
        .option("batches", args.batches)
        .option("player", args.player)
        .option("state", state)
        .option("rate", args.rate)
        .option("cap", args.cap)
        .option("solution", args.solution.as_ref().map(|p| p.display().to_string()));
    manifest.seed = Some(args.seed);
    if let Some(path) = &args.csv {
        manifest.output(path);
    }
    finish(&mut manifest, args.out.as_ref())
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum VerificationReport {
    Discounted(DiscountedVerification),
    Ergodic(riskgame::ergodic::ErgodicVerification),
}

#[derive(Debug, Serialize)]
struct VerifyOutput {
    kind: String,
    spec_sha256: String,
    tol: f64,
    passed: bool,
    report: VerificationReport,
}

pub fn verify(args: &VerifyArgs) -> Outcome {
    let (spec, hash) = load_spec(&args.spec)?;
    let sol = load_solution(&args.solution, &hash)?;
    let (tol, report, passed) = match sol.kind.as_str() {
        "discounted" => {
            let profile: MarkovProfile = field(&sol.value, "profile")?;
            let eps: f64 = field(&sol.value, "eps")?;
            let tol = args.tol.map_or_else(|| field(&sol.value, "tol"), Ok)?;
            let r = verify_nash_discounted(&spec, &profile, tol, eps).map_err(solver)?;
            let passed = r.passed;
            (tol, VerificationReport::Discounted(r), passed)
        }
        "ergodic" => {
            let profile: StationaryProfile = field(&sol.value, "profile")?;
            let tol = args.tol.map_or_else(|| field(&sol.value, "tol"), Ok)?;
            let r = verify_nash_ergodic(&spec, &profile, tol).map_err(solver)?;
            let passed = r.passed;
            (tol, VerificationReport::Ergodic(r), passed)
        }
        other => return Err(Failure::Input(format!("unknown solution kind `{}`", other))),
    };
    let output = VerifyOutput {
        kind: sol.kind.clone(),
        spec_sha256: hash.clone(),
        tol,
        passed,
        report,
    };
    write_json(args.out.as_deref(), &output)?;
    let mut manifest = RunManifest::new("verify", &args.spec, &hash);
    manifest
        .option("tol", tol)
        .option("solution", args.solution.display().to_string());
    finish(&mut manifest, args.out.as_ref())?;
    if !passed {
        return Err(Failure::Verification(format!("profile in {} is not an equilibrium", args.solution.display())));
    }
    Ok(())
}
