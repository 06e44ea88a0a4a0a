//! The experiment commands. Each is a pure function of the config, its
//! master seed and the artifacts already in the output directory; only the
//! manifest records wall-clock times.

use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use hjcp_core::certify::{certify, coverage_selfcheck, BetaDist, CertificationResult};
use hjcp_core::conformal::{build_calibration_set, CalibratedModel};
use hjcp_core::episode::OutcomeKind;
use hjcp_core::filter::{run_episode_seeded, Policy, Strategy};
use hjcp_core::grid::{value_iteration, StateGrid};
use hjcp_core::learn::{train_ensemble, train_value};
use hjcp_core::mlp::Mlp;
use hjcp_core::rng::derive_seed;
use hjcp_core::{Bounds, ControlSystem, Environment};

use crate::config::RunConfig;
use crate::store::{
    canonical_hash, unix_now, ArtifactRef, CalibrationArtifact, F64Block, Manifest, ModelArtifact, Store,
};
use crate::studies::{compare_to_oracle, conditional_coverage, marginal_coverage, ConditionalStudy, CoverageRow,
    OracleComparison};

/// Seed offsets separating the random streams of different commands.
const CALIBRATION_STREAM: u64 = 10_000;
const TRIAL_STREAM: u64 = 1_000_000;
const CERTIFY_STREAM: u64 = 2_000_000;
const ORACLE_STREAM: u64 = 3_000_000;

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, TRIAL_STREAM + trial as u64)
}

fn pairing_note(master: u64) -> String {
    format!(
        "trial t of every policy starts from the environment sampler seeded with derive_seed({master}, {TRIAL_STREAM} + t)"
    )
}

/// What a command wrote.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: std::path::PathBuf,
    pub produced: Vec<ArtifactRef>,
    /// Short human-readable lines for the terminal.
    pub summary: Vec<String>,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    store: Store,
    command: &'static str,
    started: u64,
    consumed: Vec<ArtifactRef>,
    produced: Vec<ArtifactRef>,
    pairing: Option<String>,
    summary: Vec<String>,
}

impl<'a> Run<'a> {
    fn start(cfg: &'a RunConfig, command: &'static str) -> anyhow::Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            store: Store::new(&cfg.out),
            command,
            started: unix_now(),
            consumed: Vec::new(),
            produced: Vec::new(),
            pairing: None,
            summary: Vec::new(),
        })
    }

    fn rel(&self, path: &std::path::Path) -> String {
        path.strip_prefix(self.store.root())
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned()
    }

    fn produced(&mut self, kind: &str, path: std::path::PathBuf, hash: String) {
        let path = self.rel(&path);
        self.produced.push(ArtifactRef {
            kind: kind.into(),
            path,
            hash,
        });
    }

    fn consumed(&mut self, kind: &str, path: std::path::PathBuf, hash: String) {
        let path = self.rel(&path);
        self.consumed.push(ArtifactRef {
            kind: kind.into(),
            path,
            hash,
        });
    }

    fn report<T: Serialize>(&mut self, name: &str, body: &T) -> anyhow::Result<()> {
        let hash = self.store.write_report(name, body)?;
        self.produced("report", self.store.report_path(name), hash);
        Ok(())
    }

    fn table<R: Serialize>(&mut self, name: &str, rows: &[R]) -> anyhow::Result<()> {
        let hash = self.store.write_table(name, rows)?;
        self.produced("table", self.store.table_path(name), hash);
        Ok(())
    }

    fn finish(self) -> anyhow::Result<Outcome> {
        let config = self.cfg.snapshot();
        let (_, cfg_hash) = canonical_hash(&config);
        let run_id = format!("{}-{}", self.command, &cfg_hash[..12]);
        let manifest = Manifest {
            run_id,
            command: self.command.into(),
            config,
            seed: self.cfg.seed,
            consumed: self.consumed,
            produced: self.produced.clone(),
            pairing: self.pairing,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let path = self.store.write_manifest(&manifest)?;
        Ok(Outcome {
            manifest: path,
            produced: self.produced,
            summary: self.summary,
        })
    }
}

fn system_name(env: &dyn Environment) -> String {
    env.name().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedMember {
    pub member: usize,
    pub seed: u64,
    pub model: String,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub system: String,
    pub gamma: f64,
    pub members: Vec<TrainedMember>,
}

/// Train `members` value networks with seeds `seed + j`.
pub fn train(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let mut run = Run::start(cfg, "train")?;
    let env = cfg.system.build()?;
    let tc = cfg.train.to_core(cfg.seed);
    let settings = serde_json::to_value(&cfg.train)?;
    let t0 = Instant::now();
    let models = train_ensemble(&*env, &tc, cfg.members, cfg.seed)?;
    let mut members = Vec::new();
    for (j, m) in models.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(j as u64);
        let art = ModelArtifact::new(env.name(), j, seed, tc.gamma, &m.net, &m.losses, settings.clone());
        let hash = run.store.save_model(&art)?;
        run.produced("model", run.store.model_path(&hash), hash.clone());
        members.push(TrainedMember {
            member: j,
            seed,
            model: hash,
            final_loss: m.losses.last().map(|l| l.1),
        });
    }
    run.summary.push(format!(
        "trained {} member(s) on {} in {:.1}s",
        cfg.members,
        env.name(),
        t0.elapsed().as_secs_f64()
    ));
    let report = TrainReport {
        system: system_name(&*env),
        gamma: tc.gamma,
        members,
    };
    run.report("train", &report)?;
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileEntry {
    pub alpha: f64,
    /// `None` when the calibration set is too small for this level.
    pub q_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedMember {
    pub member: usize,
    pub model: String,
    pub calibration: String,
    pub n: usize,
    pub quantiles: Vec<QuantileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub system: String,
    pub members: Vec<CalibratedMember>,
}

#[derive(Serialize)]
struct QuantileRow {
    member: usize,
    alpha: f64,
    q_hat: Option<f64>,
    n: usize,
}

fn load_train_report(run: &mut Run<'_>, env: &dyn Environment) -> anyhow::Result<TrainReport> {
    let report: TrainReport = run.store.read_report("train").context("no trained models; run `train` first")?;
    if report.system != env.name() {
        bail!("trained models are for `{}`, config selects `{}`", report.system, env.name());
    }
    if report.members.len() < run.cfg.members {
        bail!(
            "config asks for {} members but only {} were trained",
            run.cfg.members,
            report.members.len()
        );
    }
    Ok(report)
}

fn load_net(run: &mut Run<'_>, hash: &str) -> anyhow::Result<(ModelArtifact, Mlp)> {
    let art = run.store.load_model(hash)?;
    let net = art.network().map_err(anyhow::Error::msg)?;
    run.consumed("model", run.store.model_path(hash), hash.to_string());
    Ok((art, net))
}

/// Build a calibration set per member and tabulate its quantiles.
pub fn calibrate(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let mut run = Run::start(cfg, "calibrate")?;
    let env = cfg.system.build()?;
    let trained = load_train_report(&mut run, &*env)?;
    let alphas = cfg.calibration_alphas();
    let mut members = Vec::new();
    let mut rows = Vec::new();
    for entry in trained.members.iter().take(cfg.members) {
        let (art, net) = load_net(&mut run, &entry.model)?;
        let seed = derive_seed(cfg.seed, CALIBRATION_STREAM + entry.member as u64);
        let points = build_calibration_set(&*env, &net, cfg.n_traj, art.gamma, env.horizon(), seed)?;
        let mut states = Vec::with_capacity(points.len() * env.state_dim());
        for p in &points {
            states.extend_from_slice(&p.state);
        }
        let calibrated = CalibratedModel::from_points(&net, &points, &alphas)?;
        let quantiles: Vec<f64> = alphas.iter().map(|&a| calibrated.quantile(a)).collect::<Result<_, _>>()?;
        let calib = CalibrationArtifact {
            system: env.name().to_string(),
            member: entry.member,
            model_hash: entry.model.clone(),
            gamma: art.gamma,
            horizon: env.horizon(),
            seed,
            n: points.len(),
            state_dim: env.state_dim(),
            states: F64Block::encode(&states),
            v_theta: F64Block::encode(&points.iter().map(|p| p.v_theta).collect::<Vec<_>>()),
            v_star: F64Block::encode(&points.iter().map(|p| p.v_star).collect::<Vec<_>>()),
            alphas: alphas.clone(),
            quantiles: F64Block::encode(&quantiles),
        };
        let hash = run.store.save_calibration(&calib)?;
        run.produced("calibration", run.store.calibration_path(&hash), hash.clone());
        let q: Vec<QuantileEntry> = alphas
            .iter()
            .zip(&quantiles)
            .map(|(&alpha, &q)| QuantileEntry {
                alpha,
                q_hat: q.is_finite().then_some(q),
            })
            .collect();
        for e in &q {
            rows.push(QuantileRow {
                member: entry.member + 1,
                alpha: e.alpha,
                q_hat: e.q_hat,
                n: points.len(),
            });
        }
        let at = calibrated.quantile(cfg.alpha)?;
        run.summary.push(format!(
            "member {}: n = {}, q_hat({}) = {at:.4}",
            entry.member + 1,
            points.len(),
            cfg.alpha
        ));
        members.push(CalibratedMember {
            member: entry.member,
            model: entry.model.clone(),
            calibration: hash,
            n: points.len(),
            quantiles: q,
        });
    }
    run.table("calibration", &rows)?;
    let report = CalibrationReport {
        system: env.name().to_string(),
        members,
    };
    run.report("calibration", &report)?;
    run.finish()
}

/// Calibrated members in order, rebuilt from their artifacts.
fn load_calibrated(run: &mut Run<'_>, env: &dyn Environment) -> anyhow::Result<Vec<CalibratedModel<Mlp>>> {
    let report: CalibrationReport = run
        .store
        .read_report("calibration")
        .context("no calibrations; run `calibrate` first")?;
    if report.system != env.name() {
        bail!("calibrations are for `{}`, config selects `{}`", report.system, env.name());
    }
    if report.members.len() < run.cfg.members {
        bail!(
            "config asks for {} members but only {} are calibrated",
            run.cfg.members,
            report.members.len()
        );
    }
    let mut out = Vec::new();
    for m in report.members.iter().take(run.cfg.members) {
        let calib = run.store.load_calibration(&m.calibration)?;
        if calib.model_hash != m.model {
            bail!("calibration {} was built for another model", m.calibration);
        }
        run.consumed("calibration", run.store.calibration_path(&m.calibration), m.calibration.clone());
        let (_, net) = load_net(run, &m.model)?;
        out.push(calib.calibrated(net).map_err(anyhow::Error::msg)?);
    }
    Ok(out)
}

/// A policy named in a config or on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicySpec {
    Nominal,
    /// One-based member index.
    Member(usize),
    Ensemble(Strategy),
}

impl PolicySpec {
    pub fn parse(s: &str) -> anyhow::Result<Self> {
        Ok(match s {
            "nominal" => PolicySpec::Nominal,
            "ensemble-single" => PolicySpec::Ensemble(Strategy::Single),
            "ensemble-multiple" => PolicySpec::Ensemble(Strategy::Multiple),
            _ => match s.strip_prefix("member").and_then(|j| j.parse::<usize>().ok()) {
                Some(j) if j >= 1 => PolicySpec::Member(j),
                _ => bail!("unknown policy `{s}` (expected nominal, member<j>, ensemble-single or ensemble-multiple)"),
            },
        })
    }

    pub fn label(&self) -> String {
        match self {
            PolicySpec::Nominal => "nominal".into(),
            PolicySpec::Member(j) => format!("member{j}"),
            PolicySpec::Ensemble(s) => format!("ensemble-{}", s.as_str()),
        }
    }

    fn needs_models(&self) -> bool {
        !matches!(self, PolicySpec::Nominal)
    }

    fn policy<'m>(&self, models: &'m [CalibratedModel<Mlp>], alpha: f64) -> anyhow::Result<Policy<'m, Mlp>> {
        Ok(match *self {
            PolicySpec::Nominal => Policy::Nominal,
            PolicySpec::Member(j) => {
                let model = models
                    .get(j - 1)
                    .with_context(|| format!("member{j} requested but only {} members are loaded", models.len()))?;
                Policy::Calibrated { model, alpha }
            }
            PolicySpec::Ensemble(strategy) => Policy::Ensemble {
                models,
                alpha,
                strategy,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub alpha: f64,
    pub policy: String,
    pub kind: String,
    /// Members used, e.g. `2` or `1-3`; empty for the nominal controller.
    pub members: String,
    pub strategy: String,
    pub trials: usize,
    pub violations: usize,
    pub successes: usize,
    pub timeouts: usize,
    pub violation_rate: f64,
    pub success_rate: f64,
    pub timeout_rate: f64,
    /// Mean fraction of steps spent on a safe policy.
    pub safe_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub trials: usize,
    pub pairing: String,
    pub rows: Vec<EvalRow>,
}

struct Labelled<'m> {
    name: String,
    kind: &'static str,
    members: String,
    strategy: String,
    policy: Policy<'m, Mlp>,
}

fn eval_policies<'m>(cfg: &RunConfig, models: &'m [CalibratedModel<Mlp>], alpha: f64) -> Vec<Labelled<'m>> {
    let mut out = vec![Labelled {
        name: "nominal".into(),
        kind: "nominal",
        members: String::new(),
        strategy: String::new(),
        policy: Policy::Nominal,
    }];
    for (j, model) in models.iter().enumerate() {
        out.push(Labelled {
            name: format!("member{}", j + 1),
            kind: "member",
            members: format!("{}", j + 1),
            strategy: String::new(),
            policy: Policy::Calibrated { model, alpha },
        });
    }
    let strategies: Vec<Strategy> = match cfg.strategy {
        Some(s) => vec![s.into()],
        None => vec![Strategy::Single, Strategy::Multiple],
    };
    for k in 2..=models.len() {
        for &s in &strategies {
            out.push(Labelled {
                name: format!("ensemble1-{k}-{}", s.as_str()),
                kind: "ensemble",
                members: format!("1-{k}"),
                strategy: s.as_str().into(),
                policy: Policy::Ensemble {
                    models: &models[..k],
                    alpha,
                    strategy: s,
                },
            });
        }
    }
    out
}

/// Roll every policy over the same paired trials.
pub fn eval(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let mut run = Run::start(cfg, "eval")?;
    let env = cfg.system.build()?;
    let models = load_calibrated(&mut run, &*env)?;
    let mut rows = Vec::new();
    for p in eval_policies(cfg, &models, cfg.alpha) {
        let (mut v, mut s, mut t, mut safe) = (0, 0, 0, 0.0);
        for trial in 0..cfg.trials {
            let ep = run_episode_seeded(&*env, &p.policy, env.horizon(), trial_seed(cfg.seed, trial))?;
            match ep.outcome.kind {
                OutcomeKind::Violation => v += 1,
                OutcomeKind::Success => s += 1,
                OutcomeKind::Timeout => t += 1,
            }
            safe += ep.trace.safe_fraction();
            if trial < cfg.trace_trials {
                let name = format!("eval-a{}-{}-t{trial}", cfg.alpha, p.name);
                let hash = run.store.write_trace(&name, &ep.trace)?;
                run.produced("trace", run.store.trace_path(&name), hash);
            }
        }
        let n = cfg.trials as f64;
        rows.push(EvalRow {
            alpha: cfg.alpha,
            policy: p.name,
            kind: p.kind.into(),
            members: p.members,
            strategy: p.strategy,
            trials: cfg.trials,
            violations: v,
            successes: s,
            timeouts: t,
            violation_rate: v as f64 / n,
            success_rate: s as f64 / n,
            timeout_rate: t as f64 / n,
            safe_fraction: safe / n,
        });
    }
    for r in &rows {
        run.summary.push(format!(
            "{:<26} violation {:.2}  success {:.2}",
            r.policy, r.violation_rate, r.success_rate
        ));
    }
    run.pairing = Some(pairing_note(cfg.seed));
    run.table("eval", &rows)?;
    let report = EvalReport {
        system: env.name().to_string(),
        trials: cfg.trials,
        pairing: pairing_note(cfg.seed),
        rows,
    };
    run.report("eval", &report)?;
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleInterval {
    pub level: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationEntry {
    pub policy: String,
    pub alpha: f64,
    pub n_cert: usize,
    pub seed: u64,
    pub k: usize,
    pub beta_a: f64,
    pub beta_b: f64,
    pub mean: f64,
    pub degenerate: bool,
    pub intervals: Vec<CredibleInterval>,
    pub margins: F64Block,
    /// `(p, density)` samples of the posterior for plotting.
    pub pdf: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    pub true_p: f64,
    pub n_cert: usize,
    pub repetitions: usize,
    pub level: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub system: String,
    pub entries: Vec<CertificationEntry>,
    pub selfcheck: SelfCheck,
}

#[derive(Serialize)]
struct CertRow<'a> {
    policy: &'a str,
    alpha: f64,
    n_cert: usize,
    k: usize,
    beta_a: f64,
    beta_b: f64,
    mean: f64,
    degenerate: bool,
}

#[derive(Serialize)]
struct IntervalRow<'a> {
    policy: &'a str,
    n_cert: usize,
    level: f64,
    lo: f64,
    hi: f64,
}

#[derive(Serialize)]
struct PdfRow<'a> {
    policy: &'a str,
    n_cert: usize,
    p: f64,
    pdf: f64,
}

pub fn certification_entry(
    policy: &str,
    alpha: f64,
    seed: u64,
    res: &CertificationResult,
    pdf_points: usize,
) -> CertificationEntry {
    let pdf = match res.posterior() {
        Some(d) => d.pdf_curve(pdf_points),
        None => Vec::new(),
    };
    CertificationEntry {
        policy: policy.into(),
        alpha,
        n_cert: res.n_cert,
        seed,
        k: res.k,
        beta_a: res.beta_a,
        beta_b: res.beta_b,
        mean: res.mean,
        degenerate: res.degenerate,
        intervals: res
            .intervals
            .iter()
            .map(|&(level, lo, hi)| CredibleInterval { level, lo, hi })
            .collect(),
        margins: F64Block::encode(&res.margins),
        pdf,
    }
}

/// Certify each requested policy once per `n_cert`, with fresh trials.
pub fn certify_cmd(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let mut run = Run::start(cfg, "certify")?;
    let env = cfg.system.build()?;
    let specs: Vec<PolicySpec> = cfg
        .certify_policies
        .iter()
        .map(|s| PolicySpec::parse(s))
        .collect::<anyhow::Result<_>>()?;
    let models = if specs.iter().any(|s| s.needs_models()) {
        load_calibrated(&mut run, &*env)?
    } else {
        Vec::new()
    };
    let mut entries = Vec::new();
    for spec in &specs {
        let policy = spec.policy(&models, cfg.alpha)?;
        for &n in &cfg.n_cert {
            let seed = derive_seed(cfg.seed, CERTIFY_STREAM + n as u64);
            let res = certify(&*env, &policy, n, seed, &cfg.levels)?;
            run.summary.push(format!(
                "{:<18} N = {n:<4} k = {:<3} Beta({}, {}) mean {:.4}",
                spec.label(),
                res.k,
                res.beta_a,
                res.beta_b,
                res.mean
            ));
            entries.push(certification_entry(&spec.label(), cfg.alpha, seed, &res, cfg.pdf_points));
        }
    }
    let level = cfg.levels.first().copied().unwrap_or(0.9);
    let selfcheck = SelfCheck {
        true_p: 0.9,
        n_cert: 100,
        repetitions: 200,
        level,
        coverage: coverage_selfcheck(0.9, 100, 200, level, derive_seed(cfg.seed, CERTIFY_STREAM))?,
    };
    let rows: Vec<CertRow> = entries
        .iter()
        .map(|e| CertRow {
            policy: &e.policy,
            alpha: e.alpha,
            n_cert: e.n_cert,
            k: e.k,
            beta_a: e.beta_a,
            beta_b: e.beta_b,
            mean: e.mean,
            degenerate: e.degenerate,
        })
        .collect();
    run.table("certify", &rows)?;
    let intervals: Vec<IntervalRow> = entries
        .iter()
        .flat_map(|e| {
            e.intervals.iter().map(move |i| IntervalRow {
                policy: &e.policy,
                n_cert: e.n_cert,
                level: i.level,
                lo: i.lo,
                hi: i.hi,
            })
        })
        .collect();
    run.table("certify_intervals", &intervals)?;
    let pdf: Vec<PdfRow> = entries
        .iter()
        .flat_map(|e| {
            e.pdf.iter().map(move |&(p, f)| PdfRow {
                policy: &e.policy,
                n_cert: e.n_cert,
                p,
                pdf: f,
            })
        })
        .collect();
    run.table("certify_pdf", &pdf)?;
    run.pairing = Some(format!(
        "certification with N trials draws trial i from derive_seed(derive_seed({}, {CERTIFY_STREAM} + N), i)",
        cfg.seed
    ));
    let report = CertifyReport {
        system: env.name().to_string(),
        entries,
        selfcheck,
    };
    run.report("certify", &report)?;
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolve {
    pub nodes: [usize; 2],
    pub gamma: f64,
    pub tol: f64,
    pub sweeps: usize,
    pub sweep_bound: usize,
    pub residual: f64,
    pub positive_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub solve: OracleSolve,
    pub model: String,
    pub comparison: OracleComparison,
    pub coverage: Vec<CoverageRow>,
    pub conditional: ConditionalStudy,
}

/// Grid oracle on the double integrator, a learned model compared against
/// it, and the coverage studies.
pub fn oracle(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let mut run = Run::start(cfg, "oracle")?;
    let oc = &cfg.oracle;
    let di = oc.system.build()?;
    let grid = StateGrid::uniform(
        &[Bounds::new(oc.p_range[0], oc.p_range[1]), Bounds::new(oc.v_range[0], oc.v_range[1])],
        &oc.nodes,
    )?;
    let (gvf, conv) = value_iteration(&di, &grid, oc.gamma, oc.tol)?;
    let positive = gvf.values.iter().filter(|&&v| v > 0.0).count() as f64 / grid.len() as f64;
    let solve = OracleSolve {
        nodes: oc.nodes,
        gamma: oc.gamma,
        tol: oc.tol,
        sweeps: conv.iterations,
        sweep_bound: conv.bound,
        residual: conv.residual,
        positive_fraction: positive,
    };
    run.summary.push(format!(
        "oracle: {} sweeps, residual {:.2e}",
        conv.iterations, conv.residual
    ));

    let tc = oc.train.to_core(cfg.seed);
    let model_seed = derive_seed(cfg.seed, ORACLE_STREAM);
    let trained = train_value(&di, &tc, model_seed)?;
    let art = ModelArtifact::new(
        di.name(),
        0,
        model_seed,
        tc.gamma,
        &trained.net,
        &trained.losses,
        serde_json::to_value(&oc.train)?,
    );
    let hash = run.store.save_model(&art)?;
    run.produced("model", run.store.model_path(&hash), hash.clone());
    let comparison = compare_to_oracle(&grid, &gvf, &trained.net);
    run.summary.push(format!(
        "learned model: sign agreement {:.4}, sup error {:.3}",
        comparison.sign_agreement, comparison.sup_error
    ));

    let coverage = if oc.pool > 0 {
        let pool = build_calibration_set(
            &di,
            &trained.net,
            oc.pool,
            tc.gamma,
            di.horizon(),
            derive_seed(cfg.seed, ORACLE_STREAM + 1),
        )?;
        marginal_coverage(
            &pool,
            oc.n_cal,
            oc.n_test,
            oc.resamples,
            &oc.alphas,
            derive_seed(cfg.seed, ORACLE_STREAM + 2),
        )?
    } else {
        Vec::new()
    };
    for row in &coverage {
        run.summary.push(format!(
            "alpha {:.2}: mean coverage {:.4} (target {:.2})",
            row.alpha, row.mean_coverage, row.target
        ));
    }
    let conditional = conditional_coverage(99, 0.1, 500, derive_seed(cfg.seed, ORACLE_STREAM + 3))?;
    run.table("oracle_coverage", &coverage)?;
    let report = OracleReport {
        solve,
        model: hash,
        comparison,
        coverage,
        conditional,
    };
    run.report("oracle", &report)?;
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub train: Option<TrainReport>,
    pub calibration: Option<CalibrationReport>,
    pub eval: Option<EvalReport>,
    pub certify: Option<Vec<(String, usize, f64, f64, f64)>>,
    pub oracle: Option<OracleReport>,
}

fn parse<T: serde::de::DeserializeOwned>(v: Option<serde_json::Value>) -> anyhow::Result<Option<T>> {
    Ok(v.map(serde_json::from_value).transpose()?)
}

/// Collect whatever reports exist into one summary.
pub fn report(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let mut run = Run::start(cfg, "report")?;
    let names: Vec<&str> = ["train", "calibration", "eval", "certify", "oracle"]
        .into_iter()
        .filter(|n| run.store.report_path(n).exists())
        .collect();
    if names.is_empty() {
        bail!("no reports under {}", cfg.out.display());
    }
    let read = |run: &mut Run<'_>, name: &str| -> anyhow::Result<Option<serde_json::Value>> {
        if !names.contains(&name) {
            return Ok(None);
        }
        let path = run.store.report_path(name);
        let (v, hash) = crate::store::read_envelope::<serde_json::Value>(&path, crate::store::REPORT_FORMAT)?;
        run.consumed("report", path, hash);
        Ok(Some(v))
    };
    let train: Option<TrainReport> = parse(read(&mut run, "train")?)?;
    let calibration: Option<CalibrationReport> = parse(read(&mut run, "calibration")?)?;
    let eval: Option<EvalReport> = parse(read(&mut run, "eval")?)?;
    let cert: Option<CertifyReport> = parse(read(&mut run, "certify")?)?;
    let oracle: Option<OracleReport> = parse(read(&mut run, "oracle")?)?;

    if let Some(t) = &train {
        run.summary.push(format!("train: {} member(s) on {}", t.members.len(), t.system));
    }
    if let Some(c) = &calibration {
        for m in &c.members {
            let q = m
                .quantiles
                .iter()
                .find(|q| q.alpha == cfg.alpha)
                .and_then(|q| q.q_hat);
            run.summary.push(format!("calibration member {}: n = {}, q_hat = {:?}", m.member + 1, m.n, q));
        }
    }
    if let Some(e) = &eval {
        run.summary.push(format!("{:<26} {:>9} {:>8} {:>8}", "policy", "violation", "success", "timeout"));
        for r in &e.rows {
            run.summary.push(format!(
                "{:<26} {:>9.2} {:>8.2} {:>8.2}",
                r.policy, r.violation_rate, r.success_rate, r.timeout_rate
            ));
        }
    }
    let certify = cert.as_ref().map(|c| {
        c.entries
            .iter()
            .map(|e| {
                let var = BetaDist::new(e.beta_a, e.beta_b).map(|d| d.variance()).unwrap_or(0.0);
                (e.policy.clone(), e.n_cert, e.beta_a, e.beta_b, var)
            })
            .collect::<Vec<_>>()
    });
    if let Some(c) = &cert {
        for e in &c.entries {
            run.summary.push(format!(
                "certify {:<18} N = {:<4} Beta({}, {}) mean {:.4}",
                e.policy, e.n_cert, e.beta_a, e.beta_b, e.mean
            ));
        }
    }
    if let Some(o) = &oracle {
        run.summary.push(format!(
            "oracle: residual {:.2e}, sign agreement {:.4}",
            o.solve.residual, o.comparison.sign_agreement
        ));
    }
    let summary = Summary {
        train,
        calibration,
        eval,
        certify,
        oracle,
    };
    run.report("summary", &summary)?;
    run.finish()
}
