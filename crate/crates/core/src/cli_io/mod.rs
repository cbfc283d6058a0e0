//! Command-line front end: subcommand dispatch, result caching and report emission.

pub mod config;
pub mod store;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crate::cell_corrector::{richardson, solve_cell, CellProblem};
use crate::error::{Error, Result};
use crate::regimes::{estimate_f, estimate_g, homogeneity_profile, HomEstimate, Mode, RegimePlan};
use crate::sbv_lattice::{solve_fidelity, FidelityGrid, SolverOptions};
use crate::surface_mincut::{estimate_ghat, stencil_slack, GhatEstimate};

pub use config::{RunConfig, SUBCOMMANDS};
pub use store::{
    cache_dir, line_chart, write_tables, Cache, CacheLookup, CellFRow, Check, CheckKind, EstimateRow, GhatRow, ProfileRow,
    ResultRecord, Tables, SCHEMA_LINE, VERSION,
};

/// Relative tolerance of the Sub regime checks against `fhat`.
pub const SUB_REL_TOL: f64 = 0.10;
/// Relative tolerance of the Super regime checks against `|xi|^2`.
pub const SUPER_REL_TOL: f64 = 0.05;
/// Relative agreement required of densities that should coincide.
pub const AGREE_REL_TOL: f64 = 0.10;
/// Absolute slack on bound checks, as a fraction of the natural scale.
pub const BOUND_SLACK: f64 = 0.05;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub output: PathBuf,
    /// Overrides `BH_CACHE_DIR` and the default `<output>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Recompute even when a valid cached record exists.
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// 0 when every check passed, 1 when a solver invariant failed, 2 on a bound violation.
    pub exit_code: i32,
    pub records: Vec<ResultRecord>,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub cached: bool,
}

/// First 16 hex digits of `sha256(version, subcommand, canonical config)`.
pub fn config_hash(subcommand: &str, cfg: &RunConfig) -> String {
    let mut canon = cfg.clone();
    canon.subcommand = None;
    let text = format!("{VERSION}\n{subcommand}\n{}", serde_json::to_string(&canon).expect("config serializes"));
    store::sha256_hex(text.as_bytes())[..16].to_string()
}

pub fn exit_code(checks: &[Check]) -> i32 {
    if checks.iter().any(|c| !c.ok && c.kind == CheckKind::Invariant) {
        1
    } else if checks.iter().any(|c| !c.ok) {
        2
    } else {
        0
    }
}

pub fn run(subcommand: &str, cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    if !SUBCOMMANDS.contains(&subcommand) {
        return Err(Error::InvalidPlan(format!("unknown subcommand '{subcommand}'")));
    }
    cfg.validate()?;
    let cache = Cache::new(opts.cache_dir.clone().unwrap_or_else(|| cache_dir(&opts.output)));
    if subcommand == "report" {
        return report(&cache, &opts.output);
    }
    check_plan(subcommand, cfg)?;

    let key = config_hash(subcommand, cfg);
    let mut warnings = Vec::new();
    let mut cached = None;
    if !opts.force {
        match cache.get(&key) {
            CacheLookup::Hit(r) => cached = Some(*r),
            CacheLookup::Miss => {}
            CacheLookup::Corrupt(w) => warnings.push(format!("rebuilding corrupt cache record {w}")),
        }
    }
    let was_cached = cached.is_some();
    let record = match cached {
        Some(r) => r,
        None => {
            let start = Instant::now();
            let (tables, checks, flags, details) = compute(subcommand, cfg)?;
            let record = ResultRecord {
                version: VERSION.into(),
                config_hash: key.clone(),
                operation: subcommand.into(),
                inputs: serde_json::to_value(cfg)?,
                tables,
                checks,
                flags,
                details,
                seconds: start.elapsed().as_secs_f64(),
                checksum: String::new(),
            }
            .seal();
            cache.put(&record)?;
            record
        }
    };
    let which: Vec<&str> = [
        ("cell_f", record.tables.cell_f.is_empty()),
        ("ghat", record.tables.ghat.is_empty()),
        ("estimates", record.tables.estimates.is_empty()),
        ("profile", record.tables.profile.is_empty()),
    ]
    .into_iter()
    .filter(|(_, empty)| !empty)
    .map(|(n, _)| n)
    .collect();
    let files = write_tables(&opts.output, &[(key, record.tables.clone())], &which)?;
    Ok(RunOutcome { exit_code: exit_code(&record.checks), records: vec![record], files, warnings, cached: was_cached })
}

fn plan_of(cfg: &RunConfig) -> RegimePlan {
    RegimePlan {
        mode: cfg.plan.mode,
        n: cfg.microstructure.n,
        a: cfg.microstructure.a,
        domain_len: cfg.microstructure.domain_len,
        eps_chain: cfg.plan.eps_chain.clone(),
        m: *cfg.solver.m.last().expect("validated"),
        solver: SolverOptions {
            schedule: cfg.solver.schedule.clone(),
            cg_tol: cfg.solver.cg_tol,
            max_outer: cfg.solver.max_outer,
            collar: cfg.solver.collar,
            ..SolverOptions::default()
        },
    }
}

/// Subcommand-specific validation, run before any solve.
fn check_plan(subcommand: &str, cfg: &RunConfig) -> Result<()> {
    let m = *cfg.solver.m.last().expect("validated");
    let cells = || -> Result<()> {
        for &m in &cfg.solver.m {
            for xi in &cfg.plan.xi {
                CellProblem { tol: cfg.solver.tol, ..CellProblem::new(xi.clone(), cfg.microstructure.a, m) }.validate()?;
            }
        }
        Ok(())
    };
    let cuts = || -> Result<()> {
        let t = &cfg.solver.t_chain;
        if t.len() < 3 || t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidCutProblem("solver.t_chain must be increasing with at least three entries".into()));
        }
        for nu in &cfg.plan.nu {
            for &t in t {
                let p = crate::surface_mincut::CutProblem::new(nu.clone(), cfg.microstructure.a, t, m, cfg.solver.stencil);
                p.validate()?;
            }
        }
        Ok(())
    };
    let regimes = || -> Result<()> {
        plan_of(cfg).validate()?;
        plan_of(cfg).solver.validate()
    };
    let lambdas = || -> Result<()> {
        let l = &cfg.plan.lambda;
        if l.len() < 4 || l[0] <= 0.0 || l.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidPlan("plan.lambda must be positive, increasing, at least 4 values".into()));
        }
        Ok(())
    };
    let jumps = || -> Result<()> {
        if cfg.plan.z.is_empty() || cfg.plan.z.contains(&0.0) {
            return Err(Error::InvalidPlan("plan.z must list nonzero jump heights".into()));
        }
        Ok(())
    };
    match subcommand {
        "cell-f" => cells(),
        "surface-g" => cuts(),
        "estimate-f" => regimes().and_then(|_| cells()),
        "estimate-g" => regimes().and_then(|_| cuts()).and_then(|_| jumps()),
        "homogeneity" => regimes().and_then(|_| cells()).and_then(|_| lambdas()),
        "regime-sweep" => {
            regimes()?;
            cells()?;
            if !cfg.plan.lambda.is_empty() {
                lambdas()?;
            }
            if !cfg.plan.z.is_empty() {
                cuts()?;
                jumps()?;
            }
            Ok(())
        }
        "denoise" => {
            regimes()?;
            if cfg.plan.eps_chain.len() < 2 {
                return Err(Error::InvalidPlan("denoise needs at least two eps values".into()));
            }
            let h = denoise_h(cfg);
            if !(h > 0.0) {
                return Err(Error::InvalidPlan("plan.h must be positive".into()));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

type Computed = (Tables, Vec<Check>, Vec<String>, serde_json::Value);

fn check(name: impl Into<String>, kind: CheckKind, ok: bool, detail: impl Into<String>) -> Check {
    Check { name: name.into(), kind, ok, detail: detail.into() }
}

fn compute(subcommand: &str, cfg: &RunConfig) -> Result<Computed> {
    let mut out = Computed::default();
    match subcommand {
        "cell-f" => cell_f(cfg, &mut out)?,
        "surface-g" => {
            surface_g(cfg, &mut out)?;
        }
        "estimate-f" => {
            for xi in &cfg.plan.xi {
                let est = estimate_f(xi, &plan_of(cfg))?;
                record_f(&est, &mut out);
            }
        }
        "estimate-g" => {
            let ghats = surface_g(cfg, &mut out)?;
            jumps(cfg, &ghats, &mut out)?;
        }
        "homogeneity" => homogeneity(cfg, &mut out)?,
        "regime-sweep" => {
            cell_f(cfg, &mut out)?;
            for xi in &cfg.plan.xi {
                let est = estimate_f(xi, &plan_of(cfg))?;
                record_f(&est, &mut out);
            }
            if !cfg.plan.lambda.is_empty() {
                homogeneity(cfg, &mut out)?;
            }
            if !cfg.plan.z.is_empty() {
                let ghats = surface_g(cfg, &mut out)?;
                jumps(cfg, &ghats, &mut out)?;
            }
        }
        "denoise" => denoise(cfg, &mut out)?,
        other => unreachable!("{other} is dispatched earlier"),
    }
    out.2.sort();
    out.2.dedup();
    Ok(out)
}

fn push_detail(out: &mut Computed, key: &str, value: serde_json::Value) {
    if !out.3.is_object() {
        out.3 = json!({});
    }
    let obj = out.3.as_object_mut().expect("object");
    match obj.get_mut(key) {
        Some(serde_json::Value::Array(list)) => list.push(value),
        _ => {
            obj.insert(key.into(), json!([value]));
        }
    }
}

fn cell_f(cfg: &RunConfig, out: &mut Computed) -> Result<()> {
    let a = cfg.microstructure.a;
    for xi in &cfg.plan.xi {
        let xi2: f64 = xi.iter().map(|v| v * v).sum();
        let mut values = Vec::new();
        for &m in &cfg.solver.m {
            let c = solve_cell(&CellProblem { tol: cfg.solver.tol, ..CellProblem::new(xi.clone(), a, m) })?;
            out.0.cell_f.push(CellFRow { a, m: m.to_string(), xi: xi.clone(), fhat: c.fhat, residual: c.residual });
            out.1.push(check(
                format!("cell solve converged (xi={xi:?}, M={m})"),
                CheckKind::Invariant,
                c.converged,
                format!("residual {:e} after {} iterations", c.residual, c.iterations),
            ));
            out.1.push(check(
                format!("B1 bracket (xi={xi:?}, M={m})"),
                CheckKind::Bound,
                c.fhat >= -1e-12 && c.fhat <= xi2 * (1.0 + 1e-10) + 1e-12,
                format!("0 <= {} <= {xi2}", c.fhat),
            ));
            if a == 0.0 {
                out.1.push(check(
                    format!("unperforated exactness (xi={xi:?}, M={m})"),
                    CheckKind::Invariant,
                    (c.fhat - xi2).abs() <= 1e-10,
                    format!("fhat {} vs |xi|^2 {xi2}", c.fhat),
                ));
            }
            values.push(c.fhat);
        }
        if cfg.solver.m.len() >= 2 {
            let ex = richardson(&cfg.solver.m, &values);
            out.0.cell_f.push(CellFRow { a, m: "inf".into(), xi: xi.clone(), fhat: ex.value, residual: ex.spread });
            push_detail(out, "extrapolation", json!({"xi": xi, "value": ex.value, "order": ex.order, "spread": ex.spread}));
        }
    }
    Ok(())
}

fn surface_g(cfg: &RunConfig, out: &mut Computed) -> Result<Vec<GhatEstimate>> {
    let a = cfg.microstructure.a;
    let n = cfg.microstructure.n;
    let m = *cfg.solver.m.last().expect("validated");
    let slack = stencil_slack(cfg.solver.stencil, n)?;
    let mut all = Vec::new();
    for nu in &cfg.plan.nu {
        let g = estimate_ghat(nu, a, &cfg.solver.t_chain, m, cfg.solver.stencil)?;
        for (&t, &v) in g.t_chain.iter().zip(&g.per_area) {
            out.0.ghat.push(GhatRow { nu: nu.clone(), a, t, per_area: v, stencil: cfg.solver.stencil.to_string() });
        }
        let axis = nu.iter().filter(|v| **v != 0.0).count() == 1;
        out.1.push(check(
            format!("B2 upper bound (nu={nu:?})"),
            CheckKind::Bound,
            g.per_area.iter().all(|&v| v <= 1.0 + slack + 1e-12),
            format!("max per_area {} vs 1 + slack {slack}", g.per_area.iter().cloned().fold(0.0, f64::max)),
        ));
        if a == 0.0 && axis {
            out.1.push(check(
                format!("unperforated cut (nu={nu:?})"),
                CheckKind::Invariant,
                g.per_area.iter().all(|&v| v == 1.0),
                format!("per_area {:?}", g.per_area),
            ));
        }
        if g.low_confidence {
            out.2.push(format!("low confidence ghat(nu={nu:?}): t-chain spread {:.3}", g.spread));
        }
        push_detail(out, "ghat", serde_json::to_value(&g)?);
        all.push(g);
    }
    Ok(all)
}

fn estimate_rows(est: &HomEstimate, target: &str, corrected: bool, ok: bool, out: &mut Computed) {
    let (mode, ell) = (est.mode.name().to_string(), est.mode.ell());
    let ell = if ell.is_finite() { ell } else { 0.0 };
    for r in &est.per_eps {
        out.0.estimates.push(EstimateRow {
            mode: mode.clone(),
            ell,
            eps: r.eps,
            beta: r.beta,
            target: target.into(),
            density: if corrected { r.corrected } else { r.density },
            spread: if corrected { est.corrected_spread } else { est.spread },
            bound_ok: ok,
        });
    }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

fn record_f(est: &HomEstimate, out: &mut Computed) {
    let crate::regimes::Target::F { xi } = &est.target else { unreachable!("f estimate") };
    let xi2: f64 = xi.iter().map(|v| v * v).sum();
    let fhat = est.reference.unwrap_or(f64::NAN);
    let tag = format!("f({})", fmt_vec(xi));
    let (name, ok, detail) = match est.mode {
        Mode::Sub => {
            let dev = if fhat > 0.0 { (est.value - fhat).abs() / fhat } else { est.value.abs() };
            ("sub regime: estimate matches fhat", dev <= SUB_REL_TOL, format!("{} vs fhat {fhat} (rel {dev:.4})", est.value))
        }
        Mode::Super => {
            let dev = if xi2 > 0.0 { (est.value - xi2).abs() / xi2 } else { est.value.abs() };
            ("super regime: estimate matches |xi|^2", dev <= SUPER_REL_TOL, format!("{} vs {xi2} (rel {dev:.4})", est.value))
        }
        Mode::Critical(_) => (
            "critical regime: estimate inside bound",
            est.bound.ok,
            format!("{} in [{}, {}]", est.value, est.bound.lower, est.bound.upper),
        ),
    };
    let ok = ok && est.bound.ok;
    estimate_rows(est, &tag, false, ok, out);
    out.1.push(check(format!("{name} ({tag})"), CheckKind::Bound, ok, detail));
    out.1.push(check(
        format!("{} ({tag})", est.bound.kind),
        CheckKind::Bound,
        est.bound.ok,
        format!("{} in [{}, {}]", est.value, est.bound.lower, est.bound.upper),
    ));
    out.1.push(check(format!("energy sandwich ({tag})"), CheckKind::Invariant, est.sandwich_ok, ""));
    out.2.extend(est.flags.iter().map(|f| format!("{tag}: {f}")));
    push_detail(out, "estimates", serde_json::to_value(est).expect("estimate serializes"));
}

fn jumps(cfg: &RunConfig, ghats: &[GhatEstimate], out: &mut Computed) -> Result<()> {
    let plan = plan_of(cfg);
    for (nu, g) in cfg.plan.nu.iter().zip(ghats) {
        let mut values = Vec::new();
        for &z in &cfg.plan.z {
            let est = estimate_g(z, nu, &plan, Some(g.limit))?;
            let tag = format!("g({z}; {})", fmt_vec(nu));
            estimate_rows(&est, &format!("{tag} raw"), false, est.bound.ok, out);
            estimate_rows(&est, &tag, true, est.bound.ok, out);
            out.1.push(check(
                format!("B2 ({tag})"),
                CheckKind::Bound,
                est.bound.ok,
                format!("corrected {} <= {}", est.corrected_value, est.bound.upper),
            ));
            if g.limit > 0.0 && matches!(plan.mode, Mode::Critical(_)) {
                let dev = (est.corrected_value - g.limit).abs() / g.limit;
                out.1.push(check(
                    format!("surface identification ({tag})"),
                    CheckKind::Bound,
                    dev <= AGREE_REL_TOL,
                    format!("corrected {} vs ghat {} (rel {dev:.4})", est.corrected_value, g.limit),
                ));
            }
            out.1.push(check(format!("energy sandwich ({tag})"), CheckKind::Invariant, est.sandwich_ok, ""));
            out.2.extend(est.flags.iter().map(|f| format!("{tag}: {f}")));
            values.push(est.corrected_value);
            push_detail(out, "estimates", serde_json::to_value(&est)?);
        }
        if values.len() >= 2 {
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.1.push(check(
                format!("jump-height independence (nu={nu:?})"),
                CheckKind::Bound,
                hi - lo <= AGREE_REL_TOL * lo.abs(),
                format!("corrected densities {values:?}"),
            ));
        }
    }
    Ok(())
}

fn homogeneity(cfg: &RunConfig, out: &mut Computed) -> Result<()> {
    let plan = plan_of(cfg);
    for xi in &cfg.plan.xi {
        let prof = homogeneity_profile(xi, &cfg.plan.lambda, &plan)?;
        let xi2: f64 = xi.iter().map(|v| v * v).sum();
        let tag = fmt_vec(xi);
        for (k, (&l, &r)) in prof.lambdas.iter().zip(&prof.ratios).enumerate() {
            out.0.profile.push(ProfileRow { mode: plan.mode.name().into(), xi: xi.clone(), lambda: l, ratio: r });
            let est = &prof.estimates[k];
            estimate_rows(est, &format!("f({l} * ({tag}))"), false, est.bound.ok, out);
            out.1.push(check(format!("energy sandwich (lambda={l}, xi={tag})"), CheckKind::Invariant, est.sandwich_ok, ""));
            out.2.extend(est.flags.iter().map(|f| format!("lambda={l}, xi={tag}: {f}")));
        }
        let k = prof.ratios.len() - 1;
        match plan.mode {
            Mode::Critical(ell) => {
                let (l0, lk) = (prof.lambdas[0], prof.lambdas[k]);
                let r0_ok = (prof.ratios[0] - xi2).abs() <= BOUND_SLACK * xi2 || xi2 == 0.0;
                out.1.push(check(
                    format!("small-gradient branch r({l0}) (xi={tag})"),
                    CheckKind::Bound,
                    r0_ok,
                    format!("r = {} vs |xi|^2 = {xi2}", prof.ratios[0]),
                ));
                let upper = prof.fhat + prof.c_meas * ell / (lk * lk) + BOUND_SLACK * xi2;
                out.1.push(check(
                    format!("large-gradient bound r({lk}) (xi={tag})"),
                    CheckKind::Bound,
                    prof.ratios[k] <= upper,
                    format!("r = {} <= {upper}", prof.ratios[k]),
                ));
                out.1.push(check(
                    format!("not 2-homogeneous (xi={tag})"),
                    CheckKind::Bound,
                    prof.decrease_margin() > 0.0,
                    format!("r({l0}) - r({lk}) minus spreads = {}", prof.decrease_margin()),
                ));
            }
            Mode::Sub => {
                let dev = prof.max_deviation(prof.fhat);
                out.1.push(check(
                    format!("sub profile flat at fhat (xi={tag})"),
                    CheckKind::Bound,
                    dev <= SUB_REL_TOL,
                    format!("max rel deviation {dev:.4} from {}", prof.fhat),
                ));
            }
            Mode::Super => {
                let dev = prof.max_deviation(xi2);
                out.1.push(check(
                    format!("super profile flat at |xi|^2 (xi={tag})"),
                    CheckKind::Bound,
                    dev <= SUPER_REL_TOL,
                    format!("max rel deviation {dev:.4} from {xi2}"),
                ));
            }
        }
        push_detail(
            out,
            "profiles",
            json!({"xi": xi, "lambdas": prof.lambdas, "ratios": prof.ratios, "spreads": prof.spreads, "fhat": prof.fhat, "c_meas": prof.c_meas}),
        );
    }
    Ok(())
}

fn denoise_h(cfg: &RunConfig) -> f64 {
    let finest = cfg.plan.eps_chain.iter().cloned().fold(f64::INFINITY, f64::min);
    cfg.plan.h.unwrap_or(finest / *cfg.solver.m.last().expect("validated") as f64)
}

/// Step datum `g = 1` on `x_1 >= L/2`, zero elsewhere.
fn denoise(cfg: &RunConfig, out: &mut Computed) -> Result<()> {
    let plan = plan_of(cfg);
    let grid = FidelityGrid { n: plan.n, a: plan.a, domain_len: plan.domain_len, h: denoise_h(cfg) };
    let g: Vec<f64> = grid.coords().iter().map(|x| if x[0] >= 0.5 * plan.domain_len { 1.0 } else { 0.0 }).collect();
    let mode = plan.mode;
    let run = solve_fidelity(&g, grid, &plan.eps_chain, cfg.plan.weight, |e| mode.beta(e), &plan.solver)?;
    let ell = if mode.ell().is_finite() { mode.ell() } else { 0.0 };
    let k = run.minima.len();
    let (last, prev) = (run.minima[k - 1], run.minima[k - 2]);
    let settle = (last - prev).abs() <= AGREE_REL_TOL * last.abs().max(prev.abs());
    let decreasing = run.distances.windows(2).all(|w| w[1] <= w[0]);
    for (i, (&eps, &m)) in run.eps.iter().zip(&run.minima).enumerate() {
        out.0.estimates.push(EstimateRow {
            mode: mode.name().into(),
            ell,
            eps,
            beta: run.beta[i],
            target: "fidelity minimum".into(),
            density: m,
            spread: if i == 0 { 0.0 } else { run.distances[i - 1] },
            bound_ok: settle && decreasing,
        });
    }
    out.1.push(check("minimum values settle", CheckKind::Bound, settle, format!("last two minima {prev} and {last}")));
    out.1.push(check("minimizer distances decrease", CheckKind::Bound, decreasing, format!("distances {:?}", run.distances)));
    if !run.converged {
        out.2.push("denoise: iteration cap reached".into());
    }
    out.3 = json!({"h": grid.h, "eps": run.eps, "beta": run.beta, "minima": run.minima, "distances": run.distances});
    Ok(())
}

/// Aggregates every verifiable cached record into the four CSV tables and three charts.
fn report(cache: &Cache, output: &Path) -> Result<RunOutcome> {
    let (records, mut warnings) = cache.records();
    warnings.iter_mut().for_each(|w| *w = format!("skipping unverifiable cache record {w}"));
    let tagged: Vec<(String, Tables)> = records.iter().map(|r| (r.config_hash.clone(), r.tables.clone())).collect();
    let mut files = write_tables(output, &tagged, &["cell_f", "ghat", "estimates", "profile"])?;

    let mut by_m: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut profiles: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut densities: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (_, t) in &tagged {
        for r in &t.cell_f {
            by_m.entry(format!("xi={} M={}", fmt_vec(&r.xi), r.m)).or_default().push((r.a, r.fhat));
        }
        for r in &t.profile {
            profiles.entry(format!("{} xi={}", r.mode, fmt_vec(&r.xi))).or_default().push((r.lambda, r.ratio));
        }
        for r in &t.estimates {
            densities.entry(format!("{} {}", r.mode, r.target)).or_default().push((r.eps, r.density));
        }
    }
    let series = |m: BTreeMap<String, Vec<(f64, f64)>>| -> Vec<(String, Vec<(f64, f64)>)> {
        m.into_iter()
            .map(|(k, mut v)| {
                v.sort_by(|a, b| a.0.total_cmp(&b.0));
                (k, v)
            })
            .collect()
    };
    for (name, title, x, y, data) in [
        ("fhat_vs_a.svg", "cell energy fhat against inclusion size", "a", "fhat", by_m),
        ("profile.svg", "homogeneity ratio r(lambda)", "lambda", "r", profiles),
        ("densities.svg", "energy density against eps", "eps", "density", densities),
    ] {
        let path = output.join(name);
        std::fs::write(&path, line_chart(title, x, y, &series(data)))?;
        files.push(path);
    }
    let checks: Vec<Check> = records.iter().flat_map(|r| r.checks.clone()).collect();
    Ok(RunOutcome { exit_code: exit_code(&checks), records, files, warnings, cached: true })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(dir: &Path) -> RunOptions {
        RunOptions { output: dir.to_path_buf(), cache_dir: Some(dir.join("cache")), force: false }
    }

    #[test]
    fn hash_ignores_output_but_not_subcommand() {
        let mut a = RunConfig::parse("[solver]\nM = 8\n").unwrap();
        let b = a.clone();
        a.output = Some("elsewhere".into());
        assert_eq!(config_hash("cell-f", &a), config_hash("cell-f", &b));
        assert_ne!(config_hash("cell-f", &a), config_hash("surface-g", &a));
        assert_eq!(config_hash("cell-f", &a).len(), 16);
    }

    #[test]
    fn cell_f_unperforated_row() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse("[microstructure]\na = 0\n[solver]\nM = 8\n").unwrap();
        let out = run("cell-f", &cfg, &opts(dir.path())).unwrap();
        assert_eq!(out.exit_code, 0);
        let text = std::fs::read_to_string(dir.path().join("cell_f.csv")).unwrap();
        let row: Vec<&str> = text.lines().nth(2).unwrap().split(',').collect();
        assert_eq!(row[0], config_hash("cell-f", &cfg));
        assert!((row[4].parse::<f64>().unwrap() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn second_run_hits_cache_and_corruption_rebuilds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse("[solver]\nM = 8\n").unwrap();
        let first = run("cell-f", &cfg, &opts(dir.path())).unwrap();
        assert!(!first.cached);
        let csv = std::fs::read(dir.path().join("cell_f.csv")).unwrap();
        let second = run("cell-f", &cfg, &opts(dir.path())).unwrap();
        assert!(second.cached);
        assert_eq!(std::fs::read(dir.path().join("cell_f.csv")).unwrap(), csv);
        let key = config_hash("cell-f", &cfg);
        std::fs::write(dir.path().join("cache").join(format!("{key}.json")), "garbage").unwrap();
        let third = run("cell-f", &cfg, &opts(dir.path())).unwrap();
        assert!(!third.cached);
        assert_eq!(third.warnings.len(), 1);
        assert_eq!(std::fs::read(dir.path().join("cell_f.csv")).unwrap(), csv);
    }

    #[test]
    fn empty_report_writes_headers() {
        let dir = tempfile::tempdir().unwrap();
        let out = run("report", &RunConfig::default(), &opts(dir.path())).unwrap();
        assert_eq!(out.exit_code, 0);
        for name in ["cell_f", "ghat", "estimates", "profile"] {
            let text = std::fs::read_to_string(dir.path().join(format!("{name}.csv"))).unwrap();
            assert_eq!(text.lines().count(), 2, "{name}");
            assert_eq!(text.lines().next(), Some(SCHEMA_LINE));
        }
        assert!(dir.path().join("profile.svg").exists());
    }

    #[test]
    fn plan_errors_precede_solves() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse("[plan]\nlambda = 1, 2\n").unwrap();
        assert!(run("homogeneity", &cfg, &opts(dir.path())).is_err());
        assert!(!dir.path().join("cache").exists());
        let cfg = RunConfig::parse("[plan]\neps_chain = 1/4, 1/8\n").unwrap();
        assert!(run("estimate-f", &cfg, &opts(dir.path())).is_err());
    }

    #[test]
    fn exit_codes() {
        let c = |kind, ok| check("c", kind, ok, "");
        assert_eq!(exit_code(&[c(CheckKind::Bound, true)]), 0);
        assert_eq!(exit_code(&[c(CheckKind::Bound, false)]), 2);
        assert_eq!(exit_code(&[c(CheckKind::Bound, false), c(CheckKind::Invariant, false)]), 1);
    }
}
