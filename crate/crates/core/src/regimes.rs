//! Epsilon chains with toughness schedules: direct lattice estimates of the homogenized
//! volume and surface densities, checked against the cell and cut values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use crate::cell_corrector::{solve_cell, CellProblem};
use crate::error::{Error, Result};
use crate::microgeometry::{build_lattice, Lattice, MicrostructureSpec, RegionLabel};
use crate::sbv_lattice::{
    am_minimize, build_recovery, energy, energy_at, recovery_constant, AmResult, BoundaryDatum, EnergyParams,
    LatticeField, SolverOptions, StartKind,
};

/// Relative slack added to every bound check, on top of the chain spread.
pub const BOUND_REL_TOL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    /// `beta = eps^2`.
    Sub,
    /// `beta = ell * eps`.
    Critical(f64),
    /// `beta = sqrt(eps)`.
    Super,
}

impl Mode {
    pub fn beta(&self, eps: f64) -> f64 {
        match self {
            Mode::Sub => eps * eps,
            Mode::Critical(ell) => ell * eps,
            Mode::Super => eps.sqrt(),
        }
    }

    /// Limit of `beta / eps`.
    pub fn ell(&self) -> f64 {
        match self {
            Mode::Sub => 0.0,
            Mode::Critical(ell) => *ell,
            Mode::Super => f64::INFINITY,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Sub => "sub",
            Mode::Critical(_) => "critical",
            Mode::Super => "super",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Critical(ell) => write!(f, "critical({ell})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimePlan {
    pub mode: Mode,
    pub n: usize,
    pub a: f64,
    pub domain_len: f64,
    /// Strictly decreasing.
    pub eps_chain: Vec<f64>,
    /// Lattice nodes per period.
    pub m: usize,
    pub solver: SolverOptions,
}

impl RegimePlan {
    pub fn validate(&self) -> Result<()> {
        if self.eps_chain.len() < 3 {
            return Err(Error::InvalidPlan(format!("eps chain needs at least 3 entries, got {}", self.eps_chain.len())));
        }
        if self.eps_chain.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidPlan("eps chain must be strictly decreasing".into()));
        }
        if let Mode::Critical(ell) = self.mode {
            if !(ell > 0.0) || !ell.is_finite() {
                return Err(Error::InvalidPlan(format!("ell must be positive and finite, got {ell}")));
            }
        }
        for &eps in &self.eps_chain {
            MicrostructureSpec::new(self.n, self.a, eps, self.domain_len)?;
            let beta = self.mode.beta(eps);
            if !(beta > 0.0 && beta <= 1.0) {
                return Err(Error::InvalidPlan(format!("beta = {beta} at eps = {eps} leaves (0, 1]")));
            }
        }
        self.solver.validate()
    }

    fn lattice(&self, eps: f64) -> Result<Arc<Lattice>> {
        let spec = MicrostructureSpec::new(self.n, self.a, eps, self.domain_len)?;
        Ok(Arc::new(build_lattice(&spec, self.m)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    F { xi: Vec<f64> },
    G { z: f64, nu: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// Which inequality was checked.
    pub kind: String,
    pub lower: f64,
    pub upper: f64,
    pub value: f64,
    /// Distance to the nearer end; negative on violation.
    pub margin: f64,
    pub ok: bool,
}

impl BoundCheck {
    fn new(kind: &str, lower: f64, upper: f64, value: f64) -> Self {
        let margin = (value - lower).min(upper - value);
        Self { kind: kind.into(), lower, upper, value, margin, ok: margin >= 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsRecord {
    pub eps: f64,
    pub beta: f64,
    /// Total energy per unit volume (f) or per unit interface area (g).
    pub density: f64,
    /// Density without the volume term; equal to `density` for f.
    pub corrected: f64,
    /// Same field evaluated at `beta = 0` and `beta = 1`.
    pub sandwich_lo: f64,
    pub sandwich_hi: f64,
    pub converged: bool,
    pub start: StartKind,
    pub damaged_fraction: f64,
    /// Whether a connected unbroken path joins the two sides of the step datum.
    pub percolates: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomEstimate {
    pub target: Target,
    pub mode: Mode,
    pub per_eps: Vec<EpsRecord>,
    /// Mean of the last two densities.
    pub value: f64,
    /// Difference of the last two densities.
    pub spread: f64,
    pub corrected_value: f64,
    pub corrected_spread: f64,
    /// Same-resolution cell value (f) or cut estimate (g) the densities are compared with.
    pub reference: Option<f64>,
    pub bound: BoundCheck,
    pub sandwich_ok: bool,
    pub converged: bool,
    pub flags: Vec<String>,
}

fn last_two(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    (0.5 * (values[k - 1] + values[k - 2]), (values[k - 1] - values[k - 2]).abs())
}

fn sandwich(f: &LatticeField, p: &EnergyParams, scale: f64) -> Result<(f64, f64, bool)> {
    let lo = energy_at(f, p.alpha, 0.0)?.total / scale;
    let mid = energy(f, p).total / scale;
    let hi = energy_at(f, p.alpha, 1.0)?.total / scale;
    Ok((lo, hi, lo <= mid && mid <= hi))
}

/// Volume density `f^ell_hom(xi)` from affine-data minimizers along the chain.
///
/// Each `eps` is solved from the affine field (with continuation) and from the
/// oscillating recovery field; the lower energy is kept.
pub fn estimate_f(xi: &[f64], plan: &RegimePlan) -> Result<HomEstimate> {
    plan.validate()?;
    if xi.len() != plan.n || xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams(format!("xi must have {} finite components", plan.n)));
    }
    let corrector = solve_cell(&CellProblem::new(xi.to_vec(), plan.a, plan.m))?;
    let fhat = corrector.fhat;
    let runs: Vec<(f64, f64, AmResult)> = plan
        .eps_chain
        .par_iter()
        .map(|&eps| -> Result<_> {
            let beta = plan.mode.beta(eps);
            let p = EnergyParams::with_beta(beta)?;
            let lat = plan.lattice(eps)?;
            let datum = BoundaryDatum::Affine { xi: xi.to_vec() };
            let affine = am_minimize(&datum, lat.clone(), &p, &plan.solver, None)?;
            let rec = build_recovery(xi, &corrector, lat.clone(), &p)?;
            let warm = SolverOptions { schedule: vec![1.0], ..plan.solver.clone() };
            let oscill = am_minimize(&datum, lat, &p, &warm, Some(&rec.field))?;
            let best = if oscill.energy.total < affine.energy.total { oscill } else { affine };
            Ok((eps, beta, best))
        })
        .collect::<Result<_>>()?;

    let volume = plan.domain_len.powi(plan.n as i32);
    let mut per_eps = Vec::new();
    let mut sandwich_ok = true;
    for (eps, beta, r) in &runs {
        let p = EnergyParams::with_beta(*beta)?;
        let (lo, hi, ok) = sandwich(&r.field, &p, volume)?;
        sandwich_ok &= ok;
        let cells = classify_cells(&r.field, &p, &CellThresholds::default());
        let density = r.energy.total / volume;
        per_eps.push(EpsRecord {
            eps: *eps,
            beta: *beta,
            density,
            corrected: density,
            sandwich_lo: lo,
            sandwich_hi: hi,
            converged: r.converged,
            start: r.start,
            damaged_fraction: cells.damaged_fraction,
            percolates: None,
        });
    }
    let densities: Vec<f64> = per_eps.iter().map(|r| r.density).collect();
    let (value, spread) = last_two(&densities);
    let xi2: f64 = xi.iter().map(|v| v * v).sum();
    let c_meas = recovery_constant(plan.n, plan.a);
    let ell = plan.mode.ell();
    let tol = spread + BOUND_REL_TOL * xi2;
    let upper = if ell.is_finite() { xi2.min(fhat + c_meas * ell) } else { xi2 };
    let bound = BoundCheck::new("ILV1", fhat - tol, upper + tol, value);
    let converged = per_eps.iter().all(|r| r.converged);
    let mut flags = Vec::new();
    if !converged {
        flags.push("iteration cap reached".into());
    }
    if !bound.ok {
        flags.push(format!("bound violation: {value} outside [{}, {}]", bound.lower, bound.upper));
    }
    Ok(HomEstimate {
        target: Target::F { xi: xi.to_vec() },
        mode: plan.mode,
        per_eps,
        value,
        spread,
        corrected_value: value,
        corrected_spread: spread,
        reference: Some(fhat),
        bound,
        sandwich_ok,
        converged,
        flags,
    })
}

/// Whether unbroken edges connect the two pinned sides of a step datum.
fn percolates(f: &LatticeField, z: f64, nu: &[f64], collar: usize) -> bool {
    let lat = &f.lattice;
    let n = lat.n();
    let len = lat.spec.domain_len;
    let side = |i: usize| crate::sbv_lattice::jump_value(&lat.node_coords(i)[..n], len, lat.h, z, nu) > 0.0;
    let pinned = |i: usize| lat.boundary_distance(i) < collar;
    let mut seen = vec![false; lat.num_nodes()];
    let mut stack: Vec<usize> = (0..lat.num_nodes()).filter(|&i| pinned(i) && side(i)).collect();
    for &i in &stack {
        seen[i] = true;
    }
    while let Some(i) = stack.pop() {
        if pinned(i) && !side(i) {
            return true;
        }
        for &k in lat.incident_edges(i) {
            if f.broken[k as usize] {
                continue;
            }
            let e = &lat.edges[k as usize];
            let j = if e.a as usize == i { e.b } else { e.a } as usize;
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    false
}

/// Surface density `g^ell_hom(z, nu)` from step-data minimizers along the chain.
/// `ghat` is the cut estimate the corrected densities are compared with, if known.
pub fn estimate_g(z: f64, nu: &[f64], plan: &RegimePlan, ghat: Option<f64>) -> Result<HomEstimate> {
    plan.validate()?;
    if z == 0.0 || !z.is_finite() {
        return Err(Error::InvalidParams(format!("jump height must be finite and nonzero, got {z}")));
    }
    let collar = plan.solver.collar.unwrap_or_else(|| crate::sbv_lattice::default_collar(plan.m));
    let runs: Vec<(f64, f64, AmResult)> = plan
        .eps_chain
        .par_iter()
        .map(|&eps| -> Result<_> {
            let beta = plan.mode.beta(eps);
            let p = EnergyParams::with_beta(beta)?;
            let datum = BoundaryDatum::Jump { z, nu: nu.to_vec() };
            Ok((eps, beta, am_minimize(&datum, plan.lattice(eps)?, &p, &plan.solver, None)?))
        })
        .collect::<Result<_>>()?;

    let area = plan.domain_len.powi(plan.n as i32 - 1);
    let mut per_eps = Vec::new();
    let mut sandwich_ok = true;
    let mut flags = Vec::new();
    for (eps, beta, r) in &runs {
        let p = EnergyParams::with_beta(*beta)?;
        let (lo, hi, ok) = sandwich(&r.field, &p, area)?;
        sandwich_ok &= ok;
        let perc = percolates(&r.field, z, nu, collar);
        if perc {
            flags.push(format!("below fracture threshold at eps = {eps}: increase z"));
        }
        let cells = classify_cells(&r.field, &p, &CellThresholds::default());
        per_eps.push(EpsRecord {
            eps: *eps,
            beta: *beta,
            density: r.energy.total / area,
            corrected: (r.energy.total - r.energy.volume) / area,
            sandwich_lo: lo,
            sandwich_hi: hi,
            converged: r.converged,
            start: r.start,
            damaged_fraction: cells.damaged_fraction,
            percolates: Some(perc),
        });
    }
    let (value, spread) = last_two(&per_eps.iter().map(|r| r.density).collect::<Vec<_>>());
    let (cvalue, cspread) = last_two(&per_eps.iter().map(|r| r.corrected).collect::<Vec<_>>());
    let bound = BoundCheck::new("B2", 0.0, 1.0 + cspread + BOUND_REL_TOL, cvalue);
    let converged = per_eps.iter().all(|r| r.converged);
    if !converged {
        flags.push("iteration cap reached".into());
    }
    if !bound.ok {
        flags.push(format!("bound violation: corrected density {cvalue} above {}", bound.upper));
    }
    Ok(HomEstimate {
        target: Target::G { z, nu: nu.to_vec() },
        mode: plan.mode,
        per_eps,
        value,
        spread,
        corrected_value: cvalue,
        corrected_spread: cspread,
        reference: ghat,
        bound,
        sandwich_ok,
        converged,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub xi: Vec<f64>,
    pub mode: Mode,
    pub lambdas: Vec<f64>,
    /// `estimate_f(lambda xi) / lambda^2`.
    pub ratios: Vec<f64>,
    /// Chain spreads scaled by `1 / lambda^2`.
    pub spreads: Vec<f64>,
    /// Same-resolution cell value `fhat(xi)`.
    pub fhat: f64,
    pub c_meas: f64,
    pub estimates: Vec<HomEstimate>,
}

impl Profile {
    /// `r(first) - r(last)` minus both spreads; positive when the decrease is resolved.
    pub fn decrease_margin(&self) -> f64 {
        let k = self.ratios.len() - 1;
        self.ratios[0] - self.ratios[k] - self.spreads[0] - self.spreads[k]
    }

    /// Largest relative deviation of the ratios from `target`.
    pub fn max_deviation(&self, target: f64) -> f64 {
        self.ratios.iter().map(|r| (r - target).abs() / target.abs()).fold(0.0, f64::max)
    }

    /// Whether consecutive ratios never increase by more than their combined spreads.
    pub fn nonincreasing_within_spread(&self) -> bool {
        (1..self.ratios.len()).all(|k| self.ratios[k] <= self.ratios[k - 1] + self.spreads[k] + self.spreads[k - 1])
    }
}

/// Ratio table `r(lambda) = f_est(lambda xi) / lambda^2`.
pub fn homogeneity_profile(xi: &[f64], lambdas: &[f64], plan: &RegimePlan) -> Result<Profile> {
    if lambdas.len() < 4 || lambdas.windows(2).any(|w| w[1] <= w[0]) || lambdas[0] <= 0.0 {
        return Err(Error::InvalidPlan("lambdas must be positive, increasing, at least 4 values".into()));
    }
    let estimates: Vec<HomEstimate> = lambdas
        .par_iter()
        .map(|&l| estimate_f(&xi.iter().map(|v| l * v).collect::<Vec<_>>(), plan))
        .collect::<Result<_>>()?;
    let ratios = estimates.iter().zip(lambdas).map(|(e, l)| e.value / (l * l)).collect();
    let spreads = estimates.iter().zip(lambdas).map(|(e, l)| e.spread / (l * l)).collect();
    let fhat = solve_cell(&CellProblem::new(xi.to_vec(), plan.a, plan.m))?.fhat;
    Ok(Profile {
        xi: xi.to_vec(),
        mode: plan.mode,
        lambdas: lambdas.to_vec(),
        ratios,
        spreads,
        fhat,
        c_meas: recovery_constant(plan.n, plan.a),
        estimates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellThresholds {
    /// Rescaled jump above which a cell is damaged.
    pub theta: f64,
    /// Rescaled energy above which a cell is bad.
    pub energy_bound: f64,
}

impl Default for CellThresholds {
    fn default() -> Self {
        Self { theta: 0.5, energy_bound: 64.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    /// Broken face area in the cell divided by `eps^{n-1}`.
    pub jump: f64,
    /// Cell energy divided by `beta eps^{n-1}`.
    pub energy: f64,
    pub good: bool,
    pub damaged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cells: Vec<CellStat>,
    pub n_bad: usize,
    pub n_damaged: usize,
    pub damaged_fraction: f64,
}

/// Per period cell `[k eps, (k + 1) eps)` jump and energy classification.
pub fn classify_cells(f: &LatticeField, p: &EnergyParams, t: &CellThresholds) -> CellReport {
    let lat = &f.lattice;
    let n = lat.n() as i32;
    let eps = lat.spec.eps;
    let face = lat.h.powi(n - 1);
    let vol_scale = lat.h.powi(n - 2);
    let mut jump = vec![0.0; lat.num_cells()];
    let mut en = vec![0.0; lat.num_cells()];
    for (k, e) in lat.edges.iter().enumerate() {
        let c = lat.cell_of_edge(e);
        let inclusion = e.label == RegionLabel::Inclusion;
        if f.broken[k] {
            jump[c] += face * e.face_frac;
            en[c] += face * e.face_frac * if inclusion { p.beta } else { 1.0 };
        } else {
            let du = f.u[e.b as usize] - f.u[e.a as usize];
            en[c] += if inclusion { p.alpha } else { 1.0 } * vol_scale * e.face_frac * du * du;
        }
    }
    let scale = eps.powi(n - 1);
    let cells: Vec<CellStat> = jump
        .iter()
        .zip(&en)
        .map(|(&j, &e)| {
            let (jr, er) = (j / scale, e / (p.beta * scale));
            let damaged = jr > t.theta;
            CellStat { jump: jr, energy: er, good: !damaged && er <= t.energy_bound, damaged }
        })
        .collect();
    let n_bad = cells.iter().filter(|c| !c.good).count();
    let n_damaged = cells.iter().filter(|c| c.damaged).count();
    let damaged_fraction = n_damaged as f64 / cells.len() as f64;
    CellReport { cells, n_bad, n_damaged, damaged_fraction }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainComparison {
    pub first: HomEstimate,
    pub second: HomEstimate,
    /// `|first.value - second.value|`; reported, not judged.
    pub discrepancy: f64,
}

/// Runs `estimate_f` on the plan's chain and on `other_chain`, to expose any dependence
/// of the critical-regime limit on the chosen sequence.
pub fn compare_chains(xi: &[f64], plan: &RegimePlan, other_chain: &[f64]) -> Result<ChainComparison> {
    let other = RegimePlan { eps_chain: other_chain.to_vec(), ..plan.clone() };
    let (first, second) = rayon::join(|| estimate_f(xi, plan), || estimate_f(xi, &other));
    let (first, second) = (first?, second?);
    let discrepancy = (first.value - second.value).abs();
    Ok(ChainComparison { first, second, discrepancy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sbv_lattice::pure_jump_field;

    fn plan(mode: Mode, a: f64, chain: &[f64], m: usize) -> RegimePlan {
        RegimePlan { mode, n: 2, a, domain_len: 1.0, eps_chain: chain.to_vec(), m, solver: SolverOptions::default() }
    }

    #[test]
    fn schedules() {
        assert_eq!(Mode::Sub.beta(0.25), 0.0625);
        assert_eq!(Mode::Critical(2.0).beta(0.25), 0.5);
        assert_eq!(Mode::Super.beta(0.25), 0.5);
        assert_eq!(Mode::Super.ell(), f64::INFINITY);
    }

    #[test]
    fn rejects_invalid_plans() {
        assert!(plan(Mode::Sub, 0.25, &[0.5, 0.25], 8).validate().is_err());
        assert!(plan(Mode::Sub, 0.25, &[0.25, 0.5, 0.125], 8).validate().is_err());
        assert!(plan(Mode::Sub, 0.25, &[0.5, 0.3, 0.25], 8).validate().is_err());
        assert!(plan(Mode::Critical(8.0), 0.25, &[0.5, 0.25, 0.125], 8).validate().is_err());
        assert!(plan(Mode::Critical(-1.0), 0.25, &[0.5, 0.25, 0.125], 8).validate().is_err());
        assert!(plan(Mode::Sub, 0.25, &[0.5, 0.25, 0.125], 8).validate().is_ok());
    }

    #[test]
    fn zero_gradient_gives_zero() {
        for mode in [Mode::Sub, Mode::Critical(1.0), Mode::Super] {
            let e = estimate_f(&[0.0, 0.0], &plan(mode, 0.25, &[0.5, 0.25, 0.125], 8)).unwrap();
            assert_eq!(e.value, 0.0);
            assert!(e.per_eps.iter().all(|r| r.density == 0.0));
        }
    }

    #[test]
    fn unperforated_surface_density_is_one() {
        let e = estimate_g(8.0, &[0.0, 1.0], &plan(Mode::Critical(1.0), 0.0, &[0.5, 0.25, 0.125], 8), None).unwrap();
        assert!((e.corrected_value - 1.0).abs() < 1e-9, "{:?}", e.per_eps);
        assert!(e.per_eps.iter().all(|r| r.percolates == Some(false)));
    }

    #[test]
    fn surface_estimate_is_symmetric() {
        let p = plan(Mode::Critical(1.0), 0.25, &[0.5, 0.25, 0.125], 8);
        let a = estimate_g(4.0, &[0.0, 1.0], &p, None).unwrap();
        let b = estimate_g(-4.0, &[0.0, -1.0], &p, None).unwrap();
        assert_eq!(a.per_eps, b.per_eps);
    }

    #[test]
    fn cell_classification_examples() {
        let spec = MicrostructureSpec::new(2, 0.25, 0.25, 1.0).unwrap();
        let lat = Arc::new(build_lattice(&spec, 8).unwrap());
        let p = EnergyParams::with_beta(0.25).unwrap();
        let flat = LatticeField::from_fn(lat.clone(), |x| x[0]);
        let r = classify_cells(&flat, &p, &CellThresholds::default());
        assert_eq!(r.n_damaged, 0);
        assert_eq!(r.n_bad, 0);
        let step = pure_jump_field(lat, 5.0, &[0.0, 1.0]);
        let r = classify_cells(&step, &p, &CellThresholds::default());
        // the step sits just below x2 = 1/2, inside the row of cells [1/4, 1/2)
        assert_eq!(r.n_damaged, 4);
    }
}
