//! Weak-membrane lattice energy of the high-contrast free-discontinuity problem and its
//! alternating minimization.
//!
//! Each lattice edge carries either the quadratic term `weight h^{n-2} (du)^2` or, when
//! broken, the surface term `kappa h^{n-1}` with `kappa = 1` on matrix edges and `beta`
//! on inclusion edges. Both are scaled by the edge's dual face fraction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::cell_corrector::CorrectorField;
use crate::error::{Error, Result};
use crate::linalg::pcg;
use crate::microgeometry::{build_lattice, Edge, Lattice, MicrostructureSpec, RegionLabel};

/// Graduated non-convexity factors applied to the break threshold.
pub const DEFAULT_SCHEDULE: [f64; 4] = [8.0, 4.0, 2.0, 1.0];
const MONOTONE_TOL: f64 = 1e-12;
const STOP_TOL: f64 = 1e-10;
const HUBER_REL_WIDTH: f64 = 1e-6;
/// CG tolerance while the threshold factor is above 1.
const CONTINUATION_CG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    /// Volume weight on inclusion edges.
    pub alpha: f64,
    /// Surface weight on inclusion edges.
    pub beta: f64,
}

impl EnergyParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidParams(format!("beta must lie in (0, 1], got {beta}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidParams(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn with_beta(beta: f64) -> Result<Self> {
        Self::new(1.0, beta)
    }
}

#[derive(Debug, Clone)]
pub struct LatticeField {
    pub lattice: Arc<Lattice>,
    pub u: Vec<f64>,
    /// Broken flag per edge; the discrete jump set.
    pub broken: Vec<bool>,
}

impl LatticeField {
    pub fn new(lattice: Arc<Lattice>, u: Vec<f64>, broken: Vec<bool>) -> Result<Self> {
        if u.len() != lattice.num_nodes() || broken.len() != lattice.num_edges() {
            return Err(Error::LatticeMismatch(format!(
                "field has {} values and {} flags for a lattice with {} nodes and {} edges",
                u.len(),
                broken.len(),
                lattice.num_nodes(),
                lattice.num_edges()
            )));
        }
        if let Some(i) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite value at node {i}")));
        }
        Ok(Self { lattice, u, broken })
    }

    pub fn from_fn(lattice: Arc<Lattice>, f: impl Fn(&[f64]) -> f64) -> Self {
        let n = lattice.n();
        let u = (0..lattice.num_nodes()).map(|i| f(&lattice.node_coords(i)[..n])).collect();
        let broken = vec![false; lattice.num_edges()];
        Self { lattice, u, broken }
    }

    pub fn num_broken(&self) -> usize {
        self.broken.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub volume: f64,
    /// Broken matrix face area.
    pub surf_matrix: f64,
    /// Broken inclusion face area, before the factor `beta`.
    pub surf_inclusion: f64,
    pub fidelity: f64,
    pub total: f64,
}

/// Neumaier-compensated running sum; keeps energy comparisons at rounding level.
#[derive(Default, Clone, Copy)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }
    fn value(self) -> f64 {
        self.s + self.c
    }
}

#[inline]
fn edge_weight(e: &Edge, alpha: f64) -> f64 {
    match e.label {
        RegionLabel::Matrix => 1.0,
        RegionLabel::Inclusion => alpha,
    }
}

#[inline]
fn edge_toughness(e: &Edge, beta: f64) -> f64 {
    match e.label {
        RegionLabel::Matrix => 1.0,
        RegionLabel::Inclusion => beta,
    }
}

fn bulk_terms(f: &LatticeField, alpha: f64, beta: f64) -> EnergyBreakdown {
    let lat = &f.lattice;
    let n = lat.n() as i32;
    let vol_scale = lat.h.powi(n - 2);
    let face = lat.h.powi(n - 1);
    let (mut vol, mut sm, mut si) = (Sum::default(), Sum::default(), Sum::default());
    for (k, e) in lat.edges.iter().enumerate() {
        if f.broken[k] {
            match e.label {
                RegionLabel::Matrix => sm.add(face * e.face_frac),
                RegionLabel::Inclusion => si.add(face * e.face_frac),
            }
        } else {
            let du = f.u[e.b as usize] - f.u[e.a as usize];
            vol.add(edge_weight(e, alpha) * vol_scale * e.face_frac * du * du);
        }
    }
    let (volume, surf_matrix, surf_inclusion) = (vol.value(), sm.value(), si.value());
    EnergyBreakdown { volume, surf_matrix, surf_inclusion, fidelity: 0.0, total: volume + surf_matrix + beta * surf_inclusion }
}

/// Exact three-term lattice energy.
pub fn energy(f: &LatticeField, p: &EnergyParams) -> EnergyBreakdown {
    bulk_terms(f, p.alpha, p.beta)
}

/// Energy for arbitrary `(alpha, beta)` in `[0, 1]^2`, including the endpoint `beta = 0`
/// used by the lower sandwich bound.
pub fn energy_at(f: &LatticeField, alpha: f64, beta: f64) -> Result<EnergyBreakdown> {
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidParams(format!("(alpha, beta) = ({alpha}, {beta}) outside [0, 1]^2")));
    }
    Ok(bulk_terms(f, alpha, beta))
}

/// `weight h^n sum |u - g|` over matrix nodes.
pub fn fidelity_term(f: &LatticeField, g: &[f64], weight: f64) -> f64 {
    let lat = &f.lattice;
    let hn = lat.h.powi(lat.n() as i32);
    let mut s = Sum::default();
    for i in 0..lat.num_nodes() {
        if lat.node_labels[i] == RegionLabel::Matrix {
            s.add((f.u[i] - g[i]).abs());
        }
    }
    weight * hn * s.value()
}

fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * a * a / delta
    } else {
        a - 0.5 * delta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BoundaryDatum {
    /// Collar pinned to `xi . x`.
    Affine { xi: Vec<f64> },
    /// Collar pinned to the step of height `z` across the plane through the domain
    /// centre with normal `nu`.
    Jump { z: f64, nu: Vec<f64> },
    /// No pinning; `weight * L1` distance to `g` over matrix nodes.
    Fidelity { g: Vec<f64>, weight: f64 },
}

/// Side indicator of the step datum. Nodes on the plane go to the side of the
/// orientation whose first nonzero component is positive, so that `(z, nu)` and
/// `(-z, -nu)` give the same step up to a constant.
fn upper_side(x: &[f64], centre: f64, nu: &[f64], tol: f64) -> bool {
    let s: f64 = x.iter().zip(nu).map(|(xi, ni)| (xi - centre) * ni).sum();
    if s.abs() <= tol {
        nu.iter().find(|v| **v != 0.0).is_some_and(|v| *v > 0.0)
    } else {
        s > 0.0
    }
}

/// Step datum value `z (1_S - 1/2)`; the half shift makes `(z, nu)` and `(-z, -nu)`
/// coincide bit for bit and does not change any energy.
pub fn jump_value(x: &[f64], domain_len: f64, h: f64, z: f64, nu: &[f64]) -> f64 {
    let side = if upper_side(x, 0.5 * domain_len, nu, 1e-9 * h) { 1.0 } else { 0.0 };
    z * (side - 0.5)
}

pub fn default_collar(m: usize) -> usize {
    (m / 8).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Threshold factors, ending at 1.
    pub schedule: Vec<f64>,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Cap on J/u sweeps per schedule entry.
    pub max_outer: usize,
    /// Pinned collar width in lattice steps; `None` uses `max(1, M/8)`.
    pub collar: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { schedule: DEFAULT_SCHEDULE.to_vec(), cg_tol: 1e-10, cg_max_iter: 20_000, max_outer: 100, collar: None }
    }
}

impl SolverOptions {
    pub fn with_schedule(schedule: &[f64]) -> Self {
        Self { schedule: schedule.to_vec(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() || *self.schedule.last().unwrap() != 1.0 {
            return Err(Error::InvalidParams("schedule must end at 1".into()));
        }
        if self.schedule.iter().any(|s| !(*s >= 1.0) || !s.is_finite()) {
            return Err(Error::InvalidParams(format!("schedule factors must be finite and >= 1: {:?}", self.schedule)));
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iter == 0 || self.max_outer == 0 {
            return Err(Error::InvalidParams("CG tolerance and iteration caps must be positive".into()));
        }
        if self.collar == Some(0) {
            return Err(Error::InvalidParams("collar must be at least one lattice step".into()));
        }
        Ok(())
    }
}

/// Pinned nodes and frozen edges implied by a datum.
struct Constraints {
    pinned: Vec<bool>,
    /// Datum value on pinned nodes.
    values: Vec<f64>,
    /// Fixed break flag for edges with both ends pinned.
    frozen: Vec<Option<bool>>,
    fidelity: Option<(Vec<f64>, f64, f64)>,
}

fn constraints(lat: &Lattice, datum: &BoundaryDatum, collar: usize) -> Result<Constraints> {
    let n = lat.n();
    let nn = lat.num_nodes();
    let mut pinned = vec![false; nn];
    let mut values = vec![0.0; nn];
    let mut fidelity = None;
    match datum {
        BoundaryDatum::Affine { xi } => {
            if xi.len() != n || xi.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams(format!("xi must have {n} finite components")));
            }
            for i in 0..nn {
                if lat.boundary_distance(i) < collar {
                    pinned[i] = true;
                    let x = lat.node_coords(i);
                    values[i] = xi.iter().zip(&x).map(|(a, b)| a * b).sum();
                }
            }
        }
        BoundaryDatum::Jump { z, nu } => {
            let norm = nu.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nu.len() != n || (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParams(format!("nu must be a unit vector with {n} components")));
            }
            if !z.is_finite() || *z == 0.0 {
                return Err(Error::InvalidParams(format!("jump height must be finite and nonzero, got {z}")));
            }
            for i in 0..nn {
                if lat.boundary_distance(i) < collar {
                    pinned[i] = true;
                    values[i] = jump_value(&lat.node_coords(i)[..n], lat.spec.domain_len, lat.h, *z, nu);
                }
            }
        }
        BoundaryDatum::Fidelity { g, weight } => {
            if g.len() != nn {
                return Err(Error::LatticeMismatch(format!("{} samples for {nn} nodes", g.len())));
            }
            if g.iter().any(|v| !v.is_finite()) || !(*weight >= 0.0) || !weight.is_finite() {
                return Err(Error::InvalidParams("fidelity data and weight must be finite, weight >= 0".into()));
            }
            let (lo, hi) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let range = hi - lo;
            let delta = HUBER_REL_WIDTH * if range > 0.0 { range } else { 1.0 };
            fidelity = Some((g.clone(), *weight, delta));
        }
    }
    let frozen = lat
        .edges
        .iter()
        .map(|e| {
            let (a, b) = (e.a as usize, e.b as usize);
            (pinned[a] && pinned[b]).then(|| values[a] != values[b] && matches!(datum, BoundaryDatum::Jump { .. }))
        })
        .collect();
    Ok(Constraints { pinned, values, frozen, fidelity })
}

#[derive(Debug, Clone)]
pub struct AmResult {
    pub field: LatticeField,
    pub energy: EnergyBreakdown,
    pub converged: bool,
    pub sweeps: usize,
    /// Number of steps at scale 1 checked for energy decrease.
    pub monotone_checks: usize,
    pub cg_iterations: usize,
    /// Starting field of the reported run.
    pub start: StartKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StartKind {
    Given,
    Affine,
    Elastic,
    PureJump,
    Data,
}

/// Objective actually decreased by the iteration: exact lattice energy plus the
/// Huber-smoothed fidelity term.
fn objective(f: &LatticeField, p: &EnergyParams, c: &Constraints) -> (EnergyBreakdown, f64) {
    let mut e = energy(f, p);
    let mut surrogate = e.total;
    if let Some((g, w, delta)) = &c.fidelity {
        e.fidelity = fidelity_term(f, g, *w);
        e.total += e.fidelity;
        let lat = &f.lattice;
        let hn = lat.h.powi(lat.n() as i32);
        let mut s = Sum::default();
        for i in 0..lat.num_nodes() {
            if lat.node_labels[i] == RegionLabel::Matrix {
                s.add(huber(f.u[i] - g[i], *delta));
            }
        }
        surrogate += w * hn * s.value();
    }
    (e, surrogate)
}

/// Sets every non-frozen break flag to its optimum for the current `u` at the given
/// threshold factor. Returns whether anything changed.
fn j_step(f: &mut LatticeField, p: &EnergyParams, c: &Constraints, scale: f64) -> bool {
    let lat = &f.lattice;
    let h = lat.h;
    let mut changed = false;
    for (k, e) in lat.edges.iter().enumerate() {
        let flag = match c.frozen[k] {
            Some(b) => b,
            None => {
                let du = f.u[e.b as usize] - f.u[e.a as usize];
                // weight h^{n-2} du^2 > kappa h^{n-1} scale, face fractions cancel
                edge_weight(e, p.alpha) * du * du > edge_toughness(e, p.beta) * h * scale
            }
        };
        if f.broken[k] != flag {
            f.broken[k] = flag;
            changed = true;
        }
    }
    changed
}

/// Minimizes over free values with the break set fixed. The fidelity term enters
/// through one reweighting of its Huber majorizer.
fn u_step(f: &mut LatticeField, p: &EnergyParams, c: &Constraints, opts: &SolverOptions) -> Result<usize> {
    let lat = f.lattice.clone();
    let nn = lat.num_nodes();
    let vol_scale = lat.h.powi(lat.n() as i32 - 2);
    let hn = lat.h.powi(lat.n() as i32);
    let mut compact = vec![usize::MAX; nn];
    let mut free = Vec::new();
    for i in 0..nn {
        if !c.pinned[i] {
            compact[i] = free.len();
            free.push(i);
        }
    }
    if free.is_empty() {
        return Ok(0);
    }
    let nf = free.len();
    let mut diag = vec![0.0; nf];
    let mut rhs = vec![0.0; nf];
    if let Some((g, w, delta)) = &c.fidelity {
        for (k, &i) in free.iter().enumerate() {
            if lat.node_labels[i] == RegionLabel::Matrix && *w > 0.0 {
                let d = w * hn / (2.0 * (f.u[i] - g[i]).abs().max(*delta));
                diag[k] += d;
                rhs[k] += d * g[i];
            }
        }
    }
    let fid_diag = diag.clone();
    let mut pinned_mass = vec![0.0; nf];
    // free-free couplings in CSR form
    let mut offsets = vec![0u32; nf + 1];
    let mut active = Vec::new();
    for (k, e) in lat.edges.iter().enumerate() {
        if f.broken[k] {
            continue;
        }
        let coef = edge_weight(e, p.alpha) * vol_scale * e.face_frac;
        if coef == 0.0 {
            continue;
        }
        let (a, b) = (e.a as usize, e.b as usize);
        match (compact[a], compact[b]) {
            (usize::MAX, usize::MAX) => {}
            (ca, usize::MAX) => {
                diag[ca] += coef;
                pinned_mass[ca] += coef;
                rhs[ca] += coef * f.u[b];
            }
            (usize::MAX, cb) => {
                diag[cb] += coef;
                pinned_mass[cb] += coef;
                rhs[cb] += coef * f.u[a];
            }
            (ca, cb) => {
                diag[ca] += coef;
                diag[cb] += coef;
                offsets[ca + 1] += 1;
                offsets[cb + 1] += 1;
                active.push((ca as u32, cb as u32, coef));
            }
        }
    }
    for k in 0..nf {
        offsets[k + 1] += offsets[k];
    }
    let mut fill = offsets.clone();
    let mut cols = vec![0u32; active.len() * 2];
    let mut vals = vec![0.0; active.len() * 2];
    for &(ca, cb, coef) in &active {
        for (r, c) in [(ca, cb), (cb, ca)] {
            let slot = fill[r as usize] as usize;
            cols[slot] = c;
            vals[slot] = coef;
            fill[r as usize] += 1;
        }
    }
    let self_mass: Vec<f64> = (0..nf).map(|k| fid_diag[k] + pinned_mass[k]).collect();
    let apply = |x: &[f64], y: &mut [f64]| {
        y.par_chunks_mut(4096).enumerate().for_each(|(chunk, ys)| {
            for (off, yk) in ys.iter_mut().enumerate() {
                let k = chunk * 4096 + off;
                let xk = x[k];
                let mut acc = self_mass[k] * xk;
                for s in offsets[k] as usize..offsets[k + 1] as usize {
                    acc += vals[s] * (xk - x[cols[s] as usize]);
                }
                *yk = acc;
            }
        })
    };
    let mut x: Vec<f64> = free.iter().map(|&i| f.u[i]).collect();
    let out = pcg(apply, &diag, &rhs, &mut x, opts.cg_tol, opts.cg_max_iter, false)?;
    for (k, &i) in free.iter().enumerate() {
        f.u[i] = x[k];
    }
    Ok(out.iterations)
}

/// Initial field for a datum when no warm start is given: affine for `Affine`, the
/// elastic (unbroken) solution for `Jump`, the data for `Fidelity`.
fn default_start(lat: &Arc<Lattice>, datum: &BoundaryDatum, c: &Constraints, p: &EnergyParams, opts: &SolverOptions) -> Result<LatticeField> {
    let mut f = match datum {
        BoundaryDatum::Affine { xi } => LatticeField::from_fn(lat.clone(), |x| xi.iter().zip(x).map(|(a, b)| a * b).sum()),
        BoundaryDatum::Jump { .. } => {
            let mut f = LatticeField::from_fn(lat.clone(), |_| 0.0);
            for i in 0..lat.num_nodes() {
                if c.pinned[i] {
                    f.u[i] = c.values[i];
                }
            }
            u_step(&mut f, p, c, opts)?;
            f
        }
        BoundaryDatum::Fidelity { g, .. } => LatticeField::new(lat.clone(), g.clone(), vec![false; lat.num_edges()])?,
    };
    for (k, fr) in c.frozen.iter().enumerate() {
        if let Some(b) = fr {
            f.broken[k] = *b;
        }
    }
    Ok(f)
}

/// Alternating minimization with graduated non-convexity. At threshold factor 1 every
/// half-step is checked to not increase the energy.
///
/// Without a warm start, `Jump` data are run twice, from the elastic solution and from
/// the pure step, and the lower result is returned.
pub fn am_minimize(datum: &BoundaryDatum, lattice: Arc<Lattice>, p: &EnergyParams, opts: &SolverOptions, start: Option<&LatticeField>) -> Result<AmResult> {
    opts.validate()?;
    let collar = opts.collar.unwrap_or_else(|| default_collar(lattice.m));
    let c = constraints(&lattice, datum, collar)?;
    if start.is_none() {
        if let BoundaryDatum::Jump { z, nu } = datum {
            let step = pure_jump_field(lattice.clone(), *z, nu);
            let (from_step, from_elastic) = rayon::join(
                || am_run(datum, &lattice, &c, p, opts, Some(&step), StartKind::PureJump),
                || am_run(datum, &lattice, &c, p, opts, None, StartKind::Elastic),
            );
            let (a, b) = (from_step?, from_elastic?);
            return Ok(if b.energy.total < a.energy.total { b } else { a });
        }
    }
    let kind = match (start, datum) {
        (Some(_), _) => StartKind::Given,
        (None, BoundaryDatum::Affine { .. }) => StartKind::Affine,
        (None, BoundaryDatum::Jump { .. }) => StartKind::Elastic,
        (None, BoundaryDatum::Fidelity { .. }) => StartKind::Data,
    };
    am_run(datum, &lattice, &c, p, opts, start, kind)
}

fn am_run(
    datum: &BoundaryDatum,
    lattice: &Arc<Lattice>,
    c: &Constraints,
    p: &EnergyParams,
    opts: &SolverOptions,
    start: Option<&LatticeField>,
    kind: StartKind,
) -> Result<AmResult> {
    let mut f = match start {
        Some(s) => {
            if !s.lattice.same_lattice(lattice) {
                return Err(Error::LatticeMismatch("warm start lives on a different lattice".into()));
            }
            let mut f = s.clone();
            f.lattice = lattice.clone();
            for i in 0..lattice.num_nodes() {
                if c.pinned[i] {
                    f.u[i] = c.values[i];
                }
            }
            for (k, fr) in c.frozen.iter().enumerate() {
                if let Some(b) = fr {
                    f.broken[k] = *b;
                }
            }
            f
        }
        None => default_start(lattice, datum, c, p, opts)?,
    };

    let mut sweeps = 0;
    let mut checks = 0;
    let mut cg_iterations = 0;
    let mut converged = true;
    let last = opts.schedule.len() - 1;
    let coarse = SolverOptions { cg_tol: opts.cg_tol.max(CONTINUATION_CG_TOL), ..opts.clone() };
    for (stage, &scale) in opts.schedule.iter().enumerate() {
        let final_stage = stage == last;
        let mut current = objective(&f, p, c).1;
        let mut settled = false;
        for it in 0..opts.max_outer {
            sweeps += 1;
            let changed = j_step(&mut f, p, c, scale);
            if final_stage {
                let after_j = objective(&f, p, c).1;
                check_decrease(current, after_j, "break-set update")?;
                checks += 1;
                current = after_j;
            }
            if !changed && it > 0 {
                settled = true;
                break;
            }
            cg_iterations += u_step(&mut f, p, c, if final_stage { opts } else { &coarse })?;
            let after_u = objective(&f, p, c).1;
            if final_stage {
                check_decrease(current, after_u, "value update")?;
                checks += 1;
                if current - after_u <= STOP_TOL * after_u.abs() && it > 0 {
                    // one more break-set update keeps J optimal for the final u
                    j_step(&mut f, p, c, scale);
                    let after = objective(&f, p, c).1;
                    check_decrease(after_u, after, "break-set update")?;
                    checks += 1;
                    settled = true;
                    break;
                }
            }
            current = after_u;
        }
        if final_stage && !settled {
            converged = false;
        }
    }
    let energy = objective(&f, p, c).0;
    Ok(AmResult { field: f, energy, converged, sweeps, monotone_checks: checks, cg_iterations, start: kind })
}

fn check_decrease(before: f64, after: f64, what: &str) -> Result<()> {
    if after > before + MONOTONE_TOL * before.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::SolverBreakdown(format!("energy increased in {what}: {before:.17e} -> {after:.17e}")));
    }
    Ok(())
}

/// Datum-consistent affine competitor with the optimal break set for `xi . x`.
pub fn affine_competitor(lattice: Arc<Lattice>, xi: &[f64], p: &EnergyParams) -> (LatticeField, EnergyBreakdown) {
    let mut f = LatticeField::from_fn(lattice, |x| xi.iter().zip(x).map(|(a, b)| a * b).sum());
    let c = Constraints {
        pinned: vec![false; f.u.len()],
        values: Vec::new(),
        frozen: vec![None; f.broken.len()],
        fidelity: None,
    };
    j_step(&mut f, p, &c, 1.0);
    let e = energy(&f, p);
    (f, e)
}

/// The step datum extended to the whole domain, broken exactly where it jumps.
pub fn pure_jump_field(lattice: Arc<Lattice>, z: f64, nu: &[f64]) -> LatticeField {
    let (len, h) = (lattice.spec.domain_len, lattice.h);
    let mut f = LatticeField::from_fn(lattice, |x| jump_value(x, len, h, z, nu));
    for (k, e) in f.lattice.edges.iter().enumerate() {
        f.broken[k] = f.u[e.a as usize] != f.u[e.b as usize];
    }
    f
}

/// Replaces every inclusion node by the mean of the matrix nodes of its closed period
/// cell; matrix values and break flags are untouched.
pub fn extend_to_inclusions(f: &LatticeField) -> LatticeField {
    let lat = &f.lattice;
    let n = lat.n();
    let m = lat.m;
    let centres = lat.spec.cells_per_axis() + 1;
    let sites = lat.num_inclusion_sites();
    let mut means: Vec<Option<f64>> = vec![None; sites];
    let mut needed = vec![false; sites];
    for i in 0..lat.num_nodes() {
        if lat.node_labels[i] == RegionLabel::Inclusion {
            needed[lat.inclusion_of_node(i)] = true;
        }
    }
    for site in (0..sites).filter(|&s| needed[s]) {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut s = site;
        for d in 0..n {
            let k = s % centres;
            s /= centres;
            // nodes j with |2j - 2kM| <= M
            let centre = (2 * k * m) as i64;
            lo[d] = ((centre - m as i64).max(0) as usize).div_ceil(2);
            hi[d] = (((centre + m as i64) / 2) as usize).min(lat.npa - 1);
        }
        let mut sum = Sum::default();
        let mut count = 0usize;
        let mut idx = lo;
        'outer: loop {
            let mut flat = 0;
            for d in (0..n).rev() {
                flat = flat * lat.npa + idx[d];
            }
            if lat.node_labels[flat] == RegionLabel::Matrix {
                sum.add(f.u[flat]);
                count += 1;
            }
            for d in 0..n {
                if idx[d] < hi[d] {
                    idx[d] += 1;
                    continue 'outer;
                }
                idx[d] = lo[d];
            }
            break;
        }
        if count > 0 {
            means[site] = Some(sum.value() / count as f64);
        }
    }
    let mut out = f.clone();
    for i in 0..lat.num_nodes() {
        if lat.node_labels[i] == RegionLabel::Inclusion {
            if let Some(mean) = means[lat.inclusion_of_node(i)] {
                out.u[i] = mean;
            }
        }
    }
    out
}

/// `h^n sum |f - g|` over the matrix nodes of `f`'s lattice. The two fields must share
/// the node grid; their microstructures may differ.
pub fn matrix_l1_distance(f: &LatticeField, g: &LatticeField) -> Result<f64> {
    if !f.lattice.same_grid(&g.lattice) {
        return Err(Error::LatticeMismatch("fields live on different node grids".into()));
    }
    let lat = &f.lattice;
    let hn = lat.h.powi(lat.n() as i32);
    let mut s = Sum::default();
    for i in 0..lat.num_nodes() {
        if lat.node_labels[i] == RegionLabel::Matrix {
            s.add((f.u[i] - g.u[i]).abs());
        }
    }
    Ok(hn * s.value())
}

/// Interface constant of the recovery construction: the boundary area of one inclusion
/// per unit cell, `2n (2a)^{n-1}`.
pub fn recovery_constant(n: usize, a: f64) -> f64 {
    2.0 * n as f64 * (2.0 * a).powi(n as i32 - 1)
}

#[derive(Debug, Clone)]
pub struct Recovery {
    pub field: LatticeField,
    pub energy: EnergyBreakdown,
    /// `energy.total / |Omega|`.
    pub density: f64,
    /// Cell value of the corrector used.
    pub fhat: f64,
    pub c_meas: f64,
    pub beta_over_eps: f64,
    /// `fhat + c_meas * beta / eps`.
    pub bound: f64,
}

/// Oscillating competitor `xi . x + eps w(x / eps)` on the matrix, the cell mean on
/// each inclusion, and ring edges broken where that is cheaper than stretching them.
pub fn build_recovery(xi: &[f64], corrector: &CorrectorField, lattice: Arc<Lattice>, p: &EnergyParams) -> Result<Recovery> {
    let n = lattice.n();
    if corrector.m != lattice.m {
        return Err(Error::ResolutionMismatch { corrector: corrector.m, lattice: lattice.m });
    }
    if corrector.n() != n || (corrector.a - lattice.spec.a).abs() > 1e-12 {
        return Err(Error::LatticeMismatch("corrector geometry differs from the lattice".into()));
    }
    if xi.len() != n || xi.iter().zip(&corrector.xi).any(|(a, b)| (a - b).abs() > 1e-12 * a.abs().max(1.0)) {
        return Err(Error::InvalidParams(format!("corrector was solved for {:?}, not {xi:?}", corrector.xi)));
    }
    let eps = lattice.spec.eps;
    let m = lattice.m;
    let mut f = LatticeField::from_fn(lattice.clone(), |_| 0.0);
    for i in 0..lattice.num_nodes() {
        let x = lattice.node_coords(i);
        let idx = lattice.node_index(i);
        let cell: Vec<usize> = idx[..n].iter().map(|j| j % m).collect();
        let w = corrector.value_at(&cell).unwrap_or(0.0);
        f.u[i] = xi.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + eps * w;
    }
    let mut f = extend_to_inclusions(&f);
    let h = lattice.h;
    for (k, e) in lattice.edges.iter().enumerate() {
        let la = lattice.node_labels[e.a as usize];
        let lb = lattice.node_labels[e.b as usize];
        if la != lb {
            let du = f.u[e.b as usize] - f.u[e.a as usize];
            f.broken[k] = edge_weight(e, p.alpha) * du * du > edge_toughness(e, p.beta) * h;
        }
    }
    let energy = energy(&f, p);
    let density = energy.total / lattice.spec.domain_volume();
    let c_meas = recovery_constant(n, lattice.spec.a);
    let beta_over_eps = p.beta / eps;
    Ok(Recovery { field: f, energy, density, fhat: corrector.fhat, c_meas, beta_over_eps, bound: corrector.fhat + c_meas * beta_over_eps })
}

#[derive(Debug, Clone)]
pub struct FidelityRun {
    pub eps: Vec<f64>,
    pub beta: Vec<f64>,
    pub minima: Vec<f64>,
    /// Matrix L1 distance between minimizers `k` and `k + 1`, after extension, on the
    /// matrix of the finer one.
    pub distances: Vec<f64>,
    pub fields: Vec<LatticeField>,
    pub converged: bool,
}

/// Node grid shared by every microstructure of a fidelity chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityGrid {
    pub n: usize,
    pub a: f64,
    pub domain_len: f64,
    pub h: f64,
}

impl FidelityGrid {
    pub fn nodes_per_axis(&self) -> usize {
        (self.domain_len / self.h).round() as usize + 1
    }

    pub fn coords(&self) -> Vec<Vec<f64>> {
        let npa = self.nodes_per_axis();
        (0..npa.pow(self.n as u32))
            .map(|mut i| {
                (0..self.n)
                    .map(|_| {
                        let j = i % npa;
                        i /= npa;
                        j as f64 * self.h
                    })
                    .collect()
            })
            .collect()
    }
}

/// Minimizes energy plus `weight * L1` fidelity for each `eps` on one fixed node grid.
pub fn solve_fidelity(g: &[f64], grid: FidelityGrid, eps_chain: &[f64], weight: f64, beta_of_eps: impl Fn(f64) -> f64 + Sync, opts: &SolverOptions) -> Result<FidelityRun> {
    let mut lattices = Vec::new();
    let mut params = Vec::new();
    for &eps in eps_chain {
        let ratio = eps / grid.h;
        let m = ratio.round() as usize;
        if (ratio - m as f64).abs() > 1e-9 * ratio {
            return Err(Error::InvalidParams(format!("eps = {eps} is not a multiple of h = {}", grid.h)));
        }
        let spec = MicrostructureSpec::new(grid.n, grid.a, eps, grid.domain_len)?;
        let lat = Arc::new(build_lattice(&spec, m)?);
        if lat.num_nodes() != g.len() {
            return Err(Error::LatticeMismatch(format!("{} samples for {} nodes", g.len(), lat.num_nodes())));
        }
        lattices.push(lat);
        params.push(EnergyParams::with_beta(beta_of_eps(eps))?);
    }
    let datum = BoundaryDatum::Fidelity { g: g.to_vec(), weight };
    let results: Vec<AmResult> = lattices
        .par_iter()
        .zip(&params)
        .map(|(lat, p)| am_minimize(&datum, lat.clone(), p, opts, None))
        .collect::<Result<_>>()?;
    let fields: Vec<LatticeField> = results.iter().map(|r| extend_to_inclusions(&r.field)).collect();
    let distances = fields.windows(2).map(|w| matrix_l1_distance(&w[1], &w[0])).collect::<Result<_>>()?;
    Ok(FidelityRun {
        eps: eps_chain.to_vec(),
        beta: params.iter().map(|p| p.beta).collect(),
        minima: results.iter().map(|r| r.energy.total).collect(),
        distances,
        converged: results.iter().all(|r| r.converged),
        fields,
    })
}
