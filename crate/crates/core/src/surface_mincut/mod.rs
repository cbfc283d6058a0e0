//! Effective surface density of the perforated medium by s-t minimum cuts.
//!
//! Coordinates are measured in periods (the microstructure is unit-periodic with
//! inclusions centred at the integer points). The cube `t Q^nu` is covered by square
//! pixels of side `h = 1/M`; each pixel is a graph node, so a cut is a Caccioppoli
//! partition made of pixel faces. Faces whose midpoint lies in an inclusion are free.

pub mod maxflow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

pub use maxflow::{min_cut, CutResult, FlowGraph};

use crate::error::{Error, Result};
use crate::microgeometry::{classify_point, MicrostructureSpec, RegionLabel};

/// Guard on pixels per axis.
pub const MAX_PIXELS_PER_AXIS: usize = 4096;
/// Relative t-chain spread above which an estimate is flagged low-confidence.
pub const SETTLE_TOL: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stencil {
    /// Nearest neighbours with face-area weights (4 in 2D, 6 in 3D).
    Axis,
    /// 8-neighbourhood with Cauchy-Crofton weights.
    Diag8,
    /// 16-neighbourhood with Cauchy-Crofton weights.
    Crofton16,
}

impl fmt::Display for Stencil {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stencil::Axis => "axis",
            Stencil::Diag8 => "diag8",
            Stencil::Crofton16 => "crofton16",
        })
    }
}

impl FromStr for Stencil {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axis" | "axis4" | "axis6" => Ok(Stencil::Axis),
            "diag8" => Ok(Stencil::Diag8),
            "crofton16" => Ok(Stencil::Crofton16),
            other => Err(Error::InvalidCutProblem(format!("unknown stencil '{other}'"))),
        }
    }
}

/// Integer neighbour offsets (one per undirected direction) with their edge weights
/// in units of `h^{n-1}`.
pub fn stencil_weights(stencil: Stencil, n: usize) -> Result<Vec<(Vec<i64>, f64)>> {
    if n == 3 {
        return match stencil {
            Stencil::Axis => Ok(vec![(vec![1, 0, 0], 1.0), (vec![0, 1, 0], 1.0), (vec![0, 0, 1], 1.0)]),
            other => Err(Error::InvalidCutProblem(format!("stencil {other} is only available in 2D"))),
        };
    }
    let dirs: Vec<[i64; 2]> = match stencil {
        Stencil::Axis => return Ok(vec![(vec![1, 0], 1.0), (vec![0, 1], 1.0)]),
        Stencil::Diag8 => vec![[1, 0], [1, 1], [0, 1], [-1, 1]],
        Stencil::Crofton16 => vec![[1, 0], [2, 1], [1, 1], [1, 2], [0, 1], [-1, 2], [-1, 1], [-2, 1]],
    };
    // Cauchy-Crofton: w_k = dphi_k / (2 |v_k|) with dphi_k the angular span owned by v_k.
    let angles: Vec<f64> = dirs.iter().map(|v| (v[1] as f64).atan2(v[0] as f64)).collect();
    let k = dirs.len();
    Ok((0..k)
        .map(|i| {
            let prev = if i == 0 { angles[k - 1] - PI } else { angles[i - 1] };
            let next = if i + 1 == k { angles[0] + PI } else { angles[i + 1] };
            let dphi = 0.5 * (next - prev);
            let len = ((dirs[i][0] * dirs[i][0] + dirs[i][1] * dirs[i][1]) as f64).sqrt();
            (dirs[i].to_vec(), dphi / (2.0 * len))
        })
        .collect())
}

/// Metered length of a unit straight interface with unit normal `normal`.
pub fn metered_length(stencil: Stencil, normal: &[f64]) -> Result<f64> {
    let w = stencil_weights(stencil, normal.len())?;
    Ok(w.iter()
        .map(|(v, wk)| wk * v.iter().zip(normal).map(|(&vi, &ni)| vi as f64 * ni).sum::<f64>().abs())
        .sum())
}

/// Largest relative metrication error of a stencil over all interface orientations.
pub fn stencil_slack(stencil: Stencil, n: usize) -> Result<f64> {
    let samples = 3600;
    let mut worst: f64 = 0.0;
    if n == 2 {
        for s in 0..samples {
            let th = PI * s as f64 / samples as f64;
            worst = worst.max((metered_length(stencil, &[th.cos(), th.sin()])? - 1.0).abs());
        }
    } else {
        // the axis stencil overestimates by |n|_1, maximal on the body diagonal
        let d = 1.0 / 3f64.sqrt();
        worst = metered_length(stencil, &[d, d, d])? - 1.0;
    }
    Ok(worst)
}

pub fn default_band(m: usize) -> usize {
    (m / 8).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutProblem {
    pub nu: Vec<f64>,
    pub a: f64,
    /// Cube side in periods.
    pub t: f64,
    /// Pixels per period per axis.
    pub m: usize,
    pub stencil: Stencil,
    /// Collar width in pixels.
    pub band: usize,
}

impl CutProblem {
    pub fn new(nu: Vec<f64>, a: f64, t: f64, m: usize, stencil: Stencil) -> Self {
        Self { nu, a, t, m, stencil, band: default_band(m) }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nu.len();
        if n != 2 && n != 3 {
            return Err(Error::InvalidCutProblem(format!("nu must have 2 or 3 components, got {n}")));
        }
        let norm = self.nu.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidCutProblem(format!("nu must be a unit vector, |nu| = {norm}")));
        }
        if !(self.t >= 2.0) || !self.t.is_finite() {
            return Err(Error::InvalidCutProblem(format!("t must be at least 2, got {}", self.t)));
        }
        if !(self.a >= 0.0 && self.a < 0.5) {
            return Err(Error::InvalidCutProblem(format!("a must lie in [0, 1/2), got {}", self.a)));
        }
        if self.band < 1 {
            return Err(Error::InvalidCutProblem("boundary band must be at least one pixel".into()));
        }
        if self.m < 1 {
            return Err(Error::InvalidCutProblem("M must be positive".into()));
        }
        if n == 3 && self.stencil == Stencil::Crofton16 {
            return Err(Error::InvalidCutProblem("crofton16 is a 2D stencil".into()));
        }
        let pixels = self.t * self.m as f64;
        if !(pixels <= MAX_PIXELS_PER_AXIS as f64) {
            return Err(Error::InvalidCutProblem(format!(
                "t * M = {pixels} exceeds the limit of {MAX_PIXELS_PER_AXIS} pixels per axis"
            )));
        }
        Ok(())
    }
}

/// Orthonormal frame whose first vector is `nu`.
fn frame(nu: &[f64]) -> Vec<Vec<f64>> {
    let n = nu.len();
    let mut basis = vec![nu.to_vec()];
    for d in 0..n {
        let mut v = vec![0.0; n];
        v[d] = 1.0;
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        if basis.len() == n {
            break;
        }
    }
    basis
}

/// Graph of the pixelated cube with its terminals.
pub struct CutGraph {
    pub problem: CutProblem,
    pub graph: FlowGraph,
    pub pixels_per_axis: usize,
    pub h: f64,
    /// Graph node per pixel of the bounding grid, `None` outside the cube.
    pub node_of_pixel: Vec<Option<usize>>,
    /// Terminal a pixel is tied to: `Some(true)` source, `Some(false)` sink.
    pub pinned: Vec<Option<bool>>,
    pub pixel_centres: Vec<Vec<f64>>,
}

pub fn build_cut_graph(p: &CutProblem) -> Result<CutGraph> {
    p.validate()?;
    let n = p.nu.len();
    let h = 1.0 / p.m as f64;
    let basis = frame(&p.nu);
    let half = 0.5 * p.t;
    // bounding box of the rotated cube
    let extent = (0..n).map(|d| half * basis.iter().map(|b| b[d].abs()).sum::<f64>()).fold(0.0, f64::max);
    let ppa = 2 * ((extent * p.m as f64) - 1e-9).ceil() as usize;
    if ppa > MAX_PIXELS_PER_AXIS {
        return Err(Error::InvalidCutProblem(format!("{ppa} pixels per axis exceeds the limit")));
    }
    let total = ppa.pow(n as u32);
    let weights = stencil_weights(p.stencil, n)?;
    let face = h.powi(n as i32 - 1);
    let unit = MicrostructureSpec { n, a: p.a, eps: 1.0, domain_len: 1.0 };

    let origin = -0.5 * ppa as f64 * h;
    let mut centres = Vec::with_capacity(total);
    let mut node_of_pixel = vec![None; total];
    let mut pinned = vec![None; total];
    let mut count = 0;
    for i in 0..total {
        let mut rem = i;
        let mut x = vec![0.0; n];
        for xd in x.iter_mut() {
            *xd = origin + ((rem % ppa) as f64 + 0.5) * h;
            rem /= ppa;
        }
        let local: Vec<f64> = basis.iter().map(|b| b.iter().zip(&x).map(|(u, v)| u * v).sum()).collect();
        let sup = local.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if sup < half {
            node_of_pixel[i] = Some(count);
            count += 1;
            if half - sup < p.band as f64 * h {
                pinned[i] = Some(local[0] >= 0.0);
            }
        }
        centres.push(x);
    }

    let source = count;
    let sink = count + 1;
    let mut graph = FlowGraph::new(count + 2, source, sink);
    for i in 0..total {
        if let (Some(u), Some(side)) = (node_of_pixel[i], pinned[i]) {
            if side {
                graph.add_edge(source, u, f64::INFINITY, 0.0);
            } else {
                graph.add_edge(u, sink, f64::INFINITY, 0.0);
            }
        }
    }
    let strides: Vec<usize> = (0..n).map(|d| ppa.pow(d as u32)).collect();
    for i in 0..total {
        let Some(u) = node_of_pixel[i] else { continue };
        let mut idx = vec![0i64; n];
        let mut rem = i;
        for v in idx.iter_mut() {
            *v = (rem % ppa) as i64;
            rem /= ppa;
        }
        for (off, w) in &weights {
            let mut j = 0usize;
            let mut inside = true;
            for d in 0..n {
                let c = idx[d] + off[d];
                if c < 0 || c >= ppa as i64 {
                    inside = false;
                    break;
                }
                j += c as usize * strides[d];
            }
            if !inside {
                continue;
            }
            let Some(v) = node_of_pixel[j] else { continue };
            let mid: Vec<f64> = (0..n).map(|d| 0.5 * (centres[i][d] + centres[j][d])).collect();
            let cap = match classify_point(&mid, &unit) {
                RegionLabel::Matrix => w * face,
                RegionLabel::Inclusion => 0.0,
            };
            graph.add_edge(u, v, cap, cap);
        }
    }
    Ok(CutGraph { problem: p.clone(), graph, pixels_per_axis: ppa, h, node_of_pixel, pinned, pixel_centres: centres })
}

/// Builds and solves one cut problem; `per_area` is normalised by `t^{n-1}`.
pub fn solve_cut(p: &CutProblem) -> Result<CutResult> {
    let cg = build_cut_graph(p)?;
    let mut r = min_cut(cg.graph);
    r.per_area = r.cost / p.t.powi(p.nu.len() as i32 - 1);
    Ok(r)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GhatEstimate {
    pub nu: Vec<f64>,
    pub a: f64,
    pub m: usize,
    pub stencil: Stencil,
    pub t_chain: Vec<f64>,
    pub per_area: Vec<f64>,
    /// Mean of the last two chain values.
    pub limit: f64,
    /// |last - previous| relative to the limit.
    pub spread: f64,
    /// Worst-case metrication error of the stencil.
    pub stencil_slack: f64,
    pub low_confidence: bool,
}

pub fn estimate_ghat(nu: &[f64], a: f64, t_chain: &[f64], m: usize, stencil: Stencil) -> Result<GhatEstimate> {
    if t_chain.len() < 3 || t_chain.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidCutProblem("t chain must be increasing with at least three entries".into()));
    }
    let problems: Vec<CutProblem> = t_chain.iter().map(|&t| CutProblem::new(nu.to_vec(), a, t, m, stencil)).collect();
    for p in &problems {
        p.validate()?;
    }
    let per_area: Vec<f64> =
        problems.par_iter().map(|p| solve_cut(p).map(|r| r.per_area)).collect::<Result<_>>()?;
    let k = per_area.len();
    let limit = 0.5 * (per_area[k - 1] + per_area[k - 2]);
    let spread = if limit > 0.0 { (per_area[k - 1] - per_area[k - 2]).abs() / limit } else { 0.0 };
    Ok(GhatEstimate {
        nu: nu.to_vec(),
        a,
        m,
        stencil,
        t_chain: t_chain.to_vec(),
        per_area,
        limit,
        spread,
        stencil_slack: stencil_slack(stencil, nu.len())?,
        low_confidence: spread > SETTLE_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    const E2: [f64; 2] = [0.0, 1.0];

    #[test]
    fn unperforated_axis_cut_is_exact() {
        for t in [2.0, 3.0, 4.0] {
            let r = solve_cut(&CutProblem::new(E2.to_vec(), 0.0, t, 8, Stencil::Axis)).unwrap();
            assert!((r.per_area - 1.0).abs() < 1e-12, "t={t}: {}", r.per_area);
            assert!((r.cost - r.flow_certificate).abs() < 1e-9);
        }
        let r = solve_cut(&CutProblem::new(vec![0.0, 0.0, 1.0], 0.0, 2.0, 4, Stencil::Axis)).unwrap();
        assert!((r.per_area - 1.0).abs() < 1e-12);
    }

    #[test]
    fn straight_competitor_through_inclusions() {
        let r = solve_cut(&CutProblem::new(E2.to_vec(), 0.25, 2.0, 8, Stencil::Axis)).unwrap();
        assert!(r.per_area <= 0.5 + 1.0 / 8.0);
        assert!(r.per_area > 0.0);
    }

    #[test]
    fn crofton_weights_cover_half_turn() {
        for st in [Stencil::Diag8, Stencil::Crofton16] {
            let w = stencil_weights(st, 2).unwrap();
            let total_angle: f64 = w.iter().map(|(v, wk)| {
                let len = ((v[0] * v[0] + v[1] * v[1]) as f64).sqrt();
                2.0 * wk * len
            }).sum();
            assert!((total_angle - PI).abs() < 1e-12);
        }
        // the richer stencil is more isotropic
        let s8 = stencil_slack(Stencil::Diag8, 2).unwrap();
        let s16 = stencil_slack(Stencil::Crofton16, 2).unwrap();
        let s4 = stencil_slack(Stencil::Axis, 2).unwrap();
        assert!(s16 < s8 && s8 < s4);
        assert!((s4 - (2f64.sqrt() - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn rejects_invalid_problems() {
        assert!(build_cut_graph(&CutProblem::new(vec![0.0, 2.0], 0.25, 2.0, 8, Stencil::Axis)).is_err());
        assert!(build_cut_graph(&CutProblem::new(E2.to_vec(), 0.25, 1.0, 8, Stencil::Axis)).is_err());
        assert!(build_cut_graph(&CutProblem::new(vec![0.0, 0.0, 1.0], 0.25, 2.0, 8, Stencil::Crofton16)).is_err());
        assert!(build_cut_graph(&CutProblem::new(E2.to_vec(), 0.25, 1e6, 8, Stencil::Axis)).is_err());
        let mut p = CutProblem::new(E2.to_vec(), 0.25, 2.0, 8, Stencil::Axis);
        p.band = 0;
        assert!(build_cut_graph(&p).is_err());
        assert!(estimate_ghat(&E2, 0.25, &[2.0, 4.0], 8, Stencil::Axis).is_err());
    }

    /// Exhaustive minimum over labelings of the free pixels; capacities are recomputed
    /// from the geometry rather than read from the graph.
    fn enumerate(p: &CutProblem) -> (f64, usize) {
        let cg = build_cut_graph(p).unwrap();
        let ppa = cg.pixels_per_axis;
        let h = 1.0 / p.m as f64;
        let unit = MicrostructureSpec { n: 2, a: p.a, eps: 1.0, domain_len: 1.0 };
        let inside: Vec<usize> = (0..ppa * ppa).filter(|&i| cg.node_of_pixel[i].is_some()).collect();
        let free: Vec<usize> = inside.iter().copied().filter(|&i| cg.pinned[i].is_none()).collect();
        let mut pairs = Vec::new();
        for &i in &inside {
            let (x, y) = ((i % ppa) as i64, (i / ppa) as i64);
            for (dx, dy) in [(1i64, 0i64), (0, 1)] {
                let (xx, yy) = (x + dx, y + dy);
                if xx >= ppa as i64 || yy >= ppa as i64 {
                    continue;
                }
                let j = (yy as usize) * ppa + xx as usize;
                if cg.node_of_pixel[j].is_none() {
                    continue;
                }
                let mid = [
                    0.5 * (cg.pixel_centres[i][0] + cg.pixel_centres[j][0]),
                    0.5 * (cg.pixel_centres[i][1] + cg.pixel_centres[j][1]),
                ];
                let w = if classify_point(&mid, &unit) == RegionLabel::Matrix { h } else { 0.0 };
                pairs.push((i, j, w));
            }
        }
        let mut best = f64::INFINITY;
        for mask in 0u64..(1 << free.len()) {
            let mut label = vec![false; ppa * ppa];
            for &i in &inside {
                if let Some(s) = cg.pinned[i] {
                    label[i] = s;
                }
            }
            for (bit, &i) in free.iter().enumerate() {
                label[i] = mask >> bit & 1 == 1;
            }
            let cost: f64 = pairs.iter().filter(|(i, j, _)| label[*i] != label[*j]).map(|(_, _, w)| w).sum();
            best = best.min(cost);
        }
        (best, free.len())
    }

    #[test]
    fn small_instances_match_enumeration() {
        let mut rng = StdRng::seed_from_u64(3);
        for case in 0..12 {
            let a = [0.0, 0.15, 0.25, 0.35][case % 4];
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let nu = if case < 4 { E2.to_vec() } else { vec![th.cos(), th.sin()] };
            let m = if case < 4 { 3 } else { 2 };
            let p = CutProblem { band: 1, ..CutProblem::new(nu, a, 2.0, m, Stencil::Axis) };
            let (oracle, nfree) = enumerate(&p);
            assert!(nfree <= 20, "{nfree} free pixels");
            let r = solve_cut(&p).unwrap();
            assert!((r.cost - oracle).abs() < 1e-9, "case {case}: {} vs {oracle}", r.cost);
            assert!((r.cost - r.flow_certificate).abs() < 1e-9);
        }
    }

    #[test]
    fn ghat_of_unperforated_medium() {
        let e = estimate_ghat(&E2, 0.0, &[2.0, 3.0, 4.0], 8, Stencil::Axis).unwrap();
        assert_eq!(e.limit, 1.0);
        assert!(!e.low_confidence);
        let d = std::f64::consts::FRAC_1_SQRT_2;
        let e = estimate_ghat(&[d, d], 0.0, &[2.0, 3.0, 4.0], 8, Stencil::Crofton16).unwrap();
        assert!((e.limit - 1.0).abs() <= e.stencil_slack + 0.05, "{}", e.limit);
    }

    #[test]
    fn ghat_decreases_with_inclusion_size() {
        let vals: Vec<f64> = [0.0, 0.125, 0.25, 0.375]
            .iter()
            .map(|&a| estimate_ghat(&E2, a, &[2.0, 3.0, 4.0], 16, Stencil::Axis).unwrap().limit)
            .collect();
        for w in vals.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{vals:?}");
        }
    }

    #[test]
    fn ghat_symmetries() {
        let up = estimate_ghat(&E2, 0.25, &[2.0, 3.0, 4.0], 8, Stencil::Axis).unwrap();
        let down = estimate_ghat(&[0.0, -1.0], 0.25, &[2.0, 3.0, 4.0], 8, Stencil::Axis).unwrap();
        let side = estimate_ghat(&[1.0, 0.0], 0.25, &[2.0, 3.0, 4.0], 8, Stencil::Axis).unwrap();
        assert!((up.limit - down.limit).abs() < 1e-9);
        assert!((up.limit - side.limit).abs() < 1e-9);
    }
}
