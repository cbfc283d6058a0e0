//! Periodic perforated geometry and its lattice discretization.
//!
//! The matrix is the connected periodic set `eps * P`; inclusions are the open cubes
//! `eps * (k + (-a, a)^n)` centred at the integer points `k`. Points on an inclusion
//! boundary belong to the matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ties closer than this (in units of the period) are resolved as matrix.
const TIE_TOL: f64 = 1e-12;

/// Upper bound on lattice nodes, so that a typo in a config cannot exhaust memory.
pub const MAX_NODES: usize = 1 << 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionLabel {
    Matrix,
    Inclusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicrostructureSpec {
    /// Spatial dimension, 2 or 3.
    pub n: usize,
    /// Inclusion half-width as a fraction of the period.
    pub a: f64,
    /// Period of the microstructure.
    pub eps: f64,
    /// Side of the cubic domain `(0, L)^n`.
    pub domain_len: f64,
}

impl MicrostructureSpec {
    pub fn new(n: usize, a: f64, eps: f64, domain_len: f64) -> Result<Self> {
        let spec = Self { n, a, eps, domain_len };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n != 2 && self.n != 3 {
            return Err(Error::InvalidSpec(format!("dimension must be 2 or 3, got {}", self.n)));
        }
        if !(self.a >= 0.0 && self.a < 0.5) {
            return Err(Error::InvalidSpec(format!("inclusion half-width must lie in [0, 1/2), got {}", self.a)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidSpec(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.domain_len > 0.0 && self.domain_len.is_finite()) {
            return Err(Error::InvalidSpec(format!("domain length must be positive, got {}", self.domain_len)));
        }
        let ratio = self.domain_len / self.eps;
        if ratio.round() < 1.0 || (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidSpec(format!(
                "L / eps must be a positive integer, got {} / {} = {ratio}",
                self.domain_len, self.eps
            )));
        }
        Ok(())
    }

    /// Number of periods along each axis.
    pub fn cells_per_axis(&self) -> usize {
        (self.domain_len / self.eps).round() as usize
    }

    /// Volume fraction of the matrix, `1 - (2a)^n`.
    pub fn matrix_fraction(&self) -> f64 {
        1.0 - (2.0 * self.a).powi(self.n as i32)
    }

    pub fn domain_volume(&self) -> f64 {
        self.domain_len.powi(self.n as i32)
    }
}

/// Region of a single coordinate measured in periods: inside the inclusion band iff
/// its distance to the nearest integer is strictly below `a`.
#[inline]
fn inside_band(s: f64, a: f64) -> bool {
    (s - s.round()).abs() < a - TIE_TOL
}

pub fn classify_point(x: &[f64], spec: &MicrostructureSpec) -> RegionLabel {
    if spec.a > 0.0 && x.iter().all(|&xi| inside_band(xi / spec.eps, spec.a)) {
        RegionLabel::Inclusion
    } else {
        RegionLabel::Matrix
    }
}

/// Classification of a point given in half-steps of a grid with `m` nodes per period.
/// Exact for the lattice, where coordinates are integer multiples of `h / 2`.
pub fn classify_half_steps(k: &[i64], m: usize, a: f64) -> RegionLabel {
    if a <= 0.0 {
        return RegionLabel::Matrix;
    }
    let period = 2 * m as i64;
    let bound = a * period as f64;
    let inside = k.iter().all(|&ki| {
        let r = ki.rem_euclid(period);
        let d = r.min(period - r) as f64;
        d < bound - TIE_TOL * period as f64
    });
    if inside {
        RegionLabel::Inclusion
    } else {
        RegionLabel::Matrix
    }
}

/// Axis-aligned lattice edge between two neighbouring nodes.
#[derive(Debug, Clone, Copy)]
pub struct Edge {
    pub a: u32,
    pub b: u32,
    pub axis: u8,
    pub label: RegionLabel,
    /// Fraction of the transverse dual face `h^{n-1}` lying inside the closed domain;
    /// 1 in the interior, 1/2 per boundary the edge runs along.
    pub face_frac: f64,
}

/// Regular vertex-centred grid over the closed domain, `M` nodes per period per axis.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub spec: MicrostructureSpec,
    pub m: usize,
    pub h: f64,
    /// Nodes per axis, `L / h + 1`.
    pub npa: usize,
    pub node_labels: Vec<RegionLabel>,
    pub edges: Vec<Edge>,
    /// Incident edge ids per node.
    adjacency: Vec<Vec<u32>>,
}

pub fn build_lattice(spec: &MicrostructureSpec, m: usize) -> Result<Lattice> {
    spec.validate()?;
    if m < 4 {
        return Err(Error::InvalidLattice(format!("M must be at least 4 to resolve the inclusion, got {m}")));
    }
    let n = spec.n;
    let npa = spec.cells_per_axis() * m + 1;
    let total = npa.checked_pow(n as u32).filter(|&t| t <= MAX_NODES).ok_or_else(|| {
        Error::InvalidLattice(format!("{npa}^{n} nodes exceeds the limit of {MAX_NODES}"))
    })?;
    let h = spec.eps / m as f64;

    let mut node_labels = Vec::with_capacity(total);
    let mut idx = [0usize; 3];
    for i in 0..total {
        unflatten(i, npa, n, &mut idx);
        let k: Vec<i64> = idx[..n].iter().map(|&j| 2 * j as i64).collect();
        node_labels.push(classify_half_steps(&k, m, spec.a));
    }

    let mut edges = Vec::with_capacity(n * total);
    let mut adjacency = vec![Vec::with_capacity(2 * n); total];
    for i in 0..total {
        unflatten(i, npa, n, &mut idx);
        for axis in 0..n {
            if idx[axis] + 1 >= npa {
                continue;
            }
            let j = i + npa.pow(axis as u32);
            let mut k = [0i64; 3];
            let mut face_frac = 1.0;
            for d in 0..n {
                k[d] = 2 * idx[d] as i64;
                if d != axis && (idx[d] == 0 || idx[d] + 1 == npa) {
                    face_frac *= 0.5;
                }
            }
            k[axis] += 1;
            let label = classify_half_steps(&k[..n], m, spec.a);
            let id = edges.len() as u32;
            edges.push(Edge { a: i as u32, b: j as u32, axis: axis as u8, label, face_frac });
            adjacency[i].push(id);
            adjacency[j].push(id);
        }
    }

    Ok(Lattice { spec: *spec, m, h, npa, node_labels, edges, adjacency })
}

#[inline]
fn unflatten(mut i: usize, npa: usize, n: usize, out: &mut [usize; 3]) {
    for slot in out.iter_mut().take(n) {
        *slot = i % npa;
        i /= npa;
    }
}

impl Lattice {
    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn num_nodes(&self) -> usize {
        self.node_labels.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_index(&self, i: usize) -> [usize; 3] {
        let mut out = [0; 3];
        unflatten(i, self.npa, self.n(), &mut out);
        out
    }

    pub fn node_coords(&self, i: usize) -> [f64; 3] {
        let idx = self.node_index(i);
        let mut x = [0.0; 3];
        for d in 0..self.n() {
            x[d] = idx[d] as f64 * self.h;
        }
        x
    }

    pub fn edge_midpoint(&self, e: &Edge) -> [f64; 3] {
        let mut x = self.node_coords(e.a as usize);
        x[e.axis as usize] += 0.5 * self.h;
        x
    }

    pub fn incident_edges(&self, i: usize) -> &[u32] {
        &self.adjacency[i]
    }

    /// Lattice distance (in steps) from a node to the domain boundary.
    pub fn boundary_distance(&self, i: usize) -> usize {
        let idx = self.node_index(i);
        (0..self.n()).map(|d| idx[d].min(self.npa - 1 - idx[d])).min().unwrap_or(0)
    }

    /// Period cell `[k eps, (k+1) eps)` containing a point given as a lattice half-step
    /// index; the last cell is closed on the far boundary.
    fn cell_of_half_steps(&self, k: &[i64]) -> usize {
        let cells = self.spec.cells_per_axis();
        let period = 2 * self.m as i64;
        let mut id = 0;
        for d in (0..self.n()).rev() {
            let c = ((k[d] / period) as usize).min(cells - 1);
            id = id * cells + c;
        }
        id
    }

    pub fn num_cells(&self) -> usize {
        self.spec.cells_per_axis().pow(self.n() as u32)
    }

    /// Period cell owning an edge, by its midpoint.
    pub fn cell_of_edge(&self, e: &Edge) -> usize {
        let idx = self.node_index(e.a as usize);
        let mut k = [0i64; 3];
        for d in 0..self.n() {
            k[d] = 2 * idx[d] as i64;
        }
        k[e.axis as usize] += 1;
        self.cell_of_half_steps(&k[..self.n()])
    }

    /// Nearest inclusion centre (integer multiple of eps) to a node, as a flat id over
    /// the `(cells + 1)^n` centres including those on the boundary.
    pub fn inclusion_of_node(&self, i: usize) -> usize {
        let idx = self.node_index(i);
        let centres = self.spec.cells_per_axis() + 1;
        let mut id = 0;
        for d in (0..self.n()).rev() {
            let k = (idx[d] + self.m / 2) / self.m;
            id = id * centres + k.min(centres - 1);
        }
        id
    }

    pub fn num_inclusion_sites(&self) -> usize {
        (self.spec.cells_per_axis() + 1).pow(self.n() as u32)
    }

    /// Whether a node lies in the closed period cube `eps (k + [-1/2, 1/2]^n)` around the
    /// inclusion centre with flat id `site`.
    pub fn node_in_site_cell(&self, i: usize, site: usize) -> bool {
        let idx = self.node_index(i);
        let centres = self.spec.cells_per_axis() + 1;
        let mut s = site;
        for d in 0..self.n() {
            let k = s % centres;
            s /= centres;
            let offset = (2 * idx[d]) as i64 - (2 * k * self.m) as i64;
            if offset.unsigned_abs() as usize > self.m {
                return false;
            }
        }
        true
    }

    pub fn same_grid(&self, other: &Lattice) -> bool {
        self.n() == other.n()
            && self.npa == other.npa
            && (self.h - other.h).abs() <= 1e-12 * self.h
            && (self.spec.domain_len - other.spec.domain_len).abs() <= 1e-12 * self.spec.domain_len
    }

    pub fn same_lattice(&self, other: &Lattice) -> bool {
        self.same_grid(other) && self.m == other.m && self.spec == other.spec
    }
}
