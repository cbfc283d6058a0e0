//! Periodic cell problem on the perforated unit cell.
//!
//! The unit cell carries an `M^n` periodic grid with nodes at `j / M`; the inclusion is
//! centred at the origin, so grid node `j` of the cell coincides with lattice node `j`
//! of every period of an [`crate::microgeometry::Lattice`] with the same `M`. Unknowns
//! live on matrix nodes only, and only matrix edges between two matrix nodes carry
//! energy, which imposes the natural condition on the perforation boundary.

use rand::{rngs::StdRng, Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pcg;
use crate::microgeometry::{classify_half_steps, RegionLabel};

pub const DEFAULT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellProblem {
    pub xi: Vec<f64>,
    pub a: f64,
    pub m: usize,
    pub tol: f64,
}

impl CellProblem {
    pub fn new(xi: Vec<f64>, a: f64, m: usize) -> Self {
        Self { xi, a, m, tol: DEFAULT_TOL }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.xi.len();
        if n != 2 && n != 3 {
            return Err(Error::InvalidCellProblem(format!("xi must have 2 or 3 components, got {n}")));
        }
        if self.xi.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCellProblem("xi must be finite".into()));
        }
        if !(self.a >= 0.0 && self.a < 0.5) {
            return Err(Error::InvalidCellProblem(format!("a must lie in [0, 1/2), got {}", self.a)));
        }
        if self.m < 8 {
            return Err(Error::InvalidCellProblem(format!("M must be at least 8, got {}", self.m)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidCellProblem(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectorField {
    pub xi: Vec<f64>,
    pub a: f64,
    pub m: usize,
    /// Corrector on the full periodic grid (flat, axis 0 fastest); zero on inclusion nodes.
    pub w: Vec<f64>,
    pub matrix_mask: Vec<bool>,
    pub fhat: f64,
    pub residual: f64,
    pub iterations: usize,
    /// False when CG hit its iteration cap; the estimate is then unreliable.
    pub converged: bool,
}

impl CorrectorField {
    pub fn n(&self) -> usize {
        self.xi.len()
    }

    /// Corrector value at a grid index taken modulo `M`; `None` on inclusion nodes.
    pub fn value_at(&self, idx: &[usize]) -> Option<f64> {
        let flat = flat_index(idx, self.m);
        self.matrix_mask[flat].then(|| self.w[flat])
    }
}

/// Periodic cell grid with its matrix subgraph.
struct CellGraph {
    n: usize,
    m: usize,
    node_matrix: Vec<bool>,
    /// Compact unknown index per grid node, `usize::MAX` on inclusion nodes.
    unknown: Vec<usize>,
    num_unknowns: usize,
    /// (tail, head, axis) in compact indices; head is the `+e_axis` neighbour.
    edges: Vec<(usize, usize, usize)>,
}

fn flat_index(idx: &[usize], m: usize) -> usize {
    idx.iter().rev().fold(0, |acc, &j| acc * m + (j % m))
}

impl CellGraph {
    fn new(n: usize, m: usize, a: f64) -> Self {
        let total = m.pow(n as u32);
        let mut node_matrix = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        for i in 0..total {
            unflatten(i, m, &mut idx);
            let k: Vec<i64> = idx.iter().map(|&j| 2 * j as i64).collect();
            node_matrix.push(classify_half_steps(&k, m, a) == RegionLabel::Matrix);
        }
        let mut unknown = vec![usize::MAX; total];
        let mut count = 0;
        for i in 0..total {
            if node_matrix[i] {
                unknown[i] = count;
                count += 1;
            }
        }
        let mut edges = Vec::new();
        for i in 0..total {
            if !node_matrix[i] {
                continue;
            }
            unflatten(i, m, &mut idx);
            for axis in 0..n {
                let mut jdx = idx.clone();
                jdx[axis] = (idx[axis] + 1) % m;
                let j = flat_index(&jdx, m);
                if !node_matrix[j] {
                    continue;
                }
                let mut k: Vec<i64> = idx.iter().map(|&v| 2 * v as i64).collect();
                k[axis] += 1;
                if classify_half_steps(&k, m, a) == RegionLabel::Matrix {
                    edges.push((unknown[i], unknown[j], axis));
                }
            }
        }
        Self { n, m, node_matrix, unknown, num_unknowns: count, edges }
    }

    fn coef(&self) -> f64 {
        (1.0 / self.m as f64).powi(self.n as i32 - 2)
    }

    fn components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.num_unknowns).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(a, b, _) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        (0..self.num_unknowns).filter(|&i| find(&mut parent, i) == i).count()
    }

    fn energy(&self, xi: &[f64], w: &[f64]) -> f64 {
        let c = self.coef();
        let h = 1.0 / self.m as f64;
        self.edges.iter().map(|&(a, b, axis)| {
            let d = xi[axis] * h + w[b] - w[a];
            c * d * d
        }).sum()
    }
}

fn unflatten(mut i: usize, m: usize, out: &mut [usize]) {
    for slot in out.iter_mut() {
        *slot = i % m;
        i /= m;
    }
}

pub fn solve_cell(p: &CellProblem) -> Result<CorrectorField> {
    p.validate()?;
    let n = p.xi.len();
    let g = CellGraph::new(n, p.m, p.a);
    let comps = g.components();
    if comps != 1 {
        return Err(Error::DisconnectedMatrix { components: comps });
    }
    let c = g.coef();
    let h = 1.0 / p.m as f64;
    let nu = g.num_unknowns;

    let mut diag = vec![0.0; nu];
    let mut b = vec![0.0; nu];
    for &(t, hd, axis) in &g.edges {
        diag[t] += c;
        diag[hd] += c;
        let s = p.xi[axis] * h;
        // d/dw of c (s + w_hd - w_t)^2 / 2
        b[hd] -= c * s;
        b[t] += c * s;
    }
    let edges = &g.edges;
    let apply = |x: &[f64], y: &mut [f64]| {
        y.iter_mut().for_each(|v| *v = 0.0);
        for &(t, hd, _) in edges {
            let d = c * (x[hd] - x[t]);
            y[hd] += d;
            y[t] -= d;
        }
    };
    let mut w = vec![0.0; nu];
    let max_iter = 50 * nu.max(100);
    let out = pcg(apply, &diag, &b, &mut w, p.tol, max_iter, true)?;
    let fhat = g.energy(&p.xi, &w);

    let mut full = vec![0.0; g.node_matrix.len()];
    for (i, &u) in g.unknown.iter().enumerate() {
        if u != usize::MAX {
            full[i] = w[u];
        }
    }
    Ok(CorrectorField {
        xi: p.xi.clone(),
        a: p.a,
        m: p.m,
        w: full,
        matrix_mask: g.node_matrix,
        fhat,
        residual: out.residual,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Energy of the `w = 0` competitor on the same grid; an exact upper bound for `fhat`.
pub fn zero_corrector_energy(xi: &[f64], a: f64, m: usize) -> f64 {
    let g = CellGraph::new(xi.len(), m, a);
    let w = vec![0.0; g.num_unknowns];
    g.energy(xi, &w)
}

/// Richardson extrapolation of a sequence computed on a geometric grid chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub value: f64,
    /// Estimated convergence order in `1/M`; NaN when it could not be estimated.
    pub order: f64,
    /// |f(M_last) - f(M_prev)|.
    pub spread: f64,
}

pub fn richardson(ms: &[usize], values: &[f64]) -> Extrapolation {
    assert_eq!(ms.len(), values.len());
    let k = values.len();
    let last = values[k - 1];
    if k < 2 {
        return Extrapolation { value: last, order: f64::NAN, spread: 0.0 };
    }
    let spread = (last - values[k - 2]).abs();
    if k < 3 {
        let r = ms[k - 1] as f64 / ms[k - 2] as f64;
        let value = last + (last - values[k - 2]) / (r - 1.0);
        return Extrapolation { value, order: 1.0, spread };
    }
    let (f1, f2, f3) = (values[k - 3], values[k - 2], values[k - 1]);
    let r1 = ms[k - 2] as f64 / ms[k - 3] as f64;
    let r2 = ms[k - 1] as f64 / ms[k - 2] as f64;
    let (d1, d2) = (f1 - f2, f2 - f3);
    let scale = f3.abs().max(f64::MIN_POSITIVE);
    if (r1 - r2).abs() > 1e-12 || d1 * d2 <= 0.0 || d2.abs() <= 1e-13 * scale {
        return Extrapolation { value: f3, order: f64::NAN, spread };
    }
    let order = ((d1 / d2).ln() / r2.ln()).clamp(0.5, 4.0);
    let value = f3 - d2 / (r2.powf(order) - 1.0);
    Extrapolation { value, order, spread }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomogenizedTensor {
    pub n: usize,
    pub a: f64,
    /// Extrapolated tensor.
    pub tensor: Vec<Vec<f64>>,
    /// Tensor per grid of the chain.
    pub grid_trace: Vec<(usize, Vec<Vec<f64>>)>,
    /// Per-entry extrapolation diagnostics, row-major.
    pub extrapolation: Vec<Extrapolation>,
    /// Max relative misfit of `xi^T A xi` against direct solves at the finest grid.
    pub form_residual: f64,
    pub form_ok: bool,
}

impl HomogenizedTensor {
    pub fn at_grid(&self, m: usize) -> Option<&Vec<Vec<f64>>> {
        self.grid_trace.iter().find(|(mm, _)| *mm == m).map(|(_, t)| t)
    }

    pub fn quadratic_form(tensor: &[Vec<f64>], xi: &[f64]) -> f64 {
        let n = xi.len();
        (0..n).map(|i| (0..n).map(|j| xi[i] * tensor[i][j] * xi[j]).sum::<f64>()).sum()
    }
}

pub const FORM_TOL: f64 = 1e-6;
const FORM_PROBES: usize = 8;

/// Polarization probes: `e_i` then `e_i + e_j` for `i < j`.
fn probes(n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..n {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        out.push(v);
    }
    for i in 0..n {
        for j in i + 1..n {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v[j] = 1.0;
            out.push(v);
        }
    }
    out
}

fn tensor_from_probes(n: usize, vals: &[f64]) -> Vec<Vec<f64>> {
    let mut t = vec![vec![0.0; n]; n];
    for i in 0..n {
        t[i][i] = vals[i];
    }
    let mut k = n;
    for i in 0..n {
        for j in i + 1..n {
            let off = 0.5 * (vals[k] - vals[i] - vals[j]);
            t[i][j] = off;
            t[j][i] = off;
            k += 1;
        }
    }
    t
}

pub fn assemble_tensor(a: f64, n: usize, m_list: &[usize], seed: u64) -> Result<HomogenizedTensor> {
    if m_list.len() < 2 || m_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidCellProblem("grid chain must be increasing with at least two entries".into()));
    }
    let probe_set = probes(n);
    let jobs: Vec<(usize, Vec<f64>)> =
        m_list.iter().flat_map(|&m| probe_set.iter().map(move |xi| (m, xi.clone()))).collect();
    let fields: Vec<CorrectorField> = jobs
        .par_iter()
        .map(|(m, xi)| solve_cell(&CellProblem::new(xi.clone(), a, *m)))
        .collect::<Result<_>>()?;

    let np = probe_set.len();
    let grid_trace: Vec<(usize, Vec<Vec<f64>>)> = m_list
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let vals: Vec<f64> = fields[k * np..(k + 1) * np].iter().map(|f| f.fhat).collect();
            (m, tensor_from_probes(n, &vals))
        })
        .collect();

    let mut tensor = vec![vec![0.0; n]; n];
    let mut extrapolation = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let seq: Vec<f64> = grid_trace.iter().map(|(_, t)| t[i][j]).collect();
            let e = richardson(m_list, &seq);
            tensor[i][j] = e.value;
            extrapolation.push(e);
        }
    }

    let finest = *m_list.last().unwrap();
    let finest_tensor = &grid_trace.last().unwrap().1;
    let mut rng = StdRng::seed_from_u64(seed);
    let samples: Vec<Vec<f64>> = (0..FORM_PROBES).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let misfits: Vec<f64> = samples
        .par_iter()
        .map(|xi| {
            let direct = solve_cell(&CellProblem::new(xi.clone(), a, finest))?.fhat;
            let norm2: f64 = xi.iter().map(|x| x * x).sum();
            Ok((HomogenizedTensor::quadratic_form(finest_tensor, xi) - direct).abs() / norm2)
        })
        .collect::<Result<_>>()?;
    let form_residual = misfits.into_iter().fold(0.0, f64::max);

    Ok(HomogenizedTensor {
        n,
        a,
        tensor,
        grid_trace,
        extrapolation,
        form_residual,
        form_ok: form_residual < FORM_TOL,
    })
}

/// `fhat(xi)` on a grid chain with Richardson extrapolation.
pub fn fhat_extrapolated(xi: &[f64], a: f64, m_list: &[usize]) -> Result<(Extrapolation, Vec<CorrectorField>)> {
    let fields: Vec<CorrectorField> =
        m_list.par_iter().map(|&m| solve_cell(&CellProblem::new(xi.to_vec(), a, m))).collect::<Result<_>>()?;
    let vals: Vec<f64> = fields.iter().map(|f| f.fhat).collect();
    Ok((richardson(m_list, &vals), fields))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fhat(xi: &[f64], a: f64, m: usize) -> f64 {
        solve_cell(&CellProblem::new(xi.to_vec(), a, m)).unwrap().fhat
    }

    #[test]
    fn zero_datum_gives_zero() {
        let f = solve_cell(&CellProblem::new(vec![0.0, 0.0], 0.25, 16)).unwrap();
        assert_eq!(f.fhat, 0.0);
        assert!(f.w.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn unperforated_cell_is_exact() {
        for xi in [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]] {
            let f = fhat(&xi, 0.0, 16);
            let norm2 = xi[0] * xi[0] + xi[1] * xi[1];
            assert!((f - norm2).abs() < 1e-10, "{f}");
        }
    }

    #[test]
    fn rejects_invalid_problems() {
        assert!(solve_cell(&CellProblem::new(vec![1.0, 0.0], 0.25, 4)).is_err());
        assert!(solve_cell(&CellProblem::new(vec![1.0], 0.25, 16)).is_err());
        assert!(solve_cell(&CellProblem::new(vec![1.0, 0.0], 0.5, 16)).is_err());
        let mut p = CellProblem::new(vec![1.0, 0.0], 0.25, 16);
        p.tol = 0.0;
        assert!(solve_cell(&p).is_err());
    }

    #[test]
    fn corrector_has_zero_mean_and_respects_competitor() {
        let f = solve_cell(&CellProblem::new(vec![0.7, -0.3], 0.25, 32)).unwrap();
        let matrix: Vec<f64> = f.w.iter().zip(&f.matrix_mask).filter(|(_, &m)| m).map(|(w, _)| *w).collect();
        let mean = matrix.iter().sum::<f64>() / matrix.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!(f.converged);
        let competitor = zero_corrector_energy(&[0.7, -0.3], 0.25, 32);
        assert!(f.fhat <= competitor);
        assert!(f.fhat > 1e-12 * 0.58);
        assert!(f.value_at(&[0, 0]).is_none());
        assert!(f.value_at(&[16, 16]).is_some());
    }

    #[test]
    fn symmetric_under_sign_and_permutation() {
        let f1 = fhat(&[0.8, 0.3], 0.25, 16);
        let f2 = fhat(&[-0.8, -0.3], 0.25, 16);
        let f3 = fhat(&[0.3, 0.8], 0.25, 16);
        assert!((f1 - f2).abs() <= 1e-12 * f1);
        assert!((f1 - f3).abs() <= 1e-9 * f1);
    }

    #[test]
    fn three_dimensional_cell() {
        let f = fhat(&[1.0, 0.0, 0.0], 0.25, 8);
        let competitor = zero_corrector_energy(&[1.0, 0.0, 0.0], 0.25, 8);
        assert!(f > 0.0 && f <= competitor);
        let g = fhat(&[0.0, 0.0, 1.0], 0.25, 8);
        assert!((f - g).abs() < 1e-9);
    }

    #[test]
    fn refinement_differences_shrink() {
        let vals: Vec<f64> = [16, 32, 64].iter().map(|&m| fhat(&[1.0, 0.0], 0.25, m)).collect();
        assert!((vals[2] - vals[1]).abs() < (vals[1] - vals[0]).abs());
        assert!(vals[2] <= vals[1] && vals[1] <= vals[0]);
    }

    #[test]
    fn richardson_recovers_first_order_limit() {
        let ms = [16, 32, 64];
        let vals: Vec<f64> = ms.iter().map(|&m| 0.6 + 0.3 / m as f64 + 0.1 / (m * m) as f64).collect();
        let e = richardson(&ms, &vals);
        assert!((e.value - 0.6).abs() < 2e-4);
        assert!((e.order - 1.0).abs() < 0.1);
    }

    #[test]
    fn tensor_of_unperforated_cell_is_identity() {
        let t = assemble_tensor(0.0, 2, &[8, 16], 1).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((t.tensor[i][j] - expect).abs() < 1e-10);
            }
        }
        assert!(t.form_ok);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn discrete_fhat_is_two_homogeneous(x in -1.0f64..1.0, y in -1.0f64..1.0, lambda in 0.1f64..5.0) {
            prop_assume!(x * x + y * y > 1e-4);
            let base = fhat(&[x, y], 0.25, 16);
            let scaled = fhat(&[lambda * x, lambda * y], 0.25, 16);
            prop_assert!((scaled - lambda * lambda * base).abs() <= 1e-10 * scaled.max(1e-300));
        }
    }
}
