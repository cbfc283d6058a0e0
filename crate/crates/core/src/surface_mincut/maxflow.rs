//! Dinic max-flow on real capacities with residual-reachability cut recovery.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy)]
struct Arc {
    to: u32,
    cap: f64,
    orig: f64,
}

/// Directed capacitated graph. Arcs are stored in pairs: `2k` is the forward arc and
/// `2k + 1` its reverse.
#[derive(Debug, Clone)]
pub struct FlowGraph {
    n: usize,
    pub source: usize,
    pub sink: usize,
    arcs: Vec<Arc>,
    tails: Vec<u32>,
    out: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CutResult {
    /// Total capacity of arcs leaving the source side.
    pub cost: f64,
    /// `cost / t^{n-1}`; filled in by the caller that knows the geometry.
    pub per_area: f64,
    /// Ids of the forward arcs (as returned by `add_edge`) severed by the cut.
    pub cut_faces: Vec<usize>,
    /// Max-flow value; equals `cost` by duality.
    pub flow_certificate: f64,
    pub source_side: Vec<bool>,
}

impl FlowGraph {
    pub fn new(n: usize, source: usize, sink: usize) -> Self {
        assert!(source < n && sink < n && source != sink);
        Self { n, source, sink, arcs: Vec::new(), tails: Vec::new(), out: vec![Vec::new(); n] }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Adds `u -> v` with capacity `cap_uv` and `v -> u` with `cap_vu`; returns the edge id.
    pub fn add_edge(&mut self, u: usize, v: usize, cap_uv: f64, cap_vu: f64) -> usize {
        assert!(cap_uv >= 0.0 && cap_vu >= 0.0, "capacities must be non-negative");
        let id = self.arcs.len() / 2;
        self.out[u].push(self.arcs.len() as u32);
        self.arcs.push(Arc { to: v as u32, cap: cap_uv, orig: cap_uv });
        self.tails.push(u as u32);
        self.out[v].push(self.arcs.len() as u32);
        self.arcs.push(Arc { to: u as u32, cap: cap_vu, orig: cap_vu });
        self.tails.push(v as u32);
        id
    }

    pub fn edge_endpoints(&self, id: usize) -> (usize, usize) {
        (self.tails[2 * id] as usize, self.arcs[2 * id].to as usize)
    }

    fn bfs(&self, level: &mut [i32], tol: f64) -> bool {
        level.iter_mut().for_each(|l| *l = -1);
        let mut queue = std::collections::VecDeque::new();
        level[self.source] = 0;
        queue.push_back(self.source);
        while let Some(u) = queue.pop_front() {
            for &a in &self.out[u] {
                let arc = self.arcs[a as usize];
                let v = arc.to as usize;
                if arc.cap > tol && level[v] < 0 {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        level[self.sink] >= 0
    }

    /// Blocking flow along the level graph, iterative to keep the stack flat.
    fn blocking_flow(&mut self, level: &mut [i32], iter: &mut [usize], tol: f64) -> f64 {
        let mut total = 0.0;
        let mut path: Vec<u32> = Vec::new();
        let mut u = self.source;
        loop {
            if u == self.sink {
                let bottleneck = path.iter().map(|&a| self.arcs[a as usize].cap).fold(f64::INFINITY, f64::min);
                for &a in &path {
                    self.arcs[a as usize].cap -= bottleneck;
                    self.arcs[(a ^ 1) as usize].cap += bottleneck;
                }
                total += bottleneck;
                // retreat to the tail of the first saturated arc
                let cut = path.iter().position(|&a| self.arcs[a as usize].cap <= tol).unwrap_or(0);
                path.truncate(cut);
                u = if cut == 0 { self.source } else { self.arcs[path[cut - 1] as usize].to as usize };
                continue;
            }
            let mut advanced = false;
            while iter[u] < self.out[u].len() {
                let a = self.out[u][iter[u]];
                let arc = self.arcs[a as usize];
                let v = arc.to as usize;
                if arc.cap > tol && level[v] == level[u] + 1 {
                    path.push(a);
                    u = v;
                    advanced = true;
                    break;
                }
                iter[u] += 1;
            }
            if advanced {
                continue;
            }
            // dead end
            level[u] = -1;
            match path.pop() {
                None => return total,
                Some(a) => {
                    u = self.tails[a as usize] as usize;
                    iter[u] += 1;
                }
            }
        }
    }
}

/// Exact s-t minimum cut by Dinic's algorithm; the cut is the set of arcs leaving the
/// residual-reachable set of the source.
pub fn min_cut(mut g: FlowGraph) -> CutResult {
    let max_cap = g.arcs.iter().map(|a| a.orig).filter(|c| c.is_finite()).fold(0.0, f64::max);
    let tol = 1e-13 * max_cap.max(f64::MIN_POSITIVE);
    let mut level = vec![-1i32; g.n];
    let mut iter = vec![0usize; g.n];
    let mut flow = 0.0;
    while g.bfs(&mut level, tol) {
        iter.iter_mut().for_each(|i| *i = 0);
        let pushed = g.blocking_flow(&mut level, &mut iter, tol);
        if pushed <= 0.0 {
            break;
        }
        flow += pushed;
    }

    // residual reachability
    let mut side = vec![false; g.n];
    let mut stack = vec![g.source];
    side[g.source] = true;
    while let Some(u) = stack.pop() {
        for &a in &g.out[u] {
            let arc = g.arcs[a as usize];
            let v = arc.to as usize;
            if arc.cap > tol && !side[v] {
                side[v] = true;
                stack.push(v);
            }
        }
    }
    let mut cost = 0.0;
    let mut cut_faces = Vec::new();
    for (k, arc) in g.arcs.iter().enumerate() {
        let t = g.tails[k] as usize;
        if side[t] && !side[arc.to as usize] && arc.orig > 0.0 {
            cost += arc.orig;
            cut_faces.push(k / 2);
        }
    }
    cut_faces.dedup();
    CutResult { cost, per_area: f64::NAN, cut_faces, flow_certificate: flow, source_side: side }
}
