//! Flat `key = value` run configuration with `[section]` headers.
//!
//! ```text
//! # comments start with '#'
//! output = results
//!
//! [microstructure]
//! n = 2
//! a = 0.25
//! L = 1
//!
//! [solver]
//! M = 16
//! schedule = 8, 4, 2, 1
//!
//! [plan]
//! mode = critical
//! ell = 1
//! eps_chain = 1/4, 1/8, 1/16
//! xi = 1 0; 2 0
//! ```
//!
//! Lists are comma separated; vector lists separate vectors by `;` and components by
//! spaces or commas. Numbers may be written as fractions `p/q`.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::regimes::Mode;
use crate::surface_mincut::Stencil;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Microstructure {
    pub n: usize,
    pub a: f64,
    pub domain_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solver {
    /// Resolution chain; the lattice solvers use the last entry.
    pub m: Vec<usize>,
    pub tol: f64,
    pub cg_tol: f64,
    pub schedule: Vec<f64>,
    pub max_outer: usize,
    pub collar: Option<usize>,
    pub seed: u64,
    pub stencil: Stencil,
    pub t_chain: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub mode: Mode,
    pub eps_chain: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub nu: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    /// Fidelity weight for `denoise`.
    pub weight: f64,
    /// Node spacing shared by the `denoise` chain; defaults to the finest eps over M.
    pub h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub subcommand: Option<String>,
    /// Output directory; not part of the configuration hash.
    #[serde(skip)]
    pub output: Option<PathBuf>,
    pub microstructure: Microstructure,
    pub solver: Solver,
    pub plan: Plan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            subcommand: None,
            output: None,
            microstructure: Microstructure { n: 2, a: 0.25, domain_len: 1.0 },
            solver: Solver {
                m: vec![16],
                tol: 1e-12,
                cg_tol: 1e-10,
                schedule: vec![8.0, 4.0, 2.0, 1.0],
                max_outer: 100,
                collar: None,
                seed: 7,
                stencil: Stencil::Axis,
                t_chain: vec![2.0, 4.0, 8.0],
            },
            plan: Plan {
                mode: Mode::Critical(1.0),
                eps_chain: vec![0.25, 0.125, 0.0625],
                xi: Vec::new(),
                z: vec![8.0],
                nu: Vec::new(),
                lambda: vec![1.0, 2.0, 4.0, 8.0],
                weight: 4.0,
                h: None,
            },
        }
    }
}

pub const SUBCOMMANDS: [&str; 8] = ["cell-f", "surface-g", "estimate-f", "estimate-g", "homogeneity", "regime-sweep", "denoise", "report"];

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn number(s: &str, line: usize) -> Result<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((p, q)) => {
            let p: f64 = p.trim().parse().map_err(|_| err(line, format!("'{s}' is not a number")))?;
            let q: f64 = q.trim().parse().map_err(|_| err(line, format!("'{s}' is not a number")))?;
            p / q
        }
        None => s.parse().map_err(|_| err(line, format!("'{s}' is not a number")))?,
    };
    if !v.is_finite() {
        return Err(err(line, format!("'{s}' is not finite")));
    }
    Ok(v)
}

fn integer(s: &str, line: usize) -> Result<usize> {
    s.trim().parse().map_err(|_| err(line, format!("'{}' is not a non-negative integer", s.trim())))
}

fn list(s: &str, line: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = s.split(',').map(|t| number(t, line)).collect::<Result<_>>()?;
    Ok(v)
}

fn vectors(s: &str, line: usize) -> Result<Vec<Vec<f64>>> {
    s.split(';')
        .map(|v| v.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).map(|t| number(t, line)).collect())
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut seen = std::collections::BTreeSet::new();
        let mut ell: Option<(f64, usize)> = None;
        let mut mode_name: Option<(String, usize)> = None;
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(name) = body.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err(line, "unterminated section header"))?.trim();
                if !["microstructure", "solver", "plan"].contains(&name) {
                    return Err(err(line, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| err(line, format!("expected 'key = value', got '{body}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(err(line, format!("empty value for '{key}'")));
            }
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            if !seen.insert(full.clone()) {
                return Err(err(line, format!("duplicate key '{full}'")));
            }
            match full.as_str() {
                "subcommand" => {
                    if !SUBCOMMANDS.contains(&value) {
                        return Err(err(line, format!("unknown subcommand '{value}'")));
                    }
                    cfg.subcommand = Some(value.to_string());
                }
                "output" => cfg.output = Some(PathBuf::from(value)),
                "microstructure.n" => cfg.microstructure.n = integer(value, line)?,
                "microstructure.a" => cfg.microstructure.a = number(value, line)?,
                "microstructure.L" => cfg.microstructure.domain_len = number(value, line)?,
                "solver.M" => cfg.solver.m = value.split(',').map(|t| integer(t, line)).collect::<Result<_>>()?,
                "solver.tol" => cfg.solver.tol = number(value, line)?,
                "solver.cg_tol" => cfg.solver.cg_tol = number(value, line)?,
                "solver.schedule" => cfg.solver.schedule = list(value, line)?,
                "solver.max_outer" => cfg.solver.max_outer = integer(value, line)?,
                "solver.collar" => cfg.solver.collar = Some(integer(value, line)?),
                "solver.seed" => cfg.solver.seed = value.parse().map_err(|_| err(line, format!("'{value}' is not a seed")))?,
                "solver.stencil" => cfg.solver.stencil = value.parse().map_err(|e: Error| err(line, e.to_string()))?,
                "solver.t_chain" => cfg.solver.t_chain = list(value, line)?,
                "plan.mode" => mode_name = Some((value.to_string(), line)),
                "plan.ell" => ell = Some((number(value, line)?, line)),
                "plan.eps_chain" => cfg.plan.eps_chain = list(value, line)?,
                "plan.xi" => cfg.plan.xi = vectors(value, line)?,
                "plan.z" => cfg.plan.z = list(value, line)?,
                "plan.nu" => cfg.plan.nu = vectors(value, line)?,
                "plan.lambda" => cfg.plan.lambda = list(value, line)?,
                "plan.weight" => cfg.plan.weight = number(value, line)?,
                "plan.h" => cfg.plan.h = Some(number(value, line)?),
                _ => return Err(err(line, format!("unknown key '{full}'"))),
            }
        }
        let ell_value = ell.map(|e| e.0).unwrap_or(1.0);
        if let Some((name, line)) = mode_name {
            cfg.plan.mode = match name.as_str() {
                "sub" => Mode::Sub,
                "super" => Mode::Super,
                "critical" => Mode::Critical(ell_value),
                other => return Err(err(line, format!("unknown mode '{other}' (expected sub, critical or super)"))),
            };
        } else {
            cfg.plan.mode = Mode::Critical(ell_value);
        }
        if let (Some((_, line)), false) = (ell, matches!(cfg.plan.mode, Mode::Critical(_))) {
            return Err(err(line, "'ell' only applies to mode = critical"));
        }
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    fn fill_defaults(&mut self) {
        let n = self.microstructure.n;
        if self.plan.xi.is_empty() {
            let mut e1 = vec![0.0; n];
            e1[0] = 1.0;
            self.plan.xi = vec![e1];
        }
        if self.plan.nu.is_empty() {
            let mut en = vec![0.0; n];
            en[n.saturating_sub(1).min(1)] = 1.0;
            self.plan.nu = vec![en];
        }
    }

    /// Field-level checks that do not depend on the subcommand.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        let n = self.microstructure.n;
        if n != 2 && n != 3 {
            return bad(format!("microstructure.n must be 2 or 3, got {n}"));
        }
        if !(0.0..0.5).contains(&self.microstructure.a) {
            return bad(format!("microstructure.a must lie in [0, 1/2), got {}", self.microstructure.a));
        }
        if !(self.microstructure.domain_len > 0.0) {
            return bad("microstructure.L must be positive".into());
        }
        if self.solver.m.is_empty() || self.solver.m.contains(&0) {
            return bad("solver.M must list positive resolutions".into());
        }
        if !(self.solver.tol > 0.0) || !(self.solver.cg_tol > 0.0) {
            return bad("solver tolerances must be positive".into());
        }
        if let Some(v) = self.plan.xi.iter().chain(&self.plan.nu).find(|v| v.len() != n) {
            return bad(format!("vector {v:?} does not have {n} components"));
        }
        if self.plan.eps_chain.iter().any(|&e| !(e > 0.0)) {
            return bad("plan.eps_chain entries must be positive".into());
        }
        if !(self.plan.weight >= 0.0) {
            return bad("plan.weight must be non-negative".into());
        }
        Ok(())
    }
}
