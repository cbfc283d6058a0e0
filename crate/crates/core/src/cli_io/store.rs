//! Content-addressed result cache and CSV/SVG writers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::Result;

pub const SCHEMA_LINE: &str = "# schema=brittle-homog/v1";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CACHE_ENV: &str = "BH_CACHE_DIR";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFRow {
    pub a: f64,
    /// Resolution, or `inf` for the extrapolated value.
    pub m: String,
    pub xi: Vec<f64>,
    pub fhat: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhatRow {
    pub nu: Vec<f64>,
    pub a: f64,
    pub t: f64,
    pub per_area: f64,
    pub stencil: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub mode: String,
    pub ell: f64,
    pub eps: f64,
    pub beta: f64,
    pub target: String,
    pub density: f64,
    pub spread: f64,
    pub bound_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub mode: String,
    pub xi: Vec<f64>,
    pub lambda: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tables {
    pub cell_f: Vec<CellFRow>,
    pub ghat: Vec<GhatRow>,
    pub estimates: Vec<EstimateRow>,
    pub profile: Vec<ProfileRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckKind {
    /// An internal consistency property of the solvers.
    Invariant,
    /// A bound from the homogenization theory.
    Bound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub version: String,
    pub config_hash: String,
    pub operation: String,
    pub inputs: serde_json::Value,
    pub tables: Tables,
    pub checks: Vec<Check>,
    pub flags: Vec<String>,
    pub details: serde_json::Value,
    /// Wall-clock seconds; excluded from the checksum.
    pub seconds: f64,
    pub checksum: String,
}

impl ResultRecord {
    pub fn compute_checksum(&self) -> String {
        let mut stripped = self.clone();
        stripped.seconds = 0.0;
        stripped.checksum = String::new();
        sha256_hex(&serde_json::to_vec(&stripped).expect("record serializes"))
    }

    pub fn seal(mut self) -> Self {
        self.checksum = self.compute_checksum();
        self
    }
}

/// Cache directory: `BH_CACHE_DIR` if set, else `<output>/cache`.
pub fn cache_dir(output: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => output.join("cache"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CacheLookup {
    Hit(Box<ResultRecord>),
    Miss,
    /// A record existed but was unreadable or failed verification.
    Corrupt(String),
}

pub struct Cache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl Cache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Writes the record to a temporary file and renames it into place, so readers see
    /// either the old record or the complete new one.
    pub fn put(&self, record: &ResultRecord) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir)?;
        let target = self.path(&record.config_hash);
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            record.config_hash,
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(&serde_json::to_vec_pretty(record)?)?;
            file.sync_all()?;
        }
        fs::rename(&tmp, &target)?;
        Ok(target)
    }

    pub fn get(&self, key: &str) -> CacheLookup {
        let path = self.path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return CacheLookup::Miss,
            Err(e) => return CacheLookup::Corrupt(format!("{}: {e}", path.display())),
        };
        let record: ResultRecord = match serde_json::from_slice(&bytes) {
            Ok(r) => r,
            Err(e) => return CacheLookup::Corrupt(format!("{}: {e}", path.display())),
        };
        if record.config_hash != key || record.checksum != record.compute_checksum() {
            return CacheLookup::Corrupt(format!("{}: hash mismatch", path.display()));
        }
        CacheLookup::Hit(Box::new(record))
    }

    /// All verifiable records, ordered by key. Unverifiable files are skipped and named
    /// in the returned warnings.
    pub fn records(&self) -> (Vec<ResultRecord>, Vec<String>) {
        let mut keys: Vec<String> = match fs::read_dir(&self.dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().to_str().map(String::from))
                .filter(|n| n.ends_with(".json") && !n.starts_with('.'))
                .map(|n| n.trim_end_matches(".json").to_string())
                .collect(),
            Err(_) => Vec::new(),
        };
        keys.sort();
        let mut out = Vec::new();
        let mut warnings = Vec::new();
        for k in keys {
            match self.get(&k) {
                CacheLookup::Hit(r) => out.push(*r),
                CacheLookup::Corrupt(w) => warnings.push(w),
                CacheLookup::Miss => {}
            }
        }
        (out, warnings)
    }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";")
}

/// Rows of the four tables, each prefixed by the hash of the run that produced it.
pub fn write_tables(dir: &Path, tagged: &[(String, Tables)], which: &[&str]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for &name in which {
        let mut s = String::new();
        s.push_str(SCHEMA_LINE);
        s.push('\n');
        match name {
            "cell_f" => {
                s.push_str("config_hash,a,M,xi,fhat,residual\n");
                for (h, t) in tagged {
                    for r in &t.cell_f {
                        s.push_str(&format!("{h},{:?},{},{},{:?},{:?}\n", r.a, r.m, fmt_vec(&r.xi), r.fhat, r.residual));
                    }
                }
            }
            "ghat" => {
                s.push_str("config_hash,nu,a,t,per_area,stencil\n");
                for (h, t) in tagged {
                    for r in &t.ghat {
                        s.push_str(&format!("{h},{},{:?},{:?},{:?},{}\n", fmt_vec(&r.nu), r.a, r.t, r.per_area, r.stencil));
                    }
                }
            }
            "estimates" => {
                s.push_str("config_hash,mode,ell,eps,beta,target,density,spread,bound_ok\n");
                for (h, t) in tagged {
                    for r in &t.estimates {
                        s.push_str(&format!(
                            "{h},{},{:?},{:?},{:?},{},{:?},{:?},{}\n",
                            r.mode, r.ell, r.eps, r.beta, r.target, r.density, r.spread, r.bound_ok
                        ));
                    }
                }
            }
            "profile" => {
                s.push_str("config_hash,mode,xi,lambda,ratio\n");
                for (h, t) in tagged {
                    for r in &t.profile {
                        s.push_str(&format!("{h},{},{},{:?},{:?}\n", r.mode, fmt_vec(&r.xi), r.lambda, r.ratio));
                    }
                }
            }
            other => unreachable!("unknown table {other}"),
        }
        let path = dir.join(format!("{name}.csv"));
        fs::write(&path, s)?;
        written.push(path);
    }
    Ok(written)
}

/// Polyline chart with one line per series and linear axes.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p.0), b.max(p.0), c.min(p.1), d.max(p.1)),
    );
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 0.0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        w / 2.0,
        escape(title),
        h - pad,
        w - pad,
        h - pad,
        h - pad,
        w / 2.0,
        h - 16.0,
        escape(xlabel),
        h / 2.0,
        h / 2.0,
        escape(ylabel)
    );
    for (k, tick) in [(0, x0), (1, x1)] {
        let anchor = if k == 0 { "start" } else { "end" };
        s.push_str(&format!("<text x=\"{:.1}\" y=\"{}\" text-anchor=\"{anchor}\">{tick:.4}</text>\n", sx(tick), h - pad + 16.0));
    }
    for tick in [y0, y1] {
        s.push_str(&format!("<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{tick:.4}</text>\n", pad - 4.0, sy(tick) + 4.0));
    }
    for (k, (name, points)) in series.iter().enumerate() {
        let colour = colours[k % colours.len()];
        let path: Vec<String> = points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        s.push_str(&format!("<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>\n", path.join(" ")));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{}</text>\n",
            w - pad + 4.0 - 120.0,
            pad + 16.0 * k as f64,
            escape(name)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(key: &str) -> ResultRecord {
        ResultRecord {
            version: VERSION.into(),
            config_hash: key.into(),
            operation: "cell-f".into(),
            inputs: serde_json::json!({"a": 0.25}),
            tables: Tables {
                cell_f: vec![CellFRow { a: 0.25, m: "16".into(), xi: vec![1.0, 0.0], fhat: 0.6, residual: 1e-13 }],
                ..Tables::default()
            },
            checks: Vec::new(),
            flags: Vec::new(),
            details: serde_json::Value::Null,
            seconds: 0.5,
            checksum: String::new(),
        }
        .seal()
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        let r = record("abc");
        cache.put(&r).unwrap();
        assert_eq!(cache.get("abc"), CacheLookup::Hit(Box::new(r)));
        assert_eq!(cache.get("nope"), CacheLookup::Miss);
    }

    #[test]
    fn tampered_record_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        let path = cache.put(&record("k1")).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("0.6", "0.7");
        fs::write(&path, text).unwrap();
        assert!(matches!(cache.get("k1"), CacheLookup::Corrupt(_)));
        fs::write(&path, "{ truncated").unwrap();
        assert!(matches!(cache.get("k1"), CacheLookup::Corrupt(_)));
        // a record stored under the wrong key
        let other = record("k2");
        fs::write(dir.path().join("k3.json"), serde_json::to_vec(&other).unwrap()).unwrap();
        assert!(matches!(cache.get("k3"), CacheLookup::Corrupt(_)));
    }

    #[test]
    fn timing_does_not_change_checksum() {
        let mut r = record("t");
        r.seconds = 99.0;
        assert_eq!(r.compute_checksum(), r.checksum);
    }

    #[test]
    fn tables_start_with_schema() {
        let dir = tempfile::tempdir().unwrap();
        let files = write_tables(dir.path(), &[("h1".into(), record("h1").tables)], &["cell_f", "profile"]).unwrap();
        let text = fs::read_to_string(&files[0]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SCHEMA_LINE);
        assert_eq!(lines[2], "h1,0.25,16,1.0;0.0,0.6,1e-13");
        assert_eq!(fs::read_to_string(&files[1]).unwrap().lines().count(), 2);
    }

    #[test]
    fn chart_is_well_formed() {
        let svg = line_chart("t <1>", "x", "y", &[("s".into(), vec![(0.0, 1.0), (1.0, 2.0)])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("t &lt;1&gt;"));
        assert!(line_chart("empty", "x", "y", &[]).contains("</svg>"));
    }
}
