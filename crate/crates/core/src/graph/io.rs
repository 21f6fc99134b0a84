//! Graph bundle directory format:
//!
//! ```text
//! meta.json      {"num_nodes", "num_classes", "feature_dim"}
//! edges.txt      one "u v" pair per line, u < v
//! features.csv   one comma-separated row per node, shortest round-trip decimals
//! labels.txt     one class index per line
//! split.json     named id arrays
//! poison.json    attack ledger (optional)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, PoisonLedger, Split};
use crate::tensor::Matrix;

const META: &str = "meta.json";
const EDGES: &str = "edges.txt";
const FEATURES: &str = "features.csv";
const LABELS: &str = "labels.txt";
const SPLIT: &str = "split.json";
const POISON: &str = "poison.json";

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct Meta {
    num_nodes: usize,
    num_classes: usize,
    feature_dim: usize,
}

/// Everything stored in a bundle directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub graph: Graph,
    pub split: Split,
    pub ledger: Option<PoisonLedger>,
}

pub fn save_graph(g: &Graph, split: &Split, ledger: Option<&PoisonLedger>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = Meta {
        num_nodes: g.num_nodes(),
        num_classes: g.num_classes(),
        feature_dim: g.feature_dim(),
    };
    fs::write(dir.join(META), serde_json::to_string_pretty(&meta)? + "\n")?;

    let mut edges = String::with_capacity(g.num_edges() * 10);
    for &(u, v) in g.edges() {
        writeln!(edges, "{u} {v}").expect("write to string");
    }
    fs::write(dir.join(EDGES), edges)?;

    let mut feats = String::new();
    for r in 0..g.num_nodes() {
        let row = g.features().row(r);
        for (i, x) in row.iter().enumerate() {
            if i > 0 {
                feats.push(',');
            }
            // `Display` for f64 is the shortest exact round-trip form, never exponential.
            write!(feats, "{x}").expect("write to string");
        }
        feats.push('\n');
    }
    fs::write(dir.join(FEATURES), feats)?;

    let mut labels = String::new();
    for l in g.labels() {
        writeln!(labels, "{l}").expect("write to string");
    }
    fs::write(dir.join(LABELS), labels)?;

    fs::write(dir.join(SPLIT), serde_json::to_string_pretty(split)? + "\n")?;
    let poison = dir.join(POISON);
    match ledger {
        Some(l) => fs::write(poison, serde_json::to_string_pretty(l)? + "\n")?,
        None if poison.exists() => fs::remove_file(poison)?,
        None => {}
    }
    Ok(())
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let path: PathBuf = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    Ok(fs::read_to_string(path)?)
}

fn malformed(file: &str, line: usize, detail: impl Into<String>) -> Error {
    Error::Malformed {
        file: file.to_string(),
        line,
        detail: detail.into(),
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, file: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| malformed(file, e.line(), e.to_string()))
}

pub fn load_graph(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let meta: Meta = parse_json(&read(dir, META)?, META)?;
    let n = meta.num_nodes;

    let mut edges = Vec::new();
    for (i, line) in read(dir, EDGES)?.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let mut field = || -> Result<usize> {
            let tok = parts
                .next()
                .ok_or_else(|| malformed(EDGES, ln, "expected two node ids"))?;
            let v: usize = tok
                .parse()
                .map_err(|_| malformed(EDGES, ln, format!("bad node id {tok:?}")))?;
            if v >= n {
                return Err(Error::IndexOutOfRange {
                    file: EDGES.into(),
                    line: ln,
                    index: v,
                    bound: n,
                });
            }
            Ok(v)
        };
        let (u, v) = (field()?, field()?);
        if parts.next().is_some() {
            return Err(malformed(EDGES, ln, "more than two fields"));
        }
        if u == v {
            return Err(malformed(EDGES, ln, "self-loop"));
        }
        edges.push((u, v));
    }

    let text = read(dir, FEATURES)?;
    let rows: Vec<&str> = text.lines().collect();
    if rows.len() != n {
        return Err(malformed(
            FEATURES,
            rows.len().min(n) + 1,
            format!("{} feature rows, meta.json declares {n} nodes", rows.len()),
        ));
    }
    let mut data = Vec::with_capacity(n * meta.feature_dim);
    for (i, line) in rows.iter().enumerate() {
        let before = data.len();
        if meta.feature_dim > 0 {
            for tok in line.split(',') {
                let x: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|_| malformed(FEATURES, i + 1, format!("bad number {tok:?}")))?;
                if !x.is_finite() {
                    return Err(malformed(FEATURES, i + 1, "non-finite value"));
                }
                data.push(x);
            }
        }
        if data.len() - before != meta.feature_dim {
            return Err(malformed(
                FEATURES,
                i + 1,
                format!(
                    "{} values, meta.json declares feature_dim {}",
                    data.len() - before,
                    meta.feature_dim
                ),
            ));
        }
    }
    let features = Matrix::from_vec(n, meta.feature_dim, data)?;

    let text = read(dir, LABELS)?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != n {
        return Err(malformed(
            LABELS,
            lines.len().min(n) + 1,
            format!("{} labels, meta.json declares {n} nodes", lines.len()),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines.iter().enumerate() {
        let l: usize = line
            .trim()
            .parse()
            .map_err(|_| malformed(LABELS, i + 1, format!("bad label {line:?}")))?;
        if l >= meta.num_classes {
            return Err(Error::IndexOutOfRange {
                file: LABELS.into(),
                line: i + 1,
                index: l,
                bound: meta.num_classes,
            });
        }
        labels.push(l);
    }

    let graph = Graph::new(features, labels, meta.num_classes, edges)?;
    let split: Split = parse_json(&read(dir, SPLIT)?, SPLIT)?;
    split.validate(n).map_err(|e| malformed(SPLIT, 0, e.to_string()))?;
    let ledger = if dir.join(POISON).exists() {
        Some(parse_json(&read(dir, POISON)?, POISON)?)
    } else {
        None
    };
    Ok(Bundle { graph, split, ledger })
}
