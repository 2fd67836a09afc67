//! Attributed-graph types, factor-controlled random-graph corpora, and the
//! JSON-Lines dataset format.
//!
//! Every record is generated from its own `base_seed + index` stream, so
//! corpora are reproducible byte-for-byte regardless of how generation is
//! scheduled.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: &str = "1";

#[derive(Error, Debug)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Graph with an `N x N x K` edge-attribute tensor and an `N x D`
/// node-attribute matrix, all values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributedGraph {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub edge_attr: Tensor<f32>,
    pub node_attr: Tensor<f32>,
}

impl AttributedGraph {
    pub fn new(edge_attr: Tensor<f32>, node_attr: Tensor<f32>) -> Self {
        let n = node_attr.shape()[0];
        assert_eq!(edge_attr.rank(), 3, "edge_attr must be rank 3");
        assert_eq!(edge_attr.shape()[0], n);
        assert_eq!(edge_attr.shape()[1], n);
        let k = edge_attr.shape()[2];
        let d = node_attr.shape()[1];
        AttributedGraph {
            n,
            k,
            d,
            edge_attr,
            node_attr,
        }
    }

    /// Edge presence in the first channel, threshold 0.5.
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edge_attr.at3(i, j, 0) > 0.5
    }

    /// Number of edges `M` (entries above 0.5 with `i < j`).
    pub fn edge_count(&self) -> usize {
        let mut m = 0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.has_edge(i, j) {
                    m += 1;
                }
            }
        }
        m
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| j != i && self.has_edge(i, j)).count()
    }

    /// Check the structural invariants: finite `[0, 1]` values, symmetric
    /// edge tensor, zero diagonal.
    pub fn validate(&self) -> Result<(), DataError> {
        let in_unit = |v: f32| v.is_finite() && (0.0..=1.0).contains(&v);
        if !self.node_attr.data().iter().all(|&v| in_unit(v)) {
            return Err(DataError::Config("node attributes outside [0,1]".into()));
        }
        if !self.edge_attr.data().iter().all(|&v| in_unit(v)) {
            return Err(DataError::Config("edge attributes outside [0,1]".into()));
        }
        for i in 0..self.n {
            for ch in 0..self.k {
                if self.edge_attr.at3(i, i, ch) != 0.0 {
                    return Err(DataError::Config(format!("self-loop at node {i}")));
                }
            }
            for j in 0..self.n {
                for ch in 0..self.k {
                    if self.edge_attr.at3(i, j, ch) != self.edge_attr.at3(j, i, ch) {
                        return Err(DataError::Config(format!(
                            "edge tensor not symmetric at ({i}, {j})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth generative factor levels and realized values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorLabel {
    pub a_level: u8,
    pub b_level: u8,
    pub c_level: u8,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl FactorLabel {
    pub fn level(&self, factor: usize) -> u8 {
        match factor {
            0 => self.a_level,
            1 => self.b_level,
            2 => self.c_level,
            _ => panic!("factor index out of range"),
        }
    }
}

pub const FACTOR_COUNT: usize = 3;
pub const FACTOR_LEVELS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFamily {
    Er,
    Ws,
}

impl std::fmt::Display for GraphFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphFamily::Er => write!(f, "er"),
            GraphFamily::Ws => write!(f, "ws"),
        }
    }
}

/// Generator configuration. The factor grids have exactly ten level slots;
/// the realized `a` value is an edge probability for `Er` and an even ring
/// neighbor count for `Ws`, `b` drives the first node attribute, and `c`
/// both rewires (`Ws` only, probability `c/10`) and offsets the second node
/// attribute by `10 c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub family: GraphFamily,
    pub n: usize,
    pub num_samples: usize,
    pub a_grid: Vec<f64>,
    pub b_grid: Vec<f64>,
    pub c_grid: Vec<f64>,
    pub noise_std: f64,
}

impl GenConfig {
    pub fn er_default(n: usize, num_samples: usize) -> Self {
        GenConfig {
            family: GraphFamily::Er,
            n,
            num_samples,
            // Integer ratios keep grid values identical to their shortest
            // decimal form, so they survive the 9-digit dataset format.
            a_grid: (1..=10).map(|i| (5 * i) as f64 / 100.0).collect(),
            b_grid: (0..10).map(|i| (5 + 10 * i) as f64 / 100.0).collect(),
            c_grid: (1..=10).map(|i| i as f64).collect(),
            noise_std: 0.1,
        }
    }

    pub fn ws_default(n: usize, num_samples: usize) -> Self {
        GenConfig {
            family: GraphFamily::Ws,
            n,
            num_samples,
            // Four distinct even neighbor counts cycled over the ten level
            // slots; the meta line records the effective count.
            a_grid: (0..10).map(|i| (2 + 2 * (i % 4)) as f64).collect(),
            b_grid: (0..10).map(|i| (5 + 10 * i) as f64 / 100.0).collect(),
            c_grid: (1..=10).map(|i| i as f64).collect(),
            noise_std: 0.01,
        }
    }

    pub fn effective_a_levels(&self) -> usize {
        let mut distinct: Vec<u64> = self.a_grid.iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        distinct.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n < 2 {
            return Err(DataError::Config("node count must be at least 2".into()));
        }
        for (name, grid) in [("a", &self.a_grid), ("b", &self.b_grid), ("c", &self.c_grid)] {
            if grid.len() != FACTOR_LEVELS {
                return Err(DataError::Config(format!(
                    "{name} grid must have exactly {FACTOR_LEVELS} levels, got {}",
                    grid.len()
                )));
            }
            if !grid.iter().all(|v| v.is_finite()) {
                return Err(DataError::Config(format!("{name} grid has non-finite values")));
            }
        }
        match self.family {
            GraphFamily::Er => {
                if !self.a_grid.iter().all(|&a| (0.0..=1.0).contains(&a)) {
                    return Err(DataError::Config(
                        "er edge probabilities must lie in [0, 1]".into(),
                    ));
                }
            }
            GraphFamily::Ws => {
                for &a in &self.a_grid {
                    let k = a as i64;
                    if a.fract() != 0.0 || k < 2 || k as usize > self.n - 2 || k % 2 != 0 {
                        return Err(DataError::Config(format!(
                            "ws neighbor counts must be even integers in [2, n-2], got {a}"
                        )));
                    }
                }
            }
        }
        if !self
            .c_grid
            .iter()
            .all(|&c| c.fract() == 0.0 && (1.0..=10.0).contains(&c))
        {
            return Err(DataError::Config(
                "c grid must hold integers in 1..=10".into(),
            ));
        }
        if self.noise_std <= 0.0 || !self.noise_std.is_finite() {
            return Err(DataError::Config("noise std must be positive".into()));
        }
        Ok(())
    }

    /// Clip range for the first node attribute before min-max scaling.
    pub fn f1_clip_range(&self) -> (f64, f64) {
        let lo = self.b_grid.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.b_grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo - 3.0 * self.noise_std, hi + 3.0 * self.noise_std)
    }

    /// Divisor normalizing the second node attribute: `(n - 1) + 100`.
    pub fn f2_divisor(&self) -> f64 {
        (self.n - 1) as f64 + 100.0
    }
}

/// Graph with edge attributes already in `{0, 1}` but node attributes still
/// on their raw scales; [`normalize_graph`] finishes the job.
pub struct RawGraph {
    pub edge_attr: Tensor<f32>,
    /// Per node: `(b + noise, degree + 10 c)`.
    pub node_attr: Vec<[f64; 2]>,
}

/// Min-max normalization of node attributes into `[0, 1]`: the first column
/// is clipped to `[b_min - 3 sigma, b_max + 3 sigma]` and scaled, the second
/// divided by `(n - 1) + 100`.
pub fn normalize_graph(config: &GenConfig, raw: RawGraph) -> AttributedGraph {
    let n = raw.node_attr.len();
    let (lo, hi) = config.f1_clip_range();
    let span = hi - lo;
    let div = config.f2_divisor();
    let mut node = Tensor::<f32>::zeros(vec![n, 2]);
    for (i, attrs) in raw.node_attr.iter().enumerate() {
        let f1 = (attrs[0].clamp(lo, hi) - lo) / span;
        let f2 = attrs[1] / div;
        node.set2(i, 0, f1 as f32);
        node.set2(i, 1, f2 as f32);
    }
    AttributedGraph::new(raw.edge_attr, node)
}

/// Ordered factor-labeled records plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<(AttributedGraph, FactorLabel)>,
    pub gen_config: GenConfig,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn graphs(&self) -> impl Iterator<Item = &AttributedGraph> {
        self.records.iter().map(|(g, _)| g)
    }

    pub fn labels(&self) -> impl Iterator<Item = &FactorLabel> {
        self.records.iter().map(|(_, l)| l)
    }
}

/// Generate a dataset for the configured family.
pub fn generate(config: &GenConfig, seed: u64) -> Result<Dataset, DataError> {
    match config.family {
        GraphFamily::Er => gen_er(config, seed),
        GraphFamily::Ws => gen_ws(config, seed),
    }
}

fn sample_levels(rng: &mut ChaCha8Rng, config: &GenConfig) -> FactorLabel {
    let a_level = rng.random_range(0..FACTOR_LEVELS) as u8;
    let b_level = rng.random_range(0..FACTOR_LEVELS) as u8;
    let c_level = rng.random_range(0..FACTOR_LEVELS) as u8;
    FactorLabel {
        a_level,
        b_level,
        c_level,
        a: config.a_grid[a_level as usize],
        b: config.b_grid[b_level as usize],
        c: config.c_grid[c_level as usize],
    }
}

fn node_attrs_from(
    rng: &mut ChaCha8Rng,
    config: &GenConfig,
    label: &FactorLabel,
    degrees: &[usize],
) -> Vec<[f64; 2]> {
    use rand_distr::Distribution;
    degrees
        .iter()
        .map(|&deg| {
            let noise: f64 = rand_distr::StandardNormal.sample(rng);
            let f1 = label.b + config.noise_std * noise;
            let f2 = deg as f64 + 10.0 * label.c;
            [f1, f2]
        })
        .collect()
}

/// Ring lattice adjacency: node `i` joined to its `neighbors / 2` nearest
/// nodes on each side.
pub fn ring_lattice(n: usize, neighbors: usize) -> Vec<bool> {
    let mut adj = vec![false; n * n];
    for dist in 1..=(neighbors / 2) {
        for u in 0..n {
            let v = (u + dist) % n;
            adj[u * n + v] = true;
            adj[v * n + u] = true;
        }
    }
    adj
}

/// Erdos-Renyi corpus: each edge exists independently with probability `a`.
pub fn gen_er(config: &GenConfig, seed: u64) -> Result<Dataset, DataError> {
    if config.family != GraphFamily::Er {
        return Err(DataError::Config("gen_er called with non-er config".into()));
    }
    config.validate()?;
    let records: Vec<(AttributedGraph, FactorLabel)> = (0..config.num_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let label = sample_levels(&mut rng, config);
            let n = config.n;
            let mut edge = Tensor::<f32>::zeros(vec![n, n, 1]);
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.random::<f64>() < label.a {
                        edge.set3(u, v, 0, 1.0);
                        edge.set3(v, u, 0, 1.0);
                    }
                }
            }
            let degrees: Vec<usize> = (0..n)
                .map(|u| (0..n).filter(|&v| v != u && edge.at3(u, v, 0) > 0.5).count())
                .collect();
            let node_attr = node_attrs_from(&mut rng, config, &label, &degrees);
            let graph = normalize_graph(
                config,
                RawGraph {
                    edge_attr: edge,
                    node_attr,
                },
            );
            (graph, label)
        })
        .collect();
    Ok(Dataset {
        records,
        gen_config: config.clone(),
        seed,
    })
}

/// Watts-Strogatz corpus: ring lattice with `a` neighbors per node, each
/// lattice edge rewired with probability `c / 10`. Rewiring preserves the
/// total edge count `n a / 2`.
pub fn gen_ws(config: &GenConfig, seed: u64) -> Result<Dataset, DataError> {
    if config.family != GraphFamily::Ws {
        return Err(DataError::Config("gen_ws called with non-ws config".into()));
    }
    config.validate()?;
    let records: Vec<(AttributedGraph, FactorLabel)> = (0..config.num_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let label = sample_levels(&mut rng, config);
            let n = config.n;
            let neighbors = label.a as usize;
            let p = label.c / 10.0;
            let mut adj = ring_lattice(n, neighbors);
            // Rewire one lattice edge at a time; the replacement endpoint
            // must be a fresh non-self target so the edge count is constant.
            for dist in 1..=(neighbors / 2) {
                for u in 0..n {
                    let v = (u + dist) % n;
                    if rng.random::<f64>() < p {
                        let degree_u = (0..n).filter(|&w| adj[u * n + w]).count();
                        if degree_u >= n - 1 {
                            continue; // node saturated, nothing to rewire to
                        }
                        let w = loop {
                            let cand = rng.random_range(0..n);
                            if cand != u && !adj[u * n + cand] {
                                break cand;
                            }
                        };
                        adj[u * n + v] = false;
                        adj[v * n + u] = false;
                        adj[u * n + w] = true;
                        adj[w * n + u] = true;
                    }
                }
            }
            let mut edge = Tensor::<f32>::zeros(vec![n, n, 1]);
            for u in 0..n {
                for v in 0..n {
                    if u != v && adj[u * n + v] {
                        edge.set3(u, v, 0, 1.0);
                    }
                }
            }
            let degrees: Vec<usize> = (0..n)
                .map(|u| (0..n).filter(|&v| adj[u * n + v]).count())
                .collect();
            let node_attr = node_attrs_from(&mut rng, config, &label, &degrees);
            let graph = normalize_graph(
                config,
                RawGraph {
                    edge_attr: edge,
                    node_attr,
                },
            );
            (graph, label)
        })
        .collect();
    Ok(Dataset {
        records,
        gen_config: config.clone(),
        seed,
    })
}

// ---- JSON-Lines serialization ---------------------------------------------

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: MetaBody,
}

#[derive(Serialize, Deserialize)]
struct MetaBody {
    config: GenConfig,
    seed: u64,
    version: String,
    effective_a_levels: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: usize,
    n: usize,
    k: usize,
    d: usize,
    edge: Vec<Vec<Vec<f32>>>,
    node: Vec<Vec<f32>>,
    factors: FactorLabel,
}

/// JSON formatter printing floats with nine significant digits, enough to
/// round-trip any `f32` exactly.
pub(crate) struct SigFigFormatter;

impl serde_json::ser::Formatter for SigFigFormatter {
    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.8e}")
    }

    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.8e}")
    }
}

pub(crate) fn to_jsonl_line<S: Serialize>(value: &S) -> Result<String, std::io::Error> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigFigFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    Ok(String::from_utf8(buf).expect("serde_json produces utf-8"))
}

fn record_to_line(id: usize, graph: &AttributedGraph, label: &FactorLabel) -> RecordLine {
    let (n, k, d) = (graph.n, graph.k, graph.d);
    let mut edge = vec![vec![vec![0f32; k]; n]; n];
    for i in 0..n {
        for j in 0..n {
            for ch in 0..k {
                edge[i][j][ch] = graph.edge_attr.at3(i, j, ch);
            }
        }
    }
    let mut node = vec![vec![0f32; d]; n];
    for i in 0..n {
        for c in 0..d {
            node[i][c] = graph.node_attr.at2(i, c);
        }
    }
    RecordLine {
        id,
        n,
        k,
        d,
        edge,
        node,
        factors: *label,
    }
}

fn record_from_line(line: RecordLine, lineno: usize) -> Result<(AttributedGraph, FactorLabel), DataError> {
    let RecordLine {
        n,
        k,
        d,
        edge,
        node,
        factors,
        ..
    } = line;
    let parse_err = |message: String| DataError::Parse {
        line: lineno,
        message,
    };
    if edge.len() != n || edge.iter().any(|r| r.len() != n || r.iter().any(|e| e.len() != k)) {
        return Err(parse_err(format!("edge tensor is not {n}x{n}x{k}")));
    }
    if node.len() != n || node.iter().any(|r| r.len() != d) {
        return Err(parse_err(format!("node matrix is not {n}x{d}")));
    }
    let mut edge_t = Tensor::<f32>::zeros(vec![n, n, k]);
    for (i, row) in edge.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            for (ch, &v) in cell.iter().enumerate() {
                edge_t.set3(i, j, ch, v);
            }
        }
    }
    let mut node_t = Tensor::<f32>::zeros(vec![n, d]);
    for (i, row) in node.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            node_t.set2(i, c, v);
        }
    }
    Ok((AttributedGraph::new(edge_t, node_t), factors))
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_dataset_to(ds, &mut w)
}

pub fn write_dataset_to(ds: &Dataset, w: &mut impl Write) -> Result<(), DataError> {
    let meta = MetaLine {
        meta: MetaBody {
            config: ds.gen_config.clone(),
            seed: ds.seed,
            version: DATASET_FORMAT_VERSION.to_string(),
            effective_a_levels: ds.gen_config.effective_a_levels(),
        },
    };
    writeln!(w, "{}", to_jsonl_line(&meta)?)?;
    for (id, (graph, label)) in ds.records.iter().enumerate() {
        writeln!(w, "{}", to_jsonl_line(&record_to_line(id, graph, label))?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let file = File::open(path)?;
    read_dataset_from(BufReader::new(file))
}

pub fn read_dataset_from(r: impl BufRead) -> Result<Dataset, DataError> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or(DataError::Parse {
        line: 1,
        message: "missing meta line".into(),
    })?;
    let first = first?;
    let meta: MetaLine = serde_json::from_str(&first).map_err(|e| DataError::Parse {
        line: 1,
        message: format!("bad meta line: {e}"),
    })?;
    if meta.meta.version != DATASET_FORMAT_VERSION {
        return Err(DataError::Parse {
            line: 1,
            message: format!(
                "unsupported dataset version {:?} (expected {:?})",
                meta.meta.version, DATASET_FORMAT_VERSION
            ),
        });
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        records.push(record_from_line(parsed, lineno)?);
    }
    Ok(Dataset {
        records,
        gen_config: meta.meta.config,
        seed: meta.meta.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn er_config_with_a(a: f64, n: usize, samples: usize) -> GenConfig {
        let mut c = GenConfig::er_default(n, samples);
        c.a_grid = vec![a; 10];
        c
    }

    #[test]
    fn complete_graph_limit() {
        let ds = gen_er(&er_config_with_a(1.0, 20, 3), 1).unwrap();
        for (g, _) in &ds.records {
            for i in 0..20 {
                assert_eq!(g.degree(i), 19);
                for j in 0..20 {
                    let expect = if i == j { 0.0 } else { 1.0 };
                    assert_eq!(g.edge_attr.at3(i, j, 0), expect);
                }
            }
        }
    }

    #[test]
    fn empty_graph_limit_f2_is_pure_c() {
        let ds = gen_er(&er_config_with_a(0.0, 20, 5), 2).unwrap();
        let div = ds.gen_config.f2_divisor();
        for (g, label) in &ds.records {
            assert_eq!(g.edge_count(), 0);
            for i in 0..g.n {
                let recon = g.node_attr.at2(i, 1) as f64 * div;
                assert!((recon - 10.0 * label.c).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn er_mean_edge_count_matches_binomial_expectation() {
        let ds = gen_er(&er_config_with_a(0.5, 20, 10_000), 3).unwrap();
        let mean = ds.graphs().map(|g| g.edge_count() as f64).sum::<f64>() / ds.len() as f64;
        // E[M] = C(20, 2) * 0.5 = 95
        assert!((mean - 95.0).abs() < 2.0, "mean edge count {mean}");
    }

    #[test]
    fn er_respects_factor_levels_and_invariants() {
        let ds = gen_er(&GenConfig::er_default(20, 50), 11).unwrap();
        for (g, label) in &ds.records {
            g.validate().unwrap();
            assert_eq!(label.a, ds.gen_config.a_grid[label.a_level as usize]);
            assert_eq!(label.c, ds.gen_config.c_grid[label.c_level as usize]);
        }
    }

    #[test]
    fn f2_prenormalization_identity_holds() {
        let ds = gen_er(&GenConfig::er_default(20, 200), 5).unwrap();
        let div = ds.gen_config.f2_divisor();
        for (g, label) in &ds.records {
            for i in 0..g.n {
                let recon = g.node_attr.at2(i, 1) as f64 * div;
                let expect = g.degree(i) as f64 + 10.0 * label.c;
                assert!(
                    (recon - expect).abs() < 1e-3,
                    "degree+10c identity violated: {recon} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn normalize_maps_extremes_to_unit_interval() {
        let config = GenConfig::er_default(20, 1);
        let raw_edge = Tensor::<f32>::zeros(vec![20, 20, 1]);
        let mut attrs = vec![[0.5f64, 0.0f64]; 20];
        attrs[0] = [0.5, 119.0];
        attrs[1] = [0.5, 29.0];
        let g = normalize_graph(
            &config,
            RawGraph {
                edge_attr: raw_edge,
                node_attr: attrs,
            },
        );
        assert_eq!(g.node_attr.at2(0, 1), 1.0);
        assert_eq!(g.node_attr.at2(2, 1), 0.0);
        assert!((g.node_attr.at2(1, 1) as f64 - 29.0 / 119.0).abs() < 1e-6);
    }

    #[test]
    fn unrewired_ring_lattice_has_constant_degree() {
        // p = 0 is exactly the bare lattice (c = 0 is disabled in the grid,
        // so the lattice is checked directly).
        let n = 20;
        let adj = ring_lattice(n, 4);
        for u in 0..n {
            let deg = (0..n).filter(|&v| adj[u * n + v]).count();
            assert_eq!(deg, 4);
        }
    }

    #[test]
    fn ws_edge_count_invariant_across_levels() {
        let ds = gen_ws(&GenConfig::ws_default(20, 100), 13).unwrap();
        for (g, label) in &ds.records {
            let expect = 20 * (label.a as usize) / 2;
            assert_eq!(g.edge_count(), expect);
            g.validate().unwrap();
        }
    }

    #[test]
    fn ws_lowest_c_level_rewires_at_rate_point_one() {
        // Count edges that left the ring lattice across 1000 graphs at the
        // lowest c level: expect about p * E = 0.1 * 40 = 4 per graph.
        let mut config = GenConfig::ws_default(20, 1000);
        config.a_grid = vec![4.0; 10];
        config.c_grid = vec![1.0; 10];
        let ds = gen_ws(&config, 17).unwrap();
        let n = 20usize;
        let mut lattice = vec![false; n * n];
        for dist in 1..=2 {
            for u in 0..n {
                let v = (u + dist) % n;
                lattice[u * n + v] = true;
                lattice[v * n + u] = true;
            }
        }
        let mut moved = 0usize;
        for (g, _) in &ds.records {
            for u in 0..n {
                for v in (u + 1)..n {
                    if g.has_edge(u, v) && !lattice[u * n + v] {
                        moved += 1;
                    }
                }
            }
        }
        let per_graph = moved as f64 / ds.len() as f64;
        assert!(
            (3.2..=4.8).contains(&per_graph),
            "rewired edges per graph {per_graph}, expected about 4"
        );
    }

    #[test]
    fn ws_odd_neighbor_count_is_config_error() {
        let mut config = GenConfig::ws_default(20, 1);
        config.a_grid[0] = 3.0;
        assert!(matches!(gen_ws(&config, 0), Err(DataError::Config(_))));
    }

    #[test]
    fn er_bad_grid_is_config_error() {
        let mut config = GenConfig::er_default(20, 1);
        config.a_grid = vec![0.5; 9];
        assert!(matches!(gen_er(&config, 0), Err(DataError::Config(_))));
        let mut config = GenConfig::er_default(20, 1);
        config.a_grid[3] = 1.5;
        assert!(matches!(gen_er(&config, 0), Err(DataError::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let config = GenConfig::er_default(20, 40);
        let a = gen_er(&config, 99).unwrap();
        let b = gen_er(&config, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn roundtrip_preserves_dataset_exactly() {
        let ds = gen_er(&GenConfig::er_default(12, 25), 21).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&ds, &mut buf).unwrap();
        let back = read_dataset_from(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn empty_dataset_keeps_meta_line() {
        let ds = Dataset {
            records: Vec::new(),
            gen_config: GenConfig::er_default(20, 0),
            seed: 4,
        };
        let mut buf = Vec::new();
        write_dataset_to(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("{\"meta\""));
        let back = read_dataset_from(std::io::Cursor::new(&buf)).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn malformed_record_names_line_number() {
        let ds = gen_er(&GenConfig::er_default(6, 2), 1).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&ds, &mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("{\"id\": 99, broken\n");
        let err = read_dataset_from(std::io::Cursor::new(text.as_bytes())).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn serialized_floats_use_nine_significant_digits() {
        let ds = gen_er(&GenConfig::er_default(6, 1), 1).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let record = text.lines().nth(1).unwrap();
        assert!(
            record.contains("e-") || record.contains("e0") || record.contains("e1"),
            "expected scientific notation in {record}"
        );
    }
}
