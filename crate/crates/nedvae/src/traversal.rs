//! Latent traversals and effect-profile reports.
//!
//! A traversal decodes a base latent code repeatedly while sweeping one
//! dimension of one group across a value grid, with the node assignment
//! vector pinned so every visual change is attributable to the swept
//! dimension. Effect profiles quantify what the sweep does to summary
//! statistics via Spearman rank correlations.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::graphdata::{AttributedGraph, Dataset};
use crate::model::{LatentCode, LatentGroup, Model, NodeAssignment};
use crate::tape::TapeError;
use crate::tensor::Tensor;

#[derive(Error, Debug)]
pub enum TraversalError {
    #[error("target dim {dim} out of range for group {group} of size {size}")]
    DimOutOfRange {
        group: LatentGroup,
        dim: usize,
        size: usize,
    },
    #[error("value grid is empty")]
    EmptyGrid,
    #[error("base sample index {0} beyond dataset of {1} records")]
    SampleOutOfRange(usize, usize),
    #[error("base code requests a dataset sample but no dataset was given")]
    MissingDataset,
    #[error(transparent)]
    Forward(#[from] TapeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where the untouched latent entries come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseCode {
    Zeros,
    /// Posterior means of the given dataset record.
    Sample(usize),
}

#[derive(Clone, Debug)]
pub struct TraversalSpec {
    pub base: BaseCode,
    pub group: LatentGroup,
    pub dim: usize,
    pub grid: Vec<f64>,
    pub s_seed: u64,
}

impl TraversalSpec {
    /// The default sweep: 11 points over `[0, 10]`.
    pub fn default_grid() -> Vec<f64> {
        (0..11).map(|i| i as f64).collect()
    }

    /// Alternative sweep covering the prior's bulk: 11 points over `[-3, 3]`.
    pub fn prior_grid() -> Vec<f64> {
        (0..11).map(|i| -3.0 + 0.6 * i as f64).collect()
    }

    pub fn new(group: LatentGroup, dim: usize) -> Self {
        TraversalSpec {
            base: BaseCode::Zeros,
            group,
            dim,
            grid: Self::default_grid(),
            s_seed: 0,
        }
    }
}

fn base_code(
    model: &Model<f32>,
    ds: Option<&Dataset>,
    base: BaseCode,
) -> Result<Vec<f32>, TraversalError> {
    match base {
        BaseCode::Zeros => Ok(vec![0.0; model.config.latent_dim()]),
        BaseCode::Sample(i) => {
            let ds = ds.ok_or(TraversalError::MissingDataset)?;
            if i >= ds.len() {
                return Err(TraversalError::SampleOutOfRange(i, ds.len()));
            }
            let posterior = model.encode(&ds.records[i].0)?;
            Ok(posterior.mu_concat())
        }
    }
}

/// Decode the spec's grid, returning one graph per grid value. All latent
/// entries except the swept one, and the node assignment, stay fixed.
pub fn traverse(
    model: &Model<f32>,
    ds: Option<&Dataset>,
    spec: &TraversalSpec,
) -> Result<Vec<AttributedGraph>, TraversalError> {
    if spec.grid.is_empty() {
        return Err(TraversalError::EmptyGrid);
    }
    let range = model.config.group_range(spec.group);
    if spec.dim >= range.len() {
        return Err(TraversalError::DimOutOfRange {
            group: spec.group,
            dim: spec.dim,
            size: range.len(),
        });
    }
    let base = base_code(model, ds, spec.base)?;
    let assignment = NodeAssignment::<f32>::draw(model.config.n, spec.s_seed);
    let target = range.start + spec.dim;
    let mut out = Vec::with_capacity(spec.grid.len());
    for &value in &spec.grid {
        let mut z = base.clone();
        z[target] = value as f32;
        let latent = LatentCode::from_concat(&model.config, &z);
        let (fhat, ehat) = model.decode(&latent, &assignment)?;
        out.push(AttributedGraph::new(to_f32(&ehat), to_f32(&fhat)));
    }
    Ok(out)
}

fn to_f32(t: &Tensor<f32>) -> Tensor<f32> {
    t.clone()
}

/// Summary statistics of one decoded graph: mean first node attribute, mean
/// second node attribute, and edge density at threshold 0.5.
pub fn graph_stats(graph: &AttributedGraph) -> [f64; 3] {
    let n = graph.n;
    let mut f1 = 0.0;
    let mut f2 = 0.0;
    for i in 0..n {
        f1 += graph.node_attr.at2(i, 0) as f64;
        f2 += graph.node_attr.at2(i, 1) as f64;
    }
    f1 /= n as f64;
    f2 /= n as f64;
    let mut edges = 0.0;
    let pairs = (n * (n - 1) / 2) as f64;
    for i in 0..n {
        for j in (i + 1)..n {
            if graph.edge_attr.at3(i, j, 0) > 0.5 {
                edges += 1.0;
            }
        }
    }
    [f1, f2, edges / pairs]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    MeanNodeAttr1,
    MeanNodeAttr2,
    EdgeDensity,
}

impl StatKind {
    pub const ALL: [StatKind; 3] = [
        StatKind::MeanNodeAttr1,
        StatKind::MeanNodeAttr2,
        StatKind::EdgeDensity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StatKind::MeanNodeAttr1 => "mean_f1",
            StatKind::MeanNodeAttr2 => "mean_f2",
            StatKind::EdgeDensity => "edge_density",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EffectRow {
    pub group: LatentGroup,
    pub dim: usize,
    pub stat: StatKind,
    pub spearman: f64,
    /// The statistic never moved across the grid; the correlation is
    /// recorded as zero.
    pub constant: bool,
}

#[derive(Clone, Debug)]
pub struct EffectProfile {
    pub grid: Vec<f64>,
    pub rows: Vec<EffectRow>,
}

impl EffectProfile {
    /// Largest `|rho|` among a group's dimensions for one statistic.
    pub fn max_abs(&self, group: LatentGroup, stat: StatKind) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.group == group && r.stat == stat)
            .map(|r| r.spearman.abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "group,dim,stat,spearman,constant")?;
        for row in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.6},{}",
                row.group,
                row.dim,
                row.stat.name(),
                row.spearman,
                row.constant
            )?;
        }
        Ok(())
    }
}

/// Traverse every dimension of every group and correlate the grid with each
/// summary statistic. Requires at least 3 grid points.
pub fn effect_profile(
    model: &Model<f32>,
    ds: Option<&Dataset>,
    base: BaseCode,
    grid: &[f64],
    s_seed: u64,
) -> Result<EffectProfile, TraversalError> {
    if grid.len() < 3 {
        return Err(TraversalError::EmptyGrid);
    }
    let mut rows = Vec::new();
    for group in LatentGroup::ALL {
        let size = model.config.group_range(group).len();
        for dim in 0..size {
            let spec = TraversalSpec {
                base,
                group,
                dim,
                grid: grid.to_vec(),
                s_seed,
            };
            let graphs = traverse(model, ds, &spec)?;
            let stats: Vec<[f64; 3]> = graphs.iter().map(graph_stats).collect();
            for (si, stat) in StatKind::ALL.into_iter().enumerate() {
                let ys: Vec<f64> = stats.iter().map(|s| s[si]).collect();
                let (rho, constant) = spearman(grid, &ys);
                rows.push(EffectRow {
                    group,
                    dim,
                    stat,
                    spearman: rho,
                    constant,
                });
            }
        }
    }
    Ok(EffectProfile {
        grid: grid.to_vec(),
        rows,
    })
}

/// Spearman rank correlation with average ranks for ties. A constant input
/// on either side yields `(0.0, true)`.
pub fn spearman(xs: &[f64], ys: &[f64]) -> (f64, bool) {
    assert_eq!(xs.len(), ys.len(), "spearman: length mismatch");
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx <= 1e-12 || vy <= 1e-12 {
        return (0.0, true);
    }
    (cov / (vx * vy).sqrt(), false)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

// ---- graph dumps ---------------------------------------------------------

/// Ten-step linear colormap from blue to red over `[0, 1]`.
fn colormap(v: f32) -> String {
    let step = ((v * 10.0) as i32).clamp(0, 9);
    let t = step as f64 / 9.0;
    let lerp = |a: u8, b: u8| (a as f64 + t * (b as f64 - a as f64)).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(0x21, 0xb2),
        lerp(0x66, 0x18),
        lerp(0xac, 0x2b)
    )
}

/// DOT rendering: node fill color from the first attribute via the 10-step
/// colormap, node width from the second attribute, edges where the first
/// edge channel exceeds 0.5.
pub fn write_dot(graph: &AttributedGraph, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "graph g {{")?;
    writeln!(w, "  node [style=filled, shape=circle, fixedsize=true];")?;
    for i in 0..graph.n {
        let f1 = graph.node_attr.at2(i, 0);
        let f2 = graph.node_attr.at2(i, 1);
        writeln!(
            w,
            "  n{i} [fillcolor=\"{}\", width={:.3}];",
            colormap(f1),
            0.2 + 0.6 * f2 as f64
        )?;
    }
    for i in 0..graph.n {
        for j in (i + 1)..graph.n {
            if graph.edge_attr.at3(i, j, 0) > 0.5 {
                writeln!(w, "  n{i} -- n{j};")?;
            }
        }
    }
    writeln!(w, "}}")
}

#[derive(Serialize)]
struct TraversalDump {
    id: usize,
    n: usize,
    k: usize,
    d: usize,
    edge: Vec<Vec<Vec<f32>>>,
    node: Vec<Vec<f32>>,
    group: LatentGroup,
    dim: usize,
    value: f64,
}

/// JSON dump for one traversal step, carrying the graph payload in the
/// dataset record layout plus the traversal coordinates.
pub fn write_traversal_json(
    graph: &AttributedGraph,
    id: usize,
    group: LatentGroup,
    dim: usize,
    value: f64,
    w: &mut impl Write,
) -> std::io::Result<()> {
    let (n, k, d) = (graph.n, graph.k, graph.d);
    let mut edge = vec![vec![vec![0f32; k]; n]; n];
    let mut node = vec![vec![0f32; d]; n];
    for i in 0..n {
        for c in 0..d {
            node[i][c] = graph.node_attr.at2(i, c);
        }
        for j in 0..n {
            for ch in 0..k {
                edge[i][j][ch] = graph.edge_attr.at3(i, j, ch);
            }
        }
    }
    let dump = TraversalDump {
        id,
        n,
        k,
        d,
        edge,
        node,
        group,
        dim,
        value,
    };
    let line = crate::graphdata::to_jsonl_line(&dump)?;
    writeln!(w, "{line}")
}
