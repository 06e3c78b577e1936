//! Point-cloud to graph conversion.
//!
//! Neighborhoods are exact k-nearest-neighbour sets (full distance
//! evaluation, no spatial index) with ties broken by lower node index, or are
//! taken verbatim from a predefined adjacency list. Edges are grouped by
//! destination node and ordered by (distance, index) within each
//! neighborhood, so message reduction order is a geometric property of the
//! cloud rather than of its labelling.

use crate::error::{Error, Result};
use crate::fiber::FiberFeature;
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// A point cloud with optional node features and predefined adjacency.
#[derive(Clone, Debug)]
pub struct PointCloud {
    /// `[n, 3]` positions.
    pub positions: Array2<f64>,
    pub features: Option<FiberFeature>,
    pub adjacency: Option<Vec<Vec<usize>>>,
    /// Per-edge scalars aligned with the flattened adjacency (row-major).
    pub edge_scalars: Option<Vec<Vec<f64>>>,
}

impl PointCloud {
    pub fn new(positions: Array2<f64>) -> Result<Self> {
        validate_positions(&positions)?;
        Ok(PointCloud {
            positions,
            features: None,
            adjacency: None,
            edge_scalars: None,
        })
    }

    pub fn n_points(&self) -> usize {
        self.positions.nrows()
    }
}

fn validate_positions(positions: &Array2<f64>) -> Result<()> {
    if positions.ncols() != 3 {
        return Err(Error::invalid("positions must be n x 3"));
    }
    if positions.nrows() < 2 {
        return Err(Error::invalid("point cloud needs at least 2 points"));
    }
    if positions.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("positions".into()));
    }
    Ok(())
}

/// Neighborhood structure plus relative edge geometry.
///
/// Edges are stored grouped by destination: the edges of node `i` occupy
/// `offsets[i]..offsets[i+1]`, each carrying its source node `src[e]` and the
/// relative vector `x_src - x_dst`.
#[derive(Clone, Debug)]
pub struct NeighborGraph {
    n_nodes: usize,
    offsets: Vec<usize>,
    src: Vec<usize>,
    dst: Vec<usize>,
    edge_vec: Array2<f64>,
    edge_len: Vec<f64>,
    edge_scalars: Option<Array2<f64>>,
    degenerate_edges: Vec<usize>,
    /// Warning record when a requested k was clamped to n-1.
    pub clamped_k: Option<(usize, usize)>,
}

impl NeighborGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn src(&self) -> &[usize] {
        &self.src
    }

    pub fn dst(&self) -> &[usize] {
        &self.dst
    }

    /// Neighborhood of node `i` (source indices, self excluded).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.src[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Relative vectors `x_j - x_i` per edge, `[E, 3]`.
    pub fn edge_vectors(&self) -> &Array2<f64> {
        &self.edge_vec
    }

    pub fn edge_lengths(&self) -> &[f64] {
        &self.edge_len
    }

    pub fn edge_scalars(&self) -> Option<&Array2<f64>> {
        self.edge_scalars.as_ref()
    }

    /// Edges flagged as zero-length (coincident endpoints).
    pub fn degenerate_edges(&self) -> &[usize] {
        &self.degenerate_edges
    }

    /// Sorted neighbor index sets, independent of edge ordering.
    pub fn neighbor_sets(&self) -> Vec<Vec<usize>> {
        (0..self.n_nodes)
            .map(|i| {
                let mut v = self.neighbors(i).to_vec();
                v.sort_unstable();
                v
            })
            .collect()
    }
}

/// Exact k-nearest-neighbour graph; ties broken by lower index. A request of
/// `k >= n` is clamped to `n - 1` and recorded on the returned graph.
pub fn knn_neighborhoods(positions: &Array2<f64>, k: usize) -> Result<NeighborGraph> {
    validate_positions(positions)?;
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let n = positions.nrows();
    let k_eff = k.min(n - 1);
    let clamped = if k_eff < k { Some((k, k_eff)) } else { None };

    let neighborhoods: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pi = [positions[[i, 0]], positions[[i, 1]], positions[[i, 2]]];
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = positions[[j, 0]] - pi[0];
                    let dy = positions[[j, 1]] - pi[1];
                    let dz = positions[[j, 2]] - pi[2];
                    (dx * dx + dy * dy + dz * dz, j)
                })
                .collect();
            cand.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            cand.truncate(k_eff);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();

    let mut graph = assemble(positions, &neighborhoods, None)?;
    graph.clamped_k = clamped;
    Ok(graph)
}

/// Graph from predefined neighborhoods (e.g. molecular bonds), bypassing kNN.
/// Self-edges are rejected; edge scalars, when given, must align with the
/// flattened adjacency.
pub fn from_adjacency(
    positions: &Array2<f64>,
    adjacency: &[Vec<usize>],
    edge_scalars: Option<&[Vec<f64>]>,
) -> Result<NeighborGraph> {
    validate_positions(positions)?;
    let n = positions.nrows();
    if adjacency.len() != n {
        return Err(Error::invalid(format!(
            "adjacency has {} rows for {n} points",
            adjacency.len()
        )));
    }
    for (i, nbrs) in adjacency.iter().enumerate() {
        if nbrs.is_empty() {
            return Err(Error::config(
                "adjacency",
                format!("node {i} has an empty neighborhood"),
            ));
        }
        for &j in nbrs {
            if j == i {
                return Err(Error::invalid(format!(
                    "adjacency contains self-edge at node {i}"
                )));
            }
            if j >= n {
                return Err(Error::invalid(format!(
                    "adjacency index {j} out of range at node {i}"
                )));
            }
        }
    }
    assemble(positions, adjacency, edge_scalars)
}

fn assemble(
    positions: &Array2<f64>,
    neighborhoods: &[Vec<usize>],
    edge_scalars: Option<&[Vec<f64>]>,
) -> Result<NeighborGraph> {
    let n = neighborhoods.len();
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (i, nbrs) in neighborhoods.iter().enumerate() {
        for &j in nbrs {
            src.push(j);
            dst.push(i);
        }
        offsets.push(src.len());
    }
    let e = src.len();
    let mut edge_vec = Array2::zeros((e, 3));
    let mut edge_len = Vec::with_capacity(e);
    let mut degenerate = Vec::new();
    for idx in 0..e {
        let (i, j) = (dst[idx], src[idx]);
        let mut acc = 0.0;
        for c in 0..3 {
            let d = positions[[j, c]] - positions[[i, c]];
            edge_vec[[idx, c]] = d;
            acc += d * d;
        }
        let len = acc.sqrt();
        if len == 0.0 {
            degenerate.push(idx);
        }
        edge_len.push(len);
    }
    let scal = match edge_scalars {
        None => None,
        Some(rows) => {
            let flat: Vec<&Vec<f64>> = rows.iter().collect();
            if flat.len() != e {
                return Err(Error::invalid(format!(
                    "{} edge scalar rows for {e} edges",
                    flat.len()
                )));
            }
            let width = flat.first().map(|r| r.len()).unwrap_or(0);
            if flat.iter().any(|r| r.len() != width) {
                return Err(Error::invalid("ragged edge scalar rows"));
            }
            let mut a = Array2::zeros((e, width));
            for (r, row) in flat.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    a[[r, c]] = *v;
                }
            }
            Some(a)
        }
    };
    Ok(NeighborGraph {
        n_nodes: n,
        offsets,
        src,
        dst,
        edge_vec,
        edge_len,
        edge_scalars: scal,
        degenerate_edges: degenerate,
        clamped_k: None,
    })
}

/// Drops exact duplicate points, keeping the first occurrence. Returns the
/// deduplicated positions and the kept original indices.
pub fn dedupe_points(positions: &Array2<f64>) -> (Array2<f64>, Vec<usize>) {
    let n = positions.nrows();
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..n {
        let dup = kept.iter().any(|&j| {
            (0..3).all(|c| positions[[j, c]] == positions[[i, c]])
        });
        if !dup {
            kept.push(i);
        }
    }
    let mut out = Array2::zeros((kept.len(), 3));
    for (r, &i) in kept.iter().enumerate() {
        for c in 0..3 {
            out[[r, c]] = positions[[i, c]];
        }
    }
    (out, kept)
}

/// Symmetry-breaking inputs for gravity-aligned data: appends the absolute
/// and mean-centered z-coordinates as two degree-0 channels and the in-plane
/// position `(x, y, 0)` as one degree-1 channel (stored in m-order, i.e.
/// `(y, 0, x)`).
pub fn plus_z_features(positions: &Array2<f64>, base: &FiberFeature) -> Result<FiberFeature> {
    let n = positions.nrows();
    if base.n_nodes() != n {
        return Err(Error::invalid("feature node count differs from positions"));
    }
    let mean_z = positions.column(2).sum() / n as f64;
    let mut deg0 = Array3::zeros((n, 2, 1));
    let mut deg1 = Array3::zeros((n, 1, 3));
    for i in 0..n {
        let z = positions[[i, 2]];
        deg0[[i, 0, 0]] = z;
        deg0[[i, 1, 0]] = z - mean_z;
        deg1[[i, 0, 0]] = positions[[i, 1]]; // m = -1 <-> y
        deg1[[i, 0, 1]] = 0.0; // m =  0 <-> z, suppressed
        deg1[[i, 0, 2]] = positions[[i, 0]]; // m = +1 <-> x
    }
    let mut out = base.clone();
    out.append_channels(0, deg0)?;
    out.append_channels(1, deg1)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSON-lines input format
// ---------------------------------------------------------------------------

/// One point cloud per line: positions, optional per-node features keyed by
/// degree (`"0"` maps to `[n][c]`, `"l"` to `[n][c][2l+1]`), optional
/// adjacency, optional edge scalars aligned with the flattened adjacency.
#[derive(Debug, Serialize, Deserialize)]
pub struct PointCloudRecord {
    pub positions: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<std::collections::BTreeMap<String, serde_json::Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_scalars: Option<Vec<Vec<f64>>>,
}

impl PointCloudRecord {
    pub fn into_cloud(self) -> Result<PointCloud> {
        let n = self.positions.len();
        let mut positions = Array2::zeros((n, 3));
        for (i, p) in self.positions.iter().enumerate() {
            for c in 0..3 {
                positions[[i, c]] = p[c];
            }
        }
        let features = match self.features {
            None => None,
            Some(map) => {
                let mut parts = Vec::new();
                for (key, value) in map {
                    let degree: u32 = key.parse().map_err(|_| {
                        Error::malformed("point cloud features", format!("bad degree key `{key}`"))
                    })?;
                    parts.push((degree, parse_degree_block(degree, &value, n)?));
                }
                parts.sort_by_key(|&(l, _)| l);
                Some(FiberFeature::from_parts(parts)?)
            }
        };
        let mut cloud = PointCloud::new(positions)?;
        cloud.features = features;
        cloud.adjacency = self.adjacency;
        cloud.edge_scalars = self.edge_scalars;
        Ok(cloud)
    }
}

fn parse_degree_block(degree: u32, value: &serde_json::Value, n: usize) -> Result<Array3<f64>> {
    let m = 2 * degree as usize + 1;
    let rows = value
        .as_array()
        .ok_or_else(|| Error::malformed("features", "degree block is not an array"))?;
    if rows.len() != n {
        return Err(Error::malformed(
            "features",
            format!("degree {degree} block has {} rows for {n} points", rows.len()),
        ));
    }
    let mut per_node: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for row in rows {
        let chans = row
            .as_array()
            .ok_or_else(|| Error::malformed("features", "node row is not an array"))?;
        let mut node = Vec::with_capacity(chans.len());
        for ch in chans {
            let vals: Vec<f64> = if degree == 0 {
                match ch.as_f64() {
                    Some(v) => vec![v],
                    None => parse_f64_array(ch)?,
                }
            } else {
                parse_f64_array(ch)?
            };
            if vals.len() != m {
                return Err(Error::malformed(
                    "features",
                    format!("degree {degree} channel has length {}, want {m}", vals.len()),
                ));
            }
            node.push(vals);
        }
        per_node.push(node);
    }
    let c = per_node.first().map(|v| v.len()).unwrap_or(0);
    if c == 0 || per_node.iter().any(|v| v.len() != c) {
        return Err(Error::malformed("features", "ragged channel counts"));
    }
    Ok(Array3::from_shape_fn((n, c, m), |(i, ch, mm)| {
        per_node[i][ch][mm]
    }))
}

fn parse_f64_array(v: &serde_json::Value) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| Error::malformed("features", "expected numeric array"))?
        .iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| Error::malformed("features", "expected number"))
        })
        .collect()
}

pub fn read_point_clouds(path: &std::path::Path) -> Result<Vec<PointCloud>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut clouds = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PointCloudRecord = serde_json::from_str(&line).map_err(|e| {
            Error::malformed(format!("{}:{}", path.display(), ln + 1), e.to_string())
        })?;
        clouds.push(rec.into_cloud()?);
    }
    Ok(clouds)
}

pub fn write_point_clouds(path: &std::path::Path, records: &[PointCloudRecord]) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for rec in records {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}
