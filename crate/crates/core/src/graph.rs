//! Geometric graph construction from point clouds.

use std::collections::HashSet;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pointcloud::{Point3, PointCloud};
use crate::spatial::GridIndex;
use crate::tensor::Tensor;

/// Directed edges in compressed form, grouped by destination node.
/// Sources of each destination are stored in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    pub offsets: Vec<usize>,
    pub sources: Vec<usize>,
}

impl Adjacency {
    /// `lists[i]` holds the sources of the edges ending at `i`.
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut sources = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        for mut l in lists {
            l.sort_unstable();
            sources.extend(l);
            offsets.push(sources.len());
        }
        Self { offsets, sources }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn edge_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn sources_of(&self, i: usize) -> &[usize] {
        &self.sources[self.edge_range(i)]
    }

    /// Destination node of every edge, in edge order.
    pub fn destinations(&self) -> Vec<usize> {
        (0..self.num_nodes())
            .flat_map(|i| std::iter::repeat_n(i, self.in_degree(i)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EdgePolicy {
    /// Connect every node within `r_g` meters (inclusive).
    Radius(f64),
    /// Connect the `k` nearest nodes.
    Knn(usize),
}

impl EdgePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EdgePolicy::Radius(r) if !(r > 0.0 && r.is_finite()) => {
                Err(Error::Config(format!("graph radius must be positive, got {r}")))
            }
            EdgePolicy::Knn(0) => Err(Error::Config("k must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttrMode {
    Cartesian,
    Spherical,
    Both,
}

impl AttrMode {
    pub fn dim(self) -> usize {
        match self {
            AttrMode::Cartesian | AttrMode::Spherical => 3,
            AttrMode::Both => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttrMode::Cartesian => "cartesian",
            AttrMode::Spherical => "spherical",
            AttrMode::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cartesian" => Some(AttrMode::Cartesian),
            "spherical" => Some(AttrMode::Spherical),
            "both" => Some(AttrMode::Both),
            _ => None,
        }
    }
}

/// `(ρ, θ, φ)`: norm, azimuth `atan2(Δy, Δx)`, inclination `arccos(Δz / ρ)`.
/// The zero offset maps to `(0, 0, 0)`.
pub fn spherical(delta: Point3) -> [f64; 3] {
    let rho = (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt();
    if rho == 0.0 {
        return [0.0; 3];
    }
    let theta = delta[1].atan2(delta[0]);
    let phi = (delta[2] / rho).clamp(-1.0, 1.0).acos();
    [rho, theta, phi]
}

/// Attribute vector of an edge with offset `delta = p_source − p_destination`.
pub fn edge_attributes(delta: Point3, mode: AttrMode) -> Vec<f64> {
    match mode {
        AttrMode::Cartesian => delta.to_vec(),
        AttrMode::Spherical => spherical(delta).to_vec(),
        AttrMode::Both => {
            let mut v = delta.to_vec();
            v.extend(spherical(delta));
            v
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeometricGraph {
    pub positions: Vec<Point3>,
    /// Sample membership; non-decreasing so every sample is a contiguous block.
    pub batch: Vec<usize>,
    pub num_samples: usize,
    pub adjacency: Arc<Adjacency>,
    /// `E × a` edge attributes, in edge order.
    pub edge_attrs: Tensor,
    /// `N × d` node features.
    pub node_features: Tensor,
    pub attr_mode: AttrMode,
    /// Nodes whose kNN list had to be padded because the sample was too small.
    pub padded_nodes: usize,
}

impl GeometricGraph {
    pub fn num_nodes(&self) -> usize {
        self.positions.len()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.num_edges()
    }

    /// Node range of each sample.
    pub fn sample_ranges(&self) -> Vec<Range<usize>> {
        sample_ranges(&self.batch, self.num_samples)
    }

    /// Build edges and attributes for positions grouped by sample.
    /// Edges never cross samples. Node features start at the constant 1.
    pub fn build(
        positions: Vec<Point3>,
        batch: Vec<usize>,
        num_samples: usize,
        policy: EdgePolicy,
        attr_mode: AttrMode,
    ) -> Result<Self> {
        policy.validate()?;
        if positions.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if batch.len() != positions.len() {
            return Err(Error::Shape {
                op: "graph build",
                left: vec![positions.len()],
                right: vec![batch.len()],
            });
        }
        if batch.windows(2).any(|w| w[1] < w[0]) || batch.iter().any(|&b| b >= num_samples) {
            return Err(Error::Structure("batch ids must be sorted and below the sample count".into()));
        }
        let mut lists: Vec<Vec<usize>> = Vec::with_capacity(positions.len());
        let mut padded_nodes = 0;
        for range in sample_ranges(&batch, num_samples) {
            if range.is_empty() {
                return Err(Error::Structure("sample without nodes".into()));
            }
            let pts = &positions[range.clone()];
            let base = range.start;
            match policy {
                EdgePolicy::Radius(r) => {
                    let index = GridIndex::build(pts, r)?;
                    for i in 0..pts.len() {
                        lists.push(index.radius_neighbors(i, r).into_iter().map(|j| j + base).collect());
                    }
                }
                EdgePolicy::Knn(k) => {
                    let index = GridIndex::build(pts, knn_cell_size(pts, k))?;
                    for i in 0..pts.len() {
                        let nb = index.knn_neighbors(i, k);
                        padded_nodes += nb.padded as usize;
                        lists.push(nb.indices.into_iter().map(|j| j + base).collect());
                    }
                }
            }
        }
        let adjacency = Adjacency::from_lists(lists);
        let edge_attrs = compute_edge_attrs(&positions, &adjacency, attr_mode);
        let n = positions.len();
        Ok(Self {
            positions,
            batch,
            num_samples,
            adjacency: Arc::new(adjacency),
            edge_attrs,
            node_features: Tensor::full(&[n, 1], 1.0),
            attr_mode,
            padded_nodes,
        })
    }
}

/// Single-sample graph from a point cloud.
pub fn construct_graph(pc: &PointCloud, policy: EdgePolicy, attr_mode: AttrMode) -> Result<GeometricGraph> {
    let n = pc.len();
    GeometricGraph::build(pc.points.clone(), vec![0; n], 1, policy, attr_mode)
}

/// Disjoint union of several clouds, sample `b` taking batch id `b`.
pub fn construct_batch_graph(
    clouds: &[&PointCloud],
    policy: EdgePolicy,
    attr_mode: AttrMode,
) -> Result<GeometricGraph> {
    let mut positions = Vec::new();
    let mut batch = Vec::new();
    for (b, pc) in clouds.iter().enumerate() {
        if pc.is_empty() {
            return Err(Error::EmptyCloud);
        }
        positions.extend_from_slice(&pc.points);
        batch.extend(std::iter::repeat_n(b, pc.len()));
    }
    GeometricGraph::build(positions, batch, clouds.len(), policy, attr_mode)
}

pub fn compute_edge_attrs(positions: &[Point3], adj: &Adjacency, mode: AttrMode) -> Tensor {
    let a = mode.dim();
    let mut data = Vec::with_capacity(adj.num_edges() * a);
    for i in 0..adj.num_nodes() {
        for &j in adj.sources_of(i) {
            let (s, d) = (positions[j], positions[i]);
            data.extend(edge_attributes([s[0] - d[0], s[1] - d[1], s[2] - d[2]], mode));
        }
    }
    Tensor::new(vec![adj.num_edges(), a], data).expect("edge attribute shape")
}

pub(crate) fn sample_ranges(batch: &[usize], num_samples: usize) -> Vec<Range<usize>> {
    let mut ranges = Vec::with_capacity(num_samples);
    let mut start = 0;
    for b in 0..num_samples {
        let end = start + batch[start..].iter().take_while(|&&x| x == b).count();
        ranges.push(start..end);
        start = end;
    }
    ranges
}

/// Cell size giving roughly `k` points per cell for a surface-like cloud.
fn knn_cell_size(points: &[Point3], k: usize) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let size = extent * (k as f64 / points.len() as f64).sqrt();
    if !(size.is_finite() && size > 1e-6) {
        return 1.0;
    }
    // Volume-filling clouds leave these cells nearly empty; grow them once.
    let occupied: HashSet<[i64; 3]> = points
        .iter()
        .map(|p| p.map(|v| (v / size).floor() as i64))
        .collect();
    let per_cell = points.len() as f64 / occupied.len() as f64;
    if per_cell < k as f64 / 2.0 {
        size * (k as f64 / per_cell).cbrt()
    } else {
        size
    }
}
