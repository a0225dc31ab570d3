//! Voxel-grid graph pooling and the per-sample average readout.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{sample_ranges, AttrMode, EdgePolicy, GeometricGraph};
use crate::pointcloud::Point3;
use crate::spatial::Cell;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Voxel membership of every node. Voxels are numbered sample by sample,
/// in order of their lowest member index.
#[derive(Clone, Debug)]
pub struct VoxelPlan {
    pub assignment: Arc<Vec<usize>>,
    pub centroids: Vec<Point3>,
    pub batch: Vec<usize>,
    pub num_samples: usize,
}

impl VoxelPlan {
    pub fn num_voxels(&self) -> usize {
        self.centroids.len()
    }

    /// Bin `positions` into cubes of edge `r_p` anchored at the origin,
    /// separately per sample.
    pub fn build(positions: &[Point3], batch: &[usize], num_samples: usize, r_p: f64) -> Result<Self> {
        if !(r_p > 0.0 && r_p.is_finite()) {
            return Err(Error::Config(format!("pooling radius must be positive, got {r_p}")));
        }
        let mut assignment = vec![0; positions.len()];
        let mut sums: Vec<([f64; 3], usize)> = Vec::new();
        let mut out_batch = Vec::new();
        for (b, range) in sample_ranges(batch, num_samples).into_iter().enumerate() {
            let mut ids: HashMap<Cell, usize> = HashMap::new();
            for i in range {
                let p = positions[i];
                let cell = [0, 1, 2].map(|a| (p[a] / r_p).floor() as i64);
                let id = *ids.entry(cell).or_insert_with(|| {
                    sums.push(([0.0; 3], 0));
                    out_batch.push(b);
                    sums.len() - 1
                });
                assignment[i] = id;
                let s = &mut sums[id];
                for a in 0..3 {
                    s.0[a] += p[a];
                }
                s.1 += 1;
            }
        }
        let centroids = sums
            .into_iter()
            .map(|(s, c)| s.map(|v| v / c as f64))
            .collect();
        Ok(Self {
            assignment: Arc::new(assignment),
            centroids,
            batch: out_batch,
            num_samples,
        })
    }

    /// Graph over the voxel centroids, rebuilt with `policy`.
    pub fn rebuild(&self, policy: EdgePolicy, attr_mode: AttrMode) -> Result<GeometricGraph> {
        GeometricGraph::build(
            self.centroids.clone(),
            self.batch.clone(),
            self.num_samples,
            policy,
            attr_mode,
        )
    }

    /// Differentiable feature reduction onto the voxels.
    pub fn pool_features(&self, tape: &mut Tape, x: Var, mode: PoolMode) -> Result<Var> {
        match mode {
            PoolMode::Max => tape.segment_max(x, &self.assignment, self.num_voxels()),
            PoolMode::Avg => tape.segment_mean(x, &self.assignment, self.num_voxels()),
        }
    }
}

/// Replace the points of every occupied voxel by their centroid, pool the
/// member features, and rebuild a radius graph with `r_g_next`.
pub fn voxel_downsample(
    g: &GeometricGraph,
    r_p: f64,
    mode: PoolMode,
    r_g_next: f64,
    attr_mode: AttrMode,
) -> Result<GeometricGraph> {
    let plan = VoxelPlan::build(&g.positions, &g.batch, g.num_samples, r_p)?;
    let mut out = plan.rebuild(EdgePolicy::Radius(r_g_next), attr_mode)?;
    let mut tape = Tape::new();
    let x = tape.leaf(g.node_features.clone(), false);
    let pooled = plan.pool_features(&mut tape, x, mode)?;
    out.node_features = tape.value(pooled).clone();
    Ok(out)
}

/// Mean node feature of each sample, `[B × d]`.
pub fn global_average_readout(g: &GeometricGraph) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(g.node_features.clone(), false);
    let out = readout(&mut tape, x, &g.batch, g.num_samples)?;
    Ok(tape.value(out).clone())
}

/// Tape form of [`global_average_readout`].
pub fn readout(tape: &mut Tape, x: Var, batch: &[usize], num_samples: usize) -> Result<Var> {
    tape.segment_mean(x, &Arc::new(batch.to_vec()), num_samples)
        .map_err(|e| match e {
            Error::Structure(_) => Error::Structure("readout over a sample without nodes".into()),
            other => other,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::construct_graph;
    use crate::pointcloud::PointCloud;

    fn graph_with_features(points: Vec<Point3>, features: Vec<Vec<f64>>) -> GeometricGraph {
        let pc = PointCloud::new(points, None);
        let mut g = construct_graph(&pc, EdgePolicy::Radius(0.05), AttrMode::Spherical).unwrap();
        g.node_features = Tensor::from_rows(&features);
        g
    }

    #[test]
    fn two_points_one_voxel() {
        let g = graph_with_features(
            vec![[0.01, 0.02, 0.03], [0.05, 0.06, 0.07]],
            vec![vec![1.0, 5.0], vec![3.0, 2.0]],
        );
        let out = voxel_downsample(&g, 0.1, PoolMode::Max, 0.2, AttrMode::Spherical).unwrap();
        assert_eq!(out.num_nodes(), 1);
        let c = out.positions[0];
        for (a, b) in c.iter().zip([0.03, 0.04, 0.05]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(out.node_features.data(), &[3.0, 5.0]);
        let avg = voxel_downsample(&g, 0.1, PoolMode::Avg, 0.2, AttrMode::Spherical).unwrap();
        assert_eq!(avg.node_features.data(), &[2.0, 3.5]);
    }

    #[test]
    fn isolated_point_survives() {
        let g = graph_with_features(
            vec![[0.01, 0.01, 0.01], [0.55, 0.55, 0.55]],
            vec![vec![4.0], vec![-2.0]],
        );
        let out = voxel_downsample(&g, 0.1, PoolMode::Max, 0.2, AttrMode::Cartesian).unwrap();
        assert_eq!(out.num_nodes(), 2);
        assert_eq!(out.positions[1], [0.55, 0.55, 0.55]);
        assert_eq!(out.node_features.data(), &[4.0, -2.0]);
    }

    #[test]
    fn readout_means() {
        let g = graph_with_features(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![vec![2.0], vec![4.0]]);
        assert_eq!(global_average_readout(&g).unwrap().data(), &[3.0]);
        let single = graph_with_features(vec![[0.0; 3]], vec![vec![7.5, -1.0]]);
        assert_eq!(global_average_readout(&single).unwrap().data(), &[7.5, -1.0]);
    }

    #[test]
    fn rejects_bad_radius() {
        let g = graph_with_features(vec![[0.0; 3]], vec![vec![1.0]]);
        assert!(voxel_downsample(&g, 0.0, PoolMode::Max, 0.1, AttrMode::Spherical).is_err());
    }
}
