//! Uniform-grid spatial index for fixed-radius and k-nearest-neighbour queries.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::pointcloud::Point3;

pub type Cell = [i64; 3];

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Points binned by `floor(p / cell_size)`.
#[derive(Clone, Debug)]
pub struct GridIndex<'a> {
    cell_size: f64,
    cells: HashMap<Cell, Vec<usize>>,
    points: &'a [Point3],
    lo: Cell,
    hi: Cell,
}

/// Result of a kNN query. `indices` holds the neighbours by increasing
/// distance followed by the query point itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnNeighbors {
    pub indices: Vec<usize>,
    /// Fewer than `k` other points exist; every available point was used.
    pub padded: bool,
}

impl<'a> GridIndex<'a> {
    pub fn build(points: &'a [Point3], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Config(format!("cell size must be positive, got {cell_size}")));
        }
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data {
                    index: i,
                    reason: format!("non-finite point {p:?}"),
                });
            }
            let c = cell_of(p, cell_size);
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
            cells.entry(c).or_default().push(i);
        }
        Ok(Self {
            cell_size,
            cells,
            points,
            lo,
            hi,
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, p: &Point3) -> Cell {
        cell_of(p, self.cell_size)
    }

    pub fn points(&self) -> &'a [Point3] {
        self.points
    }

    /// Indices of all points within distance `r` (inclusive) of `q`, ascending.
    pub fn radius_query(&self, q: &Point3, r: f64) -> Vec<usize> {
        let r2 = r * r;
        let reach = (r / self.cell_size).ceil() as i64;
        let c = self.cell(q);
        let mut out = Vec::new();
        self.for_each_bucket(c, reach, |bucket| {
            out.extend(bucket.iter().copied().filter(|&j| dist2(&self.points[j], q) <= r2));
        });
        out.sort_unstable();
        out
    }

    /// Every point `j` with `‖p_j − p_i‖ ≤ r`, including `i`, ascending.
    pub fn radius_neighbors(&self, i: usize, r: f64) -> Vec<usize> {
        self.radius_query(&self.points[i], r)
    }

    /// The `k` nearest other points of `i` (ties by ascending index) followed by `i`.
    pub fn knn_neighbors(&self, i: usize, k: usize) -> KnnNeighbors {
        let q = &self.points[i];
        let c = self.cell(q);
        let max_reach = (0..3)
            .map(|a| (c[a] - self.lo[a]).max(self.hi[a] - c[a]))
            .max()
            .unwrap_or(0)
            .max(1);
        let mut reach = 1i64;
        loop {
            let mut cand: Vec<(f64, usize)> = Vec::new();
            self.for_each_bucket(c, reach, |bucket| {
                cand.extend(
                    bucket
                        .iter()
                        .filter(|&&j| j != i)
                        .map(|&j| (dist2(&self.points[j], q), j)),
                );
            });
            cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            // Every point within reach·cell_size of q lies inside the scanned cube.
            let safe = (reach as f64 * self.cell_size).powi(2);
            let complete = cand.len() >= k && cand[k - 1].0 < safe;
            if complete || reach >= max_reach {
                let padded = cand.len() < k;
                let mut indices: Vec<usize> = cand.into_iter().take(k).map(|(_, j)| j).collect();
                indices.push(i);
                return KnnNeighbors { indices, padded };
            }
            reach = (reach * 2).min(max_reach);
        }
    }
}

impl GridIndex<'_> {
    /// Visit every occupied cell within Chebyshev distance `reach` of `c`.
    /// Sparse grids are walked by occupied cell instead of by offset.
    fn for_each_bucket(&self, c: Cell, reach: i64, mut f: impl FnMut(&[usize])) {
        let side = (2 * reach + 1) as f64;
        if side * side * side > self.cells.len() as f64 {
            for (cell, bucket) in &self.cells {
                if (0..3).all(|a| (cell[a] - c[a]).abs() <= reach) {
                    f(bucket);
                }
            }
            return;
        }
        for dz in -reach..=reach {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if let Some(bucket) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        f(bucket);
                    }
                }
            }
        }
    }
}

fn cell_of(p: &Point3, cell_size: f64) -> Cell {
    [
        (p[0] / cell_size).floor() as i64,
        (p[1] / cell_size).floor() as i64,
        (p[2] / cell_size).floor() as i64,
    ]
}
