//! Brute-force oracles and reusable checks shared by the integration tests
//! and the acceptance suite.
#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ragc::agc::{AgcKernel, AgcLayer, BlockOptions, EdgeInput, RagcBlock};
use ragc::autodiff::{gradient_check, GradCheckReport, Mode, Tape, Var};
use ragc::graph::{edge_attributes, AttrMode, EdgePolicy, GeometricGraph};
use ragc::layers::{Forward, Linear, RunningStats};
use ragc::model::{Network, NetworkConfig};
use ragc::pointcloud::{Point3, PointCloud};
use ragc::pool::{PoolMode, VoxelPlan};
use ragc::spatial::{dist2, GridIndex};
use ragc::tensor::{ParamStore, Tensor};
use ragc::train::Metrics;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..extent)))
        .collect()
}

pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

// ---------------------------------------------------------------------------
// Neighbour search
// ---------------------------------------------------------------------------

pub fn brute_radius(points: &[Point3], q: &Point3, r: f64) -> Vec<usize> {
    (0..points.len()).filter(|&j| dist2(&points[j], q) <= r * r).collect()
}

/// `k` nearest others by (distance, index), then `i`.
pub fn brute_knn(points: &[Point3], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..points.len())
        .filter(|&j| j != i)
        .map(|j| (dist2(&points[j], &points[i]), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = d.into_iter().take(k).map(|(_, j)| j).collect();
    out.push(i);
    out
}

/// 1000 points, 100 queries, every radius and k of the grid, several cell
/// sizes. Returns the number of mismatching queries.
pub fn spatial_mismatches(seed: u64) -> usize {
    let mut r = rng(seed);
    let points = uniform_points(&mut r, 1000, 1.0);
    let queries: Vec<usize> = (0..100).map(|_| r.gen_range(0..points.len())).collect();
    let mut bad = 0;
    for radius in [0.05, 0.1, 0.3] {
        for cell in [radius / 2.0, radius, radius * 2.0] {
            let index = GridIndex::build(&points, cell).unwrap();
            for &q in &queries {
                bad += (index.radius_neighbors(q, radius) != brute_radius(&points, &points[q], radius)) as usize;
            }
        }
    }
    for k in [1, 9, 16] {
        for cell in [0.02, 0.1, 0.5] {
            let index = GridIndex::build(&points, cell).unwrap();
            for &q in &queries {
                bad += (index.knn_neighbors(q, k).indices != brute_knn(&points, q, k)) as usize;
            }
        }
    }
    bad
}

// ---------------------------------------------------------------------------
// AGC reference
// ---------------------------------------------------------------------------

pub fn dense(lin: &Linear, store: &ParamStore, input: &[f64]) -> Vec<f64> {
    let w = store.get(lin.w).value.data();
    let b = store.get(lin.b).value.data();
    (0..lin.d_out)
        .map(|o| b[o] + (0..lin.d_in).map(|k| input[k] * w[k * lin.d_out + o]).sum::<f64>())
        .collect()
}

/// `Θ` of one edge as a `d_out × d_in` row-major matrix.
pub fn naive_theta(layer: &AgcLayer, store: &ParamStore, attrs: &[f64]) -> Vec<f64> {
    let mut h = attrs.to_vec();
    for lin in &layer.filter.hidden {
        h = dense(lin, store, &h).into_iter().map(|v| v.max(0.0)).collect();
    }
    dense(&layer.filter.last, store, &h)
}

/// Sources of every destination, found without the spatial index.
pub fn brute_sources(positions: &[Point3], policy: EdgePolicy) -> Vec<Vec<usize>> {
    (0..positions.len())
        .map(|i| {
            let mut s = match policy {
                EdgePolicy::Radius(r) => brute_radius(positions, &positions[i], r),
                EdgePolicy::Knn(k) => brute_knn(positions, i, k.min(positions.len() - 1)),
            };
            s.sort_unstable();
            s
        })
        .collect()
}

/// Explicit loop over nodes and edges, one `Θ` matrix per edge.
pub fn naive_agc(
    layer: &AgcLayer,
    store: &ParamStore,
    positions: &[Point3],
    sources: &[Vec<usize>],
    attr_mode: AttrMode,
    x: &Tensor,
) -> Vec<f64> {
    let (n, d_in) = x.dims2();
    let d_out = layer.d_out;
    let bias = store.get(layer.bias).value.data();
    let mut out = vec![0.0; n * d_out];
    for i in 0..n {
        for &j in &sources[i] {
            let a = edge_attributes(sub(positions[j], positions[i]), attr_mode);
            let theta = naive_theta(layer, store, &a);
            for o in 0..d_out {
                for c in 0..d_in {
                    out[i * d_out + o] += theta[o * d_in + c] * x.data()[j * d_in + c];
                }
            }
        }
        for o in 0..d_out {
            out[i * d_out + o] = out[i * d_out + o] / sources[i].len() as f64 + bias[o];
        }
    }
    out
}

pub fn agc_output(layer: &AgcLayer, store: &ParamStore, g: &GeometricGraph, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let vars = tape.params(store);
    let mut r = rng(0);
    let mut f = Forward {
        tape: &mut tape,
        vars: &vars,
        mode: Mode::Eval,
        running: &[],
        batch_stats: Vec::new(),
        rng: &mut r,
    };
    let xv = f.tape.leaf(x.clone(), false);
    let attrs = f.tape.leaf(g.edge_attrs.clone(), false);
    let edges = EdgeInput {
        adjacency: &g.adjacency,
        attrs,
    };
    let y = layer.forward(&mut f, xv, edges).unwrap();
    tape.value(y).clone()
}

/// Overwrite every parameter with uniform values in `±scale`.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = uniform_tensor(rng, &shape, scale);
    }
}

/// Add uniform noise in `[-scale, scale)` to every parameter.
pub fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

pub struct RandomAgc {
    pub store: ParamStore,
    pub layer: AgcLayer,
    pub graph: GeometricGraph,
    pub policy: EdgePolicy,
    pub x: Tensor,
}

/// A random single-sample graph (N ≤ `max_nodes`), layer (d ≤ 8) and input.
pub fn random_agc(seed: u64, max_nodes: usize, kernel: AgcKernel) -> RandomAgc {
    let mut r = rng(seed);
    let n = r.gen_range(1..=max_nodes);
    let positions = uniform_points(&mut r, n, 1.0);
    let policy = if r.gen_bool(0.5) {
        EdgePolicy::Radius(r.gen_range(0.1..0.6))
    } else {
        EdgePolicy::Knn(r.gen_range(1..=12))
    };
    let attr_mode = [AttrMode::Cartesian, AttrMode::Spherical, AttrMode::Both][r.gen_range(0..3)];
    let hidden: &[usize] = [&[][..], &[4][..], &[3, 5][..]][r.gen_range(0..3)];
    let (d_in, d_out) = (r.gen_range(1..=8), r.gen_range(1..=8));
    let graph = GeometricGraph::build(positions, vec![0; n], 1, policy, attr_mode).unwrap();
    let mut store = ParamStore::new();
    let layer = AgcLayer::new(&mut store, "agc", attr_mode.dim(), hidden, d_in, d_out, kernel, &mut r);
    randomize(&mut store, &mut r, 1.0);
    let x = uniform_tensor(&mut r, &[n, d_in], 1.0);
    RandomAgc {
        store,
        layer,
        graph,
        policy,
        x,
    }
}

/// Largest deviation of both kernels from the naive reference over
/// `graphs` random graphs.
pub fn agc_oracle_max_diff(graphs: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..graphs {
        for kernel in [AgcKernel::Factored, AgcKernel::Materialized] {
            let c = random_agc(1000 + seed, 100, kernel);
            let sources = brute_sources(&c.graph.positions, c.policy);
            let want = naive_agc(&c.layer, &c.store, &c.graph.positions, &sources, c.graph.attr_mode, &c.x);
            let got = agc_output(&c.layer, &c.store, &c.graph, &c.x);
            for (a, b) in got.data().iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Relabel the nodes by a random permutation and compare the permuted
/// outputs. Returns the largest deviation over `graphs` graphs.
pub fn permutation_max_diff(graphs: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..graphs {
        let c = random_agc(5000 + seed, 100, AgcKernel::Factored);
        let n = c.graph.num_nodes();
        let mut r = rng(9000 + seed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        // Node i moves to position perm[i].
        let d_in = c.layer.d_in;
        let mut positions = vec![[0.0; 3]; n];
        let mut x = vec![0.0; n * d_in];
        for i in 0..n {
            positions[perm[i]] = c.graph.positions[i];
            x[perm[i] * d_in..(perm[i] + 1) * d_in].copy_from_slice(c.x.row(i));
        }
        let g2 = GeometricGraph::build(positions, vec![0; n], 1, c.policy, c.graph.attr_mode).unwrap();
        let x2 = Tensor::new(vec![n, d_in], x).unwrap();
        let y = agc_output(&c.layer, &c.store, &c.graph, &c.x);
        let y2 = agc_output(&c.layer, &c.store, &g2, &x2);
        for i in 0..n {
            for (a, b) in y.row(i).iter().zip(y2.row(perm[i])) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Voxel pooling reference
// ---------------------------------------------------------------------------

pub struct BruteVoxels {
    pub members: Vec<Vec<usize>>,
    pub cells: Vec<[i64; 3]>,
    pub batch: Vec<usize>,
}

/// Per-sample floor binning, voxels ordered by their lowest member.
pub fn brute_voxels(positions: &[Point3], batch: &[usize], r_p: f64) -> BruteVoxels {
    let mut out = BruteVoxels {
        members: Vec::new(),
        cells: Vec::new(),
        batch: Vec::new(),
    };
    let mut seen: HashMap<(usize, [i64; 3]), usize> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        let cell = [0, 1, 2].map(|a| (p[a] / r_p).floor() as i64);
        let id = *seen.entry((batch[i], cell)).or_insert_with(|| {
            out.members.push(Vec::new());
            out.cells.push(cell);
            out.batch.push(batch[i]);
            out.members.len() - 1
        });
        out.members[id].push(i);
    }
    out
}

#[derive(Debug, Default)]
pub struct PoolReport {
    pub max_centroid_diff: f64,
    pub max_feature_diff: f64,
    pub violations: Vec<String>,
}

/// Compare [`VoxelPlan`] against brute-force binning on `clouds` random
/// multi-sample clouds.
pub fn pool_oracle(clouds: u64) -> PoolReport {
    let mut rep = PoolReport::default();
    for seed in 0..clouds {
        let mut r = rng(20_000 + seed);
        let samples = r.gen_range(1..=3);
        let mut positions = Vec::new();
        let mut batch = Vec::new();
        for b in 0..samples {
            let n = r.gen_range(1..=120);
            let shift = r.gen_range(-2.0..2.0);
            positions.extend(uniform_points(&mut r, n, 1.0).into_iter().map(|p| p.map(|v| v + shift)));
            batch.extend(std::iter::repeat(b).take(n));
        }
        let r_p = r.gen_range(0.05..0.6);
        let d = r.gen_range(1..=6);
        let n = positions.len();
        let feats = uniform_tensor(&mut r, &[n, d], 1.0);

        let plan = VoxelPlan::build(&positions, &batch, samples, r_p).unwrap();
        let brute = brute_voxels(&positions, &batch, r_p);
        if plan.num_voxels() != brute.members.len() {
            rep.violations
                .push(format!("seed {seed}: {} voxels, oracle {}", plan.num_voxels(), brute.members.len()));
            continue;
        }
        if plan.num_voxels() > n {
            rep.violations.push(format!("seed {seed}: node count grew"));
        }
        let distinct = brute.members.iter().all(|m| m.len() == 1);
        if (plan.num_voxels() == n) != distinct {
            rep.violations.push(format!("seed {seed}: equality iff distinct voxels broken"));
        }
        if plan.batch != brute.batch {
            rep.violations.push(format!("seed {seed}: voxel batch ids differ"));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(feats.clone(), false);
        let mx = plan.pool_features(&mut tape, x, PoolMode::Max).unwrap();
        let avg = plan.pool_features(&mut tape, x, PoolMode::Avg).unwrap();
        let (mx, avg) = (tape.value(mx).clone(), tape.value(avg).clone());
        for (v, members) in brute.members.iter().enumerate() {
            let count = members.len() as f64;
            for a in 0..3 {
                let c = members.iter().map(|&i| positions[i][a]).sum::<f64>() / count;
                rep.max_centroid_diff = rep.max_centroid_diff.max((c - plan.centroids[v][a]).abs());
                let lo = brute.cells[v][a] as f64 * r_p;
                let got = plan.centroids[v][a];
                if got < lo - 1e-12 || got > lo + r_p + 1e-12 {
                    rep.violations.push(format!("seed {seed}: centroid {v} outside its voxel"));
                }
            }
            for k in 0..d {
                let vals = members.iter().map(|&i| feats.data()[i * d + k]);
                let want_max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
                let want_avg = vals.sum::<f64>() / count;
                rep.max_feature_diff = rep
                    .max_feature_diff
                    .max((want_max - mx.data()[v * d + k]).abs())
                    .max((want_avg - avg.data()[v * d + k]).abs());
            }
        }
    }
    rep
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// `Σ out ⊙ weights` so a tensor-valued op becomes a scalar with a
/// non-trivial upstream gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> ragc::Result<Var> {
    let w = tape.leaf(weights.clone(), false);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

#[derive(Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel: f64,
    pub max_abs: f64,
    pub trials: usize,
}

impl OpCheck {
    pub fn passes(&self, rel: f64) -> bool {
        self.max_rel < rel && self.max_abs < 1e-7
    }
}

fn accumulate(name: &'static str, reports: Vec<GradCheckReport>) -> OpCheck {
    OpCheck {
        name,
        max_rel: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        max_abs: reports.iter().map(|r| r.max_abs_error).fold(0.0, f64::max),
        trials: reports.len(),
    }
}

fn check_op<F>(name: &'static str, trials: usize, mut case: F) -> OpCheck
where
    F: FnMut(&mut ChaCha8Rng) -> GradCheckReport,
{
    let reports = (0..trials as u64)
        .map(|t| {
            let mut r = rng(0xa11_0000 + t * 7919 + name.len() as u64);
            case(&mut r)
        })
        .collect();
    accumulate(name, reports)
}

fn small_graph(r: &mut ChaCha8Rng, n: usize, attr_mode: AttrMode) -> GeometricGraph {
    let pts = uniform_points(r, n, 1.0);
    GeometricGraph::build(pts, vec![0; n], 1, EdgePolicy::Radius(0.5), attr_mode).unwrap()
}

/// Central-difference checks of every tape op plus the composite layers,
/// `trials` random points each.
pub fn op_gradient_checks(trials: usize) -> Vec<OpCheck> {
    let h = FD_STEP;
    let mut out = Vec::new();

    out.push(check_op("linear", trials, |r| {
        let (n, a, b) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6));
        let w_out = uniform_tensor(r, &[n, b], 1.0);
        let inputs = [uniform_tensor(r, &[n, a], 1.0), uniform_tensor(r, &[a, b], 1.0), uniform_tensor(r, &[b], 1.0)];
        gradient_check(&inputs, h, |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out.push(check_op("relu", trials, |r| {
        let shape = [r.gen_range(1..6), r.gen_range(1..6)];
        let w_out = uniform_tensor(r, &shape, 1.0);
        gradient_check(&[uniform_tensor(r, &shape, 1.0)], h, |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out.push(check_op("add", trials, |r| {
        let shape = [r.gen_range(1..6), r.gen_range(1..6)];
        let w_out = uniform_tensor(r, &shape, 1.0);
        let inputs = [uniform_tensor(r, &shape, 1.0), uniform_tensor(r, &shape, 1.0)];
        gradient_check(&inputs, h, |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out.push(check_op("mul", trials, |r| {
        let shape = [r.gen_range(1..6), r.gen_range(1..6)];
        let w_out = uniform_tensor(r, &shape, 1.0);
        let inputs = [uniform_tensor(r, &shape, 1.0), uniform_tensor(r, &shape, 1.0)];
        gradient_check(&inputs, h, |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out.push(check_op("add_bias", trials, |r| {
        let (n, d) = (r.gen_range(1..6), r.gen_range(1..6));
        let w_out = uniform_tensor(r, &[n, d], 1.0);
        let inputs = [uniform_tensor(r, &[n, d], 1.0), uniform_tensor(r, &[d], 1.0)];
        gradient_check(&inputs, h, |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out.push(check_op("sum", trials, |r| {
        let shape = [r.gen_range(1..6), r.gen_range(1..6)];
        gradient_check(&[uniform_tensor(r, &shape, 1.0)], h, |t, v| {
            let s = t.sum(v[0])?;
            t.mul(s, s)
        })
        .unwrap()
    }));
    out.push(check_op("batch_norm_train", trials, |r| {
        let (n, d) = (r.gen_range(2..8), r.gen_range(1..5));
        let w_out = uniform_tensor(r, &[n, d], 1.0);
        let inputs = [uniform_tensor(r, &[n, d], 1.0), uniform_tensor(r, &[d], 1.0), uniform_tensor(r, &[d], 1.0)];
        gradient_check(&inputs, h, |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out.push(check_op("batch_norm_eval", trials, |r| {
        let (n, d) = (r.gen_range(1..8), r.gen_range(1..5));
        let w_out = uniform_tensor(r, &[n, d], 1.0);
        let mean: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..d).map(|_| r.gen_range(0.1..2.0)).collect();
        let inputs = [uniform_tensor(r, &[n, d], 1.0), uniform_tensor(r, &[d], 1.0), uniform_tensor(r, &[d], 1.0)];
        gradient_check(&inputs, h, |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out.push(check_op("dropout", trials, |r| {
        let shape = [r.gen_range(1..8), r.gen_range(1..8)];
        let w_out = uniform_tensor(r, &shape, 1.0);
        let mask_seed = r.gen();
        gradient_check(&[uniform_tensor(r, &shape, 1.0)], h, |t, v| {
            let y = t.dropout(v[0], 0.2, &mut rng(mask_seed))?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out.push(check_op("softmax_cross_entropy", trials, |r| {
        let (n, c) = (r.gen_range(1..6), r.gen_range(2..6));
        let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        gradient_check(&[uniform_tensor(r, &[n, c], 3.0)], h, |t, v| t.softmax_cross_entropy(v[0], &targets))
            .unwrap()
    }));
    out.push(check_op("edge_aggregate", trials, |r| {
        let n = r.gen_range(1..15);
        let g = small_graph(r, n, AttrMode::Cartesian);
        let (d_in, d_out) = (r.gen_range(1..4), r.gen_range(1..4));
        let e = g.num_edges();
        let n = g.num_nodes();
        let w_out = uniform_tensor(r, &[n, d_out], 1.0);
        let inputs = [uniform_tensor(r, &[e, d_out * d_in], 1.0), uniform_tensor(r, &[n, d_in], 1.0)];
        let adj = g.adjacency.clone();
        gradient_check(&inputs, h, |t, v| {
            let y = t.edge_aggregate(v[0], v[1], &adj)?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out.push(check_op("factored_edge_conv", trials, |r| {
        let n = r.gen_range(1..15);
        let g = small_graph(r, n, AttrMode::Cartesian);
        let (d_in, d_out, m) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..5));
        let (e, n) = (g.num_edges(), g.num_nodes());
        let w_out = uniform_tensor(r, &[n, d_out], 1.0);
        let inputs = [
            uniform_tensor(r, &[e, m], 1.0),
            uniform_tensor(r, &[m, d_out * d_in], 1.0),
            uniform_tensor(r, &[d_out * d_in], 1.0),
            uniform_tensor(r, &[n, d_in], 1.0),
        ];
        let adj = g.adjacency.clone();
        gradient_check(&inputs, h, |t, v| {
            let y = t.factored_edge_conv(v[0], v[1], v[2], v[3], &adj, d_out)?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out.push(check_op("segment_max", trials, |r| {
        let n = r.gen_range(1..20);
        let segments = r.gen_range(1..=n);
        let mut assignment: Vec<usize> = (0..n).map(|i| if i < segments { i } else { r.gen_range(0..segments) }).collect();
        assignment.sort_unstable();
        let d = r.gen_range(1..4);
        let w_out = uniform_tensor(r, &[segments, d], 1.0);
        gradient_check(&[uniform_tensor(r, &[n, d], 1.0)], h, |t, v| {
            let y = t.segment_max(v[0], &assignment, segments)?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out.push(check_op("segment_mean", trials, |r| {
        let n = r.gen_range(1..20);
        let segments = r.gen_range(1..=n);
        let mut assignment: Vec<usize> = (0..n).map(|i| if i < segments { i } else { r.gen_range(0..segments) }).collect();
        // Unsorted membership is allowed for pooling.
        for i in (1..n).rev() {
            assignment.swap(i, r.gen_range(0..=i));
        }
        let assignment = Arc::new(assignment);
        let d = r.gen_range(1..4);
        let w_out = uniform_tensor(r, &[segments, d], 1.0);
        gradient_check(&[uniform_tensor(r, &[n, d], 1.0)], h, |t, v| {
            let y = t.segment_mean(v[0], &assignment, segments)?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out.push(check_op("dynamic_filter_net", trials, |r| {
        let mut store = ParamStore::new();
        let layer = AgcLayer::new(&mut store, "agc", 3, &[4, 5], 2, 3, AgcKernel::Materialized, r);
        randomize(&mut store, r, 1.0);
        let attrs = uniform_tensor(r, &[5, 3], 1.0);
        let w_out = uniform_tensor(r, &[5, 6], 1.0);
        layer_check(&store, &[attrs], |f, inputs| {
            let theta = layer.dynamic_filter_weights(f, inputs[0])?;
            weighted_sum(f.tape, theta, &w_out)
        })
    }));
    for (name, kernel) in [("agc_layer_factored", AgcKernel::Factored), ("agc_layer_materialized", AgcKernel::Materialized)] {
        out.push(check_op(name, trials, |r| {
            let g = small_graph(r, 10, AttrMode::Spherical);
            let mut store = ParamStore::new();
            let layer = AgcLayer::new(&mut store, "agc", 3, &[4, 5], 2, 3, kernel, r);
            randomize(&mut store, r, 1.0);
            let x = uniform_tensor(r, &[10, 2], 1.0);
            let w_out = uniform_tensor(r, &[10, 3], 1.0);
            let attrs = g.edge_attrs.clone();
            layer_check(&store, &[x, attrs], |f, inputs| {
                let edges = EdgeInput {
                    adjacency: &g.adjacency,
                    attrs: inputs[1],
                };
                let y = layer.forward(f, inputs[0], edges)?;
                weighted_sum(f.tape, y, &w_out)
            })
        }));
    }
    out.push(check_op("ragc_block", trials, |r| {
        let g = small_graph(r, 15, AttrMode::Spherical);
        let mut store = ParamStore::new();
        let mut slots = Vec::new();
        let block = RagcBlock::new(&mut store, &mut slots, "block", 3, &[4], 2, 3, BlockOptions::default(), r);
        randomize(&mut store, r, 1.0);
        let x = uniform_tensor(r, &[15, 2], 1.0);
        let w_out = uniform_tensor(r, &[15, 3], 1.0);
        let attrs = g.edge_attrs.clone();
        layer_check(&store, &[x, attrs], |f, inputs| {
            let edges = EdgeInput {
                adjacency: &g.adjacency,
                attrs: inputs[1],
            };
            let y = block.forward(f, inputs[0], edges)?;
            weighted_sum(f.tape, y, &w_out)
        })
    }));
    out.push(check_op("global_average_readout", trials, |r| {
        let batch: Vec<usize> = {
            let mut b: Vec<usize> = (0..12).map(|i| if i < 3 { i } else { r.gen_range(0..3) }).collect();
            b.sort_unstable();
            b
        };
        let w_out = uniform_tensor(r, &[3, 4], 1.0);
        gradient_check(&[uniform_tensor(r, &[12, 4], 1.0)], h, |t, v| {
            let y = ragc::pool::readout(t, v[0], &batch, 3)?;
            weighted_sum(t, y, &w_out)
        })
        .unwrap()
    }));
    out
}

/// Gradient check over every parameter of `store` followed by the `extra`
/// inputs. BN runs in train mode.
fn layer_check<F>(store: &ParamStore, extra: &[Tensor], body: F) -> GradCheckReport
where
    F: Fn(&mut Forward, &[Var]) -> ragc::Result<Var>,
{
    let np = store.len();
    let mut inputs = store.values();
    inputs.extend(extra.iter().cloned());
    let running: Vec<RunningStats> = (0..16).map(|_| RunningStats::new(8)).collect();
    gradient_check(&inputs, FD_STEP, |tape, vars| {
        let mut r = rng(3);
        let mut f = Forward {
            tape,
            vars: &vars[..np],
            mode: Mode::Train,
            running: &running,
            batch_stats: Vec::new(),
            rng: &mut r,
        };
        body(&mut f, &vars[np..])
    })
    .unwrap()
}

/// Network with widths 2/4 for whole-model gradient checks.
pub fn tiny_config(classes: usize) -> NetworkConfig {
    NetworkConfig {
        filter_hidden: vec![2, 4],
        stem_width: 2,
        stage_widths: vec![2, 2, 4, 4],
        fc_width: 4,
        graph_radii: vec![0.35, 0.4, 0.45, 0.5, 0.6, 0.6],
        pool_radii: vec![0.1, 0.12, 0.15, 0.2, 0.3],
        ..NetworkConfig::reference(classes)
    }
}

/// Full-network check: two clouds of at most 25 points, train mode, fixed
/// dropout mask, parameters jittered off their initial values.
pub fn network_gradient_check(trials: usize) -> OpCheck {
    let reports = (0..trials as u64)
        .map(|t| {
            let mut r = rng(0x0e7_0000 + t);
            let cfg = NetworkConfig {
                seed: t,
                ..tiny_config(3)
            };
            let mut net = Network::new(cfg).unwrap();
            // Zero biases put self-loop edges exactly on ReLU kinks.
            jitter(&mut net.params, &mut r, 0.05);
            let clouds: Vec<PointCloud> = (0..2)
                .map(|_| {
                    let n = r.gen_range(12..=25);
                    // Dense enough that no node is isolated: isolated nodes all
                    // compute the same features and tie exactly in max pooling.
                    PointCloud::new(uniform_points(&mut r, n, 0.3), None)
                })
                .collect();
            let refs: Vec<&PointCloud> = clouds.iter().collect();
            let targets = [r.gen_range(0..3), r.gen_range(0..3)];
            let dropout_seed: u64 = r.gen();
            gradient_check(&net.params.values(), FD_STEP, |tape, vars| {
                let out = net.forward_with_vars(tape, vars, &refs, Mode::Train, &mut rng(dropout_seed))?;
                tape.softmax_cross_entropy(out.logits, &targets)
            })
            .unwrap()
        })
        .collect();
    accumulate("network", reports)
}

/// Row sums, trace/accuracy and total identities of one evaluation.
pub fn metrics_identity_errors(m: &Metrics, truth: &[usize]) -> Vec<String> {
    let mut errs = Vec::new();
    if m.total() != truth.len() {
        errs.push(format!("total {} != {} samples", m.total(), truth.len()));
    }
    for c in 0..m.classes {
        let row: usize = m.confusion[c].iter().sum();
        let count = truth.iter().filter(|&&t| t == c).count();
        if row != count {
            errs.push(format!("row {c} sums to {row}, class has {count} samples"));
        }
    }
    if m.accuracy != m.trace() as f64 / m.total() as f64 {
        errs.push(format!("accuracy {} != trace/total", m.accuracy));
    }
    errs
}
