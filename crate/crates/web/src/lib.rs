//! WebAssembly bindings for the browser demo: synthetic scenes, neighborhood
//! graphs and voxel pooling. Points cross the boundary as flat `x, y, z` arrays.

use wasm_bindgen::prelude::*;

use ragc::graph::{AttrMode, EdgePolicy, GeometricGraph};
use ragc::pool::VoxelPlan;
use ragc::synth::{generate_scene, SynthConfig, CLASS_NAMES, NUM_CLASSES};

fn to_points(flat: &[f64]) -> Result<Vec<[f64; 3]>, JsError> {
    if flat.is_empty() || !flat.len().is_multiple_of(3) {
        return Err(JsError::new("expected a non-empty array of x, y, z triples"));
    }
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn js(e: ragc::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

/// One synthetic scene of `class` (0..4) as flat coordinates.
#[wasm_bindgen]
pub fn synth_scene(class: usize, seed: u32, points: usize) -> Result<Vec<f64>, JsError> {
    if class >= NUM_CLASSES {
        return Err(JsError::new(&format!("class must be below {NUM_CLASSES}")));
    }
    let cfg = SynthConfig {
        points: points.max(1),
        ..SynthConfig::default()
    };
    let pc = generate_scene(class, seed as u64, 0, &cfg);
    Ok(pc.points.iter().flatten().copied().collect())
}

/// Directed edges as flat `(source, destination)` pairs, self-loops included.
/// `policy` is `"radius"` (param = radius in meters) or `"knn"` (param = k).
#[wasm_bindgen]
pub fn build_graph(points: &[f64], policy: &str, param: f64) -> Result<Vec<u32>, JsError> {
    let pts = to_points(points)?;
    let policy = match policy {
        "radius" => EdgePolicy::Radius(param),
        "knn" if param >= 1.0 => EdgePolicy::Knn(param as usize),
        other => return Err(JsError::new(&format!("unknown policy {other:?} or bad parameter"))),
    };
    let n = pts.len();
    let g = GeometricGraph::build(pts, vec![0; n], 1, policy, AttrMode::Spherical).map_err(js)?;
    let mut out = Vec::with_capacity(2 * g.num_edges());
    for (dst, src) in g.adjacency.destinations().into_iter().zip(&g.adjacency.sources) {
        out.push(*src as u32);
        out.push(dst as u32);
    }
    Ok(out)
}

/// Voxel centroids for cells of edge `voxel`, as flat coordinates.
#[wasm_bindgen]
pub fn voxel_pool(points: &[f64], voxel: f64) -> Result<Vec<f64>, JsError> {
    let pts = to_points(points)?;
    let n = pts.len();
    let plan = VoxelPlan::build(&pts, &vec![0; n], 1, voxel).map_err(js)?;
    Ok(plan.centroids.iter().flatten().copied().collect())
}
