//! Synthetic room-scale benchmark with four scene classes.
//!
//! Scenes are built in a local frame with `y` up, then scaled, turned about
//! the vertical axis and shifted. Every sample draws from its own ChaCha
//! stream, so any sample can be regenerated in isolation.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{write_cloud, write_manifest, ManifestEntry, Split};
use crate::pointcloud::{Point3, PointCloud};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["plane", "boxes", "spheres", "walls"];
/// Factor applied to the reference radii for scenes of this scale.
pub const RADIUS_SCALE: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    /// Mean point count per scene.
    pub points: usize,
    /// Point counts vary uniformly by up to this much around `points`.
    pub point_spread: usize,
    /// Side of the ground square / wall length before scaling, meters.
    pub extent: f64,
    /// Per-axis uniform noise half-width, meters.
    pub jitter: f64,
    /// Scale is drawn from `[1 - scale_range, 1 + scale_range]`.
    pub scale_range: f64,
    /// Horizontal translation half-width, meters.
    pub shift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            points: 500,
            point_spread: 50,
            extent: 3.0,
            jitter: 0.01,
            scale_range: 0.15,
            shift: 0.5,
        }
    }
}

fn sample_rng(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 40) | index as u64);
    rng
}

fn plane_point(rng: &mut ChaCha8Rng, half: f64) -> Point3 {
    [rng.gen_range(-half..half), 0.0, rng.gen_range(-half..half)]
}

fn box_surface(rng: &mut ChaCha8Rng, c: Point3, size: Point3) -> Point3 {
    // Four sides and the top, picked by area.
    let [sx, sy, sz] = size;
    let areas = [sy * sz, sy * sz, sx * sy, sx * sy, sx * sz];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 0;
    while face < 4 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    let (u, v) = (rng.gen_range(-0.5..0.5), rng.gen_range(0.0..1.0));
    let w = rng.gen_range(-0.5..0.5);
    match face {
        0 => [c[0] - sx / 2.0, v * sy, c[2] + u * sz],
        1 => [c[0] + sx / 2.0, v * sy, c[2] + u * sz],
        2 => [c[0] + u * sx, v * sy, c[2] - sz / 2.0],
        3 => [c[0] + u * sx, v * sy, c[2] + sz / 2.0],
        _ => [c[0] + u * sx, sy, c[2] + w * sz],
    }
}

fn sphere_surface(rng: &mut ChaCha8Rng, c: Point3, r: f64) -> Point3 {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let t: f64 = rng.gen_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).sqrt();
    [c[0] + r * s * t.cos(), c[1] + r * z, c[2] + r * s * t.sin()]
}

/// Non-overlapping object footprints on the ground square.
fn place(rng: &mut ChaCha8Rng, count: usize, half: f64, radius: &[f64]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::new();
    for &r in radius.iter().take(count) {
        let lim = half - r;
        let mut best = [0.0, 0.0];
        for _ in 0..64 {
            let c = [rng.gen_range(-lim..lim), rng.gen_range(-lim..lim)];
            best = c;
            let clear = out
                .iter()
                .zip(radius)
                .all(|(o, ro)| ((o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2)).sqrt() > r + ro + 0.1);
            if clear {
                break;
            }
        }
        out.push(best);
    }
    out
}

/// Local-frame scene for `class` before pose and jitter.
fn raw_scene(class: usize, rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point3> {
    let half = extent / 2.0;
    let mut pts = Vec::with_capacity(n);
    match class {
        0 => pts.extend((0..n).map(|_| plane_point(rng, half))),
        1 => {
            let count = rng.gen_range(1..=3);
            let sizes: Vec<Point3> = (0..count)
                .map(|_| [rng.gen_range(0.5..1.0), rng.gen_range(0.8..1.4), rng.gen_range(0.5..1.0)])
                .collect();
            let radius: Vec<f64> = sizes.iter().map(|s| 0.5 * (s[0] * s[0] + s[2] * s[2]).sqrt()).collect();
            let centers = place(rng, count, half, &radius);
            let on_objects = n / 2;
            pts.extend((0..n - on_objects).map(|_| plane_point(rng, half)));
            for i in 0..on_objects {
                let k = i % count;
                let c = centers[k];
                pts.push(box_surface(rng, [c[0], 0.0, c[1]], sizes[k]));
            }
        }
        2 => {
            let count = rng.gen_range(2..=4);
            let radius: Vec<f64> = (0..count).map(|_| rng.gen_range(0.2..0.4)).collect();
            let centers = place(rng, count, half, &radius);
            let on_objects = n / 2;
            pts.extend((0..n - on_objects).map(|_| plane_point(rng, half)));
            for i in 0..on_objects {
                let k = i % count;
                let c = centers[k];
                pts.push(sphere_surface(rng, [c[0], radius[k], c[1]], radius[k]));
            }
        }
        _ => {
            let height = rng.gen_range(1.8..2.4);
            for i in 0..n {
                let along = rng.gen_range(0.0..extent);
                let up = rng.gen_range(0.0..height);
                pts.push(if i % 2 == 0 {
                    [-half, up, -half + along]
                } else {
                    [-half + along, up, -half]
                });
            }
        }
    }
    pts
}

/// One labeled scene. Deterministic in `(seed, class, index)`.
pub fn generate_scene(class: usize, seed: u64, index: usize, cfg: &SynthConfig) -> PointCloud {
    let mut rng = sample_rng(seed, class, index);
    let n = if cfg.point_spread == 0 {
        cfg.points
    } else {
        rng.gen_range(cfg.points.saturating_sub(cfg.point_spread)..=cfg.points + cfg.point_spread)
    }
    .max(1);
    let raw = raw_scene(class, &mut rng, n, cfg.extent);
    let scale = 1.0 + rng.gen_range(-cfg.scale_range..=cfg.scale_range);
    let yaw: f64 = rng.gen_range(0.0..2.0 * PI);
    let (s, c) = yaw.sin_cos();
    let t = [rng.gen_range(-cfg.shift..=cfg.shift), 0.0, rng.gen_range(-cfg.shift..=cfg.shift)];
    let j = cfg.jitter;
    let points = raw
        .into_iter()
        .map(|p| {
            let [x, y, z] = p.map(|v| v * scale);
            let rotated = [c * x + s * z, y, -s * x + c * z];
            let mut q = [0.0; 3];
            for k in 0..3 {
                let noise = if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
                q[k] = rotated[k] + t[k] + noise;
            }
            q
        })
        .collect();
    PointCloud::new(points, Some(class))
}

/// `n_per_class` scenes of every class, interleaved by class.
pub fn generate_synthetic_dataset(n_per_class: usize, seed: u64, cfg: &SynthConfig) -> Vec<PointCloud> {
    generate_range(0..n_per_class, seed, cfg)
}

fn generate_range(range: std::ops::Range<usize>, seed: u64, cfg: &SynthConfig) -> Vec<PointCloud> {
    range
        .flat_map(|i| (0..NUM_CLASSES).map(move |c| (c, i)))
        .map(|(c, i)| generate_scene(c, seed, i, cfg))
        .collect()
}

/// Training and test sets drawn from disjoint sample indices.
pub fn generate_split(n_train: usize, n_test: usize, seed: u64, cfg: &SynthConfig) -> (Vec<PointCloud>, Vec<PointCloud>) {
    (
        generate_range(0..n_train, seed, cfg),
        generate_range(n_train..n_train + n_test, seed, cfg),
    )
}

/// Write `n_train + n_test` scenes per class as cloud files plus `index.tsv`.
pub fn write_synthetic_dataset(
    dir: impl AsRef<Path>,
    n_train: usize,
    n_test: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<Vec<ManifestEntry>> {
    if n_train + n_test == 0 {
        return Err(Error::Config("need at least one scene per class".into()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for i in 0..n_train + n_test {
        for (class, name) in CLASS_NAMES.iter().enumerate() {
            let pc = generate_scene(class, seed, i, cfg);
            let file = format!("{name}_{i:04}.pc");
            write_cloud(dir.join(&file), &pc)?;
            entries.push(ManifestEntry {
                file,
                label: class,
                split: if i < n_train { Split::Train } else { Split::Test },
            });
        }
    }
    write_manifest(dir, &entries)?;
    Ok(entries)
}
