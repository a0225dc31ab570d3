mod render;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ragc::ablation::{run_variant, AblationAxis, AblationTable, ALL_AXES};
use ragc::autodiff::checkpoint::Checkpoint;
use ragc::config::network_to_kv;
use ragc::graph::{AttrMode, EdgePolicy, GeometricGraph};
use ragc::io::{load_dataset, parse_scene_file, Dataset};
use ragc::pool::VoxelPlan;
use ragc::synth::{write_synthetic_dataset, SynthConfig, CLASS_NAMES, NUM_CLASSES, RADIUS_SCALE};
use ragc::train::{evaluate_model, train_model_with, Metrics};
use ragc::{Network, NetworkConfig, PointCloud};

use settings::{describe, resolve, Layers, DATASET_DEFAULTS};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ragc::Error> for CliError {
    fn from(e: ragc::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Geometric scene classification with residual attention graph convolutions.
#[derive(Parser)]
#[command(name = "ragc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic four-class benchmark.
    Synth(SynthArgs),
    /// Train a classifier on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Classify a single capture or cloud file.
    Predict(PredictArgs),
    /// Run the single-axis design sweeps.
    Ablate(AblateArgs),
    /// Measure neighbor-search and pooling throughput.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Training scenes per class.
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Test scenes per class.
    #[arg(long, default_value_t = 0)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mean points per scene.
    #[arg(long, default_value_t = 500)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by `train` and `ablate`. Each flag matches a config-file key.
#[derive(Args)]
struct ModelFlags {
    /// key=value settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory containing index.tsv.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// radius | knn
    #[arg(long)]
    policy: Option<String>,
    /// Neighbor count for --policy knn.
    #[arg(long)]
    k: Option<String>,
    /// cartesian | spherical | both
    #[arg(long)]
    attrs: Option<String>,
    /// on | off
    #[arg(long)]
    residual: Option<String>,
    /// Hidden widths of the filter-generating network, e.g. 16,32 or none.
    #[arg(long)]
    filter_widths: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    /// on | off
    #[arg(long)]
    augment: Option<String>,
    /// Multiplies every graph and pooling radius.
    #[arg(long)]
    radius_scale: Option<String>,
    #[arg(long)]
    val_fraction: Option<String>,
}

impl ModelFlags {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("data", self.data.clone()),
            ("seed", self.seed.clone()),
            ("epochs", self.epochs.clone()),
            ("policy", self.policy.clone()),
            ("k", self.k.clone()),
            ("attrs", self.attrs.clone()),
            ("residual", self.residual.clone()),
            ("filter-widths", self.filter_widths.clone()),
            ("batch-size", self.batch_size.clone()),
            ("lr", self.lr.clone()),
            ("weight-decay", self.weight_decay.clone()),
            ("augment", self.augment.clone()),
            ("radius-scale", self.radius_scale.clone()),
            ("val-fraction", self.val_fraction.clone()),
        ]
    }

    /// Defaults < dataset.cfg < --config < flags.
    fn layers(&self, base: Layers) -> Result<Layers, CliError> {
        let mut layers = base;
        let data = self.data.clone().or_else(|| {
            let mut probe = Layers::default();
            self.config.as_ref().and_then(|c| probe.merge_file(c).ok()).and_then(|_| probe.get("data").map(str::to_string))
        });
        if let Some(d) = &data {
            let defaults = Path::new(d).join(DATASET_DEFAULTS);
            if defaults.exists() {
                layers.merge_file(&defaults)?;
            }
        }
        if let Some(c) = &self.config {
            layers.merge_file(c)?;
        }
        layers.merge_flags(&self.pairs());
        Ok(layers)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Checkpoint path for the best weights.
    #[arg(long)]
    out: Option<String>,
    /// Independent seeded runs; the best one is kept.
    #[arg(long)]
    runs: Option<String>,
    /// Write a checkpoint every N epochs next to --out (0 disables).
    #[arg(long)]
    checkpoint_every: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// PNG heat map of the confusion matrix.
    #[arg(long)]
    confusion_out: Option<PathBuf>,
    /// Tab-separated metrics table.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Capture or cloud file.
    file: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// edge-policy | edge-attrs | filter-depth | residual | all
    #[arg(long, default_value = "all")]
    axis: String,
    /// Directory for per-axis TSV tables.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100_000)]
    points: usize,
    #[arg(long, default_value_t = 0.1)]
    radius: f64,
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    voxel: f64,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Worker count from RAGC_THREADS; 0 selects the deterministic single-threaded mode.
fn worker_threads() -> Result<usize, CliError> {
    match std::env::var("RAGC_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) => Ok(1),
            Ok(n) => Ok(n),
            Err(_) => Err(CliError::Usage(format!("RAGC_THREADS must be a non-negative integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => Cli::command().error(ErrorKind::ValueValidation, msg).exit(),
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    if a.n + a.n_test == 0 {
        return Err(CliError::Usage("--n and --n-test cannot both be 0".into()));
    }
    let cfg = SynthConfig {
        points: a.points,
        ..SynthConfig::default()
    };
    println!("# resolved configuration");
    println!("n={}\nn-test={}\nseed={}\npoints={}\nout={}", a.n, a.n_test, a.seed, a.points, a.out.display());
    let entries = write_synthetic_dataset(&a.out, a.n, a.n_test, a.seed, &cfg)?;
    let net = NetworkConfig::reference(NUM_CLASSES).with_radius_scale(RADIUS_SCALE);
    let list = |v: &[f64]| v.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",");
    std::fs::write(
        a.out.join(DATASET_DEFAULTS),
        format!(
            "# radii sized for the synthetic scene scale\nclasses={NUM_CLASSES}\ngraph-radii={}\npool-radii={}\n",
            list(&net.graph_radii),
            list(&net.pool_radii)
        ),
    )?;
    println!("wrote {} scenes ({}) to {}", entries.len(), CLASS_NAMES.join(", "), a.out.display());
    Ok(())
}

fn load_data(layers: &Layers) -> Result<Dataset, CliError> {
    let dir = layers
        .get("data")
        .ok_or_else(|| CliError::Usage("missing --data <DIR>".into()))?;
    let ds = load_dataset(dir)?;
    if ds.train.is_empty() {
        return Err(CliError::Runtime(format!("{dir} has no training samples")));
    }
    Ok(ds)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut layers = a.model.layers(Layers::default())?;
    layers.merge_flags(&[
        ("out", a.out.clone()),
        ("runs", a.runs.clone()),
        ("checkpoint-every", a.checkpoint_every.clone()),
    ]);
    if layers.get("out").is_none() {
        layers.set("out", "model.ckpt");
    }
    let ds = load_data(&layers)?;
    let resolved = resolve(&layers, ds.num_classes())?;
    print!("{}", describe(&resolved, &layers));
    let out = PathBuf::from(layers.get("out").unwrap_or("model.ckpt"));

    let mut best: Option<(f64, u64, Checkpoint)> = None;
    for run in 0..resolved.runs {
        let seed = resolved.net.seed + run as u64;
        let mut net_cfg = resolved.net.clone();
        net_cfg.seed = seed;
        let mut train_cfg = resolved.train.clone();
        train_cfg.seed = seed;
        let mut net = Network::new(net_cfg)?;
        println!("run {} seed {seed}: {} parameters", run + 1, net.num_parameters());
        let start = Instant::now();
        let every = train_cfg.checkpoint_every;
        let outcome = train_model_with(&mut net, &ds.train, &train_cfg, &mut |s, net| {
            let val = s.val_accuracy.map_or(String::new(), |v| format!(" val-acc {v:.4}"));
            println!("epoch {:>4} loss {:.6}{val} ({:.0}s)", s.epoch, s.mean_loss, start.elapsed().as_secs_f64());
            if every > 0 && s.epoch % every == 0 {
                let path = periodic_path(&out, seed, s.epoch);
                net.to_checkpoint().save(&path)?;
            }
            Ok(())
        })?;
        let chosen = Network::from_checkpoint(&outcome.best)?;
        let score = if ds.test.is_empty() {
            outcome.best_val_accuracy.unwrap_or(f64::NAN)
        } else {
            evaluate_model(&chosen, &ds.test)?.accuracy
        };
        let which = if ds.test.is_empty() { "validation" } else { "test" };
        println!("run {} seed {seed}: best epoch {} {which} accuracy {score:.4}", run + 1, outcome.best_epoch);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b || b.is_nan()) {
            best = Some((score, seed, outcome.best));
        }
    }
    let (score, seed, ckpt) = best.expect("at least one run");
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ckpt.save(&out)?;
    println!("best of {} run(s): seed {seed} accuracy {score:.4}", resolved.runs);
    println!("checkpoint written to {}", out.display());
    if !ds.test.is_empty() {
        let metrics = evaluate_model(&Network::from_checkpoint(&ckpt)?, &ds.test)?;
        print!("{}", metrics.report(&class_names(metrics.classes)));
    }
    Ok(())
}

fn periodic_path(out: &Path, seed: u64, epoch: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    out.with_file_name(format!("{stem}.seed{seed}.epoch{epoch:04}.ckpt"))
}

fn class_names(classes: usize) -> Vec<String> {
    if classes == NUM_CLASSES {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..classes).map(|c| c.to_string()).collect()
    }
}

fn load_network(path: &Path) -> Result<Network, CliError> {
    let ckpt = Checkpoint::load(path)?;
    let net = Network::from_checkpoint(&ckpt)?;
    Ok(net)
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let net = load_network(&a.checkpoint)?;
    println!("# resolved configuration");
    println!("checkpoint={}\ndata={}", a.checkpoint.display(), a.data.display());
    if let Some(p) = &a.confusion_out {
        println!("confusion-out={}", p.display());
    }
    print!("{}", network_to_kv(&net.config));
    let ds = load_dataset(&a.data)?;
    let (split, samples) = if ds.test.is_empty() { ("train", &ds.train) } else { ("test", &ds.test) };
    let metrics: Metrics = evaluate_model(&net, samples)?;
    println!("evaluated {} {split} samples", samples.len());
    print!("{}", metrics.report(&class_names(metrics.classes)));
    let tsv = metrics.to_tsv();
    println!("{tsv}");
    if let Some(p) = &a.report {
        std::fs::write(p, &tsv)?;
    }
    if let Some(p) = &a.confusion_out {
        render::write_confusion_png(&metrics, p).map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("confusion matrix image written to {}", p.display());
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), CliError> {
    let net = load_network(&a.checkpoint)?;
    println!("# resolved configuration");
    println!("checkpoint={}\nfile={}", a.checkpoint.display(), a.file.display());
    print!("{}", network_to_kv(&net.config));
    let cloud = parse_scene_file(&a.file)?.into_cloud()?;
    let probs = net.predict(&[&cloud])?.remove(0);
    let class = ragc::train::argmax(&probs);
    let names = class_names(net.config.classes);
    println!("class {class} ({})", names[class]);
    for (c, p) in probs.iter().enumerate() {
        println!("p[{c}] {p:.6}");
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<(), CliError> {
    let mut base = Layers::default();
    base.set("epochs", 20);
    let layers = a.model.layers(base)?;
    let axes: Vec<AblationAxis> = if a.axis == "all" {
        ALL_AXES.to_vec()
    } else {
        vec![AblationAxis::parse(&a.axis).ok_or_else(|| CliError::Usage(format!("unknown axis {:?}", a.axis)))?]
    };
    let ds = load_data(&layers)?;
    let resolved = resolve(&layers, ds.num_classes())?;
    print!("{}", describe(&resolved, &layers));
    println!("axis={}", a.axis);
    let test = if ds.test.is_empty() {
        println!("note: no test split, scoring on the training set");
        &ds.train
    } else {
        &ds.test
    };
    let threads = worker_threads()?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
    }
    for axis in axes {
        let variants = axis.variants(&resolved.net);
        let jobs: Vec<_> = variants.iter().collect();
        let rows = run_parallel(&jobs, threads, |v| {
            let row = run_variant(v, &resolved.train, &ds.train, test)?;
            println!("{} / {}: accuracy {:.4} ({:.0}s)", axis.name(), row.label, row.accuracy, row.seconds);
            Ok(row)
        })?;
        let table = AblationTable { axis, rows };
        println!("\n{}", table.to_text());
        if let Some(dir) = &a.out {
            std::fs::write(dir.join(format!("{}.tsv", axis.name())), table.to_tsv())?;
        }
    }
    Ok(())
}

/// Map `f` over `items` on up to `threads` workers, keeping input order.
fn run_parallel<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> ragc::Result<R> + Sync,
) -> Result<Vec<R>, CliError> {
    if threads <= 1 || items.len() <= 1 {
        return Ok(items.iter().map(&f).collect::<ragc::Result<_>>()?);
    }
    let chunk = items.len().div_ceil(threads);
    let results: Vec<ragc::Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<ragc::Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn bench(a: BenchArgs) -> Result<(), CliError> {
    if a.points == 0 || a.repeat == 0 || !(a.radius > 0.0) || !(a.voxel > 0.0) || a.k == 0 {
        return Err(CliError::Usage("points, repeat, radius, voxel and k must be positive".into()));
    }
    println!("# resolved configuration");
    println!(
        "points={}\nradius={}\nk={}\nvoxel={}\nrepeat={}\nseed={}",
        a.points, a.radius, a.k, a.voxel, a.repeat, a.seed
    );
    // Cube sized for about 16 neighbors per radius ball.
    let side = (a.points as f64 * 4.0 / 3.0 * std::f64::consts::PI * a.radius.powi(3) / 16.0).cbrt();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let points: Vec<[f64; 3]> = (0..a.points)
        .map(|_| [rng.gen_range(0.0..side), rng.gen_range(0.0..side), rng.gen_range(0.0..side)])
        .collect();
    let cloud = PointCloud::new(points, None);
    let time = |label: &str, f: &mut dyn FnMut() -> ragc::Result<usize>| -> Result<(), CliError> {
        let mut best = f64::INFINITY;
        let mut work = 0;
        for _ in 0..a.repeat {
            let start = Instant::now();
            work = f()?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        println!(
            "{label:<14} {:>9.2} ms  {:>12.0} points/s  {work} items",
            best * 1e3,
            a.points as f64 / best
        );
        Ok(())
    };
    println!("cube side {side:.3} m");
    time("radius graph", &mut || {
        let g = GeometricGraph::build(cloud.points.clone(), vec![0; a.points], 1, EdgePolicy::Radius(a.radius), AttrMode::Spherical)?;
        Ok(g.num_edges())
    })?;
    time("knn graph", &mut || {
        let g = GeometricGraph::build(cloud.points.clone(), vec![0; a.points], 1, EdgePolicy::Knn(a.k), AttrMode::Spherical)?;
        Ok(g.num_edges())
    })?;
    time("voxel pooling", &mut || {
        let plan = VoxelPlan::build(&cloud.points, &vec![0; a.points], 1, a.voxel)?;
        Ok(plan.num_voxels())
    })?;
    Ok(())
}
