//! The full classifier: graph init, stem AGC, four residual stages separated
//! by voxel max-pooling, a final pooling, global average readout, and a
//! two-layer FC head.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agc::{AgcKernel, AgcLayer, BlockOptions, EdgeInput, RagcBlock, ResidualActivation};
use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::{BatchStats, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{construct_batch_graph, AttrMode, EdgePolicy, GeometricGraph};
use crate::layers::{BatchNorm, Forward, Linear, RunningStats, BN_MOMENTUM};
use crate::pointcloud::PointCloud;
use crate::pool::{readout, PoolMode, VoxelPlan};
use crate::tensor::{ParamStore, Tensor};

/// Graph radii (meters) for the initial graph and after each pooling.
pub const REFERENCE_GRAPH_RADII: [f64; 6] = [0.1, 0.15, 0.25, 0.35, 0.55, 0.55];
/// Voxel edge (meters) of each pooling.
pub const REFERENCE_POOL_RADII: [f64; 5] = [0.1, 0.15, 0.25, 0.35, 0.55];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    /// Radius graphs using the configured radii schedule.
    Radius,
    /// `k` nearest neighbours at every stage.
    Knn(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub classes: usize,
    pub policy: PolicyKind,
    pub attr_mode: AttrMode,
    /// Hidden widths of every dynamic filter network (the last FC is implied).
    pub filter_hidden: Vec<usize>,
    pub residual: bool,
    pub activation: ResidualActivation,
    pub kernel: AgcKernel,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub fc_width: usize,
    pub graph_radii: Vec<f64>,
    pub pool_radii: Vec<f64>,
    pub dropout: f64,
    pub seed: u64,
}

impl NetworkConfig {
    /// The reference topology and radii for `classes` outputs.
    pub fn reference(classes: usize) -> Self {
        Self {
            classes,
            policy: PolicyKind::Radius,
            attr_mode: AttrMode::Spherical,
            filter_hidden: vec![16, 32],
            residual: true,
            activation: ResidualActivation::PostAdd,
            kernel: AgcKernel::Factored,
            stem_width: 16,
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            fc_width: 128,
            graph_radii: REFERENCE_GRAPH_RADII.to_vec(),
            pool_radii: REFERENCE_POOL_RADII.to_vec(),
            dropout: 0.2,
            seed: 0,
        }
    }

    /// Multiply every radius by `factor`.
    pub fn with_radius_scale(mut self, factor: f64) -> Self {
        self.graph_radii.iter_mut().for_each(|r| *r *= factor);
        self.pool_radii.iter_mut().for_each(|r| *r *= factor);
        self
    }

    pub fn num_poolings(&self) -> usize {
        self.pool_radii.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.classes < 1 {
            return err("at least one class is required".into());
        }
        if self.pool_radii.len() != self.stage_widths.len() + 1 {
            return err(format!(
                "{} stages need {} pooling radii, got {}",
                self.stage_widths.len(),
                self.stage_widths.len() + 1,
                self.pool_radii.len()
            ));
        }
        if self.graph_radii.len() != self.pool_radii.len() + 1 {
            return err(format!(
                "{} poolings need {} graph radii, got {}",
                self.pool_radii.len(),
                self.pool_radii.len() + 1,
                self.graph_radii.len()
            ));
        }
        if self
            .graph_radii
            .iter()
            .chain(&self.pool_radii)
            .any(|r| !(r.is_finite() && *r > 0.0))
        {
            return err("radii must be positive".into());
        }
        if let PolicyKind::Knn(0) = self.policy {
            return err("k must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout probability {} outside [0, 1)", self.dropout));
        }
        let widths = [self.stem_width, self.fc_width, self.blocks_per_stage];
        if widths.iter().chain(&self.stage_widths).chain(&self.filter_hidden).any(|&w| w == 0) {
            return err("layer widths and block counts must be positive".into());
        }
        Ok(())
    }

    pub fn edge_policy(&self, stage: usize) -> EdgePolicy {
        match self.policy {
            PolicyKind::Radius => EdgePolicy::Radius(self.graph_radii[stage]),
            PolicyKind::Knn(k) => EdgePolicy::Knn(k),
        }
    }
}

pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub running: Vec<RunningStats>,
    stem: AgcLayer,
    stem_bn: BatchNorm,
    stages: Vec<Vec<RagcBlock>>,
    fc1: Linear,
    fc2: Linear,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub batch_stats: Vec<(usize, BatchStats)>,
    /// Node count of the graph entering each stage, starting with the input graph.
    pub stage_nodes: Vec<usize>,
}

impl Network {
    /// Build with parameters drawn from `config.seed`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::build(config, &mut rng)
    }

    pub fn build(config: NetworkConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let a = config.attr_mode.dim();
        let hidden = config.filter_hidden.clone();
        let stem = AgcLayer::new(&mut params, "stem", a, &hidden, 1, config.stem_width, config.kernel, rng);
        let stem_bn = BatchNorm::new(&mut params, "stem.bn", config.stem_width, &mut running);
        let options = BlockOptions {
            residual: config.residual,
            batch_norm: true,
            activation: config.activation,
            kernel: config.kernel,
        };
        let mut width = config.stem_width;
        let mut stages = Vec::new();
        for (s, &w) in config.stage_widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage {
                let name = format!("stage{s}.block{b}");
                blocks.push(RagcBlock::new(&mut params, &mut running, &name, a, &hidden, width, w, options, rng));
                width = w;
            }
            stages.push(blocks);
        }
        let fc1 = Linear::new(&mut params, "fc1", width, config.fc_width, rng);
        let fc2 = Linear::new(&mut params, "fc2", config.fc_width, config.classes, rng);
        Ok(Self {
            config,
            params,
            running,
            stem,
            stem_bn,
            stages,
            fc1,
            fc2,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Number of voxel max-pooling layers.
    pub fn num_poolings(&self) -> usize {
        self.stages.len() + 1
    }

    /// Number of RAGC (or plain) blocks.
    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        clouds: &[&PointCloud],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput> {
        let vars = tape.params(&self.params);
        self.forward_with_vars(tape, &vars, clouds, mode, rng)
    }

    /// Forward pass with caller-supplied parameter handles (one per
    /// parameter, in store order).
    pub fn forward_with_vars(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        clouds: &[&PointCloud],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput> {
        if clouds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let cfg = &self.config;
        let mut f = Forward {
            tape,
            vars,
            mode,
            running: &self.running,
            batch_stats: Vec::new(),
            rng,
        };
        let mut graph = construct_batch_graph(clouds, cfg.edge_policy(0), cfg.attr_mode)?;
        let mut stage_nodes = vec![graph.num_nodes()];
        let mut x = f.tape.leaf(graph.node_features.clone(), false);
        let mut attrs = f.tape.leaf(graph.edge_attrs.clone(), false);

        x = self.stem.forward(&mut f, x, edge_input(&graph, attrs))?;
        x = self.stem_bn.forward(&mut f, x)?;
        x = f.tape.relu(x)?;

        for (s, blocks) in self.stages.iter().enumerate() {
            (x, graph) = pool(&mut f, x, &graph, cfg.pool_radii[s], cfg.edge_policy(s + 1), cfg.attr_mode)?;
            stage_nodes.push(graph.num_nodes());
            attrs = f.tape.leaf(graph.edge_attrs.clone(), false);
            for block in blocks {
                x = block.forward(&mut f, x, edge_input(&graph, attrs))?;
            }
        }
        let last = self.stages.len();
        (x, graph) = pool(&mut f, x, &graph, cfg.pool_radii[last], cfg.edge_policy(last + 1), cfg.attr_mode)?;
        stage_nodes.push(graph.num_nodes());

        x = readout(f.tape, x, &graph.batch, graph.num_samples)?;
        x = self.fc1.forward(&mut f, x)?;
        x = f.tape.relu(x)?;
        if mode == Mode::Train && cfg.dropout > 0.0 {
            x = f.tape.dropout(x, cfg.dropout, f.rng)?;
        }
        let logits = self.fc2.forward(&mut f, x)?;
        Ok(ForwardOutput {
            logits,
            batch_stats: f.batch_stats,
            stage_nodes,
        })
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (slot, s) in stats {
            self.running[*slot].update(s, BN_MOMENTUM);
        }
    }

    /// Replace the running statistics by the average batch statistics of
    /// train-mode passes over `data` with the current weights.
    pub fn recalibrate_batch_norm(&mut self, data: &[&PointCloud], batch_size: usize) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut sums: Vec<RunningStats> = self
            .running
            .iter()
            .map(|r| RunningStats {
                mean: vec![0.0; r.mean.len()],
                var: vec![0.0; r.var.len()],
            })
            .collect();
        let mut batches = 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut chunks: Vec<&[&PointCloud]> = data.chunks(batch_size.max(2)).collect();
        if chunks.len() >= 2 && chunks.last().is_some_and(|c| c.len() == 1) {
            chunks.pop();
        }
        for chunk in chunks {
            let mut tape = Tape::new();
            let out = self.forward(&mut tape, chunk, Mode::Train, &mut rng)?;
            for (slot, st) in &out.batch_stats {
                for (a, b) in sums[*slot].mean.iter_mut().zip(&st.mean) {
                    *a += b;
                }
                for (a, b) in sums[*slot].var.iter_mut().zip(&st.var) {
                    *a += b;
                }
            }
            batches += 1;
        }
        let inv = 1.0 / batches as f64;
        for (r, s) in self.running.iter_mut().zip(sums) {
            r.mean = s.mean.into_iter().map(|v| v * inv).collect();
            r.var = s.var.into_iter().map(|v| v * inv).collect();
        }
        Ok(())
    }

    /// Eval-mode logits, `[B × classes]`.
    pub fn logits(&self, clouds: &[&PointCloud]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, clouds, Mode::Eval, &mut rng)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Class probabilities (softmax of the eval-mode logits), one row per cloud.
    pub fn predict(&self, clouds: &[&PointCloud]) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(clouds)?;
        let c = self.config.classes;
        let probs = crate::autodiff::softmax_rows(logits.data(), c);
        Ok(probs.chunks(c).map(<[f64]>::to_vec).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (slot, rs) in self.running.iter().enumerate() {
            let d = rs.mean.len();
            entries.push((format!("running.{slot}.mean"), Tensor::new(vec![d], rs.mean.clone()).expect("shape")));
            entries.push((format!("running.{slot}.var"), Tensor::new(vec![d], rs.var.clone()).expect("shape")));
        }
        Checkpoint {
            metadata: crate::config::network_to_kv(&self.config),
            entries,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = crate::config::network_from_kv(&ckpt.metadata)?;
        let mut net = Self::new(config)?;
        let mut values = Vec::with_capacity(net.params.len());
        for p in net.params.iter() {
            let t = ckpt
                .get(&p.name)
                .ok_or_else(|| Error::Malformed(format!("checkpoint lacks parameter {}", p.name)))?;
            values.push(t.clone());
        }
        net.params.set_values(values)?;
        for (slot, rs) in net.running.iter_mut().enumerate() {
            let fetch = |what: &str| {
                ckpt.get(&format!("running.{slot}.{what}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::Malformed(format!("checkpoint lacks running.{slot}.{what}")))
            };
            let (mean, var) = (fetch("mean")?, fetch("var")?);
            if mean.len() != rs.mean.len() || var.len() != rs.var.len() {
                return Err(Error::Malformed(format!("running statistics {slot} have the wrong width")));
            }
            rs.mean = mean;
            rs.var = var;
        }
        Ok(net)
    }
}

fn edge_input(graph: &GeometricGraph, attrs: Var) -> EdgeInput<'_> {
    EdgeInput {
        adjacency: &graph.adjacency,
        attrs,
    }
}

fn pool(
    f: &mut Forward,
    x: Var,
    graph: &GeometricGraph,
    r_p: f64,
    next: EdgePolicy,
    attr_mode: AttrMode,
) -> Result<(Var, GeometricGraph)> {
    let plan = VoxelPlan::build(&graph.positions, &graph.batch, graph.num_samples, r_p)?;
    let pooled = plan.pool_features(f.tape, x, PoolMode::Max)?;
    let rebuilt = plan.rebuild(next, attr_mode)?;
    Ok((pooled, rebuilt))
}
