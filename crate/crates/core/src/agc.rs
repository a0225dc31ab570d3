//! Attention graph convolution, its dynamic filter network, and the
//! residual block built from two of them.
//!
//! An AGC layer computes, for every node `i`,
//!
//! ```text
//! X'_i = 1/|N(i)| · Σ_{j ∈ N(i)} Θ_ji · X_j + b
//! ```
//!
//! where `N(i)` are the sources of the edges into `i` (self-loop included)
//! and `Θ_ji` is a `d_out × d_in` matrix produced from the edge attributes
//! by a small FC/ReLU network.

use std::sync::Arc;

use rand::RngCore;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::layers::{BatchNorm, Forward, Linear, RunningStats};
use crate::tensor::ParamStore;

/// How the per-edge weights are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AgcKernel {
    /// Mix per-node basis responses; never stores one matrix per edge.
    #[default]
    Factored,
    /// Materialise `Θ` for every edge, then aggregate.
    Materialized,
}

/// Edge structure and attributes a layer convolves over.
#[derive(Clone, Copy)]
pub struct EdgeInput<'a> {
    pub adjacency: &'a Arc<Adjacency>,
    /// `E × a` attributes as a tape value.
    pub attrs: Var,
}

/// FC layers mapping an edge attribute vector to a flattened `d_out × d_in`
/// weight matrix (row-major, output-major). ReLU between layers, none after
/// the last.
#[derive(Clone, Debug)]
pub struct DynamicFilterNet {
    pub hidden: Vec<Linear>,
    pub last: Linear,
}

impl DynamicFilterNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        attr_dim: usize,
        hidden_widths: &[usize],
        d_in: usize,
        d_out: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let mut hidden = Vec::with_capacity(hidden_widths.len());
        let mut width = attr_dim;
        for (k, &w) in hidden_widths.iter().enumerate() {
            hidden.push(Linear::new(store, &format!("{name}.fc{k}"), width, w, rng));
            width = w;
        }
        let last = Linear::new(store, &format!("{name}.fc{}", hidden_widths.len()), width, d_in * d_out, rng);
        Self { hidden, last }
    }

    pub fn attr_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.last).d_in
    }

    /// Activations feeding the last FC layer, `E × m`.
    pub fn hidden_forward(&self, f: &mut Forward, attrs: Var) -> Result<Var> {
        let width = f.tape.value(attrs).dims2().1;
        if width != self.attr_dim() {
            return Err(Error::Config(format!(
                "edge attributes have width {width}, filter network expects {}",
                self.attr_dim()
            )));
        }
        let mut h = attrs;
        for layer in &self.hidden {
            h = layer.forward(f, h)?;
            h = f.tape.relu(h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct AgcLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub filter: DynamicFilterNet,
    pub bias: crate::tensor::ParamId,
    pub kernel: AgcKernel,
}

impl AgcLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        attr_dim: usize,
        filter_hidden: &[usize],
        d_in: usize,
        d_out: usize,
        kernel: AgcKernel,
        rng: &mut dyn RngCore,
    ) -> Self {
        let filter = DynamicFilterNet::new(store, &format!("{name}.filter"), attr_dim, filter_hidden, d_in, d_out, rng);
        let bias = store.add(format!("{name}.bias"), crate::tensor::Tensor::zeros(&[d_out]));
        Self {
            d_in,
            d_out,
            filter,
            bias,
            kernel,
        }
    }

    /// `Θ` for every edge, `E × (d_out·d_in)`.
    pub fn dynamic_filter_weights(&self, f: &mut Forward, attrs: Var) -> Result<Var> {
        let h = self.filter.hidden_forward(f, attrs)?;
        self.filter.last.forward(f, h)
    }

    pub fn forward(&self, f: &mut Forward, x: Var, edges: EdgeInput) -> Result<Var> {
        let width = f.tape.value(x).dims2().1;
        if width != self.d_in {
            return Err(Error::Shape {
                op: "agc_forward",
                left: vec![width],
                right: vec![self.d_in],
            });
        }
        let y = match self.kernel {
            AgcKernel::Factored => {
                let h = self.filter.hidden_forward(f, edges.attrs)?;
                let (w, b) = (f.var(self.filter.last.w), f.var(self.filter.last.b));
                f.tape.factored_edge_conv(h, w, b, x, edges.adjacency, self.d_out)?
            }
            AgcKernel::Materialized => {
                let theta = self.dynamic_filter_weights(f, edges.attrs)?;
                f.tape.edge_aggregate(theta, x, edges.adjacency)?
            }
        };
        let b = f.var(self.bias);
        f.tape.add_bias(y, b)
    }
}

/// Where the block's final ReLU sits relative to the shortcut addition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResidualActivation {
    /// `y = ReLU(F(x) + P(x))`
    #[default]
    PostAdd,
    /// `y = ReLU(F(x)) + P(x)`
    PreAdd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockOptions {
    pub residual: bool,
    pub batch_norm: bool,
    pub activation: ResidualActivation,
    pub kernel: AgcKernel,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            residual: true,
            batch_norm: true,
            activation: ResidualActivation::PostAdd,
            kernel: AgcKernel::Factored,
        }
    }
}

/// Two stacked AGC layers, `F = AGC → BN → ReLU → AGC → BN`, plus a
/// per-node linear projection shortcut `P` that is always applied in
/// residual mode. With `residual` off the block is `ReLU(F(x))`.
#[derive(Clone, Debug)]
pub struct RagcBlock {
    pub first: AgcLayer,
    pub second: AgcLayer,
    pub bn: Option<(BatchNorm, BatchNorm)>,
    pub projection: Option<Linear>,
    pub options: BlockOptions,
}

impl RagcBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        slots: &mut Vec<RunningStats>,
        name: &str,
        attr_dim: usize,
        filter_hidden: &[usize],
        d_in: usize,
        d_out: usize,
        options: BlockOptions,
        rng: &mut dyn RngCore,
    ) -> Self {
        let first = AgcLayer::new(store, &format!("{name}.agc0"), attr_dim, filter_hidden, d_in, d_out, options.kernel, rng);
        let second = AgcLayer::new(store, &format!("{name}.agc1"), attr_dim, filter_hidden, d_out, d_out, options.kernel, rng);
        let bn = options.batch_norm.then(|| {
            (
                BatchNorm::new(store, &format!("{name}.bn0"), d_out, slots),
                BatchNorm::new(store, &format!("{name}.bn1"), d_out, slots),
            )
        });
        let projection = options
            .residual
            .then(|| Linear::new(store, &format!("{name}.proj"), d_in, d_out, rng));
        Self {
            first,
            second,
            bn,
            projection,
            options,
        }
    }

    pub fn d_out(&self) -> usize {
        self.second.d_out
    }

    pub fn forward(&self, f: &mut Forward, x: Var, edges: EdgeInput) -> Result<Var> {
        let mut h = self.first.forward(f, x, edges)?;
        if let Some((bn0, _)) = &self.bn {
            h = bn0.forward(f, h)?;
        }
        h = f.tape.relu(h)?;
        h = self.second.forward(f, h, edges)?;
        if let Some((_, bn1)) = &self.bn {
            h = bn1.forward(f, h)?;
        }
        let Some(proj) = &self.projection else {
            return f.tape.relu(h);
        };
        let shortcut = proj.forward(f, x)?;
        match self.options.activation {
            ResidualActivation::PostAdd => {
                let y = f.tape.add(h, shortcut)?;
                f.tape.relu(y)
            }
            ResidualActivation::PreAdd => {
                let y = f.tape.relu(h)?;
                f.tape.add(y, shortcut)
            }
        }
    }
}
