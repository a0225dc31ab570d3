//! Parameterised building blocks shared by the graph layers and the head.

use rand::{Rng, RngCore};

use crate::autodiff::{BatchStats, Mode, Tape, Var};
use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// State threaded through one forward pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    /// Tape handles of every parameter, indexed by `ParamId`.
    pub vars: &'a [Var],
    pub mode: Mode,
    pub running: &'a [RunningStats],
    /// Batch statistics produced in train mode, keyed by batch-norm slot.
    pub batch_stats: Vec<(usize, BatchStats)>,
    pub rng: &'a mut dyn RngCore,
}

impl Forward<'_> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Uniform in `±1/√fan_in`, zero bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut dyn RngCore) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w: Vec<f64> = (0..d_in * d_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        let w = store.add(format!("{name}.weight"), Tensor::new(vec![d_in, d_out], w).expect("shape"));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (w, b) = (f.var(self.w), f.var(self.b));
        f.tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Index into the network's running statistics.
    pub slot: usize,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, slots: &mut Vec<RunningStats>) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        slots.push(RunningStats::new(dim));
        Self {
            gamma,
            beta,
            slot: slots.len() - 1,
            dim,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (gamma, beta) = (f.var(self.gamma), f.var(self.beta));
        match f.mode {
            Mode::Train => {
                let (y, stats) = f.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                f.batch_stats.push((self.slot, stats));
                Ok(y)
            }
            Mode::Eval => {
                let rs = &f.running[self.slot];
                f.tape.batch_norm_eval(x, gamma, beta, &rs.mean, &rs.var, BN_EPS)
            }
        }
    }
}
