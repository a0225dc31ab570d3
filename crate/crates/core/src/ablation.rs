//! Single-axis ablation sweeps over the network design choices.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::graph::AttrMode;
use crate::model::{Network, NetworkConfig, PolicyKind};
use crate::pointcloud::PointCloud;
use crate::train::{evaluate_model, train_model, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    EdgePolicy,
    EdgeAttrs,
    FilterDepth,
    Residual,
}

pub const ALL_AXES: [AblationAxis; 4] = [
    AblationAxis::EdgePolicy,
    AblationAxis::EdgeAttrs,
    AblationAxis::FilterDepth,
    AblationAxis::Residual,
];

/// Neighbor count used by the kNN side of the policy sweep.
pub const ABLATION_K: usize = 9;

#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub config: NetworkConfig,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::EdgePolicy => "edge-policy",
            AblationAxis::EdgeAttrs => "edge-attrs",
            AblationAxis::FilterDepth => "filter-depth",
            AblationAxis::Residual => "residual",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            AblationAxis::EdgePolicy => "Comparison of neighborhood policies",
            AblationAxis::EdgeAttrs => "Comparison of edge attributes",
            AblationAxis::FilterDepth => "Comparison of filter-generating network depths",
            AblationAxis::Residual => "Residual versus plain blocks",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ALL_AXES.into_iter().find(|a| a.name() == s)
    }

    /// The configurations compared along this axis, derived from `base`.
    pub fn variants(self, base: &NetworkConfig) -> Vec<Variant> {
        let with = |label: &str, f: &dyn Fn(&mut NetworkConfig)| {
            let mut config = base.clone();
            f(&mut config);
            Variant {
                label: label.to_string(),
                config,
            }
        };
        match self {
            AblationAxis::EdgePolicy => vec![
                with("radius", &|c| c.policy = PolicyKind::Radius),
                with(&format!("knn k={ABLATION_K}"), &|c| c.policy = PolicyKind::Knn(ABLATION_K)),
            ],
            AblationAxis::EdgeAttrs => [AttrMode::Cartesian, AttrMode::Spherical, AttrMode::Both]
                .into_iter()
                .map(|m| with(m.name(), &|c| c.attr_mode = m))
                .collect(),
            AblationAxis::FilterDepth => [vec![], vec![16], vec![32], vec![16, 32]]
                .into_iter()
                .map(|h| {
                    let label = if h.is_empty() {
                        "linear".to_string()
                    } else {
                        format!("fc {}", h.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-"))
                    };
                    with(&label, &|c| c.filter_hidden = h.clone())
                })
                .collect(),
            AblationAxis::Residual => vec![
                with("residual", &|c| c.residual = true),
                with("plain", &|c| c.residual = false),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub parameters: usize,
    pub final_loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.axis.title());
        s += &format!("{:<16} {:>10} {:>11} {:>12}\n", "configuration", "parameters", "final loss", "accuracy %");
        for r in &self.rows {
            s += &format!(
                "{:<16} {:>10} {:>11.4} {:>12.1}\n",
                r.label,
                r.parameters,
                r.final_loss,
                100.0 * r.accuracy
            );
        }
        if let (AblationAxis::Residual, [a, b]) = (self.axis, self.rows.as_slice()) {
            s += &format!("delta (residual - plain): {:+.1} points\n", 100.0 * (a.accuracy - b.accuracy));
        }
        s
    }

    /// Tab-separated: `axis configuration parameters final_loss accuracy seconds`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("axis\tconfiguration\tparameters\tfinal_loss\taccuracy\tseconds\n");
        for r in &self.rows {
            s += &format!(
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.3}\n",
                self.axis.name(),
                r.label,
                r.parameters,
                r.final_loss,
                r.accuracy,
                r.seconds
            );
        }
        s
    }
}

/// Train and evaluate one configuration.
pub fn run_variant(
    variant: &Variant,
    train_cfg: &TrainConfig,
    train: &[PointCloud],
    test: &[PointCloud],
) -> Result<AblationRow> {
    let start = Instant::now();
    let mut net = Network::new(variant.config.clone())?;
    let outcome = train_model(&mut net, train, train_cfg)?;
    let metrics = evaluate_model(&net, test)?;
    Ok(AblationRow {
        label: variant.label.clone(),
        parameters: net.num_parameters(),
        final_loss: *outcome.loss_history.last().ok_or(Error::EmptyDataset)?,
        accuracy: metrics.accuracy,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_ablation(
    axis: AblationAxis,
    base: &NetworkConfig,
    train_cfg: &TrainConfig,
    train: &[PointCloud],
    test: &[PointCloud],
) -> Result<AblationTable> {
    let rows = axis
        .variants(base)
        .iter()
        .map(|v| run_variant(v, train_cfg, train, test))
        .collect::<Result<_>>()?;
    Ok(AblationTable { axis, rows })
}
