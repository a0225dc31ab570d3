//! Layered `key=value` settings: dataset defaults, then `--config`, then flags.

use std::collections::BTreeMap;
use std::path::Path;

use ragc::config::{apply_network_key, apply_train_key, network_to_kv, parse_kv_lines, train_to_kv};
use ragc::model::{NetworkConfig, PolicyKind};
use ragc::train::TrainConfig;

use crate::CliError;

/// Written by `synth` next to `index.tsv`; lowest-priority settings layer.
pub const DATASET_DEFAULTS: &str = "dataset.cfg";

/// Keys handled by the CLI itself rather than the library configs.
const CLI_KEYS: [&str; 5] = ["data", "out", "runs", "radius-scale", "checkpoint"];

#[derive(Clone, Debug, Default)]
pub struct Layers {
    pub values: BTreeMap<String, String>,
}

impl Layers {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Merge a `key=value` file over the current values.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let pairs = parse_kv_lines(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for (k, v) in pairs {
            if k == "config" {
                return Err(CliError::Usage(format!("{}: nested config files are not supported", path.display())));
            }
            self.values.insert(k, v);
        }
        Ok(())
    }

    pub fn merge_flags(&mut self, flags: &[(&str, Option<String>)]) {
        for (k, v) in flags {
            if let Some(v) = v {
                self.values.insert((*k).to_string(), v.clone());
            }
        }
    }
}

pub struct Resolved {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub runs: usize,
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Turn the merged layers into library configs. Unknown keys and invalid
/// combinations are usage errors.
pub fn resolve(layers: &Layers, classes: usize) -> Result<Resolved, CliError> {
    let mut net = NetworkConfig::reference(classes);
    let mut train = TrainConfig::default();
    if layers.get("policy") == Some("knn") && layers.get("k").is_none() {
        return Err(CliError::Usage("--policy knn requires --k <K>".into()));
    }
    if let Some(v) = layers.get("policy") {
        apply_network_key(&mut net, "policy", v).map_err(usage)?;
    }
    for (k, v) in &layers.values {
        if CLI_KEYS.contains(&k.as_str()) || k == "policy" {
            continue;
        }
        let in_net = apply_network_key(&mut net, k, v).map_err(usage)?;
        let in_train = apply_train_key(&mut train, k, v).map_err(usage)?;
        if !in_net && !in_train {
            return Err(CliError::Usage(format!("unknown setting {k:?}")));
        }
    }
    let radius_scale: f64 = match layers.get("radius-scale") {
        Some(v) => v.parse().map_err(|_| usage(format!("invalid radius-scale {v:?}")))?,
        None => 1.0,
    };
    if !(radius_scale.is_finite() && radius_scale > 0.0) {
        return Err(usage(format!("radius-scale must be positive, got {radius_scale}")));
    }
    net = net.with_radius_scale(radius_scale);
    let runs: usize = match layers.get("runs") {
        Some(v) => v.parse().map_err(|_| usage(format!("invalid runs {v:?}")))?,
        None => 1,
    };
    if runs == 0 {
        return Err(usage("runs must be at least 1"));
    }
    if let PolicyKind::Knn(0) = net.policy {
        return Err(usage("--k must be at least 1"));
    }
    net.validate().map_err(usage)?;
    train.validate().map_err(usage)?;
    Ok(Resolved {
        net,
        train,
        runs,
    })
}

/// Every setting with defaults materialized, in a form `--config` accepts.
pub fn describe(resolved: &Resolved, layers: &Layers) -> String {
    let mut s = String::from("# resolved configuration\n");
    for key in ["data", "out"] {
        if let Some(v) = layers.get(key) {
            s += &format!("{key}={v}\n");
        }
    }
    s += &format!("runs={}\n", resolved.runs);
    // Radii below are already scaled.
    s += &network_to_kv(&resolved.net);
    let train = train_to_kv(&resolved.train);
    s += &train.lines().filter(|l| !l.starts_with("seed=")).map(|l| format!("{l}\n")).collect::<String>();
    s
}
