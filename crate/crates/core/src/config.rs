//! Line-oriented `key=value` configuration. Keys match the CLI flag names.

use crate::agc::{AgcKernel, ResidualActivation};
use crate::error::{Error, Result};
use crate::graph::AttrMode;
use crate::model::{NetworkConfig, PolicyKind};
use crate::train::TrainConfig;

/// Split `key=value` lines, skipping blanks and `#` comments.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value {value:?} for {key}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| num(key, s.trim())).collect()
}

fn on_off(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn flag(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Apply one key to a network config. Returns `false` for keys it does not own.
/// `k` only takes effect together with `policy=knn`.
pub fn apply_network_key(cfg: &mut NetworkConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "classes" => cfg.classes = num(key, value)?,
        "policy" => {
            cfg.policy = match value {
                "radius" => PolicyKind::Radius,
                "knn" => match cfg.policy {
                    PolicyKind::Knn(k) => PolicyKind::Knn(k),
                    PolicyKind::Radius => PolicyKind::Knn(0),
                },
                _ => return Err(bad(key, value)),
            }
        }
        "k" => {
            let k: usize = num(key, value)?;
            if let PolicyKind::Knn(_) = cfg.policy {
                cfg.policy = PolicyKind::Knn(k);
            }
        }
        "attrs" => cfg.attr_mode = AttrMode::parse(value).ok_or_else(|| bad(key, value))?,
        "filter-widths" => cfg.filter_hidden = list(key, value)?,
        "residual" => cfg.residual = on_off(key, value)?,
        "relu" => {
            cfg.activation = match value {
                "post-add" => ResidualActivation::PostAdd,
                "pre-add" => ResidualActivation::PreAdd,
                _ => return Err(bad(key, value)),
            }
        }
        "kernel" => {
            cfg.kernel = match value {
                "factored" => AgcKernel::Factored,
                "materialized" => AgcKernel::Materialized,
                _ => return Err(bad(key, value)),
            }
        }
        "stem-width" => cfg.stem_width = num(key, value)?,
        "stage-widths" => cfg.stage_widths = list(key, value)?,
        "blocks-per-stage" => cfg.blocks_per_stage = num(key, value)?,
        "fc-width" => cfg.fc_width = num(key, value)?,
        "graph-radii" => cfg.graph_radii = list(key, value)?,
        "pool-radii" => cfg.pool_radii = list(key, value)?,
        "dropout" => cfg.dropout = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn network_to_kv(cfg: &NetworkConfig) -> String {
    let (policy, k) = match cfg.policy {
        PolicyKind::Radius => ("radius", None),
        PolicyKind::Knn(k) => ("knn", Some(k)),
    };
    let mut lines = vec![
        format!("classes={}", cfg.classes),
        format!("policy={policy}"),
    ];
    if let Some(k) = k {
        lines.push(format!("k={k}"));
    }
    lines.extend([
        format!("attrs={}", cfg.attr_mode.name()),
        format!("filter-widths={}", join(&cfg.filter_hidden)),
        format!("residual={}", flag(cfg.residual)),
        format!(
            "relu={}",
            match cfg.activation {
                ResidualActivation::PostAdd => "post-add",
                ResidualActivation::PreAdd => "pre-add",
            }
        ),
        format!(
            "kernel={}",
            match cfg.kernel {
                AgcKernel::Factored => "factored",
                AgcKernel::Materialized => "materialized",
            }
        ),
        format!("stem-width={}", cfg.stem_width),
        format!("stage-widths={}", join(&cfg.stage_widths)),
        format!("blocks-per-stage={}", cfg.blocks_per_stage),
        format!("fc-width={}", cfg.fc_width),
        format!("graph-radii={}", join(&cfg.graph_radii)),
        format!("pool-radii={}", join(&cfg.pool_radii)),
        format!("dropout={}", cfg.dropout),
        format!("seed={}", cfg.seed),
    ]);
    lines.join("\n") + "\n"
}

/// Parse a network config. Unknown keys are an error.
pub fn network_from_kv(text: &str) -> Result<NetworkConfig> {
    let mut cfg = NetworkConfig::reference(1);
    let pairs = parse_kv_lines(text)?;
    // `policy` must be seen before `k`.
    for (k, v) in pairs.iter().filter(|(k, _)| k == "policy") {
        apply_network_key(&mut cfg, k, v)?;
    }
    for (k, v) in &pairs {
        if !apply_network_key(&mut cfg, k, v)? {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "epochs" => cfg.epochs = num(key, value)?,
        "lr" => cfg.adam.lr = num(key, value)?,
        "weight-decay" => cfg.adam.weight_decay = num(key, value)?,
        "beta1" => cfg.adam.beta1 = num(key, value)?,
        "beta2" => cfg.adam.beta2 = num(key, value)?,
        "batch-size" => cfg.batch_size = num(key, value)?,
        "augment" => {
            if !on_off(key, value)? {
                cfg.augment = crate::pointcloud::AugmentConfig::disabled();
            }
        }
        "rotate" => cfg.augment.rotate = on_off(key, value)?,
        "mirror-prob" => cfg.augment.mirror_prob = num(key, value)?,
        "removal-prob" => cfg.augment.removal_prob = num(key, value)?,
        "val-fraction" => cfg.val_fraction = num(key, value)?,
        "checkpoint-every" => cfg.checkpoint_every = num(key, value)?,
        "bn-recalibration" => cfg.bn_recalibration = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn train_to_kv(cfg: &TrainConfig) -> String {
    [
        format!("epochs={}", cfg.epochs),
        format!("lr={}", cfg.adam.lr),
        format!("weight-decay={}", cfg.adam.weight_decay),
        format!("beta1={}", cfg.adam.beta1),
        format!("beta2={}", cfg.adam.beta2),
        format!("batch-size={}", cfg.batch_size),
        format!("rotate={}", flag(cfg.augment.rotate)),
        format!("mirror-prob={}", cfg.augment.mirror_prob),
        format!("removal-prob={}", cfg.augment.removal_prob),
        format!("val-fraction={}", cfg.val_fraction),
        format!("checkpoint-every={}", cfg.checkpoint_every),
        format!("bn-recalibration={}", cfg.bn_recalibration),
        format!("seed={}", cfg.seed),
    ]
    .join("\n")
        + "\n"
}
