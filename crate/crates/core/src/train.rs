//! Training loop and evaluation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::{AdamConfig, AdamState, Mode, Tape};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::pointcloud::{augment_cloud, AugmentConfig, PointCloud};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Share of the training set held out for best-checkpoint selection.
    pub val_fraction: f64,
    /// Epoch cadence for periodic checkpoints (0 disables them).
    pub checkpoint_every: usize,
    /// Training samples used to re-estimate batch-norm statistics at the end
    /// of every epoch (0 keeps the moving averages).
    pub bn_recalibration: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            adam: AdamConfig::default(),
            batch_size: 16,
            seed: 0,
            augment: AugmentConfig::default(),
            val_fraction: 0.1,
            checkpoint_every: 0,
            bn_recalibration: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.adam.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("validation fraction {} outside [0, 1)", self.val_fraction)));
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.mirror_prob) || !(0.0..1.0).contains(&a.removal_prob) {
            return Err(Error::Config("augmentation probabilities out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: Option<f64>,
}

pub struct TrainOutcome {
    pub loss_history: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
    /// Epoch (1-based) whose weights are in `best`.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    /// Best-by-validation weights, or the final ones without a validation split.
    pub best: Checkpoint,
}

const SPLIT_SALT: u64 = 0x5eed_5711;

/// Seeded train/validation split of `n` items.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    idx.shuffle(&mut rng);
    let n_val = if n >= 2 { ((n as f64) * val_fraction).round() as usize } else { 0 };
    let val = idx.split_off(n - n_val.min(n - 1));
    let mut train = idx;
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}


/// Group shuffled indices into batches; a trailing single-sample batch is
/// merged into its predecessor so train-mode batch norm always sees ≥ 2 rows.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

pub fn train_model(net: &mut Network, data: &[PointCloud], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_model_with(net, data, cfg, &mut |_, _| Ok(()))
}

/// Train with a per-epoch callback (logging, periodic checkpoints).
pub fn train_model_with(
    net: &mut Network,
    data: &[PointCloud],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochSummary, &Network) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = net.config.classes;
    let labels = labels_of(data, classes)?;
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let val: Vec<PointCloud> = val_idx.iter().map(|&i| data[i].clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam, &net.params);
    let mut outcome = TrainOutcome {
        loss_history: Vec::with_capacity(cfg.epochs),
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_accuracy: None,
        best: net.to_checkpoint(),
    };
    let calibration: Vec<&PointCloud> = train_idx.iter().take(cfg.bn_recalibration).map(|&i| &data[i]).collect();
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let clouds: Vec<PointCloud> = batch
                .iter()
                .map(|&i| {
                    if cfg.augment.is_identity() {
                        data[i].clone()
                    } else {
                        augment_cloud(&data[i], &mut rng, &cfg.augment)
                    }
                })
                .collect();
            let refs: Vec<&PointCloud> = clouds.iter().collect();
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = train_step(net, &mut adam, &refs, &targets, &mut rng)
                .map_err(|e| diverged(e, epoch, b, net))?;
            total += loss * batch.len() as f64;
        }
        let mean_loss = total / order.len() as f64;
        if !calibration.is_empty() {
            net.recalibrate_batch_norm(&calibration, cfg.batch_size)?;
        }
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(evaluate_model(net, &val)?.accuracy)
        };
        let improved = match (val_accuracy, outcome.best_val_accuracy) {
            (Some(a), Some(best)) => a > best,
            _ => true,
        };
        if improved {
            outcome.best_epoch = epoch;
            outcome.best_val_accuracy = val_accuracy;
            outcome.best = net.to_checkpoint();
        }
        let summary = EpochSummary {
            epoch,
            mean_loss,
            val_accuracy,
        };
        on_epoch(&summary, net)?;
        outcome.loss_history.push(mean_loss);
        outcome.epochs.push(summary);
    }
    Ok(outcome)
}

/// Forward, loss, backward and one optimizer update. Returns the batch loss.
pub fn train_step(
    net: &mut Network,
    adam: &mut AdamState,
    clouds: &[&PointCloud],
    targets: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, clouds, Mode::Train, rng)?;
    let loss = tape.softmax_cross_entropy(out.logits, targets)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss", index: 0 });
    }
    tape.backward(loss)?;
    tape.write_param_grads(&mut net.params);
    adam.step(&mut net.params)?;
    net.apply_batch_stats(&out.batch_stats);
    Ok(value)
}

fn diverged(e: Error, epoch: usize, batch: usize, net: &Network) -> Error {
    match e {
        Error::NonFinite { .. } => {
            let mut norms: Vec<(f64, &str)> = net.params.iter().map(|p| (p.value.l2_norm(), p.name.as_str())).collect();
            norms.sort_by(|a, b| b.0.total_cmp(&a.0));
            let norms = norms
                .iter()
                .take(5)
                .map(|(n, name)| format!("{name}={n:.3e}"))
                .collect::<Vec<_>>()
                .join(", ");
            Error::Diverged { epoch, batch, norms }
        }
        other => other,
    }
}

fn labels_of(data: &[PointCloud], classes: usize) -> Result<Vec<usize>> {
    data.iter()
        .enumerate()
        .map(|(i, pc)| match pc.label {
            Some(l) if l < classes => Ok(l),
            Some(l) => Err(Error::Label { index: i, label: l, classes }),
            None => Err(Error::Data {
                index: i,
                reason: "sample has no label".into(),
            }),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub classes: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated data.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub loss_history: Vec<f64>,
}

impl Metrics {
    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (i, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
            if t >= classes || p >= classes {
                return Err(Error::Label {
                    index: i,
                    label: t.max(p),
                    classes,
                });
            }
            confusion[t][p] += 1;
        }
        let total: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        Ok(Self {
            classes,
            confusion,
            accuracy: trace as f64 / total as f64,
            per_class_accuracy,
            loss_history: Vec::new(),
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes).map(|c| self.confusion[c][c]).sum()
    }

    /// Human-readable report.
    pub fn report(&self, class_names: &[String]) -> String {
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let mut s = format!(
            "samples: {}\naccuracy: {:.4} ({}/{})\nper-class accuracy:\n",
            self.total(),
            self.accuracy,
            self.trace(),
            self.total()
        );
        for (c, acc) in self.per_class_accuracy.iter().enumerate() {
            match acc {
                Some(a) => s += &format!("  {:<16} {:.4}\n", name(c), a),
                None => s += &format!("  {:<16} n/a\n", name(c)),
            }
        }
        s += "confusion (rows = true, columns = predicted):\n";
        for row in &self.confusion {
            s += &row.iter().map(|v| format!("{v:>6}")).collect::<String>();
            s += "\n";
        }
        s
    }

    /// Tab-separated table: one row per true class with the predicted counts,
    /// row total and class accuracy, then an `overall` row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in 0..self.classes {
            s += &format!("\t{c}");
        }
        s += "\ttotal\taccuracy\n";
        for (c, row) in self.confusion.iter().enumerate() {
            s += &c.to_string();
            for v in row {
                s += &format!("\t{v}");
            }
            let acc = self.per_class_accuracy[c].map_or("nan".to_string(), |a| format!("{a:.6}"));
            s += &format!("\t{}\t{acc}\n", row.iter().sum::<usize>());
        }
        s += "overall";
        for p in 0..self.classes {
            s += &format!("\t{}", (0..self.classes).map(|t| self.confusion[t][p]).sum::<usize>());
        }
        s += &format!("\t{}\t{:.6}\n", self.total(), self.accuracy);
        s
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 16;

/// Eval-mode accuracy and confusion matrix. Does not modify the network.
pub fn evaluate_model(net: &Network, data: &[PointCloud]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = net.config.classes;
    let truth = labels_of(data, classes)?;
    let mut predicted = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let refs: Vec<&PointCloud> = chunk.iter().collect();
        let logits = net.logits(&refs)?;
        predicted.extend((0..chunk.len()).map(|i| argmax(logits.row(i))));
    }
    Metrics::from_predictions(classes, &truth, &predicted)
}
