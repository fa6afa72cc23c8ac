//! Supervised training with per-step cross-entropy and backpropagation
//! through time.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CellKind, ExpertDataset, PolicyModel, Standardizer};
use crate::error::{Error, Result};
use crate::vehicle::{VehicleParams, NUM_GEARS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub optimizer: Optimizer,
    /// Rescale gradients whose Euclidean norm exceeds this.
    pub clip_norm: f64,
    pub seed: u64,
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            learning_rate: 0.05,
            batch_size: 32,
            momentum: 0.9,
            optimizer: Optimizer::Momentum,
            clip_norm: 5.0,
            seed: 0,
            cell: CellKind::Gru,
            layers: 2,
            hidden: 64,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-step cross-entropy over the training split.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_samples: usize,
    pub val_samples: usize,
    pub history: Vec<EpochStats>,
    /// Epoch of the returned parameters; 0 means the initialization.
    pub best_epoch: usize,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// Accuracy of always predicting the most common training gear.
    pub majority_baseline: Option<f64>,
}

struct Encoded {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn mean_loss(model: &PolicyModel, data: &[Encoded]) -> f64 {
    let steps: usize = data.iter().map(|d| d.labels.len()).sum();
    let total: f64 = data.iter().map(|d| model.network.loss(&d.inputs, &d.labels)).sum();
    total / steps.max(1) as f64
}

fn accuracy(model: &PolicyModel, data: &[Encoded]) -> f64 {
    let mut hits = 0usize;
    let mut steps = 0usize;
    for d in data {
        for (z, &y) in model.network.forward(&d.inputs).iter().zip(&d.labels) {
            if super::argmax(z) == y {
                hits += 1;
            }
            steps += 1;
        }
    }
    hits as f64 / steps.max(1) as f64
}

/// Fits a policy to the dataset and returns the parameters with the lowest
/// held-out loss (training loss when nothing is held out).
pub fn train_policy(
    dataset: &ExpertDataset,
    cfg: &TrainConfig,
    params: &VehicleParams,
) -> Result<(PolicyModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Training("dataset has no samples".into()));
    }
    if cfg.batch_size == 0 || cfg.layers == 0 || cfg.hidden == 0 {
        return Err(Error::Training("batch size, layers and hidden width must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::Training("validation fraction must lie in [0, 1)".into()));
    }
    for s in &dataset.samples {
        s.validate()?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64) * cfg.validation_fraction).round() as usize;
    let n_val = n_val.min(dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut model = PolicyModel::new(cfg.cell, cfg.layers, cfg.hidden, cfg.seed);
    model.metadata.dataset_hash = dataset.hash();
    model.metadata.train_horizon = dataset.header.horizon;

    let features: Vec<_> = dataset.samples.iter().map(|s| s.bundle.features(params)).collect();
    if cfg.epochs > 0 {
        model.standardizer = Standardizer::fit(train_idx.iter().flat_map(|&i| features[i].iter()));
    }
    let encode = |idx: &[usize], st: &Standardizer| -> Vec<Encoded> {
        idx.iter()
            .map(|&i| Encoded {
                inputs: features[i].iter().map(|f| st.apply(f)).collect(),
                labels: dataset.samples[i].label_indices(),
            })
            .collect()
    };
    let train = encode(train_idx, &model.standardizer);
    let val = encode(val_idx, &model.standardizer);

    let majority_baseline = (!val.is_empty()).then(|| {
        let mut counts = [0usize; NUM_GEARS];
        train.iter().flat_map(|d| &d.labels).for_each(|&y| counts[y] += 1);
        let top = (0..NUM_GEARS).fold(0, |b, k| if counts[k] > counts[b] { k } else { b });
        let steps: usize = val.iter().map(|d| d.labels.len()).sum();
        let hits = val.iter().flat_map(|d| &d.labels).filter(|&&y| y == top).count();
        hits as f64 / steps.max(1) as f64
    });

    let score = |m: &PolicyModel| if val.is_empty() { mean_loss(m, &train) } else { mean_loss(m, &val) };
    let mut best = model.clone();
    let mut best_score = score(&model);
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);

    let np = model.network.params.len();
    let mut grad = vec![0.0; np];
    let mut m1 = vec![0.0; np];
    let mut m2 = vec![0.0; np];
    let mut t = 0i32;
    let mut batch_order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        batch_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for batch in batch_order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut steps = 0usize;
            for &i in batch {
                epoch_loss += model.network.loss_and_gradient(&train[i].inputs, &train[i].labels, &mut grad);
                steps += train[i].labels.len();
            }
            epoch_steps += steps;
            let scale = 1.0 / steps.max(1) as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Training(format!(
                    "gradient became non-finite in epoch {epoch} (loss so far {epoch_loss})"
                )));
            }
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            match cfg.optimizer {
                Optimizer::Momentum => {
                    for k in 0..np {
                        m1[k] = cfg.momentum * m1[k] + grad[k];
                        model.network.params[k] -= cfg.learning_rate * m1[k];
                    }
                }
                Optimizer::Adam => {
                    const B1: f64 = 0.9;
                    const B2: f64 = 0.999;
                    t += 1;
                    let c1 = 1.0 - B1.powi(t);
                    let c2 = 1.0 - B2.powi(t);
                    for k in 0..np {
                        m1[k] = B1 * m1[k] + (1.0 - B1) * grad[k];
                        m2[k] = B2 * m2[k] + (1.0 - B2) * grad[k] * grad[k];
                        model.network.params[k] -= cfg.learning_rate * (m1[k] / c1) / ((m2[k] / c2).sqrt() + 1e-8);
                    }
                }
            }
        }
        let train_loss = epoch_loss / epoch_steps.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::Training(format!("training loss diverged to {train_loss} in epoch {epoch}")));
        }
        let (val_loss, val_accuracy) =
            if val.is_empty() { (None, None) } else { (Some(mean_loss(&model, &val)), Some(accuracy(&model, &val))) };
        log::debug!("epoch {epoch}: train {train_loss:.4} val {val_loss:?} acc {val_accuracy:?}");
        let s = val_loss.unwrap_or_else(|| mean_loss(&model, &train));
        if s < best_score {
            best_score = s;
            best_epoch = epoch;
            best = model.clone();
        }
        history.push(EpochStats { epoch, train_loss, val_loss, val_accuracy });
    }

    best.metadata.epochs = cfg.epochs;
    best.metadata.best_epoch = best_epoch;
    let report = TrainReport {
        train_samples: train.len(),
        val_samples: val.len(),
        history,
        best_epoch,
        val_loss: (!val.is_empty()).then(|| mean_loss(&best, &val)),
        val_accuracy: (!val.is_empty()).then(|| accuracy(&best, &val)),
        majority_baseline,
    };
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::GearSchedule;
    use crate::policy::{DatasetHeader, ExpertSample, PolicyBundle, DATASET_FORMAT, DATASET_VERSION};
    use crate::vehicle::{Gear, ReducedInput, State};
    use rand::Rng;

    fn header(n: usize) -> DatasetHeader {
        DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            generator: "test".into(),
            seed: 0,
            episodes: 1,
            horizon: n,
            k_sim: 0,
        }
    }

    fn random_sample(rng: &mut ChaCha8Rng, n: usize, label: GearSchedule) -> ExpertSample {
        let mut v = rng.gen_range(8.0..30.0);
        let mut states = Vec::new();
        for i in 0..n {
            v += rng.gen_range(-0.5..0.5);
            states.push(State::new(i as f64 * v, v));
        }
        ExpertSample {
            episode: 0,
            step: 0,
            horizon: n,
            bundle: PolicyBundle {
                reference: states.iter().map(|s| State::new(s.p + rng.gen_range(-3.0..3.0), s.v + 0.5)).collect(),
                inputs: (0..n).map(|_| ReducedInput::new(rng.gen_range(0.0..300.0), 0.0)).collect(),
                gears: (0..n).map(|_| Gear::new(rng.gen_range(3..=6)).unwrap()).collect(),
                states,
            },
            label,
        }
    }

    fn small(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, hidden: 8, layers: 1, batch_size: 8, ..TrainConfig::default() }
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let p = VehicleParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = ExpertDataset {
            header: header(3),
            samples: (0..5)
                .map(|_| random_sample(&mut rng, 3, GearSchedule::from_numbers(&[4, 4, 5]).unwrap()))
                .collect(),
        };
        let cfg = small(0);
        let (m, r) = train_policy(&d, &cfg, &p).unwrap();
        let init = PolicyModel::new(cfg.cell, cfg.layers, cfg.hidden, cfg.seed);
        assert_eq!(m.network, init.network);
        assert_eq!(m.standardizer, init.standardizer);
        assert_eq!(r.best_epoch, 0);
        assert!(r.history.is_empty());
    }

    #[test]
    fn memorizes_a_repeated_sample() {
        let p = VehicleParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_sample(&mut rng, 5, GearSchedule::from_numbers(&[3, 4, 5, 5, 6]).unwrap());
        let d = ExpertDataset { header: header(5), samples: vec![s; 16] };
        let (_, r) = train_policy(&d, &small(200), &p).unwrap();
        let last = r.history.last().unwrap();
        assert!(last.train_loss < 0.01, "final loss {}", last.train_loss);
        assert!(r.val_loss.unwrap() < 0.01);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        let p = VehicleParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<_> = (0..400)
            .map(|_| {
                let g = Gear::new(rng.gen_range(1..=6)).unwrap();
                random_sample(&mut rng, 4, GearSchedule::constant(g, 4))
            })
            .collect();
        let d = ExpertDataset { header: header(4), samples };
        let cfg = TrainConfig { validation_fraction: 0.25, ..small(30) };
        let (_, r) = train_policy(&d, &cfg, &p).unwrap();
        let chance = (6.0f64).ln();
        assert!(r.val_loss.unwrap() >= chance - 0.2, "held-out loss {}", r.val_loss.unwrap());
    }

    #[test]
    fn learns_a_simple_rule_and_is_deterministic() {
        // Gear follows speed bands, which the features expose directly.
        let p = VehicleParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<_> = (0..300)
            .map(|_| {
                let s = random_sample(&mut rng, 3, GearSchedule::constant(Gear::LOWEST, 3));
                let gears: Vec<Gear> = s
                    .bundle
                    .states
                    .iter()
                    .map(|x| {
                        Gear::new(if x.v < 14.0 {
                            3
                        } else if x.v < 22.0 {
                            4
                        } else {
                            5
                        })
                        .unwrap()
                    })
                    .collect();
                ExpertSample { label: GearSchedule::new(gears).unwrap(), ..s }
            })
            .collect();
        let d = ExpertDataset { header: header(3), samples };
        let cfg = TrainConfig { optimizer: Optimizer::Adam, learning_rate: 0.01, ..small(40) };
        let (m1, r) = train_policy(&d, &cfg, &p).unwrap();
        assert!(r.val_accuracy.unwrap() > r.majority_baseline.unwrap() + 0.2);
        let (m2, _) = train_policy(&d, &cfg, &p).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn rejects_empty_dataset() {
        let d = ExpertDataset { header: header(3), samples: vec![] };
        assert!(matches!(train_policy(&d, &small(1), &VehicleParams::default()), Err(Error::Training(_))));
    }
}
