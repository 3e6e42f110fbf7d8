use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, MlpModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Rows per Adam step; `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Update only the last layer.
    pub freeze_all_but_last: bool,
    /// Fraction of rows held out for validation.
    pub validation_fraction: f64,
    /// Drives the split and minibatch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 2000,
            batch_size: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            freeze_all_but_last: false,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::contract("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::contract("Adam needs beta1, beta2 in [0, 1) and epsilon > 0"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::contract("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    /// `None` without a validation split.
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub train_rows: usize,
    pub val_rows: usize,
}

impl TrainReport {
    pub fn final_val_mse(&self) -> Option<f64> {
        self.history.last().and_then(|s| s.val_mse)
    }
}

/// Deterministic train/validation split of the row indices.
pub fn split_indices(rows: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = if rows > 1 { ((rows as f64 * fraction).round() as usize).min(rows - 1) } else { 0 };
    let val = order.split_off(rows - held);
    (order, val)
}

/// Trains `model` in place by Adam on the mean squared error.
///
/// Stats are recorded after each epoch's updates: the training MSE over all
/// training rows and the validation MSE on the held-out rows.
pub fn train(model: &mut MlpModel, dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    if dataset.n_constraints() != model.n_constraints() || dataset.input_dim() != model.input_dim() {
        return Err(Error::contract(format!(
            "dataset is for N = {}, m = {} but the model is for N = {}, m = {}",
            dataset.n_constraints(),
            dataset.input_dim(),
            model.n_constraints(),
            model.input_dim()
        )));
    }
    let (train_idx, val_idx) = split_indices(dataset.len(), config.validation_fraction, config.seed);
    let (train_x, train_y) = dataset.columns(&train_idx);
    let (val_x, val_y) = dataset.columns(&val_idx);

    let first = if config.freeze_all_but_last { model.layers().len() - 1 } else { 0 };
    let mut adam = Adam::new(model, first);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let batch = config.batch_size.unwrap_or(order.len()).min(order.len());
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        if batch < order.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let (loss, grads) = if chunk.len() == order.len() {
                model.mse_and_gradients(&train_x, &train_y)?
            } else {
                let x = train_x.select_columns(chunk);
                let y = train_y.select_columns(chunk);
                model.mse_and_gradients(&x, &y)?
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            adam.step(model, &grads, config);
        }
        let train_mse = mse(model, &train_x, &train_y)?;
        let val_mse = if val_idx.is_empty() { None } else { Some(mse(model, &val_x, &val_y)?) };
        if !train_mse.is_finite() || val_mse.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        history.push(EpochStats {
            epoch,
            train_mse,
            val_mse,
        });
    }
    Ok(TrainReport {
        history,
        train_rows: train_idx.len(),
        val_rows: val_idx.len(),
    })
}

/// Mean squared error of the model over the columns of `x`.
pub fn mse(model: &MlpModel, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.ncols() == 0 {
        return Ok(0.0);
    }
    let pred = model.forward_batch(x)?;
    Ok((pred - y).norm_squared() / y.len() as f64)
}

struct Adam {
    first_layer: usize,
    t: i32,
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
}

impl Adam {
    fn new(model: &MlpModel, first_layer: usize) -> Self {
        let layers = model.layers();
        Self {
            first_layer,
            t: 0,
            m_w: layers.iter().map(|l| l.weights.map(|_| 0.0)).collect(),
            v_w: layers.iter().map(|l| l.weights.map(|_| 0.0)).collect(),
            m_b: layers.iter().map(|l| l.biases.map(|_| 0.0)).collect(),
            v_b: layers.iter().map(|l| l.biases.map(|_| 0.0)).collect(),
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &super::Gradients, config: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = config.learning_rate;
        let eps = config.epsilon;
        let update = |param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]| {
            for (((p, g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        };
        for (i, layer) in model.layers_mut().iter_mut().enumerate().skip(self.first_layer) {
            update(
                layer.weights.as_mut_slice(),
                grads.weights[i].as_slice(),
                self.m_w[i].as_mut_slice(),
                self.v_w[i].as_mut_slice(),
            );
            update(
                layer.biases.as_mut_slice(),
                grads.biases[i].as_slice(),
                self.m_b[i].as_mut_slice(),
                self.v_b[i].as_mut_slice(),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{sample_dataset, DatasetMeta};
    use rand::Rng;

    fn linear_dataset(rows: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = DMatrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..rows {
            let q = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            labels.push((&w * &q).as_slice().to_vec());
            features.push(q.as_slice().to_vec());
        }
        let meta = DatasetMeta {
            n_constraints: 1,
            m: 2,
            seed: 0,
            count: rows,
            label_tol: 0.0,
        };
        Dataset::new(meta, features, labels).unwrap()
    }

    #[test]
    fn linear_model_fits_linear_data() {
        let data = linear_dataset(200);
        let mut model = MlpModel::new(1, 2, &[], false, 1).unwrap();
        let config = TrainConfig {
            learning_rate: 1e-2,
            epochs: 500,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &data, &config).unwrap();
        let last = report.history.last().unwrap();
        assert!(last.train_mse < 1e-6, "{last:?}");
        assert_eq!(last.val_mse, None);
    }

    #[test]
    fn freezing_keeps_hidden_layers_bit_identical() {
        let data = sample_dataset(2, 2, 60, 1, 1e-6).unwrap();
        let mut model = MlpModel::new(2, 2, &[16, 16], false, 4).unwrap();
        let before = model.clone();
        let config = TrainConfig {
            epochs: 20,
            freeze_all_but_last: true,
            batch_size: Some(16),
            ..TrainConfig::default()
        };
        train(&mut model, &data, &config).unwrap();
        let n = model.layers().len();
        assert_eq!(model.layers()[..n - 1], before.layers()[..n - 1]);
        assert_ne!(model.layers()[n - 1], before.layers()[n - 1]);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = sample_dataset(2, 2, 300, 2, 1e-6).unwrap();
        let config = TrainConfig {
            epochs: 60,
            ..TrainConfig::default()
        };
        let mut a = MlpModel::new(2, 2, &[32, 32], false, 8).unwrap();
        let mut b = a.clone();
        let report = train(&mut a, &data, &config).unwrap();
        assert_eq!(report.train_rows + report.val_rows, 300);
        assert_eq!(report.val_rows, 30);
        let mean = |s: &[EpochStats]| s.iter().map(|e| e.train_mse).sum::<f64>() / s.len() as f64;
        assert!(mean(&report.history[50..]) < mean(&report.history[..10]));
        assert_eq!(train(&mut b, &data, &config).unwrap(), report);
        assert_eq!(a, b);
    }

    #[test]
    fn nan_labels_abort_with_epoch() {
        let mut data = linear_dataset(10);
        let mut labels = data.labels().to_vec();
        labels[3][0] = f64::NAN;
        data = Dataset::new(*data.meta(), data.features().to_vec(), labels).unwrap();
        let mut model = MlpModel::new(1, 2, &[4], false, 1).unwrap();
        let config = TrainConfig {
            epochs: 5,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut model, &data, &config), Err(Error::Diverged { epoch: 1 })));
    }

    #[test]
    fn config_and_shapes_are_checked() {
        let data = linear_dataset(10);
        let mut model = MlpModel::new(2, 2, &[4], false, 1).unwrap();
        assert!(train(&mut model, &data, &TrainConfig::default()).is_err());
        let mut model = MlpModel::new(1, 2, &[4], false, 1).unwrap();
        for bad in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: Some(0), ..TrainConfig::default() },
        ] {
            assert!(train(&mut model, &data, &bad).is_err());
        }
    }

    #[test]
    fn split_is_a_partition() {
        let (train_idx, val_idx) = split_indices(50, 0.1, 3);
        assert_eq!(val_idx.len(), 5);
        let mut all: Vec<usize> = train_idx.iter().chain(&val_idx).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_indices(50, 0.1, 3), (train_idx, val_idx));
    }
}
