use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ScaledParams;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// `s / (1 + exp(-s))`.
pub fn silu(s: f64) -> f64 {
    s / (1.0 + (-s).exp())
}

pub fn silu_derivative(s: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-s).exp());
    sig * (1.0 + s * (1.0 - sig))
}

/// One affine layer. Hidden layers apply SiLU, the last one is linear. With
/// `residual` set the layer input is added to its output.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub residual: bool,
}

impl Layer {
    pub fn in_width(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_width(&self) -> usize {
        self.weights.nrows()
    }
}

/// Feedforward network approximating `q -> k~*(q)` for `N` constraints on
/// `R^m`; input width `N (m + 1) + 1`, output width `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    n_constraints: usize,
    input_dim: usize,
    layers: Vec<Layer>,
}

/// Gradient of a scalar loss with respect to every weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpModel {
    /// Builds a model from explicit layers, checking widths and skips.
    pub fn from_layers(n_constraints: usize, input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if n_constraints == 0 || input_dim == 0 {
            return Err(Error::contract("a model needs N >= 1 and m >= 1"));
        }
        let Some(last) = layers.last() else {
            return Err(Error::contract("a model needs at least one layer"));
        };
        if last.out_width() != input_dim {
            return Err(Error::Schema(format!(
                "last layer has width {}, expected m = {input_dim}",
                last.out_width()
            )));
        }
        let mut width = ScaledParams::flat_dim(n_constraints, input_dim);
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_width() != width {
                return Err(Error::Schema(format!(
                    "layer {i} takes {} inputs but receives {width}",
                    layer.in_width()
                )));
            }
            if layer.biases.len() != layer.out_width() {
                return Err(Error::Schema(format!("layer {i} has a bias of the wrong length")));
            }
            if layer.residual && layer.in_width() != layer.out_width() {
                return Err(Error::Schema(format!(
                    "layer {i} has a residual skip between widths {} and {}",
                    layer.in_width(),
                    layer.out_width()
                )));
            }
            width = layer.out_width();
        }
        Ok(Self {
            n_constraints,
            input_dim,
            layers,
        })
    }

    /// Random initialization with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
    /// weights and biases. `hidden` lists the hidden widths; a residual skip is
    /// placed on every hidden layer whose input and output widths agree when
    /// `residual` is set.
    pub fn new(n_constraints: usize, input_dim: usize, hidden: &[usize], residual: bool, seed: u64) -> Result<Self> {
        if hidden.contains(&0) {
            return Err(Error::contract("hidden widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut width = ScaledParams::flat_dim(n_constraints, input_dim);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        for (i, &out) in hidden.iter().chain(std::iter::once(&input_dim)).enumerate() {
            let bound = 1.0 / (width as f64).sqrt();
            let weights = DMatrix::from_fn(out, width, |_, _| rng.random_range(-bound..=bound));
            let biases = DVector::from_fn(out, |_, _| rng.random_range(-bound..=bound));
            let is_hidden = i < hidden.len();
            layers.push(Layer {
                weights,
                biases,
                residual: residual && is_hidden && out == width,
            });
            width = out;
        }
        Self::from_layers(n_constraints, input_dim, layers)
    }

    /// Four hidden layers of 64 for `N = m = 2`.
    pub fn two_dimensional(seed: u64) -> Self {
        Self::new(2, 2, &[64; 4], false, seed).expect("valid architecture")
    }

    /// Residual network for `N = m = 10`: hidden widths 256 x 5 then 128.
    pub fn ten_dimensional(seed: u64) -> Self {
        Self::new(10, 10, &[256, 256, 256, 256, 256, 128], true, seed).expect("valid architecture")
    }

    pub fn n_constraints(&self) -> usize {
        self.n_constraints
    }

    /// `m`, the output width.
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// `N (m + 1) + 1`.
    pub fn feature_dim(&self) -> usize {
        ScaledParams::flat_dim(self.n_constraints, self.input_dim)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn forward(&self, features: &[f64]) -> Result<DVector<f64>> {
        if features.len() != self.feature_dim() {
            return Err(Error::contract(format!(
                "model expects {} features, got {}",
                self.feature_dim(),
                features.len()
            )));
        }
        let mut a = DVector::from_column_slice(features);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * &a + &layer.biases;
            if i < last {
                z.apply(|s| *s = silu(*s));
            }
            if layer.residual {
                z += &a;
            }
            a = z;
        }
        Ok(a)
    }

    /// Prediction for scaled parameters.
    pub fn predict(&self, q: &ScaledParams) -> Result<DVector<f64>> {
        if q.base().n_constraints() != self.n_constraints || q.base().input_dim() != self.input_dim {
            return Err(Error::contract(format!(
                "model is for N = {}, m = {} but the parameters have N = {}, m = {}",
                self.n_constraints,
                self.input_dim,
                q.base().n_constraints(),
                q.base().input_dim()
            )));
        }
        self.forward(&q.to_flat())
    }

    /// Forward pass over the columns of `inputs` (`feature_dim x batch`).
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.trace(inputs)?.1.pop().expect("at least one layer"))
    }

    /// Pre-activations and activations of every layer; `activations[0]` is
    /// the input.
    fn trace(&self, inputs: &DMatrix<f64>) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
        if inputs.nrows() != self.feature_dim() {
            return Err(Error::contract(format!(
                "model expects {} features, got {}",
                self.feature_dim(),
                inputs.nrows()
            )));
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len() + 1);
        act.push(inputs.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = act.last().expect("input pushed");
            let mut z = &layer.weights * prev;
            for mut col in z.column_iter_mut() {
                col += &layer.biases;
            }
            let mut a = if i < last { z.map(silu) } else { z.clone() };
            if layer.residual {
                a += prev;
            }
            pre.push(z);
            act.push(a);
        }
        Ok((pre, act))
    }

    /// Mean squared error over all entries and its exact gradient.
    /// `inputs` is `feature_dim x batch`, `targets` is `m x batch`.
    pub fn mse_and_gradients(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(f64, Gradients)> {
        if targets.nrows() != self.input_dim || targets.ncols() != inputs.ncols() {
            return Err(Error::contract("targets do not match the model output or batch size"));
        }
        let (pre, act) = self.trace(inputs)?;
        let residual = act.last().expect("output") - targets;
        let count = residual.len() as f64;
        let loss = residual.norm_squared() / count;

        let n_layers = self.layers.len();
        let mut weights = vec![DMatrix::zeros(0, 0); n_layers];
        let mut biases = vec![DVector::zeros(0); n_layers];
        // gradient with respect to the current layer's output
        let mut upstream = residual * (2.0 / count);
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            let dz = if i + 1 < n_layers {
                upstream.zip_map(&pre[i], |g, z| g * silu_derivative(z))
            } else {
                upstream.clone()
            };
            weights[i] = &dz * act[i].transpose();
            biases[i] = dz.column_sum();
            if i > 0 {
                let mut down = layer.weights.tr_mul(&dz);
                if layer.residual {
                    down += &upstream;
                }
                upstream = down;
            }
        }
        Ok((loss, Gradients { weights, biases }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&ModelFile::from(self))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }
}

/// On-disk layout: weights row-major per layer.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    #[serde(rename = "N")]
    n: usize,
    m: usize,
    layer_widths: Vec<usize>,
    residual_flags: Vec<bool>,
    activation: String,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<&MlpModel> for ModelFile {
    fn from(model: &MlpModel) -> Self {
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            n: model.n_constraints,
            m: model.input_dim,
            layer_widths: model.layers.iter().map(Layer::out_width).collect(),
            residual_flags: model.layers.iter().map(|l| l.residual).collect(),
            activation: "silu".into(),
            weights: model
                .layers
                .iter()
                .map(|l| l.weights.transpose().as_slice().to_vec())
                .collect(),
            biases: model.layers.iter().map(|l| l.biases.as_slice().to_vec()).collect(),
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<MlpModel> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.activation != "silu" {
            return Err(Error::Schema(format!("unsupported activation {:?}", self.activation)));
        }
        let count = self.layer_widths.len();
        if self.residual_flags.len() != count || self.weights.len() != count || self.biases.len() != count {
            return Err(Error::Schema(format!(
                "{count} layer widths but {} residual flags, {} weight arrays and {} bias arrays",
                self.residual_flags.len(),
                self.weights.len(),
                self.biases.len()
            )));
        }
        let mut width = ScaledParams::flat_dim(self.n, self.m);
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let out = self.layer_widths[i];
            if self.weights[i].len() != out * width {
                return Err(Error::Schema(format!(
                    "layer {i}: expected {out} x {width} = {} weights, found {}",
                    out * width,
                    self.weights[i].len()
                )));
            }
            if self.biases[i].len() != out {
                return Err(Error::Schema(format!(
                    "layer {i}: expected {out} biases, found {}",
                    self.biases[i].len()
                )));
            }
            layers.push(Layer {
                weights: DMatrix::from_row_slice(out, width, &self.weights[i]),
                biases: DVector::from_column_slice(&self.biases[i]),
                residual: self.residual_flags[i],
            });
            width = out;
        }
        MlpModel::from_layers(self.n, self.m, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert_relative_eq!(silu(10.0), 9.999_546_021_312_976, max_relative = 1e-14);
        // derivative against central differences
        for s in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(s + h) - silu(s - h)) / (2.0 * h);
            assert_relative_eq!(silu_derivative(s), fd, max_relative = 1e-8);
        }
    }

    #[test]
    fn architectures_have_expected_widths() {
        let small = MlpModel::two_dimensional(0);
        assert_eq!(small.feature_dim(), 7);
        assert_eq!(small.layers().len(), 5);
        assert!(small.layers().iter().all(|l| !l.residual));
        let large = MlpModel::ten_dimensional(0);
        assert_eq!(large.feature_dim(), 111);
        let flags: Vec<bool> = large.layers().iter().map(|l| l.residual).collect();
        assert_eq!(flags, vec![false, true, true, true, true, false, false]);
        assert_eq!(large.forward(&[0.1; 111]).unwrap().len(), 10);
    }

    #[test]
    fn zero_weights_return_final_bias() {
        let mut model = MlpModel::new(2, 2, &[8, 8], false, 3).unwrap();
        for layer in model.layers_mut() {
            layer.weights.fill(0.0);
        }
        let out = model.forward(&[0.3, -0.2, 0.1, 0.5, -0.7, 0.2, 0.9]).unwrap();
        assert_eq!(out, model.layers().last().unwrap().biases);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = MlpModel::two_dimensional(1);
        assert!(matches!(model.forward(&[0.0; 6]), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_forward_matches_single() {
        let model = MlpModel::new(2, 2, &[6, 6], true, 9).unwrap();
        let inputs = DMatrix::from_fn(7, 4, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let batch = model.forward_batch(&inputs).unwrap();
        for j in 0..4 {
            let single = model.forward(inputs.column(j).as_slice()).unwrap();
            assert_relative_eq!(batch.column(j).into_owned(), single, epsilon = 1e-14);
        }
    }

    fn finite_difference_check(model: &MlpModel, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) {
        let (_, grads) = model.mse_and_gradients(inputs, targets).unwrap();
        let h = 1e-6;
        let loss_with = |m: &MlpModel| m.mse_and_gradients(inputs, targets).unwrap().0;
        for l in 0..model.layers().len() {
            for idx in 0..model.layers()[l].weights.len() {
                let mut plus = model.clone();
                plus.layers_mut()[l].weights[idx] += h;
                let mut minus = model.clone();
                minus.layers_mut()[l].weights[idx] -= h;
                let fd = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);
                let exact = grads.weights[l][idx];
                assert!((fd - exact).abs() <= 1e-5 * exact.abs().max(1e-3), "w[{l}][{idx}]: {fd} vs {exact}");
            }
            for idx in 0..model.layers()[l].biases.len() {
                let mut plus = model.clone();
                plus.layers_mut()[l].biases[idx] += h;
                let mut minus = model.clone();
                minus.layers_mut()[l].biases[idx] -= h;
                let fd = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);
                let exact = grads.biases[l][idx];
                assert!((fd - exact).abs() <= 1e-5 * exact.abs().max(1e-3), "b[{l}][{idx}]: {fd} vs {exact}");
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        // a 2-4-2 network: one hidden layer of 4 on top of the 7 features
        let model = MlpModel::new(2, 2, &[4], false, 11).unwrap();
        let inputs = DMatrix::from_fn(7, 5, |i, j| ((i + 2 * j) as f64 * 0.61).cos());
        let targets = DMatrix::from_fn(2, 5, |i, j| ((i + j) as f64 * 0.3).sin());
        finite_difference_check(&model, &inputs, &targets);

        let residual = MlpModel::new(1, 2, &[4, 4, 4], true, 5).unwrap();
        assert!(residual.layers()[1].residual);
        let inputs = DMatrix::from_fn(4, 5, |i, j| ((i * 5 + j) as f64 * 0.23).sin());
        finite_difference_check(&residual, &inputs, &targets);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let model = MlpModel::two_dimensional(21);
        let back = MlpModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        assert_eq!(MlpModel::load(&path).unwrap(), model);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = MlpModel::two_dimensional(2).to_json().unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(MlpModel::from_json(cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn mismatched_first_layer_is_a_schema_error() {
        // N = m = 2 declares 7 inputs; splice in the first layer of a 111-wide model
        let small: serde_json::Value = serde_json::from_str(&MlpModel::two_dimensional(2).to_json().unwrap()).unwrap();
        let wide = MlpModel::new(10, 10, &[64; 4], false, 2).unwrap();
        let wide: serde_json::Value = serde_json::from_str(&wide.to_json().unwrap()).unwrap();
        let mut spliced = small.clone();
        spliced["weights"][0] = wide["weights"][0].clone();
        let err = MlpModel::from_json(&spliced.to_string()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");

        let mut bad_skip = small;
        bad_skip["residual_flags"][0] = serde_json::Value::Bool(true);
        assert!(matches!(MlpModel::from_json(&bad_skip.to_string()), Err(Error::Schema(_))));
    }
}
