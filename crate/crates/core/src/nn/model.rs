use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the dense-layer initializer.
pub const DENSE_INIT_STD: f64 = 0.01;

/// Weight and bias tensors, one pair per parameterized layer.
///
/// Used for model parameters, gradients, and optimizer moments alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensors {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl ParamTensors {
    pub fn zeros_like(other: &ParamTensors) -> Self {
        ParamTensors {
            weights: other.weights.iter().map(Tensor::zeros_like).collect(),
            biases: other.biases.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn congruent(&self, other: &ParamTensors) -> bool {
        let same = |a: &[Tensor], b: &[Tensor]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        same(&self.weights, &other.weights) && same(&self.biases, &other.biases)
    }

    /// Every tensor, weights first then biases.
    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().chain(self.biases.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights.iter_mut().chain(self.biases.iter_mut())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.iter_mut() {
            t.as_mut_slice().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn sum_sq_diff(&self, other: &ParamTensors) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| a.sum_sq_diff(b))
            .sum()
    }
}

/// Where the weights of one parameterized layer live in the flat weight index space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightLayout {
    /// Index into `Architecture::layers` for each parameterized layer.
    pub layer_index: Vec<usize>,
    /// Start offset of each parameterized layer; the last entry is the total.
    pub offsets: Vec<usize>,
}

impl WeightLayout {
    pub fn for_arch(arch: &Architecture) -> Self {
        let mut layer_index = Vec::new();
        let mut offsets = vec![0];
        for (i, layer) in arch.param_layers() {
            let n: usize = layer.weight_shape().unwrap().iter().product();
            layer_index.push(i);
            offsets.push(offsets.last().unwrap() + n);
        }
        WeightLayout {
            layer_index,
            offsets,
        }
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_index.len()
    }

    /// Maps a global weight index to `(param layer, offset within layer)`.
    pub fn locate(&self, j: usize) -> (usize, usize) {
        assert!(j < self.total(), "weight index {j} out of range");
        let p = self.offsets.partition_point(|&o| o <= j) - 1;
        (p, j - self.offsets[p])
    }

    pub fn range(&self, p: usize) -> std::ops::Range<usize> {
        self.offsets[p]..self.offsets[p + 1]
    }
}

/// Network topology together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: Architecture,
    layout: WeightLayout,
    params: ParamTensors,
}

impl ModelParams {
    /// All-zero parameters for `arch`.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (_, layer) in arch.param_layers() {
            weights.push(Tensor::zeros(layer.weight_shape().unwrap()));
            biases.push(Tensor::zeros(vec![layer.bias_len().unwrap()]));
        }
        Ok(ModelParams {
            arch: arch.clone(),
            layout: WeightLayout::for_arch(arch),
            params: ParamTensors { weights, biases },
        })
    }

    pub fn from_params(arch: &Architecture, params: ParamTensors) -> Result<Self> {
        let model = Self::zeros(arch)?;
        if !model.params.congruent(&params) {
            return Err(Error::input(
                "parameter shapes do not match the architecture",
            ));
        }
        Ok(ModelParams { params, ..model })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &WeightLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamTensors {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTensors {
        &mut self.params
    }

    pub fn into_params(self) -> ParamTensors {
        self.params
    }

    /// Number of prunable weights (biases excluded).
    pub fn num_weights(&self) -> usize {
        self.layout.total()
    }

    pub fn weight(&self, j: usize) -> f64 {
        let (p, o) = self.layout.locate(j);
        self.params.weights[p].as_slice()[o]
    }

    pub fn set_weight(&mut self, j: usize, value: f64) {
        let (p, o) = self.layout.locate(j);
        self.params.weights[p].as_mut_slice()[o] = value;
    }

    /// Weights concatenated in global index order.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.params
            .weights
            .iter()
            .flat_map(|t| t.as_slice().iter().copied())
            .collect()
    }

    pub fn count_nonzero_weights(&self) -> usize {
        self.params
            .weights
            .iter()
            .flat_map(|t| t.as_slice())
            .filter(|&&w| w != 0.0)
            .count()
    }
}

/// Initializes a model: Kaiming-He normal for conv weights, `N(0, 0.01)`
/// for dense weights, zero biases.
pub fn build_model(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    let mut model = ModelParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<LayerSpec> = arch.param_layers().map(|(_, l)| *l).collect();
    for (w, spec) in model.params.weights.iter_mut().zip(&specs) {
        let std = match *spec {
            LayerSpec::Conv1d {
                in_channels,
                kernel_size,
                ..
            } => (2.0 / (in_channels * kernel_size) as f64).sqrt(),
            _ => DENSE_INIT_STD,
        };
        for x in w.as_mut_slice() {
            let z: f64 = rng.sample(StandardNormal);
            *x = std * z;
        }
    }
    Ok(model)
}
