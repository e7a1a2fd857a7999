use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layer::{infer_shapes, LayerSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Descriptive fields carried alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub candidate_id: String,
    pub stage: String,
    pub seed: u64,
    /// Class roster the output channels refer to, if any.
    #[serde(default)]
    pub classes: Vec<String>,
}

/// Weight and bias of one parametric layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    fn zeros_for(spec: &LayerSpec) -> Option<Self> {
        spec.param_shapes()
            .map(|(w, b)| Param { weight: Tensor::zeros(w), bias: Tensor::zeros(b) })
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param { weight: self.weight.cast(), bias: self.bias.cast() }
    }

    /// Flat view index `i` over weight then bias.
    pub fn value(&self, i: usize) -> T {
        let nw = self.weight.len();
        if i < nw {
            self.weight.data()[i]
        } else {
            self.bias.data()[i - nw]
        }
    }

    pub fn value_mut(&mut self, i: usize) -> &mut T {
        let nw = self.weight.len();
        if i < nw {
            &mut self.weight.data_mut()[i]
        } else {
            &mut self.bias.data_mut()[i - nw]
        }
    }
}

/// A sequential network with optional skip concatenations.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<Param<T>>>,
    pub meta: ModelMeta,
}

impl Model<f32> {
    /// Builds a model with Glorot-uniform weights drawn from a generator seeded
    /// with `seed`; biases start at zero.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, seed: u64, meta: ModelMeta) -> Result<Self> {
        let mut model = Self::zeros(input_shape, layers, meta)?;
        model.meta.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (spec, param) in model.layers.iter().zip(model.params.iter_mut()) {
            if let (Some((fan_in, fan_out)), Some(p)) = (spec.fans(), param.as_mut()) {
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in p.weight.data_mut() {
                    *w = rng.random_range(-s..=s) as f32;
                }
            }
        }
        Ok(model)
    }
}

impl<T: Scalar> Model<T> {
    /// Model with every parameter set to zero.
    pub fn zeros(input_shape: &[usize], layers: Vec<LayerSpec>, meta: ModelMeta) -> Result<Self> {
        let shapes = infer_shapes(input_shape, &layers)?;
        let params = layers.iter().map(Param::zeros_for).collect();
        Ok(Self { input_shape: input_shape.to_vec(), layers, shapes, params, meta })
    }

    /// Assembles a model from stored parameters, checking every shape.
    pub fn from_parts(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        params: Vec<Option<Param<T>>>,
        meta: ModelMeta,
    ) -> Result<Self> {
        let mut model = Self::zeros(input_shape, layers, meta)?;
        if params.len() != model.layers.len() {
            return Err(NnError::Invalid("parameter list length differs from layer count".into()));
        }
        for (i, (slot, given)) in model.params.iter_mut().zip(params).enumerate() {
            match (slot.as_ref(), given) {
                (None, None) => {}
                (Some(expected), Some(p))
                    if expected.weight.shape() == p.weight.shape()
                        && expected.bias.shape() == p.bias.shape() =>
                {
                    *slot = Some(p)
                }
                _ => {
                    return Err(NnError::Shape {
                        layer: i,
                        detail: "parameter shapes do not match layer spec".into(),
                    })
                }
            }
        }
        Ok(model)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-item output shape of every layer.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(|s| s.as_slice()).unwrap_or(&self.input_shape)
    }

    pub fn params(&self) -> &[Option<Param<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<Param<T>>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Param::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            params: self.params.iter().map(|p| p.as_ref().map(Param::cast)).collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .flatten()
            .all(|p| p.weight.all_finite() && p.bias.all_finite())
    }

    /// Index of the last ReLU layer, if any.
    pub fn last_relu(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l, LayerSpec::Relu))
    }
}

/// Gradients with the same layout as a model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    pub per_layer: Vec<Option<Param<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self { per_layer: model.layers.iter().map(Param::zeros_for).collect() }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = T> + '_ {
        self.per_layer
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).copied())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_values().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter_values().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }
}
