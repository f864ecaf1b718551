use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Trainable weights of one layer together with its Adam state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub(crate) adam_m: Moments,
    pub(crate) adam_v: Moments,
    pub(crate) step_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Moments {
    pub(crate) kernels: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

impl Moments {
    fn zeros(kernels: usize, bias: usize) -> Self {
        Self {
            kernels: vec![0.0; kernels],
            bias: vec![0.0; bias],
        }
    }
}

/// Gradient buffers with the same layout as a [`LayerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &LayerParams) -> Self {
        Self {
            kernels: vec![0.0; params.kernels.len()],
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.kernels.iter_mut().zip(&other.kernels) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.kernels.iter_mut().for_each(|g| *g *= factor);
        self.bias.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn all_finite(&self) -> bool {
        self.kernels.iter().chain(&self.bias).all(|g| g.is_finite())
    }
}

impl LayerParams {
    /// Builds parameters from explicit tensors. `kernels` must have the
    /// output-channel count as its leading extent, matching `bias`.
    pub fn new(kernels: Tensor, bias: Tensor) -> Result<Self> {
        if bias.shape().len() != 1 || kernels.shape()[0] != bias.len() {
            return Err(NnError::ShapeMismatch(format!(
                "kernels {:?} with bias {:?}",
                kernels.shape(),
                bias.shape()
            )));
        }
        let (k, b) = (kernels.len(), bias.len());
        Ok(Self {
            kernels,
            bias,
            adam_m: Moments::zeros(k, b),
            adam_v: Moments::zeros(k, b),
            step_count: 0,
        })
    }

    /// Glorot-uniform kernels in ±sqrt(6 / (fan_in + fan_out)) and zero bias.
    ///
    /// `shape` is `[out, in, spatial...]`; the receptive field size multiplies
    /// both fans.
    pub fn glorot<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        assert!(shape.len() >= 2, "kernel shape needs out and in extents");
        let receptive: usize = shape[2..].iter().product();
        let fan_in = shape[1] * receptive;
        let fan_out = shape[0] * receptive;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        let kernels = Tensor::new(shape.to_vec(), values).expect("glorot: positive extents");
        Self::new(kernels, Tensor::zeros(&[shape[0]])).expect("glorot: consistent shapes")
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn parameter_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }

    pub fn set_grads(&mut self, grads: &ParamGrads) -> Result<()> {
        self.kernels.set_grad(grads.kernels.clone())?;
        self.bias.set_grad(grads.bias.clone())
    }

    pub fn clear_grads(&mut self) {
        self.kernels.clear_grad();
        self.bias.clear_grad();
    }

    /// Flattened view of kernels followed by bias.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut v = self.kernels.values().to_vec();
        v.extend_from_slice(self.bias.values());
        v
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) {
        let k = self.kernels.len();
        assert_eq!(flat.len(), self.parameter_count());
        self.kernels.values_mut().copy_from_slice(&flat[..k]);
        self.bias.values_mut().copy_from_slice(&flat[k..]);
    }

    pub(crate) fn check_congruent(&self) -> Result<()> {
        let ok = self.adam_m.kernels.len() == self.kernels.len()
            && self.adam_v.kernels.len() == self.kernels.len()
            && self.adam_m.bias.len() == self.bias.len()
            && self.adam_v.bias.len() == self.bias.len()
            && self.kernels.shape()[0] == self.bias.len();
        if ok {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch(
                "optimizer state is not congruent with the parameters".into(),
            ))
        }
    }
}
