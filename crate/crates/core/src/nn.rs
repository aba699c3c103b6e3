//! Dense multilayer perceptrons with a recorded forward pass and an exact
//! reverse pass. Weights are stored `in x out` so a batch multiplies as
//! `x · W + b`.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{CpgaError, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Where an MLP's weights live inside a [`ParamSet`] and how it is shaped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    /// Index of the first weight tensor in the owning parameter set.
    pub offset: usize,
}

/// Activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl MlpLayout {
    pub fn new(dims: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        MlpLayout {
            dims,
            hidden,
            output,
            offset: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Appends freshly initialized weights to `params` and records the offset.
    pub fn init<R: Rng>(&mut self, params: &mut ParamSet, prefix: &str, rng: &mut R) {
        self.offset = params.len();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let bound = match self.activation(l) {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            let w = ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| dist.sample(rng));
            params.push(format!("{prefix}.{l}.weight"), w);
            params.push(format!("{prefix}.{l}.bias"), ArrayD::zeros(IxDyn(&[fan_out])));
        }
    }

    pub fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(CpgaError::Shape(format!(
                "expected {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamSet, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for l in 0..self.num_layers() {
            h = self.layer(params, l, h.view());
        }
        h
    }

    pub fn forward_tape(&self, params: &ParamSet, x: ArrayView2<f64>) -> (Array2<f64>, MlpTape) {
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut outputs = Vec::with_capacity(self.num_layers());
        let mut h = x.to_owned();
        for l in 0..self.num_layers() {
            let y = self.layer(params, l, h.view());
            inputs.push(h);
            outputs.push(y.clone());
            h = y;
        }
        (h, MlpTape { inputs, outputs })
    }

    fn layer(&self, params: &ParamSet, l: usize, x: ArrayView2<f64>) -> Array2<f64> {
        let w = params.mat(self.offset + 2 * l);
        let b = params.vec(self.offset + 2 * l + 1);
        let mut y = x.dot(&w) + b;
        self.activation(l).apply(&mut y);
        y
    }

    /// Accumulates weight gradients into `grads` and returns the gradient
    /// w.r.t. the MLP input.
    pub fn backward(
        &self,
        params: &ParamSet,
        tape: &MlpTape,
        grad_out: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> Array2<f64> {
        let mut g = grad_out.to_owned();
        for l in (0..self.num_layers()).rev() {
            let act = self.activation(l);
            if act != Activation::Identity {
                g.zip_mut_with(&tape.outputs[l], |gi, &y| *gi *= act.grad_from_output(y));
            }
            let wi = self.offset + 2 * l;
            grads.mat_mut(wi).scaled_add(1.0, &tape.inputs[l].t().dot(&g));
            grads.vec_mut(wi + 1).scaled_add(1.0, &g.sum_axis(Axis(0)));
            g = g.dot(&params.mat(wi).t());
        }
        g
    }
}
