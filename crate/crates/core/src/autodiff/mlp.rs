use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{gemm, Tensor};
use crate::error::{IdacError, Result};

/// Fully connected network stored as one flat parameter vector.
///
/// Layer `l` maps `widths[l]` to `widths[l + 1]`. Its row-major weight block
/// (`[in, out]`) is followed by its bias (`[out]`). ReLU sits between layers;
/// the output layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    widths: Vec<usize>,
    values: Vec<f64>,
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
        return Err(IdacError::InvalidInput(format!(
            "network widths must have at least two positive entries, got {widths:?}"
        )));
    }
    Ok(())
}

impl MlpParams {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(MlpParams {
            widths: widths.to_vec(),
            values: vec![0.0; param_count(widths)],
        })
    }

    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn init_uniform<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut params = MlpParams::zeros(widths)?;
        for l in 0..params.num_layers() {
            let limit = 1.0 / (params.widths[l] as f64).sqrt();
            for v in params.weight_mut(l) {
                *v = rng.random_range(-limit..limit);
            }
            for v in params.bias_mut(l) {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(params)
    }

    pub fn from_values(widths: &[usize], values: Vec<f64>) -> Result<Self> {
        check_widths(widths)?;
        if values.len() != param_count(widths) {
            return Err(IdacError::Shape(format!(
                "widths {widths:?} need {} parameters, got {}",
                param_count(widths),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IdacError::InvalidInput("non-finite network parameter".into()));
        }
        Ok(MlpParams {
            widths: widths.to_vec(),
            values,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("widths validated on construction")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.widths[..=layer])
    }

    fn layer_ranges(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (inp, out) = (self.widths[layer], self.widths[layer + 1]);
        let start = self.layer_offset(layer);
        (start..start + inp * out, start + inp * out..start + inp * out + out)
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        &self.values[self.layer_ranges(layer).0]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layer_ranges(layer).0;
        &mut self.values[r]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.values[self.layer_ranges(layer).1]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layer_ranges(layer).1;
        &mut self.values[r]
    }

    /// Evaluates the network on each row of `input` without recording.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.input_width() {
            return Err(IdacError::Shape(format!(
                "network expects input width {}, got {}",
                self.input_width(),
                input.cols()
            )));
        }
        let rows = input.rows();
        let mut x = input.data().to_vec();
        for l in 0..self.num_layers() {
            let (inp, out) = (self.widths[l], self.widths[l + 1]);
            let mut y = Vec::with_capacity(rows * out);
            for _ in 0..rows {
                y.extend_from_slice(self.bias(l));
            }
            gemm(rows, inp, out, &x, false, self.weight(l), false, 1.0, &mut y);
            if l + 1 < self.num_layers() {
                for v in &mut y {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            x = y;
        }
        Ok(Tensor::from_parts(rows, self.output_width(), x))
    }

    /// Places the parameters on `tape`, tracked or as constants.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> BoundMlp {
        let layers = (0..self.num_layers())
            .map(|l| {
                let (inp, out) = (self.widths[l], self.widths[l + 1]);
                let w = Tensor::from_parts(inp, out, self.weight(l).to_vec());
                let b = Tensor::from_parts(1, out, self.bias(l).to_vec());
                (tape.leaf(w, tracked), tape.leaf(b, tracked))
            })
            .collect();
        BoundMlp {
            layers,
            num_params: self.num_params(),
        }
    }
}

/// Forward pass without a tape.
pub fn forward_mlp(params: &MlpParams, input: &Tensor) -> Result<Tensor> {
    params.forward(input)
}

/// Handles to an [`MlpParams`] placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    num_params: usize,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Var {
        let mut x = input;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(x, w);
            x = tape.add_row(z, b);
            if l + 1 < self.layers.len() {
                x = tape.relu(x);
            }
        }
        x
    }

    /// Gradient laid out like [`MlpParams::values`].
    pub fn flat_grad(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params);
        for &(w, b) in &self.layers {
            flat.extend(grads.wrt(w, tape.value(w).len()));
            flat.extend(grads.wrt(b, tape.value(b).len()));
        }
        flat
    }
}
