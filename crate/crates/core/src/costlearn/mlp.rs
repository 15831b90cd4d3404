use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

use super::CostModel;

pub const DEFAULT_HIDDEN: usize = 32;
pub const EMBEDDING_DIM: usize = 2;

/// y = W x + b
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseJson", into = "DenseJson")]
pub struct Dense {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct DenseJson {
    inputs: usize,
    outputs: usize,
    /// Row-major, `outputs` rows of `inputs` entries.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl TryFrom<DenseJson> for Dense {
    type Error = Error;

    fn try_from(j: DenseJson) -> Result<Self> {
        if j.weights.len() != j.outputs || j.weights.iter().any(|r| r.len() != j.inputs) {
            return Err(Error::Parse(format!(
                "layer weights do not match the declared {}x{} shape",
                j.outputs, j.inputs
            )));
        }
        if j.bias.len() != j.outputs {
            return Err(Error::Parse(
                "layer bias length does not match outputs".into(),
            ));
        }
        Ok(Self {
            weights: DMatrix::from_fn(j.outputs, j.inputs, |r, c| j.weights[r][c]),
            bias: DVector::from_vec(j.bias),
        })
    }
}

impl From<Dense> for DenseJson {
    fn from(d: Dense) -> Self {
        Self {
            inputs: d.weights.ncols(),
            outputs: d.weights.nrows(),
            weights: d
                .weights
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            bias: d.bias.iter().copied().collect(),
        }
    }
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    /// He-normal weights, zero bias.
    pub fn random(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive std");
        Self {
            weights: DMatrix::from_fn(outputs, inputs, |_, _| normal.sample(rng)),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Batch forward, one sample per row.
    fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = input * self.weights.transpose();
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }
}

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TowerJson", into = "TowerJson")]
pub struct Tower {
    layers: Vec<Dense>,
}

#[derive(Serialize, Deserialize)]
struct TowerJson {
    layers: Vec<Dense>,
}

impl TryFrom<TowerJson> for Tower {
    type Error = Error;

    fn try_from(j: TowerJson) -> Result<Self> {
        Tower::new(j.layers)
    }
}

impl From<Tower> for TowerJson {
    fn from(t: Tower) -> Self {
        Self { layers: t.layers }
    }
}

/// Per-layer activations kept for the backward pass.
struct TowerTape {
    /// Inputs to each layer (post-activation of the previous one).
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DMatrix<f64>>,
}

impl Tower {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a tower needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::invalid(format!(
                    "layer shapes do not chain: {} outputs feed {} inputs",
                    w[0].outputs(),
                    w[1].inputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// d → hidden → hidden → out, He-initialized.
    pub fn random(d: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            layers: vec![
                Dense::random(d, hidden, rng),
                Dense::random(hidden, hidden, rng),
                Dense::random(hidden, out, rng),
            ],
        }
    }

    pub fn zeros(d: usize, hidden: usize, out: usize) -> Self {
        Self {
            layers: vec![
                Dense::zeros(d, hidden),
                Dense::zeros(hidden, hidden),
                Dense::zeros(hidden, out),
            ],
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("tower input dimension", self.input_dim(), input.ncols())?;
        Ok(self.forward_taped(input).0)
    }

    fn forward_taped(&self, input: &DMatrix<f64>) -> (DMatrix<f64>, TowerTape) {
        let last = self.layers.len() - 1;
        let mut tape = TowerTape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
        };
        let mut act = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&act);
            tape.inputs.push(act);
            if k < last {
                act = z.map(|v| v.max(0.0));
                tape.pre.push(z);
            } else {
                act = z;
            }
        }
        (act, tape)
    }

    /// Parameter gradient in [`Tower::write_params`] order, given the
    /// gradient with respect to the outputs.
    fn backward(&self, tape: &TowerTape, out_bar: DMatrix<f64>, grad: &mut Vec<f64>) {
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut bar = out_bar;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let w_bar = bar.transpose() * &tape.inputs[k];
            let b_bar = bar.row_sum().transpose();
            per_layer.push((w_bar, b_bar));
            if k > 0 {
                let mut in_bar = &bar * &layer.weights;
                // ReLU derivative, taken as 0 at exactly 0.
                in_bar.zip_apply(&tape.pre[k - 1], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
                bar = in_bar;
            }
        }
        for (w_bar, b_bar) in per_layer.into_iter().rev() {
            grad.extend_from_slice(w_bar.as_slice());
            grad.extend_from_slice(b_bar.as_slice());
        }
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
    }

    fn read_params(&mut self, params: &[f64]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        at
    }
}

/// c(x, y) = ‖φ₁(x) − φ₂(y)‖² with separate towers for each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub phi_x: Tower,
    pub phi_y: Tower,
}

impl MlpModel {
    pub fn new(phi_x: Tower, phi_y: Tower) -> Result<Self> {
        check_dim(
            "tower input dimensions",
            phi_x.input_dim(),
            phi_y.input_dim(),
        )?;
        check_dim(
            "tower output dimensions",
            phi_x.output_dim(),
            phi_y.output_dim(),
        )?;
        Ok(Self { phi_x, phi_y })
    }

    pub fn random(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            phi_x: Tower::random(d, hidden, EMBEDDING_DIM, rng),
            phi_y: Tower::random(d, hidden, EMBEDDING_DIM, rng),
        }
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            phi_x: Tower::zeros(d, hidden, EMBEDDING_DIM),
            phi_y: Tower::zeros(d, hidden, EMBEDDING_DIM),
        }
    }

    pub fn embed(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.phi_x.forward(x)?, self.phi_y.forward(y)?))
    }
}

fn pairwise_sq(ex: &DMatrix<f64>, ey: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(ex.nrows(), ey.nrows(), |i, j| {
        (0..ex.ncols())
            .map(|k| {
                let d = ex[(i, k)] - ey[(j, k)];
                d * d
            })
            .sum()
    })
}

impl CostModel for MlpModel {
    fn input_dim(&self) -> usize {
        self.phi_x.input_dim()
    }

    fn cost(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (ex, ey) = self.embed(x, y)?;
        Ok(pairwise_sq(&ex, &ey))
    }

    fn cost_backward(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        c_bar: &DMatrix<f64>,
    ) -> Result<Vec<f64>> {
        check_dim("tower input dimension", self.input_dim(), x.ncols())?;
        check_dim("tower input dimension", self.input_dim(), y.ncols())?;
        check_dim("upstream rows", x.nrows(), c_bar.nrows())?;
        check_dim("upstream columns", y.nrows(), c_bar.ncols())?;
        let (ex, tx) = self.phi_x.forward_taped(x);
        let (ey, ty) = self.phi_y.forward_taped(y);
        // ∂/∂ex_i = 2 Σ_j C̄_ij (ex_i − ey_j), ∂/∂ey_j = 2 Σ_i C̄_ij (ey_j − ex_i)
        let r = c_bar.column_sum();
        let c = c_bar.row_sum().transpose();
        let mut ex_bar = c_bar * &ey * -2.0;
        for (i, mut row) in ex_bar.row_iter_mut().enumerate() {
            row += ex.row(i) * (2.0 * r[i]);
        }
        let mut ey_bar = c_bar.transpose() * &ex * -2.0;
        for (j, mut row) in ey_bar.row_iter_mut().enumerate() {
            row += ey.row(j) * (2.0 * c[j]);
        }
        let mut grad = Vec::with_capacity(self.phi_x.param_count() + self.phi_y.param_count());
        self.phi_x.backward(&tx, ex_bar, &mut grad);
        self.phi_y.backward(&ty, ey_bar, &mut grad);
        Ok(grad)
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.phi_x.param_count() + self.phi_y.param_count());
        self.phi_x.write_params(&mut out);
        self.phi_y.write_params(&mut out);
        out
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(
            "MLP parameter count",
            self.phi_x.param_count() + self.phi_y.param_count(),
            params.len(),
        )?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite MLP parameters".into()));
        }
        let used = self.phi_x.read_params(params);
        self.phi_y.read_params(&params[used..]);
        Ok(())
    }
}
