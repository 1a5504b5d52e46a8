//! Small dense networks with hand-written backward passes.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Rows per work unit in batched evaluation. Fixed so that partial gradient
/// sums are merged identically regardless of thread count.
const BATCH_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Tanh => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::None,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Tanh,
            _ => return None,
        })
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Fully connected layer; `weights` is `out_dim × in_dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
            activation,
        }
    }

    /// Uniform init in `±1/sqrt(in_dim)` for weights and biases.
    pub fn random<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        for w in &mut layer.weights {
            *w = rng.gen_range(-bound..bound);
        }
        for b in &mut layer.biases {
            *b = rng.gen_range(-bound..bound);
        }
        layer
    }

    fn forward_into(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.biases))
        {
            let mut acc = *b;
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            *o = self.activation.apply(acc);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer activations retained by a forward pass. `values[0]` is the input,
/// `values[l + 1]` the output of layer `l`.
#[derive(Clone, Debug, Default)]
pub struct MlpTrace {
    pub values: Vec<Vec<f64>>,
}

/// Gradients shaped like an [`Mlp`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Slices in the same order as [`Mlp::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }
}

/// Activations of a batched forward pass; every array is `rows × dim`.
#[derive(Clone, Debug, Default)]
pub struct BatchTrace {
    pub rows: usize,
    pub values: Vec<Vec<f64>>,
}

impl BatchTrace {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

impl Mlp {
    /// Builds a network with the given layer widths, `hidden` on every layer
    /// but the last and `output` on the last.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least one layer");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { output } else { hidden };
                Layer::random(dims[l], dims[l + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn check(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::DimMismatch {
                    expected: pair[0].out_dim,
                    actual: pair[1].in_dim,
                });
            }
        }
        Ok(())
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.biases.as_slice());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.biases.as_mut_slice());
        }
        out
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpTrace)> {
        if input.len() != self.in_dim() {
            return Err(Error::DimMismatch {
                expected: self.in_dim(),
                actual: input.len(),
            });
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for layer in &self.layers {
            let mut out = vec![0.0; layer.out_dim];
            layer.forward_into(values.last().unwrap(), &mut out);
            values.push(out);
        }
        let output = values.last().unwrap().clone();
        Ok((output, MlpTrace { values }))
    }

    pub fn backward(&self, trace: &MlpTrace, upstream: &[f64]) -> Result<(Vec<f64>, MlpGrads)> {
        let mut grads = MlpGrads::zeros_like(self);
        let dx = self.backward_accumulate(trace, upstream, &mut grads)?;
        Ok((dx, grads))
    }

    /// Like [`Mlp::backward`] but adds parameter gradients into `grads`.
    pub fn backward_accumulate(
        &self,
        trace: &MlpTrace,
        upstream: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        if trace.values.len() != self.layers.len() + 1
            || trace
                .values
                .iter()
                .zip(std::iter::once(self.in_dim()).chain(self.layers.iter().map(|l| l.out_dim)))
                .any(|(v, d)| v.len() != d)
        {
            return Err(Error::TraceMissing);
        }
        if upstream.len() != self.out_dim() {
            return Err(Error::DimMismatch {
                expected: self.out_dim(),
                actual: upstream.len(),
            });
        }
        let mut delta = upstream.to_vec();
        let mut scratch = Vec::new();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            backward_layer(
                layer,
                &trace.values[l],
                &trace.values[l + 1],
                &mut delta,
                &mut scratch,
                &mut grads.weights[l],
                &mut grads.biases[l],
            );
            std::mem::swap(&mut delta, &mut scratch);
        }
        Ok(delta)
    }

    /// Evaluates `rows` inputs packed row-major in `inputs`.
    pub fn forward_batch(&self, inputs: &[f64], rows: usize) -> Result<BatchTrace> {
        let in_dim = self.in_dim();
        if inputs.len() != rows * in_dim {
            return Err(Error::DimMismatch {
                expected: rows * in_dim,
                actual: inputs.len(),
            });
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(inputs.to_vec());
        for layer in &self.layers {
            let prev: &Vec<f64> = values.last().unwrap();
            let mut out = vec![0.0; rows * layer.out_dim];
            out.par_chunks_mut(BATCH_CHUNK * layer.out_dim)
                .zip(prev.par_chunks(BATCH_CHUNK * layer.in_dim))
                .for_each(|(o, x)| {
                    for (orow, xrow) in o
                        .chunks_exact_mut(layer.out_dim)
                        .zip(x.chunks_exact(layer.in_dim))
                    {
                        layer.forward_into(xrow, orow);
                    }
                });
            values.push(out);
        }
        Ok(BatchTrace { rows, values })
    }

    /// Batched backward. Returns input gradients (`rows × in_dim`) and adds
    /// parameter gradients summed over rows into `grads`.
    pub fn backward_batch(
        &self,
        trace: &BatchTrace,
        upstream: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        let rows = trace.rows;
        if trace.values.len() != self.layers.len() + 1 {
            return Err(Error::TraceMissing);
        }
        if upstream.len() != rows * self.out_dim() {
            return Err(Error::DimMismatch {
                expected: rows * self.out_dim(),
                actual: upstream.len(),
            });
        }
        let in_dim = self.in_dim();
        let chunks: Vec<usize> = (0..rows).step_by(BATCH_CHUNK).collect();
        let partials: Vec<(Vec<f64>, MlpGrads)> = chunks
            .par_iter()
            .map(|&start| {
                let end = (start + BATCH_CHUNK).min(rows);
                let mut local = MlpGrads::zeros_like(self);
                let mut dx_all = Vec::with_capacity((end - start) * in_dim);
                let mut delta = Vec::new();
                let mut scratch = Vec::new();
                for r in start..end {
                    let od = self.out_dim();
                    delta.clear();
                    delta.extend_from_slice(&upstream[r * od..(r + 1) * od]);
                    for (l, layer) in self.layers.iter().enumerate().rev() {
                        let x = &trace.values[l][r * layer.in_dim..(r + 1) * layer.in_dim];
                        let y = &trace.values[l + 1][r * layer.out_dim..(r + 1) * layer.out_dim];
                        backward_layer(
                            layer,
                            x,
                            y,
                            &mut delta,
                            &mut scratch,
                            &mut local.weights[l],
                            &mut local.biases[l],
                        );
                        std::mem::swap(&mut delta, &mut scratch);
                    }
                    dx_all.extend_from_slice(&delta);
                }
                (dx_all, local)
            })
            .collect();
        let mut dx = Vec::with_capacity(rows * in_dim);
        for (d, g) in &partials {
            dx.extend_from_slice(d);
            grads.add_assign(g);
        }
        Ok(dx)
    }
}

/// One layer of reverse mode. On entry `delta` holds dL/d(output); on exit
/// `out` holds dL/d(input). `delta` is clobbered.
fn backward_layer(
    layer: &Layer,
    x: &[f64],
    y: &[f64],
    delta: &mut [f64],
    out: &mut Vec<f64>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for (d, &yv) in delta.iter_mut().zip(y) {
        *d *= layer.activation.derivative_from_output(yv);
    }
    out.clear();
    out.resize(layer.in_dim, 0.0);
    for (o, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        db[o] += d;
        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
        let drow = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
        for i in 0..layer.in_dim {
            drow[i] += d * x[i];
            out[i] += d * row[i];
        }
    }
}
