//! Fixed-shape multilayer perceptron: two ReLU hidden layers and a linear
//! output, trained with masked mean-squared error and Adam.
//!
//! Parameters live in one flat vector laid out as
//! `[W1, b1, W2, b2, W3, b3]`, each weight matrix row-major `out x in`.
//! Gradients and Adam moments share that layout.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid layer dimensions {0:?}: all four must be positive")]
    InvalidDims([usize; 4]),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("output index {index} out of range for {outputs} outputs")]
    OutputIndex { index: usize, outputs: usize },
    #[error("network shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error("parameter buffer: {0}")]
    Format(String),
}

const MAGIC: &[u8; 4] = b"DNMP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 16 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: [usize; 4],
    params: Vec<f64>,
}

/// Flat gradient vector in the parameter layout.
pub type Gradients = Vec<f64>;

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

impl LayerSpan {
    fn end(&self) -> usize {
        self.bias + self.outputs
    }
}

fn spans(dims: &[usize; 4]) -> [LayerSpan; 3] {
    let mut offset = 0;
    std::array::from_fn(|l| {
        let (inputs, outputs) = (dims[l], dims[l + 1]);
        let weights = offset;
        let bias = weights + inputs * outputs;
        offset = bias + outputs;
        LayerSpan {
            inputs,
            outputs,
            weights,
            bias,
        }
    })
}

pub fn parameter_count(dims: &[usize; 4]) -> usize {
    spans(dims)[2].end()
}

/// `c = a * b + beta * c` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_cols: usize,
) {
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, a_strides));
    assert!(b.len() >= last(k, n, b_strides));
    assert!(c.len() >= last(m, n, (c_cols, 1)));
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_cols as isize,
            1,
        );
    }
}

/// Activations kept from a batched forward pass for backpropagation.
struct Trace {
    rows: usize,
    /// Post-activation hidden outputs, `rows x h1` and `rows x h2`.
    hidden: [Vec<f64>; 2],
    output: Vec<f64>,
}

impl Mlp {
    /// He-initialised weights (`std = sqrt(2 / fan_in)`) and zero biases.
    pub fn new<R: Rng + ?Sized>(dims: [usize; 4], rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(dims)?;
        for span in spans(&dims) {
            let normal = Normal::new(0.0, (2.0 / span.inputs as f64).sqrt())
                .expect("positive fan-in gives a finite std");
            for w in &mut net.params[span.weights..span.bias] {
                *w = normal.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn seeded(dims: [usize; 4], seed: u64) -> Result<Self, NnError> {
        Self::new(dims, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self, NnError> {
        if dims.contains(&0) {
            return Err(NnError::InvalidDims(dims));
        }
        Ok(Self {
            dims,
            params: vec![0.0; parameter_count(&dims)],
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn input_len(&self) -> usize {
        self.dims[0]
    }

    pub fn output_len(&self) -> usize {
        self.dims[3]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(weights, bias)` of layer `l` in `0..3`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let s = spans(&self.dims)[l];
        (
            &self.params[s.weights..s.bias],
            &self.params[s.bias..s.end()],
        )
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let s = spans(&self.dims)[l];
        let (w, rest) = self.params[s.weights..s.end()].split_at_mut(s.bias - s.weights);
        (w, rest)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.forward_batch(input, 1)
    }

    /// Forward pass over `rows` inputs stored row-major in `inputs`.
    pub fn forward_batch(&self, inputs: &[f64], rows: usize) -> Result<Vec<f64>, NnError> {
        Ok(self.trace(inputs, rows)?.output)
    }

    fn trace(&self, inputs: &[f64], rows: usize) -> Result<Trace, NnError> {
        let expected = rows * self.dims[0];
        if inputs.len() != expected {
            return Err(NnError::Dimension {
                expected,
                got: inputs.len(),
            });
        }
        let [l1, l2, l3] = spans(&self.dims);
        let h1 = self.dense(l1, inputs, rows, true);
        let h2 = self.dense(l2, &h1, rows, true);
        let output = self.dense(l3, &h2, rows, false);
        Ok(Trace {
            rows,
            hidden: [h1, h2],
            output,
        })
    }

    fn dense(&self, span: LayerSpan, x: &[f64], rows: usize, relu: bool) -> Vec<f64> {
        let bias = &self.params[span.bias..span.end()];
        let mut z: Vec<f64> = bias
            .iter()
            .copied()
            .cycle()
            .take(rows * span.outputs)
            .collect();
        gemm(
            rows,
            span.inputs,
            span.outputs,
            x,
            (span.inputs, 1),
            &self.params[span.weights..span.bias],
            (1, span.inputs),
            1.0,
            &mut z,
            span.outputs,
        );
        if relu {
            for v in &mut z {
                *v = v.max(0.0);
            }
        }
        z
    }

    /// Backpropagates `d_output = dL/d(output)` (`rows x out`) through a trace.
    fn backprop(&self, inputs: &[f64], trace: &Trace, mut delta: Vec<f64>) -> Gradients {
        let layers = spans(&self.dims);
        let rows = trace.rows;
        let mut grads = vec![0.0; self.params.len()];
        for l in (0..3).rev() {
            let span = layers[l];
            let layer_input: &[f64] = if l == 0 { inputs } else { &trace.hidden[l - 1] };
            // dW = delta^T * input
            gemm(
                span.outputs,
                rows,
                span.inputs,
                &delta,
                (1, span.outputs),
                layer_input,
                (span.inputs, 1),
                0.0,
                &mut grads[span.weights..span.bias],
                span.inputs,
            );
            let db = &mut grads[span.bias..span.end()];
            for row in delta.chunks_exact(span.outputs) {
                for (g, d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l == 0 {
                break;
            }
            // delta_prev = (delta * W) masked by the ReLU of the layer below
            let mut prev = vec![0.0; rows * span.inputs];
            gemm(
                rows,
                span.outputs,
                span.inputs,
                &delta,
                (span.outputs, 1),
                &self.params[span.weights..span.bias],
                (span.inputs, 1),
                0.0,
                &mut prev,
                span.inputs,
            );
            for (p, &h) in prev.iter_mut().zip(&trace.hidden[l - 1]) {
                if h <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        grads
    }

    fn check_target(&self, target: &[f64], mask: Option<usize>) -> Result<(), NnError> {
        let outputs = self.output_len();
        if target.len() != outputs {
            return Err(NnError::Dimension {
                expected: outputs,
                got: target.len(),
            });
        }
        match mask {
            Some(index) if index >= outputs => Err(NnError::OutputIndex { index, outputs }),
            _ => Ok(()),
        }
    }

    /// Mean squared error over all outputs. With `mask = Some(i)` every output
    /// except `i` counts as already on target, so only output `i` contributes,
    /// still divided by the full output width.
    pub fn loss(&self, input: &[f64], target: &[f64], mask: Option<usize>) -> Result<f64, NnError> {
        self.check_target(target, mask)?;
        let out = self.forward(input)?;
        let width = out.len() as f64;
        let sq = |i: usize| (out[i] - target[i]).powi(2);
        Ok(match mask {
            Some(i) => sq(i) / width,
            None => (0..out.len()).map(sq).sum::<f64>() / width,
        })
    }

    /// Gradient of [`Mlp::loss`] with respect to every parameter.
    pub fn backward(
        &self,
        input: &[f64],
        target: &[f64],
        mask: Option<usize>,
    ) -> Result<Gradients, NnError> {
        self.check_target(target, mask)?;
        let trace = self.trace(input, 1)?;
        let width = self.output_len() as f64;
        let delta = trace
            .output
            .iter()
            .zip(target)
            .enumerate()
            .map(|(i, (q, t))| match mask {
                Some(m) if m != i => 0.0,
                _ => 2.0 * (q - t) / width,
            })
            .collect();
        Ok(self.backprop(input, &trace, delta))
    }

    /// Masked MSE over a batch: row `r` compares output `actions[r]` against
    /// `targets[r]`. Returns the loss and its gradient.
    pub fn backward_batch(
        &self,
        inputs: &[f64],
        actions: &[usize],
        targets: &[f64],
    ) -> Result<(f64, Gradients), NnError> {
        let rows = actions.len();
        if targets.len() != rows {
            return Err(NnError::Dimension {
                expected: rows,
                got: targets.len(),
            });
        }
        let outputs = self.output_len();
        if let Some(&index) = actions.iter().find(|&&a| a >= outputs) {
            return Err(NnError::OutputIndex { index, outputs });
        }
        let trace = self.trace(inputs, rows)?;
        let scale = 1.0 / (rows * outputs) as f64;
        let mut delta = vec![0.0; rows * outputs];
        let mut loss = 0.0;
        for (r, (&a, &y)) in actions.iter().zip(targets).enumerate() {
            let err = trace.output[r * outputs + a] - y;
            loss += err * err * scale;
            delta[r * outputs + a] = 2.0 * err * scale;
        }
        Ok((loss, self.backprop(inputs, &trace, delta)))
    }

    /// Overwrites this network's parameters with `source`'s.
    pub fn copy_parameters_from(&mut self, source: &Mlp) -> Result<(), NnError> {
        if self.dims != source.dims {
            return Err(NnError::ShapeMismatch(source.dims, self.dims));
        }
        self.params.copy_from_slice(&source.params);
        Ok(())
    }

    /// Little-endian dump: magic `DNMP`, `u32` version, four `u32` layer
    /// widths, `u64` parameter count, then the parameters as `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 8 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for d in self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, NnError> {
        let bad = |msg: String| NnError::Format(msg);
        if buf.len() < HEADER_LEN {
            return Err(bad(format!("truncated header ({} bytes)", buf.len())));
        }
        if &buf[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let word = |at: usize| u32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let dims = [word(8), word(12), word(16), word(20)].map(|d| d as usize);
        let mut net = Self::zeros(dims).map_err(|e| bad(e.to_string()))?;
        let count = u64::from_le_bytes(buf[24..32].try_into().unwrap()) as usize;
        if count != net.params.len() {
            return Err(bad(format!(
                "parameter count {count} does not match dims {dims:?}"
            )));
        }
        let body = &buf[HEADER_LEN..];
        if body.len() != 8 * count {
            return Err(bad(format!(
                "expected {} parameter bytes, found {}",
                8 * count,
                body.len()
            )));
        }
        for (p, chunk) in net.params.iter_mut().zip(body.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
            if !p.is_finite() {
                return Err(bad("non-finite parameter".into()));
            }
        }
        Ok(net)
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl Adam {
    pub fn new(parameter_count: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
            step_count: 0,
        }
    }

    pub fn for_network(net: &Mlp, learning_rate: f64) -> Self {
        Self::new(net.params().len(), learning_rate)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        for len in [params.len(), grads.len()] {
            if len != self.first_moment.len() {
                return Err(NnError::Dimension {
                    expected: self.first_moment.len(),
                    got: len,
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let step = self.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        // m_hat / (sqrt(v_hat) + eps), with both corrections folded into `step`.
        let eps = self.epsilon * (1.0 - b2.powi(t)).sqrt();
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
        Ok(())
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[f64]) -> Result<(), NnError> {
        self.update(net.params_mut(), grads)
    }
}
