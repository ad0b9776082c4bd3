//! Dense ReLU networks with a linear output layer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[fan_in, fan_out]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub widths: Vec<usize>,
    pub layers: Vec<Dense>,
}

/// Activations kept for the backward pass.
pub struct Tape {
    /// Layer inputs, one per layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
}

impl Network {
    /// Glorot-uniform weights, zero biases.
    pub fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Network {
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    w: Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..=limit)),
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Network {
            widths: widths.to_vec(),
            layers,
        }
    }

    pub fn zeros(widths: &[usize]) -> Network {
        Network {
            widths: widths.to_vec(),
            layers: widths
                .windows(2)
                .map(|w| Dense {
                    w: Array2::zeros((w[0], w[1])),
                    b: Array1::zeros(w[1]),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|d| d.w.len() + d.b.len()).sum()
    }

    /// Weights row-major then bias, layer by layer.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for d in &self.layers {
            out.extend(d.w.iter());
            out.extend(d.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) {
        let mut it = params.iter().copied();
        for d in &mut self.layers {
            d.w.iter_mut().for_each(|x| *x = it.next().unwrap());
            d.b.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
    }

    pub fn from_flat(widths: &[usize], params: &[f64]) -> Network {
        let mut net = Network::zeros(widths);
        net.set_flat(params);
        net
    }

    /// Rounds every parameter to binary32 precision.
    pub fn round_to_f32(&mut self) {
        for d in &mut self.layers {
            d.w.mapv_inplace(|x| x as f32 as f64);
            d.b.mapv_inplace(|x| x as f32 as f64);
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_tape(x).0
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> (Array2<f64>, Tape) {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, d) in self.layers.iter().enumerate() {
            let z = a.dot(&d.w) + &d.b;
            tape.inputs.push(a);
            if i == last {
                return (z, tape);
            }
            a = z.mapv(|v| v.max(0.0));
            tape.pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Gradient of a loss with respect to every parameter, given the loss
    /// gradient `d_out` at the network output. Same order as [`Network::flat`].
    pub fn backward(&self, tape: &Tape, d_out: Array2<f64>) -> Vec<Dense> {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut dz = d_out;
        for i in (0..self.layers.len()).rev() {
            let input = &tape.inputs[i];
            grads.push(Dense {
                w: input.t().dot(&dz),
                b: dz.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut da = dz.dot(&self.layers[i].w.t());
                da.zip_mut_with(&tape.pre[i - 1], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
                dz = da;
            }
        }
        grads.reverse();
        grads
    }

    /// `0.5 * l2 * sum of squared weights` (biases excluded).
    pub fn l2_penalty(&self, l2: f64) -> f64 {
        0.5 * l2 * self.layers.iter().map(|d| d.w.iter().map(|x| x * x).sum::<f64>()).sum::<f64>()
    }

    pub fn add_l2_grad(&self, grads: &mut [Dense], l2: f64) {
        if l2 == 0.0 {
            return;
        }
        for (g, d) in grads.iter_mut().zip(&self.layers) {
            g.w.scaled_add(l2, &d.w);
        }
    }

    /// `self -= step * grads`
    pub fn stepped(&self, grads: &[Dense], step: f64) -> Network {
        let mut next = self.clone();
        for (d, g) in next.layers.iter_mut().zip(grads) {
            d.w.scaled_add(-step, &g.w);
            d.b.scaled_add(-step, &g.b);
        }
        next
    }
}

pub fn flatten_grads(grads: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend(g.w.iter());
        out.extend(g.b.iter());
    }
    out
}

pub fn grad_norm_sq(grads: &[Dense]) -> f64 {
    grads
        .iter()
        .map(|g| g.w.iter().chain(g.b.iter()).map(|x| x * x).sum::<f64>())
        .sum()
}
