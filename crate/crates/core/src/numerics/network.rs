use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Layer, ParameterSet};
use super::softmax::{softmax_backward, softmax_rows};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed in terms of the pre-activation `z` and output `a`.
    fn grad(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Forward mode. Training mode draws the dropout mask from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

/// Intermediate values needed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (post-activation, post-dropout for the last one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
    /// Post-activation of the last hidden representation, before dropout.
    hidden_out: Vec<Array2<f64>>,
    mask: Option<Array2<f64>>,
}

/// MLP classifier with hidden nonlinearity and one dropout layer feeding the
/// output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub params: ParameterSet,
    pub activation: Activation,
    pub dropout: f64,
}

impl Network {
    pub fn new(params: ParameterSet, activation: Activation, dropout: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout rate {dropout} outside [0, 1)")));
        }
        Ok(Self {
            params,
            activation,
            dropout,
        })
    }

    /// Layer dimensions for `input -> hidden... -> classes`.
    pub fn signature(input: usize, hidden: &[usize], classes: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.params.output_dim()
    }

    pub fn with_params(&self, params: ParameterSet) -> Self {
        Self {
            params,
            activation: self.activation,
            dropout: self.dropout,
        }
    }

    fn dropout_mask(&self, rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 - self.dropout;
        let scale = 1.0 / keep;
        Array2::from_shape_fn((rows, cols), |_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                0.0
            }
        })
    }

    pub fn forward(&self, batch: ArrayView2<f64>, mode: Mode) -> Result<ForwardOutput> {
        self.forward_cached(batch, mode).map(|(out, _)| out)
    }

    pub fn forward_cached(
        &self,
        batch: ArrayView2<f64>,
        mode: Mode,
    ) -> Result<(ForwardOutput, ForwardCache)> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch width {} does not match network input {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        if batch.nrows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let n_layers = self.params.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n_layers),
            pre: Vec::with_capacity(n_layers - 1),
            hidden_out: Vec::with_capacity(n_layers - 1),
            mask: None,
        };
        let mut act = batch.to_owned();
        for (i, layer) in self.params.layers.iter().enumerate() {
            if i == n_layers - 1 {
                if let Mode::Train { seed } = mode {
                    if self.dropout > 0.0 {
                        let mask = self.dropout_mask(act.nrows(), act.ncols(), seed);
                        act = &act * &mask;
                        cache.mask = Some(mask);
                    }
                }
            }
            let z = affine(&act, layer);
            cache.inputs.push(act);
            if i == n_layers - 1 {
                act = z;
            } else {
                let a = z.mapv(|v| self.activation.apply(v));
                cache.pre.push(z);
                cache.hidden_out.push(a.clone());
                act = a;
            }
        }
        let probs = softmax_rows(act.view());
        Ok((ForwardOutput { logits: act, probs }, cache))
    }

    /// Back-propagates `d loss / d logits` through the network.
    pub fn backward(&self, cache: &ForwardCache, dlogits: ArrayView2<f64>) -> ParameterSet {
        let n_layers = self.params.layers.len();
        let mut grads = Vec::with_capacity(n_layers);
        let mut delta = dlogits.to_owned();
        for i in (0..n_layers).rev() {
            let input = &cache.inputs[i];
            let weight = delta.t().dot(input);
            let bias: Array1<f64> = delta.sum_axis(Axis(0));
            grads.push(Layer { weight, bias });
            if i == 0 {
                break;
            }
            let mut dinput = delta.dot(&self.params.layers[i].weight);
            if i == n_layers - 1 {
                if let Some(mask) = &cache.mask {
                    dinput = dinput * mask;
                }
            }
            let z = &cache.pre[i - 1];
            let a = &cache.hidden_out[i - 1];
            ndarray::Zip::from(&mut dinput)
                .and(z)
                .and(a)
                .for_each(|d, &z, &a| *d *= self.activation.grad(z, a));
            delta = dinput;
        }
        grads.reverse();
        ParameterSet { layers: grads }
    }

    /// Convenience: gradient from `d loss / d probs`.
    pub fn backward_from_probs(
        &self,
        cache: &ForwardCache,
        probs: ArrayView2<f64>,
        dprobs: ArrayView2<f64>,
    ) -> ParameterSet {
        let dlogits = softmax_backward(probs, dprobs);
        self.backward(cache, dlogits.view())
    }
}

fn affine(input: &Array2<f64>, layer: &Layer) -> Array2<f64> {
    let mut z = input.dot(&layer.weight.t());
    z += &layer.bias;
    z
}
