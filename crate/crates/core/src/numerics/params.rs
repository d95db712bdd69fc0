use ndarray::{Array1, Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ordered `(out, in)` dimensions of every layer.
pub type ShapeSignature = Vec<(usize, usize)>;

/// One affine layer: `weight` is `out x in`, `bias` has length `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.dim()
    }
}

/// All trainable weights of a network, layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<Layer>,
}

impl ParameterSet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("parameter set needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.nrows() != pair[1].weight.ncols() {
                return Err(Error::invalid(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].weight.nrows(),
                    i + 1,
                    pair[1].weight.ncols()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::invalid(format!("layer {i} bias length mismatch")));
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(signature: &[(usize, usize)]) -> Self {
        Self {
            layers: signature.iter().map(|&(o, i)| Layer::zeros(o, i)).collect(),
        }
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init_uniform(signature: &[(usize, usize)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = signature
            .iter()
            .map(|&(out, inp)| {
                let bound = 1.0 / (inp as f64).sqrt();
                let weight = Array2::from_shape_fn((out, inp), |_| rng.gen_range(-bound..bound));
                let bias = Array1::from_shape_fn(out, |_| rng.gen_range(-bound..bound));
                Layer { weight, bias }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape_signature())
    }

    pub fn shape_signature(&self) -> ShapeSignature {
        self.layers.iter().map(Layer::shape).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    pub fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.shape_signature() != other.shape_signature() {
            return Err(Error::invalid(format!(
                "shape signature mismatch: {:?} vs {:?}",
                self.shape_signature(),
                other.shape_signature()
            )));
        }
        Ok(())
    }

    /// Flattens in checkpoint order: per layer, weight row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn from_flat(signature: &[(usize, usize)], values: &[f64]) -> Result<Self> {
        let expected: usize = signature.iter().map(|&(o, i)| o * i + o).sum();
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} values for signature, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(signature.len());
        for &(out, inp) in signature {
            let w = Array2::from_shape_vec((out, inp), values[offset..offset + out * inp].to_vec())
                .expect("length checked above");
            offset += out * inp;
            let b = Array1::from(values[offset..offset + out].to_vec());
            offset += out;
            layers.push(Layer { weight: w, bias: b });
        }
        Ok(Self { layers })
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &ParameterSet, alpha: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|v| v * alpha);
            l.bias.mapv_inplace(|v| v * alpha);
        }
    }

    /// Applies `f(param, a, b)` entrywise across three equally shaped sets.
    pub(crate) fn zip3_mut(
        &mut self,
        a: &ParameterSet,
        b: &ParameterSet,
        mut f: impl FnMut(&mut f64, f64, f64),
    ) {
        for ((p, x), y) in self.layers.iter_mut().zip(&a.layers).zip(&b.layers) {
            Zip::from(&mut p.weight)
                .and(&x.weight)
                .and(&y.weight)
                .for_each(|p, &x, &y| f(p, x, y));
            Zip::from(&mut p.bias)
                .and(&x.bias)
                .and(&y.bias)
                .for_each(|p, &x, &y| f(p, x, y));
        }
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        self.to_flat()
            .iter()
            .zip(other.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
