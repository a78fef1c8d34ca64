use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{cross_entropy, dropout_mask, Activation, EmotionLogits, HeadError};
use crate::metrics::NUM_CLASSES;

/// `y = W x + b` with `W` stored `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub(crate) fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Dense {
            weight: Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..bound)),
            bias: Array1::from_shape_fn(output, |_| rng.random_range(-bound..bound)),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Dense { weight: Array2::zeros(self.weight.raw_dim()), bias: Array1::zeros(self.bias.len()) }
    }

    pub(crate) fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Adds the parameter gradient for upstream `delta` and returns `W^T delta`.
    pub(crate) fn backward(&self, x: ArrayView1<f64>, delta: &Array1<f64>, grad: &mut Dense) -> Array1<f64> {
        for (mut row, &d) in grad.weight.rows_mut().into_iter().zip(delta.iter()) {
            row.scaled_add(d, &x);
        }
        grad.bias += delta;
        self.weight.t().dot(delta)
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
        out.push((
            format!("{prefix}.weight"),
            self.weight.shape().to_vec(),
            self.weight.as_slice().expect("standard layout"),
        ));
        out.push((format!("{prefix}.bias"), vec![self.bias.len()], self.bias.as_slice().expect("standard layout")));
    }

    pub(crate) fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.weight.as_slice_mut().expect("standard layout"));
        out.push(self.bias.as_slice_mut().expect("standard layout"));
    }
}

/// Feed-forward classifier over a pooled `[D]` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(input_dim: usize, hidden: &[usize], activation: Activation, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(NUM_CLASSES);
        let layers = widths.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Mlp { layers, activation, dropout }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Mlp { layers: self.layers.iter().map(Dense::zeros_like).collect(), ..self.clone() }
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<EmotionLogits, HeadError> {
        if x.len() != self.input_dim() {
            return Err(HeadError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            a = layer.apply(a.view());
            if k < last {
                a.mapv_inplace(|z| self.activation.apply(z));
            }
        }
        Ok(EmotionLogits::from_array(a.view()))
    }

    pub fn accumulate_gradient(
        &self,
        x: ArrayView1<f64>,
        target: usize,
        mut rng: Option<&mut ChaCha8Rng>,
        grads: &mut Mlp,
        scale: f64,
    ) -> Result<f64, HeadError> {
        if x.len() != self.input_dim() {
            return Err(HeadError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let last = self.layers.len() - 1;
        // inputs[k] feeds layer k; pre[k] / masks[k] belong to hidden layer k
        let mut inputs = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        for layer in &self.layers[..last] {
            let z = layer.apply(inputs.last().unwrap().view());
            let mut a = z.mapv(|v| self.activation.apply(v));
            let mask = dropout_mask(rng.as_deref_mut(), self.dropout, a.len());
            if let Some(m) = &mask {
                a *= m;
            }
            pre.push(z);
            masks.push(mask);
            inputs.push(a);
        }
        let logits = self.layers[last].apply(inputs[last].view());
        let scores = [logits[0], logits[1], logits[2]];
        let (loss, dlogits) = cross_entropy(&scores, target);

        let mut delta = Array1::from_vec(dlogits.to_vec()) * scale;
        for k in (0..=last).rev() {
            let upstream = self.layers[k].backward(inputs[k].view(), &delta, &mut grads.layers[k]);
            if k == 0 {
                break;
            }
            let h = k - 1;
            let mut d = upstream;
            if let Some(m) = &masks[h] {
                d *= m;
            }
            let act = self.activation;
            // derivative uses the pre-dropout activation
            ndarray::Zip::from(&mut d).and(&pre[h]).for_each(|g, &z| *g *= act.derivative(z, act.apply(z)));
            delta = d;
        }
        Ok(loss)
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            layer.push_named(&format!("mlp.{k}"), &mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            layer.push_mut(&mut out);
        }
        out
    }
}
