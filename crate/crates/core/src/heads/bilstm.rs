use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::mlp::Dense;
use super::{cross_entropy, dropout_mask, EmotionLogits, HeadError};
use crate::metrics::NUM_CLASSES;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM direction. Gate blocks are stacked `[i, f, g, o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirection {
    /// `[4H x D]`
    pub w_ih: Array2<f64>,
    /// `[4H x H]`
    pub w_hh: Array2<f64>,
    /// `[4H]`
    pub bias: Array1<f64>,
}

struct StepCache {
    /// Post-nonlinearity gates per step, `[n x 4H]`.
    gates: Array2<f64>,
    /// Cell states, row `s` is the state before step `s`; `[n+1 x H]`.
    cells: Array2<f64>,
    /// Hidden states laid out like `cells`.
    hiddens: Array2<f64>,
}

impl LstmDirection {
    fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut u = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-bound..bound));
        let w_ih = u(4 * hidden, input);
        let w_hh = u(4 * hidden, hidden);
        let bias = u(4 * hidden, 1).into_shape_with_order(4 * hidden).expect("column");
        LstmDirection { w_ih, w_hh, bias }
    }

    fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    fn zeros_like(&self) -> Self {
        LstmDirection {
            w_ih: Array2::zeros(self.w_ih.raw_dim()),
            w_hh: Array2::zeros(self.w_hh.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    /// Runs over `xs` (already in processing order) and returns the final hidden state.
    fn run(&self, xs: ArrayView2<f64>) -> (Array1<f64>, StepCache) {
        let n = xs.nrows();
        let h_dim = self.hidden();
        let projected = xs.dot(&self.w_ih.t());
        let mut cache = StepCache {
            gates: Array2::zeros((n, 4 * h_dim)),
            cells: Array2::zeros((n + 1, h_dim)),
            hiddens: Array2::zeros((n + 1, h_dim)),
        };
        for step in 0..n {
            let z = &projected.row(step) + &self.w_hh.dot(&cache.hiddens.row(step)) + &self.bias;
            let mut gates = cache.gates.row_mut(step);
            for k in 0..4 * h_dim {
                gates[k] = if (2 * h_dim..3 * h_dim).contains(&k) { z[k].tanh() } else { sigmoid(z[k]) };
            }
            for j in 0..h_dim {
                let (i, f, g, o) = (gates[j], gates[h_dim + j], gates[2 * h_dim + j], gates[3 * h_dim + j]);
                let c = f * cache.cells[[step, j]] + i * g;
                cache.cells[[step + 1, j]] = c;
                cache.hiddens[[step + 1, j]] = o * c.tanh();
            }
        }
        (cache.hiddens.row(n).to_owned(), cache)
    }

    /// Backpropagates `dh_final` through the recurrence and adds into `grad`.
    fn backward(&self, xs: ArrayView2<f64>, cache: &StepCache, dh_final: Array1<f64>, grad: &mut LstmDirection) {
        let n = xs.nrows();
        let h_dim = self.hidden();
        let mut dz = Array2::<f64>::zeros((n, 4 * h_dim));
        let mut dh = dh_final;
        let mut dc = Array1::<f64>::zeros(h_dim);
        for step in (0..n).rev() {
            let gates = cache.gates.row(step);
            let mut row = dz.row_mut(step);
            for j in 0..h_dim {
                let (i, f, g, o) = (gates[j], gates[h_dim + j], gates[2 * h_dim + j], gates[3 * h_dim + j]);
                let tc = cache.cells[[step + 1, j]].tanh();
                let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
                row[j] = dcj * g * i * (1.0 - i);
                row[h_dim + j] = dcj * cache.cells[[step, j]] * f * (1.0 - f);
                row[2 * h_dim + j] = dcj * i * (1.0 - g * g);
                row[3 * h_dim + j] = dh[j] * tc * o * (1.0 - o);
                dc[j] = dcj * f;
            }
            dh = self.w_hh.t().dot(&row);
        }
        grad.w_ih += &dz.t().dot(&xs);
        grad.w_hh += &dz.t().dot(&cache.hiddens.slice(s![..n, ..]));
        grad.bias += &dz.sum_axis(Axis(0));
    }
}

/// Single-layer bidirectional LSTM read out from the last forward state and
/// the last backward state (at t = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub forward_dir: LstmDirection,
    pub backward_dir: LstmDirection,
    /// `[3 x 2H]`
    pub output: Dense,
    pub dropout: f64,
}

impl BiLstm {
    pub fn new(input_dim: usize, hidden: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        BiLstm {
            forward_dir: LstmDirection::new(input_dim, hidden, rng),
            backward_dir: LstmDirection::new(input_dim, hidden, rng),
            output: Dense::new(2 * hidden, NUM_CLASSES, rng),
            dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forward_dir.w_ih.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.forward_dir.hidden()
    }

    pub fn zeros_like(&self) -> Self {
        BiLstm {
            forward_dir: self.forward_dir.zeros_like(),
            backward_dir: self.backward_dir.zeros_like(),
            output: self.output.zeros_like(),
            dropout: self.dropout,
        }
    }

    fn encode(&self, x: &Array2<f64>) -> (Array1<f64>, StepCache, StepCache) {
        let (hf, cf) = self.forward_dir.run(x.view());
        let (hb, cb) = self.backward_dir.run(x.slice(s![..;-1, ..]));
        (concatenate![Axis(0), hf, hb], cf, cb)
    }

    fn check(&self, frames: &ArrayView2<f32>) -> Result<(), HeadError> {
        if frames.nrows() == 0 {
            return Err(HeadError::EmptySequence);
        }
        if frames.ncols() != self.input_dim() {
            return Err(HeadError::DimensionMismatch { expected: self.input_dim(), got: frames.ncols() });
        }
        Ok(())
    }

    pub fn forward(&self, frames: ArrayView2<f32>) -> Result<EmotionLogits, HeadError> {
        self.check(&frames)?;
        let x = frames.mapv(f64::from);
        let (state, _, _) = self.encode(&x);
        Ok(EmotionLogits::from_array(self.output.apply(state.view()).view()))
    }

    /// Final `[h_fwd ; h_bwd]` state, `2H` wide.
    pub fn final_state(&self, frames: ArrayView2<f32>) -> Result<Array1<f64>, HeadError> {
        self.check(&frames)?;
        Ok(self.encode(&frames.mapv(f64::from)).0)
    }

    pub fn accumulate_gradient(
        &self,
        frames: ArrayView2<f32>,
        target: usize,
        rng: Option<&mut ChaCha8Rng>,
        grads: &mut BiLstm,
        scale: f64,
    ) -> Result<f64, HeadError> {
        self.check(&frames)?;
        let x = frames.mapv(f64::from);
        let (mut state, cf, cb) = self.encode(&x);
        let mask = dropout_mask(rng, self.dropout, state.len());
        if let Some(m) = &mask {
            state *= m;
        }
        let logits = self.output.apply(state.view());
        let (loss, dlogits) = cross_entropy(&[logits[0], logits[1], logits[2]], target);
        let delta = Array1::from_vec(dlogits.to_vec()) * scale;
        let mut dstate = self.output.backward(state.view(), &delta, &mut grads.output);
        if let Some(m) = &mask {
            dstate *= m;
        }
        let h = self.hidden();
        let dh_f = dstate.slice(s![..h]).to_owned();
        let dh_b = dstate.slice(s![h..]).to_owned();
        self.forward_dir.backward(x.view(), &cf, dh_f, &mut grads.forward_dir);
        self.backward_dir.backward(x.slice(s![..;-1, ..]), &cb, dh_b, &mut grads.backward_dir);
        Ok(loss)
    }

    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (prefix, dir) in [("lstm.forward", &self.forward_dir), ("lstm.backward", &self.backward_dir)] {
            out.push((
                format!("{prefix}.w_ih"),
                dir.w_ih.shape().to_vec(),
                dir.w_ih.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{prefix}.w_hh"),
                dir.w_hh.shape().to_vec(),
                dir.w_hh.as_slice().expect("standard layout"),
            ));
            out.push((format!("{prefix}.bias"), vec![dir.bias.len()], dir.bias.as_slice().expect("standard layout")));
        }
        self.output.push_named("out", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for dir in [&mut self.forward_dir, &mut self.backward_dir] {
            out.push(dir.w_ih.as_slice_mut().expect("standard layout"));
            out.push(dir.w_hh.as_slice_mut().expect("standard layout"));
            out.push(dir.bias.as_slice_mut().expect("standard layout"));
        }
        self.output.push_mut(&mut out);
        out
    }
}

/// Straight-line reference of one LSTM step, used by tests.
#[cfg(test)]
fn reference_step(dir: &LstmDirection, x: ndarray::ArrayView1<f64>, h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hd = h.len();
    let mut z = vec![0.0; 4 * hd];
    for (r, zr) in z.iter_mut().enumerate() {
        *zr = dir.bias[r];
        for (k, xv) in x.iter().enumerate() {
            *zr += dir.w_ih[[r, k]] * xv;
        }
        for (k, hv) in h.iter().enumerate() {
            *zr += dir.w_hh[[r, k]] * hv;
        }
    }
    let mut h_new = vec![0.0; hd];
    let mut c_new = vec![0.0; hd];
    for j in 0..hd {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[hd + j]);
        let g = z[2 * hd + j].tanh();
        let o = sigmoid(z[3 * hd + j]);
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_frames(t: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn final_state_matches_step_by_step_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = BiLstm::new(4, 3, 0.0, &mut rng);
        let frames = random_frames(5, 4, 2);
        let x = frames.mapv(f64::from);
        let run = |dir: &LstmDirection, order: Vec<usize>| {
            let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
            for t in order {
                (h, c) = reference_step(dir, x.row(t), &h, &c);
            }
            h
        };
        let hf = run(&net.forward_dir, (0..5).collect());
        let hb = run(&net.backward_dir, (0..5).rev().collect());
        let state = net.final_state(frames.view()).unwrap();
        let expected: Vec<f64> = hf.into_iter().chain(hb).collect();
        for (a, b) in state.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_frame_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = BiLstm::new(6, 50, 0.1, &mut rng);
        let logits = net.forward(random_frames(1, 6, 3).view()).unwrap();
        assert!(logits.scores.iter().all(|v| v.is_finite()));
        assert_eq!(net.output.weight.dim(), (3, 100));
    }

    #[test]
    fn backward_readout_sees_the_first_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = BiLstm::new(2, 4, 0.0, &mut rng);
        let a = random_frames(6, 2, 9);
        let mut b = a.clone();
        b.row_mut(0).fill(3.0);
        let (sa, sb) = (net.final_state(a.view()).unwrap(), net.final_state(b.view()).unwrap());
        assert_ne!(sa.slice(s![4..]), sb.slice(s![4..]));
    }
}
