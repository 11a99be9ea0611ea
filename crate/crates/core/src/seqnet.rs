//! Single-layer GRU with an affine decoder, trained end to end through a
//! softmax cross-entropy on adjusted log-probabilities.
//!
//! Cell equations, with `h_0 = 0`:
//!
//! ```text
//! z_t = σ(W_z x_t + U_z h_{t-1} + b_z)
//! r_t = σ(W_r x_t + U_r h_{t-1} + b_r)
//! ĥ_t = tanh(W_h x_t + U_h (r_t ⊙ h_{t-1}) + b_h)
//! h_t = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ ĥ_t
//! a   = W_out h_K + b_out
//! ```
//!
//! The training loss for one sample is `CE(softmax(base_logits + a), target)`
//! where `base_logits` are the query's original log-probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged matrix rows".into()));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn random(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Matrix { rows, cols, data: (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect() }
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data.chunks_exact(self.cols).map(|row| dot(row, x)).collect()
    }

    /// `out += selfᵀ · y`
    fn add_matvec_t(&self, y: &[f64], out: &mut [f64]) {
        for (row, &yi) in self.data.chunks_exact(self.cols).zip(y) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * yi;
            }
        }
    }

    /// `self += y xᵀ`
    fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        for (row, &yi) in self.data.chunks_exact_mut(self.cols).zip(y) {
            for (w, xj) in row.iter_mut().zip(x) {
                *w += yi * xj;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Matrix::zeros(hidden_dim, input_dim);
        let u = || Matrix::zeros(hidden_dim, hidden_dim);
        GruParams {
            input_dim,
            hidden_dim,
            w_z: w(),
            w_r: w(),
            w_h: w(),
            u_z: u(),
            u_r: u(),
            u_h: u(),
            b_z: vec![0.0; hidden_dim],
            b_r: vec![0.0; hidden_dim],
            b_h: vec![0.0; hidden_dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl DecoderParams {
    pub fn zeros(output_dim: usize, hidden_dim: usize) -> Self {
        DecoderParams { w_out: Matrix::zeros(output_dim, hidden_dim), b_out: vec![0.0; output_dim] }
    }
}

/// GRU plus decoder. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqNet {
    pub gru: GruParams,
    pub decoder: DecoderParams,
}

/// Names of the parameter tensors in flattening and checkpoint order.
pub const TENSOR_NAMES: [&str; 11] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h", "w_out", "b_out"];

impl SeqNet {
    pub fn zeros(classes: usize, hidden_dim: usize) -> Self {
        SeqNet { gru: GruParams::zeros(classes, hidden_dim), decoder: DecoderParams::zeros(classes, hidden_dim) }
    }

    pub fn num_classes(&self) -> usize {
        self.gru.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim
    }

    pub fn tensors(&self) -> [&[f64]; 11] {
        let g = &self.gru;
        [
            &g.w_z.data,
            &g.w_r.data,
            &g.w_h.data,
            &g.u_z.data,
            &g.u_r.data,
            &g.u_h.data,
            &g.b_z,
            &g.b_r,
            &g.b_h,
            &self.decoder.w_out.data,
            &self.decoder.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 11] {
        let g = &mut self.gru;
        [
            &mut g.w_z.data,
            &mut g.w_r.data,
            &mut g.w_h.data,
            &mut g.u_z.data,
            &mut g.u_r.data,
            &mut g.u_h.data,
            &mut g.b_z,
            &mut g.b_r,
            &mut g.b_h,
            &mut self.decoder.w_out.data,
            &mut self.decoder.b_out,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_shapes(&self) -> Result<()> {
        let (c, h) = (self.gru.input_dim, self.gru.hidden_dim);
        let g = &self.gru;
        let ok = [&g.w_z, &g.w_r, &g.w_h].iter().all(|m| m.rows == h && m.cols == c)
            && [&g.u_z, &g.u_r, &g.u_h].iter().all(|m| m.rows == h && m.cols == h)
            && [&g.b_z, &g.b_r, &g.b_h].iter().all(|b| b.len() == h)
            && self.decoder.w_out.cols == h
            && self.decoder.w_out.rows == self.decoder.b_out.len()
            && [&g.w_z, &g.w_r, &g.w_h, &g.u_z, &g.u_r, &g.u_h, &self.decoder.w_out]
                .iter()
                .all(|m| m.data.len() == m.rows * m.cols);
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("inconsistent parameter shapes for C={c}, H={h}")))
        }
    }
}

/// Uniform `±1/√fan_in` weights, zero biases, deterministic in `seed`.
pub fn init_params(seed: u64, classes: usize, hidden_dim: usize) -> SeqNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h) = (classes, hidden_dim);
    let w_bound = 1.0 / (c as f64).sqrt();
    let u_bound = 1.0 / (h as f64).sqrt();
    let w_z = Matrix::random(h, c, w_bound, &mut rng);
    let w_r = Matrix::random(h, c, w_bound, &mut rng);
    let w_h = Matrix::random(h, c, w_bound, &mut rng);
    let u_z = Matrix::random(h, h, u_bound, &mut rng);
    let u_r = Matrix::random(h, h, u_bound, &mut rng);
    let u_h = Matrix::random(h, h, u_bound, &mut rng);
    let w_out = Matrix::random(c, h, u_bound, &mut rng);
    SeqNet {
        gru: GruParams {
            input_dim: c,
            hidden_dim: h,
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z: vec![0.0; h],
            b_r: vec![0.0; h],
            b_h: vec![0.0; h],
        },
        decoder: DecoderParams { w_out, b_out: vec![0.0; c] },
    }
}

struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    candidate: Vec<f64>,
    h: Vec<f64>,
}

fn check_sequence(params: &GruParams, seq: &[Vec<f64>]) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::EmptyContext);
    }
    if let Some(x) = seq.iter().find(|x| x.len() != params.input_dim) {
        return Err(Error::ShapeMismatch(format!("input of length {} for input_dim {}", x.len(), params.input_dim)));
    }
    Ok(())
}

fn forward_cached(p: &GruParams, seq: &[Vec<f64>]) -> Vec<StepCache> {
    let mut h = vec![0.0; p.hidden_dim];
    let mut steps = Vec::with_capacity(seq.len());
    for x in seq {
        let wz = p.w_z.matvec(x);
        let uz = p.u_z.matvec(&h);
        let z: Vec<f64> = (0..p.hidden_dim).map(|i| sigmoid(wz[i] + uz[i] + p.b_z[i])).collect();
        let wr = p.w_r.matvec(x);
        let ur = p.u_r.matvec(&h);
        let r: Vec<f64> = (0..p.hidden_dim).map(|i| sigmoid(wr[i] + ur[i] + p.b_r[i])).collect();
        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let wh = p.w_h.matvec(x);
        let uh = p.u_h.matvec(&rh);
        let candidate: Vec<f64> = (0..p.hidden_dim).map(|i| (wh[i] + uh[i] + p.b_h[i]).tanh()).collect();
        let h_next: Vec<f64> = (0..p.hidden_dim).map(|i| (1.0 - z[i]) * h[i] + z[i] * candidate[i]).collect();
        steps.push(StepCache { x: x.clone(), h_prev: std::mem::replace(&mut h, h_next.clone()), z, r, candidate, h: h_next });
    }
    steps
}

/// Hidden state after every input, starting from `h_0 = 0`.
pub fn gru_forward(params: &GruParams, seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_sequence(params, seq)?;
    Ok(forward_cached(params, seq).into_iter().map(|s| s.h).collect())
}

/// `a = W_out h + b_out`.
pub fn decode_adjustment(dec: &DecoderParams, hidden: &[f64]) -> Result<Vec<f64>> {
    if hidden.len() != dec.w_out.cols {
        return Err(Error::ShapeMismatch(format!("hidden state of length {} for decoder width {}", hidden.len(), dec.w_out.cols)));
    }
    Ok(dec.w_out.matvec(hidden).into_iter().zip(&dec.b_out).map(|(a, b)| a + b).collect())
}

/// Adjustment vector for one sequence.
pub fn adjustment(net: &SeqNet, seq: &[Vec<f64>]) -> Result<Vec<f64>> {
    let states = gru_forward(&net.gru, seq)?;
    decode_adjustment(&net.decoder, states.last().expect("nonempty sequence"))
}

/// Loss `-ln softmax(logits)[target]` and its gradient `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|l| l - max).collect();
    let sum_exp: f64 = shifted.iter().map(|s| s.exp()).sum();
    let log_z = sum_exp.ln();
    let loss = log_z - shifted[target];
    let grad = shifted
        .iter()
        .enumerate()
        .map(|(c, s)| (s - log_z).exp() - if c == target { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

/// One supervised example: surprise sequence, original query log-probabilities, label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub seq: Vec<Vec<f64>>,
    pub base_logits: Vec<f64>,
    pub target: usize,
}

fn check_batch(net: &SeqNet, batch: &[TrainSample]) -> Result<()> {
    net.check_shapes()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let c = net.decoder.b_out.len();
    for sample in batch {
        check_sequence(&net.gru, &sample.seq)?;
        if sample.base_logits.len() != c {
            return Err(Error::ShapeMismatch(format!("{} base logits for {c} outputs", sample.base_logits.len())));
        }
        if sample.target >= c {
            return Err(Error::IndexOutOfRange { what: "target", index: sample.target, size: c });
        }
    }
    Ok(())
}

fn sample_logits(net: &SeqNet, sample: &TrainSample, last_hidden: &[f64]) -> Vec<f64> {
    let a = net.decoder.w_out.matvec(last_hidden);
    sample.base_logits.iter().zip(a.iter().zip(&net.decoder.b_out)).map(|(l, (a, b))| l + a + b).collect()
}

/// Mean cross-entropy over the batch.
pub fn loss(net: &SeqNet, batch: &[TrainSample]) -> Result<f64> {
    check_batch(net, batch)?;
    let total: f64 = batch
        .iter()
        .map(|s| {
            let steps = forward_cached(&net.gru, &s.seq);
            let logits = sample_logits(net, s, &steps.last().expect("nonempty").h);
            softmax_cross_entropy(&logits, s.target).0
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Mean loss and its exact gradient with respect to every parameter.
pub fn backward(net: &SeqNet, batch: &[TrainSample]) -> Result<(f64, SeqNet)> {
    check_batch(net, batch)?;
    let p = &net.gru;
    let hd = p.hidden_dim;
    let mut grad = SeqNet::zeros(p.input_dim, hd);
    grad.decoder = DecoderParams::zeros(net.decoder.b_out.len(), hd);
    let mut total = 0.0;

    for sample in batch {
        let steps = forward_cached(p, &sample.seq);
        let h_last = &steps.last().expect("nonempty").h;
        let (l, dlogits) = softmax_cross_entropy(&sample_logits(net, sample, h_last), sample.target);
        total += l;

        grad.decoder.w_out.add_outer(&dlogits, h_last);
        for (g, d) in grad.decoder.b_out.iter_mut().zip(&dlogits) {
            *g += d;
        }
        let mut dh = vec![0.0; hd];
        net.decoder.w_out.add_matvec_t(&dlogits, &mut dh);

        for step in steps.iter().rev() {
            let mut dh_prev: Vec<f64> = (0..hd).map(|i| dh[i] * (1.0 - step.z[i])).collect();
            let da_z: Vec<f64> = (0..hd)
                .map(|i| dh[i] * (step.candidate[i] - step.h_prev[i]) * step.z[i] * (1.0 - step.z[i]))
                .collect();
            let da_h: Vec<f64> =
                (0..hd).map(|i| dh[i] * step.z[i] * (1.0 - step.candidate[i] * step.candidate[i])).collect();

            let rh: Vec<f64> = step.r.iter().zip(&step.h_prev).map(|(a, b)| a * b).collect();
            let mut drh = vec![0.0; hd];
            p.u_h.add_matvec_t(&da_h, &mut drh);
            let da_r: Vec<f64> =
                (0..hd).map(|i| drh[i] * step.h_prev[i] * step.r[i] * (1.0 - step.r[i])).collect();
            for i in 0..hd {
                dh_prev[i] += drh[i] * step.r[i];
            }
            p.u_z.add_matvec_t(&da_z, &mut dh_prev);
            p.u_r.add_matvec_t(&da_r, &mut dh_prev);

            let g = &mut grad.gru;
            g.w_z.add_outer(&da_z, &step.x);
            g.w_r.add_outer(&da_r, &step.x);
            g.w_h.add_outer(&da_h, &step.x);
            g.u_z.add_outer(&da_z, &step.h_prev);
            g.u_r.add_outer(&da_r, &step.h_prev);
            g.u_h.add_outer(&da_h, &rh);
            for i in 0..hd {
                g.b_z[i] += da_z[i];
                g.b_r[i] += da_r[i];
                g.b_h[i] += da_h[i];
            }
            dh = dh_prev;
        }
    }

    let n = batch.len() as f64;
    for t in grad.tensors_mut() {
        t.iter_mut().for_each(|g| *g /= n);
    }
    Ok((total / n, grad))
}

/// Largest relative disagreement between analytic and central-difference
/// gradients over a seeded subsample of coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Central-difference gradient check on at least 200 coordinates (all of
/// them when the model is smaller).
pub fn finite_diff_check(net: &SeqNet, batch: &[TrainSample], eps: f64) -> Result<GradCheck> {
    finite_diff_check_with(net, batch, eps, 200, 0)
}

pub fn finite_diff_check_with(
    net: &SeqNet,
    batch: &[TrainSample],
    eps: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheck> {
    let (_, grad) = backward(net, batch)?;
    let analytic = grad.to_flat();
    let base = net.to_flat();
    let n = base.len();
    let coords: Vec<usize> = if n <= min_coords {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, n, min_coords).into_vec()
    };

    let mut probe = net.clone();
    let mut flat = base.clone();
    let mut max_rel_error: f64 = 0.0;
    for &i in &coords {
        flat[i] = base[i] + eps;
        probe.set_flat(&flat)?;
        let plus = loss(&probe, batch)?;
        flat[i] = base[i] - eps;
        probe.set_flat(&flat)?;
        let minus = loss(&probe, batch)?;
        flat[i] = base[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel_error = max_rel_error.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(GradCheck { max_rel_error, coords_checked: coords.len() })
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState { t: 0, m: vec![0.0; num_params], v: vec![0.0; num_params], beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Full-batch training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 200, learning_rate: 1e-4, hidden_dim: 32, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Trains a fresh network with full-batch Adam. Returns the model and the
/// loss recorded before each epoch's update.
pub fn train(classes: usize, batch: &[TrainSample], cfg: &TrainConfig) -> Result<(SeqNet, Vec<f64>)> {
    cfg.validate()?;
    let mut net = init_params(cfg.seed, classes, cfg.hidden_dim);
    check_batch(&net, batch)?;
    let mut state = AdamState::new(net.num_params());
    let mut flat = net.to_flat();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (l, grad) = backward(&net, batch)?;
        history.push(l);
        adam_step(&mut flat, &grad.to_flat(), &mut state, cfg.learning_rate)?;
        net.set_flat(&flat)?;
    }
    Ok((net, history))
}

/// Serialized network: dimensions, training config and one flat row-major
/// array per tensor, keyed by [`TENSOR_NAMES`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub tensors: std::collections::BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn from_net(net: &SeqNet, config: &TrainConfig) -> Self {
        Checkpoint {
            input_dim: net.gru.input_dim,
            hidden_dim: net.gru.hidden_dim,
            output_dim: net.decoder.b_out.len(),
            seed: config.seed,
            config: config.clone(),
            tensors: TENSOR_NAMES.iter().zip(net.tensors()).map(|(n, t)| (n.to_string(), t.to_vec())).collect(),
        }
    }

    pub fn to_net(&self) -> Result<SeqNet> {
        let mut net = SeqNet::zeros(self.input_dim, self.hidden_dim);
        net.decoder = DecoderParams::zeros(self.output_dim, self.hidden_dim);
        for (name, tensor) in TENSOR_NAMES.iter().zip(net.tensors_mut()) {
            let values = self.tensors.get(*name).ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {name}")))?;
            if values.len() != tensor.len() {
                return Err(Error::ShapeMismatch(format!("tensor {name} has {} values, expected {}", values.len(), tensor.len())));
            }
            tensor.copy_from_slice(values);
        }
        Ok(net)
    }
}
