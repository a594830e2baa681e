//! Parameter storage and small neural building blocks.
//!
//! All trainable tensors live in a flat [`Params`] arena with stable,
//! insertion-ordered ids; layers hold [`PId`] handles rather than the
//! tensors themselves. A [`Ctx`] binds the arena onto a fresh [`Tape`] for
//! one forward/backward pass, leafing each parameter lazily on first use.

use rand::Rng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Handle to one named parameter tensor in a [`Params`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(pub(crate) usize);

/// Insertion-ordered store of named parameter tensors.
///
/// The order is the canonical parameter order used by the optimiser,
/// checkpoints and gradient checks.
#[derive(Debug, Clone, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> PId {
        self.names.push(name.into());
        self.values.push(value);
        PId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: PId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: PId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> {
        (0..self.values.len()).map(PId)
    }
}

/// One forward pass: a tape plus lazy bindings of parameters onto it.
pub struct Ctx<'p> {
    pub tape: Tape,
    params: &'p Params,
    bound: Vec<Option<Var>>,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p Params) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    /// The tape var for a parameter, leafing it on first use.
    pub fn p(&mut self, id: PId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Gradient of the last `backward` target w.r.t. parameter `id`
    /// (zeros if the parameter was unused in this graph).
    pub fn grad(&self, id: PId) -> Tensor {
        match self.bound[id.0] {
            Some(v) => self
                .tape
                .grad(v)
                .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape())),
            None => Tensor::zeros(self.params.get(id).shape()),
        }
    }

    /// Gradients for every parameter in arena order.
    pub fn all_grads(&self) -> Vec<Tensor> {
        self.params.ids().map(|id| self.grad(id)).collect()
    }
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: PId,
    pub b: PId,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: params.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng)),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    /// Apply to `x: [rows, in]`, returning `[rows, out]`.
    pub fn apply(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(self.w);
        let b = cx.p(self.b);
        let xw = cx.tape.matmul(x, w);
        cx.tape.add(xw, b)
    }
}

/// Standard LSTM cell with (input, forget, cell, output) gates.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_x: PId,
    pub w_h: PId,
    pub b: PId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / (input + hidden) as f64).sqrt();
        LstmCell {
            w_x: params.add(
                format!("{name}.w_x"),
                Tensor::randn(&[input, 4 * hidden], std, rng),
            ),
            w_h: params.add(
                format!("{name}.w_h"),
                Tensor::randn(&[hidden, 4 * hidden], std, rng),
            ),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[4 * hidden])),
            hidden,
        }
    }

    /// One step. `x: [B, input]`, `h/c: [B, hidden]` -> `(h', c')`.
    pub fn step(&self, cx: &mut Ctx, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hdim = self.hidden;
        assert_eq!(
            cx.tape.value(x).dim(1),
            cx.params.get(self.w_x).dim(0),
            "lstm: input width {} does not match weights {}",
            cx.tape.value(x).dim(1),
            cx.params.get(self.w_x).dim(0)
        );
        let w_x = cx.p(self.w_x);
        let w_h = cx.p(self.w_h);
        let b = cx.p(self.b);
        let zx = cx.tape.matmul(x, w_x);
        let zh = cx.tape.matmul(h, w_h);
        let z = cx.tape.add(zx, zh);
        let z = cx.tape.add(z, b);
        let i_gate = cx.tape.slice_cols(z, 0, hdim);
        let i_gate = cx.tape.sigmoid(i_gate);
        let f_gate = cx.tape.slice_cols(z, hdim, 2 * hdim);
        let f_gate = cx.tape.sigmoid(f_gate);
        let g = cx.tape.slice_cols(z, 2 * hdim, 3 * hdim);
        let g = cx.tape.tanh(g);
        let o_gate = cx.tape.slice_cols(z, 3 * hdim, 4 * hdim);
        let o_gate = cx.tape.sigmoid(o_gate);
        let fc = cx.tape.mul(f_gate, c);
        let ig = cx.tape.mul(i_gate, g);
        let c_new = cx.tape.add(fc, ig);
        let tc = cx.tape.tanh(c_new);
        let h_new = cx.tape.mul(o_gate, tc);
        (h_new, c_new)
    }

    pub fn zero_state(&self, cx: &mut Ctx, batch: usize) -> (Var, Var) {
        let h = cx.constant(Tensor::zeros(&[batch, self.hidden]));
        let c = cx.constant(Tensor::zeros(&[batch, self.hidden]));
        (h, c)
    }
}

/// Embedding table with row lookup.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub w: PId,
    pub vocab: usize,
}

impl Embedding {
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Embedding {
            w: params.add(format!("{name}.w"), Tensor::randn(&[vocab, dim], 0.3, rng)),
            vocab,
        }
    }

    /// Look up rows for `idx`, returning `[len, dim]`. Indices must already
    /// be validated against the vocabulary.
    pub fn lookup(&self, cx: &mut Ctx, idx: &[usize]) -> Var {
        let w = cx.p(self.w);
        cx.tape.gather_rows(w, idx)
    }
}

/// Inverted-scale Bernoulli dropout mask: entries are `1/(1-rate)` with
/// probability `1-rate` and `0` otherwise, so the mask has unit mean.
/// Deterministic given the rng state.
pub fn dropout_mask<R: Rng>(shape: &[usize], rate: f64, rng: &mut R) -> Tensor {
    assert!(
        (0.0..1.0).contains(&rate),
        "dropout rate must be in [0, 1), got {rate}"
    );
    if rate == 0.0 {
        return Tensor::full(shape, 1.0);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lstm_zero_params_zero_state_gives_zero_output() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut params, "lstm", 3, 4, &mut rng);
        // zero out the random weights
        for id in params.ids() {
            let t = params.get_mut(id);
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut cx = Ctx::new(&params);
        let x = cx.constant(Tensor::new(vec![1, 3], vec![0.7, -1.2, 3.4]));
        let (h0, c0) = cell.zero_state(&mut cx, 1);
        let (h, c) = cell.step(&mut cx, x, h0, c0);
        assert!(cx.tape.value(h).data().iter().all(|&v| v == 0.0));
        assert!(cx.tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_gates_preserve_cell() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new(&mut params, "lstm", 2, 3, &mut rng);
        {
            let b = params.get_mut(cell.b);
            let data = b.data_mut();
            for h in 0..3 {
                data[h] = -20.0; // input gate shut
                data[3 + h] = 20.0; // forget gate open
            }
        }
        let mut cx = Ctx::new(&params);
        let x = cx.constant(Tensor::new(vec![1, 2], vec![0.3, -0.4]));
        let c_prev = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]);
        let h0 = cx.constant(Tensor::zeros(&[1, 3]));
        let c0 = cx.constant(c_prev.clone());
        let (_, c) = cell.step(&mut cx, x, h0, c0);
        for (got, want) in cx.tape.value(c).data().iter().zip(c_prev.data()) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn lstm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut params = Params::new();
        let cell = LstmCell::new(&mut params, "lstm", 3, 4, &mut rng);
        let x0 = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let h0 = Tensor::randn(&[1, 4], 0.5, &mut rng);
        let c0 = Tensor::randn(&[1, 4], 0.5, &mut rng);

        let eval = |ps: &Params| -> f64 {
            let mut cx = Ctx::new(ps);
            let x = cx.constant(x0.clone());
            let h = cx.constant(h0.clone());
            let c = cx.constant(c0.clone());
            let (h1, c1) = cell.step(&mut cx, x, h, c);
            let (h2, _) = cell.step(&mut cx, x, h1, c1);
            let s = cx.tape.sum(h2);
            cx.tape.value(s).item()
        };

        let mut cx = Ctx::new(&params);
        let x = cx.constant(x0.clone());
        let h = cx.constant(h0.clone());
        let c = cx.constant(c0.clone());
        let (h1, c1) = cell.step(&mut cx, x, h, c);
        let (h2, _) = cell.step(&mut cx, x, h1, c1);
        let s = cx.tape.sum(h2);
        cx.tape.backward(s);

        let h_step = 1e-5;
        for id in params.ids() {
            let analytic = cx.grad(id);
            let n = params.get(id).numel();
            for i in 0..n {
                let mut pp = params.clone();
                pp.get_mut(id).data_mut()[i] += h_step;
                let fp = eval(&pp);
                let mut pm = params.clone();
                pm.get_mut(id).data_mut()[i] -= h_step;
                let fm = eval(&pm);
                let num = (fp - fm) / (2.0 * h_step);
                let a = analytic.data()[i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "{} [{i}]: {a} vs {num}", params.name(id));
            }
        }
    }

    #[test]
    fn dropout_rate_zero_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = dropout_mask(&[4, 4], 0.0, &mut rng);
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let m1 = dropout_mask(&[8, 8], 0.5, &mut r1);
        let m2 = dropout_mask(&[8, 8], 0.5, &mut r2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn dropout_mean_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = dropout_mask(&[100_000], 0.5, &mut rng);
        let mean = m.data().iter().sum::<f64>() / m.numel() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    #[should_panic(expected = "dropout rate must be in [0, 1)")]
    fn dropout_rate_one_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        dropout_mask(&[2], 1.0, &mut rng);
    }
}
