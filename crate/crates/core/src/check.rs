//! Independent reference routines and the oracle suites behind `verify`.
//!
//! Everything here deliberately avoids the production code paths it is used
//! to check: determinants come from a pivoted LU factorisation, Jacobians
//! from central finite differences, and likelihoods from exhaustive
//! monotone-path enumeration.

use crate::tensor::Tensor;

/// `ln |det A|` of a dense square matrix via LU with partial pivoting.
pub fn log_abs_det(a: &[f64], d: usize) -> f64 {
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..d {
        let mut piv = col;
        for r in col + 1..d {
            if m[r * d + col].abs() > m[piv * d + col].abs() {
                piv = r;
            }
        }
        let p = m[piv * d + col];
        if p == 0.0 {
            return f64::NEG_INFINITY;
        }
        if piv != col {
            for j in 0..d {
                m.swap(col * d + j, piv * d + j);
            }
        }
        acc += m[col * d + col].abs().ln();
        for r in col + 1..d {
            let f = m[r * d + col] / m[col * d + col];
            if f == 0.0 {
                continue;
            }
            for j in col..d {
                m[r * d + j] -= f * m[col * d + j];
            }
        }
    }
    acc
}

/// Dense Jacobian of `f: R^n -> R^n` by central differences.
pub fn numerical_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<f64> {
    let n = x.len();
    let mut jac = vec![0.0; n * n]; // jac[row, col] = d out[row] / d x[col]
    for col in 0..n {
        let mut xp = x.to_vec();
        xp[col] += h;
        let mut xm = x.to_vec();
        xm[col] -= h;
        let fp = f(&xp);
        let fm = f(&xm);
        assert_eq!(fp.len(), n, "jacobian requires a square map");
        for row in 0..n {
            jac[row * n + col] = (fp[row] - fm[row]) / (2.0 * h);
        }
    }
    jac
}

/// Central finite-difference gradient of a scalar function of several flat
/// parameter blocks.
pub fn fd_grad(f: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for p in 0..inputs.len() {
        let mut gp = vec![0.0; inputs[p].len()];
        for i in 0..inputs[p].len() {
            let mut plus = inputs.to_vec();
            plus[p][i] += h;
            let mut minus = inputs.to_vec();
            minus[p][i] -= h;
            gp[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(gp);
    }
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Log-probability of one monotone path under per-(t,n) emission and
/// transition tables, including the terminal transition out of the last
/// state. `path` is 0-based state indices, one per frame.
pub fn path_log_prob(path: &[usize], log_e: &Tensor, log_tau: &Tensor, log_1mtau: &Tensor) -> f64 {
    let t_len = log_e.dim(0);
    assert_eq!(path.len(), t_len);
    let mut acc = 0.0;
    for (t, &s) in path.iter().enumerate() {
        acc += log_e.at2(t, s);
        if t + 1 < t_len {
            acc += if path[t + 1] == s {
                log_1mtau.at2(t, s)
            } else {
                log_tau.at2(t, s)
            };
        }
    }
    acc + log_tau.at2(t_len - 1, path[t_len - 1])
}

/// All monotone no-skip paths from state 0 at frame 0 to state `n-1` at the
/// last frame. A path may stay or advance by one at each frame boundary.
pub fn enumerate_paths(t_len: usize, n_states: usize) -> Vec<Vec<usize>> {
    fn recurse(
        path: &mut Vec<usize>,
        t: usize,
        s: usize,
        t_len: usize,
        n: usize,
        out: &mut Vec<Vec<usize>>,
    ) {
        if t == t_len {
            if s == n - 1 {
                out.push(path.clone());
            }
            return;
        }
        for next in [s, s + 1] {
            if next >= n {
                continue;
            }
            if (n - 1 - next) > (t_len - 1 - t) {
                continue; // cannot reach the last state in time
            }
            path[t] = next;
            recurse(path, t + 1, next, t_len, n, out);
        }
    }
    let mut out = Vec::new();
    if t_len == 0 || n_states == 0 || t_len < n_states {
        return out;
    }
    let mut path = vec![0usize; t_len];
    path[0] = 0;
    recurse(&mut path, 1, 0, t_len, n_states, &mut out);
    out
}

/// Log of the summed probability over all monotone paths — the brute-force
/// counterpart of the forward algorithm.
pub fn brute_force_loglik(log_e: &Tensor, log_tau: &Tensor, log_1mtau: &Tensor) -> f64 {
    let (t_len, n_states) = (log_e.dim(0), log_e.dim(1));
    let paths = enumerate_paths(t_len, n_states);
    let logs: Vec<f64> = paths
        .iter()
        .map(|p| path_log_prob(p, log_e, log_tau, log_1mtau))
        .collect();
    logsumexp_slice(&logs)
}

/// Best path and its log-probability by exhaustive search.
pub fn brute_force_best_path(
    log_e: &Tensor,
    log_tau: &Tensor,
    log_1mtau: &Tensor,
) -> (Vec<usize>, f64) {
    let (t_len, n_states) = (log_e.dim(0), log_e.dim(1));
    let mut best: Option<(Vec<usize>, f64)> = None;
    for p in enumerate_paths(t_len, n_states) {
        let lp = path_log_prob(&p, log_e, log_tau, log_1mtau);
        if best.as_ref().map_or(true, |(_, b)| lp > *b) {
            best = Some((p, lp));
        }
    }
    best.expect("no monotone path exists")
}

pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

// ── verify suites ────────────────────────────────────────────────────────
//
// Each suite builds fresh random instances, runs the production code and an
// independent reference against each other, and reports the worst error.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::{FlowConfig, FlowStack};
use crate::model::{ModelConfig, OverflowModel};
use crate::nhmm::{
    forward_from_tables, quantile_transition, viterbi_from_tables, Decoder, EncoderStates,
    SymbolSequence,
};
use crate::nn::{Ctx, Params};

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl SuiteResult {
    fn finish(name: &'static str, passed: bool, detail: String, start: Instant) -> Self {
        SuiteResult {
            name,
            passed,
            detail,
            elapsed: start.elapsed(),
        }
    }
}

fn tiny_decoder(seed: u64, frame_dim: usize, state_dim: usize) -> (Params, Decoder) {
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dec = Decoder::new(&mut params, frame_dim, state_dim, 3, 4, 1, 0.5, &mut rng);
    (params, dec)
}

/// Random tiny-model emission/transition tables plus the DP loglik and the
/// brute-force loglik over the same tables.
fn forward_case(seed: u64) -> (f64, f64, f64) {
    let mut dims = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let d = dims.gen_range(1..=3usize);
    let n = dims.gen_range(1..=4usize);
    let t_len = dims.gen_range(n..=8usize);
    let state_dim = 3;
    let (params, dec) = tiny_decoder(seed, d, state_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let enc_t = Tensor::randn(&[n, state_dim], 1.0, &mut rng);
    let frames_t = Tensor::randn(&[t_len, d], 1.0, &mut rng);

    let mut cx = Ctx::new(&params);
    let h = cx.constant(enc_t);
    let enc = EncoderStates {
        h,
        n,
        states_per_symbol: 1,
    };
    let frames = cx.constant(frames_t);
    let tables = dec.teacher_forced_tables::<ChaCha8Rng>(&mut cx, frames, &enc, None);
    let (ll, _) = forward_from_tables(&mut cx, &tables, n);
    let forward = cx.tape.value(ll).item();
    let (le, lt, l1) = tables.values(&cx.tape);
    let brute = brute_force_loglik(&le, &lt, &l1);
    let (_, viterbi_score) = viterbi_from_tables(&le, &lt, &l1);
    let (_, brute_best) = brute_force_best_path(&le, &lt, &l1);
    let _ = brute_best;
    (forward, brute, viterbi_score)
}

/// Forward algorithm vs exhaustive monotone-path enumeration.
pub fn suite_forward_oracle(instances: usize, tol: f64) -> SuiteResult {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..instances as u64 {
        let (forward, brute, _) = forward_case(1000 + i);
        worst = worst.max((forward - brute).abs());
    }
    SuiteResult::finish(
        "forward-oracle",
        worst < tol,
        format!("{instances} tiny models, max |forward - enumeration| = {worst:.3e}"),
        start,
    )
}

/// Viterbi vs exhaustive best path, plus the forward upper bound.
pub fn suite_viterbi_oracle(instances: usize, tol: f64) -> SuiteResult {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut bound_ok = true;
    for i in 0..instances as u64 {
        let seed = 1000 + i;
        let mut dims = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let d = dims.gen_range(1..=3usize);
        let n = dims.gen_range(1..=4usize);
        let t_len = dims.gen_range(n..=8usize);
        let (params, dec) = tiny_decoder(seed, d, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
        let enc_t = Tensor::randn(&[n, 3], 1.0, &mut rng);
        let frames_t = Tensor::randn(&[t_len, d], 1.0, &mut rng);
        let mut cx = Ctx::new(&params);
        let h = cx.constant(enc_t);
        let enc = EncoderStates {
            h,
            n,
            states_per_symbol: 1,
        };
        let frames = cx.constant(frames_t);
        let tables = dec.teacher_forced_tables::<ChaCha8Rng>(&mut cx, frames, &enc, None);
        let (ll, _) = forward_from_tables(&mut cx, &tables, n);
        let forward = cx.tape.value(ll).item();
        let (le, lt, l1) = tables.values(&cx.tape);
        let (path, score) = viterbi_from_tables(&le, &lt, &l1);
        let (best_path, best_score) = brute_force_best_path(&le, &lt, &l1);
        worst = worst.max((score - best_score).abs());
        if path.states() != &best_path[..] {
            bound_ok = false;
        }
        if score > forward + 1e-12 {
            bound_ok = false;
        }
    }
    SuiteResult::finish(
        "viterbi-oracle",
        worst < tol && bound_ok,
        format!("{instances} tiny models, max |viterbi - best path| = {worst:.3e}, bound held: {bound_ok}"),
        start,
    )
}

/// Flow invertibility plus log-determinant vs a numerical Jacobian.
pub fn suite_flow(stacks: usize, roundtrip_tol: f64, jacobian_tol: f64) -> SuiteResult {
    let start = Instant::now();
    let mut worst_rt = 0.0f64;
    let mut worst_jac = 0.0f64;
    for i in 0..stacks as u64 {
        let dim = [2usize, 4, 6, 8][(i % 4) as usize];
        let depth = 1 + (i % 2) as usize;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + i);
        let cfg = FlowConfig {
            depth,
            hidden: 6,
            conv_layers: 2,
            kernel: 3,
            dilation: 1,
        };
        let mut stack = FlowStack::new(&mut params, dim, &cfg, &mut rng).unwrap();
        for id in params.ids() {
            let t = params.get_mut(id);
            let fresh = Tensor::randn(t.shape(), 0.3, &mut rng);
            t.data_mut().copy_from_slice(fresh.data());
        }
        stack.mark_actnorm_initialized();

        let t_len = 2 + (i % 15) as usize;
        let z0 = Tensor::randn(&[t_len, dim], 1.0, &mut rng);
        let (x, ld) = stack.forward_values(&params, &z0);
        let (back, _) = stack.inverse_values(&params, &x);
        worst_rt = worst_rt.max(back.max_abs_diff(&z0));

        if t_len * dim <= 24 {
            let f = |flat: &[f64]| -> Vec<f64> {
                let z = Tensor::new(vec![t_len, dim], flat.to_vec());
                let (out, _) = stack.forward_values(&params, &z);
                out.into_data()
            };
            let jac = numerical_jacobian(&f, z0.data(), 1e-5);
            let expect = log_abs_det(&jac, t_len * dim);
            worst_jac = worst_jac.max((ld - expect).abs());
        }
    }
    SuiteResult::finish(
        "flow-invertibility",
        worst_rt < roundtrip_tol && worst_jac < jacobian_tol,
        format!(
            "{stacks} stacks, max roundtrip = {worst_rt:.3e}, max |logdet - log|det J|| = {worst_jac:.3e}"
        ),
        start,
    )
}

/// Analytic gradient of the full composed NLL vs central finite differences
/// over every parameter of a tiny model.
pub fn suite_gradients(tol: f64) -> SuiteResult {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab: 3,
        frame_dim: 2,
        embed_dim: 3,
        encoder_hidden: 3,
        state_dim: 4,
        states_per_symbol: 2,
        prenet_dim: 3,
        prenet_dropout: 0.5,
        decoder_hidden: 4,
        decoder_layers: 1,
        identity_flow: false,
        flow: FlowConfig {
            depth: 2,
            hidden: 4,
            conv_layers: 2,
            kernel: 3,
            dilation: 1,
        },
        temperature_scales_variance: false,
    };
    let model = OverflowModel::new(cfg, 2024).unwrap();
    let seq = SymbolSequence::new(vec![0, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let frames = Tensor::randn(&[6, 2], 1.0, &mut rng);

    let eval = |params: &Params| -> f64 {
        let stand_in = OverflowModel {
            params: params.clone(),
            encoder: model.encoder.clone(),
            decoder: model.decoder.clone(),
            flow: model.flow.clone(),
            config: model.config.clone(),
        };
        let mut drng = ChaCha8Rng::seed_from_u64(101);
        stand_in.nll(&[(&frames, &seq)], Some(&mut drng)).unwrap()
    };

    let mut cx = Ctx::new(&model.params);
    let mut drng = ChaCha8Rng::seed_from_u64(101);
    let loss = model
        .nll_var(&mut cx, &[(&frames, &seq)], Some(&mut drng))
        .unwrap();
    cx.tape.backward(loss);

    let mut worst = 0.0f64;
    let mut count = 0usize;
    let h = 1e-5;
    for id in model.params.ids() {
        let analytic = cx.grad(id);
        for i in 0..model.params.get(id).numel() {
            let mut pp = model.params.clone();
            pp.get_mut(id).data_mut()[i] += h;
            let fp = eval(&pp);
            let mut pm = model.params.clone();
            pm.get_mut(id).data_mut()[i] -= h;
            let fm = eval(&pm);
            let num = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], num));
            count += 1;
        }
    }
    SuiteResult::finish(
        "gradient-integrity",
        worst < tol,
        format!("{count} parameters, max relative error = {worst:.3e}"),
        start,
    )
}

/// Quantile duration rule vs the analytic first-crossing duration.
pub fn suite_quantile() -> SuiteResult {
    let start = Instant::now();
    let mut all_ok = true;
    let mut detail = String::new();
    for tau in [0.1f64, 0.3, 0.5] {
        for q in [0.5f64, 0.9] {
            // analytic d = min{d : 1 - (1-tau)^d >= q}
            let mut analytic = 1usize;
            while 1.0 - (1.0 - tau).powi(analytic as i32) < q {
                analytic += 1;
            }
            // rule as implemented
            let mut survival = 0.0;
            let mut fired = 0usize;
            for d in 1..1000 {
                let (advance, s) = quantile_transition(survival, tau, q);
                if advance {
                    fired = d;
                    break;
                }
                survival = s;
            }
            if fired != analytic {
                all_ok = false;
                detail.push_str(&format!("tau={tau} q={q}: {fired} != {analytic}; "));
            }
        }
    }
    if detail.is_empty() {
        detail = "exact match for tau in {0.1,0.3,0.5} x q in {0.5,0.9}".into();
    }
    SuiteResult::finish("quantile-durations", all_ok, detail, start)
}

/// The full battery behind `verify`.
pub fn run_all_suites() -> Vec<SuiteResult> {
    vec![
        suite_forward_oracle(200, 1e-8),
        suite_viterbi_oracle(200, 1e-8),
        suite_flow(100, 1e-6, 1e-5),
        suite_gradients(1e-4),
        suite_quantile(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_abs_det_of_diagonal() {
        let a = vec![2.0, 0.0, 0.0, 0.0, -3.0, 0.0, 0.0, 0.0, 0.5];
        let got = log_abs_det(&a, 3);
        assert!((got - (2.0f64 * 3.0 * 0.5).ln()).abs() < 1e-12);
    }

    #[test]
    fn path_enumeration_counts() {
        // C(T-1, N-1) monotone paths
        assert_eq!(enumerate_paths(8, 4).len(), 35);
        assert_eq!(enumerate_paths(3, 2).len(), 2);
        assert_eq!(enumerate_paths(4, 4).len(), 1);
        assert_eq!(enumerate_paths(2, 3).len(), 0); // T < N
    }

    #[test]
    fn jacobian_of_linear_map() {
        let a = [1.0, 2.0, 3.0, -4.0];
        let f = move |x: &[f64]| vec![a[0] * x[0] + a[1] * x[1], a[2] * x[0] + a[3] * x[1]];
        let jac = numerical_jacobian(&f, &[0.3, -0.7], 1e-5);
        for (j, expect) in jac.iter().zip(&a) {
            assert!((j - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn reduced_suites_pass() {
        // small instance counts here; the acceptance suite runs the full ones
        for s in [
            suite_forward_oracle(25, 1e-8),
            suite_viterbi_oracle(25, 1e-8),
            suite_flow(12, 1e-6, 1e-5),
            suite_quantile(),
        ] {
            assert!(s.passed, "{}: {}", s.name, s.detail);
        }
    }
}
