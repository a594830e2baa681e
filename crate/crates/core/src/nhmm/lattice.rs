//! Log-space forward recursion and Viterbi decoding over the
//! left-to-right no-skip topology.
//!
//! Both share the same band structure: a cell (t, n) is reachable only if
//! the path can have arrived from state 0 (n <= t) and can still finish in
//! state N-1 (n >= N - (T - t)). Cells outside the band are pinned to -inf.
//!
//!   log α_1(1) = log e_1(1),   log α_1(n>1) = -inf
//!   log α_t(n) = logaddexp(log α_{t-1}(n)   + log(1-τ_{t-1}(n)),
//!                          log α_{t-1}(n-1) + log τ_{t-1}(n-1)) + log e_t(n)
//!   total      = log α_T(N) + log τ_T(N)
//!
//! The terminal transition out of the last state is part of the score, so
//! training and synthesis agree on when sequences end.

use crate::nn::Ctx;
use crate::tape::Var;
use crate::tensor::Tensor;

use super::decoder::EmissionTables;
use super::AlignmentPath;

/// T×N table of log forward probabilities. Unreachable cells are -inf;
/// every in-band cell is finite.
pub struct LogAlphaLattice {
    pub log_alpha: Tensor,
}

impl LogAlphaLattice {
    pub fn t_len(&self) -> usize {
        self.log_alpha.dim(0)
    }

    pub fn n_states(&self) -> usize {
        self.log_alpha.dim(1)
    }

    /// Whether a cell lies on some monotone path from (0,0) to (T-1,N-1).
    pub fn in_band(t: usize, n: usize, t_len: usize, n_states: usize) -> bool {
        n <= t && n + (t_len - t) >= n_states
    }
}

fn band_mask(t: usize, t_len: usize, n_states: usize) -> Tensor {
    let data = (0..n_states)
        .map(|n| {
            if LogAlphaLattice::in_band(t, n, t_len, n_states) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Tensor::new(vec![n_states], data)
}

/// Forward recursion over prepared per-timestep tables. Returns the total
/// log-likelihood (a tape var, differentiable through the tables) and the
/// value-level lattice.
pub fn forward_from_tables(
    cx: &mut Ctx,
    tables: &EmissionTables,
    n_states: usize,
) -> (Var, LogAlphaLattice) {
    let t_len = tables.t_len();
    assert!(t_len >= n_states, "caller must reject T < N");

    let mut rows: Vec<Var> = Vec::with_capacity(t_len);
    let m0 = cx.constant(band_mask(0, t_len, n_states));
    let first = cx.tape.add(tables.log_e[0], m0);
    rows.push(first);
    for t in 1..t_len {
        let prev = rows[t - 1];
        let stay = cx.tape.add(prev, tables.log_1mtau[t - 1]);
        let advance = cx.tape.add(prev, tables.log_tau[t - 1]);
        let moved = cx.tape.shift_right_neg_inf(advance);
        let comb = cx.tape.logaddexp(stay, moved);
        let with_e = cx.tape.add(comb, tables.log_e[t]);
        let mask = cx.constant(band_mask(t, t_len, n_states));
        rows.push(cx.tape.add(with_e, mask));
    }
    let final_alpha = cx.tape.index(rows[t_len - 1], n_states - 1);
    let final_tau = cx.tape.index(tables.log_tau[t_len - 1], n_states - 1);
    let loglik = cx.tape.add(final_alpha, final_tau);

    let mut data = Vec::with_capacity(t_len * n_states);
    for &r in &rows {
        data.extend_from_slice(cx.tape.value(r).data());
    }
    (
        loglik,
        LogAlphaLattice {
            log_alpha: Tensor::new(vec![t_len, n_states], data),
        },
    )
}

/// Max-product counterpart with backpointers over value-level `[T, N]`
/// tables. Ties break toward "stay", keeping durations maximal.
pub fn viterbi_from_tables(
    log_e: &Tensor,
    log_tau: &Tensor,
    log_1mtau: &Tensor,
) -> (AlignmentPath, f64) {
    let (t_len, n_states) = (log_e.dim(0), log_e.dim(1));
    assert!(t_len >= n_states, "caller must reject T < N");
    let ninf = f64::NEG_INFINITY;
    let mut delta = vec![ninf; t_len * n_states];
    let mut back = vec![0usize; t_len * n_states];

    delta[0] = log_e.at2(0, 0); // point mass on state 0
    for t in 1..t_len {
        for n in 0..n_states {
            if !LogAlphaLattice::in_band(t, n, t_len, n_states) {
                continue;
            }
            let stay = delta[(t - 1) * n_states + n] + log_1mtau.at2(t - 1, n);
            let moved = if n > 0 {
                delta[(t - 1) * n_states + (n - 1)] + log_tau.at2(t - 1, n - 1)
            } else {
                ninf
            };
            if stay >= moved {
                delta[t * n_states + n] = stay + log_e.at2(t, n);
                back[t * n_states + n] = n;
            } else {
                delta[t * n_states + n] = moved + log_e.at2(t, n);
                back[t * n_states + n] = n - 1;
            }
        }
    }
    let score = delta[(t_len - 1) * n_states + (n_states - 1)] + log_tau.at2(t_len - 1, n_states - 1);
    let mut states = vec![0usize; t_len];
    states[t_len - 1] = n_states - 1;
    for t in (1..t_len).rev() {
        states[t - 1] = back[t * n_states + states[t]];
    }
    (AlignmentPath::new(states, n_states), score)
}
