//! Symbol encoder: embedding lookup, bidirectional LSTM pass, and a linear
//! head emitting `states_per_symbol` state vectors per symbol in input
//! order (monotone expansion).

use rand::Rng;

use crate::nn::{Ctx, Embedding, Linear, LstmCell, Params};
use crate::tape::Var;

use super::{EncoderStates, NhmmError, SymbolSequence};

#[derive(Debug, Clone)]
pub struct Encoder {
    embedding: Embedding,
    fwd: LstmCell,
    bwd: LstmCell,
    head: Linear,
    states_per_symbol: usize,
    state_dim: usize,
}

impl Encoder {
    pub fn new<R: Rng>(
        params: &mut Params,
        vocab: usize,
        embed_dim: usize,
        hidden: usize,
        state_dim: usize,
        states_per_symbol: usize,
        rng: &mut R,
    ) -> Self {
        assert!(states_per_symbol >= 1);
        Encoder {
            embedding: Embedding::new(params, "encoder.embedding", vocab, embed_dim, rng),
            fwd: LstmCell::new(params, "encoder.lstm_fwd", embed_dim, hidden, rng),
            bwd: LstmCell::new(params, "encoder.lstm_bwd", embed_dim, hidden, rng),
            head: Linear::new(
                params,
                "encoder.head",
                2 * hidden,
                states_per_symbol * state_dim,
                rng,
            ),
            states_per_symbol,
            state_dim,
        }
    }

    pub fn states_per_symbol(&self) -> usize {
        self.states_per_symbol
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// `N = states_per_symbol * M` state vectors; symbol m owns rows
    /// `m*states_per_symbol .. (m+1)*states_per_symbol`.
    pub fn encode(&self, cx: &mut Ctx, seq: &SymbolSequence) -> Result<EncoderStates, NhmmError> {
        for &s in seq.symbols() {
            if s >= self.embedding.vocab {
                return Err(NhmmError::SymbolOutOfRange {
                    index: s,
                    vocab: self.embedding.vocab,
                });
            }
        }
        let m = seq.len();
        let emb = self.embedding.lookup(cx, seq.symbols()); // [M, E]

        let (mut hf, mut cf) = self.fwd.zero_state(cx, 1);
        let mut fwd_rows = Vec::with_capacity(m);
        for i in 0..m {
            let x = cx.tape.slice_rows(emb, i, i + 1);
            let (h, c) = self.fwd.step(cx, x, hf, cf);
            hf = h;
            cf = c;
            fwd_rows.push(h);
        }
        let (mut hb, mut cb) = self.bwd.zero_state(cx, 1);
        let mut bwd_rows = vec![hb; m];
        for i in (0..m).rev() {
            let x = cx.tape.slice_rows(emb, i, i + 1);
            let (h, c) = self.bwd.step(cx, x, hb, cb);
            hb = h;
            cb = c;
            bwd_rows[i] = h;
        }

        // per symbol: head([fwd; bwd]) -> states_per_symbol stacked vectors
        let mut states: Option<Var> = None;
        for i in 0..m {
            let both = cx.tape.concat_cols(fwd_rows[i], bwd_rows[i]);
            let out = self.head.apply(cx, both); // [1, S*state_dim]
            let expanded = cx
                .tape
                .reshape(out, vec![self.states_per_symbol, self.state_dim]);
            states = Some(match states {
                None => expanded,
                Some(acc) => cx.tape.concat_rows(acc, expanded),
            });
        }
        Ok(EncoderStates {
            h: states.expect("nonempty sequence"),
            n: m * self.states_per_symbol,
            states_per_symbol: self.states_per_symbol,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh(vocab: usize, states_per_symbol: usize) -> (Params, Encoder) {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let enc = Encoder::new(&mut params, vocab, 4, 5, 6, states_per_symbol, &mut rng);
        (params, enc)
    }

    #[test]
    fn five_symbols_two_per_symbol_gives_ten_states() {
        let (params, enc) = fresh(8, 2);
        let mut cx = Ctx::new(&params);
        let seq = SymbolSequence::new(vec![0, 3, 1, 7, 2]);
        let states = enc.encode(&mut cx, &seq).unwrap();
        assert_eq!(states.n, 10);
        assert_eq!(cx.tape.value(states.h).shape(), &[10, 6]);
    }

    #[test]
    fn single_symbol_gives_two_finite_states() {
        let (params, enc) = fresh(3, 2);
        let mut cx = Ctx::new(&params);
        let seq = SymbolSequence::new(vec![1]);
        let states = enc.encode(&mut cx, &seq).unwrap();
        assert_eq!(states.n, 2);
        assert!(cx.tape.value(states.h).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_vocabulary_symbol_is_an_error() {
        let (params, enc) = fresh(3, 2);
        let mut cx = Ctx::new(&params);
        let seq = SymbolSequence::new(vec![0, 3]);
        let err = enc.encode(&mut cx, &seq).unwrap_err();
        assert!(matches!(
            err,
            NhmmError::SymbolOutOfRange { index: 3, vocab: 3 }
        ));
    }

    #[test]
    fn state_rows_follow_symbol_order() {
        // Monotone expansion: rows 2m, 2m+1 belong to symbol position m. To
        // observe it, suppress cross-position flow in the recurrence (zero
        // recurrent weights, forget gate pinned shut); the state vectors then
        // depend on the symbol at their own position only, so swapping two
        // symbols swaps the corresponding row blocks.
        let (mut params, enc) = fresh(4, 2);
        for id in [enc.fwd.w_h, enc.bwd.w_h] {
            for v in params.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        for id in [enc.fwd.b, enc.bwd.b] {
            let data = params.get_mut(id).data_mut();
            for h in 5..10 {
                data[h] = -30.0; // forget gate: cell state does not carry over
            }
        }
        let run = |params: &Params, syms: Vec<usize>| -> Tensor {
            let mut cx = Ctx::new(params);
            let st = enc.encode(&mut cx, &SymbolSequence::new(syms)).unwrap();
            cx.tape.value(st.h).clone()
        };
        let ab = run(&params, vec![1, 2]);
        let ba = run(&params, vec![2, 1]);
        for r in 0..2 {
            for c in 0..6 {
                assert!((ab.at2(r, c) - ba.at2(r + 2, c)).abs() < 1e-9);
                assert!((ab.at2(r + 2, c) - ba.at2(r, c)).abs() < 1e-9);
            }
        }
        // full encoder (fresh recurrent weights) still changes on permutation
        let (params2, enc2) = fresh(4, 2);
        let run2 = |syms: Vec<usize>| -> Tensor {
            let mut cx = Ctx::new(&params2);
            let st = enc2.encode(&mut cx, &SymbolSequence::new(syms)).unwrap();
            cx.tape.value(st.h).clone()
        };
        assert_ne!(run2(vec![1, 2]), run2(vec![2, 1]));
    }
}
