//! Length-bucketed batching with deterministic shuffling and padded
//! frame tensors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Utterance;
use crate::tensor::Tensor;

/// One padded batch over utterance indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, T_max, D]` with zero padding past each sequence's length.
    pub frames_padded: Tensor,
    /// `[B, T_max]`, 1.0 on real frames and 0.0 on padding.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

/// Batch index lists for one epoch: indices sorted by length, chunked, and
/// the chunk order shuffled deterministically in (seed, epoch). Every
/// utterance appears exactly once.
pub fn make_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::data::derive_seed(seed, 0xBA7C, epoch));
    chunks.shuffle(&mut rng);
    chunks
}

/// Assemble the padded tensor and mask for a batch of utterances.
pub fn build_batch(indices: &[usize], utterances: &[Utterance]) -> Batch {
    assert!(!indices.is_empty());
    let d = utterances[indices[0]].frames.dim(1);
    let lengths: Vec<usize> = indices.iter().map(|&i| utterances[i].frames.dim(0)).collect();
    let t_max = *lengths.iter().max().unwrap();
    let b = indices.len();
    let mut frames = vec![0.0; b * t_max * d];
    let mut mask = vec![0.0; b * t_max];
    for (row, &i) in indices.iter().enumerate() {
        let u = &utterances[i];
        let t_len = u.frames.dim(0);
        frames[row * t_max * d..row * t_max * d + t_len * d].copy_from_slice(u.frames.data());
        for t in 0..t_len {
            mask[row * t_max + t] = 1.0;
        }
    }
    Batch {
        indices: indices.to_vec(),
        frames_padded: Tensor::new(vec![b, t_max, d], frames),
        mask: Tensor::new(vec![b, t_max], mask),
        lengths,
    }
}

impl Batch {
    /// Recover the unpadded `[T_b, D]` frames of batch row `row` using the
    /// mask.
    pub fn unpadded_frames(&self, row: usize) -> Tensor {
        let (b, t_max, d) = (
            self.frames_padded.dim(0),
            self.frames_padded.dim(1),
            self.frames_padded.dim(2),
        );
        assert!(row < b);
        let t_len = (0..t_max)
            .take_while(|&t| self.mask.data()[row * t_max + t] == 1.0)
            .count();
        let start = row * t_max * d;
        Tensor::new(
            vec![t_len, d],
            self.frames_padded.data()[start..start + t_len * d].to_vec(),
        )
    }
}
