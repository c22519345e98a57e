use super::ModelConfig;
use crate::tensor::{stream_id, Rng};

/// One microbatch: `micro_batch` sequences of `seq_len + 1` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub micro_batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    /// Model inputs, row-major `[MBS x L]`.
    pub fn inputs(&self) -> Vec<u32> {
        self.sequences()
            .flat_map(|s| s[..self.seq_len].to_vec())
            .collect()
    }

    /// Next-token targets aligned with [`TokenBatch::inputs`].
    pub fn labels(&self) -> Vec<u32> {
        self.sequences().flat_map(|s| s[1..].to_vec()).collect()
    }

    fn sequences(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks(self.seq_len + 1)
    }
}

/// Synthetic tokens, uniform over the vocabulary, keyed by `(seed, step, accum)`.
pub fn microbatch_tokens(cfg: &ModelConfig, seed: u64, step: u64, accum: usize) -> TokenBatch {
    let mut rng = Rng::new(seed, stream_id("data", &[step, accum as u64]));
    let n = cfg.micro_batch * (cfg.seq_len + 1);
    let tokens = (0..n).map(|_| rng.below(cfg.vocab as u64) as u32).collect();
    TokenBatch {
        tokens,
        micro_batch: cfg.micro_batch,
        seq_len: cfg.seq_len,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_and_labels_shift_by_one() {
        let b = TokenBatch {
            tokens: vec![1, 2, 3, 4, 5, 6],
            micro_batch: 2,
            seq_len: 2,
        };
        assert_eq!(b.inputs(), vec![1, 2, 4, 5]);
        assert_eq!(b.labels(), vec![2, 3, 5, 6]);
    }

    #[test]
    fn reproducible_and_in_range() {
        let cfg = ModelConfig::desk();
        let a = microbatch_tokens(&cfg, 1, 2, 3);
        assert_eq!(a, microbatch_tokens(&cfg, 1, 2, 3));
        assert_ne!(a, microbatch_tokens(&cfg, 1, 2, 2));
        assert!(a.tokens.iter().all(|&t| (t as usize) < cfg.vocab));
    }
}
