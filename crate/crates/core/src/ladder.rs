//! Noise ladder for chunkwise diffusion forcing.
//!
//! Flow time `t` runs from 1 (pure noise) to 0 (clean). A ladder of depth
//! `K = stream_chunks * micro_steps` partitions `(0, 1]` uniformly; a chunk
//! admitted at `t = 1` reaches `t = 0` after exactly `K` denoiser calls.

use serde::{Deserialize, Serialize};

use crate::config::ConfigError;

/// Uniform noise ladder of depth `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseLadder {
    depth: usize,
}

impl NoiseLadder {
    pub fn new(stream_chunks: usize, micro_steps: usize) -> Result<Self, ConfigError> {
        if stream_chunks == 0 || micro_steps == 0 {
            return Err(ConfigError::single("stream_chunks * micro_steps", "counts >= 1"));
        }
        Ok(Self {
            depth: stream_chunks * micro_steps,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Flow time at `index`, where index 0 is clean and index `K` is pure noise.
    pub fn t_at(&self, index: usize) -> f64 {
        debug_assert!(index <= self.depth);
        index as f64 / self.depth as f64
    }

    pub fn top(&self) -> NoiseLevel {
        NoiseLevel {
            t: 1.0,
            ladder_index: self.depth,
        }
    }

    pub fn clean(&self) -> NoiseLevel {
        NoiseLevel {
            t: 0.0,
            ladder_index: 0,
        }
    }

    pub fn level(&self, index: usize) -> NoiseLevel {
        NoiseLevel {
            t: self.t_at(index),
            ladder_index: index,
        }
    }

    /// The ladder values, noisiest first: `K/K, (K-1)/K, ..., 1/K`.
    pub fn levels(&self) -> Vec<f64> {
        (1..=self.depth).rev().map(|k| self.t_at(k)).collect()
    }

    /// Position of `t` on the ladder (clean included), if it is a ladder value.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        (0..=self.depth).find(|&k| (self.t_at(k) - t).abs() <= 1e-12)
    }

    /// Ladder indices strictly below `t`, noisiest first, ending at 0.
    pub fn descent_below(&self, t: f64) -> Vec<usize> {
        (0..=self.depth).rev().filter(|&k| self.t_at(k) < t - 1e-12).collect()
    }
}

/// Ladder values for the given stream shape, noisiest first.
pub fn build_noise_ladder(stream_chunks: usize, micro_steps: usize) -> Result<Vec<f64>, ConfigError> {
    Ok(NoiseLadder::new(stream_chunks, micro_steps)?.levels())
}

/// Noise level of a chunk. `ladder_index` counts remaining steps: 0 is clean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub t: f64,
    pub ladder_index: usize,
}

impl NoiseLevel {
    pub fn is_clean(&self) -> bool {
        self.ladder_index == 0
    }

    /// The next cleaner rung, or `None` if already clean.
    pub fn next_lower(&self, ladder: &NoiseLadder) -> Option<NoiseLevel> {
        self.ladder_index.checked_sub(1).map(|i| ladder.level(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(got: &[f64], want: &[f64]) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn ladder_examples() {
        assert_close(&build_noise_ladder(3, 1).unwrap(), &[1.0, 2.0 / 3.0, 1.0 / 3.0]);
        assert_close(&build_noise_ladder(1, 1).unwrap(), &[1.0]);
        assert_close(
            &build_noise_ladder(3, 2).unwrap(),
            &[1.0, 5.0 / 6.0, 4.0 / 6.0, 3.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0],
        );
        let l = build_noise_ladder(3, 1).unwrap();
        assert!((l[1] - 0.6667).abs() < 1e-4 && (l[2] - 0.3333).abs() < 1e-4);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(build_noise_ladder(0, 1).is_err());
        assert!(build_noise_ladder(3, 0).is_err());
    }

    #[test]
    fn uniform_strictly_decreasing() {
        for s in 1..8 {
            for m in 1..5 {
                let l = build_noise_ladder(s, m).unwrap();
                let k = s * m;
                assert_eq!(l.len(), k);
                assert_eq!(l[0], 1.0);
                for w in l.windows(2) {
                    assert!(w[0] > w[1]);
                    assert!((w[0] - w[1] - 1.0 / k as f64).abs() < 1e-12);
                }
                assert!(l.iter().all(|&t| t > 0.0 && t <= 1.0));
            }
        }
    }

    #[test]
    fn descent_and_index() {
        let ladder = NoiseLadder::new(3, 1).unwrap();
        assert_eq!(ladder.index_of(2.0 / 3.0), Some(2));
        assert_eq!(ladder.index_of(0.5), None);
        assert_eq!(ladder.descent_below(2.0 / 3.0), vec![1, 0]);
        assert_eq!(ladder.descent_below(0.5), vec![1, 0]);
        assert_eq!(ladder.descent_below(1.0), vec![2, 1, 0]);
        let top = ladder.top();
        let a = top.next_lower(&ladder).unwrap();
        assert_eq!(a.ladder_index, 2);
        assert!(ladder.clean().next_lower(&ladder).is_none());
    }
}
