//! Latents, chunks, and the seeded noise source shared by every stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::SessionConfig;
use crate::ladder::{NoiseLadder, NoiseLevel};

/// One temporally compressed video latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub id: u64,
    pub data: Vec<f64>,
    pub frames_covered: usize,
    /// Start of the covered span on the video timeline, in seconds.
    pub video_pts: f64,
}

/// A group of latents that share one noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: u64,
    pub latents: Vec<Latent>,
    pub noise_level: NoiseLevel,
    /// Digest of the conditioning bound to this chunk at admission.
    pub cond_digest: u64,
}

impl Chunk {
    pub fn is_clean(&self) -> bool {
        self.noise_level.is_clean()
    }

    /// Id of the `index`-th latent of `chunk_id`. Id 0 is the reference.
    pub fn latent_id(chunk_id: u64, latents_per_chunk: usize, index: usize) -> u64 {
        1 + chunk_id * latents_per_chunk as u64 + index as u64
    }

    /// A chunk at the top of the ladder with seeded Gaussian latents.
    pub fn pure_noise(config: &SessionConfig, ladder: &NoiseLadder, chunk_id: u64, cond_digest: u64) -> Chunk {
        let noise = chunk_noise(
            config.rng_seed,
            NoiseDomain::Admission,
            chunk_id,
            config.latents_per_chunk,
            config.latent_dim,
        );
        Chunk::from_rows(config, chunk_id, noise, ladder.top(), cond_digest)
    }

    /// Assembles a chunk from per-latent data rows.
    pub fn from_rows(
        config: &SessionConfig,
        chunk_id: u64,
        rows: Vec<Vec<f64>>,
        noise_level: NoiseLevel,
        cond_digest: u64,
    ) -> Chunk {
        let (start, _) = config.chunk_span(chunk_id);
        let latent_s = config.frames_per_latent as f64 / config.fps as f64;
        let latents = rows
            .into_iter()
            .enumerate()
            .map(|(j, data)| Latent {
                id: Chunk::latent_id(chunk_id, config.latents_per_chunk, j),
                data,
                frames_covered: config.frames_per_latent,
                video_pts: start + j as f64 * latent_s,
            })
            .collect();
        Chunk {
            chunk_id,
            latents,
            noise_level,
            cond_digest,
        }
    }

    /// Checks latent count, dimension and id contiguity against `config`.
    pub fn check_shape(&self, config: &SessionConfig) -> Result<(), String> {
        if self.latents.len() != config.latents_per_chunk {
            return Err(format!(
                "chunk {} has {} latents, expected {}",
                self.chunk_id,
                self.latents.len(),
                config.latents_per_chunk
            ));
        }
        for (j, l) in self.latents.iter().enumerate() {
            if l.data.len() != config.latent_dim {
                return Err(format!(
                    "latent {} has dim {}, expected {}",
                    l.id,
                    l.data.len(),
                    config.latent_dim
                ));
            }
            if j > 0 && l.id != self.latents[j - 1].id + 1 {
                return Err(format!("chunk {} latent ids not consecutive", self.chunk_id));
            }
        }
        Ok(())
    }
}

/// Independent noise streams so admissions, refinements and data prep never
/// share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseDomain {
    Admission,
    Refinement,
    GeneratedGt,
    Reference,
    Planner,
    Projection,
}

impl NoiseDomain {
    fn salt(self) -> u64 {
        match self {
            NoiseDomain::Admission => 0x6164_6d69_7400_0001,
            NoiseDomain::Refinement => 0x7265_6669_6e65_0002,
            NoiseDomain::GeneratedGt => 0x6774_6c61_7400_0003,
            NoiseDomain::Reference => 0x7265_6665_7200_0004,
            NoiseDomain::Planner => 0x706c_616e_6e00_0005,
            NoiseDomain::Projection => 0x7072_6f6a_6500_0006,
        }
    }
}

/// Seeded generator for `(domain, id)`.
pub fn noise_rng(seed: u64, domain: NoiseDomain, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.salt());
    rng.set_stream(id);
    rng
}

/// `rows` standard-normal vectors of length `dim`.
pub fn chunk_noise(seed: u64, domain: NoiseDomain, id: u64, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = noise_rng(seed, domain, id);
    (0..rows)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// A deterministic reference latent for a seed.
pub fn seeded_reference(config: &SessionConfig) -> Latent {
    let data = chunk_noise(config.rng_seed, NoiseDomain::Reference, 0, 1, config.latent_dim)
        .pop()
        .unwrap_or_default();
    Latent {
        id: 0,
        data,
        frames_covered: 1,
        video_pts: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_seeded_and_domain_separated() {
        let a = chunk_noise(7, NoiseDomain::Admission, 3, 3, 4);
        let b = chunk_noise(7, NoiseDomain::Admission, 3, 3, 4);
        let c = chunk_noise(7, NoiseDomain::Refinement, 3, 3, 4);
        let d = chunk_noise(7, NoiseDomain::Admission, 4, 3, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn pure_noise_shape() {
        let cfg = SessionConfig::default();
        let ladder = cfg.ladder();
        let c = Chunk::pure_noise(&cfg, &ladder, 2, 0);
        c.check_shape(&cfg).unwrap();
        assert_eq!(c.noise_level.t, 1.0);
        assert_eq!(c.latents[0].id, 7);
        assert!((c.latents[0].video_pts - 0.96).abs() < 1e-12);
        assert!((c.latents[1].video_pts - 1.12).abs() < 1e-12);
    }
}
