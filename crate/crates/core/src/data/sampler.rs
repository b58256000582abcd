//! Identity-balanced batch sampling: `P` labels per batch, `K` images per label.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Distinct labels per batch (`P`).
    pub ids_per_batch: usize,
    /// Images per label (`K`).
    pub imgs_per_id: usize,
    /// Derived from the run seed during training, so not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { ids_per_batch: 16, imgs_per_id: 4, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.imgs_per_id
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids_per_batch < 2 || self.imgs_per_id < 2 {
            return Err(Error::Config(format!(
                "batches need at least 2 identities with 2 images each (got {}x{})",
                self.ids_per_batch, self.imgs_per_id
            )));
        }
        Ok(())
    }
}

/// Endless stream of `P x K` index batches over a fixed labelling.
///
/// Each pass shuffles every label's images into chunks of `K` (sampling with
/// replacement when a label has fewer than `K` images), then repeatedly picks
/// `P` labels that still have chunks. A new pass starts when fewer than `P`
/// labels remain.
#[derive(Debug, Clone)]
pub struct PkSampler {
    groups: BTreeMap<usize, Vec<usize>>,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
    pending: Vec<Vec<usize>>,
}

impl PkSampler {
    pub fn new(labels: &[usize], cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        if groups.len() < cfg.ids_per_batch {
            return Err(Error::Config(format!(
                "{} distinct labels available but {} required per batch",
                groups.len(),
                cfg.ids_per_batch
            )));
        }
        Ok(Self { groups, rng: ChaCha8Rng::seed_from_u64(cfg.seed), cfg, pending: Vec::new() })
    }

    /// One pass worth of batches.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let k = self.cfg.imgs_per_id;
        let mut chunks: Vec<(usize, Vec<Vec<usize>>)> = Vec::with_capacity(self.groups.len());
        for (&label, members) in &self.groups {
            let mut pool = members.clone();
            if pool.len() < k {
                let extra: Vec<usize> = (0..k - pool.len()).map(|_| members[self.rng.random_range(0..members.len())]).collect();
                pool.extend(extra);
            }
            pool.shuffle(&mut self.rng);
            let label_chunks: Vec<Vec<usize>> = pool.chunks_exact(k).map(<[usize]>::to_vec).collect();
            chunks.push((label, label_chunks));
        }
        let mut batches = Vec::new();
        loop {
            let mut available: Vec<usize> = chunks.iter().enumerate().filter(|(_, (_, c))| !c.is_empty()).map(|(i, _)| i).collect();
            if available.len() < self.cfg.ids_per_batch {
                break;
            }
            available.shuffle(&mut self.rng);
            let mut batch = Vec::with_capacity(self.cfg.batch_size());
            for &slot in &available[..self.cfg.ids_per_batch] {
                batch.extend(chunks[slot].1.pop().expect("non-empty"));
            }
            batches.push(batch);
        }
        batches
    }

    /// Next batch, starting a new pass when the current one is exhausted.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pending.is_empty() {
            let mut e = self.epoch();
            e.reverse();
            self.pending = e;
        }
        self.pending.pop().expect("a pass yields at least one batch")
    }
}

/// Convenience wrapper returning the first `count` batches of a fresh sampler.
pub fn pk_batches(labels: &[usize], cfg: SamplerConfig, count: usize) -> Result<Vec<Vec<usize>>> {
    let mut s = PkSampler::new(labels, cfg)?;
    Ok((0..count).map(|_| s.next_batch()).collect())
}
