use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `P` identities with `K` samples each, grouped by identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    /// Manifest record indices.
    pub indices: Vec<usize>,
    /// Classifier label of each sample.
    pub labels: Vec<usize>,
}

/// Identity-balanced batch sampler over the training split.
#[derive(Debug, Clone)]
pub struct PkSampler {
    p: usize,
    k: usize,
    /// Sample indices of each label.
    groups: Vec<Vec<usize>>,
}

impl PkSampler {
    pub fn new(manifest: &DatasetManifest, p: usize, k: usize) -> Result<Self> {
        let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for i in manifest.indices(Split::Train) {
            by_id.entry(manifest.records[i].identity).or_default().push(i);
        }
        let ids: Vec<u32> = by_id.keys().copied().collect();
        Self::from_groups(by_id.into_values().collect(), &ids, p, k)
    }

    /// `groups[label]` lists the samples of that label; `ids` names each
    /// label in error messages.
    pub fn from_groups(groups: Vec<Vec<usize>>, ids: &[u32], p: usize, k: usize) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(Error::Sampling(format!(
                "batch-hard mining needs P >= 2 and K >= 2, got P={p} K={k}"
            )));
        }
        if groups.len() < p {
            return Err(Error::Sampling(format!(
                "{} training identities cannot fill P={p}",
                groups.len()
            )));
        }
        for (label, g) in groups.iter().enumerate() {
            if g.len() < k {
                return Err(Error::Sampling(format!(
                    "identity {} has {} images, fewer than K={k}",
                    ids.get(label).copied().unwrap_or(label as u32),
                    g.len()
                )));
            }
        }
        Ok(Self { p, k, groups })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn num_identities(&self) -> usize {
        self.groups.len()
    }

    /// Identities are split into groups of `P` without replacement; leftover
    /// identities are dropped for this epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.groups.len() / self.p
    }

    /// One epoch of batches. Within an identity, samples are drawn without
    /// replacement.
    pub fn epoch(&self, rng: &mut Rng) -> Vec<PkBatch> {
        let mut labels: Vec<usize> = (0..self.groups.len()).collect();
        labels.shuffle(rng);
        labels
            .chunks_exact(self.p)
            .map(|chunk| {
                let mut batch = PkBatch {
                    indices: Vec::with_capacity(self.batch_size()),
                    labels: Vec::with_capacity(self.batch_size()),
                };
                for &label in chunk {
                    let mut pool = self.groups[label].clone();
                    pool.shuffle(rng);
                    batch.indices.extend_from_slice(&pool[..self.k]);
                    batch.labels.extend(core::iter::repeat_n(label, self.k));
                }
                batch
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn toy_epoch_covers_every_image() {
        let groups = vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]];
        let s = PkSampler::from_groups(groups, &[10, 11, 12, 13], 2, 2).unwrap();
        let epoch = s.epoch(&mut stream(3, "t"));
        assert_eq!(epoch.len(), 2);
        let mut all: Vec<usize> = epoch.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        for b in &epoch {
            assert_eq!(b.indices.len(), 4);
            assert_eq!(b.labels[0], b.labels[1]);
            assert_eq!(b.labels[2], b.labels[3]);
            assert_ne!(b.labels[0], b.labels[2]);
        }
    }

    #[test]
    fn same_seed_same_batches() {
        let groups: Vec<Vec<usize>> = (0..6).map(|i| (i * 5..i * 5 + 5).collect()).collect();
        let ids: Vec<u32> = (0..6).collect();
        let s = PkSampler::from_groups(groups, &ids, 3, 2).unwrap();
        assert_eq!(s.epoch(&mut stream(9, "e")), s.epoch(&mut stream(9, "e")));
        assert_ne!(s.epoch(&mut stream(9, "e")), s.epoch(&mut stream(10, "e")));
    }

    #[test]
    fn short_identity_is_named() {
        let e = PkSampler::from_groups(vec![vec![0, 1], vec![2]], &[4, 77], 2, 2)
            .unwrap_err()
            .to_string();
        assert!(e.contains("identity 77"), "{e}");
    }
}
