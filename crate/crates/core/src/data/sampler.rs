use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};

use super::{DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Endless stream of P x K batches over the training split. Each epoch
/// shuffles the identities and walks them P at a time, so every identity
/// appears at least once per epoch; the last group is topped up with other
/// identities.
#[derive(Debug, Clone)]
pub struct PkBatches {
    by_identity: Vec<Vec<usize>>,
    p: usize,
    k: usize,
    seed: u64,
    epoch: u64,
    queue: std::collections::VecDeque<Vec<usize>>,
}

pub fn pk_batches(index: &DatasetIndex, p: usize, k: usize, seed: u64) -> Result<PkBatches> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in index.indices(Split::Train) {
        groups.entry(index.records[i].identity).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::SingleIdentity);
    }
    if p < 2 || k < 1 {
        return Err(Error::Config(format!("P must be >= 2 and K >= 1 (got P={p}, K={k})")));
    }
    if p > groups.len() {
        return Err(Error::Config(format!(
            "P={p} exceeds the {} training identities",
            groups.len()
        )));
    }
    Ok(PkBatches {
        by_identity: groups.into_values().collect(),
        p,
        k,
        seed,
        epoch: 0,
        queue: Default::default(),
    })
}

impl PkBatches {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_identity.len().div_ceil(self.p)
    }

    /// All batches of epoch `e`, independent of iteration state.
    pub fn epoch(&self, e: u64) -> Vec<Vec<usize>> {
        let mut r = rng::stream(self.seed, &[tag::BATCH, e]);
        let n = self.by_identity.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let mut out = Vec::new();
        for chunk in order.chunks(self.p) {
            let mut ids = chunk.to_vec();
            if ids.len() < self.p {
                let mut rest: Vec<usize> = (0..n).filter(|i| !ids.contains(i)).collect();
                rest.shuffle(&mut r);
                ids.extend(rest.into_iter().take(self.p - ids.len()));
            }
            let mut batch = Vec::with_capacity(self.p * self.k);
            for id in ids {
                let pool = &self.by_identity[id];
                if pool.len() >= self.k {
                    let mut pool = pool.clone();
                    pool.shuffle(&mut r);
                    batch.extend_from_slice(&pool[..self.k]);
                } else {
                    let mut pick = pool.clone();
                    pick.shuffle(&mut r);
                    while pick.len() < self.k {
                        pick.push(*pool.choose(&mut r).expect("nonempty identity"));
                    }
                    batch.extend(pick);
                }
            }
            out.push(batch);
        }
        out
    }
}

impl Iterator for PkBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.queue.is_empty() {
            self.queue.extend(self.epoch(self.epoch));
            self.epoch += 1;
        }
        self.queue.pop_front()
    }
}
