//! P identities × K instances batch sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::synthdata::Sample;

/// Sample indices grouped by training label, with each label's camera.
#[derive(Debug, Clone)]
pub struct IdentityIndex {
    groups: Vec<(u32, u16, Vec<usize>)>,
    cameras: usize,
}

impl IdentityIndex {
    pub fn new(train: &[Sample]) -> Self {
        let mut by_id: BTreeMap<u32, (u16, Vec<usize>)> = BTreeMap::new();
        for (i, s) in train.iter().enumerate() {
            by_id.entry(s.y).or_insert((s.c, Vec::new())).1.push(i);
        }
        let mut cams: Vec<u16> = train.iter().map(|s| s.c).collect();
        cams.sort_unstable();
        cams.dedup();
        Self {
            groups: by_id.into_iter().map(|(y, (c, v))| (y, c, v)).collect(),
            cameras: cams.len(),
        }
    }

    pub fn num_identities(&self) -> usize {
        self.groups.len()
    }
}

/// Draw `p` distinct identities and `k` samples of each (with replacement
/// only when an identity has fewer than `k`). Whenever the training set
/// spans several cameras the batch does too.
pub fn pk_sample<R: Rng + ?Sized>(index: &IdentityIndex, p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let m = index.num_identities();
    if p > m {
        return Err(Error::Invalid(format!("cannot draw {p} identities from {m}")));
    }
    if k == 0 || p == 0 {
        return Err(Error::Invalid("p and k must be positive".into()));
    }
    if index.cameras >= 2 && p < 2 {
        return Err(Error::Invalid("p >= 2 is needed to span two cameras".into()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let mut chosen: Vec<usize> = order[..p].to_vec();
    if index.cameras >= 2 {
        let cam0 = index.groups[chosen[0]].1;
        if chosen.iter().all(|&g| index.groups[g].1 == cam0) {
            let other = order[p..]
                .iter()
                .copied()
                .find(|&g| index.groups[g].1 != cam0)
                .ok_or_else(|| Error::Invalid("no identity from a second camera".into()))?;
            chosen[p - 1] = other;
        }
    }
    let mut batch = Vec::with_capacity(p * k);
    for g in chosen {
        let members = &index.groups[g].2;
        let mut pool = members.clone();
        pool.shuffle(rng);
        pool.truncate(k);
        while pool.len() < k {
            pool.push(members[rng.random_range(0..members.len())]);
        }
        batch.extend(pool);
    }
    Ok(batch)
}
