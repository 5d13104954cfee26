//! Structure-aware cross-modal augmentation.
//!
//! Server addresses appear in both modalities, so dropping every resource
//! hosted on an address together with every packet exchanged with it yields
//! a smaller pair that is still internally consistent. Addresses hosting few
//! resources are preferred, and deletion continues until a Gaussian share of
//! the resources is gone.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LogicProfile, PairedSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub mu: f64,
    pub sigma: f64,
    /// Bounds on the deletion target as fractions of the resource count.
    pub clamp: [f64; 2],
    pub rng_seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            mu: 0.3,
            sigma: 0.1,
            clamp: [0.05, 0.6],
            rng_seed: 0,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.clamp;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "augmentation clamp {lo}..{hi} must satisfy 0 <= min <= max < 1"
            )));
        }
        if !(self.sigma >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(
                "augmentation sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Resource indices grouped by server address.
pub fn ip_groups(logic: &LogicProfile) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in logic.resources.iter().enumerate() {
        groups.entry(r.server_ip.clone()).or_default().push(i);
    }
    groups
}

/// `1 - |group| / |R|` per address.
pub fn selection_weights(groups: &BTreeMap<String, Vec<usize>>) -> BTreeMap<String, f64> {
    let total: usize = groups.values().map(Vec::len).sum();
    groups
        .iter()
        .map(|(ip, g)| {
            let w = if total == 0 {
                0.0
            } else {
                1.0 - g.len() as f64 / total as f64
            };
            (ip.clone(), w)
        })
        .collect()
}

/// Result of one augmentation, with the addresses that were removed.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub pair: PairedSample,
    pub deleted_ips: BTreeSet<String>,
}

/// Drops whole server groups from both modalities.
pub fn augment_pair(pair: &PairedSample, cfg: &AugConfig) -> Result<Augmented> {
    cfg.validate()?;
    let groups = ip_groups(&pair.logic);
    let weights = selection_weights(&groups);
    if groups.len() < 2 || weights.values().all(|&w| w <= 0.0) {
        return Err(Error::NotAugmentable("fewer than two server addresses"));
    }
    let n = pair.logic.resources.len();
    let largest = groups.values().map(Vec::len).max().unwrap_or(0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let normal = Normal::new(cfg.mu, cfg.sigma)
        .map_err(|e| Error::Config(format!("augmentation prior: {e}")))?;
    let target = (normal.sample(&mut rng) * n as f64)
        .clamp(cfg.clamp[0] * n as f64, cfg.clamp[1] * n as f64)
        .min((n - largest) as f64);

    let mut deleted = BTreeSet::new();
    let mut removed = 0usize;
    while (removed as f64) < target {
        let candidates: Vec<(&String, f64)> = weights
            .iter()
            .filter(|(ip, &w)| w > 0.0 && !deleted.contains(*ip) && n - removed > groups[*ip].len())
            .map(|(ip, &w)| (ip, w))
            .collect();
        if candidates.is_empty() {
            break;
        }
        let total: f64 = candidates.iter().map(|c| c.1).sum();
        let mut x = rng.random_range(0.0..total);
        let mut pick = candidates[candidates.len() - 1].0;
        for (ip, w) in &candidates {
            if x < *w {
                pick = ip;
                break;
            }
            x -= w;
        }
        removed += groups[pick].len();
        deleted.insert(pick.clone());
    }

    let mut out = pair.clone();
    out.logic
        .resources
        .retain(|r| !deleted.contains(&r.server_ip));
    out.traffic
        .packets
        .retain(|p| !deleted.contains(&p.server_ip));
    if out.traffic.packets.is_empty() {
        return Err(Error::NotAugmentable("no packets survive deletion"));
    }
    Ok(Augmented {
        pair: out,
        deleted_ips: deleted,
    })
}

/// Augments every pair that admits it, `copies` times each, with per-sample
/// seeds derived from `cfg.rng_seed`. Pairs that cannot be augmented are
/// skipped.
pub fn augment_corpus(pairs: &[PairedSample], cfg: &AugConfig, copies: usize) -> Vec<PairedSample> {
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out = Vec::new();
    for pair in pairs {
        for _ in 0..copies {
            let local = AugConfig {
                rng_seed: seeds.random(),
                ..cfg.clone()
            };
            if let Ok(a) = augment_pair(pair, &local) {
                out.push(a.pair);
            }
        }
    }
    out
}
