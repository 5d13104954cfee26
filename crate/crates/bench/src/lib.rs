//! Fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semalign::neural::{Batch, EncodedPair, LabeledTrace};
use semalign::synth::{gen_sites, simulate_visit, GenConfig};
use semalign::EncodingParams;

/// Random printable ASCII strings of URI-like lengths.
pub fn uris(n: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(4..64);
            (0..len).map(|_| rng.random_range(0x21u8..0x7f)).collect()
        })
        .collect()
}

pub fn samples(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.0..1000.0)).collect()
}

/// Encoded pairs and labeled traces for `sites` synthetic sites.
pub fn encoded(sites: usize, enc: &EncodingParams) -> (Vec<EncodedPair>, Vec<LabeledTrace>) {
    let gen = GenConfig {
        n_sites: sites,
        ..GenConfig::default()
    };
    let specs = gen_sites(&gen).expect("valid generator config");
    let gen = &gen;
    let pairs: Vec<EncodedPair> = specs
        .iter()
        .map(|s| EncodedPair::from_sample(&simulate_visit(s, gen, 0), enc).expect("encodable"))
        .collect();
    let labeled = specs
        .iter()
        .enumerate()
        .flat_map(|(label, s)| {
            (1..3).map(move |v| LabeledTrace {
                label,
                traffic: EncodedPair::from_sample(&simulate_visit(s, gen, v), enc)
                    .expect("encodable")
                    .traffic,
            })
        })
        .collect();
    (pairs, labeled)
}

pub fn batch<'a>(
    pairs: &'a [EncodedPair],
    labeled: &'a [LabeledTrace],
    n_labeled: usize,
) -> Batch<'a> {
    Batch {
        cross: pairs.iter().collect(),
        labeled: labeled.iter().take(n_labeled).collect(),
    }
}
