#![allow(dead_code)]

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use skyshare::dealer::{deal, CorrelationBudget, CorrelationSet};
use skyshare::engine::Session;
use skyshare::local::local_sessions;
use skyshare::ring::RingWord;
use skyshare::transport::InMemTransport;

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn budget(beaver: usize, and_triples: usize, bits: usize) -> CorrelationBudget {
    CorrelationBudget { n: 1, m: 1, beaver, and_triples, bits, shuffles: 0 }
}

pub fn correlations<W: RingWord>(b: CorrelationBudget, seed: u64) -> CorrelationSet<W> {
    deal(&b, &mut rng(seed)).unwrap()
}

pub type Pair<W> = (Session<InMemTransport, W>, Session<InMemTransport, W>);

/// Two in-memory sessions with the given correlation counts.
pub fn sessions<W: RingWord>(beaver: usize, ands: usize, bits: usize, seed: u64) -> Pair<W> {
    local_sessions(1, correlations(budget(beaver, ands, bits), seed), Duration::ZERO)
}

/// Upper-tail p-value of a chi-square goodness-of-fit test against equal
/// expected counts.
pub fn chi_square_uniform_p(counts: &[u64]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}
