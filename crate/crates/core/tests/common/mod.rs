#![allow(dead_code)]

use market_select::pool::ExampleRecord;
use market_select::Pool;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random pool: `n` examples over `topics` topics, `dim`-d Gaussian-ish
/// embeddings, lengths in 1..=max_len, an ingested `nll` signal and
/// optionally one of `labels` labels.
pub fn random_pool(seed: u64, n: usize, topics: usize, dim: usize, max_len: u32, labels: usize) -> Pool {
    let mut r = rng(seed);
    let recs = (0..n)
        .map(|i| {
            let mut rec = ExampleRecord::new(format!("ex{i:05}"), format!("t{}", i % topics.max(1)), r.random_range(1..=max_len))
                .with_signal("nll", r.random_range(0.0..5.0));
            if dim > 0 {
                rec = rec.with_embedding((0..dim).map(|_| r.random_range(-1.0..1.0)).collect());
            }
            if labels > 0 {
                rec = rec.with_label(format!("L{}", r.random_range(0..labels)));
            }
            rec
        })
        .collect();
    Pool::from_records(recs).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
