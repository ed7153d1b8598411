//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;

use selectscale::rng::{Domain, Stream, StreamKey};
use selectscale::Tensor;

pub fn stream(seed: u64) -> Stream {
    StreamKey::new(seed, Domain::Scratch).stream()
}

pub fn streams(n: usize, seed: u64) -> Vec<Stream> {
    StreamKey::new(seed, Domain::Scratch).sample_streams(n)
}

pub fn random(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor<f32> {
    let mut r = StreamKey::new(seed, Domain::Scratch).layer(7).stream();
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Full sort (stable, score descending) then the documented partial
/// Fisher-Yates draw from the top `n_cand`.
pub fn oracle_select(scores: &[f64], t: f64, p: f64, rng: &mut Stream) -> Option<Vec<bool>> {
    let c = scores.len();
    let n_cand = ((t * c as f64).round() as usize).clamp(1, c);
    let n_drop = (((1.0 - p) * c as f64).round().max(0.0) as usize).min(c);
    let mut keep = vec![true; c];
    if n_drop == 0 {
        return Some(keep);
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut pool = order[..n_cand].to_vec();
    if n_drop > n_cand {
        return None;
    }
    for i in 0..n_drop {
        let j = i + rng.gen_range(0..n_cand - i);
        pool.swap(i, j);
        keep[pool[i]] = false;
    }
    Some(keep)
}

