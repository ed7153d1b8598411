use std::cmp::Ordering;

use rand::Rng;

use super::ScoreVector;
use crate::error::{Error, Result};

/// Size of the candidate pool: `max(1, round(t·c))`, capped at `c`.
pub fn candidate_count(channels: usize, top_rate: f64) -> usize {
    ((top_rate * channels as f64).round() as usize).clamp(1, channels.max(1))
}

/// Number of maps dropped at retaining rate `p`: `round((1 − p)·c)`.
pub fn drop_count(channels: usize, retain: f64) -> usize {
    (((1.0 - retain) * channels as f64).round().max(0.0) as usize).min(channels)
}

/// Higher score first, lower channel index on ties.
fn rank_order(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `candidate_count(c, t)` highest-scored maps, in rank order.
pub fn candidate_pool(scores: &ScoreVector, top_rate: f64) -> Vec<usize> {
    let c = scores.len();
    if c == 0 {
        return Vec::new();
    }
    let n_cand = candidate_count(c, top_rate);
    let order = rank_order(scores.as_slice());
    let mut idx: Vec<usize> = (0..c).collect();
    if n_cand < c {
        idx.select_nth_unstable_by(n_cand - 1, &order);
        idx.truncate(n_cand);
    }
    idx.sort_unstable_by(&order);
    idx
}

/// Selecting function. Returns one retain flag per map: `false` for the
/// `drop_count(c, p)` maps drawn uniformly without replacement from the
/// candidate pool, `true` for every other map.
///
/// Sampling is a partial Fisher-Yates shuffle over the pool in rank order:
/// step `i` swaps position `i` with `i + rng.gen_range(0..pool_len − i)`.
pub fn select<R: Rng + ?Sized>(
    scores: &ScoreVector,
    top_rate: f64,
    retain: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    let c = scores.len();
    if c == 0 {
        return Err(Error::dim("select needs at least one feature map"));
    }
    let mut keep = vec![true; c];
    let n_drop = drop_count(c, retain);
    if n_drop == 0 {
        return Ok(keep);
    }
    let mut pool = candidate_pool(scores, top_rate);
    if n_drop > pool.len() {
        return Err(Error::config(format!(
            "cannot drop {n_drop} of {c} maps from a candidate pool of {} (t = {top_rate}, p = {retain})",
            pool.len()
        )));
    }
    let len = pool.len();
    for i in 0..n_drop {
        let j = i + rng.gen_range(0..len - i);
        pool.swap(i, j);
        keep[pool[i]] = false;
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, StreamKey};

    fn stream(seed: u64) -> crate::rng::Stream {
        StreamKey::new(seed, Domain::Scratch).stream()
    }

    #[test]
    fn counts_follow_rounding_rule() {
        assert_eq!(candidate_count(10, 0.2), 2);
        assert_eq!(candidate_count(64, 0.2), 13);
        assert_eq!(candidate_count(10, 0.01), 1);
        assert_eq!(candidate_count(10, 0.0), 1);
        assert_eq!(candidate_count(10, 1.0), 10);
        assert_eq!(drop_count(10, 0.9), 1);
        assert_eq!(drop_count(64, 0.9), 6);
        assert_eq!(drop_count(20, 1.0), 0);
    }

    #[test]
    fn ten_percent_from_top_twenty() {
        let scores = ScoreVector(vec![9.0, 8.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let mut hit = [0usize; 2];
        for seed in 0..200 {
            let keep = select(&scores, 0.2, 0.9, &mut stream(seed)).unwrap();
            let dropped: Vec<usize> = (0..10).filter(|&i| !keep[i]).collect();
            assert_eq!(dropped.len(), 1);
            assert!(dropped[0] < 2);
            hit[dropped[0]] += 1;
        }
        assert!(hit[0] > 0 && hit[1] > 0, "{hit:?}");
    }

    #[test]
    fn full_retention_is_all_ones() {
        let scores = ScoreVector(vec![3.0, 1.0, 2.0]);
        for t in [0.0, 0.5, 1.0] {
            assert_eq!(select(&scores, t, 1.0, &mut stream(1)).unwrap(), vec![true; 3]);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        let scores = ScoreVector(vec![1.0, 5.0, 5.0, 5.0, 0.0]);
        assert_eq!(candidate_pool(&scores, 0.4), vec![1, 2]);
    }

    #[test]
    fn too_many_drops_is_config_error() {
        let scores = ScoreVector(vec![1.0; 10]);
        let err = select(&scores, 0.1, 0.7, &mut stream(0)).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("drop 3") && msg.contains("pool of 1"), "{msg}");
    }

    #[test]
    fn empty_scores_rejected() {
        assert!(select(&ScoreVector(vec![]), 0.5, 0.5, &mut stream(0)).is_err());
    }
}
