use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a feature map is reduced to its importance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreMode {
    /// `Max` at post-ReLU hooks, `MaxAbs` elsewhere.
    Auto,
    /// Maximum absolute value.
    MaxAbs,
    /// Plain maximum; equals `MaxAbs` on non-negative maps.
    Max,
    /// Average-pool `|x|` with a `window × window` window (stride = window),
    /// then take the maximum.
    AvgPoolMax { window: usize },
    /// Mean of `|x|` over the map.
    GlobalAvg,
}

impl ScoreMode {
    /// Replaces `Auto` with a concrete mode for a hook point.
    pub fn resolve(self, post_relu: bool) -> ScoreMode {
        match self {
            ScoreMode::Auto if post_relu => ScoreMode::Max,
            ScoreMode::Auto => ScoreMode::MaxAbs,
            other => other,
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreMode::Auto => f.write_str("auto"),
            ScoreMode::MaxAbs => f.write_str("max_abs"),
            ScoreMode::Max => f.write_str("max"),
            ScoreMode::AvgPoolMax { window } => write!(f, "avgpool_max:{window}"),
            ScoreMode::GlobalAvg => f.write_str("global_avg"),
        }
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::key(
                "reg.score_mode",
                format!(
                    "unknown score mode `{s}` (expected auto, max_abs, max, avgpool_max:K, global_avg)"
                ),
            )
        };
        match s {
            "auto" => Ok(ScoreMode::Auto),
            "max_abs" => Ok(ScoreMode::MaxAbs),
            "max" => Ok(ScoreMode::Max),
            "global_avg" => Ok(ScoreMode::GlobalAvg),
            _ => {
                let window = s
                    .strip_prefix("avgpool_max:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k > 0)
                    .ok_or_else(bad)?;
                Ok(ScoreMode::AvgPoolMax { window })
            }
        }
    }
}

/// Per-map importance scores of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Score of a single `h × w` map stored row-major in `map`.
pub fn score_map<T: Scalar>(map: &[T], h: usize, w: usize, mode: ScoreMode) -> Result<f64> {
    if h == 0 || w == 0 || map.len() != h * w {
        return Err(Error::dim(format!(
            "cannot score a {h}x{w} map from {} values",
            map.len()
        )));
    }
    let abs = |v: &T| v.as_f64().abs();
    Ok(match mode {
        ScoreMode::Auto | ScoreMode::MaxAbs => map.iter().map(abs).fold(0.0, f64::max),
        ScoreMode::Max => map
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max),
        ScoreMode::GlobalAvg => map.iter().map(abs).sum::<f64>() / map.len() as f64,
        ScoreMode::AvgPoolMax { window } => {
            if window > h || window > w {
                return Err(Error::dim(format!(
                    "score pooling window {window} exceeds map extent {h}x{w}"
                )));
            }
            let inv = 1.0 / (window * window) as f64;
            let mut best = 0.0f64;
            for by in 0..h / window {
                for bx in 0..w / window {
                    let mut s = 0.0;
                    for dy in 0..window {
                        let row = (by * window + dy) * w + bx * window;
                        s += map[row..row + window].iter().map(abs).sum::<f64>();
                    }
                    best = best.max(s * inv);
                }
            }
            best
        }
    })
}

/// Scores every map of a single sample's activation `[C,H,W]`.
pub fn score_feature_maps<T: Scalar>(activation: &Tensor<T>, mode: ScoreMode) -> Result<ScoreVector> {
    let [c, h, w] = match activation.shape()[..] {
        [c, h, w] => [c, h, w],
        _ => {
            return Err(Error::dim(format!(
                "expected one sample's [C,H,W] activation, got {:?}",
                activation.shape()
            )))
        }
    };
    score_sample(activation.data(), c, h, w, mode)
}

pub(crate) fn score_sample<T: Scalar>(
    sample: &[T],
    c: usize,
    h: usize,
    w: usize,
    mode: ScoreMode,
) -> Result<ScoreVector> {
    if h * w == 0 {
        return Err(Error::dim("cannot score maps with an empty spatial extent"));
    }
    sample
        .chunks(h * w)
        .take(c)
        .map(|m| score_map(m, h, w, mode))
        .collect::<Result<Vec<_>>>()
        .map(ScoreVector)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_small_maps_max_abs() {
        let a = Tensor::<f32>::new(&[2, 1, 2], vec![1.0, -3.0, 2.0, 2.0]).unwrap();
        let s = score_feature_maps(&a, ScoreMode::MaxAbs).unwrap();
        assert_eq!(s.0, vec![3.0, 2.0]);
        let s = score_feature_maps(&a, ScoreMode::Max).unwrap();
        assert_eq!(s.0, vec![1.0, 2.0]);
    }

    #[test]
    fn zero_activation_scores_zero() {
        let a = Tensor::<f32>::zeros(&[4, 3, 3]);
        for mode in [
            ScoreMode::MaxAbs,
            ScoreMode::Max,
            ScoreMode::GlobalAvg,
            ScoreMode::AvgPoolMax { window: 2 },
        ] {
            assert!(score_feature_maps(&a, mode).unwrap().0.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pooled_window_larger_than_map() {
        let a = Tensor::<f32>::zeros(&[1, 2, 2]);
        assert!(score_feature_maps(&a, ScoreMode::AvgPoolMax { window: 3 }).is_err());
    }

    #[test]
    fn rejects_batched_input() {
        let a = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            score_feature_maps(&a, ScoreMode::Max),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn auto_resolution() {
        assert_eq!(ScoreMode::Auto.resolve(true), ScoreMode::Max);
        assert_eq!(ScoreMode::Auto.resolve(false), ScoreMode::MaxAbs);
        assert_eq!(ScoreMode::GlobalAvg.resolve(true), ScoreMode::GlobalAvg);
    }

    #[test]
    fn parse_modes() {
        assert_eq!(
            "avgpool_max:3".parse::<ScoreMode>().unwrap(),
            ScoreMode::AvgPoolMax { window: 3 }
        );
        assert!("avgpool_max:0".parse::<ScoreMode>().is_err());
        assert!("mean".parse::<ScoreMode>().is_err());
        for m in ["auto", "max_abs", "max", "global_avg", "avgpool_max:2"] {
            assert_eq!(m.parse::<ScoreMode>().unwrap().to_string(), m);
        }
    }
}
