use rand::Rng;

use super::score::score_sample;
use super::select::{candidate_pool, select};
use super::{Method, RegularizerConfig, ScoreMode};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Scalar, Tensor};

/// Per-map factors for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    pub method: Method,
    /// Multiplier applied to each map.
    pub factors: Vec<f64>,
    /// Binary output of the selecting function per map (`true` = 1). For
    /// Selectout this is the retain mask; for SelectScale `false` marks the
    /// maps that get scaled. Random methods report `true` for maps left
    /// unchanged by the draw.
    pub selection: Vec<bool>,
}

/// Factors for a whole `[N,C,H,W]` batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchFactors {
    Identity,
    /// `N·C` factors, one per map.
    PerMap(Vec<f64>),
    /// One factor per element.
    PerElement(Vec<f64>),
}

/// Draw from `Uniform(1 − q, 1 + q)`.
fn uniform_factor<R: Rng + ?Sized>(rng: &mut R, q: f64) -> f64 {
    1.0 - q + 2.0 * q * rng.gen::<f64>()
}

/// A validated regularizer ready to produce masks.
#[derive(Debug, Clone)]
pub struct Regularizer {
    config: RegularizerConfig,
    rescale: bool,
}

impl Regularizer {
    pub fn new(config: &RegularizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Regularizer {
            config: config.clone(),
            rescale: true,
        })
    }

    /// Disables the `1/p` compensation of the drop methods.
    pub fn without_rescale(mut self) -> Self {
        self.rescale = false;
        self
    }

    pub fn config(&self) -> &RegularizerConfig {
        &self.config
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    fn keep_factor(&self) -> f64 {
        if self.rescale {
            1.0 / self.config.retain
        } else {
            1.0
        }
    }

    /// Mask for one sample's `[C,H,W]` activation under a map-level method.
    pub fn sample_mask<T: Scalar>(
        &self,
        sample: &[T],
        dims: [usize; 3],
        post_relu: bool,
        rng: &mut Stream,
    ) -> Result<DropMask> {
        let [c, h, w] = dims;
        let cfg = &self.config;
        let mode: ScoreMode = cfg.score_mode.resolve(post_relu);
        let (factors, selection) = match cfg.method {
            Method::None | Method::Dropout => (vec![1.0; c], vec![true; c]),
            Method::SpatialDropout => {
                let keep: Vec<bool> = (0..c).map(|_| rng.gen::<f64>() < cfg.retain).collect();
                let f = self.keep_factor();
                (keep.iter().map(|&k| if k { f } else { 0.0 }).collect(), keep)
            }
            Method::SpatialScale => (
                (0..c).map(|_| uniform_factor(rng, cfg.half_width)).collect(),
                vec![false; c],
            ),
            Method::Selectout => {
                let scores = score_sample(sample, c, h, w, mode)?;
                let keep = select(&scores, cfg.top_rate, cfg.retain, rng)?;
                let f = self.keep_factor();
                (keep.iter().map(|&k| if k { f } else { 0.0 }).collect(), keep)
            }
            Method::SelectScale => {
                let scores = score_sample(sample, c, h, w, mode)?;
                let mut v = vec![true; c];
                for i in candidate_pool(&scores, cfg.top_rate) {
                    v[i] = false;
                }
                let factors = v
                    .iter()
                    .map(|&vi| if vi { 1.0 } else { uniform_factor(rng, cfg.half_width) })
                    .collect();
                (factors, v)
            }
        };
        Ok(DropMask {
            method: cfg.method,
            factors,
            selection,
        })
    }

    /// Factors for a batch. `rngs` holds one stream per sample. When
    /// `active` is false the result is [`BatchFactors::Identity`].
    pub fn factors<T: Scalar>(
        &self,
        y: &Tensor<T>,
        rngs: &mut [Stream],
        active: bool,
        post_relu: bool,
    ) -> Result<BatchFactors> {
        let [n, c, h, w] = y.dims4()?;
        if rngs.len() != n {
            return Err(Error::dim(format!(
                "{} random streams for a batch of {n}",
                rngs.len()
            )));
        }
        if !active || self.config.method == Method::None {
            return Ok(BatchFactors::Identity);
        }
        if self.config.method == Method::Dropout {
            let p = self.config.retain;
            let f = self.keep_factor();
            let per = c * h * w;
            let mut out = Vec::with_capacity(n * per);
            for rng in rngs.iter_mut() {
                out.extend((0..per).map(|_| if rng.gen::<f64>() < p { f } else { 0.0 }));
            }
            return Ok(BatchFactors::PerElement(out));
        }
        let mut out = Vec::with_capacity(n * c);
        for (s, rng) in rngs.iter_mut().enumerate() {
            let mask = self.sample_mask(y.sample(s), [c, h, w], post_relu, rng)?;
            out.extend(mask.factors);
        }
        Ok(BatchFactors::PerMap(out))
    }

    /// Convenience: draw factors and apply them.
    pub fn apply<T: Scalar>(
        &self,
        y: &Tensor<T>,
        rngs: &mut [Stream],
        training: bool,
    ) -> Result<Tensor<T>> {
        let factors = self.factors(y, rngs, training, false)?;
        Ok(apply_factors(y, &factors))
    }
}

/// Multiplies `y` by the given factors. `Identity` returns an exact copy.
pub fn apply_factors<T: Scalar>(y: &Tensor<T>, factors: &BatchFactors) -> Tensor<T> {
    let mut out = y.clone();
    match factors {
        BatchFactors::Identity => {}
        BatchFactors::PerElement(f) => {
            for (v, &m) in out.data_mut().iter_mut().zip(f) {
                *v *= T::of(m);
            }
        }
        BatchFactors::PerMap(f) => {
            let hw = y.numel() / f.len();
            for (map, &m) in out.data_mut().chunks_mut(hw).zip(f) {
                let m = T::of(m);
                for v in map {
                    *v *= m;
                }
            }
        }
    }
    out
}

/// Standard dropout: each element kept with probability `p` and scaled by `1/p`.
pub fn apply_dropout<T: Scalar>(
    y: &Tensor<T>,
    p: f64,
    rngs: &mut [Stream],
    training: bool,
) -> Result<Tensor<T>> {
    Regularizer::new(&RegularizerConfig::dropout(p))?.apply(y, rngs, training)
}

/// SpatialDropout: one keep/drop draw per map, survivors scaled by `1/p`.
pub fn apply_spatial_dropout<T: Scalar>(
    y: &Tensor<T>,
    p: f64,
    rngs: &mut [Stream],
    training: bool,
) -> Result<Tensor<T>> {
    Regularizer::new(&RegularizerConfig::spatial_dropout(p))?.apply(y, rngs, training)
}

/// SpatialScale: each map multiplied by a draw from `Uniform(1 − q, 1 + q)`.
pub fn apply_spatial_scale<T: Scalar>(
    y: &Tensor<T>,
    q: f64,
    rngs: &mut [Stream],
    training: bool,
) -> Result<Tensor<T>> {
    Regularizer::new(&RegularizerConfig::spatial_scale(q))?.apply(y, rngs, training)
}

/// Selectout: SpatialDropout restricted to the top-`t` maps of each sample.
pub fn apply_selectout<T: Scalar>(
    y: &Tensor<T>,
    t: f64,
    p: f64,
    mode: ScoreMode,
    rngs: &mut [Stream],
    training: bool,
) -> Result<Tensor<T>> {
    let cfg = RegularizerConfig {
        score_mode: mode,
        ..RegularizerConfig::selectout(t, p)
    };
    Regularizer::new(&cfg)?.apply(y, rngs, training)
}

/// SelectScale: every top-`t` map scaled by `Uniform(1 − q, 1 + q)`; all
/// other maps returned unchanged.
pub fn apply_select_scale<T: Scalar>(
    y: &Tensor<T>,
    t: f64,
    q: f64,
    mode: ScoreMode,
    rngs: &mut [Stream],
    training: bool,
) -> Result<Tensor<T>> {
    let cfg = RegularizerConfig {
        score_mode: mode,
        ..RegularizerConfig::select_scale(t, q)
    };
    Regularizer::new(&cfg)?.apply(y, rngs, training)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, StreamKey};
    use rand::Rng;

    fn streams(n: usize, seed: u64) -> Vec<Stream> {
        StreamKey::new(seed, Domain::Scratch).sample_streams(n)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut r = StreamKey::new(seed, Domain::Scratch).layer(99).stream();
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn degenerate_rates_are_identity() {
        let y = random(&[3, 5, 4, 4], 1);
        let mut r = streams(3, 2);
        assert_eq!(apply_dropout(&y, 1.0, &mut r, true).unwrap(), y);
        assert_eq!(apply_spatial_dropout(&y, 1.0, &mut r, true).unwrap(), y);
        assert_eq!(apply_spatial_scale(&y, 0.0, &mut r, true).unwrap(), y);
        assert_eq!(
            apply_selectout(&y, 0.2, 1.0, ScoreMode::MaxAbs, &mut r, true).unwrap(),
            y
        );
        assert_eq!(
            apply_select_scale(&y, 0.7, 0.0, ScoreMode::MaxAbs, &mut r, true).unwrap(),
            y
        );
    }

    #[test]
    fn eval_mode_is_identity() {
        let y = random(&[2, 6, 3, 3], 3);
        let mut r = streams(2, 4);
        assert_eq!(apply_dropout(&y, 0.5, &mut r, false).unwrap(), y);
        assert_eq!(apply_spatial_dropout(&y, 0.5, &mut r, false).unwrap(), y);
        assert_eq!(apply_spatial_scale(&y, 1.0, &mut r, false).unwrap(), y);
    }

    #[test]
    fn non_positive_retain_is_config_error() {
        let y = random(&[1, 1, 2, 2], 0);
        let mut r = streams(1, 0);
        for p in [0.0, -0.5] {
            let err = apply_dropout(&y, p, &mut r, true).unwrap_err();
            assert!(matches!(err, Error::InvalidKey { .. }));
        }
        assert!(apply_spatial_scale(&y, 1.5, &mut r, true).is_err());
        assert!(apply_select_scale(&y, 0.0, 0.1, ScoreMode::Max, &mut r, true).is_err());
    }

    #[test]
    fn spatial_dropout_maps_are_atomic() {
        let y = random(&[4, 16, 5, 5], 5);
        let p = 0.6;
        let out = apply_spatial_dropout(&y, p, &mut streams(4, 6), true).unwrap();
        let scale = (1.0 / p) as f32;
        let mut dropped = 0;
        for (mo, mi) in out.data().chunks(25).zip(y.data().chunks(25)) {
            if mo.iter().all(|&v| v == 0.0) {
                dropped += 1;
            } else {
                for (a, b) in mo.iter().zip(mi) {
                    assert_eq!(*a, b * scale);
                }
            }
        }
        assert!(dropped > 0);
    }

    #[test]
    fn select_scale_with_q_one_spans_zero_to_two() {
        let reg = Regularizer::new(&RegularizerConfig::spatial_scale(1.0)).unwrap();
        let mut r = streams(1, 7);
        let y = Tensor::<f64>::ones(&[1, 2000, 1, 1]);
        let BatchFactors::PerMap(f) = reg.factors(&y, &mut r, true, true).unwrap() else {
            panic!("expected per-map factors")
        };
        let (lo, hi) = f.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(lo >= 0.0 && hi < 2.0);
        assert!(lo < 0.01 && hi > 1.99, "{lo} {hi}");
    }

    #[test]
    fn wrong_stream_count() {
        let y = random(&[2, 2, 2, 2], 0);
        assert!(apply_spatial_dropout(&y, 0.5, &mut streams(3, 0), true).is_err());
    }

    #[test]
    fn selectout_mask_reports_selection() {
        let reg = Regularizer::new(&RegularizerConfig::selectout(0.5, 0.75)).unwrap();
        let sample: Vec<f64> = vec![4.0, 1.0, 3.0, 2.0];
        let mut rng = streams(1, 9).remove(0);
        let m = reg.sample_mask(&sample, [4, 1, 1], false, &mut rng).unwrap();
        assert_eq!(m.selection.iter().filter(|&&k| !k).count(), 1);
        let dropped = m.selection.iter().position(|&k| !k).unwrap();
        assert!(dropped == 0 || dropped == 2);
        for (i, &f) in m.factors.iter().enumerate() {
            if i == dropped {
                assert_eq!(f, 0.0);
            } else {
                assert_eq!(f, 1.0 / 0.75);
            }
        }
    }

    #[test]
    fn raw_mode_skips_rescale() {
        let reg = Regularizer::new(&RegularizerConfig::spatial_dropout(0.5))
            .unwrap()
            .without_rescale();
        let y = Tensor::<f32>::ones(&[1, 32, 1, 1]);
        let out = apply_factors(&y, &reg.factors(&y, &mut streams(1, 3), true, true).unwrap());
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
