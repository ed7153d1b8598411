//! Inference-time drop ablation and class activation maps.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{HookTransform, Model};
use crate::regularizers::{Method, Placement, Regularizer, RegularizerConfig};
use crate::rng::{Domain, StreamKey};
use crate::tape::GradTape;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{count_errors, evaluate};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSettings {
    pub method: Method,
    /// Retaining rates, strictly decreasing, each in `(0, 1]`.
    pub rates: Vec<f64>,
    pub seed: u64,
    /// Apply the training-time `1/p` factor to kept maps.
    pub rescale: bool,
    /// Selectout top rate. `None` uses `1 - rate` at each rate, so the
    /// dropped maps are exactly the highest-scored ones.
    pub top_rate: Option<f64>,
    pub placement: Placement,
    pub batch_size: usize,
}

impl AblationSettings {
    pub fn new(method: Method, rates: Vec<f64>, seed: u64) -> Self {
        AblationSettings {
            method,
            rates,
            seed,
            rescale: true,
            top_rate: None,
            placement: Placement::All,
            batch_size: 100,
        }
    }

    fn config_at(&self, rate: f64) -> RegularizerConfig {
        let mut cfg = RegularizerConfig::new(self.method).with_placement(self.placement.clone());
        cfg.retain = rate;
        if self.method == Method::Selectout {
            cfg.top_rate = self.top_rate.unwrap_or(1.0 - rate);
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCurve {
    pub method: Method,
    /// `(retaining rate, test error)` in the order of the requested rates.
    pub points: Vec<(f64, f64)>,
    pub seed: u64,
    pub rescale: bool,
}

pub const ABLATION_HEADER: &str = "rate,error,method,seed";

impl AblationCurve {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_HEADER}\n");
        self.append_rows(&mut s);
        s
    }

    fn append_rows(&self, s: &mut String) {
        for (rate, err) in &self.points {
            let _ = writeln!(s, "{rate},{err},{},{}", self.method, self.seed);
        }
    }
}

/// CSV holding several curves under one header.
pub fn curves_csv(curves: &[AblationCurve]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for c in curves {
        c.append_rows(&mut s);
    }
    s
}

/// Pointwise mean error of curves sharing method and rates.
pub fn mean_curve(curves: &[AblationCurve]) -> Result<Vec<(f64, f64)>> {
    let first = curves
        .first()
        .ok_or_else(|| Error::config("no curves to average"))?;
    for c in curves {
        let same_rates = c.points.len() == first.points.len()
            && c.points.iter().zip(&first.points).all(|(a, b)| a.0 == b.0);
        if c.method != first.method || !same_rates {
            return Err(Error::config(
                "curves must share the method and the list of rates to be averaged",
            ));
        }
    }
    let k = curves.len() as f64;
    Ok(first
        .points
        .iter()
        .enumerate()
        .map(|(i, &(rate, _))| (rate, curves.iter().map(|c| c.points[i].1).sum::<f64>() / k))
        .collect())
}

fn check_rates(rates: &[f64]) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::key("ablate.rates", "no retaining rates given"));
    }
    if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::key("ablate.rates", format!("rate {r} is outside (0, 1]")));
    }
    if rates.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::key("ablate.rates", "rates must be strictly decreasing"));
    }
    Ok(())
}

/// Test error of a frozen model with a drop transform forced on at the
/// configured hooks for every retaining rate. BN uses running statistics.
pub fn ablate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    settings: &AblationSettings,
) -> Result<AblationCurve> {
    check_rates(&settings.rates)?;
    if !matches!(settings.method, Method::SpatialDropout | Method::Selectout | Method::Dropout) {
        return Err(Error::key(
            "ablate.method",
            format!("`{}` is not a drop method", settings.method),
        ));
    }
    if data.is_empty() {
        return Err(Error::config("cannot ablate on an empty dataset"));
    }
    let bs = settings.batch_size.max(1);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut points = Vec::with_capacity(settings.rates.len());
    for &rate in &settings.rates {
        let cfg = settings.config_at(rate);
        cfg.validate()?;
        let mask = model.hook_mask(&cfg.placement)?;
        let mut reg = Regularizer::new(&cfg)?;
        if !settings.rescale {
            reg = reg.without_rescale();
        }
        let mut wrong = 0usize;
        for (b, chunk) in idx.chunks(bs).enumerate() {
            let (x, labels) = data.batch::<T>(chunk, None)?;
            let mut tape = GradTape::new();
            let xv = tape.constant(x);
            let transform = HookTransform {
                regularizer: &reg,
                mask: &mask,
                key: StreamKey::new(settings.seed, Domain::Ablation).batch(b as u64),
            };
            let out = model.forward(&mut tape, xv, false, Some(&transform))?;
            wrong += count_errors(tape.value(out.logits).data(), &labels);
        }
        points.push((rate, wrong as f64 / data.len() as f64));
    }
    Ok(AblationCurve {
        method: settings.method,
        points,
        seed: settings.seed,
        rescale: settings.rescale,
    })
}

/// Clean test error, for comparison with ablation curves.
pub fn clean_error<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    Ok(evaluate(model, data, batch_size)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    /// `[H, W]`, min-max normalized to `[0, 1]`.
    pub values: Tensor<f64>,
    /// The weighted channel sum before normalization.
    pub raw: Tensor<f64>,
    pub class: usize,
    pub layer: String,
}

impl HeatMap {
    /// Binary 8-bit PGM, one byte per pixel, `round(255 * value)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let [h, w] = [self.values.shape()[0], self.values.shape()[1]];
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend(
            self.values
                .data()
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        out
    }

    /// Raw values, one image row per line.
    pub fn to_csv(&self) -> String {
        let w = self.raw.shape()[1];
        let mut s = String::new();
        for row in self.raw.data().chunks(w) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Class activation map from `[C, H, W]` features and the class's
/// classifier row of length `C`.
pub fn cam_from_features(features: &[f64], dims: [usize; 3], weights: &[f64]) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let [c, h, w] = dims;
    if features.len() != c * h * w || weights.len() != c {
        return Err(Error::dim(format!(
            "{} feature values and {} weights for {c} maps of {h}x{w}",
            features.len(),
            weights.len()
        )));
    }
    let hw = h * w;
    let mut raw = vec![0.0; hw];
    for (k, &wk) in weights.iter().enumerate() {
        for (r, &f) in raw.iter_mut().zip(&features[k * hw..(k + 1) * hw]) {
            *r += wk * f;
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm = if span > 0.0 && span.is_finite() {
        raw.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; hw]
    };
    Ok((Tensor::new(&[h, w], norm)?, Tensor::new(&[h, w], raw)?))
}

/// Class activation map of one `[C, H, W]` image for `class`, computed from
/// the feature maps entering the global-average-pool head.
pub fn cam<T: Scalar>(model: &Model<T>, image: &Tensor<T>, class: usize) -> Result<HeatMap> {
    let fc = model.gap_classifier()?;
    let [k, c] = fc.dims2()?;
    if class >= k {
        return Err(Error::key(
            "cam.class",
            format!("class {class} is out of range for {k} classes"),
        ));
    }
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("expected a [C,H,W] image, got {s:?}")));
    }
    let x = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let mut tape = GradTape::new();
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, xv, false, None)?;
    let f = tape.value(out.features);
    let [_, fc_c, h, w] = f.dims4()?;
    debug_assert_eq!(fc_c, c);
    let features: Vec<f64> = f.data().iter().map(|v| v.as_f64()).collect();
    let weights: Vec<f64> = fc.data()[class * c..(class + 1) * c]
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let (values, raw) = cam_from_features(&features, [c, h, w], &weights)?;
    Ok(HeatMap {
        values,
        raw,
        class,
        layer: model.hook_names().last().cloned().unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_dataset;
    use crate::model::ModelSpec;

    fn tiny() -> (Model<f32>, Dataset) {
        let model = Model::build(&ModelSpec::resnet(8, 1, 3, 8), 3).unwrap();
        (model, synthesize_dataset(3, 12, 5, 8).unwrap())
    }

    #[test]
    fn rate_one_is_clean_error() {
        let (model, data) = tiny();
        for method in [Method::SpatialDropout, Method::Selectout] {
            let curve = ablate(&model, &data, &AblationSettings::new(method, vec![1.0], 0)).unwrap();
            assert_eq!(curve.points[0].1, clean_error(&model, &data, 100).unwrap());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (model, data) = tiny();
        let s = AblationSettings::new(Method::SpatialDropout, vec![0.9, 0.5, 0.2], 7);
        assert_eq!(ablate(&model, &data, &s).unwrap(), ablate(&model, &data, &s).unwrap());
    }

    #[test]
    fn rates_validated() {
        let (model, data) = tiny();
        for rates in [vec![], vec![0.5, 0.9], vec![1.2], vec![0.0]] {
            let s = AblationSettings::new(Method::Selectout, rates, 0);
            assert!(ablate(&model, &data, &s).is_err());
        }
        let mut s = AblationSettings::new(Method::Selectout, vec![0.5], 0);
        s.top_rate = Some(0.2);
        let err = ablate(&model, &data, &s).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn mean_of_curves() {
        let c = |e: f64, seed| AblationCurve {
            method: Method::Selectout,
            points: vec![(1.0, 0.0), (0.9, e)],
            seed,
            rescale: true,
        };
        assert_eq!(mean_curve(&[c(0.2, 0), c(0.4, 1)]).unwrap(), vec![(1.0, 0.0), (0.9, 0.30000000000000004)]);
        assert!(curves_csv(&[c(0.2, 0)]).starts_with("rate,error,method,seed\n1,0,selectout,0\n"));
    }

    #[test]
    fn uniform_weights_give_channel_sum() {
        let f: Vec<f64> = (0..2 * 2 * 3).map(|i| ((i * 7) % 5) as f64).collect();
        let (norm, raw) = cam_from_features(&f, [2, 2, 3], &[0.5, 0.5]).unwrap();
        let sum: Vec<f64> = (0..6).map(|p| 0.5 * (f[p] + f[6 + p])).collect();
        assert_eq!(raw.data(), &sum[..]);
        let max = norm.data().iter().copied().fold(0.0, f64::max);
        let min = norm.data().iter().copied().fold(1.0, f64::min);
        assert_eq!((min, max), (0.0, 1.0));
    }

    #[test]
    fn constant_maps_give_zeros() {
        let (norm, _) = cam_from_features(&[3.0; 8], [2, 2, 2], &[1.0, -0.3]).unwrap();
        assert!(norm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaling_features_keeps_normalized_map() {
        let f: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let scaled: Vec<f64> = f.iter().map(|v| v * 4.0).collect();
        let a = cam_from_features(&f, [2, 3, 3], &[0.3, -1.1]).unwrap().0;
        let b = cam_from_features(&scaled, [2, 3, 3], &[0.3, -1.1]).unwrap().0;
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn flatten_head_is_unsupported() {
        let mut spec = ModelSpec::plain_cnn(2, 1, 3, 8);
        spec.head = crate::model::Head::FlattenLinear;
        let m = Model::<f32>::build(&spec, 0).unwrap();
        let err = cam(&m, &Tensor::zeros(&[3, 8, 8]), 0).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn pgm_layout() {
        let values = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let h = HeatMap {
            raw: values.clone(),
            values,
            class: 0,
            layer: "x".into(),
        };
        assert_eq!(h.to_pgm(), b"P5\n2 1\n255\n\x00\xff".to_vec());
    }
}
