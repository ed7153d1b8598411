//! Structured feature-map regularizers.
//!
//! Five training-time transforms act on `[N,C,H,W]` activations, one
//! multiplicative factor per unit or per feature map:
//!
//! | method            | unit    | factor                                   |
//! |-------------------|---------|------------------------------------------|
//! | `dropout`         | element | `0` or `1/p`                             |
//! | `spatial_dropout` | map     | `0` or `1/p`                             |
//! | `spatial_scale`   | map     | `u ~ U(1−q, 1+q)`                        |
//! | `selectout`       | map     | `0` or `1/p`, zeros drawn from the top-t |
//! | `select_scale`    | map     | `u` on the top-t maps, exactly 1 elsewhere |
//!
//! The selective methods rank maps with [`score_feature_maps`] and pick the
//! candidate pool with [`select`]. All transforms are the identity when not
//! training.

mod score;
mod select;
mod transform;

use std::fmt;
use std::str::FromStr;

pub use score::{score_feature_maps, score_map, ScoreMode, ScoreVector};
pub use select::{candidate_count, candidate_pool, drop_count, select};
pub use transform::{
    apply_dropout, apply_select_scale, apply_selectout, apply_spatial_dropout,
    apply_spatial_scale, apply_factors, BatchFactors, DropMask, Regularizer,
};

use crate::error::{Error, Result};

/// Slack for float comparisons of rate constraints such as `1 − p ≤ t`.
const RATE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    None,
    Dropout,
    SpatialDropout,
    SpatialScale,
    Selectout,
    SelectScale,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::None,
        Method::Dropout,
        Method::SpatialDropout,
        Method::SpatialScale,
        Method::Selectout,
        Method::SelectScale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Dropout => "dropout",
            Method::SpatialDropout => "spatial_dropout",
            Method::SpatialScale => "spatial_scale",
            Method::Selectout => "selectout",
            Method::SelectScale => "select_scale",
        }
    }

    /// Methods whose intensity is the retaining rate `p`.
    pub fn uses_retain_rate(self) -> bool {
        matches!(
            self,
            Method::Dropout | Method::SpatialDropout | Method::Selectout
        )
    }

    /// Methods whose intensity is the scale half-width `q`.
    pub fn uses_half_width(self) -> bool {
        matches!(self, Method::SpatialScale | Method::SelectScale)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::key(
                    "reg.method",
                    format!(
                        "unknown method `{s}` (expected one of: {})",
                        Method::ALL.map(Method::as_str).join(", ")
                    ),
                )
            })
    }
}

/// Which hook points a regularizer is attached to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placement {
    All,
    Hooks(Vec<String>),
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(Placement::All);
        }
        Ok(Placement::Hooks(
            s.split(',')
                .map(str::trim)
                .filter(|h| !h.is_empty())
                .map(String::from)
                .collect(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerConfig {
    pub method: Method,
    /// Top rate `t`: fraction of highest-scored maps forming the candidate pool.
    pub top_rate: f64,
    /// Retaining rate `p`.
    pub retain: f64,
    /// Scale half-width `q`.
    pub half_width: f64,
    pub score_mode: ScoreMode,
    pub placement: Placement,
    /// Linear schedule `(start, end)` for `p` or `q`, depending on the method.
    pub curriculum: Option<(f64, f64)>,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            method: Method::None,
            top_rate: 0.2,
            retain: 0.9,
            half_width: 0.4,
            score_mode: ScoreMode::Auto,
            placement: Placement::All,
            curriculum: None,
        }
    }
}

impl RegularizerConfig {
    pub fn new(method: Method) -> Self {
        RegularizerConfig {
            method,
            ..Default::default()
        }
    }

    pub fn dropout(p: f64) -> Self {
        RegularizerConfig {
            retain: p,
            ..Self::new(Method::Dropout)
        }
    }

    pub fn spatial_dropout(p: f64) -> Self {
        RegularizerConfig {
            retain: p,
            ..Self::new(Method::SpatialDropout)
        }
    }

    pub fn spatial_scale(q: f64) -> Self {
        RegularizerConfig {
            half_width: q,
            ..Self::new(Method::SpatialScale)
        }
    }

    pub fn selectout(t: f64, p: f64) -> Self {
        RegularizerConfig {
            top_rate: t,
            retain: p,
            ..Self::new(Method::Selectout)
        }
    }

    pub fn select_scale(t: f64, q: f64) -> Self {
        RegularizerConfig {
            top_rate: t,
            half_width: q,
            ..Self::new(Method::SelectScale)
        }
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    /// Checks the parameters the configured method depends on.
    pub fn validate(&self) -> Result<()> {
        check_top_rate(self.top_rate)?;
        check_retain(self.retain)?;
        check_half_width(self.half_width)?;
        match self.method {
            Method::Selectout => check_selectout(self.top_rate, self.retain)?,
            Method::SelectScale if self.top_rate <= 0.0 => {
                return Err(Error::key(
                    "reg.t",
                    "select_scale needs a top rate t > 0 (the candidate set would be empty)",
                ));
            }
            _ => {}
        }
        if let Some((start, end)) = self.curriculum {
            for (key, rate) in [("reg.curriculum_start", start), ("reg.curriculum_end", end)] {
                let checked = self.with_rate(rate).validate_rate_only();
                if let Err(e) = checked {
                    return Err(Error::key(key, e.to_string()));
                }
            }
        }
        Ok(())
    }

    fn validate_rate_only(&self) -> Result<()> {
        check_retain(self.retain)?;
        check_half_width(self.half_width)?;
        if self.method == Method::Selectout {
            check_selectout(self.top_rate, self.retain)?;
        }
        Ok(())
    }

    /// The intensity parameter the curriculum moves: `p` for drop methods,
    /// `q` for scale methods.
    pub fn rate(&self) -> f64 {
        if self.method.uses_half_width() {
            self.half_width
        } else {
            self.retain
        }
    }

    /// Copy with the method's intensity parameter replaced by `rate`.
    pub fn with_rate(&self, rate: f64) -> Self {
        let mut out = self.clone();
        if self.method.uses_half_width() {
            out.half_width = rate;
        } else {
            out.retain = rate;
        }
        out
    }

    /// Intensity in effect at `epoch` of `total_epochs`.
    pub fn effective_rate(&self, epoch: usize, total_epochs: usize) -> f64 {
        match self.curriculum {
            Some((start, end)) => curriculum_rate(epoch, total_epochs, start, end),
            None => self.rate(),
        }
    }

    /// Copy configured for `epoch`, with any curriculum applied.
    pub fn at_epoch(&self, epoch: usize, total_epochs: usize) -> Self {
        self.with_rate(self.effective_rate(epoch, total_epochs))
    }
}

fn check_top_rate(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::key("reg.t", format!("top rate {t} is outside [0, 1]")));
    }
    Ok(())
}

fn check_retain(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::key("reg.p", format!("retaining rate {p} is outside (0, 1]")));
    }
    Ok(())
}

fn check_half_width(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::key("reg.q", format!("scale half-width {q} is outside [0, 1]")));
    }
    Ok(())
}

fn check_selectout(t: f64, p: f64) -> Result<()> {
    if 1.0 - p > t + RATE_SLACK {
        return Err(Error::key(
            "reg.p",
            format!("selectout needs 1 - p <= t, got p = {p}, t = {t}"),
        ));
    }
    Ok(())
}

/// Linear interpolation from `start_rate` at epoch 0 to `end_rate` at
/// `total_epochs`.
pub fn curriculum_rate(epoch: usize, total_epochs: usize, start_rate: f64, end_rate: f64) -> f64 {
    if total_epochs == 0 {
        return start_rate;
    }
    if epoch >= total_epochs {
        return end_rate;
    }
    start_rate + (end_rate - start_rate) * epoch as f64 / total_epochs as f64
}
