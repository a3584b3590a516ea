use serde::{Deserialize, Serialize};

use super::{AnchorRole, AnchorSample, EmptyBatchPolicy, Result, TrainConfig, TrainError};
use crate::geometry::BoxDelta;

/// Probabilities are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` before the log.
pub const BCE_EPSILON: f64 = 1e-7;

/// Binary cross-entropy of probability `p` against target `p_star`.
pub fn bce(p: f64, p_star: f64) -> f64 {
    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    -(p_star * p.ln() + (1.0 - p_star) * (1.0 - p).ln())
}

/// Derivative of [`bce`] in `p`; zero where the clamp is active.
pub(super) fn bce_grad(p: f64, p_star: f64) -> f64 {
    if !(BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&p) {
        return 0.0;
    }
    -p_star / p + (1.0 - p_star) / (1.0 - p)
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

pub(super) fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Smooth-L1 summed over the four delta components.
pub fn localization_loss(t: &BoxDelta, t_star: &BoxDelta) -> f64 {
    t.to_array()
        .iter()
        .zip(t_star.to_array())
        .map(|(a, b)| smooth_l1(a - b))
        .sum()
}

/// The four loss components, each already normalized by the minibatch size.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_i: f64,
    pub cls_j: f64,
    pub cls_k: f64,
    /// Localization term, including the balance factor.
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recomputed_total(&self) -> f64 {
        self.cls_i + self.cls_j + self.cls_k + self.reg
    }
}

/// Objectness loss over positives, labeled background and negatives, plus
/// the localization loss over positives only, all divided by the configured
/// minibatch size. Ignored and unused samples contribute nothing.
pub fn total_loss(samples: &[AnchorSample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    if cfg.minibatch_size == 0 {
        return Err(TrainError::InvalidConfig("minibatch_size must be at least 1".into()));
    }
    let n = cfg.minibatch_size as f64;
    let mut out = LossBreakdown::default();
    let mut bearing = 0usize;
    for s in samples {
        let Some(y) = s.p_star() else { continue };
        bearing += 1;
        let l = bce(s.p, y) / n;
        match s.role {
            AnchorRole::PositiveI => {
                out.cls_i += l;
                if let (Some(t), Some(ts)) = (&s.t, &s.t_star) {
                    out.reg += cfg.lambda * localization_loss(t, ts) / n;
                }
            }
            AnchorRole::LabeledBackgroundJ => out.cls_j += l,
            AnchorRole::NegativeK => out.cls_k += l,
            AnchorRole::Ignored | AnchorRole::Unused => unreachable!("filtered by p_star"),
        }
    }
    if bearing == 0 {
        match cfg.empty_batch {
            EmptyBatchPolicy::Error => return Err(TrainError::EmptyBatch),
            EmptyBatchPolicy::ZeroWithWarning => log::warn!("minibatch has no loss-bearing samples"),
        }
    }
    out.total = out.recomputed_total();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert!((bce(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(0.9, 0.0) - 10f64.ln()).abs() < 1e-12);
        assert!(bce(1.0 - BCE_EPSILON, 1.0) < 1e-6);
        assert!(bce(1.0, 1.0).is_finite());
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn ignored_only_batch_follows_policy() {
        let samples = vec![AnchorSample::new(0, AnchorRole::Ignored, 0.95)];
        assert!(matches!(
            total_loss(&samples, &TrainConfig::default()),
            Err(TrainError::EmptyBatch)
        ));
        let cfg = TrainConfig {
            empty_batch: EmptyBatchPolicy::ZeroWithWarning,
            ..TrainConfig::default()
        };
        assert_eq!(total_loss(&samples, &cfg).unwrap().total, 0.0);
    }
}
