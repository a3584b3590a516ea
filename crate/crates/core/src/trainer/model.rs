use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{bce_grad, smooth_l1_grad};
use super::{total_loss, AnchorRole, AnchorSample, LossBreakdown, Result, TrainConfig, TrainError};
use crate::geometry::BoxDelta;

/// A differentiable map from an anchor feature vector to an objectness
/// probability and a box delta.
pub trait ScoringModel {
    fn feature_dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn forward(&self, x: &[f64]) -> (f64, BoxDelta);
    /// Adds to `grad` the parameter gradient of a loss whose derivatives
    /// with respect to this input's outputs are `dl_dp` and `dl_dt`.
    fn backward(&self, x: &[f64], dl_dp: f64, dl_dt: [f64; 4], grad: &mut [f64]);
}

/// Logistic objectness `p = sigmoid(w . x)` with a linear regression head
/// `t = W x`. Parameters are `w` followed by the rows of `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLogistic {
    dim: usize,
    theta: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearLogistic {
    pub fn param_count(dim: usize) -> usize {
        5 * dim
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            theta: vec![0.0; Self::param_count(dim)],
        }
    }

    pub fn from_params(dim: usize, theta: Vec<f64>) -> Option<Self> {
        (theta.len() == Self::param_count(dim)).then_some(Self { dim, theta })
    }

    pub fn random<R: Rng>(dim: usize, scale: f64, rng: &mut R) -> Self {
        let theta = (0..Self::param_count(dim))
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Self { dim, theta }
    }

    /// Index of the first regression parameter.
    pub fn regression_offset(&self) -> usize {
        self.dim
    }
}

impl ScoringModel for LinearLogistic {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn forward(&self, x: &[f64]) -> (f64, BoxDelta) {
        let d = self.dim;
        let dot = |row: &[f64]| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let p = sigmoid(dot(&self.theta[..d]));
        let mut t = [0.0; 4];
        for (c, tc) in t.iter_mut().enumerate() {
            *tc = dot(&self.theta[d + c * d..d + (c + 1) * d]);
        }
        (p, BoxDelta::from_array(t))
    }

    fn backward(&self, x: &[f64], dl_dp: f64, dl_dt: [f64; 4], grad: &mut [f64]) {
        let d = self.dim;
        let (p, _) = self.forward(x);
        let dl_dz = dl_dp * p * (1.0 - p);
        for k in 0..d {
            grad[k] += dl_dz * x[k];
        }
        for (c, g) in dl_dt.iter().enumerate() {
            if *g != 0.0 {
                for k in 0..d {
                    grad[d + c * d + k] += g * x[k];
                }
            }
        }
    }
}

/// Fills each sample's `p` and `t` from the model.
pub(super) fn evaluate<M: ScoringModel>(
    model: &M,
    features: &[Vec<f64>],
    samples: &[AnchorSample],
) -> Result<Vec<AnchorSample>> {
    samples
        .iter()
        .map(|s| {
            let x = features.get(s.anchor).ok_or(TrainError::LengthMismatch {
                anchors: s.anchor + 1,
                other: features.len(),
                what: "feature vectors",
            })?;
            if x.len() != model.feature_dim() {
                return Err(TrainError::LengthMismatch {
                    anchors: model.feature_dim(),
                    other: x.len(),
                    what: "feature components",
                });
            }
            let (p, t) = model.forward(x);
            let mut out = s.clone();
            out.p = p;
            out.t = Some(t);
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub loss: LossBreakdown,
    pub grad: Vec<f64>,
    /// L1 norm of each sample's own gradient contribution, aligned with the
    /// input samples.
    pub contributions: Vec<f64>,
}

/// Analytic gradient of [`total_loss`] with respect to the model parameters.
/// Samples outside the loss are never back-propagated.
pub fn loss_gradient<M: ScoringModel>(
    model: &M,
    features: &[Vec<f64>],
    samples: &[AnchorSample],
    cfg: &TrainConfig,
) -> Result<GradientReport> {
    let evaluated = evaluate(model, features, samples)?;
    let loss = total_loss(&evaluated, cfg)?;
    let n = cfg.minibatch_size as f64;
    let np = model.params().len();
    let mut grad = vec![0.0; np];
    let mut local = vec![0.0; np];
    let mut contributions = Vec::with_capacity(samples.len());
    for s in &evaluated {
        let Some(y) = s.p_star() else {
            contributions.push(0.0);
            continue;
        };
        local.iter_mut().for_each(|g| *g = 0.0);
        let dl_dp = bce_grad(s.p, y) / n;
        let mut dl_dt = [0.0; 4];
        if s.role == AnchorRole::PositiveI {
            if let (Some(t), Some(ts)) = (&s.t, &s.t_star) {
                for ((g, a), b) in dl_dt.iter_mut().zip(t.to_array()).zip(ts.to_array()) {
                    *g = cfg.lambda * smooth_l1_grad(a - b) / n;
                }
            }
        }
        model.backward(&features[s.anchor], dl_dp, dl_dt, &mut local);
        contributions.push(local.iter().map(|g| g.abs()).sum());
        for (g, l) in grad.iter_mut().zip(&local) {
            *g += l;
        }
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index });
    }
    Ok(GradientReport {
        loss,
        grad,
        contributions,
    })
}

/// Scalar loss of `model` with its parameters replaced by `theta`.
pub fn loss_for_params<M: ScoringModel + Clone>(
    model: &M,
    theta: &[f64],
    features: &[Vec<f64>],
    samples: &[AnchorSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut m = model.clone();
    m.params_mut().copy_from_slice(theta);
    Ok(total_loss(&evaluate(&m, features, samples)?, cfg)?.total)
}

/// Central finite-difference gradient with the given step.
pub fn finite_difference_gradient<M: ScoringModel + Clone>(
    model: &M,
    features: &[Vec<f64>],
    samples: &[AnchorSample],
    cfg: &TrainConfig,
    step: f64,
) -> Result<Vec<f64>> {
    let mut theta = model.params().to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let plus = loss_for_params(model, &theta, features, samples, cfg)?;
        theta[i] = orig - step;
        let minus = loss_for_params(model, &theta, features, samples, cfg)?;
        theta[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxDelta;

    #[test]
    fn twenty_parameters_for_four_features() {
        assert_eq!(LinearLogistic::zeros(4).params().len(), 20);
    }

    #[test]
    fn zero_lambda_leaves_regression_head_untouched() {
        let mut rng = crate::rng::stream(5, &["t"]);
        let model = LinearLogistic::random(4, 0.5, &mut rng);
        let features = vec![vec![1.0, 0.2, -0.3, 0.4]];
        let mut s = AnchorSample::new(0, AnchorRole::PositiveI, 0.0);
        s.t_star = Some(BoxDelta::from_array([0.3, -0.2, 0.1, 0.5]));
        let cfg = TrainConfig {
            lambda: 0.0,
            minibatch_size: 1,
            ..TrainConfig::default()
        };
        let g = loss_gradient(&model, &features, &[s], &cfg).unwrap();
        assert!(g.grad[model.regression_offset()..].iter().all(|v| *v == 0.0));
        assert!(g.grad[..4].iter().any(|v| *v != 0.0));
    }
}
