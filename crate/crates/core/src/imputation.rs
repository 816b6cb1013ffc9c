//! Candidate error-imputation models. Each regresses the current prediction
//! error on (user, item) with its own backbone, trained by the
//! inverse-propensity-weighted squared imputation loss.

use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, Optimizer};
use crate::data::ObservedIndex;
use crate::error::{CoreError, Result};

/// How the prediction error e is defined against the true rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ErrorConvention {
    /// e = y - f(x)
    Residual,
    /// e = (y - f(x))^2
    #[default]
    Squared,
}

impl ErrorConvention {
    #[inline]
    pub fn error(&self, rating: f64, pred: f64) -> f64 {
        match self {
            ErrorConvention::Residual => rating - pred,
            ErrorConvention::Squared => (rating - pred) * (rating - pred),
        }
    }

    /// d e / d pred, for backpropagation into the prediction model.
    #[inline]
    pub fn error_grad_wrt_pred(&self, rating: f64, pred: f64) -> f64 {
        match self {
            ErrorConvention::Residual => -1.0,
            ErrorConvention::Squared => 2.0 * (pred - rating),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationModel {
    pub backbone: Backbone,
    pub optimizer: Optimizer,
    /// Optional |m| cap (M/2 in the tail-bound precondition). Off during
    /// ordinary training.
    pub cap: Option<f64>,
}

impl ImputationModel {
    pub fn new(backbone: Backbone, learning_rate: f64) -> Self {
        let n = backbone.num_params();
        ImputationModel {
            backbone,
            optimizer: Optimizer::adam(learning_rate, n),
            cap: None,
        }
    }

    pub fn with_cap(mut self, cap: f64) -> Self {
        self.cap = Some(cap);
        self
    }

    /// Imputed error for a cell; capped only when a cap is configured.
    pub fn impute(&self, u: usize, i: usize) -> Result<f64> {
        let raw = self.backbone.predict(u, i)?;
        Ok(match self.cap {
            Some(c) => raw.clamp(-c, c),
            None => raw,
        })
    }
}

/// One optimizer step on the propensity-weighted imputation loss
/// `(1/L) * sum (m(u,i) - e(u,i))^2 / p_j(u,i)` over a batch of observed
/// cells. The prediction model is frozen; e is recomputed from it here,
/// never cached across prediction-model updates.
pub fn update_imputation(
    model: &mut ImputationModel,
    batch: &[(usize, usize)],
    observed: &ObservedIndex,
    prediction_model: &Backbone,
    inv_propensities_j: &[f64],
    num_items: usize,
    convention: ErrorConvention,
) -> Result<()> {
    if batch.is_empty() {
        return Err(CoreError::ContractViolation("empty imputation batch".into()));
    }
    let weighted: Vec<(usize, usize, f64, f64)> = batch
        .iter()
        .map(|&(u, i)| {
            let rating = observed.rating(u, i).ok_or_else(|| {
                CoreError::ContractViolation(format!(
                    "imputation batch contains unobserved cell ({u}, {i})"
                ))
            })?;
            let pred = prediction_model.predict(u, i)?;
            let mut e = convention.error(rating, pred);
            // A capped model class is fit within its own range; otherwise a
            // transiently bad prediction model hands the imputation model
            // runaway regression targets.
            if let Some(c) = model.cap {
                e = e.clamp(-c, c);
            }
            let w = inv_propensities_j[u * num_items + i];
            Ok((u, i, e, w))
        })
        .collect::<Result<_>>()?;
    crate::backbones::weighted_update(&mut model.backbone, &weighted, &mut model.optimizer)
}
