//! Alternating multiple-robust training: update the K imputation models on
//! the propensity-weighted imputation loss, solve eta on the observed cells
//! of a fresh uniform batch with ridge stabilization, and update the
//! prediction model on the MR loss over a disjoint batch.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{ObservationMask, ObservedIndex, RatingDataset};
use crate::error::{CoreError, Result};
use crate::estimators::{solve_eta, FeatureVector, ModelEnsemble};
use crate::eval::{auc, mse};
use crate::imputation::{update_imputation, ErrorConvention};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Ridge stabilization for the eta solve.
    pub lambda: f64,
    /// Size of the uniform batch D' whose observed cells form the eta batch.
    pub batch_size_eta: usize,
    /// Size of the loss batch drawn from D minus D'.
    pub batch_size_pred: usize,
    /// Imputation batch size L.
    pub batch_size_imputation: usize,
    pub imputation_steps_per_round: usize,
    pub prediction_steps_per_round: usize,
    pub max_rounds: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub error_convention: ErrorConvention,
    /// Positive rating threshold for validation AUC.
    pub positive_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            batch_size_eta: 4096,
            batch_size_pred: 4096,
            batch_size_imputation: 256,
            imputation_steps_per_round: 1,
            prediction_steps_per_round: 4,
            max_rounds: 50,
            early_stop_patience: 8,
            seed: 0,
            error_convention: ErrorConvention::Squared,
            positive_threshold: 4.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.max_rounds < 1 {
            return Err(CoreError::ContractViolation("max_rounds must be >= 1".into()));
        }
        if self.batch_size_eta < 1 || self.batch_size_pred < 1 || self.batch_size_imputation < 1 {
            return Err(CoreError::ContractViolation("batch sizes must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(CoreError::Domain(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Per-round record of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mean_mr_loss: f64,
    pub mean_imputation_loss: f64,
    pub mean_eta_l1: f64,
    pub max_gram_condition: f64,
    pub validation_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rounds: Vec<RoundRecord>,
    /// Round whose checkpoint the ensemble was restored to, or `None` when
    /// no round improved on the initial model.
    pub best_round: Option<usize>,
    pub best_validation_metric: f64,
    /// Validation metric of the ensemble as passed in, before any training.
    pub initial_validation_metric: f64,
}

impl TrainingTrace {
    /// Line-delimited JSON records, one per round.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rounds {
            out.push_str(&serde_json::to_string(r).expect("round record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Held-out data driving early stopping.
pub enum ValidationSet<'a> {
    /// Missing-at-random ratings; the metric is AUC (higher is better).
    Mar(&'a RatingDataset),
    /// Held-out observed MNAR ratings; the metric is negated naive MSE.
    HeldOutObserved(&'a RatingDataset),
}

/// D' is drawn uniformly from D; the eta batch is D' intersected with the
/// observed set, and the loss batch is drawn uniformly from D minus D'.
/// Returned batches are disjoint by construction. If D' catches no observed
/// cell the draw is retried a bounded number of times.
pub fn sample_disjoint_batches(
    num_cells: usize,
    mask: &ObservationMask,
    config: &TrainConfig,
    round_seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let s_eta = config.batch_size_eta.min(num_cells.saturating_sub(1)).max(1);
    let s_pred = config.batch_size_pred.min(num_cells - s_eta).max(1);
    for attempt in 0..10u64 {
        let mut order: Vec<usize> = (0..num_cells).collect();
        let mut rng = rng_from_seed(derive_seed(round_seed, attempt));
        for k in (1..num_cells).rev() {
            let j = rng.random_range(0..=k);
            order.swap(k, j);
        }
        let eta_batch: Vec<usize> = order[..s_eta].iter().copied().filter(|&c| mask.is_set(c)).collect();
        if eta_batch.is_empty() {
            continue;
        }
        let loss_batch = order[s_eta..s_eta + s_pred].to_vec();
        return Ok((eta_batch, loss_batch));
    }
    Err(CoreError::SparseData(format!(
        "no observed cells in {s_eta}-cell eta batches after 10 retries; increase batch_size_eta"
    )))
}

struct FrozenInputs {
    /// J columns of clipped 1/p_hat over all cells.
    inv_props: Vec<Vec<f64>>,
    observed: ObservedIndex,
    num_items: usize,
    /// Predictions are clamped to the rating scale when errors are
    /// computed. Without this the MR loss is linear in the per-cell errors
    /// and any cell whose eta-weight goes negative offers an unbounded
    /// descent direction, which SGD will find and follow.
    rating_scale: (f64, f64),
}

impl FrozenInputs {
    fn feature(&self, ensemble: &ModelEnsemble, cell: usize) -> Result<FeatureVector> {
        let (u, i) = (cell / self.num_items, cell % self.num_items);
        let mut v = Vec::with_capacity(self.inv_props.len() + ensemble.num_imputation());
        for col in &self.inv_props {
            v.push(col[cell]);
        }
        for m in &ensemble.imputations {
            v.push(m.impute(u, i)?);
        }
        Ok(FeatureVector(v))
    }
}

/// Run the alternating training loop. Propensity models must be fitted
/// beforehand; they stay frozen. Returns the full trace; the ensemble is
/// left at the best validation checkpoint seen.
pub fn train(
    config: &TrainConfig,
    dataset: &RatingDataset,
    validation: &ValidationSet<'_>,
    ensemble: &mut ModelEnsemble,
) -> Result<TrainingTrace> {
    config.validate()?;
    if dataset.observed.is_empty() {
        return Err(CoreError::ContractViolation("no observed ratings to train on".into()));
    }
    let frozen = FrozenInputs {
        inv_props: ensemble
            .propensities
            .iter()
            .map(|p| p.estimate_matrix(dataset).into_iter().map(|v| 1.0 / v).collect())
            .collect(),
        observed: dataset.observed_index(),
        num_items: dataset.num_items,
        rating_scale: dataset.rating_scale,
    };
    let mask = dataset.observed_mask();
    let num_cells = dataset.num_cells();
    let conv = config.error_convention;

    let mut trace = TrainingTrace::default();
    // the starting point is a candidate checkpoint too: a warm-started
    // ensemble must never be returned in worse shape than it arrived
    let init_metric = validation_metric(ensemble, validation, config.positive_threshold)?;
    trace.initial_validation_metric = init_metric;
    let mut best_metric = init_metric;
    let mut best_round = None;
    let mut best_pred = ensemble.prediction.clone();
    let mut best_imps: Vec<_> = ensemble.imputations.clone();
    let mut stale = 0usize;

    for round in 0..config.max_rounds {
        let round_seed = derive_seed(config.seed, round as u64);

        // Imputation phase: each model takes its steps on fresh observed
        // batches with a per-step uniformly random propensity model.
        let mut imp_loss_sum = 0.0;
        let mut imp_loss_n = 0usize;
        for k in 0..ensemble.num_imputation() {
            for step in 0..config.imputation_steps_per_round {
                let step_seed = derive_seed(round_seed, 1000 + (k * 131 + step) as u64);
                let mut rng = rng_from_seed(step_seed);
                let batch: Vec<(usize, usize)> = (0..config.batch_size_imputation.min(dataset.observed.len()))
                    .map(|_| {
                        let (u, i, _) = dataset.observed[rng.random_range(0..dataset.observed.len())];
                        (u, i)
                    })
                    .collect();
                let j = rng.random_range(0..ensemble.num_propensity());
                imp_loss_sum += imputation_loss(
                    &ensemble.imputations[k],
                    &batch,
                    &frozen,
                    &ensemble.prediction,
                    j,
                    conv,
                )?;
                imp_loss_n += 1;
                let (pred, inv_p) = (&ensemble.prediction, &frozen.inv_props[j]);
                update_imputation(
                    &mut ensemble.imputations[k],
                    &batch,
                    &frozen.observed,
                    pred,
                    inv_p,
                    dataset.num_items,
                    conv,
                )?;
            }
        }

        // Prediction phase: disjoint batches, ridge eta, MR-loss step.
        let mut mr_loss_sum = 0.0;
        let mut eta_l1_sum = 0.0;
        let mut max_cond: f64 = 0.0;
        for step in 0..config.prediction_steps_per_round {
            let step_seed = derive_seed(round_seed, 2000 + step as u64);
            let (eta_cells, loss_cells) =
                sample_disjoint_batches(num_cells, &mask, config, step_seed)?;
            let mr = prediction_step(config, ensemble, &frozen, &eta_cells, &loss_cells, conv)?;
            if !mr.loss.is_finite() {
                restore(ensemble, &best_pred, &best_imps);
                return Err(CoreError::TrainingDiverged {
                    round,
                    message: "MR loss became non-finite".into(),
                });
            }
            mr_loss_sum += mr.loss;
            eta_l1_sum += mr.eta_l1;
            max_cond = max_cond.max(mr.gram_condition);
        }

        let metric = validation_metric(ensemble, validation, config.positive_threshold)?;
        trace.rounds.push(RoundRecord {
            round,
            mean_mr_loss: mr_loss_sum / config.prediction_steps_per_round as f64,
            mean_imputation_loss: if imp_loss_n > 0 { imp_loss_sum / imp_loss_n as f64 } else { 0.0 },
            mean_eta_l1: eta_l1_sum / config.prediction_steps_per_round as f64,
            max_gram_condition: max_cond,
            validation_metric: metric,
        });

        if metric > best_metric {
            best_metric = metric;
            best_round = Some(round);
            best_pred = ensemble.prediction.clone();
            best_imps = ensemble.imputations.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > config.early_stop_patience {
                break;
            }
        }
    }

    restore(ensemble, &best_pred, &best_imps);
    trace.best_round = best_round;
    trace.best_validation_metric = best_metric;
    Ok(trace)
}

fn restore(ensemble: &mut ModelEnsemble, pred: &crate::backbones::Backbone, imps: &[crate::imputation::ImputationModel]) {
    ensemble.prediction = pred.clone();
    ensemble.imputations = imps.to_vec();
}

struct MrStep {
    loss: f64,
    eta_l1: f64,
    gram_condition: f64,
}

fn prediction_step(
    config: &TrainConfig,
    ensemble: &mut ModelEnsemble,
    frozen: &FrozenInputs,
    eta_cells: &[usize],
    loss_cells: &[usize],
    conv: ErrorConvention,
) -> Result<MrStep> {
    let d = ensemble.num_propensity() + ensemble.num_imputation();

    // Features and errors on the eta batch (all observed by construction).
    let mut feats = Vec::with_capacity(eta_cells.len());
    let mut errs = Vec::with_capacity(eta_cells.len());
    let mut preds = Vec::with_capacity(eta_cells.len());
    let mut side = Vec::with_capacity(eta_cells.len());
    let mut ratings = Vec::with_capacity(eta_cells.len());
    for &c in eta_cells {
        let (u, i) = (c / frozen.num_items, c % frozen.num_items);
        let y = frozen.observed.rating(u, i).ok_or_else(|| {
            CoreError::ContractViolation(format!("eta batch contains unobserved cell ({u}, {i})"))
        })?;
        let (lo, hi) = frozen.rating_scale;
        let raw = ensemble.prediction.predict(u, i)?;
        let p = raw.clamp(lo, hi);
        feats.push(frozen.feature(ensemble, c)?);
        errs.push(conv.error(y, p));
        preds.push(p);
        side.push(if raw > hi {
            1i8
        } else if raw < lo {
            -1
        } else {
            0
        });
        ratings.push(y);
    }
    let eta = solve_eta(&feats, &errs, config.lambda)?;

    // MR loss over the loss batch and its mean feature vector.
    let mut mean_feat = vec![0.0; d];
    let mut loss = 0.0;
    for &c in loss_cells {
        let f = frozen.feature(ensemble, c)?;
        for (a, &v) in f.0.iter().enumerate() {
            mean_feat[a] += v / loss_cells.len() as f64;
        }
        loss += f.0.iter().zip(&eta.eta).map(|(x, y)| x * y).sum::<f64>();
    }
    loss /= loss_cells.len() as f64;

    // Gradient of the loss w.r.t. theta flows through the errors inside the
    // eta regression targets: dL/dtheta = cbar^T (G + lambda I)^{-1}
    // sum_i u_i de_i/dtheta. G is rebuilt from the eta-batch features.
    let mut gram = DMatrix::<f64>::zeros(d, d);
    for f in &feats {
        for a in 0..d {
            for b in 0..d {
                gram[(a, b)] += f.0[a] * f.0[b];
            }
        }
    }
    for a in 0..d {
        gram[(a, a)] += config.lambda;
    }
    let chol = Cholesky::new(gram).ok_or(CoreError::SingularSystem)?;
    let alpha = chol.solve(&DVector::from_column_slice(&mean_feat));

    let mut grad = vec![0.0; ensemble.prediction.num_params()];
    for (idx, &c) in eta_cells.iter().enumerate() {
        let (u, i) = (c / frozen.num_items, c % frozen.num_items);
        let coeff: f64 = feats[idx].0.iter().zip(alpha.iter()).map(|(x, y)| x * y).sum();
        let de_dpred = conv.error_grad_wrt_pred(ratings[idx], preds[idx]);
        // Out-of-scale predictions only receive gradient that pulls them
        // back toward the rating scale; the outward component is the
        // unbounded descent direction and is projected away. The descent
        // step moves the prediction along -coeff * de_dpred.
        let outward = (side[idx] as f64) * -(coeff * de_dpred);
        if side[idx] != 0 && outward > 0.0 {
            continue;
        }
        ensemble
            .prediction
            .accumulate_pred_grad(u, i, coeff * de_dpred, &mut grad)?;
    }
    if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
        return Err(CoreError::NonFinite {
            context: "MR prediction step".into(),
            name: ensemble.prediction.param_name(idx),
        });
    }
    let params = match &mut ensemble.prediction {
        crate::backbones::Backbone::Mf(m) => &mut m.params,
        crate::backbones::Backbone::Neural(m) => &mut m.params,
    };
    ensemble.prediction_opt.step(params, &grad);

    Ok(MrStep {
        loss,
        eta_l1: eta.l1_norm(),
        gram_condition: eta.gram_condition_estimate,
    })
}

fn imputation_loss(
    model: &crate::imputation::ImputationModel,
    batch: &[(usize, usize)],
    frozen: &FrozenInputs,
    prediction: &crate::backbones::Backbone,
    j: usize,
    conv: ErrorConvention,
) -> Result<f64> {
    let mut s = 0.0;
    for &(u, i) in batch {
        let y = frozen.observed.rating(u, i).ok_or_else(|| {
            CoreError::ContractViolation(format!("imputation batch contains unobserved cell ({u}, {i})"))
        })?;
        let e = conv.error(y, prediction.predict(u, i)?);
        let m = model.impute(u, i)?;
        s += (m - e) * (m - e) * frozen.inv_props[j][u * frozen.num_items + i];
    }
    Ok(s / batch.len() as f64)
}

fn validation_metric(
    ensemble: &ModelEnsemble,
    validation: &ValidationSet<'_>,
    positive_threshold: f64,
) -> Result<f64> {
    match validation {
        ValidationSet::Mar(ds) => {
            let mut scores = Vec::with_capacity(ds.observed.len());
            let mut labels = Vec::with_capacity(ds.observed.len());
            for &(u, i, r) in &ds.observed {
                scores.push(ensemble.prediction.predict(u, i)?);
                labels.push(r >= positive_threshold);
            }
            auc(&scores, &labels)
        }
        ValidationSet::HeldOutObserved(ds) => {
            let mut preds = Vec::with_capacity(ds.observed.len());
            let mut truths = Vec::with_capacity(ds.observed.len());
            for &(u, i, r) in &ds.observed {
                preds.push(ensemble.prediction.predict(u, i)?);
                truths.push(r);
            }
            Ok(-mse(&preds, &truths)?)
        }
    }
}
