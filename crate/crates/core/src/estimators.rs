//! The estimator family over a dataset: ideal, naive, EIB, IPS, SNIPS, DR,
//! and the multiple-robust estimator with its ridge-solved combination
//! coefficients, plus the Monte-Carlo bias oracle, best-linear-weight
//! projection, and the deviation tail bound.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, Optimizer};
use crate::data::{sample_observation_mask, ObservationMask, RatingDataset};
use crate::error::{CoreError, Result};
use crate::imputation::{ErrorConvention, ImputationModel};
use crate::propensity::PropensityModel;
use crate::rng::{derive_seed, rng_from_seed};

/// The (J+K)-vector (1/p_1, ..., 1/p_J, m_1, ..., m_K) for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Combination coefficients with solve diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaSolution {
    pub eta: Vec<f64>,
    pub lambda: f64,
    pub gram_condition_estimate: f64,
    /// Identifier of the batch the solve ran on.
    pub solved_on: String,
}

impl EtaSolution {
    pub fn l1_norm(&self) -> f64 {
        self.eta.iter().map(|v| v.abs()).sum()
    }
}

/// Monte-Carlo estimate of an estimator's bias against the ideal loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub estimator: String,
    pub mean_estimate: f64,
    pub ideal: f64,
    pub bias: f64,
    pub std_error: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Least-squares weights projecting a target onto a basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearWeights {
    pub weights: Vec<f64>,
    pub residual_norm: f64,
    /// The basis was rank-deficient; the minimum-norm solution was used.
    pub rank_deficient: bool,
}

/// J propensity models, K imputation models, and the backbone prediction
/// model. J >= 1 and K >= 1 are required at construction.
#[derive(Debug, Clone)]
pub struct ModelEnsemble {
    pub propensities: Vec<PropensityModel>,
    pub imputations: Vec<ImputationModel>,
    pub prediction: Backbone,
    pub prediction_opt: Optimizer,
}

impl ModelEnsemble {
    pub fn new(
        propensities: Vec<PropensityModel>,
        imputations: Vec<ImputationModel>,
        prediction: Backbone,
        learning_rate: f64,
    ) -> Result<Self> {
        if propensities.is_empty() || imputations.is_empty() {
            return Err(CoreError::ContractViolation(
                "ensemble requires at least one propensity and one imputation model".into(),
            ));
        }
        let n = prediction.num_params();
        Ok(ModelEnsemble {
            propensities,
            imputations,
            prediction,
            prediction_opt: Optimizer::adam(learning_rate, n),
        })
    }

    pub fn num_propensity(&self) -> usize {
        self.propensities.len()
    }

    pub fn num_imputation(&self) -> usize {
        self.imputations.len()
    }
}

/// Ordered feature vector for one cell; propensities are pre-clipped by the
/// models themselves.
pub fn build_feature_vector(
    ensemble: &ModelEnsemble,
    dataset: &RatingDataset,
    u: usize,
    i: usize,
) -> Result<FeatureVector> {
    let mut v = Vec::with_capacity(ensemble.num_propensity() + ensemble.num_imputation());
    for (j, p) in ensemble.propensities.iter().enumerate() {
        let est = p.estimate(dataset, u, i);
        let inv = 1.0 / est;
        if !inv.is_finite() {
            return Err(CoreError::NonFinite {
                context: "feature vector".into(),
                name: format!("propensity model {j} at ({u}, {i})"),
            });
        }
        v.push(inv);
    }
    for (k, m) in ensemble.imputations.iter().enumerate() {
        let imp = m.impute(u, i)?;
        if !imp.is_finite() {
            return Err(CoreError::NonFinite {
                context: "feature vector".into(),
                name: format!("imputation model {k} at ({u}, {i})"),
            });
        }
        v.push(imp);
    }
    Ok(FeatureVector(v))
}

/// Ridge solve eta = (sum u u^T + lambda I)^{-1} (sum u e) over the given
/// cells, via a dense symmetric positive-definite factorization. With
/// lambda = 0 a singular Gram matrix is reported as an error suggesting a
/// positive lambda.
pub fn solve_eta(features: &[FeatureVector], errors: &[f64], lambda: f64) -> Result<EtaSolution> {
    if features.is_empty() {
        return Err(CoreError::ContractViolation("eta solve needs at least one sample".into()));
    }
    if features.len() != errors.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} feature vectors vs {} errors",
            features.len(),
            errors.len()
        )));
    }
    if lambda < 0.0 {
        return Err(CoreError::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    let d = features[0].0.len();
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for (f, &e) in features.iter().zip(errors) {
        if f.0.len() != d {
            return Err(CoreError::ShapeMismatch("inconsistent feature lengths".into()));
        }
        for a in 0..d {
            rhs[a] += f.0[a] * e;
            for b in a..d {
                gram[(a, b)] += f.0[a] * f.0[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
        gram[(a, a)] += lambda;
    }
    let cond = condition_estimate(&gram);
    let chol = Cholesky::new(gram).ok_or(CoreError::SingularSystem)?;
    let eta = chol.solve(&rhs);
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::SingularSystem);
    }
    Ok(EtaSolution {
        eta: eta.as_slice().to_vec(),
        lambda,
        gram_condition_estimate: cond,
        solved_on: format!("batch[{}]", features.len()),
    })
}

fn condition_estimate(sym: &DMatrix<f64>) -> f64 {
    let eig = sym.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max).abs();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min).abs();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Dense per-cell inputs for estimator evaluation: true errors over all of
/// D, the J clipped inverse-propensity columns, and the K imputed-error
/// columns. This is the substrate for the loss formulas and the
/// Monte-Carlo oracle.
#[derive(Debug, Clone)]
pub struct CellData {
    pub num_cells: usize,
    /// e over every cell of D (requires ground truth).
    pub errors: Vec<f64>,
    /// J columns of 1/p_hat, pre-clipped.
    pub inv_propensities: Vec<Vec<f64>>,
    /// K columns of m_hat.
    pub imputed: Vec<Vec<f64>>,
    /// Sampling propensities for mask resampling, when known.
    pub true_propensities: Option<Vec<f64>>,
    pub num_users: usize,
    pub num_items: usize,
}

impl CellData {
    /// Materialize per-cell inputs from a synthetic dataset (full ratings
    /// required) and a fitted ensemble.
    pub fn from_models(
        dataset: &RatingDataset,
        ensemble: &ModelEnsemble,
        convention: ErrorConvention,
    ) -> Result<Self> {
        let full = dataset.full_ratings.as_ref().ok_or(CoreError::OracleUnavailable)?;
        let n = dataset.num_cells();
        let mut errors = vec![0.0; n];
        for u in 0..dataset.num_users {
            for i in 0..dataset.num_items {
                let c = dataset.cell(u, i);
                errors[c] = convention.error(full[c], ensemble.prediction.predict(u, i)?);
            }
        }
        let inv_propensities = ensemble
            .propensities
            .iter()
            .map(|p| {
                p.estimate_matrix(dataset)
                    .into_iter()
                    .map(|v| 1.0 / v)
                    .collect()
            })
            .collect();
        let mut imputed = Vec::with_capacity(ensemble.num_imputation());
        for m in &ensemble.imputations {
            let mut col = vec![0.0; n];
            for u in 0..dataset.num_users {
                for i in 0..dataset.num_items {
                    col[dataset.cell(u, i)] = m.impute(u, i)?;
                }
            }
            imputed.push(col);
        }
        Ok(CellData {
            num_cells: n,
            errors,
            inv_propensities,
            imputed,
            true_propensities: dataset.true_propensities.clone(),
            num_users: dataset.num_users,
            num_items: dataset.num_items,
        })
    }

    pub fn feature(&self, cell: usize) -> FeatureVector {
        let mut v = Vec::with_capacity(self.inv_propensities.len() + self.imputed.len());
        for col in &self.inv_propensities {
            v.push(col[cell]);
        }
        for col in &self.imputed {
            v.push(col[cell]);
        }
        FeatureVector(v)
    }

    pub fn ideal_loss(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.num_cells as f64
    }

    /// Mean error over the observed cells.
    pub fn naive_loss(&self, mask: &ObservationMask) -> Result<f64> {
        let mut s = 0.0;
        let mut n = 0usize;
        for (c, &e) in self.errors.iter().enumerate() {
            if mask.is_set(c) {
                s += e;
                n += 1;
            }
        }
        if n == 0 {
            return Err(CoreError::UndefinedEstimate("naive loss with an empty mask".into()));
        }
        Ok(s / n as f64)
    }

    /// |D|^{-1} sum [o e + (1 - o) m_k].
    pub fn eib_loss(&self, mask: &ObservationMask, k: usize) -> f64 {
        let m = &self.imputed[k];
        let mut s = 0.0;
        for c in 0..self.num_cells {
            s += if mask.is_set(c) { self.errors[c] } else { m[c] };
        }
        s / self.num_cells as f64
    }

    /// |D|^{-1} sum o e / p_j.
    pub fn ips_loss(&self, mask: &ObservationMask, j: usize) -> f64 {
        let invp = &self.inv_propensities[j];
        let mut s = 0.0;
        for c in 0..self.num_cells {
            if mask.is_set(c) {
                s += self.errors[c] * invp[c];
            }
        }
        s / self.num_cells as f64
    }

    /// (sum o e / p_j) / (sum o / p_j).
    pub fn snips_loss(&self, mask: &ObservationMask, j: usize) -> Result<f64> {
        let invp = &self.inv_propensities[j];
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..self.num_cells {
            if mask.is_set(c) {
                num += self.errors[c] * invp[c];
                den += invp[c];
            }
        }
        if den == 0.0 {
            return Err(CoreError::UndefinedEstimate("SNIPS with an empty mask".into()));
        }
        Ok(num / den)
    }

    /// |D|^{-1} sum [m_k + o (e - m_k) / p_j].
    pub fn dr_loss(&self, mask: &ObservationMask, j: usize, k: usize) -> f64 {
        let invp = &self.inv_propensities[j];
        let m = &self.imputed[k];
        let mut s = 0.0;
        for c in 0..self.num_cells {
            s += m[c];
            if mask.is_set(c) {
                s += (self.errors[c] - m[c]) * invp[c];
            }
        }
        s / self.num_cells as f64
    }

    /// Solve eta on the observed cells among `cells`.
    pub fn solve_eta_on(
        &self,
        cells: &[usize],
        mask: &ObservationMask,
        lambda: f64,
    ) -> Result<EtaSolution> {
        let mut feats = Vec::new();
        let mut errs = Vec::new();
        for &c in cells {
            if mask.is_set(c) {
                feats.push(self.feature(c));
                errs.push(self.errors[c]);
            }
        }
        if feats.is_empty() {
            return Err(CoreError::SparseData(
                "no observed cells in the eta batch".into(),
            ));
        }
        solve_eta(&feats, &errs, lambda)
    }

    /// |cells|^{-1} sum u^T eta.
    pub fn mr_loss(&self, cells: &[usize], eta: &EtaSolution) -> Result<f64> {
        let d = self.inv_propensities.len() + self.imputed.len();
        if eta.eta.len() != d {
            return Err(CoreError::ShapeMismatch(format!(
                "eta has length {}, ensemble has {} columns",
                eta.eta.len(),
                d
            )));
        }
        let mut s = 0.0;
        for &c in cells {
            s += dot(&self.feature(c).0, &eta.eta);
        }
        Ok(s / cells.len() as f64)
    }

    /// The rewriting |cells|^{-1} sum [o e / p_j + (1 - o / p_j) u^T eta],
    /// which agrees with `mr_loss` for every j when eta was solved with
    /// lambda = 0 on the same cells.
    pub fn mr_loss_alt(
        &self,
        cells: &[usize],
        mask: &ObservationMask,
        j: usize,
        eta: &EtaSolution,
    ) -> Result<f64> {
        let invp = &self.inv_propensities[j];
        let mut s = 0.0;
        for &c in cells {
            let u_eta = dot(&self.feature(c).0, &eta.eta);
            if mask.is_set(c) {
                s += self.errors[c] * invp[c] + (1.0 - invp[c]) * u_eta;
            } else {
                s += u_eta;
            }
        }
        Ok(s / cells.len() as f64)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ideal loss |D|^{-1} sum e over all cells; needs ground-truth ratings.
pub fn ideal_loss(
    dataset: &RatingDataset,
    prediction: &Backbone,
    convention: ErrorConvention,
) -> Result<f64> {
    let full = dataset.full_ratings.as_ref().ok_or(CoreError::OracleUnavailable)?;
    let mut s = 0.0;
    for u in 0..dataset.num_users {
        for i in 0..dataset.num_items {
            s += convention.error(full[dataset.cell(u, i)], prediction.predict(u, i)?);
        }
    }
    Ok(s / dataset.num_cells() as f64)
}

/// Which estimator a Monte-Carlo bias run probes. Indices refer to model
/// positions in the ensemble columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EstimatorSpec {
    Ideal,
    Naive,
    Eib { k: usize },
    Ips { j: usize },
    Snips { j: usize },
    Dr { j: usize, k: usize },
    /// Per trial, eta is refit on the observed cells of a uniform sub-batch
    /// covering `eta_fraction` of D; the loss is then evaluated over all of D.
    Mr { lambda: f64, eta_fraction: f64 },
}

impl EstimatorSpec {
    pub fn name(&self) -> String {
        match self {
            EstimatorSpec::Ideal => "ideal".into(),
            EstimatorSpec::Naive => "naive".into(),
            EstimatorSpec::Eib { k } => format!("eib[{k}]"),
            EstimatorSpec::Ips { j } => format!("ips[{j}]"),
            EstimatorSpec::Snips { j } => format!("snips[{j}]"),
            EstimatorSpec::Dr { j, k } => format!("dr[{j},{k}]"),
            EstimatorSpec::Mr { lambda, .. } => format!("mr[lambda={lambda}]"),
        }
    }
}

/// Resample the observation mask per trial, recompute the estimator, and
/// report its mean, bias against the ideal loss, and standard error.
pub fn monte_carlo_bias(
    spec: &EstimatorSpec,
    data: &CellData,
    trials: usize,
    seed: u64,
) -> Result<BiasReport> {
    if trials < 100 {
        return Err(CoreError::Domain(format!("need >= 100 trials, got {trials}")));
    }
    let props = data.true_propensities.as_ref().ok_or_else(|| {
        CoreError::ContractViolation("Monte-Carlo bias needs true propensities".into())
    })?;
    let ideal = data.ideal_loss();
    let mut values = Vec::with_capacity(trials);
    let mut failures = 0usize;
    let mut first_fail = None;
    for t in 0..trials {
        let trial_seed = derive_seed(seed, t as u64);
        let mask = sample_observation_mask(props, data.num_users, data.num_items, trial_seed)?;
        let v = evaluate_trial(spec, data, &mask, derive_seed(trial_seed, 0x51), ideal);
        match v {
            Ok(v) => values.push(v),
            Err(e) => {
                failures += 1;
                if first_fail.is_none() {
                    first_fail = Some((t, e.to_string()));
                }
            }
        }
    }
    if failures > 0 {
        let (first_trial, message) = first_fail.unwrap();
        return Err(CoreError::TrialFailures {
            failures,
            trials,
            first_trial,
            message,
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(BiasReport {
        estimator: spec.name(),
        mean_estimate: mean,
        ideal,
        bias: (mean - ideal).abs(),
        std_error: (var / n).sqrt(),
        trials,
        seed,
    })
}

fn evaluate_trial(
    spec: &EstimatorSpec,
    data: &CellData,
    mask: &ObservationMask,
    split_seed: u64,
    ideal: f64,
) -> Result<f64> {
    match spec {
        EstimatorSpec::Ideal => Ok(ideal),
        EstimatorSpec::Naive => data.naive_loss(mask),
        EstimatorSpec::Eib { k } => Ok(data.eib_loss(mask, *k)),
        EstimatorSpec::Ips { j } => Ok(data.ips_loss(mask, *j)),
        EstimatorSpec::Snips { j } => data.snips_loss(mask, *j),
        EstimatorSpec::Dr { j, k } => Ok(data.dr_loss(mask, *j, *k)),
        EstimatorSpec::Mr { lambda, eta_fraction } => {
            let mut order: Vec<usize> = (0..data.num_cells).collect();
            let mut rng = rng_from_seed(split_seed);
            use rand::Rng as _;
            for k in (1..order.len()).rev() {
                let j = rng.random_range(0..=k);
                order.swap(k, j);
            }
            let cut = ((data.num_cells as f64) * eta_fraction).round() as usize;
            let cut = cut.clamp(1, data.num_cells - 1);
            let (eta_cells, _) = order.split_at(cut);
            let eta = data.solve_eta_on(eta_cells, mask, *lambda)?;
            // The estimator averages u'eta over every cell of D; only the
            // eta fit is restricted to observed cells of the sub-batch.
            let all: Vec<usize> = (0..data.num_cells).collect();
            data.mr_loss(&all, &eta)
        }
    }
}

/// Least-squares weights minimizing ||target - sum w_j basis_j||_2. A
/// rank-deficient basis yields the minimum-norm solution, flagged in the
/// diagnostics.
pub fn best_linear_weights(target: &[f64], basis: &[Vec<f64>]) -> Result<LinearWeights> {
    if basis.is_empty() {
        return Err(CoreError::ContractViolation("empty basis".into()));
    }
    let n = target.len();
    for b in basis {
        if b.len() != n {
            return Err(CoreError::ShapeMismatch("basis vector length mismatch".into()));
        }
    }
    let a = DMatrix::from_fn(n, basis.len(), |r, c| basis[c][r]);
    let t = DVector::from_column_slice(target);
    let svd = a.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.iter().cloned().fold(0.0, f64::max).max(1.0);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let w = svd
        .solve(&t, tol)
        .map_err(|e| CoreError::Domain(format!("SVD solve failed: {e}")))?;
    let residual_norm = (&a * &w - &t).norm();
    Ok(LinearWeights {
        weights: w.as_slice().to_vec(),
        residual_norm,
        rank_deficient: rank < basis.len(),
    })
}

/// Deviation bound sqrt(log(2/delta) / (2 |D|)) * max(Gamma - 1, M) * ||eta||_1.
pub fn tail_bound(
    delta: f64,
    dataset_size: usize,
    gamma: f64,
    m_cap: f64,
    eta: &EtaSolution,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CoreError::Domain(format!("delta must be in (0,1), got {delta}")));
    }
    if gamma < 1.0 {
        return Err(CoreError::Domain(format!("gamma must be >= 1, got {gamma}")));
    }
    if dataset_size == 0 {
        return Err(CoreError::Domain("dataset size must be positive".into()));
    }
    Ok(((2.0 / delta).ln() / (2.0 * dataset_size as f64)).sqrt()
        * (gamma - 1.0).max(m_cap)
        * eta.l1_norm())
}

/// As `tail_bound` but first verifies the range preconditions on the
/// materialized columns, listing the violating cells.
pub fn tail_bound_checked(
    delta: f64,
    data: &CellData,
    gamma: f64,
    m_cap: f64,
    eta: &EtaSolution,
) -> Result<f64> {
    let mut violations = Vec::new();
    for (j, col) in data.inv_propensities.iter().enumerate() {
        for (c, &inv) in col.iter().enumerate() {
            // p >= 1/gamma <=> 1/p <= gamma
            if inv > gamma * (1.0 + 1e-12) {
                violations.push(format!("propensity model {j} cell {c}: 1/p = {inv}"));
            }
        }
    }
    for (k, col) in data.imputed.iter().enumerate() {
        for (c, &m) in col.iter().enumerate() {
            if m.abs() > m_cap / 2.0 + 1e-12 {
                violations.push(format!("imputation model {k} cell {c}: |m| = {}", m.abs()));
            }
        }
    }
    if !violations.is_empty() {
        let shown: Vec<_> = violations.iter().take(5).cloned().collect();
        return Err(CoreError::BoundInapplicable(format!(
            "{} violating cells, first: {}",
            violations.len(),
            shown.join("; ")
        )));
    }
    tail_bound(delta, data.num_cells, gamma, m_cap, eta)
}
