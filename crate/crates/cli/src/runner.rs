//! Pipeline execution: dataset -> ensemble -> training -> evaluation, one
//! run per seed, plus Monte-Carlo bias reports when ground truth exists.

use std::collections::BTreeMap;
use std::fmt;

use mrrec_core::backbones::weighted_update;
use mrrec_core::data::{generate_semi_synthetic, load_ratings, load_synthetic_dir, split_train_validation};
use mrrec_core::estimators::{monte_carlo_bias, CellData, EstimatorSpec};
use mrrec_core::eval::evaluate_model;
use mrrec_core::learning::{train, ValidationSet};
use mrrec_core::propensity::{fit_naive_bayes_uniform, fit_user_frequency};
use mrrec_core::rng::{derive_seed, rng_from_seed};
use mrrec_core::{
    Backbone, BiasLevelSpec, ErrorConvention, ImputationModel, ModelEnsemble, Optimizer,
    PropensityModel, RatingDataset, TrainConfig,
};
use rand::Rng as _;

use crate::config::{
    dataset_format, parse_metric_name, parse_propensity_name, ConfigError, DatasetSpec,
    ExperimentConfig, Method,
};
use crate::report::{ExperimentReport, MeanSd, MethodReport, SeedOutcome};

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Runtime(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "{e}"),
            RunError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

fn stage<T>(name: &str, r: mrrec_core::Result<T>) -> Result<T, RunError> {
    r.map_err(|e| RunError::Runtime(format!("{name}: {e}")))
}

pub struct LoadedData {
    pub train: RatingDataset,
    pub test: RatingDataset,
}

/// Materialize the configured dataset. Synthetic datasets carry ground
/// truth; the MAR test sample is carved from it deterministically.
pub fn load_dataset(config: &ExperimentConfig) -> Result<LoadedData, RunError> {
    match &config.dataset {
        DatasetSpec::File { train_path, test_path, format, rating_min, rating_max } => {
            let fmt = dataset_format(format)?;
            let mut train = stage("load train file", load_ratings(train_path, fmt))?;
            let mut test = stage("load test file", load_ratings(test_path, fmt))?;
            train.rating_scale = (*rating_min, *rating_max);
            test.rating_scale = (*rating_min, *rating_max);
            // the two matrices may disagree on trailing empty users/items
            let nu = train.num_users.max(test.num_users);
            let ni = train.num_items.max(test.num_items);
            train = stage(
                "align shapes",
                RatingDataset::new(nu, ni, train.observed, train.rating_scale, None, None),
            )?;
            test = stage(
                "align shapes",
                RatingDataset::new(nu, ni, test.observed, test.rating_scale, None, None),
            )?;
            Ok(LoadedData { train, test })
        }
        DatasetSpec::Synthetic {
            num_users,
            num_items,
            base_density,
            bias_level,
            exposure_rate,
            base_seed,
            mar_rate,
        } => {
            let base = synthetic_base(*num_users, *num_items, *base_density, *base_seed);
            let spec = stage(
                "bias level",
                BiasLevelSpec::for_level(*bias_level, *exposure_rate),
            )?;
            let synth = stage(
                "semi-synthetic generation",
                generate_semi_synthetic(&base, &spec, derive_seed(*base_seed, 0xda7a)),
            )?;
            let test = mar_sample(&synth, *mar_rate, derive_seed(*base_seed, 0x7e57))?;
            Ok(LoadedData { train: synth, test })
        }
        DatasetSpec::SyntheticDir { path } => {
            let synth = stage("load synthetic dir", load_synthetic_dir(path))?;
            let test = mar_sample(&synth, 0.1, 0x7e57)?;
            Ok(LoadedData { train: synth, test })
        }
    }
}

/// Deterministic MNAR base sample used when synthesizing from scratch:
/// block-structured ratings observed with the requested density.
pub fn synthetic_base(num_users: usize, num_items: usize, density: f64, seed: u64) -> RatingDataset {
    let mut rng = rng_from_seed(seed);
    let mut obs = Vec::new();
    for u in 0..num_users {
        for i in 0..num_items {
            if rng.random::<f64>() < density {
                let center = 1.0 + 4.0 * ((u % 5) as f64 / 4.0) * ((i % 3) as f64 / 2.0);
                let r = (center + rng.random_range(-1.0..1.0)).clamp(1.0, 5.0).round();
                obs.push((u, i, r));
            }
        }
    }
    RatingDataset::new(num_users, num_items, obs, (1.0, 5.0), None, None)
        .expect("base generation is in-bounds")
}

fn mar_sample(synth: &RatingDataset, rate: f64, seed: u64) -> Result<RatingDataset, RunError> {
    let full = synth
        .full_ratings
        .as_ref()
        .ok_or_else(|| RunError::Runtime("MAR sampling needs ground-truth ratings".into()))?;
    let mut rng = rng_from_seed(seed);
    let obs: Vec<_> = (0..synth.num_cells())
        .filter(|_| rng.random::<f64>() < rate)
        .map(|c| {
            let r = full[c].round().clamp(synth.rating_scale.0, synth.rating_scale.1);
            (c / synth.num_items, c % synth.num_items, r)
        })
        .collect();
    stage(
        "mar sample",
        RatingDataset::new(synth.num_users, synth.num_items, obs, synth.rating_scale, None, None),
    )
}

fn build_propensities(
    names: &[String],
    train_ds: &RatingDataset,
    clip_floor: f64,
) -> Result<Vec<PropensityModel>, RunError> {
    names
        .iter()
        .map(|name| match name.as_str() {
            "naive_bayes_uniform" => {
                stage("fit naive bayes", fit_naive_bayes_uniform(train_ds, clip_floor))
            }
            "user_frequency" => stage("fit user frequency", fit_user_frequency(train_ds, clip_floor)),
            "oracle" => stage("oracle propensities", PropensityModel::oracle(train_ds, clip_floor)),
            other => {
                let c = parse_propensity_name(other)?
                    .ok_or_else(|| RunError::Runtime(format!("unsupported estimator {other:?}")))?;
                Ok(PropensityModel::constant(c, clip_floor))
            }
        })
        .collect()
}

fn build_backbone(config: &ExperimentConfig, nu: usize, ni: usize, seed: u64) -> Result<Backbone, RunError> {
    Ok(match config.backbone.kind.as_str() {
        "mf" => Backbone::new_mf(nu, ni, config.backbone.dim, seed),
        "neural" => Backbone::new_neural(nu, ni, config.backbone.dim, config.backbone.hidden, seed),
        k => return Err(RunError::Runtime(format!("unknown backbone kind {k:?}"))),
    })
}

/// Weighted SGD on the observed ratings, the shared engine behind the
/// non-MR methods. `extra` supplies pseudo-labelled cells per epoch.
fn fit_weighted(
    model: &mut Backbone,
    train_ds: &RatingDataset,
    weights: &[f64],
    epochs: usize,
    lr: f64,
    seed: u64,
    mut extra: impl FnMut(&Backbone, &mut dyn rand::RngCore) -> Vec<(usize, usize, f64, f64)>,
) -> Result<(), RunError> {
    let mut opt = Optimizer::adam(lr, model.num_params());
    let n = train_ds.observed.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(derive_seed(seed, 0x50d));
    for _ in 0..epochs {
        for k in (1..n).rev() {
            let j = rng.random_range(0..=k);
            order.swap(k, j);
        }
        for chunk in order.chunks(128) {
            let mut batch: Vec<(usize, usize, f64, f64)> = chunk
                .iter()
                .map(|&k| {
                    let (u, i, r) = train_ds.observed[k];
                    (u, i, r, weights[k])
                })
                .collect();
            batch.extend(extra(model, &mut rng));
            stage("sgd step", weighted_update(model, &batch, &mut opt))?;
        }
    }
    Ok(())
}

/// Pretrain a rating imputer (plain MF on the observed ratings) backing the
/// error-imputation-based and doubly robust baselines.
fn fit_rating_imputer(
    config: &ExperimentConfig,
    train_ds: &RatingDataset,
    seed: u64,
) -> Result<Backbone, RunError> {
    let mut m = build_backbone(config, train_ds.num_users, train_ds.num_items, derive_seed(seed, 0x1337))?;
    let w = vec![1.0; train_ds.observed.len()];
    fit_weighted(
        &mut m,
        train_ds,
        &w,
        config.train.epochs,
        config.train.learning_rate,
        derive_seed(seed, 0x13),
        |_, _| Vec::new(),
    )?;
    Ok(m)
}

/// Train one prediction model with the configured method.
pub fn fit_method(
    config: &ExperimentConfig,
    method: Method,
    data: &LoadedData,
    validation: &RatingDataset,
    seed: u64,
) -> Result<(Backbone, Option<ModelEnsemble>, Option<usize>), RunError> {
    let train_ds = &data.train;
    let (nu, ni) = (train_ds.num_users, train_ds.num_items);
    let t = &config.train;
    match method {
        Method::Naive => {
            let mut m = build_backbone(config, nu, ni, seed)?;
            let w = vec![1.0; train_ds.observed.len()];
            fit_weighted(&mut m, train_ds, &w, t.epochs, t.learning_rate, seed, |_, _| Vec::new())?;
            Ok((m, None, None))
        }
        Method::Ips | Method::Snips => {
            let props =
                build_propensities(&config.ensemble.propensities, train_ds, config.ensemble.clip_floor)?;
            let p0 = props
                .first()
                .ok_or_else(|| RunError::Runtime("ips needs a propensity estimator".into()))?;
            let mut w: Vec<f64> = train_ds
                .observed
                .iter()
                .map(|&(u, i, _)| 1.0 / p0.estimate(train_ds, u, i))
                .collect();
            if method == Method::Snips {
                let mean = w.iter().sum::<f64>() / w.len() as f64;
                for v in &mut w {
                    *v /= mean;
                }
            }
            let mut m = build_backbone(config, nu, ni, seed)?;
            fit_weighted(&mut m, train_ds, &w, t.epochs, t.learning_rate, seed, |_, _| Vec::new())?;
            Ok((m, None, None))
        }
        Method::Eib => {
            let imputer = fit_rating_imputer(config, train_ds, seed)?;
            let mask = train_ds.observed_mask();
            let num_cells = train_ds.num_cells();
            let mut m = build_backbone(config, nu, ni, seed)?;
            let w = vec![1.0; train_ds.observed.len()];
            fit_weighted(&mut m, train_ds, &w, t.epochs, t.learning_rate, seed, |_, rng| {
                // as many pseudo-labelled unobserved cells as the chunk size
                (0..128)
                    .filter_map(|_| {
                        let c = rng.random_range(0..num_cells as u64) as usize;
                        if mask.is_set(c) {
                            return None;
                        }
                        let (u, i) = (c / ni, c % ni);
                        let pseudo = imputer.predict(u, i).ok()?;
                        Some((u, i, pseudo, 1.0))
                    })
                    .collect()
            })?;
            Ok((m, None, None))
        }
        Method::Dr | Method::DrJointOff => {
            let props =
                build_propensities(&config.ensemble.propensities, train_ds, config.ensemble.clip_floor)?;
            let p0 = props
                .first()
                .ok_or_else(|| RunError::Runtime("dr needs a propensity estimator".into()))?;
            let mut imputer = fit_rating_imputer(config, train_ds, seed)?;
            let inv_w: Vec<f64> = train_ds
                .observed
                .iter()
                .map(|&(u, i, _)| 1.0 / p0.estimate(train_ds, u, i))
                .collect();
            let mask = train_ds.observed_mask();
            let num_cells = train_ds.num_cells();
            let mut m = build_backbone(config, nu, ni, seed)?;
            let joint = method == Method::Dr;
            for epoch in 0..t.epochs {
                // per-cell DR objective on ratings:
                // (f - m)^2 + o ((f - y)^2 - (f - m)^2) / p_hat
                let epoch_seed = derive_seed(seed, 0xd6 + epoch as u64);
                let mut batch: Vec<(usize, usize, f64, f64)> = Vec::new();
                for (k, &(u, i, r)) in train_ds.observed.iter().enumerate() {
                    let pseudo = stage("imputer", imputer.predict(u, i))?;
                    batch.push((u, i, r, inv_w[k]));
                    batch.push((u, i, pseudo, 1.0 - inv_w[k]));
                }
                let mut rng = rng_from_seed(epoch_seed);
                for _ in 0..train_ds.observed.len() {
                    let c = rng.random_range(0..num_cells as u64) as usize;
                    if mask.is_set(c) {
                        continue;
                    }
                    let (u, i) = (c / ni, c % ni);
                    batch.push((u, i, stage("imputer", imputer.predict(u, i))?, 1.0));
                }
                let mut opt_step = Optimizer::adam(t.learning_rate, m.num_params());
                for chunk in batch.chunks(256) {
                    stage("dr step", weighted_update(&mut m, chunk, &mut opt_step))?;
                }
                if joint {
                    // one corrective epoch keeps the imputer aligned with
                    // the observed residuals as the predictor moves
                    let w = vec![1.0; train_ds.observed.len()];
                    fit_weighted(
                        &mut imputer,
                        train_ds,
                        &w,
                        1,
                        t.learning_rate * 0.5,
                        derive_seed(epoch_seed, 1),
                        |_, _| Vec::new(),
                    )?;
                }
            }
            Ok((m, None, None))
        }
        Method::Mr => {
            let props =
                build_propensities(&config.ensemble.propensities, train_ds, config.ensemble.clip_floor)?;
            let imputations: Vec<ImputationModel> = config
                .ensemble
                .imputation_dims
                .iter()
                .enumerate()
                .map(|(k, &d)| {
                    ImputationModel::new(
                        Backbone::new_mf(nu, ni, d, derive_seed(seed, 0x100 + k as u64)),
                        0.01,
                    )
                })
                .collect();
            let prediction = build_backbone(config, nu, ni, seed)?;
            let mut ensemble = stage(
                "ensemble",
                ModelEnsemble::new(props, imputations, prediction, t.learning_rate),
            )?;
            let tc = TrainConfig {
                lambda: t.lambda,
                batch_size_eta: t.batch_size_eta,
                batch_size_pred: t.batch_size_pred,
                batch_size_imputation: t.batch_size_imputation,
                max_rounds: t.max_rounds,
                early_stop_patience: t.early_stop_patience,
                seed,
                positive_threshold: t.positive_threshold,
                ..TrainConfig::default()
            };
            let trace = stage(
                "mr training",
                train(&tc, train_ds, &ValidationSet::Mar(validation), &mut ensemble),
            )?;
            let prediction = ensemble.prediction.clone();
            Ok((prediction, Some(ensemble), trace.best_round))
        }
    }
}

fn estimator_spec_for(method: Method, lambda: f64) -> EstimatorSpec {
    match method {
        Method::Naive => EstimatorSpec::Naive,
        Method::Eib => EstimatorSpec::Eib { k: 0 },
        Method::Ips => EstimatorSpec::Ips { j: 0 },
        Method::Snips => EstimatorSpec::Snips { j: 0 },
        Method::Dr | Method::DrJointOff => EstimatorSpec::Dr { j: 0, k: 0 },
        Method::Mr => EstimatorSpec::Mr { lambda, eta_fraction: 0.5 },
    }
}

fn metric_values(
    result: &mrrec_core::EvalResult,
    metrics: &[String],
) -> Result<BTreeMap<String, f64>, RunError> {
    let mut out = BTreeMap::new();
    for name in metrics {
        let v = match name.as_str() {
            "mse" => result.mse,
            "auc" => result.auc,
            _ => {
                let k = parse_metric_name(name)?
                    .ok_or_else(|| RunError::Runtime(format!("metric {name:?}")))?;
                *result
                    .ndcg_at_k
                    .get(&k)
                    .ok_or_else(|| RunError::Runtime(format!("missing ndcg@{k}")))?
            }
        };
        out.insert(name.clone(), v);
    }
    Ok(out)
}

/// Run the configured method across all seeds and aggregate.
pub fn run_method(
    config: &ExperimentConfig,
    method: Method,
    level: Option<u8>,
    data: &LoadedData,
) -> Result<MethodReport, RunError> {
    let ks: Vec<usize> = config
        .metrics
        .iter()
        .filter_map(|m| parse_metric_name(m).ok().flatten())
        .collect();
    let mut per_seed = Vec::new();
    let mut trained_ensemble = None;
    for &seed in &config.seeds {
        let (val, test) = stage(
            "validation split",
            split_train_validation(&data.test, config.train.validation_fraction, derive_seed(seed, 0xa1)),
        )?;
        let (model, ensemble, best_round) = fit_method(config, method, data, &val, seed)?;
        let result = stage(
            "evaluation",
            evaluate_model(&model, &test, &ks, config.train.positive_threshold),
        )?;
        per_seed.push(SeedOutcome {
            seed,
            metrics: metric_values(&result, &config.metrics)?,
            best_round,
        });
        if ensemble.is_some() {
            trained_ensemble = ensemble;
        }
    }
    let aggregate = aggregate(&per_seed);

    // bias oracle against synthetic ground truth when it exists
    let mut bias = Vec::new();
    if data.train.full_ratings.is_some() && data.train.true_propensities.is_some() {
        let ensemble = match trained_ensemble {
            Some(e) => e,
            None => {
                let props = build_propensities(
                    &config.ensemble.propensities,
                    &data.train,
                    config.ensemble.clip_floor,
                )?;
                let imputations: Vec<ImputationModel> = config
                    .ensemble
                    .imputation_dims
                    .iter()
                    .map(|&d| {
                        let mut b = Backbone::new_mf(data.train.num_users, data.train.num_items, d, 1);
                        b.params_mut()[0] = 1.0; // nonzero constant column
                        ImputationModel::new(b, 0.01)
                    })
                    .collect();
                let prediction = build_backbone(config, data.train.num_users, data.train.num_items, 0)?;
                stage("ensemble", ModelEnsemble::new(props, imputations, prediction, 0.01))?
            }
        };
        let cells = stage(
            "cell data",
            CellData::from_models(&data.train, &ensemble, ErrorConvention::Squared),
        )?;
        let spec = estimator_spec_for(method, config.train.lambda);
        bias.push(stage(
            "bias oracle",
            monte_carlo_bias(&spec, &cells, config.bias_trials.max(100), derive_seed(config.seeds[0], 0xb1a5)),
        )?);
    }

    Ok(MethodReport {
        method: method.name().to_string(),
        bias_level: level,
        lambda: if method == Method::Mr { Some(config.train.lambda) } else { None },
        per_seed,
        aggregate,
        bias,
    })
}

fn aggregate(per_seed: &[SeedOutcome]) -> BTreeMap<String, MeanSd> {
    let mut out = BTreeMap::new();
    if per_seed.is_empty() {
        return out;
    }
    for name in per_seed[0].metrics.keys() {
        let vals: Vec<f64> = per_seed.iter().map(|s| s.metrics[name]).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        out.insert(name.clone(), MeanSd { mean, sd: var.sqrt() });
    }
    out
}

/// Single-method experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, RunError> {
    let data = load_dataset(config)?;
    let row = run_method(config, config.method, dataset_level(config), &data)?;
    Ok(ExperimentReport {
        config_toml: config.canonical_toml(),
        config_hash: config.content_hash(),
        rows: vec![row],
        metrics: config.metrics.clone(),
    })
}

fn dataset_level(config: &ExperimentConfig) -> Option<u8> {
    match config.dataset {
        DatasetSpec::Synthetic { bias_level, .. } => Some(bias_level),
        _ => None,
    }
}

/// Expand the sweep axes (methods x bias levels x lambdas) and run each
/// grid point with the shared seed list.
pub fn run_sweep(config: &ExperimentConfig) -> Result<ExperimentReport, RunError> {
    let sweep = config.sweep.clone().unwrap_or_default();
    let methods = if sweep.methods.is_empty() { vec![config.method] } else { sweep.methods.clone() };
    let lambdas = if sweep.lambdas.is_empty() { vec![config.train.lambda] } else { sweep.lambdas.clone() };
    let levels: Vec<Option<u8>> = if sweep.bias_levels.is_empty() {
        vec![None]
    } else {
        sweep.bias_levels.iter().map(|&l| Some(l)).collect()
    };

    let mut rows = Vec::new();
    for level in &levels {
        let mut level_config = config.clone();
        if let (Some(l), DatasetSpec::Synthetic { bias_level, .. }) =
            (level, &mut level_config.dataset)
        {
            *bias_level = *l;
        } else if level.is_some() {
            return Err(RunError::Config(ConfigError::Invalid(
                "bias_levels sweep requires a synthetic dataset".into(),
            )));
        }
        let data = load_dataset(&level_config)?;
        for &method in &methods {
            let grid = if method == Method::Mr { lambdas.clone() } else { vec![config.train.lambda] };
            for lambda in grid {
                let mut point = level_config.clone();
                point.train.lambda = lambda;
                rows.push(run_method(&point, method, (*level).or(dataset_level(config)), &data)?);
            }
        }
    }
    Ok(ExperimentReport {
        config_toml: config.canonical_toml(),
        config_hash: config.content_hash(),
        rows,
        metrics: config.metrics.clone(),
    })
}
