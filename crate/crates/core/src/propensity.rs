//! Candidate propensity models producing observation-probability estimates,
//! with clipping. Covers the naive Bayes estimator (with a MAR marginal or a
//! uniform one), the per-user frequency estimator, a constant model, and an
//! oracle over known true propensities.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::RatingDataset;
use crate::error::{CoreError, Result};

pub const DEFAULT_CLIP_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropensityKind {
    NaiveBayes,
    NaiveBayesUniform,
    UserFrequency,
    Constant,
    Oracle,
}

/// Naive Bayes tables over the integer rating levels of a scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayesTables {
    /// Rating values acting as categories, ascending.
    pub levels: Vec<f64>,
    /// P(o = 1).
    pub p_obs: f64,
    /// P(y = r | o = 1), indexed like `levels`.
    pub cond: Vec<f64>,
    /// P(y = r) marginal, indexed like `levels`.
    pub marginal: Vec<f64>,
    /// Whether the marginal was fixed to uniform rather than fit on a MAR sample.
    pub uniform_marginal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PropensityParams {
    NaiveBayes(NaiveBayesTables),
    /// Smoothed per-user observation rate, constant across items.
    UserFrequency { rates: Vec<f64> },
    Constant { value: f64 },
    /// Row-major |U|x|I| true propensities.
    Oracle { propensities: Vec<f64>, num_items: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub params: PropensityParams,
    pub clip_floor: f64,
}

impl PropensityModel {
    pub fn kind(&self) -> PropensityKind {
        match &self.params {
            PropensityParams::NaiveBayes(t) if t.uniform_marginal => PropensityKind::NaiveBayesUniform,
            PropensityParams::NaiveBayes(_) => PropensityKind::NaiveBayes,
            PropensityParams::UserFrequency { .. } => PropensityKind::UserFrequency,
            PropensityParams::Constant { .. } => PropensityKind::Constant,
            PropensityParams::Oracle { .. } => PropensityKind::Oracle,
        }
    }

    pub fn constant(value: f64, clip_floor: f64) -> Self {
        PropensityModel {
            params: PropensityParams::Constant { value },
            clip_floor,
        }
    }

    pub fn oracle(dataset: &RatingDataset, clip_floor: f64) -> Result<Self> {
        let props = dataset.true_propensities.clone().ok_or_else(|| {
            CoreError::ContractViolation("oracle propensity requires true propensities".into())
        })?;
        Ok(PropensityModel {
            params: PropensityParams::Oracle {
                propensities: props,
                num_items: dataset.num_items,
            },
            clip_floor,
        })
    }

    /// Directly supplied Bayes tables; used for hand-specified scenarios.
    pub fn naive_bayes_from_tables(tables: NaiveBayesTables, clip_floor: f64) -> Result<Self> {
        let check_dist = |dist: &[f64], name: &str| -> Result<()> {
            let s: f64 = dist.iter().sum();
            if dist.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (s - 1.0).abs() > 1e-9 {
                return Err(CoreError::Domain(format!("{name} is not a probability distribution")));
            }
            Ok(())
        };
        check_dist(&tables.cond, "conditional rating table")?;
        check_dist(&tables.marginal, "marginal rating table")?;
        if !(0.0..=1.0).contains(&tables.p_obs) {
            return Err(CoreError::Domain(format!("P(o=1) = {} outside [0,1]", tables.p_obs)));
        }
        Ok(PropensityModel {
            params: PropensityParams::NaiveBayes(tables),
            clip_floor,
        })
    }

    /// Clipped estimate for one cell. Naive Bayes kinds use the observed
    /// rating when the dataset has one at the cell; on unobserved cells
    /// they return the rating-marginal mixture sum_r P(y=r) p(o=1|y=r).
    pub fn estimate(&self, dataset: &RatingDataset, u: usize, i: usize) -> f64 {
        let raw = match &self.params {
            PropensityParams::NaiveBayes(t) => {
                let rating = dataset
                    .observed
                    .iter()
                    .find(|&&(pu, pi, _)| pu == u && pi == i)
                    .map(|&(_, _, r)| r);
                nb_estimate(t, rating)
            }
            PropensityParams::UserFrequency { rates } => rates[u],
            PropensityParams::Constant { value } => *value,
            PropensityParams::Oracle { propensities, num_items } => propensities[u * num_items + i],
        };
        raw.clamp(self.clip_floor, 1.0)
    }

    /// Clipped estimates for every cell, row-major. The observed-rating
    /// lookup is built once, so prefer this over per-cell `estimate` calls.
    pub fn estimate_matrix(&self, dataset: &RatingDataset) -> Vec<f64> {
        let n = dataset.num_cells();
        let mut out = vec![0.0; n];
        match &self.params {
            PropensityParams::NaiveBayes(t) => {
                let mix = nb_estimate(t, None);
                for v in out.iter_mut() {
                    *v = mix;
                }
                for &(u, i, r) in &dataset.observed {
                    out[dataset.cell(u, i)] = nb_estimate(t, Some(r));
                }
            }
            PropensityParams::UserFrequency { rates } => {
                for u in 0..dataset.num_users {
                    for i in 0..dataset.num_items {
                        out[u * dataset.num_items + i] = rates[u];
                    }
                }
            }
            PropensityParams::Constant { value } => {
                for v in out.iter_mut() {
                    *v = *value;
                }
            }
            PropensityParams::Oracle { propensities, .. } => {
                out.copy_from_slice(propensities);
            }
        }
        for v in out.iter_mut() {
            *v = v.clamp(self.clip_floor, 1.0);
        }
        out
    }

    /// Textual parameter dump; round-trips exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn nb_estimate(t: &NaiveBayesTables, rating: Option<f64>) -> f64 {
    match rating {
        Some(r) => {
            let k = nearest_level(&t.levels, r);
            t.cond[k] * t.p_obs / t.marginal[k]
        }
        None => t
            .marginal
            .iter()
            .zip(&t.cond)
            .map(|(&m, &c)| m * (c * t.p_obs / m))
            .sum(),
    }
}

fn nearest_level(levels: &[f64], r: f64) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (k, &l) in levels.iter().enumerate() {
        let d = (l - r).abs();
        if d < bd {
            bd = d;
            best = k;
        }
    }
    best
}

/// Integer rating levels of a scale, e.g. (1, 5) -> [1, 2, 3, 4, 5].
pub fn rating_levels(scale: (f64, f64)) -> Vec<f64> {
    let lo = scale.0.round() as i64;
    let hi = scale.1.round() as i64;
    (lo..=hi).map(|v| v as f64).collect()
}

fn level_counts(dataset: &RatingDataset, levels: &[f64]) -> Vec<usize> {
    let mut counts = vec![0usize; levels.len()];
    for &(_, _, r) in &dataset.observed {
        counts[nearest_level(levels, r)] += 1;
    }
    counts
}

/// Naive Bayes propensities: p(o=1|y=r) = P(y=r|o=1) P(o=1) / P(y=r), with
/// P(y=r|o=1) and P(o=1) from the MNAR training set and P(y=r) from a
/// missing-at-random sample. Laplace smoothing (pseudo-count 1) everywhere.
pub fn fit_naive_bayes(
    train: &RatingDataset,
    mar_sample: &RatingDataset,
    clip_floor: f64,
) -> Result<PropensityModel> {
    if mar_sample.observed.is_empty() {
        return Err(CoreError::MissingMarSample(
            "naive Bayes needs a MAR sample for the rating marginal".into(),
        ));
    }
    let levels = rating_levels(train.rating_scale);
    let tables = nb_tables(train, Some(mar_sample), &levels)?;
    PropensityModel::naive_bayes_from_tables(tables, clip_floor)
}

/// As `fit_naive_bayes` but with a uniform rating marginal P(y=r) = 1/R,
/// requiring no MAR sample.
pub fn fit_naive_bayes_uniform(train: &RatingDataset, clip_floor: f64) -> Result<PropensityModel> {
    let levels = rating_levels(train.rating_scale);
    let tables = nb_tables(train, None, &levels)?;
    PropensityModel::naive_bayes_from_tables(tables, clip_floor)
}

fn nb_tables(
    train: &RatingDataset,
    mar_sample: Option<&RatingDataset>,
    levels: &[f64],
) -> Result<NaiveBayesTables> {
    if train.observed.is_empty() {
        return Err(CoreError::ContractViolation("empty training set".into()));
    }
    let r = levels.len();
    let n_obs = train.observed.len();
    let p_obs = (n_obs as f64 + 1.0) / (train.num_cells() as f64 + 2.0);
    let cond: Vec<f64> = level_counts(train, levels)
        .iter()
        .map(|&c| (c as f64 + 1.0) / (n_obs as f64 + r as f64))
        .collect();
    let (marginal, uniform_marginal) = match mar_sample {
        Some(mar) => {
            let m = mar.observed.len();
            let marg: Vec<f64> = level_counts(mar, levels)
                .iter()
                .map(|&c| (c as f64 + 1.0) / (m as f64 + r as f64))
                .collect();
            (marg, false)
        }
        None => (vec![1.0 / r as f64; r], true),
    };
    Ok(NaiveBayesTables {
        levels: levels.to_vec(),
        p_obs,
        cond,
        marginal,
        uniform_marginal,
    })
}

/// Smoothed per-user observation rate: (count_u + 1) / (num_items + 2),
/// constant across items.
pub fn fit_user_frequency(train: &RatingDataset, clip_floor: f64) -> Result<PropensityModel> {
    if train.observed.is_empty() {
        return Err(CoreError::ContractViolation("empty training set".into()));
    }
    let mut counts = vec![0usize; train.num_users];
    for &(u, _, _) in &train.observed {
        counts[u] += 1;
    }
    let rates = counts
        .iter()
        .map(|&c| (c as f64 + 1.0) / (train.num_items as f64 + 2.0))
        .collect();
    Ok(PropensityModel {
        params: PropensityParams::UserFrequency { rates },
        clip_floor,
    })
}
