//! Datasets with missing-not-at-random observation patterns: loading real
//! rating files, semi-synthetic generation with a controllable exposure-bias
//! knob, and observation-mask sampling from known propensities.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbones::{weighted_update, Backbone, Optimizer};
use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// On-disk format of a plain rating file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatingFormat {
    /// Whitespace-separated |U|x|I| integer matrix, one row per user,
    /// 0 = unobserved (the Coat convention).
    CoatAscii,
    /// `user<TAB>item<TAB>rating` lines, 0-based indices.
    TripletTsv,
}

/// Sparse observed ratings with user/item indexing, plus optional ground
/// truth (full rating matrix, true propensities) for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingDataset {
    pub num_users: usize,
    pub num_items: usize,
    /// (user, item, rating) with each cell appearing at most once.
    pub observed: Vec<(usize, usize, f64)>,
    pub rating_scale: (f64, f64),
    /// Row-major |U|x|I| true ratings, present for synthetic data.
    pub full_ratings: Option<Vec<f64>>,
    /// Row-major |U|x|I| observation probabilities in (0, 1].
    pub true_propensities: Option<Vec<f64>>,
}

impl RatingDataset {
    pub fn new(
        num_users: usize,
        num_items: usize,
        observed: Vec<(usize, usize, f64)>,
        rating_scale: (f64, f64),
        full_ratings: Option<Vec<f64>>,
        true_propensities: Option<Vec<f64>>,
    ) -> Result<Self> {
        let ds = RatingDataset {
            num_users,
            num_items,
            observed,
            rating_scale,
            full_ratings,
            true_propensities,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_cells();
        let mut seen = vec![false; n];
        for &(u, i, _) in &self.observed {
            if u >= self.num_users || i >= self.num_items {
                return Err(CoreError::IndexOutOfBounds {
                    user: u,
                    item: i,
                    num_users: self.num_users,
                    num_items: self.num_items,
                });
            }
            let c = self.cell(u, i);
            if seen[c] {
                return Err(CoreError::DuplicateCell { user: u, item: i });
            }
            seen[c] = true;
        }
        if let Some(p) = &self.true_propensities {
            if p.len() != n {
                return Err(CoreError::ShapeMismatch(format!(
                    "propensity matrix has {} entries, expected {}",
                    p.len(),
                    n
                )));
            }
            for (c, &v) in p.iter().enumerate() {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(CoreError::ProbabilityDomain {
                        user: c / self.num_items,
                        item: c % self.num_items,
                        value: v,
                    });
                }
            }
        }
        if let Some(f) = &self.full_ratings {
            if f.len() != n {
                return Err(CoreError::ShapeMismatch(format!(
                    "full rating matrix has {} entries, expected {}",
                    f.len(),
                    n
                )));
            }
            for &(u, i, r) in &self.observed {
                let truth = f[self.cell(u, i)];
                if (truth - r).abs() > 1e-12 {
                    return Err(CoreError::ContractViolation(format!(
                        "observed rating {r} at ({u}, {i}) disagrees with full matrix entry {truth}"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        self.num_users * self.num_items
    }

    #[inline]
    pub fn cell(&self, u: usize, i: usize) -> usize {
        u * self.num_items + i
    }

    pub fn density(&self) -> f64 {
        self.observed.len() as f64 / self.num_cells() as f64
    }

    pub fn full_rating(&self, u: usize, i: usize) -> Option<f64> {
        self.full_ratings.as_ref().map(|f| f[self.cell(u, i)])
    }

    /// Build a cell -> rating lookup over the observed entries.
    pub fn observed_index(&self) -> ObservedIndex {
        let mut map = HashMap::with_capacity(self.observed.len());
        for &(u, i, r) in &self.observed {
            map.insert(self.cell(u, i), r);
        }
        ObservedIndex {
            num_items: self.num_items,
            map,
        }
    }

    /// Mask with exactly the observed cells set.
    pub fn observed_mask(&self) -> ObservationMask {
        let mut bits = vec![false; self.num_cells()];
        for &(u, i, _) in &self.observed {
            bits[self.cell(u, i)] = true;
        }
        ObservationMask {
            num_users: self.num_users,
            num_items: self.num_items,
            bits,
            seed: 0,
        }
    }
}

/// Fast (user, item) -> rating lookup for the observed set.
#[derive(Debug, Clone)]
pub struct ObservedIndex {
    num_items: usize,
    map: HashMap<usize, f64>,
}

impl ObservedIndex {
    pub fn rating(&self, u: usize, i: usize) -> Option<f64> {
        self.map.get(&(u * self.num_items + i)).copied()
    }

    pub fn rating_at_cell(&self, cell: usize) -> Option<f64> {
        self.map.get(&cell).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Bernoulli observation indicators over all |U|x|I| cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask {
    pub num_users: usize,
    pub num_items: usize,
    pub bits: Vec<bool>,
    pub seed: u64,
}

impl ObservationMask {
    #[inline]
    pub fn is_set(&self, cell: usize) -> bool {
        self.bits[cell]
    }

    pub fn cardinality(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Knob controlling how strongly exposure depends on the underlying rating
/// in semi-synthetic generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasLevelSpec {
    /// 1, 2, or 3.
    pub level: u8,
    /// Logistic tilt applied to centered ratings; larger = sharper bias.
    pub exposure_sharpness: f64,
    /// Target expected density |O|/|D| of the generated dataset.
    pub base_exposure_rate: f64,
}

impl BiasLevelSpec {
    /// Sharpness grows strictly with the level; the exposure rate is the
    /// target density (typically the base dataset's own density).
    pub fn for_level(level: u8, base_exposure_rate: f64) -> Result<Self> {
        let exposure_sharpness = match level {
            1 => 0.8,
            2 => 2.0,
            3 => 4.5,
            _ => return Err(CoreError::Domain(format!("bias level must be 1..=3, got {level}"))),
        };
        if !(base_exposure_rate > 0.0 && base_exposure_rate < 1.0) {
            return Err(CoreError::Domain(format!(
                "base exposure rate must be in (0,1), got {base_exposure_rate}"
            )));
        }
        Ok(BiasLevelSpec {
            level,
            exposure_sharpness,
            base_exposure_rate,
        })
    }
}

/// Load a rating file. Scale is inferred from the observed values.
pub fn load_ratings(path: &Path, format: RatingFormat) -> Result<RatingDataset> {
    let text = fs::read_to_string(path)?;
    parse_ratings(&text, format)
}

pub fn parse_ratings(text: &str, format: RatingFormat) -> Result<RatingDataset> {
    match format {
        RatingFormat::CoatAscii => parse_coat_ascii(text),
        RatingFormat::TripletTsv => parse_triplet_tsv(text),
    }
}

fn parse_coat_ascii(text: &str) -> Result<RatingDataset> {
    let mut observed = Vec::new();
    let mut num_items = 0usize;
    let mut num_users = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<i64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<i64>().map_err(|e| CoreError::Parse {
                    line: lineno + 1,
                    message: format!("bad integer `{tok}`: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if num_users == 0 {
            num_items = row.len();
        } else if row.len() != num_items {
            return Err(CoreError::Parse {
                line: lineno + 1,
                message: format!("row has {} columns, expected {}", row.len(), num_items),
            });
        }
        for (i, &v) in row.iter().enumerate() {
            if v != 0 {
                observed.push((num_users, i, v as f64));
            }
        }
        num_users += 1;
    }
    let scale = inferred_scale(&observed);
    RatingDataset::new(num_users, num_items, observed, scale, None, None)
}

fn parse_triplet_tsv(text: &str) -> Result<RatingDataset> {
    let mut observed = Vec::new();
    let mut max_u = 0usize;
    let mut max_i = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(CoreError::Parse {
                line: lineno + 1,
                message: format!("expected 3 tab-separated fields, got {}", parts.len()),
            });
        }
        let u: usize = parts[0].trim().parse().map_err(|e| CoreError::Parse {
            line: lineno + 1,
            message: format!("bad user index `{}`: {e}", parts[0]),
        })?;
        let i: usize = parts[1].trim().parse().map_err(|e| CoreError::Parse {
            line: lineno + 1,
            message: format!("bad item index `{}`: {e}", parts[1]),
        })?;
        let r: f64 = parts[2].trim().parse().map_err(|e| CoreError::Parse {
            line: lineno + 1,
            message: format!("bad rating `{}`: {e}", parts[2]),
        })?;
        max_u = max_u.max(u);
        max_i = max_i.max(i);
        observed.push((u, i, r));
    }
    if observed.is_empty() {
        return Err(CoreError::Parse {
            line: 0,
            message: "no ratings in file".into(),
        });
    }
    // Canonical cell order so the same triplet set loads identically
    // regardless of line order.
    observed.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let scale = inferred_scale(&observed);
    RatingDataset::new(max_u + 1, max_i + 1, observed, scale, None, None)
}

fn inferred_scale(observed: &[(usize, usize, f64)]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(_, _, r) in observed {
        lo = lo.min(r);
        hi = hi.max(r);
    }
    if observed.is_empty() {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

/// Write a dataset back out in the given format.
pub fn save_ratings(dataset: &RatingDataset, path: &Path, format: RatingFormat) -> Result<()> {
    let mut out = String::new();
    match format {
        RatingFormat::CoatAscii => {
            let idx = dataset.observed_index();
            for u in 0..dataset.num_users {
                for i in 0..dataset.num_items {
                    if i > 0 {
                        out.push(' ');
                    }
                    let v = idx.rating(u, i).unwrap_or(0.0);
                    let _ = write!(out, "{}", v as i64);
                }
                out.push('\n');
            }
        }
        RatingFormat::TripletTsv => {
            for &(u, i, r) in &dataset.observed {
                let _ = writeln!(out, "{u}\t{i}\t{r}");
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Deterministically partition the observed entries into train and
/// validation parts; the validation share is round(fraction * |O|).
pub fn split_train_validation(
    dataset: &RatingDataset,
    fraction: f64,
    seed: u64,
) -> Result<(RatingDataset, RatingDataset)> {
    let n = dataset.observed.len();
    if n < 2 {
        return Err(CoreError::InvalidSplit("need at least 2 observed entries".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CoreError::InvalidSplit(format!("fraction {fraction} not in (0,1)")));
    }
    let val_size = (fraction * n as f64).round() as usize;
    if val_size == 0 || val_size == n {
        return Err(CoreError::InvalidSplit(format!(
            "fraction {fraction} yields an empty split for {n} entries"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed);
    // Fisher-Yates
    for k in (1..n).rev() {
        let j = rng.random_range(0..=k);
        order.swap(k, j);
    }
    let mut val: Vec<_> = order[..val_size].iter().map(|&k| dataset.observed[k]).collect();
    let mut train: Vec<_> = order[val_size..].iter().map(|&k| dataset.observed[k]).collect();
    val.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    train.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mk = |obs: Vec<(usize, usize, f64)>| {
        RatingDataset::new(
            dataset.num_users,
            dataset.num_items,
            obs,
            dataset.rating_scale,
            dataset.full_ratings.clone(),
            dataset.true_propensities.clone(),
        )
    };
    Ok((mk(train)?, mk(val)?))
}

/// Sample each cell independently with its propensity.
pub fn sample_observation_mask(
    true_propensities: &[f64],
    num_users: usize,
    num_items: usize,
    seed: u64,
) -> Result<ObservationMask> {
    if true_propensities.len() != num_users * num_items {
        return Err(CoreError::ShapeMismatch(format!(
            "propensity matrix has {} entries, expected {}",
            true_propensities.len(),
            num_users * num_items
        )));
    }
    for (c, &p) in true_propensities.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(CoreError::ProbabilityDomain {
                user: c / num_items,
                item: c % num_items,
                value: p,
            });
        }
    }
    let mut rng = rng_from_seed(seed);
    let bits = true_propensities
        .iter()
        .map(|&p| rng.random::<f64>() < p)
        .collect();
    Ok(ObservationMask {
        num_users,
        num_items,
        bits,
        seed,
    })
}

/// Complete the base dataset with a low-rank fit, tilt exposure
/// logistically on the true rating, rescale to the target density, and
/// sample one observation set.
pub fn generate_semi_synthetic(
    base: &RatingDataset,
    spec: &BiasLevelSpec,
    seed: u64,
) -> Result<RatingDataset> {
    let distinct = {
        let mut vals: Vec<i64> = base.observed.iter().map(|&(_, _, r)| (r * 1e6) as i64).collect();
        vals.sort_unstable();
        vals.dedup();
        vals.len()
    };
    if distinct < 2 {
        return Err(CoreError::DegenerateGeneration(
            "base dataset has a single rating value; exposure tilt would be constant".into(),
        ));
    }
    if base.observed.len() < 16 {
        return Err(CoreError::DegenerateGeneration(
            "base dataset too small to fit a completion model".into(),
        ));
    }

    let full = complete_low_rank(base, 8, derive_seed(seed, 1))?;
    let (lo, hi) = base.rating_scale;
    let full: Vec<f64> = full.iter().map(|&v| v.clamp(lo, hi)).collect();

    let mean_rating = full.iter().sum::<f64>() / full.len() as f64;
    let sigma = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut props: Vec<f64> = full
        .iter()
        .map(|&y| sigma(spec.exposure_sharpness * (y - mean_rating)))
        .collect();
    // Rescale so the mean propensity hits the target density; a few passes
    // absorb the effect of clamping at 1.
    for _ in 0..4 {
        let mean_p = props.iter().sum::<f64>() / props.len() as f64;
        let c = spec.base_exposure_rate / mean_p;
        for p in props.iter_mut() {
            *p = (*p * c).clamp(1e-6, 1.0);
        }
    }

    let mask = sample_observation_mask(&props, base.num_users, base.num_items, derive_seed(seed, 2))?;
    let mut observed = Vec::with_capacity(mask.cardinality());
    for u in 0..base.num_users {
        for i in 0..base.num_items {
            let c = u * base.num_items + i;
            if mask.is_set(c) {
                observed.push((u, i, full[c]));
            }
        }
    }
    RatingDataset::new(
        base.num_users,
        base.num_items,
        observed,
        base.rating_scale,
        Some(full),
        Some(props),
    )
}

/// Rank-`dim` matrix-factorization completion of the observed entries.
fn complete_low_rank(base: &RatingDataset, dim: usize, seed: u64) -> Result<Vec<f64>> {
    let mut model = Backbone::new_mf(base.num_users, base.num_items, dim, derive_seed(seed, 0));
    let mut opt = Optimizer::adam(0.02, model.num_params());
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let n = base.observed.len();
    let epochs = 60usize;
    let batch = 256usize.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        for k in (1..n).rev() {
            let j = rng.random_range(0..=k);
            order.swap(k, j);
        }
        for chunk in order.chunks(batch) {
            let b: Vec<(usize, usize, f64, f64)> = chunk
                .iter()
                .map(|&k| {
                    let (u, i, r) = base.observed[k];
                    (u, i, r, 1.0)
                })
                .collect();
            weighted_update(&mut model, &b, &mut opt)?;
        }
    }
    let mut full = vec![0.0; base.num_cells()];
    for u in 0..base.num_users {
        for i in 0..base.num_items {
            full[u * base.num_items + i] = model.predict(u, i)?;
        }
    }
    Ok(full)
}

/// Manifest stored alongside a serialized synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub num_users: usize,
    pub num_items: usize,
    pub rating_min: f64,
    pub rating_max: f64,
}

/// Serialize a synthetic dataset (with ground truth) to a directory:
/// `full_ratings.tsv`, `propensities.tsv`, `observed.tsv`, `meta.json`.
pub fn save_synthetic_dir(dataset: &RatingDataset, dir: &Path) -> Result<()> {
    let full = dataset
        .full_ratings
        .as_ref()
        .ok_or(CoreError::OracleUnavailable)?;
    let props = dataset.true_propensities.as_ref().ok_or_else(|| {
        CoreError::ContractViolation("synthetic dataset is missing true propensities".into())
    })?;
    fs::create_dir_all(dir)?;
    let write_matrix = |name: &str, m: &[f64]| -> Result<()> {
        let mut out = String::new();
        for u in 0..dataset.num_users {
            for i in 0..dataset.num_items {
                if i > 0 {
                    out.push('\t');
                }
                let _ = write!(out, "{}", m[u * dataset.num_items + i]);
            }
            out.push('\n');
        }
        fs::write(dir.join(name), out)?;
        Ok(())
    };
    write_matrix("full_ratings.tsv", full)?;
    write_matrix("propensities.tsv", props)?;
    let mut obs = String::new();
    for &(u, i, r) in &dataset.observed {
        let _ = writeln!(obs, "{u}\t{i}\t{r}");
    }
    fs::write(dir.join("observed.tsv"), obs)?;
    let meta = SyntheticMeta {
        num_users: dataset.num_users,
        num_items: dataset.num_items,
        rating_min: dataset.rating_scale.0,
        rating_max: dataset.rating_scale.1,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_synthetic_dir(dir: &Path) -> Result<RatingDataset> {
    let meta: SyntheticMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let read_matrix = |name: &str| -> Result<Vec<f64>> {
        let text = fs::read_to_string(dir.join(name))?;
        let mut m = Vec::with_capacity(meta.num_users * meta.num_items);
        for (lineno, line) in text.lines().enumerate() {
            for tok in line.split('\t') {
                m.push(tok.parse::<f64>().map_err(|e| CoreError::Parse {
                    line: lineno + 1,
                    message: format!("bad number `{tok}`: {e}"),
                })?);
            }
        }
        Ok(m)
    };
    let full = read_matrix("full_ratings.tsv")?;
    let props = read_matrix("propensities.tsv")?;
    let observed = parse_triplet_tsv(&fs::read_to_string(dir.join("observed.tsv"))?)?.observed;
    RatingDataset::new(
        meta.num_users,
        meta.num_items,
        observed,
        (meta.rating_min, meta.rating_max),
        Some(full),
        Some(props),
    )
}
