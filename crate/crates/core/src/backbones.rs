//! Prediction backbones producing scores for (user, item) pairs, with
//! analytic gradients and gradient-based updates under externally supplied
//! per-sample weights.
//!
//! Parameters live in a single flat vector per model so the optimizer and
//! the finite-difference tests can treat every backbone uniformly.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::rng_from_seed;

/// Which backbone a model is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    Mf,
    Neural,
}

/// Matrix factorization with user/item biases and a global bias.
///
/// Flat layout: [global_bias, user_bias(U), item_bias(I), user_emb(U*d), item_emb(I*d)].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfModel {
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    pub params: Vec<f64>,
}

/// One-hidden-layer interaction model over concatenated embeddings with a
/// tanh nonlinearity.
///
/// Flat layout: [user_emb(U*d), item_emb(I*d), w1(2d*h), b1(h), w2(h), b2].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Backbone {
    Mf(MfModel),
    Neural(NeuralModel),
}

impl Backbone {
    /// MF backbone with embeddings ~ uniform(-0.01, 0.01) and zero biases.
    pub fn new_mf(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let n = 1 + num_users + num_items + (num_users + num_items) * dim;
        let mut params = vec![0.0; n];
        let emb_start = 1 + num_users + num_items;
        for p in params[emb_start..].iter_mut() {
            *p = rng.random_range(-0.01..0.01);
        }
        Backbone::Mf(MfModel {
            num_users,
            num_items,
            dim,
            params,
        })
    }

    /// Neural backbone; embeddings and layer weights ~ uniform(-0.01, 0.01)
    /// scaled up for the hidden layer so gradients do not vanish at init.
    pub fn new_neural(num_users: usize, num_items: usize, dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let emb = (num_users + num_items) * dim;
        let n = emb + 2 * dim * hidden + hidden + hidden + 1;
        let mut params = vec![0.0; n];
        for p in params[..emb].iter_mut() {
            *p = rng.random_range(-0.01..0.01);
        }
        let w_scale = (1.0 / (2.0 * dim as f64)).sqrt();
        for p in params[emb..emb + 2 * dim * hidden].iter_mut() {
            *p = rng.random_range(-w_scale..w_scale);
        }
        let o_scale = (1.0 / hidden as f64).sqrt();
        for p in params[emb + 2 * dim * hidden + hidden..emb + 2 * dim * hidden + 2 * hidden].iter_mut() {
            *p = rng.random_range(-o_scale..o_scale);
        }
        Backbone::Neural(NeuralModel {
            num_users,
            num_items,
            dim,
            hidden,
            params,
        })
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::Mf(_) => BackboneKind::Mf,
            Backbone::Neural(_) => BackboneKind::Neural,
        }
    }

    pub fn num_users(&self) -> usize {
        match self {
            Backbone::Mf(m) => m.num_users,
            Backbone::Neural(m) => m.num_users,
        }
    }

    pub fn num_items(&self) -> usize {
        match self {
            Backbone::Mf(m) => m.num_items,
            Backbone::Neural(m) => m.num_items,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Backbone::Mf(m) => &m.params,
            Backbone::Neural(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Backbone::Mf(m) => &mut m.params,
            Backbone::Neural(m) => &mut m.params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    fn check_bounds(&self, u: usize, i: usize) -> Result<()> {
        if u >= self.num_users() || i >= self.num_items() {
            return Err(CoreError::IndexOutOfBounds {
                user: u,
                item: i,
                num_users: self.num_users(),
                num_items: self.num_items(),
            });
        }
        Ok(())
    }

    /// Raw model output. Never clamped; clamping to the rating scale is an
    /// evaluation-time concern.
    pub fn predict(&self, u: usize, i: usize) -> Result<f64> {
        self.check_bounds(u, i)?;
        Ok(match self {
            Backbone::Mf(m) => {
                let ub = 1 + u;
                let ib = 1 + m.num_users + i;
                let ue = 1 + m.num_users + m.num_items + u * m.dim;
                let ie = 1 + m.num_users + m.num_items + m.num_users * m.dim + i * m.dim;
                let mut dot = 0.0;
                for k in 0..m.dim {
                    dot += m.params[ue + k] * m.params[ie + k];
                }
                m.params[0] + m.params[ub] + m.params[ib] + dot
            }
            Backbone::Neural(m) => {
                let (out, _) = m.forward(u, i);
                out
            }
        })
    }

    /// Accumulate `scale * d predict(u,i) / d theta` into `grad`.
    pub fn accumulate_pred_grad(&self, u: usize, i: usize, scale: f64, grad: &mut [f64]) -> Result<()> {
        self.check_bounds(u, i)?;
        match self {
            Backbone::Mf(m) => {
                let ub = 1 + u;
                let ib = 1 + m.num_users + i;
                let ue = 1 + m.num_users + m.num_items + u * m.dim;
                let ie = 1 + m.num_users + m.num_items + m.num_users * m.dim + i * m.dim;
                grad[0] += scale;
                grad[ub] += scale;
                grad[ib] += scale;
                for k in 0..m.dim {
                    grad[ue + k] += scale * m.params[ie + k];
                    grad[ie + k] += scale * m.params[ue + k];
                }
            }
            Backbone::Neural(m) => {
                let (_, cache) = m.forward(u, i);
                m.backward(u, i, &cache, scale, grad);
            }
        }
        Ok(())
    }

    /// Human-readable name of a flat parameter index, used in numeric
    /// error reports.
    pub fn param_name(&self, idx: usize) -> String {
        match self {
            Backbone::Mf(m) => {
                if idx == 0 {
                    "global_bias".into()
                } else if idx < 1 + m.num_users {
                    format!("user_bias[{}]", idx - 1)
                } else if idx < 1 + m.num_users + m.num_items {
                    format!("item_bias[{}]", idx - 1 - m.num_users)
                } else {
                    let e = idx - 1 - m.num_users - m.num_items;
                    if e < m.num_users * m.dim {
                        format!("user_emb[{}][{}]", e / m.dim, e % m.dim)
                    } else {
                        let e = e - m.num_users * m.dim;
                        format!("item_emb[{}][{}]", e / m.dim, e % m.dim)
                    }
                }
            }
            Backbone::Neural(m) => {
                let emb = (m.num_users + m.num_items) * m.dim;
                if idx < m.num_users * m.dim {
                    format!("user_emb[{}][{}]", idx / m.dim, idx % m.dim)
                } else if idx < emb {
                    let e = idx - m.num_users * m.dim;
                    format!("item_emb[{}][{}]", e / m.dim, e % m.dim)
                } else if idx < emb + 2 * m.dim * m.hidden {
                    let e = idx - emb;
                    format!("w1[{}][{}]", e / m.hidden, e % m.hidden)
                } else if idx < emb + 2 * m.dim * m.hidden + m.hidden {
                    format!("b1[{}]", idx - emb - 2 * m.dim * m.hidden)
                } else if idx < emb + 2 * m.dim * m.hidden + 2 * m.hidden {
                    format!("w2[{}]", idx - emb - 2 * m.dim * m.hidden - m.hidden)
                } else {
                    "b2".into()
                }
            }
        }
    }
}

struct NeuralCache {
    x: Vec<f64>,
    z: Vec<f64>,
}

impl NeuralModel {
    fn offsets(&self) -> (usize, usize, usize, usize, usize) {
        let ue = 0;
        let ie = self.num_users * self.dim;
        let w1 = ie + self.num_items * self.dim;
        let b1 = w1 + 2 * self.dim * self.hidden;
        let w2 = b1 + self.hidden;
        (ue, ie, w1, b1, w2)
    }

    fn forward(&self, u: usize, i: usize) -> (f64, NeuralCache) {
        let d = self.dim;
        let h = self.hidden;
        let (ue, ie, w1, b1, w2) = self.offsets();
        let b2 = w2 + h;
        let mut x = Vec::with_capacity(2 * d);
        x.extend_from_slice(&self.params[ue + u * d..ue + (u + 1) * d]);
        x.extend_from_slice(&self.params[ie + i * d..ie + (i + 1) * d]);
        // w1 is stored row-major over inputs: w1[a][j] at w1 + a*h + j
        let mut z = vec![0.0; h];
        for j in 0..h {
            let mut s = self.params[b1 + j];
            for (a, &xa) in x.iter().enumerate() {
                s += self.params[w1 + a * h + j] * xa;
            }
            z[j] = s.tanh();
        }
        let mut out = self.params[b2];
        for j in 0..h {
            out += self.params[w2 + j] * z[j];
        }
        (out, NeuralCache { x, z })
    }

    fn backward(&self, u: usize, i: usize, cache: &NeuralCache, scale: f64, grad: &mut [f64]) {
        let d = self.dim;
        let h = self.hidden;
        let (ue, ie, w1, b1, w2) = self.offsets();
        let b2 = w2 + h;
        grad[b2] += scale;
        let mut dx = vec![0.0; 2 * d];
        for j in 0..h {
            let zj = cache.z[j];
            grad[w2 + j] += scale * zj;
            let dpre = scale * self.params[w2 + j] * (1.0 - zj * zj);
            grad[b1 + j] += dpre;
            for (a, &xa) in cache.x.iter().enumerate() {
                grad[w1 + a * h + j] += dpre * xa;
                dx[a] += dpre * self.params[w1 + a * h + j];
            }
        }
        for k in 0..d {
            grad[ue + u * d + k] += dx[k];
            grad[ie + i * d + k] += dx[d + k];
        }
    }
}

/// First-order optimizer over a flat parameter vector. The plain-SGD mode
/// exists so scale invariants are exactly assertable in tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64, num_params: usize) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            learning_rate,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step_count: 0,
        }
    }

    /// Adam with the standard defaults (0.9 / 0.999 / 1e-8).
    pub fn adam(learning_rate: f64, num_params: usize) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            learning_rate,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step_count: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.learning_rate * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let t = self.step_count as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for k in 0..params.len() {
                    self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * grads[k];
                    self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * grads[k] * grads[k];
                    let mhat = self.m[k] / bc1;
                    let vhat = self.v[k] / bc2;
                    params[k] -= self.learning_rate * mhat / (vhat.sqrt() + epsilon);
                }
            }
        }
    }
}

/// One optimizer step on the weighted squared loss
/// `(1/|batch|) * sum w * (pred - target)^2`.
///
/// Batch entries are (user, item, target, weight).
pub fn weighted_update(
    model: &mut Backbone,
    batch: &[(usize, usize, f64, f64)],
    opt: &mut Optimizer,
) -> Result<()> {
    if batch.is_empty() {
        return Err(CoreError::ContractViolation("empty update batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; model.num_params()];
    for &(u, i, target, w) in batch {
        if !w.is_finite() {
            return Err(CoreError::NonFinite {
                context: "weighted_update".into(),
                name: format!("weight for cell ({u}, {i})"),
            });
        }
        let pred = model.predict(u, i)?;
        let upstream = 2.0 * w * (pred - target) / n;
        model.accumulate_pred_grad(u, i, upstream, &mut grad)?;
    }
    if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
        return Err(CoreError::NonFinite {
            context: "weighted_update gradient".into(),
            name: model.param_name(idx),
        });
    }
    opt.step(model.params_mut(), &grad);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    kind: BackboneKind,
    num_users: usize,
    num_items: usize,
    dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// Write a bit-exact textual checkpoint (JSON shortest-roundtrip floats).
pub fn save_checkpoint(model: &Backbone, path: &Path) -> Result<()> {
    let ck = match model {
        Backbone::Mf(m) => Checkpoint {
            kind: BackboneKind::Mf,
            num_users: m.num_users,
            num_items: m.num_items,
            dim: m.dim,
            hidden: 0,
            params: m.params.clone(),
        },
        Backbone::Neural(m) => Checkpoint {
            kind: BackboneKind::Neural,
            num_users: m.num_users,
            num_items: m.num_items,
            dim: m.dim,
            hidden: m.hidden,
            params: m.params.clone(),
        },
    };
    fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Backbone> {
    let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(match ck.kind {
        BackboneKind::Mf => Backbone::Mf(MfModel {
            num_users: ck.num_users,
            num_items: ck.num_items,
            dim: ck.dim,
            params: ck.params,
        }),
        BackboneKind::Neural => Backbone::Neural(NeuralModel {
            num_users: ck.num_users,
            num_items: ck.num_items,
            dim: ck.dim,
            hidden: ck.hidden,
            params: ck.params,
        }),
    })
}
