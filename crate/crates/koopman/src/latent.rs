//! The Koopman algebra on Gaussian latent states.
//!
//! A latent state is a diagonal Gaussian (μ, ln σ) of dimension M. A
//! learned operator pair (K_μ, K_σ) advances it through the residual
//! update μ' = μ + K_μ μ and ln σ' = ln σ + K_σ ln σ; working in log space
//! keeps every standard deviation strictly positive no matter what the
//! matrices do. Operators are dense M×M or tridiagonal with 3M−2 free
//! entries (main, sub- and super-diagonal).
//!
//! Plain `ndarray` implementations live here for evaluation and tests; the
//! `graph` submodule mirrors the same arithmetic as tape operations for the
//! training path. A consistency test pins the two routes to each other.

use crate::error::{KoopmanError, Result};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Bounds applied to ln σ after every update; exp stays finite through
/// early training when the operators are far from settled.
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KoopmanForm {
    Dense,
    Tridiagonal,
}

impl KoopmanForm {
    /// Free parameters per matrix at latent dimension `m`.
    pub fn param_count(&self, m: usize) -> usize {
        match self {
            KoopmanForm::Dense => m * m,
            KoopmanForm::Tridiagonal => 3 * m - 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mu: Array1<f64>,
    pub log_sigma: Array1<f64>,
}

impl GaussianLatent {
    pub fn new(mu: Array1<f64>, log_sigma: Array1<f64>) -> Result<Self> {
        if mu.len() != log_sigma.len() {
            return Err(KoopmanError::Config(format!(
                "latent mean has length {}, log-sigma {}",
                mu.len(),
                log_sigma.len()
            )));
        }
        Ok(GaussianLatent { mu, log_sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite()) && self.log_sigma.iter().all(|v| v.is_finite())
    }
}

/// One Koopman matrix, either dense or stored as its three diagonals.
#[derive(Debug, Clone, PartialEq)]
pub enum KoopmanMatrix {
    Dense(Array2<f64>),
    Tridiagonal {
        /// Main diagonal, length M.
        main: Array1<f64>,
        /// Subdiagonal: `lower[j]` multiplies `v[j]` into row `j+1`.
        lower: Array1<f64>,
        /// Superdiagonal: `upper[j]` multiplies `v[j+1]` into row `j`.
        upper: Array1<f64>,
    },
}

impl KoopmanMatrix {
    pub fn form(&self) -> KoopmanForm {
        match self {
            KoopmanMatrix::Dense(_) => KoopmanForm::Dense,
            KoopmanMatrix::Tridiagonal { .. } => KoopmanForm::Tridiagonal,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            KoopmanMatrix::Dense(m) => m.nrows(),
            KoopmanMatrix::Tridiagonal { main, .. } => main.len(),
        }
    }

    /// Unpack from the auxiliary network's flat output segment:
    /// dense is row-major M², tridiagonal is [main | lower | upper].
    pub fn from_packed(form: KoopmanForm, m: usize, packed: &[f64]) -> Result<Self> {
        if packed.len() != form.param_count(m) {
            return Err(KoopmanError::Config(format!(
                "packed operator has {} entries, form needs {}",
                packed.len(),
                form.param_count(m)
            )));
        }
        Ok(match form {
            KoopmanForm::Dense => {
                KoopmanMatrix::Dense(Array2::from_shape_vec((m, m), packed.to_vec()).unwrap())
            }
            KoopmanForm::Tridiagonal => KoopmanMatrix::Tridiagonal {
                main: Array1::from_vec(packed[..m].to_vec()),
                lower: Array1::from_vec(packed[m..2 * m - 1].to_vec()),
                upper: Array1::from_vec(packed[2 * m - 1..].to_vec()),
            },
        })
    }

    /// Embed into a dense matrix (test oracle and Frobenius comparisons).
    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            KoopmanMatrix::Dense(m) => m.clone(),
            KoopmanMatrix::Tridiagonal { main, lower, upper } => {
                let m = main.len();
                let mut out = Array2::zeros((m, m));
                for i in 0..m {
                    out[[i, i]] = main[i];
                }
                for j in 0..m - 1 {
                    out[[j + 1, j]] = lower[j];
                    out[[j, j + 1]] = upper[j];
                }
                out
            }
        }
    }

    pub fn apply(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.dim() {
            return Err(KoopmanError::Config(format!(
                "operator dimension {} applied to vector of length {}",
                self.dim(),
                v.len()
            )));
        }
        Ok(match self {
            KoopmanMatrix::Dense(m) => m.dot(v),
            KoopmanMatrix::Tridiagonal { main, lower, upper } => {
                tridiag_apply(main, lower, upper, v)?
            }
        })
    }
}

/// The operator pair advancing mean and log-standard-deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanPair {
    pub k_mu: KoopmanMatrix,
    pub k_sigma: KoopmanMatrix,
}

impl KoopmanPair {
    pub fn form(&self) -> KoopmanForm {
        self.k_mu.form()
    }

    pub fn dim(&self) -> usize {
        self.k_mu.dim()
    }
}

/// Tridiagonal matrix–vector product from the three diagonals:
/// y[i] = main[i]·v[i] + lower[i−1]·v[i−1] + upper[i]·v[i+1].
pub fn tridiag_apply(
    main: &Array1<f64>,
    lower: &Array1<f64>,
    upper: &Array1<f64>,
    v: &Array1<f64>,
) -> Result<Array1<f64>> {
    let m = main.len();
    if v.len() != m || lower.len() + 1 != m || upper.len() + 1 != m {
        return Err(KoopmanError::Config(format!(
            "tridiagonal bands (main {}, lower {}, upper {}) do not fit vector of length {}",
            m,
            lower.len(),
            upper.len(),
            v.len()
        )));
    }
    let mut y = Array1::zeros(m);
    for i in 0..m {
        let mut acc = main[i] * v[i];
        if i > 0 {
            acc += lower[i - 1] * v[i - 1];
        }
        if i + 1 < m {
            acc += upper[i] * v[i + 1];
        }
        y[i] = acc;
    }
    Ok(y)
}

/// Residual update: μ' = μ + K_μ μ, ln σ' = clamp(ln σ + K_σ ln σ).
pub fn koopman_step(state: &GaussianLatent, pair: &KoopmanPair) -> Result<GaussianLatent> {
    if pair.dim() != state.dim() {
        return Err(KoopmanError::Config(format!(
            "operator dimension {} does not match latent dimension {}",
            pair.dim(),
            state.dim()
        )));
    }
    let mu = &state.mu + &pair.k_mu.apply(&state.mu)?;
    let mut log_sigma = &state.log_sigma + &pair.k_sigma.apply(&state.log_sigma)?;
    log_sigma.mapv_inplace(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
    GaussianLatent::new(mu, log_sigma)
}

/// Reparameterized draw z = μ + exp(ln σ) ⊙ ε with ε standard normal, so a
/// sample stays differentiable in both latent statistics.
pub fn sample_latent(state: &GaussianLatent, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let eps = standard_normal(state.dim(), rng);
    &state.mu + &(state.log_sigma.mapv(f64::exp) * &eps)
}

/// Box–Muller standard normal vector. Placed here so the training and
/// evaluation paths share one definition of the draw order.
pub fn standard_normal(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut out = Array1::zeros(n);
    let mut i = 0;
    while i < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out[i] = r * theta.cos();
        i += 1;
        if i < n {
            out[i] = r * theta.sin();
            i += 1;
        }
    }
    out
}

/// Advance `m` steps, regenerating the operator pair from the current state
/// at every step, and return the state after 1..m applications.
pub fn rollout(
    state0: &GaussianLatent,
    m: usize,
    mut operator_fn: impl FnMut(&GaussianLatent) -> Result<KoopmanPair>,
) -> Result<Vec<GaussianLatent>> {
    if m == 0 {
        return Err(KoopmanError::Config("rollout length must be at least 1".into()));
    }
    let mut states = Vec::with_capacity(m);
    let mut current = state0.clone();
    for step in 1..=m {
        let pair = operator_fn(&current)?;
        current = koopman_step(&current, &pair)?;
        if !current.is_finite() {
            return Err(KoopmanError::Numerical(format!(
                "latent state became non-finite at rollout step {step}"
            )));
        }
        states.push(current.clone());
    }
    Ok(states)
}

/// Tape-building mirrors of the latent arithmetic for the training path.
pub mod graph {
    use super::KoopmanForm;
    use autodiff::{Graph, Var};

    /// Operator parameters as tape nodes.
    #[derive(Clone, Copy)]
    pub enum MatrixVars {
        /// `[M, M]`.
        Dense(Var),
        /// (main `[M]`, lower `[M−1]`, upper `[M−1]`).
        Tridiagonal(Var, Var, Var),
    }

    #[derive(Clone, Copy)]
    pub struct PairVars {
        pub k_mu: MatrixVars,
        pub k_sigma: MatrixVars,
    }

    #[derive(Clone, Copy)]
    pub struct LatentVars {
        pub mu: Var,
        pub log_sigma: Var,
    }

    /// Split the auxiliary network's output vector (width 2·n_dec) into the
    /// two packed operators and reshape them.
    pub fn unpack_pair(g: &mut Graph, out: Var, form: KoopmanForm, m: usize) -> PairVars {
        let n_dec = form.param_count(m);
        debug_assert_eq!(g.value(out).len(), 2 * n_dec);
        let unpack_one = |g: &mut Graph, flat: Var| match form {
            KoopmanForm::Dense => MatrixVars::Dense(g.reshape(flat, &[m, m])),
            KoopmanForm::Tridiagonal => {
                let main = g.slice(flat, &[0], &[m]);
                let lower = g.slice(flat, &[m], &[2 * m - 1]);
                let upper = g.slice(flat, &[2 * m - 1], &[3 * m - 2]);
                MatrixVars::Tridiagonal(main, lower, upper)
            }
        };
        let mu_flat = g.slice(out, &[0], &[n_dec]);
        let sigma_flat = g.slice(out, &[n_dec], &[2 * n_dec]);
        PairVars { k_mu: unpack_one(g, mu_flat), k_sigma: unpack_one(g, sigma_flat) }
    }

    /// Tape version of the tridiagonal product, composed from shifted
    /// slices so its adjoint stays differentiable.
    pub fn apply_matrix(g: &mut Graph, mat: MatrixVars, v: Var) -> Var {
        match mat {
            MatrixVars::Dense(m) => g.matvec(m, v, false),
            MatrixVars::Tridiagonal(main, lower, upper) => {
                let m = g.value(v).len();
                let diag = g.mul(main, v);
                let head = g.slice(v, &[0], &[m - 1]);
                let low = g.mul(lower, head);
                let low_pad = g.zero_pad(low, &[(1, 0)]);
                let tail = g.slice(v, &[1], &[m]);
                let up = g.mul(upper, tail);
                let up_pad = g.zero_pad(up, &[(0, 1)]);
                let s = g.add(diag, low_pad);
                g.add(s, up_pad)
            }
        }
    }

    /// Residual update on tape nodes, including the log-sigma clamp.
    pub fn koopman_step(g: &mut Graph, state: LatentVars, pair: PairVars) -> LatentVars {
        let dmu = apply_matrix(g, pair.k_mu, state.mu);
        let mu = g.add(state.mu, dmu);
        let dls = apply_matrix(g, pair.k_sigma, state.log_sigma);
        let ls_raw = g.add(state.log_sigma, dls);
        let log_sigma = g.clamp(ls_raw, super::LOG_SIGMA_MIN, super::LOG_SIGMA_MAX);
        LatentVars { mu, log_sigma }
    }

    /// z = μ + exp(ln σ) ⊙ ε for a fixed noise vector.
    pub fn sample(g: &mut Graph, state: LatentVars, eps: &ndarray::Array1<f64>) -> Var {
        let sigma = g.exp(state.log_sigma);
        let e = g.constant(eps.clone().into_dyn());
        let noise = g.mul(sigma, e);
        g.add(state.mu, noise)
    }
}
