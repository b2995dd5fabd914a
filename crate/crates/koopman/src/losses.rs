//! Training objectives.
//!
//! The generator (encoder, decoder, operator network) minimizes a weighted
//! sum of reconstruction error, multi-step prediction error, a latent
//! distribution-matching term (MMD with the inverse multiquadratics
//! kernel), finite-difference smoothness terms, an L2 penalty on its
//! kernels, and optionally an adversarial term. The critic minimizes the
//! Wasserstein surrogate with a gradient penalty on random interpolates.
//!
//! Everything here builds nodes on an [`autodiff::Graph`]; values are
//! available eagerly, so assembly can validate finiteness as it goes.

use crate::error::{KoopmanError, Result};
use crate::networks::{Net, ParamGroup, ParamKind};
use autodiff::{nn, Graph, Var};
use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

/// Adversarial sign convention. `Standard` is the usual Wasserstein
/// pairing: the generator minimizes −E[D(fake)] while the critic
/// minimizes E[D(fake)] − E[D(real)]. `Paper` keeps +E[D(fake)] in the
/// generator total, in which case both players push the fake score the
/// same way; it is exposed for comparison runs rather than silently
/// corrected. The critic objective is identical under both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanSign {
    Paper,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_code: f64,
    pub lambda_grad: f64,
    pub lambda_reg: f64,
    pub lambda_gan: f64,
    /// Per-order weights inside the finite-difference term, for orders
    /// 1, 2, and 4 respectively.
    pub lambda_orders: [f64; 3],
    /// Inverse multiquadratics kernel constant.
    pub mmd_c: f64,
    pub gp_weight: f64,
    pub gan_sign: GanSign,
}

impl LossWeights {
    /// Contract defaults; the kernel constant scales with the latent
    /// dimension.
    pub fn defaults(latent_dim: usize) -> Self {
        LossWeights {
            lambda_code: 100.0,
            lambda_grad: 1.0,
            lambda_reg: 1e-3,
            lambda_gan: 0.0,
            lambda_orders: [1.0, 1.0, 1.0],
            mmd_c: 2.0 * latent_dim as f64,
            gp_weight: 10.0,
            gan_sign: GanSign::Standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_code", self.lambda_code),
            ("lambda_grad", self.lambda_grad),
            ("lambda_reg", self.lambda_reg),
            ("lambda_gan", self.lambda_gan),
            ("lambda_1", self.lambda_orders[0]),
            ("lambda_2", self.lambda_orders[1]),
            ("lambda_4", self.lambda_orders[2]),
            ("mmd_c", self.mmd_c),
            ("gp_weight", self.gp_weight),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(KoopmanError::Config(format!(
                    "loss weight {name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if self.mmd_c == 0.0 {
            return Err(KoopmanError::Config("mmd_c must be positive".into()));
        }
        Ok(())
    }

    pub fn order_weight(&self, order: usize) -> f64 {
        match order {
            1 => self.lambda_orders[0],
            2 => self.lambda_orders[1],
            4 => self.lambda_orders[2],
            _ => 0.0,
        }
    }
}

/// Mean squared error between a snapshot and its reconstruction.
pub fn recon_loss(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    if g.value(x).shape() != g.value(x_hat).shape() {
        return Err(KoopmanError::Config(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            g.value(x).shape(),
            g.value(x_hat).shape()
        )));
    }
    Ok(nn::mse(g, x, x_hat))
}

/// Mean over rollout steps of the per-step mean squared error.
pub fn pred_loss(g: &mut Graph, targets: &[Var], preds: &[Var]) -> Result<Var> {
    if targets.len() != preds.len() || targets.is_empty() {
        return Err(KoopmanError::Config(format!(
            "prediction needs equal non-empty step lists, got {} targets and {} predictions",
            targets.len(),
            preds.len()
        )));
    }
    let mut per_step = Vec::with_capacity(targets.len());
    for (&t, &p) in targets.iter().zip(preds) {
        per_step.push(recon_loss(g, t, p)?);
    }
    Ok(nn::mean_of(g, &per_step))
}

/// Inverse multiquadratics kernel f(a, b) = C / (C + ‖a − b‖²).
pub fn imq_kernel(g: &mut Graph, a: Var, b: Var, c: f64) -> Var {
    let d = g.sub(a, b);
    let dist_sq = nn::sum_sq(g, d);
    let denom = g.add_scalar(dist_sq, c);
    let inv = g.recip(denom);
    g.scale(inv, c)
}

/// Unbiased-style MMD estimator between the encoded latent samples and the
/// rolled-out latent samples:
/// mean_{l≠j} f(z_l, z_j) + mean_{l≠j} f(z'_l, z'_j) − 2 mean_{l,j} f(z_l, z'_j).
pub fn mmd_code_loss(g: &mut Graph, z_true: &[Var], z_pred: &[Var], c: f64) -> Result<Var> {
    let n = z_true.len();
    if z_pred.len() != n {
        return Err(KoopmanError::Config(format!(
            "latent sample lists differ in length: {} vs {}",
            n,
            z_pred.len()
        )));
    }
    if n < 2 {
        return Err(KoopmanError::Config(format!(
            "the latent distribution term needs at least 2 rollout steps, got {n}"
        )));
    }
    let mut self_true = Vec::new();
    let mut self_pred = Vec::new();
    let mut cross = Vec::new();
    for l in 0..n {
        for j in 0..n {
            if l != j {
                self_true.push(imq_kernel(g, z_true[l], z_true[j], c));
                self_pred.push(imq_kernel(g, z_pred[l], z_pred[j], c));
            }
            cross.push(imq_kernel(g, z_true[l], z_pred[j], c));
        }
    }
    let pair_w = 1.0 / (n * (n - 1)) as f64;
    let cross_w = 2.0 / (n * n) as f64;
    let mut acc = g.scalar_const(0.0);
    for t in self_true.into_iter().chain(self_pred) {
        let w = g.scale(t, pair_w);
        acc = g.add(acc, w);
    }
    for t in cross {
        let w = g.scale(t, -cross_w);
        acc = g.add(acc, w);
    }
    Ok(acc)
}

/// Finite-difference matrix of the given derivative order on an n-point
/// grid. Interior rows are central stencils; boundary rows fall back to
/// one-sided differences of the same order. Grid spacing is absorbed into
/// the per-order weights.
pub fn stencil_matrix(n: usize, order: usize) -> Result<Array2<f64>> {
    let (coeffs, radius): (&[f64], usize) = match order {
        1 => (&[-0.5, 0.0, 0.5], 1),
        2 => (&[1.0, -2.0, 1.0], 1),
        4 => (&[1.0, -4.0, 6.0, -4.0, 1.0], 2),
        _ => {
            return Err(KoopmanError::Config(format!(
                "finite-difference order must be 1, 2, or 4, got {order}"
            )))
        }
    };
    let width = coeffs.len();
    if n < width {
        return Err(KoopmanError::Config(format!(
            "grid of {n} points is too small for the order-{order} stencil"
        )));
    }
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        let interior = i >= radius && i + radius < n;
        if interior {
            for (k, &ck) in coeffs.iter().enumerate() {
                s[[i, i - radius + k]] += ck;
            }
        } else if order == 1 {
            // One-sided first difference: u_{i+1} − u_i at the left edge,
            // u_i − u_{i−1} at the right.
            if i == 0 {
                s[[i, 0]] = -1.0;
                s[[i, 1]] = 1.0;
            } else {
                s[[i, n - 2]] = -1.0;
                s[[i, n - 1]] = 1.0;
            }
        } else {
            // Higher orders keep their coefficients and slide the window
            // inside the grid; for pure differences this is the standard
            // one-sided form.
            let start = i.saturating_sub(radius).min(n - width);
            for (k, &ck) in coeffs.iter().enumerate() {
                s[[i, start + k]] += ck;
            }
        }
    }
    Ok(s)
}

/// Apply a stencil matrix along one spatial axis of `[c, spatial..]`.
fn apply_stencil_axis(g: &mut Graph, x: Var, s: &Array2<f64>, axis: usize) -> Var {
    let shape = g.value(x).shape().to_vec();
    let rank = shape.len() - 1;
    let s_var = g.constant(s.clone().into_dyn());
    if axis == rank - 1 {
        // Rows = everything before the last axis; right-multiply by S^T.
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let w = shape[shape.len() - 1];
        let flat = g.reshape(x, &[rows, w]);
        let out = g.matmul(flat, s_var, false, true);
        g.reshape(out, &shape)
    } else {
        // Middle axis of [c, h, w]: left-multiply each channel by S.
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut parts = Vec::with_capacity(c);
        for ch in 0..c {
            let sl = g.slice(x, &[ch, 0, 0], &[ch + 1, h, w]);
            let m = g.reshape(sl, &[h, w]);
            let d = g.matmul(s_var, m, false, false);
            parts.push(g.reshape(d, &[1, h, w]));
        }
        g.concat(&parts, 0)
    }
}

/// Smoothness term: for each requested order, the mean over rollout steps
/// of the MSE between the finite differences of target and prediction,
/// summed over spatial axes, weighted per order, and summed.
pub fn grad_loss(
    g: &mut Graph,
    targets: &[Var],
    preds: &[Var],
    orders: &[usize],
    weights: &LossWeights,
) -> Result<Var> {
    if targets.len() != preds.len() || targets.is_empty() {
        return Err(KoopmanError::Config(
            "smoothness term needs equal non-empty target and prediction lists".into(),
        ));
    }
    if orders.is_empty() {
        return Err(KoopmanError::Config("smoothness term needs at least one order".into()));
    }
    let shape = g.value(targets[0]).shape().to_vec();
    let rank = shape.len() - 1;
    let mut total = g.scalar_const(0.0);
    for &order in orders {
        let mut per_axis_stencils = Vec::with_capacity(rank);
        for axis in 0..rank {
            per_axis_stencils.push(stencil_matrix(shape[1 + axis], order)?);
        }
        let mut step_terms = Vec::with_capacity(targets.len());
        for (&t, &p) in targets.iter().zip(preds) {
            if g.value(t).shape() != shape.as_slice() || g.value(p).shape() != shape.as_slice() {
                return Err(KoopmanError::Config(
                    "smoothness term requires uniformly shaped snapshots".into(),
                ));
            }
            let mut axis_sum = g.scalar_const(0.0);
            for (axis, s) in per_axis_stencils.iter().enumerate() {
                let dt = apply_stencil_axis(g, t, s, axis);
                let dp = apply_stencil_axis(g, p, s, axis);
                let m = nn::mse(g, dt, dp);
                axis_sum = g.add(axis_sum, m);
            }
            step_terms.push(axis_sum);
        }
        let order_mean = nn::mean_of(g, &step_terms);
        let weighted = g.scale(order_mean, weights.order_weight(order));
        total = g.add(total, weighted);
    }
    Ok(total)
}

/// Sum of squared convolution and dense kernel entries over the generator
/// parameters; biases and normalization terms are exempt.
pub fn weight_penalty(g: &mut Graph, net: &Net) -> Var {
    let mut acc = g.scalar_const(0.0);
    for (entry, &var) in net.params.entries().iter().zip(net.vars) {
        if entry.group == ParamGroup::Generator && entry.kind == ParamKind::Kernel {
            let sq = nn::sum_sq(g, var);
            acc = g.add(acc, sq);
        }
    }
    acc
}

/// Generator-side adversarial term from critic scores on generated pairs:
/// the mean score, negated under the standard convention.
pub fn gan_generator_term(g: &mut Graph, fake_scores: &[Var], sign: GanSign) -> Result<Var> {
    if fake_scores.is_empty() {
        return Err(KoopmanError::Config("adversarial term needs at least one score".into()));
    }
    let mean = nn::mean_of(g, fake_scores);
    Ok(match sign {
        GanSign::Paper => mean,
        GanSign::Standard => g.neg(mean),
    })
}

/// One gradient-penalty term: pushes the interpolate in as a fresh leaf,
/// scores it with the provided critic, and returns (‖∇x̂ D(x̂)‖ − 1)².
/// The norm keeps a small floor under the square root so its own gradient
/// stays finite; the returned node is differentiable in the critic
/// parameters because the backward sweep emits graph operations.
pub fn gradient_penalty(
    g: &mut Graph,
    interpolate: ArrayD<f64>,
    critic: impl FnOnce(&mut Graph, Var) -> Var,
) -> Result<Var> {
    let x_hat = g.leaf(interpolate);
    let score = critic(g, x_hat);
    if g.value(score).len() != 1 {
        return Err(KoopmanError::Config("critic must produce a scalar score".into()));
    }
    let grad = g.backward(score, &[x_hat])[0].ok_or_else(|| {
        KoopmanError::Numerical("critic score does not depend on its input".into())
    })?;
    let sum_sq = nn::sum_sq(g, grad);
    let floored = g.add_scalar(sum_sq, 1e-12);
    let norm = g.sqrt(floored);
    let excess = g.add_scalar(norm, -1.0);
    Ok(g.square(excess))
}

/// Critic objective: mean fake score − mean real score + gp_weight · mean
/// gradient penalty.
pub fn critic_loss(
    g: &mut Graph,
    real_scores: &[Var],
    fake_scores: &[Var],
    penalties: &[Var],
    gp_weight: f64,
) -> Result<Var> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(KoopmanError::Config("critic loss needs real and fake scores".into()));
    }
    let fake = nn::mean_of(g, fake_scores);
    let real = nn::mean_of(g, real_scores);
    let mut loss = g.sub(fake, real);
    if !penalties.is_empty() {
        let gp = nn::mean_of(g, penalties);
        let w = g.scale(gp, gp_weight);
        loss = g.add(loss, w);
    }
    Ok(loss)
}

/// Named scalar nodes entering the generator total; optional terms are
/// omitted entirely (short sequences have no distribution term, and
/// adversarial training may be off).
pub struct GeneratorParts {
    pub recon: Var,
    pub pred: Var,
    pub code: Option<Var>,
    pub grad: Var,
    pub reg: Var,
    pub gan: Option<Var>,
}

/// Weighted sum of the generator terms. Every present part is checked for
/// finiteness and the failing term is named.
pub fn total_generator_loss(
    g: &mut Graph,
    parts: &GeneratorParts,
    w: &LossWeights,
) -> Result<Var> {
    let named = [
        ("recon", Some(parts.recon), 1.0),
        ("pred", Some(parts.pred), 1.0),
        ("code", parts.code, w.lambda_code),
        ("grad", Some(parts.grad), w.lambda_grad),
        ("reg", Some(parts.reg), w.lambda_reg),
        ("gan", parts.gan, w.lambda_gan),
    ];
    let mut total = g.scalar_const(0.0);
    for (name, part, weight) in named {
        let Some(part) = part else { continue };
        let v = g.scalar(part);
        if !v.is_finite() {
            return Err(KoopmanError::Numerical(format!(
                "loss term {name} became non-finite ({v})"
            )));
        }
        let scaled = g.scale(part, weight);
        total = g.add(total, scaled);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{ArchConfig, ModelParams};
    use ndarray::{Array1, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn recon_identity_offset_and_loop_oracle() {
        let mut g = Graph::new();
        let x = g.constant(rand_array(&[2, 9], 1));
        assert_eq!({
            let l = recon_loss(&mut g, x, x).unwrap();
            g.scalar(l)
        }, 0.0);

        let zero = g.constant(ArrayD::zeros(IxDyn(&[3, 4])));
        let one = g.constant(ArrayD::from_elem(IxDyn(&[3, 4]), 1.0));
        let l = recon_loss(&mut g, zero, one).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-15);

        let a = rand_array(&[2, 7], 2);
        let b = rand_array(&[2, 7], 3);
        let mut oracle = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            oracle += (x - y) * (x - y);
        }
        oracle /= a.len() as f64;
        let av = g.constant(a);
        let bv = g.constant(b);
        let l = recon_loss(&mut g, av, bv).unwrap();
        assert!((g.scalar(l) - oracle).abs() < 1e-12);

        let bad = g.constant(ArrayD::zeros(IxDyn(&[2, 8])));
        assert!(recon_loss(&mut g, av, bad).is_err());
    }

    #[test]
    fn pred_loss_averages_per_step_mses() {
        let mut g = Graph::new();
        let t: Vec<Var> = (0..3).map(|i| g.constant(rand_array(&[1, 6], 10 + i))).collect();
        let p: Vec<Var> = (0..3).map(|i| g.constant(rand_array(&[1, 6], 20 + i))).collect();
        let mut oracle = 0.0;
        for i in 0..3 {
            let l = recon_loss(&mut g, t[i], p[i]).unwrap();
            oracle += g.scalar(l) / 3.0;
        }
        let l = pred_loss(&mut g, &t, &p).unwrap();
        assert!((g.scalar(l) - oracle).abs() < 1e-12);

        let perfect = pred_loss(&mut g, &t, &t).unwrap();
        assert_eq!(g.scalar(perfect), 0.0);

        let single = pred_loss(&mut g, &t[..1], &p[..1]).unwrap();
        let direct = recon_loss(&mut g, t[0], p[0]).unwrap();
        assert!((g.scalar(single) - g.scalar(direct)).abs() < 1e-15);

        assert!(pred_loss(&mut g, &t, &p[..2]).is_err());
        assert!(pred_loss(&mut g, &[], &[]).is_err());
    }

    #[test]
    fn kernel_values_at_known_distances() {
        let mut g = Graph::new();
        let x = g.constant(rand_array(&[5], 30));
        let k = imq_kernel(&mut g, x, x, 3.7);
        assert!((g.scalar(k) - 1.0).abs() < 1e-15);

        let a = g.constant(ArrayD::zeros(IxDyn(&[1])));
        let b = g.constant(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let k = imq_kernel(&mut g, a, b, 1.0);
        assert!((g.scalar(k) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mmd_matches_brute_force_triple_loop() {
        let c = 4.0;
        let n = 3;
        let dim = 5;
        let zt: Vec<Array1<f64>> = (0..n)
            .map(|i| rand_array(&[dim], 40 + i as u64).into_dimensionality().unwrap())
            .collect();
        let zp: Vec<Array1<f64>> = (0..n)
            .map(|i| rand_array(&[dim], 50 + i as u64).into_dimensionality().unwrap())
            .collect();
        let f = |a: &Array1<f64>, b: &Array1<f64>| {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            c / (c + d2)
        };
        let mut oracle = 0.0;
        for l in 0..n {
            for j in 0..n {
                if l != j {
                    oracle += f(&zt[l], &zt[j]) / (n * (n - 1)) as f64;
                    oracle += f(&zp[l], &zp[j]) / (n * (n - 1)) as f64;
                }
                oracle -= 2.0 * f(&zt[l], &zp[j]) / (n * n) as f64;
            }
        }
        let mut g = Graph::new();
        let zt_v: Vec<Var> = zt.iter().map(|z| g.constant(z.clone().into_dyn())).collect();
        let zp_v: Vec<Var> = zp.iter().map(|z| g.constant(z.clone().into_dyn())).collect();
        let loss = mmd_code_loss(&mut g, &zt_v, &zp_v, c).unwrap();
        assert!((g.scalar(loss) - oracle).abs() < 1e-12);

        // Swapping the two sample sets swaps the self terms and transposes
        // the cross term; the value is unchanged.
        let swapped = mmd_code_loss(&mut g, &zp_v, &zt_v, c).unwrap();
        assert!((g.scalar(loss) - g.scalar(swapped)).abs() < 1e-12);

        assert!(mmd_code_loss(&mut g, &zt_v[..1], &zp_v[..1], c).is_err());
        assert!(mmd_code_loss(&mut g, &zt_v, &zp_v[..2], c).is_err());
    }

    #[test]
    fn stencils_annihilate_constants_and_reproduce_polynomials() {
        for (order, poly_deg, expect) in [(1usize, 1usize, 1.0f64), (2, 2, 2.0), (4, 4, 24.0)] {
            let n = 12;
            let s = stencil_matrix(n, order).unwrap();
            // Row sums vanish: constants are annihilated everywhere,
            // boundary rows included.
            for i in 0..n {
                let row_sum: f64 = (0..n).map(|j| s[[i, j]]).sum();
                assert!(row_sum.abs() < 1e-12, "order {order} row {i}");
            }
            // The stencil recovers the leading derivative of x^deg exactly
            // at every point, one-sided rows included: finite differences
            // of matching order are exact on polynomials of that degree.
            let u: Vec<f64> = (0..n).map(|i| (i as f64).powi(poly_deg as i32)).collect();
            for i in 0..n {
                let v: f64 = (0..n).map(|j| s[[i, j]] * u[j]).sum();
                if order == 1 && poly_deg == 1 {
                    assert!((v - expect).abs() < 1e-9, "order 1 point {i}: {v}");
                } else if order != 1 {
                    assert!((v - expect).abs() < 1e-7, "order {order} point {i}: {v}");
                }
            }
        }
        assert!(stencil_matrix(4, 4).is_err());
        assert!(stencil_matrix(10, 3).is_err());
    }

    #[test]
    fn grad_loss_on_constant_error_and_ramp() {
        let w = LossWeights::defaults(4);
        let n = 16;
        let mut g = Graph::new();
        let base = rand_array(&[1, n], 60);
        let shifted = &base + 0.37;
        let t = g.constant(base.clone());
        let p = g.constant(shifted);
        // A constant offset has vanishing derivatives of every order.
        let l = grad_loss(&mut g, &[t], &[p], &[1, 2, 4], &w).unwrap();
        assert!(g.scalar(l).abs() < 1e-22);

        // A ramp error of slope s has first derivative s everywhere,
        // boundary rows included, so the order-1 loss is exactly s².
        let slope = 0.3;
        let ramp = ArrayD::from_shape_fn(IxDyn(&[1, n]), |ix| slope * ix[1] as f64);
        let zero = g.constant(ArrayD::zeros(IxDyn(&[1, n])));
        let r = g.constant(ramp);
        let l = grad_loss(&mut g, &[r], &[zero], &[1], &w).unwrap();
        assert!((g.scalar(l) - slope * slope).abs() < 1e-10, "{}", g.scalar(l));

        let perfect = grad_loss(&mut g, &[r], &[r], &[1, 2, 4], &w).unwrap();
        assert_eq!(g.scalar(perfect), 0.0);
    }

    #[test]
    fn grad_loss_acts_on_both_axes_in_two_dimensions() {
        let w = LossWeights::defaults(4);
        let mut g = Graph::new();
        // Error field linear in y only: d/dx contributes 0, d/dy slope².
        let (h, gw) = (10, 8);
        let slope = 0.5;
        let err = ArrayD::from_shape_fn(IxDyn(&[1, h, gw]), |ix| slope * ix[1] as f64);
        let zero = g.constant(ArrayD::zeros(IxDyn(&[1, h, gw])));
        let e = g.constant(err);
        let l = grad_loss(&mut g, &[e], &[zero], &[1], &w).unwrap();
        assert!((g.scalar(l) - slope * slope).abs() < 1e-10);

        // Linear in both axes: contributions add.
        let err2 = ArrayD::from_shape_fn(IxDyn(&[1, h, gw]), |ix| {
            0.5 * ix[1] as f64 + 0.25 * ix[2] as f64
        });
        let e2 = g.constant(err2);
        let l2 = grad_loss(&mut g, &[e2], &[zero], &[1], &w).unwrap();
        assert!((g.scalar(l2) - (0.25 + 0.0625)).abs() < 1e-10);
    }

    #[test]
    fn grad_loss_gradient_matches_finite_differences() {
        let w = LossWeights::defaults(4);
        let n = 8;
        let target = rand_array(&[1, n], 70);
        let pred0 = rand_array(&[1, n], 71);
        let eval = |pred: &ArrayD<f64>| {
            let mut g = Graph::new();
            let t = g.constant(target.clone());
            let p = g.constant(pred.clone());
            let l = grad_loss(&mut g, &[t], &[p], &[1, 2, 4], &w).unwrap();
            g.scalar(l)
        };
        let mut g = Graph::new();
        let t = g.constant(target.clone());
        let p = g.leaf(pred0.clone());
        let l = grad_loss(&mut g, &[t], &[p], &[1, 2, 4], &w).unwrap();
        let grad = g.backward(l, &[p])[0].unwrap();
        let analytic = g.value(grad).clone();
        let step = 1e-6;
        for i in 0..n {
            let mut plus = pred0.clone();
            plus[[0, i]] += step;
            let mut minus = pred0.clone();
            minus[[0, i]] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            assert!(
                (analytic[[0, i]] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "coord {i}: analytic {} vs fd {fd}",
                analytic[[0, i]]
            );
        }
    }

    #[test]
    fn weight_penalty_matches_independent_parameter_walk() {
        let arch = ArchConfig {
            latent_dim: 4,
            enc_widths: vec![4],
            aux_widths: vec![6],
            disc_widths: vec![4],
            ..ArchConfig::new(vec![8], 1)
        };
        let params = ModelParams::init(&arch, 3).unwrap();
        let mut oracle = 0.0;
        for e in params.entries() {
            let is_kernel = e.name.ends_with(".w") && !e.name.starts_with("disc.");
            if is_kernel {
                oracle += e.value.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let mut g = Graph::new();
        let vars = params.bind(&mut g, None);
        let net = Net::new(&arch, &params, &vars);
        let l = weight_penalty(&mut g, &net);
        let got = g.scalar(l);
        assert!(oracle > 0.0);
        assert!((got - oracle).abs() < 1e-8 * oracle.max(1.0));
        // The zero-initialized operator head contributes nothing.
        let head = &params.entries()[params.entry_index("aux.out.w")];
        assert!(head.value.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_term_signs() {
        let mut g = Graph::new();
        let s1 = g.scalar_const(1.0);
        let s3 = g.scalar_const(3.0);
        let paper = gan_generator_term(&mut g, &[s1, s3], GanSign::Paper).unwrap();
        assert!((g.scalar(paper) - 2.0).abs() < 1e-15);
        let std = gan_generator_term(&mut g, &[s1, s3], GanSign::Standard).unwrap();
        assert!((g.scalar(std) + 2.0).abs() < 1e-15);
        assert!(gan_generator_term(&mut g, &[], GanSign::Standard).is_err());
    }

    #[test]
    fn critic_loss_mean_difference_and_linear_penalties() {
        let mut g = Graph::new();
        let one = g.scalar_const(1.0);
        let zero = g.scalar_const(0.0);
        let l = critic_loss(&mut g, &[one, one], &[zero, zero], &[], 10.0).unwrap();
        assert!((g.scalar(l) + 1.0).abs() < 1e-15);

        // Linear critic D(x) = sum(x): gradient norm is sqrt(width), so
        // the penalty is (sqrt(w) − 1)² exactly (up to the norm floor).
        let w = 6usize;
        let x_hat = rand_array(&[w], 80);
        let gp = gradient_penalty(&mut g, x_hat, |g, x| g.sum_all(x)).unwrap();
        let expect = ((w as f64).sqrt() - 1.0).powi(2);
        assert!((g.scalar(gp) - expect).abs() < 1e-9);

        // Unit-gradient critic D(x) = sum(x)/sqrt(w): penalty vanishes.
        let x_hat = rand_array(&[w], 81);
        let gp0 = gradient_penalty(&mut g, x_hat, |g, x| {
            let s = g.sum_all(x);
            g.scale(s, 1.0 / (w as f64).sqrt())
        })
        .unwrap();
        assert!(g.scalar(gp0).abs() < 1e-9);

        // Constant critic: no dependence on the input at all.
        let x_hat = rand_array(&[w], 82);
        assert!(gradient_penalty(&mut g, x_hat, |g, _| g.scalar_const(5.0)).is_err());
    }

    #[test]
    fn penalty_enters_critic_loss_with_its_weight() {
        let mut g = Graph::new();
        let r = g.scalar_const(0.0);
        let f = g.scalar_const(0.0);
        let p1 = g.scalar_const(0.04);
        let p2 = g.scalar_const(0.08);
        let l = critic_loss(&mut g, &[r], &[f], &[p1, p2], 10.0).unwrap();
        assert!((g.scalar(l) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn total_weighs_parts_exactly() {
        let mut w = LossWeights::defaults(64);
        w.lambda_gan = 0.1;
        let mut g = Graph::new();
        let one = g.scalar_const(1.0);
        let parts = GeneratorParts {
            recon: one,
            pred: one,
            code: Some(one),
            grad: one,
            reg: one,
            gan: Some(one),
        };
        let total = total_generator_loss(&mut g, &parts, &w).unwrap();
        assert!((g.scalar(total) - 103.101).abs() < 1e-12);

        let zero = g.scalar_const(0.0);
        let zero_parts = GeneratorParts {
            recon: zero,
            pred: zero,
            code: Some(zero),
            grad: zero,
            reg: zero,
            gan: Some(zero),
        };
        let t0 = total_generator_loss(&mut g, &zero_parts, &w).unwrap();
        assert_eq!(g.scalar(t0), 0.0);

        // Omitted optional terms drop out of the sum.
        let no_opt = GeneratorParts { code: None, gan: None, ..zero_parts };
        let t = total_generator_loss(&mut g, &no_opt, &w).unwrap();
        assert_eq!(g.scalar(t), 0.0);
    }

    #[test]
    fn total_random_parts_match_expression_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        for _ in 0..20 {
            let mut w = LossWeights::defaults(16);
            w.lambda_gan = rng.gen_range(0.0..0.2);
            let vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let oracle = vals[0]
                + vals[1]
                + w.lambda_code * vals[2]
                + w.lambda_grad * vals[3]
                + w.lambda_reg * vals[4]
                + w.lambda_gan * vals[5];
            let mut g = Graph::new();
            let vs: Vec<Var> = vals.iter().map(|&v| g.scalar_const(v)).collect();
            let parts = GeneratorParts {
                recon: vs[0],
                pred: vs[1],
                code: Some(vs[2]),
                grad: vs[3],
                reg: vs[4],
                gan: Some(vs[5]),
            };
            let total = total_generator_loss(&mut g, &parts, &w).unwrap();
            assert!((g.scalar(total) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_part_is_reported_by_name() {
        let w = LossWeights::defaults(8);
        let mut g = Graph::new();
        let ok = g.scalar_const(0.5);
        let bad = g.scalar_const(f64::NAN);
        let parts = GeneratorParts {
            recon: ok,
            pred: ok,
            code: Some(bad),
            grad: ok,
            reg: ok,
            gan: None,
        };
        let err = total_generator_loss(&mut g, &parts, &w).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("code"), "{msg}");
    }

    #[test]
    fn weights_validate_ranges() {
        let mut w = LossWeights::defaults(8);
        assert!(w.validate().is_ok());
        w.lambda_code = -1.0;
        assert!(w.validate().is_err());
        w.lambda_code = 100.0;
        w.mmd_c = 0.0;
        assert!(w.validate().is_err());
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        // The distribution term drives the latent statistics; its gradient
        // with respect to one sample must agree with central differences.
        let c = 8.0;
        let dim = 4;
        let zt: Vec<ArrayD<f64>> = (0..3).map(|i| rand_array(&[dim], 100 + i)).collect();
        let zp: Vec<ArrayD<f64>> = (0..3).map(|i| rand_array(&[dim], 110 + i)).collect();
        let eval = |first_pred: &ArrayD<f64>| {
            let mut g = Graph::new();
            let zt_v: Vec<Var> = zt.iter().map(|z| g.constant(z.clone())).collect();
            let mut zp_v: Vec<Var> = vec![g.constant(first_pred.clone())];
            zp_v.extend(zp[1..].iter().map(|z| g.constant(z.clone())));
            let l = mmd_code_loss(&mut g, &zt_v, &zp_v, c).unwrap();
            g.scalar(l)
        };
        let mut g = Graph::new();
        let zt_v: Vec<Var> = zt.iter().map(|z| g.constant(z.clone())).collect();
        let mut zp_v: Vec<Var> = vec![g.leaf(zp[0].clone())];
        zp_v.extend(zp[1..].iter().map(|z| g.constant(z.clone())));
        let l = mmd_code_loss(&mut g, &zt_v, &zp_v, c).unwrap();
        let grad = g.backward(l, &[zp_v[0]])[0].unwrap();
        let analytic = g.value(grad).clone();
        let step = 1e-6;
        for i in 0..dim {
            let mut plus = zp[0].clone();
            plus[[i]] += step;
            let mut minus = zp[0].clone();
            minus[[i]] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            assert!(
                (analytic[[i]] - fd).abs() < 1e-7 * (1.0 + fd.abs()),
                "coord {i}"
            );
        }
    }

    #[test]
    fn gradient_penalty_is_differentiable_in_critic_weights() {
        // Toy critic D(x) = w · x. d gp / d w must match finite
        // differences; this is the double-backward path the critic update
        // exercises.
        let dim = 5;
        let x_val = rand_array(&[dim], 120);
        let w0 = rand_array(&[dim], 121);
        let eval = |wv: &ArrayD<f64>| {
            let mut g = Graph::new();
            let w = g.constant(wv.clone());
            let gp = gradient_penalty(&mut g, x_val.clone(), |g, x| {
                let prod = g.mul(w, x);
                g.sum_all(prod)
            })
            .unwrap();
            g.scalar(gp)
        };
        let mut g = Graph::new();
        let w = g.leaf(w0.clone());
        let gp = gradient_penalty(&mut g, x_val.clone(), |g, x| {
            let prod = g.mul(w, x);
            g.sum_all(prod)
        })
        .unwrap();
        let grad = g.backward(gp, &[w])[0].unwrap();
        let analytic = g.value(grad).clone();
        let step = 1e-6;
        for i in 0..dim {
            let mut plus = w0.clone();
            plus[[i]] += step;
            let mut minus = w0.clone();
            minus[[i]] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            assert!(
                (analytic[[i]] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "coord {i}: analytic {} fd {fd}",
                analytic[[i]]
            );
        }
    }

    #[test]
    fn stencil_application_layouts_agree_with_direct_loops() {
        // Last-axis and middle-axis application must both equal an
        // explicit loop over the stencil matrix.
        let (c, h, w) = (2, 6, 7);
        let x = rand_array(&[c, h, w], 130);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        for axis in [0usize, 1] {
            let n = if axis == 0 { h } else { w };
            let s = stencil_matrix(n, 2).unwrap();
            let out = apply_stencil_axis(&mut g, xv, &s, axis);
            let got = g.value(out).clone();
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut want = 0.0;
                        if axis == 0 {
                            for k in 0..h {
                                want += s[[i, k]] * x[[ci, k, j]];
                            }
                        } else {
                            for k in 0..w {
                                want += s[[j, k]] * x[[ci, i, k]];
                            }
                        }
                        assert!(
                            (got[[ci, i, j]] - want).abs() < 1e-12,
                            "axis {axis} at ({ci},{i},{j})"
                        );
                    }
                }
            }
        }
    }
}
