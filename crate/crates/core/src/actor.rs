//! Semi-implicit actor.
//!
//! The policy is a continuous mixture: `ξ ~ N(0, I)` picks a diagonal Gaussian
//! `N(μ_θ(s, ξ), σ_θ(s, ξ)²)`. Actions are drawn by reparameterization and
//! optionally squashed through `tanh` into `(-1, 1)`. The marginal density is
//! approximated by an `(L + 1)`-component mixture over fresh `ξ` draws.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian_log_pdf, logsumexp, softplus_scalar, AdamState, BoundMlp, MlpParams, Tape, Tensor, Var};
use crate::critic::{repeat_rows, CriticPair};
use crate::error::{ensure_finite, IdacError, Result};

pub const SIGMA_FLOOR: f64 = 1e-3;
pub const PRE_SIGMA_MIN: f64 = -10.0;
pub const PRE_SIGMA_MAX: f64 = 6.0;
/// Stabilizer inside the `tanh` change-of-variables term.
pub const SQUASH_EPS: f64 = 1e-6;
/// Squashed actions are kept this far inside `(-1, 1)`.
pub const SQUASH_LIMIT: f64 = 1.0 - 1e-9;

fn sigma_of(pre: f64) -> f64 {
    softplus_scalar(pre.clamp(PRE_SIGMA_MIN, PRE_SIGMA_MAX)) + SIGMA_FLOOR
}

/// Noise dimensions for `ξ` (policy mixing) and `ε` (critic input).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub xi_dim: usize,
    pub eps_dim: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { xi_dim: 5, eps_dim: 5 }
    }
}

/// `[rows, cols]` of iid standard normals.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("length matches shape")
}

/// Network `concat(s, ξ) -> (μ, pre-σ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorParams {
    net: MlpParams,
    state_dim: usize,
    action_dim: usize,
    xi_dim: usize,
    squash: bool,
}

impl ActorParams {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        xi_dim: usize,
        hidden: &[usize],
        squash: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![state_dim + xi_dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * action_dim);
        let net = MlpParams::init_uniform(&widths, rng)?;
        ActorParams::from_net(net, state_dim, action_dim, xi_dim, squash)
    }

    pub fn from_net(net: MlpParams, state_dim: usize, action_dim: usize, xi_dim: usize, squash: bool) -> Result<Self> {
        if action_dim == 0 || net.input_width() != state_dim + xi_dim || net.output_width() != 2 * action_dim {
            return Err(IdacError::Shape(format!(
                "actor widths {:?} do not match state {state_dim} + noise {xi_dim} -> 2 x action {action_dim}",
                net.widths()
            )));
        }
        Ok(ActorParams {
            net,
            state_dim,
            action_dim,
            xi_dim,
            squash,
        })
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpParams {
        &mut self.net
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn xi_dim(&self) -> usize {
        self.xi_dim
    }

    pub fn squash(&self) -> bool {
        self.squash
    }

    /// Without `ξ` input the mixture collapses to a single Gaussian.
    pub fn is_gaussian(&self) -> bool {
        self.xi_dim == 0
    }

    /// `(μ, σ)` for each row pair of `states` and `xi`, each `[n, dim(A)]`.
    pub fn heads(&self, states: &Tensor, xi: &Tensor) -> Result<(Tensor, Tensor)> {
        if states.cols() != self.state_dim || xi.cols() != self.xi_dim || states.rows() != xi.rows() {
            return Err(IdacError::Shape(format!(
                "actor expects [n, {}] states and [n, {}] noise, got {:?} and {:?}",
                self.state_dim,
                self.xi_dim,
                states.shape(),
                xi.shape()
            )));
        }
        let out = self.net.forward(&Tensor::concat_cols(&[states, xi])?)?;
        ensure_finite(out.data(), "actor output")?;
        let d = self.action_dim;
        let n = out.rows();
        let mut mu = Vec::with_capacity(n * d);
        let mut sigma = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = out.row_slice(r);
            mu.extend_from_slice(&row[..d]);
            sigma.extend(row[d..].iter().map(|&p| sigma_of(p)));
        }
        Ok((Tensor::matrix(n, d, mu)?, Tensor::matrix(n, d, sigma)?))
    }

    fn squash_value(&self, u: f64) -> f64 {
        if self.squash {
            u.tanh().clamp(-SQUASH_LIMIT, SQUASH_LIMIT)
        } else {
            u
        }
    }

    /// `μ + e ⊙ σ` per row, squashed in bounded mode.
    pub fn sample_actions(&self, states: &Tensor, xi: &Tensor, e: &Tensor) -> Result<Tensor> {
        let (mu, sigma) = self.heads(states, xi)?;
        if e.shape() != mu.shape() {
            return Err(IdacError::Shape(format!(
                "reparameterization noise {:?} does not match action batch {:?}",
                e.shape(),
                mu.shape()
            )));
        }
        let data = mu
            .data()
            .iter()
            .zip(sigma.data())
            .zip(e.data())
            .map(|((&m, &s), &n)| self.squash_value(m + n * s))
            .collect();
        Tensor::matrix(mu.rows(), mu.cols(), data)
    }

    pub fn sample_action(&self, state: &[f64], xi: &[f64], e: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .sample_actions(&Tensor::row(state), &Tensor::row(xi), &Tensor::row(e))?
            .into_data())
    }

    /// The action used for evaluation: `μ(s, ξ)`, squashed in bounded mode.
    pub fn mean_action(&self, state: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let (mu, _) = self.heads(&Tensor::row(state), &Tensor::row(xi))?;
        Ok(mu.data().iter().map(|&m| self.squash_value(m)).collect())
    }

    /// Maps an emitted action back to the Gaussian variable and returns it
    /// with the change-of-variables correction `Σ log(1 − a² + ε)`.
    fn unsquash(&self, a: &[f64]) -> (Vec<f64>, f64) {
        if !self.squash {
            return (a.to_vec(), 0.0);
        }
        let u = a.iter().map(|&v| v.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh()).collect();
        let corr = a.iter().map(|&v| (1.0 - v * v + SQUASH_EPS).ln()).sum();
        (u, corr)
    }

    /// `log π(a | s, ξ)`, including the squash correction in bounded mode.
    pub fn conditional_log_density(&self, a: &[f64], state: &[f64], xi: &[f64]) -> Result<f64> {
        self.mixture_log_density(a, state, &[xi.to_vec()])
    }

    /// `log[(1/(L+1)) Σ_ℓ π(a | s, ξ_ℓ)]` over the supplied noise vectors.
    pub fn mixture_log_density(&self, a: &[f64], state: &[f64], xis: &[Vec<f64>]) -> Result<f64> {
        if a.len() != self.action_dim {
            return Err(IdacError::Shape(format!("action has {} entries, expected {}", a.len(), self.action_dim)));
        }
        if xis.is_empty() {
            return Err(IdacError::InvalidInput("mixture needs at least one noise vector".into()));
        }
        let states = Tensor::row(state).select_rows(&vec![0; xis.len()]);
        let (mu, sigma) = self.heads(&states, &Tensor::from_rows(xis)?)?;
        let (u, corr) = self.unsquash(a);
        let comps: Vec<f64> = (0..xis.len())
            .map(|l| gaussian_log_pdf(&u, mu.row_slice(l), sigma.row_slice(l)))
            .collect();
        Ok(logsumexp(&comps) - (xis.len() as f64).ln() - corr)
    }

    /// Monte-Carlo estimate of the bound `Ĥ_L` at `state` with its standard
    /// error, from `m` draws `a ~ π(· | s, ξ₀)` scored against `ξ₀..ξ_L`.
    pub fn entropy_bound_estimate<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        l: usize,
        m: usize,
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        if m == 0 {
            return Err(IdacError::InvalidInput("entropy estimate needs at least one draw".into()));
        }
        let comps = l + 1;
        let chunk = (65_536 / comps).clamp(1, m);
        let d = self.action_dim;
        let mut values = Vec::with_capacity(m);
        while values.len() < m {
            let c = chunk.min(m - values.len());
            let xi = standard_normal(rng, c * comps, self.xi_dim);
            let e = standard_normal(rng, c, d);
            let states = Tensor::row(state).select_rows(&vec![0; c * comps]);
            let (mu, sigma) = self.heads(&states, &xi)?;
            let mut lp = vec![0.0; comps];
            for i in 0..c {
                let base = i * comps;
                let u: Vec<f64> = (0..d)
                    .map(|k| mu.get(base, k) + e.get(i, k) * sigma.get(base, k))
                    .collect();
                let corr: f64 = if self.squash {
                    u.iter().map(|v| (1.0 - v.tanh().powi(2) + SQUASH_EPS).ln()).sum()
                } else {
                    0.0
                };
                for (ell, slot) in lp.iter_mut().enumerate() {
                    *slot = gaussian_log_pdf(&u, mu.row_slice(base + ell), sigma.row_slice(base + ell));
                }
                values.push(logsumexp(&lp) - (comps as f64).ln() - corr);
            }
        }
        ensure_finite(&values, "entropy estimate")?;
        let mean = values.iter().sum::<f64>() / m as f64;
        let var = if m > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64
        } else {
            0.0
        };
        Ok((mean, (var / m as f64).sqrt()))
    }
}

/// Noise for one actor update over `M` states: `J` private `ξ₀` and
/// reparameterization draws per state, and `L` shared `ξ` per state.
#[derive(Clone, Debug, PartialEq)]
pub struct SiaSampleBundle {
    pub j: usize,
    pub l: usize,
    /// `[M·J, dim(ξ)]`, row `i·J + j`.
    pub private_xi: Tensor,
    /// `[M·L, dim(ξ)]`, row `i·L + ℓ`; reused by all `J` actions of state `i`.
    pub shared_xi: Tensor,
    /// `[M·J, dim(A)]`.
    pub e: Tensor,
}

impl SiaSampleBundle {
    pub fn draw<R: Rng + ?Sized>(
        m: usize,
        j: usize,
        l: usize,
        xi_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Self {
        let private_xi = standard_normal(rng, m * j, xi_dim);
        let shared_xi = standard_normal(rng, m * l, xi_dim);
        let e = standard_normal(rng, m * j, action_dim);
        SiaSampleBundle {
            j,
            l,
            private_xi,
            shared_xi,
            e,
        }
    }

    fn batch_len(&self) -> usize {
        if self.j == 0 {
            0
        } else {
            self.private_xi.rows() / self.j
        }
    }
}

/// Entropy coefficient `α = exp(η)` with its own optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyCoef {
    pub eta: f64,
    pub target: f64,
    pub adam: AdamState,
}

impl EntropyCoef {
    pub fn new(initial_alpha: f64, target: f64, lr: f64) -> Result<Self> {
        if !(initial_alpha > 0.0 && initial_alpha.is_finite()) {
            return Err(IdacError::InvalidInput(format!("initial alpha must be positive, got {initial_alpha}")));
        }
        Ok(EntropyCoef {
            eta: initial_alpha.ln(),
            target,
            adam: AdamState::new(1, lr),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.eta.exp()
    }

    /// One Adam step on `η` from the mixture log-densities of fresh actions.
    pub fn update(&mut self, log_pis: &[f64]) -> Result<f64> {
        let (loss, grad) = alpha_loss(self.eta, log_pis, self.target)?;
        let mut eta = [self.eta];
        self.adam.step(&mut eta, &[grad])?;
        self.eta = eta[0];
        Ok(loss)
    }
}

/// `η · mean(−log π̂ − H_target)` and its derivative in `η`.
pub fn alpha_loss(eta: f64, log_pis: &[f64], target: f64) -> Result<(f64, f64)> {
    if log_pis.is_empty() {
        return Err(IdacError::InvalidInput("alpha loss needs at least one log-density".into()));
    }
    ensure_finite(log_pis, "policy log-density")?;
    let grad = log_pis.iter().map(|&lp| -lp - target).sum::<f64>() / log_pis.len() as f64;
    Ok((eta * grad, grad))
}

/// Taped actor objective and values the trainer logs.
#[derive(Debug)]
pub struct ActorLoss {
    pub loss: Var,
    pub bound: BoundMlp,
    /// Mixture log-density of the first action of each state.
    pub log_pi_first: Vec<f64>,
    pub mean_q: f64,
    pub mean_log_pi: f64,
}

/// `mean_{i,j}[ α·log π̂(a_ij | s_i) − ½ Σ_z G_z(s_i, a_ij, ε_ij) ]`.
///
/// Actions carry gradient through the reparameterization. The mixture
/// component means and scales are constants, so `θ` is reached only through
/// the actions. Critic parameters are constants.
pub fn actor_loss(
    tape: &mut Tape,
    actor: &ActorParams,
    critics: &CriticPair,
    states: &Tensor,
    bundle: &SiaSampleBundle,
    eps: &Tensor,
    alpha: f64,
) -> Result<ActorLoss> {
    actor_loss_with_components(tape, actor, None, critics, states, bundle, eps, alpha)
}

/// [`actor_loss`] with the mixture components evaluated under separate
/// parameters. Used to check the gradient by finite differences with the
/// components held fixed.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss_with_components(
    tape: &mut Tape,
    actor: &ActorParams,
    components: Option<&ActorParams>,
    critics: &CriticPair,
    states: &Tensor,
    bundle: &SiaSampleBundle,
    eps: &Tensor,
    alpha: f64,
) -> Result<ActorLoss> {
    let m = states.rows();
    let (j, d) = (bundle.j, actor.action_dim);
    let l = if actor.is_gaussian() { 0 } else { bundle.l };
    if m == 0 || j == 0 || bundle.batch_len() != m || states.cols() != actor.state_dim {
        return Err(IdacError::Shape(format!(
            "actor_loss: {m} states of width {}, bundle for {} states",
            states.cols(),
            bundle.batch_len()
        )));
    }
    if bundle.private_xi.cols() != actor.xi_dim
        || bundle.e.shape() != [m * j, d]
        || (l > 0 && bundle.shared_xi.rows() != m * l)
        || eps.rows() != m * j
        || eps.cols() != critics.eps_dim()
    {
        return Err(IdacError::Shape("actor_loss: noise shapes do not match the batch".into()));
    }
    let mj = m * j;
    let mut xi_all = bundle.private_xi.data().to_vec();
    if l > 0 {
        xi_all.extend_from_slice(bundle.shared_xi.data());
    }
    let xi_all = Tensor::matrix(mj + m * l, actor.xi_dim, xi_all)?;
    let mut s_idx: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, j)).collect();
    s_idx.extend((0..m).flat_map(|i| std::iter::repeat_n(i, l)));
    let s_all = states.select_rows(&s_idx);
    let x = tape.constant(Tensor::concat_cols(&[&s_all, &xi_all])?);

    let bound = actor.net.bind(tape, true);
    let out = bound.forward(tape, x);
    let mu_all = tape.slice_cols(out, 0, d);
    let pre = tape.slice_cols(out, d, d);
    let pre = tape.clamp(pre, PRE_SIGMA_MIN, PRE_SIGMA_MAX);
    let sp = tape.softplus(pre);
    let sigma_all = tape.add_scalar(sp, SIGMA_FLOOR);
    ensure_finite(tape.value(out).data(), "actor output")?;

    let first: Vec<usize> = (0..mj).collect();
    let mu_p = tape.gather_rows(mu_all, first.clone());
    let sigma_p = tape.gather_rows(sigma_all, first);
    let e = tape.constant(bundle.e.clone());
    let noise = tape.mul(e, sigma_p);
    let u = tape.add(mu_p, noise);
    let a = if actor.squash { tape.tanh(u) } else { u };

    let (mu_c, sigma_c) = match components {
        None => (tape.stop_gradient(mu_all), tape.stop_gradient(sigma_all)),
        Some(c) => {
            let (mu, sigma) = c.heads(&s_all, &xi_all)?;
            (tape.constant(mu), tape.constant(sigma))
        }
    };
    let comps = l + 1;
    let mut comp_idx = Vec::with_capacity(mj * comps);
    let mut u_idx = Vec::with_capacity(mj * comps);
    for r in 0..mj {
        let i = r / j;
        comp_idx.push(r);
        comp_idx.extend((0..l).map(|ell| mj + i * l + ell));
        u_idx.extend(std::iter::repeat_n(r, comps));
    }
    let mu_g = tape.gather_rows(mu_c, comp_idx.clone());
    let sigma_g = tape.gather_rows(sigma_c, comp_idx);
    let u_g = tape.gather_rows(u, u_idx);
    let lp = tape.gaussian_log_pdf_rows(u_g, mu_g, sigma_g);
    let lp = tape.reshape(lp, mj, comps);
    let lse = tape.logsumexp_rows(lp);
    let mut log_pi = tape.add_scalar(lse, -(comps as f64).ln());
    if actor.squash {
        let a2 = tape.square(a);
        let neg = tape.neg(a2);
        let inner = tape.add_scalar(neg, 1.0 + SQUASH_EPS);
        let logs = tape.log(inner);
        let corr = tape.sum_cols(logs);
        log_pi = tape.sub(log_pi, corr);
    }

    let s_rep = tape.constant(repeat_rows(states, j));
    let eps_v = tape.constant(eps.clone());
    let critic_in = tape.concat_cols(&[s_rep, a, eps_v]);
    let mut q_sum = None;
    for critic in critics.online() {
        let b = critic.net().bind(tape, false);
        let q = b.forward(tape, critic_in);
        q_sum = Some(match q_sum {
            None => q,
            Some(acc) => tape.add(acc, q),
        });
    }
    let q_sum = q_sum.expect("critic pair is never empty");
    let q_mean = tape.scale(q_sum, 1.0 / critics.len() as f64);
    let weighted = tape.scale(log_pi, alpha);
    let per_action = tape.sub(weighted, q_mean);
    let loss = tape.mean(per_action);

    let lp_vals = tape.value(log_pi).data();
    ensure_finite(lp_vals, "policy log-density")?;
    let log_pi_first = (0..m).map(|i| lp_vals[i * j]).collect();
    let mean_log_pi = lp_vals.iter().sum::<f64>() / mj as f64;
    let q_vals = tape.value(q_mean).data();
    let mean_q = q_vals.iter().sum::<f64>() / mj as f64;
    ensure_finite(&[tape.value(loss).item(), mean_q], "actor loss")?;
    Ok(ActorLoss {
        loss,
        bound,
        log_pi_first,
        mean_q,
        mean_log_pi,
    })
}

/// Linear test actor: `μ = ξ`, `σ = 1`, one action dimension, one state input.
///
/// Its marginal is `N(0, 2)`, which makes the entropy bound checkable.
pub fn linear_test_actor() -> ActorParams {
    let mut net = MlpParams::zeros(&[2, 2]).expect("fixed widths");
    // input (s, ξ), output (μ, pre-σ); weights row-major [in, out]
    net.weight_mut(0)[2] = 1.0;
    net.bias_mut(0)[1] = ((1.0 - SIGMA_FLOOR).exp() - 1.0).ln();
    ActorParams::from_net(net, 1, 1, 1, false).expect("fixed widths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::{CriticMode, DgnParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, PI};

    fn zero_actor(d: usize, xi: usize, squash: bool) -> ActorParams {
        ActorParams::from_net(MlpParams::zeros(&[1 + xi, 2 * d]).unwrap(), 1, d, xi, squash).unwrap()
    }

    /// Unit-σ actor with `μ = bias`, ignoring state and noise.
    fn unit_actor(mu: f64, xi: usize) -> ActorParams {
        let mut a = zero_actor(1, xi, false);
        a.net.bias_mut(0)[0] = mu;
        a.net.bias_mut(0)[1] = ((1.0 - SIGMA_FLOOR).exp() - 1.0).ln();
        a
    }

    fn zero_critics(action_dim: usize) -> CriticPair {
        let c = DgnParams::from_net(MlpParams::zeros(&[1 + action_dim + 1, 4, 1]).unwrap(), 1, action_dim, 1).unwrap();
        CriticPair::from_parts(vec![c.clone(), c.clone()], vec![c.clone(), c], 0.005).unwrap()
    }

    /// `G = 2a`, the slope of `−(a − 1)²` at `a = 0`.
    fn linear_critic() -> CriticPair {
        let mut net = MlpParams::zeros(&[3, 1]).unwrap();
        net.weight_mut(0)[1] = 2.0;
        let c = DgnParams::from_net(net, 1, 1, 1).unwrap();
        CriticPair::from_parts(vec![c.clone()], vec![c], 0.005).unwrap()
    }

    #[test]
    fn sample_action_examples() {
        let a = zero_actor(1, 2, false);
        assert_eq!(a.sample_action(&[0.3], &[1.0, -1.0], &[0.0]).unwrap(), vec![0.0]);
        let got = a.sample_action(&[0.3], &[1.0, -1.0], &[1.0]).unwrap()[0];
        assert!((got - (2f64.ln() + SIGMA_FLOOR)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = ActorParams::new(2, 2, 3, &[8], true, &mut rng).unwrap();
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let xi = standard_normal(&mut r, 1, 3);
            let e = standard_normal(&mut r, 1, 2);
            b.sample_action(&[0.1, 0.2], xi.data(), e.data()).unwrap()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn squashed_actions_stay_inside_box() {
        let mut a = zero_actor(2, 1, true);
        a.net.bias_mut(0)[0] = 40.0;
        a.net.bias_mut(0)[1] = -40.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xi = standard_normal(&mut rng, 200, 1);
        let e = standard_normal(&mut rng, 200, 2);
        let acts = a.sample_actions(&Tensor::zeros(200, 1), &xi, &e).unwrap();
        assert!(acts.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn conditional_density_examples() {
        let a = unit_actor(0.0, 1);
        let lp = a.conditional_log_density(&[0.0], &[0.0], &[0.3]).unwrap();
        assert!((lp + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        let mut two = zero_actor(2, 1, false);
        for k in 2..4 {
            two.net.bias_mut(0)[k] = ((1.0 - SIGMA_FLOOR).exp() - 1.0).ln();
        }
        let lp = two.conditional_log_density(&[0.0, 0.0], &[0.0], &[0.0]).unwrap();
        assert!((lp + (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn densities_integrate_to_one() {
        let plain = unit_actor(0.3, 1);
        let h = 1e-3;
        let total: f64 = (-8000..8000)
            .map(|i| (plain.conditional_log_density(&[i as f64 * h], &[0.0], &[0.0]).unwrap()).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 0.01, "{total}");
        let mut squashed = unit_actor(0.3, 1);
        squashed.squash = true;
        let h = 1e-4;
        let total: f64 = (-9999..10000)
            .map(|i| (squashed.conditional_log_density(&[i as f64 * h], &[0.0], &[0.0]).unwrap()).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 0.01, "{total}");
    }

    #[test]
    fn mixture_density_examples() {
        let lin = linear_test_actor();
        let single = lin.mixture_log_density(&[0.4], &[0.0], &[vec![0.7]]).unwrap();
        assert_eq!(single, lin.conditional_log_density(&[0.4], &[0.0], &[0.7]).unwrap());
        let same = lin.mixture_log_density(&[0.4], &[0.0], &vec![vec![0.7]; 4]).unwrap();
        assert!((same - single).abs() < 1e-12);
        let two = lin.mixture_log_density(&[0.0], &[0.0], &[vec![0.0], vec![1.0]]).unwrap();
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
        assert!((two - (0.5 * (phi(0.0) + phi(1.0))).ln()).abs() < 1e-12, "{two}");
        assert!((two + 1.138009).abs() < 1e-6);
        let fwd = lin.mixture_log_density(&[0.2], &[0.0], &[vec![0.0], vec![1.0], vec![-2.0]]).unwrap();
        let rev = lin.mixture_log_density(&[0.2], &[0.0], &[vec![-2.0], vec![1.0], vec![0.0]]).unwrap();
        assert!((fwd - rev).abs() < 1e-14);
    }

    #[test]
    fn gaussian_actor_bound_is_gaussian_entropy() {
        let a = unit_actor(0.0, 1);
        let target = -0.5 * (2.0 * PI * E).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for l in [0, 3] {
            let (h, se) = a.entropy_bound_estimate(&[0.0], l, 20_000, &mut rng).unwrap();
            assert!((h - target).abs() < 4.0 * se + 1e-3, "L={l}: {h} vs {target}");
        }
    }

    #[test]
    fn linear_model_bound_decreases() {
        let a = linear_test_actor();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h0, s0) = a.entropy_bound_estimate(&[0.0], 0, 20_000, &mut rng).unwrap();
        let (h5, s5) = a.entropy_bound_estimate(&[0.0], 5, 20_000, &mut rng).unwrap();
        assert!((h0 + 0.5 * (2.0 * PI * E).ln()).abs() < 4.0 * s0);
        assert!(h0 > h5 - 3.0 * (s0 * s0 + s5 * s5).sqrt());
        assert!(h5 > -0.5 * (4.0 * PI * E).ln() - 3.0 * s5);
    }

    #[test]
    fn alpha_loss_examples() {
        let (_, g) = alpha_loss(0.3, &[1.0, 1.0], -1.0).unwrap();
        assert_eq!(g, 0.0);
        // entropy −log π̂ = 2 above target −1: positive coefficient, η falls
        let mut coef = EntropyCoef::new(1.0, -1.0, 1e-2).unwrap();
        coef.update(&[-2.0, -2.0]).unwrap();
        assert!(coef.alpha() < 1.0);
        let mut coef = EntropyCoef::new(1.0, -1.0, 1e-2).unwrap();
        coef.update(&[3.0]).unwrap();
        assert!(coef.alpha() > 1.0);
        assert!(alpha_loss(0.0, &[], 0.0).is_err());
    }

    fn loss_value(actor: &ActorParams, critics: &CriticPair, alpha: f64, seed: u64, j: usize, l: usize) -> (f64, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 3;
        let states = standard_normal(&mut rng, m, 1);
        let bundle = SiaSampleBundle::draw(m, j, l, actor.xi_dim, actor.action_dim, &mut rng);
        let eps = standard_normal(&mut rng, m * j, 1);
        let mut tape = Tape::new();
        let out = actor_loss(&mut tape, actor, critics, &states, &bundle, &eps, alpha).unwrap();
        let grads = tape.backward(out.loss).unwrap();
        (tape.value(out.loss).item(), out.bound.flat_grad(&tape, &grads))
    }

    #[test]
    fn zero_alpha_zero_critics_gives_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let actor = ActorParams::new(1, 1, 2, &[8], true, &mut rng).unwrap();
        let (loss, grad) = loss_value(&actor, &zero_critics(1), 0.0, 1, 4, 3);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_alpha_loss_is_negative_mean_value() {
        let actor = unit_actor(0.25, 1);
        let critics = linear_critic();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let states = standard_normal(&mut rng, 2, 1);
        let bundle = SiaSampleBundle::draw(2, 3, 2, 1, 1, &mut rng);
        let eps = standard_normal(&mut rng, 6, 1);
        let mut tape = Tape::new();
        let out = actor_loss(&mut tape, &actor, &critics, &states, &bundle, &eps, 0.0).unwrap();
        let acts = actor
            .sample_actions(&repeat_rows(&states, 3), &bundle.private_xi, &bundle.e)
            .unwrap();
        let expected = -acts.data().iter().map(|a| 2.0 * a).sum::<f64>() / 6.0;
        assert!((tape.value(out.loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn one_adam_step_moves_mean_toward_higher_value() {
        let actor = unit_actor(0.0, 1);
        let (_, grad) = loss_value(&actor, &linear_critic(), 0.0, 3, 1, 0);
        let mut params = actor.net.values().to_vec();
        let mut adam = AdamState::new(params.len(), 1e-2);
        adam.step(&mut params, &grad).unwrap();
        // μ is the first output bias: index 2·2 weights precede the biases
        let mu_bias = actor.net.widths()[0] * 2;
        assert!(params[mu_bias] > 0.0);
    }

    #[test]
    fn mixture_components_are_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let actor = ActorParams::new(1, 1, 2, &[6], false, &mut rng).unwrap();
        let critics = zero_critics(1);
        let states = standard_normal(&mut rng, 2, 1);
        let bundle = SiaSampleBundle::draw(2, 2, 3, 2, 1, &mut rng);
        let eps = standard_normal(&mut rng, 4, 1);
        let mut tape = Tape::new();
        let out = actor_loss(&mut tape, &actor, &critics, &states, &bundle, &eps, 1.0).unwrap();
        let g_auto = out.bound.flat_grad(&tape, &tape.backward(out.loss).unwrap());
        let mut tape = Tape::new();
        let frozen =
            actor_loss_with_components(&mut tape, &actor, Some(&actor), &critics, &states, &bundle, &eps, 1.0).unwrap();
        let g_frozen = frozen.bound.flat_grad(&tape, &tape.backward(frozen.loss).unwrap());
        for (a, b) in g_auto.iter().zip(&g_frozen) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_mode_ignores_shared_noise() {
        let actor = unit_actor(0.1, 0);
        let critics = CriticPair::new(CriticMode::Single, (1, 1, 1), &[4], 0.005, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let states = standard_normal(&mut rng, 2, 1);
        let bundle = SiaSampleBundle::draw(2, 2, 5, 0, 1, &mut rng);
        let eps = standard_normal(&mut rng, 4, 1);
        let mut tape = Tape::new();
        let out = actor_loss(&mut tape, &actor, &critics, &states, &bundle, &eps, 1.0).unwrap();
        let acts = actor.sample_actions(&repeat_rows(&states, 2), &bundle.private_xi, &bundle.e).unwrap();
        let lp = actor.conditional_log_density(&[acts.get(0, 0)], states.row_slice(0), &[]).unwrap();
        assert!((out.log_pi_first[0] - lp).abs() < 1e-12);
    }
}
