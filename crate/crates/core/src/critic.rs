//! Twin-delayed generator critics.
//!
//! A generator network `G(s, a, ε)` turns noise into one sample of the return
//! distribution. Each critic is trained so that its sorted samples match the
//! sorted Bellman targets `r + γ·G̃(s', a', ε')` built from the delayed copies.
//! Targets never carry gradient: they are computed outside the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundMlp, MlpParams, Tape, Tensor, Var};
use crate::distributional::{
    empirical_wasserstein, quantile_huber_loss_rows, sort_rows, twin_min_target_rows,
    QuantileConfig, SampleVec,
};
use crate::error::{ensure_finite, IdacError, Result};

/// Generator network mapping `concat(s, a, ε)` to a scalar return sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgnParams {
    net: MlpParams,
    state_dim: usize,
    action_dim: usize,
    eps_dim: usize,
}

impl DgnParams {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        eps_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![state_dim + action_dim + eps_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let net = MlpParams::init_uniform(&widths, rng)?;
        DgnParams::from_net(net, state_dim, action_dim, eps_dim)
    }

    pub fn from_net(net: MlpParams, state_dim: usize, action_dim: usize, eps_dim: usize) -> Result<Self> {
        if net.input_width() != state_dim + action_dim + eps_dim || net.output_width() != 1 {
            return Err(IdacError::Shape(format!(
                "generator widths {:?} do not match state {state_dim} + action {action_dim} + noise {eps_dim} -> 1",
                net.widths()
            )));
        }
        Ok(DgnParams {
            net,
            state_dim,
            action_dim,
            eps_dim,
        })
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpParams {
        &mut self.net
    }

    pub fn eps_dim(&self) -> usize {
        self.eps_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// One return sample per row of `(states, actions, eps)`.
    pub fn evaluate(&self, states: &Tensor, actions: &Tensor, eps: &Tensor) -> Result<Vec<f64>> {
        let input = Tensor::concat_cols(&[states, actions, eps])?;
        let out = self.net.forward(&input)?;
        let values = out.into_data();
        ensure_finite(&values, "generator output")?;
        Ok(values)
    }
}

/// `x_k = G(s, a, ε_k)` for each row of `eps` (`[K, ε-dim]`), unsorted.
pub fn generate_samples(dgn: &DgnParams, state: &[f64], action: &[f64], eps: &Tensor) -> Result<SampleVec> {
    let k = eps.rows();
    let s = Tensor::row(state).select_rows(&vec![0; k]);
    let a = Tensor::row(action).select_rows(&vec![0; k]);
    SampleVec::new(dgn.evaluate(&s, &a, eps)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    Twin,
    Single,
}

/// Online critics and their delayed copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticPair {
    online: Vec<DgnParams>,
    delayed: Vec<DgnParams>,
    tau: f64,
}

impl CriticPair {
    /// Independently initialized online critics; delayed copies start equal.
    pub fn new<R: Rng + ?Sized>(
        mode: CriticMode,
        dims: (usize, usize, usize),
        hidden: &[usize],
        tau: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = match mode {
            CriticMode::Twin => 2,
            CriticMode::Single => 1,
        };
        let online = (0..n)
            .map(|_| DgnParams::new(dims.0, dims.1, dims.2, hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        CriticPair::from_parts(online.clone(), online, tau)
    }

    pub fn from_parts(online: Vec<DgnParams>, delayed: Vec<DgnParams>, tau: f64) -> Result<Self> {
        if online.is_empty() || online.len() > 2 || online.len() != delayed.len() {
            return Err(IdacError::InvalidInput("critic pair needs one or two online/delayed critics".into()));
        }
        if online
            .iter()
            .zip(&delayed)
            .any(|(a, b)| a.net.widths() != b.net.widths())
        {
            return Err(IdacError::Shape("delayed critic architecture differs from online".into()));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(IdacError::InvalidInput(format!("smoothing factor must lie in (0, 1], got {tau}")));
        }
        Ok(CriticPair { online, delayed, tau })
    }

    pub fn mode(&self) -> CriticMode {
        if self.online.len() == 2 {
            CriticMode::Twin
        } else {
            CriticMode::Single
        }
    }

    pub fn len(&self) -> usize {
        self.online.len()
    }

    pub fn is_empty(&self) -> bool {
        self.online.is_empty()
    }

    pub fn online(&self) -> &[DgnParams] {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut [DgnParams] {
        &mut self.online
    }

    pub fn delayed(&self) -> &[DgnParams] {
        &self.delayed
    }

    pub fn delayed_mut(&mut self) -> &mut [DgnParams] {
        &mut self.delayed
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.tau = tau;
    }

    pub fn eps_dim(&self) -> usize {
        self.online[0].eps_dim
    }

    /// `ω̃ ← τ·ω + (1 − τ)·ω̃` for every parameter.
    pub fn soft_update(&mut self) {
        self.soft_update_by(self.tau);
    }

    /// Soft update with an explicit factor in `[0, 1]`; `0` leaves the
    /// delayed copies untouched.
    pub fn soft_update_by(&mut self, tau: f64) {
        debug_assert!((0.0..=1.0).contains(&tau));
        for (on, del) in self.online.iter().zip(self.delayed.iter_mut()) {
            for (d, &o) in del.net.values_mut().iter_mut().zip(on.net.values()) {
                *d = tau * o + (1.0 - tau) * *d;
            }
        }
    }

    /// Monte-Carlo mean of `G(s, a, ε)` over the draws in `eps` and over the
    /// online critics.
    pub fn mean_value(&self, state: &[f64], action: &[f64], eps: &Tensor) -> Result<f64> {
        if eps.rows() == 0 {
            return Err(IdacError::InvalidInput("mean_value needs at least one noise draw".into()));
        }
        let mut total = 0.0;
        for critic in &self.online {
            total += generate_samples(critic, state, action, eps)?.values().iter().sum::<f64>();
        }
        Ok(total / (eps.rows() * self.online.len()) as f64)
    }
}

/// A minibatch of transitions, stacked row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let m = self.rewards.len();
        if self.states.rows() != m
            || self.actions.rows() != m
            || self.next_states.rows() != m
            || self.dones.len() != m
        {
            return Err(IdacError::Shape("transition batch fields have different lengths".into()));
        }
        Ok(())
    }
}

/// Repeats each row of `t` `times` times, keeping row order.
pub(crate) fn repeat_rows(t: &Tensor, times: usize) -> Tensor {
    let idx: Vec<usize> = (0..t.rows()).flat_map(|r| std::iter::repeat_n(r, times)).collect();
    t.select_rows(&idx)
}

/// Sorted Bellman targets `[M, K]` for a batch.
///
/// `eps_next` holds `M·K` noise rows (row `i·K + k` feeds transition `i`).
/// The same rows go to both delayed critics unless `eps_next_second` is given.
pub fn build_targets(
    pair: &CriticPair,
    batch: &TransitionBatch,
    next_actions: &Tensor,
    eps_next: &Tensor,
    eps_next_second: Option<&Tensor>,
    gamma: f64,
) -> Result<Tensor> {
    batch.validate()?;
    let m = batch.len();
    if m == 0 || next_actions.rows() != m || eps_next.rows() % m != 0 || eps_next.rows() == 0 {
        return Err(IdacError::Shape(format!(
            "build_targets: batch {m}, next actions {}, noise rows {}",
            next_actions.rows(),
            eps_next.rows()
        )));
    }
    let k = eps_next.rows() / m;
    if let Some(second) = eps_next_second {
        if second.shape() != eps_next.shape() {
            return Err(IdacError::Shape("build_targets: second noise block has a different shape".into()));
        }
    }
    let s = repeat_rows(&batch.next_states, k);
    let a = repeat_rows(next_actions, k);
    let per_critic = pair
        .delayed
        .iter()
        .enumerate()
        .map(|(z, critic)| {
            let eps = match (z, eps_next_second) {
                (1, Some(second)) => second,
                _ => eps_next,
            };
            let g = critic.evaluate(&s, &a, eps)?;
            let mut y = Vec::with_capacity(m * k);
            for i in 0..m {
                let boot = if batch.dones[i] { 0.0 } else { gamma };
                y.extend(g[i * k..(i + 1) * k].iter().map(|v| batch.rewards[i] + boot * v));
            }
            Tensor::matrix(m, k, y)
        })
        .collect::<Result<Vec<_>>>()?;
    let targets = match per_critic.as_slice() {
        [y1, y2] => twin_min_target_rows(y1, y2)?,
        [y1] => sort_rows(y1),
        _ => unreachable!("critic pair holds one or two critics"),
    };
    ensure_finite(targets.data(), "Bellman target")?;
    Ok(targets)
}

/// Taped critic loss with handles needed to pull out per-critic gradients.
#[derive(Debug)]
pub struct CriticLoss {
    pub total: Var,
    pub per_critic: Vec<f64>,
    pub bound: Vec<BoundMlp>,
    pub sorted_samples: Vec<Var>,
}

/// Sum over online critics of the batch-averaged quantile Huber loss between
/// each critic's sorted samples and the shared targets.
///
/// `eps` holds `M·K` rows shared by both online critics.
pub fn critic_loss(
    tape: &mut Tape,
    pair: &CriticPair,
    batch: &TransitionBatch,
    targets: &Tensor,
    eps: &Tensor,
    cfg: &QuantileConfig,
) -> Result<CriticLoss> {
    batch.validate()?;
    let m = batch.len();
    let k = cfg.k();
    if targets.rows() != m || targets.cols() != k || eps.rows() != m * k {
        return Err(IdacError::Shape(format!(
            "critic_loss: batch {m}, K {k}, targets {:?}, noise rows {}",
            targets.shape(),
            eps.rows()
        )));
    }
    let input = Tensor::concat_cols(&[&repeat_rows(&batch.states, k), &repeat_rows(&batch.actions, k), eps])?;
    let x = tape.constant(input);
    let mut bound = Vec::with_capacity(pair.len());
    let mut losses = Vec::with_capacity(pair.len());
    let mut sorted_samples = Vec::with_capacity(pair.len());
    for critic in &pair.online {
        let b = critic.net.bind(tape, true);
        let out = b.forward(tape, x);
        let samples = tape.reshape(out, m, k);
        let sorted = tape.sort_rows(samples);
        let loss = quantile_huber_loss_rows(tape, sorted, targets, cfg.kappa());
        bound.push(b);
        losses.push(loss);
        sorted_samples.push(sorted);
    }
    let per_critic: Vec<f64> = losses.iter().map(|&l| tape.value(l).item()).collect();
    ensure_finite(&per_critic, "critic loss")?;
    let total = match losses.as_slice() {
        [a, b] => tape.add(*a, *b),
        [a] => *a,
        _ => unreachable!("critic pair holds one or two critics"),
    };
    Ok(CriticLoss {
        total,
        per_critic,
        bound,
        sorted_samples,
    })
}

/// Batch-averaged W₁ between sorted generator samples and targets.
pub fn batch_wasserstein(sorted: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    for r in 0..sorted.rows() {
        let x = SampleVec::new(sorted.row_slice(r).to_vec())?;
        let y = SampleVec::new(targets.row_slice(r).to_vec())?;
        total += empirical_wasserstein(&x, &y, 1.0)?;
    }
    Ok(total / sorted.rows().max(1) as f64)
}
