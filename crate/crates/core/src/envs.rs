//! Small environments with known return distributions or optimal returns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{IdacError, Result};

pub const ENV_NAMES: [&str; 4] = ["gaussian_chain", "bimodal_bandit", "point_reach", "correlated_action"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionBounds {
    Unbounded,
    Box { low: Vec<f64>, high: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub bounds: ActionBounds,
    pub horizon: usize,
}

impl EnvSpec {
    pub fn is_bounded(&self) -> bool {
        matches!(self.bounds, ActionBounds::Box { .. })
    }

    /// Maps a normalized action in `[-1, 1]` onto the action box. Unbounded
    /// environments take the action as is.
    pub fn scale_action(&self, normalized: &[f64]) -> Vec<f64> {
        match &self.bounds {
            ActionBounds::Unbounded => normalized.to_vec(),
            ActionBounds::Box { low, high } => normalized
                .iter()
                .zip(low.iter().zip(high))
                .map(|(&a, (&lo, &hi))| lo + 0.5 * (a.clamp(-1.0, 1.0) + 1.0) * (hi - lo))
                .collect(),
        }
    }
}

/// Closed-form knowledge about an environment's returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OracleReturn {
    /// The discounted return from the current state is `N(mean, std²)` for
    /// every policy.
    Gaussian { mean: f64, std: f64 },
    /// Optimal discounted return depends on the start state; see
    /// [`point_reach_optimal_return`].
    PerStartState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub state: Vec<f64>,
    pub reward: f64,
    /// True terminal: no bootstrapping past it.
    pub done: bool,
    /// Time limit reached without a terminal state.
    pub truncated: bool,
}

impl StepResult {
    pub fn episode_over(&self) -> bool {
        self.done || self.truncated
    }
}

/// Common stepping interface. Each instance owns its seeded generator.
pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
    /// Closed-form return information from the current state, if any.
    fn oracle(&self, _gamma: f64) -> Option<OracleReturn> {
        None
    }
    /// Copy including the generator state.
    fn box_clone(&self) -> Box<dyn Env>;
    /// Replaces the generator with one seeded from `seed`.
    fn reseed(&mut self, seed: u64);
}

fn check_action(spec: &EnvSpec, action: &[f64]) -> Result<()> {
    if action.len() != spec.action_dim {
        return Err(IdacError::Shape(format!(
            "{} expects {} action dimensions, got {}",
            spec.name,
            spec.action_dim,
            action.len()
        )));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(IdacError::InvalidInput(format!("non-finite action {action:?}")));
    }
    Ok(())
}

/// Per-environment settings. Fields irrelevant to the chosen environment are
/// ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvOptions {
    pub chain_mu: Vec<f64>,
    pub chain_sigma: Vec<f64>,
    pub point_reach_horizon: usize,
}

impl Default for EnvOptions {
    fn default() -> Self {
        EnvOptions {
            chain_mu: vec![1.0, 0.5, -0.5],
            chain_sigma: vec![1.0, 1.0, 1.0],
            point_reach_horizon: 50,
        }
    }
}

/// Builds an environment by name.
pub fn make_env(name: &str, options: &EnvOptions, seed: u64) -> Result<Box<dyn Env>> {
    Ok(match name {
        "gaussian_chain" => Box::new(GaussianChain::new(options.chain_mu.clone(), options.chain_sigma.clone(), seed)?),
        "bimodal_bandit" => Box::new(BimodalBandit::new(seed)),
        "point_reach" => Box::new(PointReach::new(options.point_reach_horizon, seed)?),
        "correlated_action" => Box::new(CorrelatedAction::new(seed)),
        other => return Err(IdacError::UnknownEnv(other.to_string())),
    })
}

/// Action-independent chain: step `t` pays `r ~ N(μ_t, σ_t²)`. The state is
/// the one-hot step index.
#[derive(Clone, Debug)]
pub struct GaussianChain {
    spec: EnvSpec,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    t: usize,
    rng: ChaCha8Rng,
}

impl GaussianChain {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, seed: u64) -> Result<Self> {
        if mu.is_empty() || mu.len() != sigma.len() {
            return Err(IdacError::InvalidInput("chain needs equal, non-empty mean and std lists".into()));
        }
        if sigma.iter().any(|&s| !(s >= 0.0 && s.is_finite())) || mu.iter().any(|m| !m.is_finite()) {
            return Err(IdacError::InvalidInput("chain stds must be finite and non-negative".into()));
        }
        let horizon = mu.len();
        Ok(GaussianChain {
            spec: EnvSpec {
                name: "gaussian_chain".into(),
                state_dim: horizon,
                action_dim: 1,
                bounds: ActionBounds::Unbounded,
                horizon,
            },
            mu,
            sigma,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn state(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.spec.horizon];
        if self.t < s.len() {
            s[self.t] = 1.0;
        }
        s
    }
}

/// `N(Σ γ^t μ_t, Σ γ^{2t} σ_t²)`.
pub fn gaussian_chain_return(mu: &[f64], sigma: &[f64], gamma: f64) -> (f64, f64) {
    let mean = mu.iter().enumerate().map(|(t, m)| gamma.powi(t as i32) * m).sum();
    let var: f64 = sigma
        .iter()
        .enumerate()
        .map(|(t, s)| gamma.powi(2 * t as i32) * s * s)
        .sum();
    (mean, var.sqrt())
}

impl Env for GaussianChain {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn box_clone(&self) -> Box<dyn Env> {
        Box::new(self.clone())
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn reset(&mut self) -> Vec<f64> {
        self.t = 0;
        self.state()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        check_action(&self.spec, action)?;
        if self.t >= self.spec.horizon {
            return Err(IdacError::InvalidInput("step after the chain ended; call reset".into()));
        }
        let reward = if self.sigma[self.t] == 0.0 {
            self.mu[self.t]
        } else {
            Normal::new(self.mu[self.t], self.sigma[self.t])
                .expect("validated std")
                .sample(&mut self.rng)
        };
        self.t += 1;
        Ok(StepResult {
            state: self.state(),
            reward,
            done: self.t == self.spec.horizon,
            truncated: false,
        })
    }

    fn oracle(&self, gamma: f64) -> Option<OracleReturn> {
        let t = self.t.min(self.spec.horizon);
        let (mean, std) = gaussian_chain_return(&self.mu[t..], &self.sigma[t..], gamma);
        Some(OracleReturn::Gaussian { mean, std })
    }
}

/// One-step bandit on `[-1, 1]` with equal peaks at `±0.5`.
#[derive(Clone, Debug)]
pub struct BimodalBandit {
    spec: EnvSpec,
}

pub fn bimodal_reward(a: f64) -> f64 {
    (-(a - 0.5).powi(2) / 0.02).exp() + (-(a + 0.5).powi(2) / 0.02).exp()
}

impl BimodalBandit {
    pub fn new(_seed: u64) -> Self {
        BimodalBandit {
            spec: EnvSpec {
                name: "bimodal_bandit".into(),
                state_dim: 1,
                action_dim: 1,
                bounds: ActionBounds::Box {
                    low: vec![-1.0],
                    high: vec![1.0],
                },
                horizon: 1,
            },
        }
    }
}

impl Env for BimodalBandit {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn box_clone(&self) -> Box<dyn Env> {
        Box::new(self.clone())
    }

    fn reseed(&mut self, _seed: u64) {}

    fn reset(&mut self) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        check_action(&self.spec, action)?;
        Ok(StepResult {
            state: vec![0.0],
            reward: bimodal_reward(action[0].clamp(-1.0, 1.0)),
            done: true,
            truncated: false,
        })
    }
}

/// Move a point toward the origin with bounded velocity; reward `−‖s'‖`.
#[derive(Clone, Debug)]
pub struct PointReach {
    spec: EnvSpec,
    pos: [f64; 2],
    t: usize,
    rng: ChaCha8Rng,
}

pub const POINT_REACH_MAX_SPEED: f64 = 0.2;

impl PointReach {
    pub fn new(horizon: usize, seed: u64) -> Result<Self> {
        if horizon == 0 {
            return Err(IdacError::InvalidInput("point_reach horizon must be at least 1".into()));
        }
        Ok(PointReach {
            spec: EnvSpec {
                name: "point_reach".into(),
                state_dim: 2,
                action_dim: 2,
                bounds: ActionBounds::Box {
                    low: vec![-POINT_REACH_MAX_SPEED; 2],
                    high: vec![POINT_REACH_MAX_SPEED; 2],
                },
                horizon,
            },
            pos: [0.0; 2],
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Places the point without drawing a random start.
    pub fn reset_to(&mut self, start: [f64; 2]) -> Vec<f64> {
        self.pos = start;
        self.t = 0;
        self.pos.to_vec()
    }
}

impl Env for PointReach {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn box_clone(&self) -> Box<dyn Env> {
        Box::new(self.clone())
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn reset(&mut self) -> Vec<f64> {
        let start = [self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)];
        self.reset_to(start)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        check_action(&self.spec, action)?;
        for (p, &a) in self.pos.iter_mut().zip(action) {
            *p += a.clamp(-POINT_REACH_MAX_SPEED, POINT_REACH_MAX_SPEED);
        }
        self.t += 1;
        Ok(StepResult {
            state: self.pos.to_vec(),
            reward: -(self.pos[0].hypot(self.pos[1])),
            done: false,
            truncated: self.t >= self.spec.horizon,
        })
    }

    fn oracle(&self, _gamma: f64) -> Option<OracleReturn> {
        Some(OracleReturn::PerStartState)
    }
}

/// The greedy controller: each coordinate moves toward zero at full speed.
/// The reachable set after `t` steps is a box, so this minimizes every
/// step's distance at once.
pub fn point_reach_optimal_action(state: &[f64]) -> Vec<f64> {
    state
        .iter()
        .map(|&x| (-x).clamp(-POINT_REACH_MAX_SPEED, POINT_REACH_MAX_SPEED))
        .collect()
}

/// `−Σ_{t=1}^{H} γ^{t−1} ‖(max(0, |x₀| − 0.2t), max(0, |y₀| − 0.2t))‖`.
pub fn point_reach_optimal_return(start: [f64; 2], horizon: usize, gamma: f64) -> f64 {
    (1..=horizon)
        .map(|t| {
            let step = POINT_REACH_MAX_SPEED * t as f64;
            let dx = (start[0].abs() - step).max(0.0);
            let dy = (start[1].abs() - step).max(0.0);
            -gamma.powi(t as i32 - 1) * dx.hypot(dy)
        })
        .sum()
}

/// One-step, two-dimensional task whose reward ridge runs along `a₁ = a₂`.
#[derive(Clone, Debug)]
pub struct CorrelatedAction {
    spec: EnvSpec,
}

/// Weight on the off-diagonal term `(a₁ − a₂)²`.
pub const CORRELATION_WEIGHT: f64 = 10.0;

/// `−(10·(a₁ − a₂)² + (a₁ + a₂ − 1)²)`.
pub fn correlated_reward(a1: f64, a2: f64) -> f64 {
    -(CORRELATION_WEIGHT * (a1 - a2).powi(2) + (a1 + a2 - 1.0).powi(2))
}

impl CorrelatedAction {
    pub fn new(_seed: u64) -> Self {
        CorrelatedAction {
            spec: EnvSpec {
                name: "correlated_action".into(),
                state_dim: 1,
                action_dim: 2,
                bounds: ActionBounds::Box {
                    low: vec![-1.0; 2],
                    high: vec![1.0; 2],
                },
                horizon: 1,
            },
        }
    }
}

impl Env for CorrelatedAction {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn box_clone(&self) -> Box<dyn Env> {
        Box::new(self.clone())
    }

    fn reseed(&mut self, _seed: u64) {}

    fn reset(&mut self) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        check_action(&self.spec, action)?;
        let (a1, a2) = (action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0));
        Ok(StepResult {
            state: vec![0.0],
            reward: correlated_reward(a1, a2),
            done: true,
            truncated: false,
        })
    }
}
