use serde::{Deserialize, Serialize};

use crate::critic::CriticMode;
use crate::envs::{EnvOptions, ENV_NAMES};
use crate::error::{IdacError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Semi-implicit mixture policy.
    Sia,
    /// Diagonal Gaussian: the actor receives no `ξ`.
    Gaussian,
}

/// Every knob of a training run. Missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub env: String,
    pub env_options: EnvOptions,
    pub seed: u64,
    pub gamma: f64,
    pub lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub k: usize,
    pub j: usize,
    pub l: usize,
    pub kappa: f64,
    pub xi_dim: usize,
    pub eps_dim: usize,
    pub hidden: Vec<usize>,
    /// `None` means `−dim(A)`.
    pub target_entropy: Option<f64>,
    pub initial_alpha: f64,
    pub learn_alpha: bool,
    pub buffer_capacity: usize,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_rollouts: usize,
    pub critic: CriticMode,
    pub policy: PolicyKind,
    pub independent_target_noise: bool,
    /// Keep the actor and `α` at their initial values; only critics learn.
    pub freeze_policy: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            env: "point_reach".into(),
            env_options: EnvOptions::default(),
            seed: 0,
            gamma: 0.99,
            lr: 3e-4,
            tau: 0.005,
            batch_size: 256,
            k: 51,
            j: 51,
            l: 21,
            kappa: 1.0,
            xi_dim: 5,
            eps_dim: 5,
            hidden: vec![256, 256],
            target_entropy: None,
            initial_alpha: 1.0,
            learn_alpha: true,
            buffer_capacity: 1_000_000,
            warmup_steps: 1000,
            total_steps: 1_000_000,
            eval_interval: 2000,
            eval_rollouts: 5,
            critic: CriticMode::Twin,
            policy: PolicyKind::Sia,
            independent_target_noise: false,
            freeze_policy: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(IdacError::Config(msg));
        if !ENV_NAMES.contains(&self.env.as_str()) {
            return bad(format!("env must be one of {ENV_NAMES:?}, got `{}`", self.env));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be positive, got {}", self.kappa));
        }
        if !(self.initial_alpha > 0.0 && self.initial_alpha.is_finite()) {
            return bad(format!("initial_alpha must be positive, got {}", self.initial_alpha));
        }
        if let Some(h) = self.target_entropy {
            if !h.is_finite() {
                return bad("target_entropy must be finite".into());
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("j", self.j),
            ("eps_dim", self.eps_dim),
            ("buffer_capacity", self.buffer_capacity),
            ("eval_rollouts", self.eval_rollouts),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.policy == PolicyKind::Sia && self.xi_dim == 0 {
            return bad("the sia policy needs xi_dim > 0; use policy = \"gaussian\" instead".into());
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer_capacity must be at least batch_size".into());
        }
        Ok(())
    }

    /// `ξ` width the actor actually receives.
    pub fn actor_xi_dim(&self) -> usize {
        match self.policy {
            PolicyKind::Sia => self.xi_dim,
            PolicyKind::Gaussian => 0,
        }
    }
}
