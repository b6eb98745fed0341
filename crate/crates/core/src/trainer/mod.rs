//! Off-policy training loop.
//!
//! Each environment step is followed by one update of the critics, then the
//! actor, then `α`, then a soft update of the delayed critics.

mod checkpoint;
mod config;
mod metrics;
mod replay;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{PolicyKind, TrainerConfig};
pub use metrics::{read_metrics, write_csv, write_text, CsvLog, MetricsRow, METRICS_HEADER, TIMING_HEADER};
pub use replay::{ReplayBuffer, Transition};

use crate::actor::{actor_loss, standard_normal, ActorParams, EntropyCoef, SiaSampleBundle, SQUASH_LIMIT};
use crate::autodiff::{AdamState, Tape};
use crate::critic::{batch_wasserstein, build_targets, critic_loss, CriticPair};
use crate::distributional::QuantileConfig;
use crate::envs::{make_env, Env, EnvSpec};
use crate::error::{IdacError, Result};
use metrics::Mean;

/// Independent generator for one purpose within a run.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_SETUP: u64 = 0;
const STREAM_COLLECT: u64 = 1;
const STREAM_UPDATE: u64 = 2;
const STREAM_EVAL: u64 = 3;

/// All learned state of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub actor: ActorParams,
    pub critics: CriticPair,
    pub actor_opt: AdamState,
    pub critic_opts: Vec<AdamState>,
    pub entropy: EntropyCoef,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(config: &TrainerConfig, spec: &EnvSpec, rng: &mut R) -> Result<Self> {
        let actor = ActorParams::new(
            spec.state_dim,
            spec.action_dim,
            config.actor_xi_dim(),
            &config.hidden,
            spec.is_bounded(),
            rng,
        )?;
        let critics = CriticPair::new(
            config.critic,
            (spec.state_dim, spec.action_dim, config.eps_dim),
            &config.hidden,
            config.tau,
            rng,
        )?;
        let target = config.target_entropy.unwrap_or(-(spec.action_dim as f64));
        Ok(Agent {
            actor_opt: AdamState::new(actor.net().num_params(), config.lr),
            critic_opts: critics
                .online()
                .iter()
                .map(|c| AdamState::new(c.net().num_params(), config.lr))
                .collect(),
            entropy: EntropyCoef::new(config.initial_alpha, target, config.lr)?,
            actor,
            critics,
        })
    }
}

/// Averages reported for one gradient update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub critic_losses: Vec<f64>,
    pub actor_loss: Option<f64>,
    pub alpha: f64,
    pub entropy: Option<f64>,
    pub wasserstein: f64,
}

/// One update of critics, actor and `α` from a sampled batch.
pub fn update_agent<R: Rng + ?Sized>(
    agent: &mut Agent,
    buffer: &ReplayBuffer,
    config: &TrainerConfig,
    rng: &mut R,
) -> Result<Option<StepStats>> {
    let m = config.batch_size;
    if buffer.len() < m {
        return Ok(None);
    }
    let batch = buffer.sample(m, rng)?;
    let (k, da) = (config.k, agent.actor.action_dim());
    let xi_dim = agent.actor.xi_dim();
    let eps_dim = config.eps_dim;
    let qcfg = QuantileConfig::new(k, config.kappa)?;

    // targets from the delayed critics at a' ~ π(·|s', ξ₀)
    let xi_next = standard_normal(rng, m, xi_dim);
    let e_next = standard_normal(rng, m, da);
    let next_actions = agent.actor.sample_actions(&batch.next_states, &xi_next, &e_next)?;
    let eps_next = standard_normal(rng, m * k, eps_dim);
    let eps_next2 = config
        .independent_target_noise
        .then(|| standard_normal(rng, m * k, eps_dim));
    let targets = build_targets(&agent.critics, &batch, &next_actions, &eps_next, eps_next2.as_ref(), config.gamma)?;

    let eps = standard_normal(rng, m * k, eps_dim);
    let mut tape = Tape::new();
    let closs = critic_loss(&mut tape, &agent.critics, &batch, &targets, &eps, &qcfg)?;
    let wasserstein = batch_wasserstein(tape.value(closs.sorted_samples[0]), &targets)?;
    let grads = tape.backward(closs.total)?;
    let flat: Vec<Vec<f64>> = closs.bound.iter().map(|b| b.flat_grad(&tape, &grads)).collect();
    drop(tape);
    for ((critic, opt), g) in agent
        .critics
        .online_mut()
        .iter_mut()
        .zip(agent.critic_opts.iter_mut())
        .zip(&flat)
    {
        opt.step(critic.net_mut().values_mut(), g)?;
    }

    let (mut actor_loss_value, mut entropy) = (None, None);
    if !config.freeze_policy {
        let bundle = SiaSampleBundle::draw(m, config.j, config.l, xi_dim, da, rng);
        let eps_a = standard_normal(rng, m * config.j, eps_dim);
        let mut tape = Tape::new();
        let alpha = agent.entropy.alpha();
        let out = actor_loss(&mut tape, &agent.actor, &agent.critics, &batch.states, &bundle, &eps_a, alpha)?;
        let grads = tape.backward(out.loss)?;
        let g = out.bound.flat_grad(&tape, &grads);
        actor_loss_value = Some(tape.value(out.loss).item());
        drop(tape);
        agent.actor_opt.step(agent.actor.net_mut().values_mut(), &g)?;
        entropy = Some(-out.log_pi_first.iter().sum::<f64>() / m as f64);
        if config.learn_alpha {
            agent.entropy.update(&out.log_pi_first)?;
        }
    }

    agent.critics.soft_update();
    Ok(Some(StepStats {
        critic_losses: closs.per_critic,
        actor_loss: actor_loss_value,
        alpha: agent.entropy.alpha(),
        entropy,
        wasserstein,
    }))
}

/// Undiscounted returns of `n` episodes under `policy`, which maps a state to
/// an environment-scale action.
pub fn rollout_returns(
    env: &mut dyn Env,
    n: usize,
    policy: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = env.reset();
        let mut total = 0.0;
        loop {
            let step = env.step(&policy(&s)?)?;
            total += step.reward;
            if step.episode_over() {
                break;
            }
            s = step.state;
        }
        out.push(total);
    }
    Ok(out)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluation protocol: a fresh `ξ` each step, act with the (squashed) mean.
pub fn evaluate<R: Rng + ?Sized>(actor: &ActorParams, env: &mut dyn Env, n: usize, rng: &mut R) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(IdacError::InvalidInput("evaluation needs at least one rollout".into()));
    }
    let spec = env.spec().clone();
    let returns = rollout_returns(env, n, &mut |s| {
        let xi = standard_normal(rng, 1, actor.xi_dim());
        Ok(spec.scale_action(&actor.mean_action(s, xi.data())?))
    })?;
    Ok(mean_std(&returns))
}

/// Returns of the policy that acts uniformly over the action box (standard
/// normal when unbounded).
pub fn random_policy_returns<R: Rng + ?Sized>(env: &mut dyn Env, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let spec = env.spec().clone();
    rollout_returns(env, n, &mut |_| Ok(spec.scale_action(&random_normalized_action(&spec, rng))))
}

fn random_normalized_action<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Vec<f64> {
    if spec.is_bounded() {
        (0..spec.action_dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
    } else {
        standard_normal(rng, 1, spec.action_dim).into_data()
    }
}

/// A training run in progress.
pub struct Trainer {
    config: TrainerConfig,
    spec: EnvSpec,
    env: Box<dyn Env>,
    eval_env: Box<dyn Env>,
    agent: Agent,
    buffer: ReplayBuffer,
    collect_rng: ChaCha8Rng,
    update_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    step: u64,
    state: Vec<f64>,
    episode_return: f64,
    finished_returns: Mean,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let mut setup = rng_stream(config.seed, STREAM_SETUP);
        let mut env = make_env(&config.env, &config.env_options, setup.next_u64())?;
        let eval_env = make_env(&config.env, &config.env_options, setup.next_u64())?;
        let spec = env.spec().clone();
        let agent = Agent::new(&config, &spec, &mut setup)?;
        let state = env.reset();
        Ok(Trainer {
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            collect_rng: rng_stream(config.seed, STREAM_COLLECT),
            update_rng: rng_stream(config.seed, STREAM_UPDATE),
            eval_rng: rng_stream(config.seed, STREAM_EVAL),
            config,
            spec,
            env,
            eval_env,
            agent,
            step: 0,
            state,
            episode_return: 0.0,
            finished_returns: Mean::default(),
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn agent_mut(&mut self) -> &mut Agent {
        &mut self.agent
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.step, self.config.clone(), self.spec.clone(), self.agent.clone())
    }

    /// Acts once in the environment and stores the transition. The stored
    /// action is the normalized one the critics see.
    pub fn collect_step(&mut self) -> Result<Transition> {
        let normalized = if self.step < self.config.warmup_steps {
            random_normalized_action(&self.spec, &mut self.collect_rng)
        } else {
            let xi = standard_normal(&mut self.collect_rng, 1, self.agent.actor.xi_dim());
            let e = standard_normal(&mut self.collect_rng, 1, self.spec.action_dim);
            self.agent.actor.sample_action(&self.state, xi.data(), e.data())?
        };
        let normalized: Vec<f64> = if self.spec.is_bounded() {
            normalized.iter().map(|a| a.clamp(-SQUASH_LIMIT, SQUASH_LIMIT)).collect()
        } else {
            normalized
        };
        let result = self.env.step(&self.spec.scale_action(&normalized))?;
        let transition = Transition {
            state: std::mem::take(&mut self.state),
            action: normalized,
            reward: result.reward,
            next_state: result.state.clone(),
            done: result.done,
        };
        self.buffer.push(transition.clone())?;
        self.episode_return += result.reward;
        if result.episode_over() {
            self.finished_returns.push(self.episode_return);
            self.episode_return = 0.0;
            self.state = self.env.reset();
        } else {
            self.state = result.state;
        }
        self.step += 1;
        Ok(transition)
    }

    /// One gradient update; `None` while the buffer holds less than a batch.
    pub fn train_step(&mut self) -> Result<Option<StepStats>> {
        update_agent(&mut self.agent, &self.buffer, &self.config, &mut self.update_rng)
    }

    pub fn evaluate(&mut self, n: usize) -> Result<(f64, f64)> {
        evaluate(&self.agent.actor, self.eval_env.as_mut(), n, &mut self.eval_rng)
    }
}

/// What a finished run leaves behind.
#[derive(Debug)]
pub struct RunSummary {
    pub metrics: Vec<MetricsRow>,
    pub agent: Agent,
    pub final_checkpoint: Option<PathBuf>,
}

/// Files written under a run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.csv")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn diag(&self) -> PathBuf {
        self.root.join("diag")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}.json"))
    }
}

struct Outputs {
    paths: RunPaths,
    metrics: CsvLog,
    timing: CsvLog,
}

#[derive(Default)]
struct IntervalStats {
    critic: [Mean; 2],
    actor: Mean,
    entropy: Mean,
    wasserstein: Mean,
    updates: u64,
}

/// Runs a whole training job. With `out_dir`, writes `metrics.csv`,
/// `timing.csv` and `checkpoints/{initial,latest,final}.json`; on divergence
/// it writes `checkpoints/last_good.json` and stops.
pub fn run(config: TrainerConfig, out_dir: Option<&Path>) -> Result<RunSummary> {
    let mut trainer = Trainer::new(config)?;
    let mut outputs = match out_dir {
        Some(dir) => {
            let paths = RunPaths::new(dir);
            std::fs::create_dir_all(paths.checkpoints())?;
            std::fs::create_dir_all(paths.diag())?;
            let metrics = CsvLog::create(&paths.metrics(), &METRICS_HEADER)?;
            let timing = CsvLog::create(&paths.timing(), &TIMING_HEADER)?;
            save_checkpoint(&paths.checkpoint("initial"), &trainer.checkpoint())?;
            Some(Outputs { paths, metrics, timing })
        }
        None => None,
    };
    let cfg = trainer.config.clone();
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut interval = IntervalStats::default();
    while trainer.step < cfg.total_steps {
        trainer.collect_step()?;
        if trainer.step > cfg.warmup_steps {
            let before = trainer.agent.clone();
            match trainer.train_step() {
                Ok(Some(stats)) => {
                    for (slot, v) in interval.critic.iter_mut().zip(&stats.critic_losses) {
                        slot.push(*v);
                    }
                    if let Some(v) = stats.actor_loss {
                        interval.actor.push(v);
                    }
                    if let Some(v) = stats.entropy {
                        interval.entropy.push(v);
                    }
                    interval.wasserstein.push(stats.wasserstein);
                    interval.updates += 1;
                }
                Ok(None) => {}
                Err(e) if e.is_divergence() => {
                    let Some(out) = &outputs else { return Err(e) };
                    let path = out.paths.checkpoint("last_good");
                    let mut ckpt = trainer.checkpoint();
                    ckpt.agent = before;
                    ckpt.step = trainer.step - 1;
                    save_checkpoint(&path, &ckpt)?;
                    return Err(IdacError::DivergedWithCheckpoint {
                        step: trainer.step,
                        reason: e.to_string(),
                        checkpoint: path,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        if trainer.step % cfg.eval_interval == 0 {
            let (mean, std) = trainer.evaluate(cfg.eval_rollouts)?;
            let row = MetricsRow {
                step: trainer.step,
                eval_return_mean: mean,
                eval_return_std: std,
                train_return_mean: trainer.finished_returns.take(),
                critic1_loss: interval.critic[0].take(),
                critic2_loss: interval.critic[1].take(),
                actor_loss: interval.actor.take(),
                alpha: trainer.agent.entropy.alpha(),
                entropy: interval.entropy.take(),
                wasserstein: interval.wasserstein.take(),
                updates: std::mem::take(&mut interval.updates),
            };
            if let Some(out) = &mut outputs {
                out.metrics.append(&row)?;
                let secs = started.elapsed().as_secs_f64();
                out.timing.append_record([
                    trainer.step.to_string(),
                    format!("{secs:.3}"),
                    format!("{:.2}", trainer.step as f64 / secs.max(1e-9)),
                ])?;
                save_checkpoint(&out.paths.checkpoint("latest"), &trainer.checkpoint())?;
            }
            rows.push(row);
        }
    }
    let final_checkpoint = match &outputs {
        Some(out) => {
            let path = out.paths.checkpoint("final");
            save_checkpoint(&path, &trainer.checkpoint())?;
            Some(path)
        }
        None => None,
    };
    Ok(RunSummary {
        metrics: rows,
        agent: trainer.agent,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::CriticMode;

    fn tiny(env: &str) -> TrainerConfig {
        TrainerConfig {
            env: env.into(),
            hidden: vec![8],
            batch_size: 8,
            k: 4,
            j: 3,
            l: 2,
            warmup_steps: 20,
            total_steps: 60,
            eval_interval: 20,
            eval_rollouts: 2,
            buffer_capacity: 1000,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn underfilled_buffer_skips_update() {
        let mut t = Trainer::new(tiny("bimodal_bandit")).unwrap();
        for _ in 0..5 {
            t.collect_step().unwrap();
        }
        assert_eq!(t.train_step().unwrap(), None);
    }

    #[test]
    fn warmup_actions_stay_in_box_and_trajectories_repeat() {
        let run_once = || {
            let mut t = Trainer::new(tiny("point_reach")).unwrap();
            (0..40).map(|_| t.collect_step().unwrap()).collect::<Vec<_>>()
        };
        let a = run_once();
        assert_eq!(a, run_once());
        assert!(a.iter().all(|tr| tr.action.iter().all(|v| v.abs() < 1.0)));
    }

    #[test]
    fn zero_alpha_zero_critics_leave_actor_unchanged() {
        let mut cfg = tiny("bimodal_bandit");
        cfg.learn_alpha = false;
        let mut t = Trainer::new(cfg).unwrap();
        for c in t.agent.critics.online_mut() {
            c.net_mut().values_mut().fill(0.0);
        }
        for opt in &mut t.agent.critic_opts {
            opt.lr = 0.0;
        }
        t.agent.entropy.eta = f64::NEG_INFINITY;
        for _ in 0..10 {
            t.collect_step().unwrap();
        }
        let before = t.agent.actor.clone();
        t.train_step().unwrap().unwrap();
        assert_eq!(t.agent.actor, before);
    }

    #[test]
    fn delayed_critics_change_only_by_soft_update() {
        let mut t = Trainer::new(tiny("point_reach")).unwrap();
        for _ in 0..30 {
            t.collect_step().unwrap();
        }
        let delayed_before = t.agent.critics.delayed().to_vec();
        t.train_step().unwrap().unwrap();
        let tau = t.config.tau;
        for (z, d) in t.agent.critics.delayed().iter().enumerate() {
            let online = t.agent.critics.online()[z].net().values();
            for ((&got, &old), &on) in d.net().values().iter().zip(delayed_before[z].net().values()).zip(online) {
                assert_eq!(got, tau * on + (1.0 - tau) * old);
            }
        }
    }

    #[test]
    fn run_reports_one_critic_in_single_mode_and_repeats() {
        let mut cfg = tiny("correlated_action");
        cfg.critic = CriticMode::Single;
        let a = run(cfg.clone(), None).unwrap();
        assert_eq!(a.metrics.len(), 3);
        assert!(a.metrics[2].critic1_loss.is_some());
        assert!(a.metrics.iter().all(|r| r.critic2_loss.is_none()));
        let b = run(cfg, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(a.metrics.iter().all(|r| r.alpha > 0.0));
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny("gaussian_chain");
        cfg.total_steps = 0;
        let out = run(cfg, Some(dir.path())).unwrap();
        assert!(out.metrics.is_empty());
        let paths = RunPaths::new(dir.path());
        assert!(paths.checkpoint("initial").exists());
        assert!(paths.checkpoint("final").exists());
        assert!(read_metrics(&paths.metrics()).unwrap().is_empty());
    }

    #[test]
    fn gaussian_actor_on_deterministic_env_has_zero_eval_spread() {
        let mut cfg = tiny("correlated_action");
        cfg.policy = PolicyKind::Gaussian;
        cfg.xi_dim = 0;
        let mut t = Trainer::new(cfg).unwrap();
        let (_, std) = t.evaluate(5).unwrap();
        assert_eq!(std, 0.0);
    }

    #[test]
    fn optimal_controller_matches_closed_form() {
        use crate::envs::{point_reach_optimal_action, point_reach_optimal_return, PointReach};
        let mut env = PointReach::new(50, 3).unwrap();
        let returns = rollout_returns(&mut env, 20, &mut |s| Ok(point_reach_optimal_action(s))).unwrap();
        // same seed, same start states: stepping never touches the generator
        let mut env = PointReach::new(50, 3).unwrap();
        for r in returns {
            let s = env.reset();
            let best = point_reach_optimal_return([s[0], s[1]], 50, 1.0);
            assert!((r - best).abs() < 1e-9);
        }
    }
}
