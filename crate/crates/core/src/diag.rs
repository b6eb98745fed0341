//! Diagnostics on a trained agent: policy shape, critic-vs-target matching,
//! and the entropy bound as a function of `L`.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::actor::{standard_normal, ActorParams};
use crate::autodiff::Tensor;
use crate::critic::{build_targets, generate_samples, TransitionBatch};
use crate::distributional::{empirical_wasserstein, sort_samples, SampleVec};
use crate::envs::{make_env, Env, EnvSpec, OracleReturn};
use crate::error::{IdacError, Result};
use crate::stats::{excess_kurtosis, pearson, skewness};
use crate::trainer::{rng_stream, write_csv, Agent, Checkpoint};

pub const POLICY_SAMPLES: usize = 1000;
pub const MATCH_SAMPLES: usize = 10_000;
pub const ENTROPY_LS: [usize; 8] = [0, 1, 2, 5, 10, 21, 50, 100];
pub const ENTROPY_DRAWS: usize = 10_000;

const STREAM_DIAG: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiagMode {
    PolicySamples,
    QuantileMatch,
    EntropyCurve,
}

impl DiagMode {
    pub const ALL: [DiagMode; 3] = [DiagMode::PolicySamples, DiagMode::QuantileMatch, DiagMode::EntropyCurve];

    pub fn as_str(self) -> &'static str {
        match self {
            DiagMode::PolicySamples => "policy_samples",
            DiagMode::QuantileMatch => "quantile_match",
            DiagMode::EntropyCurve => "entropy_curve",
        }
    }
}

impl std::str::FromStr for DiagMode {
    type Err = IdacError;

    fn from_str(s: &str) -> Result<Self> {
        DiagMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| IdacError::InvalidInput(format!("unknown diag mode {s:?}")))
    }
}

/// Resets `env` and advances it `index` steps with the actor's mean action.
/// Returns the state reached; `env` is left positioned there.
pub fn probe_state<R: Rng + ?Sized>(actor: &ActorParams, env: &mut dyn Env, index: usize, rng: &mut R) -> Result<Vec<f64>> {
    let spec = env.spec().clone();
    let mut s = env.reset();
    for t in 0..index {
        let xi = standard_normal(rng, 1, actor.xi_dim());
        let step = env.step(&spec.scale_action(&actor.mean_action(&s, xi.data())?))?;
        if step.episode_over() {
            return Err(IdacError::InvalidInput(format!(
                "state index {index} lies past the end of the episode (ended after {} steps)",
                t + 1
            )));
        }
        s = step.state;
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairCorrelation {
    pub dim_i: usize,
    pub dim_j: usize,
    pub r: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DimMoments {
    pub dim: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

/// Environment-scale actions drawn at one state, with shape statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySamples {
    pub actions: Vec<Vec<f64>>,
    pub correlations: Vec<PairCorrelation>,
    pub moments: Vec<DimMoments>,
}

pub fn policy_samples<R: Rng + ?Sized>(
    actor: &ActorParams,
    spec: &EnvSpec,
    state: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<PolicySamples> {
    if n < 3 {
        return Err(IdacError::InvalidInput("policy_samples needs at least 3 draws".into()));
    }
    let d = actor.action_dim();
    let states = Tensor::row(state).select_rows(&vec![0; n]);
    let xi = standard_normal(rng, n, actor.xi_dim());
    let e = standard_normal(rng, n, d);
    let a = actor.sample_actions(&states, &xi, &e)?;
    let actions: Vec<Vec<f64>> = (0..n).map(|i| spec.scale_action(a.row_slice(i))).collect();
    let column = |k: usize| actions.iter().map(|r| r[k]).collect::<Vec<f64>>();
    let mut correlations = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            let (r, p_value) = pearson(&column(i), &column(j))?;
            correlations.push(PairCorrelation { dim_i: i, dim_j: j, r, p_value });
        }
    }
    let moments = (0..d)
        .map(|k| {
            let x = column(k);
            let (mean, std) = crate::trainer::mean_std(&x);
            DimMoments {
                dim: k,
                mean,
                std,
                skewness: skewness(&x),
                excess_kurtosis: excess_kurtosis(&x),
            }
        })
        .collect();
    Ok(PolicySamples {
        actions,
        correlations,
        moments,
    })
}

/// Generator samples `G(s, a, ε)` of the first online critic next to
/// Bellman targets `r + γ G̃(s', a', ε')` from the same `(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileMatch {
    pub action: Vec<f64>,
    pub generator: Vec<f64>,
    pub target: Vec<f64>,
    pub w1: f64,
    /// Closed-form return law at the probed state, when the env has one.
    pub analytic: Option<(f64, f64)>,
    /// `W₁` between the generator samples and the closed-form law.
    pub w1_analytic: Option<f64>,
}

/// `W₁` between an empirical sample and `N(mean, std²)`, using the normal
/// quantile at each order statistic's midpoint level.
pub fn w1_to_normal(samples: &[f64], mean: f64, std: f64) -> Result<f64> {
    let sorted = sort_samples(&SampleVec::new(samples.to_vec())?);
    let n = sorted.len() as f64;
    if std == 0.0 {
        return Ok(sorted.values().iter().map(|x| (x - mean).abs()).sum::<f64>() / n);
    }
    let normal = Normal::new(mean, std).map_err(|e| IdacError::InvalidInput(e.to_string()))?;
    Ok(sorted
        .values()
        .iter()
        .enumerate()
        .map(|(i, x)| (x - normal.inverse_cdf((i as f64 + 0.5) / n)).abs())
        .sum::<f64>()
        / n)
}

/// `env` must sit at `state`; it is cloned, never stepped.
pub fn quantile_match<R: Rng + ?Sized>(
    agent: &Agent,
    env: &dyn Env,
    state: &[f64],
    gamma: f64,
    independent_target_noise: bool,
    k: usize,
    n: usize,
    rng: &mut R,
) -> Result<QuantileMatch> {
    if n == 0 || k == 0 {
        return Err(IdacError::InvalidInput("quantile_match needs at least one draw".into()));
    }
    // targets come in rows of k, as in training, so the twin minimum sees
    // sorted sample sets rather than single draws
    let rows = n.div_ceil(k);
    let actor = &agent.actor;
    let spec = env.spec().clone();
    let eps_dim = agent.critics.eps_dim();
    let da = actor.action_dim();
    let xi = standard_normal(rng, 1, actor.xi_dim());
    let e = standard_normal(rng, 1, da);
    let action = actor.sample_action(state, xi.data(), e.data())?;
    let eps = standard_normal(rng, n, eps_dim);
    let generator = generate_samples(&agent.critics.online()[0], state, &action, &eps)?.into_values();

    let scaled = spec.scale_action(&action);
    let (mut rewards, mut next, mut dones) = (Vec::with_capacity(rows), Vec::with_capacity(rows), Vec::with_capacity(rows));
    for _ in 0..rows {
        let mut sim = env.box_clone();
        sim.reseed(rng.next_u64());
        let step = sim.step(&scaled)?;
        rewards.push(step.reward);
        dones.push(step.done);
        next.push(step.state);
    }
    let batch = TransitionBatch {
        states: Tensor::row(state).select_rows(&vec![0; rows]),
        actions: Tensor::row(&action).select_rows(&vec![0; rows]),
        rewards,
        next_states: Tensor::from_rows(&next)?,
        dones,
    };
    let xi_next = standard_normal(rng, rows, actor.xi_dim());
    let e_next = standard_normal(rng, rows, da);
    let next_actions = actor.sample_actions(&batch.next_states, &xi_next, &e_next)?;
    let eps_next = standard_normal(rng, rows * k, eps_dim);
    let eps_next2 = independent_target_noise.then(|| standard_normal(rng, rows * k, eps_dim));
    let mut target = build_targets(&agent.critics, &batch, &next_actions, &eps_next, eps_next2.as_ref(), gamma)?.into_data();
    target.truncate(n);

    let w1 = empirical_wasserstein(&SampleVec::new(generator.clone())?, &SampleVec::new(target.clone())?, 1.0)?;
    let analytic = match env.oracle(gamma) {
        Some(OracleReturn::Gaussian { mean, std }) => Some((mean, std)),
        _ => None,
    };
    let w1_analytic = analytic.map(|(m, s)| w1_to_normal(&generator, m, s)).transpose()?;
    Ok(QuantileMatch {
        action: scaled,
        generator,
        target,
        w1,
        analytic,
        w1_analytic,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyPoint {
    pub l: usize,
    pub h_hat: f64,
    pub std_err: f64,
}

/// `Ĥ_L` at one state for each `L` in `ls`, from `m` draws each.
pub fn entropy_curve<R: Rng + ?Sized>(
    actor: &ActorParams,
    state: &[f64],
    ls: &[usize],
    m: usize,
    rng: &mut R,
) -> Result<Vec<EntropyPoint>> {
    ls.iter()
        .map(|&l| {
            let (h_hat, std_err) = actor.entropy_bound_estimate(state, l, m, rng)?;
            Ok(EntropyPoint { l, h_hat, std_err })
        })
        .collect()
}

/// Shape statistics as one long table.
#[derive(Serialize)]
struct SummaryRow<'a> {
    statistic: &'a str,
    dim_i: usize,
    dim_j: Option<usize>,
    value: f64,
}

#[derive(Serialize)]
struct MatchRow {
    generator: f64,
    target: f64,
}

const SUMMARY_HEADER: [&str; 4] = ["statistic", "dim_i", "dim_j", "value"];

fn policy_summary_rows(p: &PolicySamples) -> Vec<SummaryRow<'static>> {
    let mut rows = Vec::new();
    for c in &p.correlations {
        rows.push(SummaryRow { statistic: "pearson_r", dim_i: c.dim_i, dim_j: Some(c.dim_j), value: c.r });
        rows.push(SummaryRow { statistic: "pearson_p", dim_i: c.dim_i, dim_j: Some(c.dim_j), value: c.p_value });
    }
    for m in &p.moments {
        for (statistic, value) in [
            ("mean", m.mean),
            ("std", m.std),
            ("skewness", m.skewness),
            ("excess_kurtosis", m.excess_kurtosis),
        ] {
            rows.push(SummaryRow { statistic, dim_i: m.dim, dim_j: None, value });
        }
    }
    rows
}

pub fn write_policy_samples(dir: &Path, p: &PolicySamples) -> Result<Vec<PathBuf>> {
    let d = p.actions.first().map_or(0, Vec::len);
    let header: Vec<String> = (0..d).map(|k| format!("a{k}")).collect();
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let samples = dir.join("policy_samples.csv");
    write_csv(&samples, &header_ref, &p.actions)?;
    let summary = dir.join("policy_samples_summary.csv");
    write_csv(&summary, &SUMMARY_HEADER, &policy_summary_rows(p))?;
    Ok(vec![samples, summary])
}

pub fn write_quantile_match(dir: &Path, q: &QuantileMatch) -> Result<Vec<PathBuf>> {
    let samples = dir.join("quantile_match.csv");
    let rows: Vec<MatchRow> = q
        .generator
        .iter()
        .zip(&q.target)
        .map(|(&generator, &target)| MatchRow { generator, target })
        .collect();
    write_csv(&samples, &["generator", "target"], &rows)?;
    let mut summary_rows = vec![SummaryRow { statistic: "w1", dim_i: 0, dim_j: None, value: q.w1 }];
    if let (Some((mean, std)), Some(w)) = (q.analytic, q.w1_analytic) {
        summary_rows.push(SummaryRow { statistic: "analytic_mean", dim_i: 0, dim_j: None, value: mean });
        summary_rows.push(SummaryRow { statistic: "analytic_std", dim_i: 0, dim_j: None, value: std });
        summary_rows.push(SummaryRow { statistic: "w1_analytic", dim_i: 0, dim_j: None, value: w });
    }
    let summary = dir.join("quantile_match_summary.csv");
    write_csv(&summary, &SUMMARY_HEADER, &summary_rows)?;
    Ok(vec![samples, summary])
}

pub fn write_entropy_curve(dir: &Path, points: &[EntropyPoint]) -> Result<Vec<PathBuf>> {
    let path = dir.join("entropy_curve.csv");
    write_csv(&path, &["l", "h_hat", "std_err"], points)?;
    Ok(vec![path])
}

/// Runs one diagnostic on a checkpoint and writes its CSV files to `out_dir`.
/// `env` must have the checkpoint's state and action shapes.
pub fn run_diag(
    ckpt: &Checkpoint,
    env: &str,
    mode: DiagMode,
    state_index: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut rng = rng_stream(seed, STREAM_DIAG);
    let mut env = make_env(env, &ckpt.config.env_options, rng.next_u64())?;
    let spec = env.spec().clone();
    if spec.state_dim != ckpt.env_spec.state_dim || spec.action_dim != ckpt.env_spec.action_dim {
        return Err(IdacError::Config(format!(
            "checkpoint was trained on {} (state {}, action {}); {} has state {}, action {}",
            ckpt.env_spec.name,
            ckpt.env_spec.state_dim,
            ckpt.env_spec.action_dim,
            spec.name,
            spec.state_dim,
            spec.action_dim
        )));
    }
    let agent = &ckpt.agent;
    let state = probe_state(&agent.actor, env.as_mut(), state_index, &mut rng)?;
    std::fs::create_dir_all(out_dir)?;
    match mode {
        DiagMode::PolicySamples => {
            let p = policy_samples(&agent.actor, &spec, &state, POLICY_SAMPLES, &mut rng)?;
            write_policy_samples(out_dir, &p)
        }
        DiagMode::QuantileMatch => {
            let q = quantile_match(
                agent,
                env.as_ref(),
                &state,
                ckpt.config.gamma,
                ckpt.config.independent_target_noise,
                ckpt.config.k,
                MATCH_SAMPLES,
                &mut rng,
            )?;
            write_quantile_match(out_dir, &q)
        }
        DiagMode::EntropyCurve => {
            let points = entropy_curve(&agent.actor, &state, &ENTROPY_LS, ENTROPY_DRAWS, &mut rng)?;
            write_entropy_curve(out_dir, &points)
        }
    }
}
