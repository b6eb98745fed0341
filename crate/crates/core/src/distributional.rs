//! Comparing empirical return distributions.
//!
//! Samples are sorted and paired with the quantile levels `τ_k = (k − ½)/K`.
//! The quantile-regression Huber loss then pulls the k-th smallest generator
//! sample toward the τ_k-quantile of the target samples.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{IdacError, Result};

/// Number of quantiles `K` and Huber threshold `κ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileConfig {
    k: usize,
    kappa: f64,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        QuantileConfig { k: 51, kappa: 1.0 }
    }
}

impl QuantileConfig {
    pub fn new(k: usize, kappa: f64) -> Result<Self> {
        if k == 0 {
            return Err(IdacError::InvalidInput("quantile count must be positive".into()));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(IdacError::InvalidInput(format!("kappa must be positive, got {kappa}")));
        }
        Ok(QuantileConfig { k, kappa })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// `τ_k = (k − 0.5)/K` for `k = 1..=K`.
    pub fn taus(&self) -> Vec<f64> {
        quantile_levels(self.k)
    }
}

pub fn quantile_levels(k: usize) -> Vec<f64> {
    (1..=k).map(|i| (i as f64 - 0.5) / k as f64).collect()
}

/// Finite return samples, with a flag recording whether they are sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleVec {
    values: Vec<f64>,
    sorted: bool,
}

impl SampleVec {
    /// Rejects NaN and infinite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(IdacError::InvalidInput(format!("sample value {bad} is not finite")));
        }
        let sorted = values.windows(2).all(|w| w[0] <= w[1]);
        Ok(SampleVec { values, sorted })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_sorted(&self) -> bool {
        self.sorted
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Stable ascending sort.
pub fn sort_samples(x: &SampleVec) -> SampleVec {
    let mut values = x.values.clone();
    // stable, and total since entries are finite
    values.sort_by(f64::total_cmp);
    SampleVec {
        values,
        sorted: true,
    }
}

fn same_len(a: &SampleVec, b: &SampleVec, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(IdacError::Shape(format!(
            "{what}: sample counts differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(IdacError::InvalidInput(format!("{what}: empty sample vectors")));
    }
    Ok(())
}

/// `W_p` between two equal-size empirical distributions: pair the sorted
/// samples and take `((1/K) Σ |x_k − y_k|^p)^{1/p}`.
pub fn empirical_wasserstein(x: &SampleVec, y: &SampleVec, p: f64) -> Result<f64> {
    same_len(x, y, "empirical_wasserstein")?;
    if !(p >= 1.0) {
        return Err(IdacError::InvalidInput(format!("wasserstein order must be >= 1, got {p}")));
    }
    let xs = if x.sorted { x.clone() } else { sort_samples(x) };
    let ys = if y.sorted { y.clone() } else { sort_samples(y) };
    let k = xs.len() as f64;
    let mean: f64 = xs
        .values
        .iter()
        .zip(&ys.values)
        .map(|(a, b)| (a - b).abs().powf(p))
        .sum::<f64>()
        / k;
    Ok(mean.powf(1.0 / p))
}

/// Huber penalty `L_κ(u)`.
fn huber(u: f64, kappa: f64) -> f64 {
    if u.abs() <= kappa {
        0.5 * u * u
    } else {
        kappa * (u.abs() - 0.5 * kappa)
    }
}

/// Asymmetric quantile Huber penalty `|τ − 1{u<0}| · L_κ(u) / κ`.
pub fn huber_rho(u: f64, tau: f64, kappa: f64) -> f64 {
    let weight = if u < 0.0 { (tau - 1.0).abs() } else { tau };
    weight * huber(u, kappa) / kappa
}

/// `d/du` of [`huber_rho`].
pub fn huber_rho_grad(u: f64, tau: f64, kappa: f64) -> f64 {
    let weight = if u < 0.0 { 1.0 - tau } else { tau };
    let dl = if u.abs() <= kappa { u } else { kappa * u.signum() };
    weight * dl / kappa
}

/// `(1/K²) Σ_k Σ_k' ρ^κ_{τ_k}(y_k' − x_k)` for one sorted sample vector.
pub fn quantile_huber_loss(x_sorted: &SampleVec, y: &SampleVec, cfg: &QuantileConfig) -> Result<f64> {
    same_len(x_sorted, y, "quantile_huber_loss")?;
    if !x_sorted.sorted {
        return Err(IdacError::InvalidInput(
            "quantile_huber_loss needs sorted generator samples".into(),
        ));
    }
    Ok(row_loss(&x_sorted.values, &y.values, cfg.kappa))
}

fn row_loss(x: &[f64], y: &[f64], kappa: f64) -> f64 {
    let k = x.len();
    let taus = quantile_levels(k);
    let mut total = 0.0;
    for (xk, tau) in x.iter().zip(&taus) {
        for yk in y {
            total += huber_rho(yk - xk, *tau, kappa);
        }
    }
    total / (k * y.len()) as f64
}

/// Sorts both target vectors, then takes their element-wise minimum.
pub fn twin_min_targets(y1: &SampleVec, y2: &SampleVec) -> Result<SampleVec> {
    same_len(y1, y2, "twin_min_targets")?;
    let (a, b) = (sort_samples(y1), sort_samples(y2));
    let values = a.values.iter().zip(&b.values).map(|(p, q)| p.min(*q)).collect();
    Ok(SampleVec {
        values,
        sorted: true,
    })
}

/// Row-wise sort then element-wise minimum on `[M, K]` target tensors.
pub fn twin_min_target_rows(y1: &Tensor, y2: &Tensor) -> Result<Tensor> {
    if y1.shape() != y2.shape() {
        return Err(IdacError::Shape("twin_min_target_rows: shapes differ".into()));
    }
    let k = y1.cols();
    let mut out = Vec::with_capacity(y1.len());
    for r in 0..y1.rows() {
        let mut a = y1.row_slice(r).to_vec();
        let mut b = y2.row_slice(r).to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        out.extend(a.iter().zip(&b).map(|(p, q)| p.min(*q)));
    }
    Tensor::matrix(y1.rows(), k, out)
}

/// Sorts each row of an untracked `[M, K]` tensor.
pub fn sort_rows(t: &Tensor) -> Tensor {
    let k = t.cols();
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(k.max(1)) {
        row.sort_by(f64::total_cmp);
    }
    Tensor::matrix(t.rows(), k, data).expect("same shape")
}

/// Fused batch quantile Huber loss, averaged over rows. The targets are
/// constants; gradient flows only into the generator samples.
#[derive(Debug)]
struct QuantileHuberOp {
    targets: Tensor,
    kappa: f64,
}

impl CustomOp for QuantileHuberOp {
    fn name(&self) -> &'static str {
        "quantile_huber"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let (rows, k) = (x.rows(), x.cols());
        let kt = self.targets.cols();
        let taus = quantile_levels(k);
        let scale = upstream[0] / (rows * k * kt) as f64;
        let mut grad = vec![0.0; x.len()];
        for r in 0..rows {
            let (xr, yr) = (x.row_slice(r), self.targets.row_slice(r));
            for (j, (xk, tau)) in xr.iter().zip(&taus).enumerate() {
                let s: f64 = yr.iter().map(|yk| huber_rho_grad(yk - xk, *tau, self.kappa)).sum();
                grad[r * k + j] = -s * scale;
            }
        }
        vec![Some(grad)]
    }
}

/// Records `(1/M) Σ_i (1/K²) Σ_k Σ_k' ρ^κ_{τ_k}(y_{ik'} − x_{ik})` on the tape.
///
/// `x_sorted` is `[M, K]` with each row sorted; `targets` is `[M, K]` and is
/// treated as a constant.
pub fn quantile_huber_loss_rows(tape: &mut Tape, x_sorted: Var, targets: &Tensor, kappa: f64) -> Var {
    let x = tape.value(x_sorted);
    assert_eq!(x.rows(), targets.rows(), "quantile loss: batch sizes differ");
    let rows = x.rows();
    let total: f64 = (0..rows)
        .map(|r| row_loss(x.row_slice(r), targets.row_slice(r), kappa))
        .sum();
    let value = Tensor::scalar(total / rows as f64);
    let op = QuantileHuberOp {
        targets: targets.clone(),
        kappa,
    };
    tape.custom(Box::new(op), &[x_sorted], value)
}
