//! Convergence-bound machinery for partial participation: the per-round
//! contraction coefficient `varsigma(N)`, the stochastic terms `alpha` and
//! `beta`, the optimality-gap recursion with its closed-form expansion, and
//! numerical checks of the gradient decomposition and the subset-sampling
//! variance identity.
//!
//! Surrogate runs feed this module with estimated constants (see
//! [`estimate_smoothness`] and [`estimate_gradient_variance`]) and a
//! running-minimum loss in place of the unknown optimum, so bounds computed
//! from traces are estimate-parameterized curve shapes.

use crate::error::{Error, Result};
use crate::fedft::data::Dataset;
use crate::fedft::model::{device_gradient, SplitModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    /// Smoothness constant `L`.
    pub smoothness: f64,
    pub learning_rate: f64,
    /// PL constant `tau`.
    pub pl_constant: f64,
    /// Per-entry gradient variance bound `phi^2`.
    pub grad_variance: f64,
    /// Number of adapter-gradient entries.
    pub adapter_elements: usize,
    /// Number of task-gradient entries.
    pub task_elements: usize,
    pub num_devices: usize,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothness > 0.0 && self.smoothness.is_finite()) {
            return Err(Error::Domain("smoothness must be > 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain("learning rate must be > 0".into()));
        }
        if !(self.pl_constant >= 0.0 && self.pl_constant.is_finite()) {
            return Err(Error::Domain("PL constant must be >= 0".into()));
        }
        if !(self.grad_variance >= 0.0 && self.grad_variance.is_finite()) {
            return Err(Error::Domain("gradient variance must be >= 0".into()));
        }
        if self.num_devices < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 devices, got {}",
                self.num_devices
            )));
        }
        Ok(())
    }

    /// `L < eta / (eta^2 + 1)`.
    pub fn global_step_condition(&self) -> bool {
        let eta = self.learning_rate;
        self.smoothness < eta / (eta * eta + 1.0)
    }

    /// `L < eta N (K-1) / ((K-1) N eta^2 + K - N)`, the per-round condition
    /// under which the contraction weight is positive.
    pub fn round_step_condition(&self, n: usize) -> bool {
        let eta = self.learning_rate;
        let k = self.num_devices as f64;
        let n = n as f64;
        self.smoothness < eta * n * (k - 1.0) / ((k - 1.0) * n * eta * eta + k - n)
    }
}

/// `varsigma = -(L eta^2 - eta)/K^2 - (K - N) L / (2 N (K - 1) K^2)`.
pub fn varsigma(n: usize, p: &BoundParams) -> Result<f64> {
    let k = p.num_devices;
    if k < 2 {
        return Err(Error::Domain(format!("varsigma needs K >= 2, got {k}")));
    }
    if n == 0 || n > k {
        return Err(Error::Domain(format!("N = {n} outside 1..={k}")));
    }
    let (l, eta) = (p.smoothness, p.learning_rate);
    let (kf, nf) = (k as f64, n as f64);
    let k2 = kf * kf;
    Ok(-(l * eta * eta - eta) / k2 - (kf - nf) * l / (2.0 * nf * (kf - 1.0) * k2))
}

/// `alpha = phi^2 K^2 varsigma Omega_a`.
pub fn alpha(varsigma: f64, p: &BoundParams) -> f64 {
    let k = p.num_devices as f64;
    p.grad_variance * k * k * varsigma * p.adapter_elements as f64
}

/// `beta = Omega_t (L eta^2 - eta) phi^2`.
pub fn beta(p: &BoundParams) -> f64 {
    let eta = p.learning_rate;
    p.task_elements as f64 * (p.smoothness * eta * eta - eta) * p.grad_variance
}

/// The three named parts of the closed-form bound; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapTerms {
    pub initial: f64,
    pub lora: f64,
    pub task: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundTrajectory {
    pub n: Vec<usize>,
    pub varsigma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: f64,
    /// `prod_{s <= t} (1 - 2 tau varsigma(s))`.
    pub weight_products: Vec<f64>,
    /// Bound after each round's update.
    pub cumulative: Vec<f64>,
    pub closed_form: GapTerms,
    pub global_condition_holds: bool,
    /// Per-round step condition, one flag per round.
    pub round_condition_holds: Vec<bool>,
}

impl BoundTrajectory {
    pub fn final_bound(&self) -> f64 {
        *self.cumulative.last().expect("trajectory is nonempty")
    }

    /// Every step condition holds.
    pub fn conditions_hold(&self) -> bool {
        self.global_condition_holds && self.round_condition_holds.iter().all(|&c| c)
    }
}

/// Applies `gap <- (1 - 2 tau varsigma(t)) gap + beta - alpha(t)` along the
/// schedule history and also evaluates the closed-form expansion.
///
/// Violated step conditions are flagged in the result, not rejected.
pub fn optimality_gap_bound(
    history: &[usize],
    p: &BoundParams,
    initial_gap: f64,
) -> Result<BoundTrajectory> {
    p.validate()?;
    if history.is_empty() {
        return Err(Error::Domain("schedule history is empty".into()));
    }
    let varsigmas = history
        .iter()
        .map(|&n| varsigma(n, p))
        .collect::<Result<Vec<_>>>()?;
    let alphas: Vec<f64> = varsigmas.iter().map(|&v| alpha(v, p)).collect();
    let b = beta(p);

    let mut gap = initial_gap;
    let mut product = 1.0;
    let mut weight_products = Vec::with_capacity(history.len());
    let mut cumulative = Vec::with_capacity(history.len());
    for (v, a) in varsigmas.iter().zip(&alphas) {
        let q = 1.0 - 2.0 * p.pl_constant * v;
        gap = q * gap + b - a;
        product *= q;
        weight_products.push(product);
        cumulative.push(gap);
    }

    Ok(BoundTrajectory {
        n: history.to_vec(),
        closed_form: closed_form_terms(&varsigmas, &alphas, b, p.pl_constant, initial_gap),
        varsigma: varsigmas,
        alpha: alphas,
        beta: b,
        weight_products,
        cumulative,
        global_condition_holds: p.global_step_condition(),
        round_condition_holds: history.iter().map(|&n| p.round_step_condition(n)).collect(),
    })
}

/// Closed form after the last round `T`:
/// `prod_t q(t) gap0 + (beta - alpha(T)) + sum_{i=1..T} [prod_{j=0..i-1} q(T-j)] (beta - alpha(T-i))`.
fn closed_form_terms(
    varsigmas: &[f64],
    alphas: &[f64],
    beta: f64,
    tau: f64,
    gap0: f64,
) -> GapTerms {
    let q: Vec<f64> = varsigmas.iter().map(|v| 1.0 - 2.0 * tau * v).collect();
    let last = q.len() - 1;
    let initial = q.iter().product::<f64>() * gap0;
    let mut lora = -alphas[last];
    let mut weight_sum = 1.0;
    for i in 1..=last {
        let w: f64 = (0..i).map(|j| q[last - j]).product();
        lora -= w * alphas[last - i];
        weight_sum += w;
    }
    let task = beta * weight_sum;
    GapTerms {
        initial,
        lora,
        task,
        total: initial + lora + task,
    }
}

/// Both sides of the gradient decomposition inequality
/// `|grad F|^2 <= (2 / K^2) (sum_k |g_t,k|^2 + sum_k |g_a,k|^2)`, where
/// `F = (1/K) sum_k f_k(w_a, w_t,k)` shares the adapter and keeps one head
/// per device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Decomposition check from per-device adapter and task gradients.
pub fn decomposition_from_gradients(
    adapter: &[Vec<f64>],
    task: &[Vec<f64>],
) -> Result<DecompositionReport> {
    let k = adapter.len();
    if k == 0 || task.len() != k {
        return Err(Error::Dimension(format!(
            "{k} adapter gradients and {} task gradients",
            task.len()
        )));
    }
    let dim = adapter[0].len();
    if adapter.iter().any(|g| g.len() != dim) {
        return Err(Error::Dimension(
            "adapter gradients differ in length".into(),
        ));
    }
    let kf = k as f64;
    let mut mean = vec![0.0; dim];
    for g in adapter {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / kf;
        }
    }
    let task_sq: f64 = task.iter().map(|g| norm_sq(g)).sum();
    let adapter_sq: f64 = adapter.iter().map(|g| norm_sq(g)).sum();
    let lhs = norm_sq(&mean) + task_sq / (kf * kf);
    let rhs = 2.0 / (kf * kf) * (task_sq + adapter_sq);
    Ok(DecompositionReport {
        lhs,
        rhs,
        holds: lhs <= rhs,
    })
}

/// Decomposition check on a model, using each device's full-data gradients.
pub fn gradient_decomposition_check(
    model: &SplitModel,
    data: &[Dataset],
) -> Result<DecompositionReport> {
    if data.len() != model.num_devices() {
        return Err(Error::Dimension(format!(
            "{} datasets for {} devices",
            data.len(),
            model.num_devices()
        )));
    }
    let mut adapter = Vec::with_capacity(data.len());
    let mut task = Vec::with_capacity(data.len());
    for (k, d) in data.iter().enumerate() {
        let g = device_gradient(model, k, d)?;
        adapter.push(g.adapter.flatten());
        task.push(g.head.flatten());
    }
    decomposition_from_gradients(&adapter, &task)
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Calls `f` with every `n`-subset of `0..k`, in lexicographic order.
fn for_each_subset<F: FnMut(&[usize])>(k: usize, n: usize, mut f: F) {
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        f(&idx);
        let mut i = n;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] < i + k - n {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..n {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Exact expectation over all `C(K, N)` subsets of `|subset mean - mean|^2`,
/// and the closed form `(K - N) / (K N (K - 1)) sum_k |g_k - mean|^2`.
pub fn subset_variance_oracle(gradients: &[Vec<f64>], n: usize) -> Result<(f64, f64)> {
    let k = gradients.len();
    if !(2..=12).contains(&k) {
        return Err(Error::Domain(format!("K = {k} outside 2..=12")));
    }
    if n == 0 || n > k {
        return Err(Error::Domain(format!("N = {n} outside 1..={k}")));
    }
    let dim = gradients[0].len();
    if gradients.iter().any(|g| g.len() != dim) {
        return Err(Error::Dimension("gradients differ in length".into()));
    }
    let kf = k as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|d| gradients.iter().map(|g| g[d]).sum::<f64>() / kf)
        .collect();

    let mut total = 0.0;
    let mut count = 0usize;
    let mut sub = vec![0.0; dim];
    for_each_subset(k, n, |set| {
        sub.iter_mut().for_each(|s| *s = 0.0);
        for &i in set {
            for (s, v) in sub.iter_mut().zip(&gradients[i]) {
                *s += v;
            }
        }
        total += sub
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let d = s / n as f64 - m;
                d * d
            })
            .sum::<f64>();
        count += 1;
    });
    let exact = total / count as f64;

    let spread: f64 = gradients
        .iter()
        .map(|g| {
            g.iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum();
    let nf = n as f64;
    let formula = (kf - nf) / (kf * nf * (kf - 1.0)) * spread;
    Ok((exact, formula))
}

/// Largest ratio `|g_i - g_j| / |w_i - w_j|` over consecutive samples of a
/// parameter trajectory.
pub fn estimate_smoothness(params: &[Vec<f64>], grads: &[Vec<f64>]) -> Result<f64> {
    if params.len() != grads.len() || params.len() < 2 {
        return Err(Error::NoData(
            "smoothness estimate needs at least two matching samples".into(),
        ));
    }
    let mut best = 0.0f64;
    for i in 1..params.len() {
        let dw = dist(&params[i], &params[i - 1]);
        if dw > 0.0 {
            best = best.max(dist(&grads[i], &grads[i - 1]) / dw);
        }
    }
    Ok(best)
}

/// Largest per-entry sample variance over a set of minibatch gradients taken
/// at the same parameters.
pub fn estimate_gradient_variance(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::NoData(
            "variance estimate needs at least two samples".into(),
        ));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::Dimension("gradient samples differ in length".into()));
    }
    let m = samples.len() as f64;
    let mut best = 0.0f64;
    for d in 0..dim {
        let mean = samples.iter().map(|s| s[d]).sum::<f64>() / m;
        let var = samples.iter().map(|s| (s[d] - mean).powi(2)).sum::<f64>() / (m - 1.0);
        best = best.max(var);
    }
    Ok(best)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
