//! Device scheduling: the delay virtual queue, the drift-plus-penalty
//! objective `J = N - zeta * Q * D`, the set-expansion online policy and the
//! three benchmark policies (all-in, equal-split AABA, greedy GS).
//!
//! Every policy returns a prefix of the gain-descending device order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::allocation::{
    min_delay, min_delay_from, required_bandwidth, Allocation, AllocationProblem,
    DELAY_BISECTION_TOL,
};
use crate::channel::{achievable_rate, transmission_delay, ChannelConfig, ChannelSnapshot};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Online,
    AllIn,
    Aaba,
    Gs,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Online, Policy::AllIn, Policy::Aaba, Policy::Gs];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Online => "online",
            Policy::AllIn => "allin",
            Policy::Aaba => "aaba",
            Policy::Gs => "gs",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "online" => Ok(Policy::Online),
            "allin" | "all-in" => Ok(Policy::AllIn),
            "aaba" => Ok(Policy::Aaba),
            "gs" => Ok(Policy::Gs),
            other => Err(Error::Config(format!("unknown policy '{other}'"))),
        }
    }
}

/// Where `zeta(t)` enters the queue recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QueueVariant {
    /// `Q <- max(0, Q + zeta (D - Dbar))`, as executed by the online algorithm.
    #[default]
    Alg1,
    /// `Q <- max(0, Q + D - Dbar)`.
    Eq16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Average delay budget `Dbar`, seconds.
    pub delay_budget: f64,
    pub zeta0: f64,
    pub zeta_decay: f64,
    pub policy: Policy,
    pub queue_variant: QueueVariant,
    /// Evaluate every prefix instead of stopping at the first drop in `J`.
    pub full_scan: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            delay_budget: 0.1,
            zeta0: 10.0,
            zeta_decay: 1e-3,
            policy: Policy::Online,
            queue_variant: QueueVariant::Alg1,
            full_scan: false,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delay_budget > 0.0 && self.delay_budget.is_finite()) {
            return Err(Error::Config("delay budget must be > 0".into()));
        }
        if !(self.zeta0 > 0.0 && self.zeta0.is_finite()) {
            return Err(Error::Config("zeta0 must be > 0".into()));
        }
        if !(self.zeta_decay >= 0.0 && self.zeta_decay.is_finite()) {
            return Err(Error::Config("zeta_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Control weight `zeta(t) = zeta0 / (1 + decay * t)`.
pub fn zeta(t: usize, cfg: &SchedulerConfig) -> f64 {
    cfg.zeta0 / (1.0 + cfg.zeta_decay * t as f64)
}

/// Per-round objective `N - zeta * Q * D`.
pub fn objective(n: usize, zeta: f64, queue: f64, delay: f64) -> f64 {
    n as f64 - zeta * queue * delay
}

/// One-step Lyapunov drift of `V(Q) = Q^2 / 2` under the unscaled recursion.
pub fn lyapunov_drift(queue: f64, delay: f64, budget: f64) -> f64 {
    let next = (queue + delay - budget).max(0.0);
    0.5 * (next * next - queue * queue)
}

/// Quadratic upper bound on [`lyapunov_drift`]: `Q (D - Dbar) + (D - Dbar)^2 / 2`.
pub fn drift_bound(queue: f64, delay: f64, budget: f64) -> f64 {
    let gap = delay - budget;
    queue * gap + 0.5 * gap * gap
}

/// One queue update, kept so a trajectory can be replayed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueStep {
    pub delay: f64,
    pub budget: f64,
    pub zeta: f64,
}

/// Delay-debt virtual queue, `Q(0) = 0`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VirtualQueue {
    value: f64,
    history: Vec<f64>,
}

impl VirtualQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// Values after each update, oldest first.
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn update(&mut self, step: QueueStep, variant: QueueVariant) -> f64 {
        let increment = match variant {
            QueueVariant::Alg1 => step.zeta * (step.delay - step.budget),
            QueueVariant::Eq16 => step.delay - step.budget,
        };
        self.value = (self.value + increment).max(0.0);
        self.history.push(self.value);
        self.value
    }

    pub fn replay(steps: &[QueueStep], variant: QueueVariant) -> Self {
        let mut q = Self::new();
        for &s in steps {
            q.update(s, variant);
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDecision {
    /// Scheduled device indices, strongest channel first.
    pub scheduled: Vec<usize>,
    /// `allocation.bandwidths[i]` belongs to `scheduled[i]`.
    pub allocation: Allocation,
    pub objective: f64,
}

impl ScheduleDecision {
    pub fn empty() -> Self {
        Self {
            scheduled: Vec::new(),
            allocation: Allocation::empty(),
            objective: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.scheduled.len()
    }

    pub fn delay(&self) -> f64 {
        self.allocation.delay
    }

    pub fn is_empty(&self) -> bool {
        self.scheduled.is_empty()
    }
}

/// Positive-gain devices in descending gain order.
fn reachable_order(snapshot: &ChannelSnapshot) -> Vec<usize> {
    snapshot
        .descending_order()
        .into_iter()
        .filter(|&k| snapshot.gains[k] > 0.0)
        .collect()
}

fn problem_for(
    snapshot: &ChannelSnapshot,
    set: &[usize],
    payload_bits: f64,
    channel: &ChannelConfig,
) -> AllocationProblem {
    AllocationProblem {
        gains: set.iter().map(|&k| snapshot.gains[k]).collect(),
        total_bandwidth: channel.total_bandwidth,
        payload_bits,
        noise_psd: channel.noise_psd,
    }
}

/// Set expansion: grow the schedule along the gain order, solving the
/// minimum common delay of each candidate set, and stop the first time `J`
/// strictly drops (or scan all prefixes when `cfg.full_scan`).
pub fn schedule_online(
    snapshot: &ChannelSnapshot,
    queue: &VirtualQueue,
    cfg: &SchedulerConfig,
    payload_bits: f64,
    channel: &ChannelConfig,
) -> Result<ScheduleDecision> {
    let order = reachable_order(snapshot);
    if order.is_empty() {
        return Err(Error::Domain(
            "no device has a positive channel gain".into(),
        ));
    }
    let penalty = zeta(snapshot.round.max(1), cfg) * queue.value();

    if penalty == 0.0 {
        // J = N: every reachable device is admitted.
        let allocation = min_delay(&problem_for(snapshot, &order, payload_bits, channel))?;
        let objective = order.len() as f64;
        return Ok(ScheduleDecision {
            scheduled: order,
            allocation,
            objective,
        });
    }

    let mut best: Option<ScheduleDecision> = None;
    let mut prev_delay = 0.0;
    for n in 1..=order.len() {
        let set = &order[..n];
        let problem = problem_for(snapshot, set, payload_bits, channel);
        let allocation = min_delay_from(&problem, prev_delay * (1.0 - 1e-6), DELAY_BISECTION_TOL)?;
        prev_delay = allocation.delay;
        let j = objective(n, 1.0, penalty, allocation.delay);
        match &best {
            Some(b) if j < b.objective => {
                if !cfg.full_scan {
                    break;
                }
            }
            _ => {
                best = Some(ScheduleDecision {
                    scheduled: set.to_vec(),
                    allocation,
                    objective: j,
                });
            }
        }
    }
    Ok(best.expect("at least one candidate set was evaluated"))
}

/// Every reachable device, minimum common delay allocation, no delay budget.
pub fn schedule_all_in(
    snapshot: &ChannelSnapshot,
    payload_bits: f64,
    channel: &ChannelConfig,
) -> Result<ScheduleDecision> {
    let order = reachable_order(snapshot);
    if order.is_empty() {
        return Ok(ScheduleDecision::empty());
    }
    let allocation = min_delay(&problem_for(snapshot, &order, payload_bits, channel))?;
    let objective = order.len() as f64;
    Ok(ScheduleDecision {
        scheduled: order,
        allocation,
        objective,
    })
}

/// Per-round delay of the top-`n` prefix under an equal `B / n` split.
fn equal_split_delay(
    snapshot: &ChannelSnapshot,
    prefix: &[usize],
    payload_bits: f64,
    channel: &ChannelConfig,
) -> Result<f64> {
    let share = channel.total_bandwidth / prefix.len() as f64;
    let rates = prefix
        .iter()
        .map(|&k| achievable_rate(share, snapshot.gains[k], channel.noise_psd))
        .collect::<Result<Vec<_>>>()?;
    transmission_delay(payload_bits, &rates)
}

/// Equal bandwidth split over the largest prefix whose every member meets
/// `Dbar` in this round. Feasibility is monotone in the prefix length (both
/// the share and the weakest gain shrink), so the scan stops at the first miss.
pub fn schedule_aaba(
    snapshot: &ChannelSnapshot,
    payload_bits: f64,
    cfg: &SchedulerConfig,
    channel: &ChannelConfig,
) -> Result<ScheduleDecision> {
    let order = reachable_order(snapshot);
    let mut chosen: Option<(usize, f64)> = None;
    for n in 1..=order.len() {
        let d = equal_split_delay(snapshot, &order[..n], payload_bits, channel)?;
        if d <= cfg.delay_budget {
            chosen = Some((n, d));
        } else {
            break;
        }
    }
    let Some((n, delay)) = chosen else {
        return Ok(ScheduleDecision::empty());
    };
    let share = channel.total_bandwidth / n as f64;
    Ok(ScheduleDecision {
        scheduled: order[..n].to_vec(),
        allocation: Allocation {
            bandwidths: vec![share; n],
            delay,
            feasible: true,
        },
        objective: n as f64,
    })
}

/// Greedy admission under the per-round constraint `D <= Dbar`: each device
/// gets exactly the bandwidth that meets `Dbar`, admitted in gain order until
/// the residual band cannot carry the next device.
pub fn schedule_gs(
    snapshot: &ChannelSnapshot,
    payload_bits: f64,
    cfg: &SchedulerConfig,
    channel: &ChannelConfig,
) -> Result<ScheduleDecision> {
    let budget = channel.total_bandwidth * (1.0 + 1e-9);
    let mut scheduled = Vec::new();
    let mut bandwidths = Vec::new();
    let mut used = 0.0;
    for k in reachable_order(snapshot) {
        let b = match required_bandwidth(
            cfg.delay_budget,
            snapshot.gains[k],
            payload_bits,
            channel.noise_psd,
        ) {
            Ok(b) => b,
            Err(Error::Infeasible(_)) => break,
            Err(e) => return Err(e),
        };
        if used + b > budget {
            break;
        }
        used += b;
        scheduled.push(k);
        bandwidths.push(b);
    }
    if scheduled.is_empty() {
        return Ok(ScheduleDecision::empty());
    }
    let rates = scheduled
        .iter()
        .zip(&bandwidths)
        .map(|(&k, &b)| achievable_rate(b, snapshot.gains[k], channel.noise_psd))
        .collect::<Result<Vec<_>>>()?;
    let delay = transmission_delay(payload_bits, &rates)?;
    let objective = scheduled.len() as f64;
    Ok(ScheduleDecision {
        scheduled,
        allocation: Allocation {
            bandwidths,
            delay,
            feasible: true,
        },
        objective,
    })
}

/// Dispatches on `cfg.policy` and reports `J` at the current queue state for
/// every policy, so traces are comparable.
pub fn schedule(
    snapshot: &ChannelSnapshot,
    queue: &VirtualQueue,
    cfg: &SchedulerConfig,
    payload_bits: f64,
    channel: &ChannelConfig,
) -> Result<ScheduleDecision> {
    let mut decision = match cfg.policy {
        Policy::Online => schedule_online(snapshot, queue, cfg, payload_bits, channel)?,
        Policy::AllIn => schedule_all_in(snapshot, payload_bits, channel)?,
        Policy::Aaba => schedule_aaba(snapshot, payload_bits, cfg, channel)?,
        Policy::Gs => schedule_gs(snapshot, payload_bits, cfg, channel)?,
    };
    decision.objective = objective(
        decision.n(),
        zeta(snapshot.round.max(1), cfg),
        queue.value(),
        decision.delay(),
    );
    Ok(decision)
}
