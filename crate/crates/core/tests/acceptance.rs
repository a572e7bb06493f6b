//! Acceptance checks. Run with
//! `cargo test -p splitlora --test acceptance -- --nocapture`
//! to see one PASS/FAIL line per criterion.
//!
//! Everything runs inside a single test so that the timing checks do not
//! compete with other tests for the CPU.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use splitlora::allocation::{min_delay, required_bandwidth, AllocationProblem};
use splitlora::bound::{
    gradient_decomposition_check, optimality_gap_bound, subset_variance_oracle, varsigma,
    BoundParams,
};
use splitlora::channel::{ChannelConfig, ChannelSimulator, ChannelSnapshot};
use splitlora::fedft::model::cross_entropy;
use splitlora::fedft::{
    aggregate_adapter_grads, device_gradient, forward_round, local_gradients, run_training,
    Dataset, ModelConfig, SplitModel,
};
use splitlora::harness::runner::{execute_all, summarize};
use splitlora::harness::{sweep, ExperimentConfig, MetricsRow, SweepParam};
use splitlora::scheduler::{
    objective, schedule, schedule_online, zeta, Policy, QueueStep, SchedulerConfig, VirtualQueue,
};
use splitlora::Error;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Root of `B log2(1 + g / (B s2)) = mu / d` by bracketed bisection on `B`,
/// or `None` when the rate ceiling `g / (s2 ln 2)` is below `mu / d`.
fn bisection_bandwidth(d: f64, g: f64, mu: f64, s2: f64) -> Option<f64> {
    let target = mu / d;
    if g / (s2 * std::f64::consts::LN_2) <= target {
        return None;
    }
    let rate = |b: f64| b * (g / (b * s2)).ln_1p() / std::f64::consts::LN_2;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while rate(hi) < target {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let s2 = 1e-11;
    let started = Instant::now();
    let (mut feasible, mut infeasible, mut worst) = (0usize, 0usize, 0.0f64);
    let mut failures = Vec::new();
    while feasible < 10_000 {
        let g = log_uniform(&mut rng, 1e-9, 1e-5);
        let d = log_uniform(&mut rng, 1e-3, 1.0);
        let mu = log_uniform(&mut rng, 1e4, 1e7);
        match (
            required_bandwidth(d, g, mu, s2),
            bisection_bandwidth(d, g, mu, s2),
        ) {
            (Ok(b), Some(oracle)) => {
                feasible += 1;
                let rel = (b - oracle).abs() / oracle;
                worst = worst.max(rel);
                if rel > 1e-6 {
                    failures.push(format!("g={g:e} d={d:e} mu={mu:e}: {b} vs {oracle}"));
                }
            }
            (Err(Error::Infeasible(_)), None) => infeasible += 1,
            (got, oracle) => failures.push(format!(
                "g={g:e} d={d:e} mu={mu:e}: solver {got:?}, oracle {oracle:?}"
            )),
        }
    }
    let elapsed = started.elapsed();
    check(
        failures.is_empty() && elapsed < Duration::from_secs(5),
        format!(
            "{feasible} feasible instances, worst relative error {worst:.2e}; {infeasible} infeasible draws agreed; {:.2} s; failures {}",
            elapsed.as_secs_f64(),
            failures.len()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for k in 4..=6usize {
        for dim in [1usize, 3] {
            for _ in 0..50 {
                let g: Vec<Vec<f64>> = (0..k)
                    .map(|_| {
                        (0..dim)
                            .map(|_| rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect();
                let mean: Vec<f64> = (0..dim)
                    .map(|j| g.iter().map(|v| v[j]).sum::<f64>() / k as f64)
                    .collect();
                let spread: f64 = g
                    .iter()
                    .map(|v| {
                        v.iter()
                            .zip(&mean)
                            .map(|(a, m)| (a - m).powi(2))
                            .sum::<f64>()
                    })
                    .sum();
                for n in 1..=k {
                    let (exact, formula) =
                        subset_variance_oracle(&g, n).map_err(|e| e.to_string())?;
                    // N = K gives a formula of exactly 0; the spread sets the scale there.
                    let scale = formula
                        .abs()
                        .max(exact.abs())
                        .max(spread / k as f64 * f64::EPSILON);
                    worst = worst.max((exact - formula).abs() / scale);
                    cases += 1;
                }
            }
        }
    }
    let example: Vec<Vec<f64>> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| vec![v]).collect();
    let (exact, formula) = subset_variance_oracle(&example, 2).map_err(|e| e.to_string())?;
    let twelfth = 5.0 / 12.0;
    let example_ok = (exact - twelfth).abs() <= 1e-15 && (formula - twelfth).abs() <= 1e-15;
    check(
        worst <= 1e-12 && example_ok,
        format!(
            "{cases} (K, N, set) cases, worst relative gap {worst:.2e}; worked example exact {exact:.15} formula {formula:.15}"
        ),
    )
}

fn all_subsets_best(
    snapshot: &ChannelSnapshot,
    mu: f64,
    channel: &ChannelConfig,
    penalty: f64,
) -> f64 {
    let k = snapshot.num_devices();
    let mut best = f64::NEG_INFINITY;
    for mask in 1u32..(1 << k) {
        let gains: Vec<f64> = (0..k)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| snapshot.gains[i])
            .collect();
        let n = gains.len();
        let alloc = min_delay(&AllocationProblem {
            gains,
            total_bandwidth: channel.total_bandwidth,
            payload_bits: mu,
            noise_psd: channel.noise_psd,
        })
        .expect("positive gains");
        best = best.max(n as f64 - penalty * alloc.delay);
    }
    best
}

fn prefix_best(snapshot: &ChannelSnapshot, mu: f64, channel: &ChannelConfig, penalty: f64) -> f64 {
    let order = snapshot.descending_order();
    (1..=order.len())
        .map(|n| {
            let alloc = min_delay(&AllocationProblem {
                gains: order[..n].iter().map(|&i| snapshot.gains[i]).collect(),
                total_bandwidth: channel.total_bandwidth,
                payload_bits: mu,
                noise_psd: channel.noise_psd,
            })
            .expect("positive gains");
            n as f64 - penalty * alloc.delay
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn queue_with(value: f64) -> VirtualQueue {
    let mut q = VirtualQueue::new();
    q.update(
        QueueStep {
            delay: value,
            budget: 0.0,
            zeta: 1.0,
        },
        Default::default(),
    );
    q
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mu = ModelConfig::default().payload_bits() as f64;
    let sched = SchedulerConfig::default();
    let (mut non_prefix, mut gap_violations, mut small_cases) = (0usize, 0usize, 0usize);
    let mut worst_gap = 0.0f64;
    for i in 0..1000 {
        let k = if i % 2 == 0 {
            20
        } else {
            rng.random_range(1..=6)
        };
        let channel = ChannelConfig {
            num_devices: k,
            rng_seed: rng.random(),
            ..ChannelConfig::default()
        };
        let sim = ChannelSimulator::new(channel.clone()).map_err(|e| e.to_string())?;
        let t = rng.random_range(1..2000);
        let snapshot = sim.snapshot(t);
        let q = if rng.random_bool(0.1) {
            0.0
        } else {
            log_uniform(&mut rng, 1e-3, 1e3)
        };
        let queue = queue_with(q);
        let decision =
            schedule_online(&snapshot, &queue, &sched, mu, &channel).map_err(|e| e.to_string())?;
        let order = snapshot.descending_order();
        if decision.scheduled[..] != order[..decision.n()] || decision.n() == 0 {
            non_prefix += 1;
        }
        if k <= 6 {
            small_cases += 1;
            let penalty = zeta(t, &sched) * q;
            let subset = all_subsets_best(&snapshot, mu, &channel, penalty);
            let prefix = prefix_best(&snapshot, mu, &channel, penalty);
            let online = objective(decision.n(), zeta(t, &sched), q, decision.delay());
            let gap = (subset - prefix).max(subset - online);
            worst_gap = worst_gap.max(gap);
            if subset - prefix > k as f64 || subset - online > k as f64 {
                gap_violations += 1;
            }
        }
    }
    check(
        non_prefix == 0 && gap_violations == 0,
        format!(
            "1000 rounds, {non_prefix} non-prefix schedules; {small_cases} rounds with K <= 6, worst subset-max minus prefix/online J {worst_gap:.3}, {gap_violations} beyond K"
        ),
    )
}

fn criterion_4() -> Outcome {
    let cfg = ExperimentConfig {
        rounds: 2000,
        ..ExperimentConfig::default()
    };
    let traces = run_training(&cfg.run_spec(Policy::Online, 0)).map_err(|e| e.to_string())?;
    let mean = traces.iter().map(|t| t.delay).sum::<f64>() / traces.len() as f64;
    let budget = cfg.delay_budget();
    check(
        mean <= 1.05 * budget,
        format!(
            "mean delay {mean:.6} s over {} rounds vs budget {budget:.6} s (ratio {:.4})",
            traces.len(),
            mean / budget
        ),
    )
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let cfg = ExperimentConfig::default();
    assert_eq!(
        (cfg.channel.num_devices, cfg.rounds, cfg.seeds.len()),
        (20, 500, 5)
    );
    let results = execute_all(&cfg).map_err(|e| e.to_string())?;
    let rows: Vec<MetricsRow> = results.iter().flat_map(|r| r.rows()).collect();
    let summaries = summarize(&rows);
    let get = |p: Policy| {
        summaries
            .iter()
            .find(|s| s.policy == p)
            .expect("policy ran")
    };
    let (all_in, online, gs, aaba) = (
        get(Policy::AllIn),
        get(Policy::Online),
        get(Policy::Gs),
        get(Policy::Aaba),
    );
    let loss_ok = all_in.final_loss_mean <= online.final_loss_mean
        && online.final_loss_mean <= gs.final_loss_mean.min(aaba.final_loss_mean) + 1e-2;
    let acc_ok = all_in.final_accuracy_mean >= online.final_accuracy_mean
        && online.final_accuracy_mean
            >= gs.final_accuracy_mean.max(aaba.final_accuracy_mean) - 0.01;
    let elapsed = started.elapsed();
    check(
        loss_ok && acc_ok && elapsed < Duration::from_secs(600),
        format!(
            "final loss allin {:.4} online {:.4} gs {:.4} aaba {:.4}; accuracy allin {:.4} online {:.4} gs {:.4} aaba {:.4}; {:.1} s",
            all_in.final_loss_mean,
            online.final_loss_mean,
            gs.final_loss_mean,
            aaba.final_loss_mean,
            all_in.final_accuracy_mean,
            online.final_accuracy_mean,
            gs.final_accuracy_mean,
            aaba.final_accuracy_mean,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC6);
    let (mut monotone_fail, mut simplification_fail, mut worst) = (0usize, 0usize, 0.0f64);
    for _ in 0..1000 {
        let k = rng.random_range(2..=50);
        let p = BoundParams {
            smoothness: log_uniform(&mut rng, 1e-4, 10.0),
            learning_rate: log_uniform(&mut rng, 1e-5, 1.0),
            pl_constant: rng.random_range(0.0..5.0),
            grad_variance: rng.random_range(0.0..1.0),
            adapter_elements: rng.random_range(1..200),
            task_elements: rng.random_range(1..200),
            num_devices: k,
        };
        let vs: Vec<f64> = (1..=k).map(|n| varsigma(n, &p).expect("valid")).collect();
        if vs.windows(2).any(|w| w[1] <= w[0]) {
            monotone_fail += 1;
        }
        let eta = p.learning_rate;
        let kf = k as f64;
        if vs[k - 1] != (eta - p.smoothness * eta * eta) / (kf * kf) {
            simplification_fail += 1;
        }
        let history: Vec<usize> = (0..10).map(|_| rng.random_range(1..=k)).collect();
        let gap0 = rng.random_range(0.0..10.0);
        let traj = optimality_gap_bound(&history, &p, gap0).map_err(|e| e.to_string())?;
        let c = traj.closed_form;
        let scale = traj
            .final_bound()
            .abs()
            .max(c.total.abs())
            .max(f64::MIN_POSITIVE);
        worst = worst.max((traj.final_bound() - c.total).abs() / scale);
    }
    check(
        monotone_fail == 0 && simplification_fail == 0 && worst <= 1e-12,
        format!(
            "1000 parameter draws: {monotone_fail} non-increasing varsigma, {simplification_fail} N=K mismatches, worst recursive vs closed-form gap {worst:.2e}"
        ),
    )
}

const FD_STEP: f64 = 1e-6;

fn fd_check(analytic: f64, numeric: f64, worst: &mut f64) -> bool {
    let scale = analytic.abs().max(numeric.abs()).max(1e-4);
    let rel = (analytic - numeric).abs() / scale;
    *worst = worst.max(rel);
    rel <= 1e-5
}

fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

fn random_model(rng: &mut ChaCha8Rng, k: usize, trained: bool) -> (SplitModel, Vec<Dataset>) {
    let cfg = ModelConfig {
        input_dim: 6,
        embed_dim: 5,
        feat_dim: 4,
        rank: 2,
        num_classes: 3,
        ..ModelConfig::default()
    };
    let mut model = SplitModel::init(&cfg, k, rng).expect("valid config");
    for h in &mut model.heads {
        h.weight.mapv_inplace(|_| rng.sample(StandardNormal));
        h.bias = Array1::from_shape_fn(3, |_| rng.sample(StandardNormal));
    }
    if trained {
        model
            .adapter
            .b
            .mapv_inplace(|_| 0.5 * rng.sample::<f64, _>(StandardNormal));
    }
    let data = (0..k)
        .map(|_| Dataset {
            features: Array2::from_shape_fn((4, 6), |_| rng.sample(StandardNormal)),
            labels: (0..4).map(|_| rng.random_range(0..3)).collect(),
        })
        .collect();
    (model, data)
}

fn loss_of(model: &SplitModel, k: usize, d: &Dataset) -> f64 {
    let fwd = model.forward(k, &d.features).expect("shapes");
    cross_entropy(&fwd.logits, &d.labels, 1.0)
        .expect("labels")
        .0
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7);
    let mut worst = 0.0f64;
    let mut bad = 0usize;
    let mut checked = 0usize;
    for _ in 0..5 {
        let (model, data) = random_model(&mut rng, 3, true);
        let scheduled = [0usize, 2];
        let batches: BTreeMap<usize, Dataset> = data.iter().cloned().enumerate().collect();
        let fwds = forward_round(&model, &batches, &scheduled).map_err(|e| e.to_string())?;
        let mut uploads = BTreeMap::new();
        for fwd in &fwds {
            let k = fwd.device;
            let local = local_gradients(&model, fwd, &data[k].labels).map_err(|e| e.to_string())?;
            // Head.
            for idx in 0..model.heads[k].weight.len() {
                let num = central(|h| {
                    let mut m = model.clone();
                    m.heads[k].weight.as_slice_mut().unwrap()[idx] += h;
                    loss_of(&m, k, &data[k])
                });
                bad +=
                    !fd_check(local.head.weight.as_slice().unwrap()[idx], num, &mut worst) as usize;
                checked += 1;
            }
            for idx in 0..model.heads[k].bias.len() {
                let num = central(|h| {
                    let mut m = model.clone();
                    m.heads[k].bias[idx] += h;
                    loss_of(&m, k, &data[k])
                });
                bad += !fd_check(local.head.bias[idx], num, &mut worst) as usize;
                checked += 1;
            }
            // Uploaded df/dz.
            let z = &fwd.activations.features;
            for i in 0..z.nrows() {
                for j in 0..z.ncols() {
                    let num = central(|h| {
                        let mut zz = z.clone();
                        zz[[i, j]] += h;
                        cross_entropy(&model.heads[k].logits(&zz), &data[k].labels, 1.0)
                            .unwrap()
                            .0
                    });
                    bad += !fd_check(local.feature_grad[[i, j]], num, &mut worst) as usize;
                    checked += 1;
                }
            }
            // Per-device adapter gradient.
            let dg = device_gradient(&model, k, &data[k]).map_err(|e| e.to_string())?;
            for (which, len) in [(0, model.adapter.a.len()), (1, model.adapter.b.len())] {
                for idx in 0..len {
                    let num = central(|h| {
                        let mut m = model.clone();
                        let target = if which == 0 {
                            &mut m.adapter.a
                        } else {
                            &mut m.adapter.b
                        };
                        target.as_slice_mut().unwrap()[idx] += h;
                        loss_of(&m, k, &data[k])
                    });
                    let analytic = if which == 0 {
                        &dg.adapter.a
                    } else {
                        &dg.adapter.b
                    };
                    bad += !fd_check(analytic.as_slice().unwrap()[idx], num, &mut worst) as usize;
                    checked += 1;
                }
            }
            uploads.insert(k, local.feature_grad);
        }
        // Aggregated adapter gradient against the scheduled-set average loss.
        let agg = aggregate_adapter_grads(&model, &fwds, &uploads, &scheduled)
            .map_err(|e| e.to_string())?;
        let avg = |m: &SplitModel| {
            scheduled
                .iter()
                .map(|&k| loss_of(m, k, &data[k]))
                .sum::<f64>()
                / 2.0
        };
        for (which, len) in [(0, model.adapter.a.len()), (1, model.adapter.b.len())] {
            for idx in 0..len {
                let num = central(|h| {
                    let mut m = model.clone();
                    let target = if which == 0 {
                        &mut m.adapter.a
                    } else {
                        &mut m.adapter.b
                    };
                    target.as_slice_mut().unwrap()[idx] += h;
                    avg(&m)
                });
                let analytic = if which == 0 { &agg.a } else { &agg.b };
                bad += !fd_check(analytic.as_slice().unwrap()[idx], num, &mut worst) as usize;
                checked += 1;
            }
        }
    }

    let mut decomposition_fail = 0usize;
    let mut tightest = 0.0f64;
    for i in 0..100 {
        let k = [2, 5, 10][i % 3];
        let (model, data) = random_model(&mut rng, k, false);
        let r = gradient_decomposition_check(&model, &data).map_err(|e| e.to_string())?;
        decomposition_fail += !r.holds as usize;
        if r.rhs > 0.0 {
            tightest = tightest.max(r.lhs / r.rhs);
        }
    }
    check(
        bad == 0 && decomposition_fail == 0,
        format!(
            "{checked} gradient entries, worst relative error {worst:.2e}, {bad} beyond 1e-5; decomposition inequality failed on {decomposition_fail}/100 instances (largest lhs/rhs {tightest:.3})"
        ),
    )
}

/// Scheduling cost of one round, as the fastest of several identical calls.
fn min_schedule_time(
    snapshot: &ChannelSnapshot,
    queue: &VirtualQueue,
    cfg: &SchedulerConfig,
    mu: f64,
    channel: &ChannelConfig,
) -> Duration {
    (0..5)
        .map(|_| {
            let started = Instant::now();
            let d = schedule(snapshot, queue, cfg, mu, channel).expect("schedulable");
            let elapsed = started.elapsed();
            std::hint::black_box(d);
            elapsed
        })
        .min()
        .expect("five samples")
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = ExperimentConfig {
        policies: vec![Policy::Online],
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let scales = [0.4, 0.5, 0.6, 0.7];
    let points = sweep(&base, SweepParam::DelayScale, &scales).map_err(|e| e.to_string())?;
    let n: Vec<f64> = points.iter().map(|p| p.summaries[0].mean_n).collect();
    let wall: Vec<f64> = points.iter().map(|p| p.summaries[0].wall_us_mean).collect();
    let n_ok = n.windows(2).all(|w| w[1] >= w[0]);
    let wall_ok = wall.windows(2).all(|w| w[1] >= w[0]);

    // Per-round cost at the unscaled budget, which admits the most devices.
    let channel = base.channel.clone();
    let cfg = base.scheduler_config(Policy::Online);
    let mu = base.model.payload_bits() as f64;
    let mut slowest = Duration::ZERO;
    let mut rounds = 0usize;
    for &seed in &base.seeds {
        let sim = ChannelSimulator::new(ChannelConfig {
            rng_seed: seed,
            ..channel.clone()
        })
        .map_err(|e| e.to_string())?;
        let mut queue = VirtualQueue::new();
        for t in 1..=base.rounds {
            let snapshot = sim.snapshot(t);
            slowest = slowest.max(min_schedule_time(&snapshot, &queue, &cfg, mu, &channel));
            let d = schedule(&snapshot, &queue, &cfg, mu, &channel).map_err(|e| e.to_string())?;
            queue.update(
                QueueStep {
                    delay: d.delay(),
                    budget: cfg.delay_budget,
                    zeta: zeta(t, &cfg),
                },
                cfg.queue_variant,
            );
            rounds += 1;
        }
    }
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.2}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    check(
        n_ok && wall_ok && slowest < Duration::from_millis(10),
        format!(
            "scales {scales:?}: mean N [{}], mean scheduler us [{}]; slowest of {rounds} K=20 rounds {:.3} ms",
            fmt(&n),
            fmt(&wall),
            slowest.as_secs_f64() * 1e3
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        ("1 bandwidth closed form vs bisection", criterion_1),
        ("2 subset variance identity", criterion_2),
        ("3 threshold structure", criterion_3),
        ("4 queue stability", criterion_4),
        ("5 learning ordering", criterion_5),
        ("6 bound machinery", criterion_6),
        ("7 gradient correctness", criterion_7),
        ("8 latency sweep trends", criterion_8),
    ];
    let suite = Instant::now();
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({secs:.1} s) {detail}"),
            Err(detail) => {
                println!("criterion {name}: FAIL ({secs:.1} s) {detail}");
                failed.push(name);
            }
        }
    }
    println!(
        "acceptance suite finished in {:.1} s",
        suite.elapsed().as_secs_f64()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
