//! The per-round protocol loop: channel draw, scheduling, forward, local
//! gradients, aggregation, update, queue update, trace.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{ChannelConfig, ChannelSimulator};
use crate::error::{Error, Result};
use crate::fedft::data::{shard, Dataset, DeviceDataset, GaussianMixture};
use crate::fedft::model::{
    aggregate_adapter_grads, apply_updates, forward_round, global_loss_on, local_gradients,
    mean_accuracy_on, EvalSet, ModelConfig, SplitModel,
};
use crate::scheduler::{
    schedule, zeta, QueueStep, ScheduleDecision, SchedulerConfig, VirtualQueue,
};

const DATA_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 3;

/// Independent generator for one purpose of a run.
fn purpose_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6A09_E667_F3BC_C908);
    rng.set_stream(stream);
    rng
}

/// Everything one training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub channel: ChannelConfig,
    pub scheduler: SchedulerConfig,
    pub model: ModelConfig,
    pub rounds: usize,
    /// Seeds the deployment, fading, data, initialization and batches.
    pub seed: u64,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.scheduler.validate()?;
        self.model.validate(self.channel.num_devices)?;
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub t: usize,
    pub n: usize,
    /// Round delay `D(t)`, seconds.
    pub delay: f64,
    /// Queue value after this round's update.
    pub queue: f64,
    pub objective: f64,
    pub payload_bits: u64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Wall time of the scheduling call alone, microseconds.
    pub scheduler_wall_us: f64,
}

/// Stateful run; [`Trainer::step`] executes one round.
#[derive(Debug, Clone)]
pub struct Trainer {
    spec: RunSpec,
    channel: ChannelSimulator,
    model: SplitModel,
    devices: Vec<DeviceDataset>,
    shards: Vec<Dataset>,
    test: Dataset,
    shard_eval: Vec<EvalSet>,
    test_eval: EvalSet,
    queue: VirtualQueue,
    batch_rng: ChaCha8Rng,
    payload_bits: u64,
    t: usize,
    last_decision: Option<ScheduleDecision>,
}

impl Trainer {
    pub fn new(spec: RunSpec) -> Result<Self> {
        spec.validate()?;
        let channel_cfg = ChannelConfig {
            rng_seed: spec.seed,
            ..spec.channel.clone()
        };
        let channel = ChannelSimulator::new(channel_cfg)?;
        let k = spec.channel.num_devices;
        let m = &spec.model;

        let mut data_rng = purpose_rng(spec.seed, DATA_STREAM);
        let mixture = GaussianMixture::new(
            m.num_classes,
            m.input_dim,
            m.class_separation,
            m.noise_std,
            &mut data_rng,
        );
        let pool = mixture.sample(m.pool_size, &mut data_rng);
        let test = mixture.sample(m.test_size, &mut data_rng);
        let shards = shard(&pool, k, m.shard_size())?;
        let devices = shards
            .iter()
            .map(|s| DeviceDataset::new(s.clone(), m.batch_size))
            .collect::<Result<Vec<_>>>()?;

        let model = SplitModel::init(m, k, &mut purpose_rng(spec.seed, INIT_STREAM))?;
        let payload_bits = m.payload_bits();
        let shard_eval = shards
            .iter()
            .map(|s| EvalSet::new(&model, s))
            .collect::<Result<Vec<_>>>()?;
        let test_eval = EvalSet::new(&model, &test)?;
        Ok(Self {
            shard_eval,
            test_eval,
            batch_rng: purpose_rng(spec.seed, BATCH_STREAM),
            spec,
            channel,
            model,
            devices,
            shards,
            test,
            queue: VirtualQueue::new(),
            payload_bits,
            t: 0,
            last_decision: None,
        })
    }

    pub fn spec(&self) -> &RunSpec {
        &self.spec
    }

    pub fn model(&self) -> &SplitModel {
        &self.model
    }

    pub fn shards(&self) -> &[Dataset] {
        &self.shards
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    /// Current value of the global objective on the full shards.
    pub fn train_loss(&self) -> Result<f64> {
        global_loss_on(&self.model, &self.shard_eval)
    }

    pub fn queue(&self) -> &VirtualQueue {
        &self.queue
    }

    pub fn payload_bits(&self) -> u64 {
        self.payload_bits
    }

    /// Rounds completed so far.
    pub fn rounds_done(&self) -> usize {
        self.t
    }

    pub fn last_decision(&self) -> Option<&ScheduleDecision> {
        self.last_decision.as_ref()
    }

    pub fn step(&mut self) -> Result<RoundTrace> {
        self.t += 1;
        let t = self.t;
        let snapshot = self.channel.snapshot(t);
        let mu = self.payload_bits as f64;

        let started = Instant::now();
        let decision = schedule(
            &snapshot,
            &self.queue,
            &self.spec.scheduler,
            mu,
            self.channel.config(),
        )?;
        let scheduler_wall_us = started.elapsed().as_secs_f64() * 1e6;

        let scheduled = &decision.scheduled;
        if !scheduled.is_empty() {
            // Every device draws a batch each round so that the batch stream
            // does not depend on the schedule.
            let batches: BTreeMap<usize, Dataset> = self
                .devices
                .iter()
                .enumerate()
                .map(|(k, d)| (k, d.sample_batch(&mut self.batch_rng)))
                .collect();
            let forwards = forward_round(&self.model, &batches, scheduled)?;
            let mut uploads = BTreeMap::new();
            let mut heads = BTreeMap::new();
            for fwd in &forwards {
                let g = local_gradients(&self.model, fwd, &batches[&fwd.device].labels)?;
                uploads.insert(g.device, g.feature_grad);
                heads.insert(g.device, g.head);
            }
            let adapter_grad =
                aggregate_adapter_grads(&self.model, &forwards, &uploads, scheduled)?;
            apply_updates(
                &mut self.model,
                &adapter_grad,
                &heads,
                scheduled,
                self.spec.model.learning_rate,
            )?;
        } else {
            for d in &self.devices {
                d.sample_batch(&mut self.batch_rng);
            }
        }

        let queue = self.queue.update(
            QueueStep {
                delay: decision.delay(),
                budget: self.spec.scheduler.delay_budget,
                zeta: zeta(t, &self.spec.scheduler),
            },
            self.spec.scheduler.queue_variant,
        );
        let trace = RoundTrace {
            t,
            n: decision.n(),
            delay: decision.delay(),
            queue,
            objective: decision.objective,
            payload_bits: self.payload_bits,
            train_loss: global_loss_on(&self.model, &self.shard_eval)?,
            test_accuracy: mean_accuracy_on(&self.model, &self.test_eval),
            scheduler_wall_us,
        };
        self.last_decision = Some(decision);
        Ok(trace)
    }
}

/// Runs all rounds of `spec` and returns one trace per round.
pub fn run_training(spec: &RunSpec) -> Result<Vec<RoundTrace>> {
    let mut trainer = Trainer::new(spec.clone())?;
    (0..spec.rounds).map(|_| trainer.step()).collect()
}
