//! The split surrogate model and the four per-round protocol steps.
//!
//! Device side: a frozen linear embedding and a trainable linear softmax head
//! per device. Server side: a frozen `tanh` dense encoder plus a trainable
//! rank-`r` additive adapter, `z = tanh(ze Wc) + (ze A) B`.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedft::data::Dataset;

/// Model, data and optimiser hyperparameters for the surrogate task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub feat_dim: usize,
    pub rank: usize,
    pub num_classes: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub bits_per_scalar: u64,
    /// Total training samples before sharding.
    pub pool_size: usize,
    /// Fraction of the pool held by each device.
    pub shard_fraction: f64,
    pub test_size: usize,
    pub class_separation: f64,
    pub noise_std: f64,
    pub adapter_init_std: f64,
    pub encoder_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            embed_dim: 16,
            feat_dim: 16,
            rank: 4,
            num_classes: 10,
            learning_rate: 0.1,
            batch_size: 32,
            bits_per_scalar: 32,
            pool_size: 4000,
            shard_fraction: 0.05,
            test_size: 2000,
            class_separation: 5.0,
            noise_std: 1.0,
            adapter_init_std: 0.1,
            encoder_gain: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn shard_size(&self) -> usize {
        (self.pool_size as f64 * self.shard_fraction).floor() as usize
    }

    pub fn validate(&self, num_devices: usize) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("feat_dim", self.feat_dim),
            ("num_classes", self.num_classes),
            ("batch_size", self.batch_size),
            ("test_size", self.test_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        check_rank(self.rank, self.embed_dim, self.feat_dim)?;
        if self.bits_per_scalar == 0 {
            return Err(Error::Config("bits_per_scalar must be >= 1".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("class_separation", self.class_separation),
            ("noise_std", self.noise_std),
            ("adapter_init_std", self.adapter_init_std),
            ("encoder_gain", self.encoder_gain),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.shard_fraction > 0.0 && self.shard_fraction <= 1.0) {
            return Err(Error::Config("shard_fraction must be in (0, 1]".into()));
        }
        let shard = self.shard_size();
        if shard < self.batch_size {
            return Err(Error::Config(format!(
                "shard of {shard} samples is smaller than the batch size {}",
                self.batch_size
            )));
        }
        if shard * num_devices > self.pool_size {
            return Err(Error::Config(format!(
                "{num_devices} shards of {shard} exceed the pool of {}",
                self.pool_size
            )));
        }
        Ok(())
    }

    pub fn payload_bits(&self) -> u64 {
        payload_bits(
            self.batch_size,
            self.embed_dim,
            self.feat_dim,
            self.rank,
            self.bits_per_scalar,
        )
    }
}

fn check_rank(rank: usize, embed_dim: usize, feat_dim: usize) -> Result<()> {
    if rank == 0 || rank > embed_dim.min(feat_dim) {
        return Err(Error::Config(format!(
            "rank {rank} must be in 1..={}",
            embed_dim.min(feat_dim)
        )));
    }
    Ok(())
}

/// Bits exchanged per scheduled device per round:
/// `q m (embed + 2 feat) + q r (embed + feat)`.
///
/// The first term covers the uplink embeddings, the downlink features and the
/// uplink feature gradients of an `m`-sample batch; the second the low-rank
/// bookkeeping of a rank-`r` adapter (zero when `r = 0`).
pub fn payload_bits(batch: usize, embed_dim: usize, feat_dim: usize, rank: usize, q: u64) -> u64 {
    let per_sample = (embed_dim + 2 * feat_dim) as u64;
    let per_rank = (embed_dim + feat_dim) as u64;
    q * batch as u64 * per_sample + q * rank as u64 * per_rank
}

/// Low-rank pair; also used to carry adapter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    /// `embed_dim x r`
    pub a: Array2<f64>,
    /// `r x feat_dim`
    pub b: Array2<f64>,
}

impl LowRankAdapter {
    pub fn zeros_like(&self) -> Self {
        Self {
            a: Array2::zeros(self.a.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        sq(&self.a) + sq(&self.b)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.a.iter().chain(self.b.iter()).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The additive update `A B` applied on top of the encoder.
    pub fn delta(&self) -> Array2<f64> {
        self.a.dot(&self.b)
    }

    fn scaled_add(&mut self, c: f64, other: &Self) {
        self.a.scaled_add(c, &other.a);
        self.b.scaled_add(c, &other.b);
    }
}

/// Linear softmax head; also used to carry head gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    /// `feat_dim x num_classes`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl TaskHead {
    pub fn zeros(feat_dim: usize, num_classes: usize) -> Self {
        Self {
            weight: Array2::zeros((feat_dim, num_classes)),
            bias: Array1::zeros(num_classes),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        sq(&self.weight) + self.bias.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weight
            .iter()
            .chain(self.bias.iter())
            .copied()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn logits(&self, z: &Array2<f64>) -> Array2<f64> {
        z.dot(&self.weight) + &self.bias
    }
}

fn sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    embedding: Array2<f64>,
    encoder: Array2<f64>,
    pub adapter: LowRankAdapter,
    pub heads: Vec<TaskHead>,
}

impl SplitModel {
    /// Gaussian frozen weights scaled by fan-in, `A` small Gaussian, `B = 0`,
    /// zero heads.
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        num_devices: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_rank(cfg.rank, cfg.embed_dim, cfg.feat_dim)?;
        let embedding = gaussian(
            cfg.input_dim,
            cfg.embed_dim,
            1.0 / (cfg.input_dim as f64).sqrt(),
            rng,
        );
        let encoder = gaussian(
            cfg.embed_dim,
            cfg.feat_dim,
            cfg.encoder_gain / (cfg.embed_dim as f64).sqrt(),
            rng,
        );
        let adapter = LowRankAdapter {
            a: gaussian(cfg.embed_dim, cfg.rank, cfg.adapter_init_std, rng),
            b: Array2::zeros((cfg.rank, cfg.feat_dim)),
        };
        let heads = vec![TaskHead::zeros(cfg.feat_dim, cfg.num_classes); num_devices];
        Self::from_parts(embedding, encoder, adapter, heads)
    }

    pub fn from_parts(
        embedding: Array2<f64>,
        encoder: Array2<f64>,
        adapter: LowRankAdapter,
        heads: Vec<TaskHead>,
    ) -> Result<Self> {
        let (embed_dim, feat_dim) = encoder.dim();
        if embedding.ncols() != embed_dim {
            return Err(Error::Dimension(format!(
                "embedding outputs {} columns, encoder expects {embed_dim}",
                embedding.ncols()
            )));
        }
        let rank = adapter.a.ncols();
        check_rank(rank, embed_dim, feat_dim)?;
        if adapter.a.nrows() != embed_dim || adapter.b.dim() != (rank, feat_dim) {
            return Err(Error::Dimension(format!(
                "adapter shapes {:?} and {:?} do not fit {embed_dim} -> {feat_dim}",
                adapter.a.dim(),
                adapter.b.dim()
            )));
        }
        if heads.is_empty() {
            return Err(Error::Dimension(
                "model needs at least one task head".into(),
            ));
        }
        let classes = heads[0].bias.len();
        for (k, h) in heads.iter().enumerate() {
            if h.weight.dim() != (feat_dim, classes) || h.bias.len() != classes {
                return Err(Error::Dimension(format!(
                    "task head {k} has the wrong shape"
                )));
            }
        }
        Ok(Self {
            embedding,
            encoder,
            adapter,
            heads,
        })
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    pub fn encoder(&self) -> &Array2<f64> {
        &self.encoder
    }

    pub fn num_devices(&self) -> usize {
        self.heads.len()
    }

    pub fn rank(&self) -> usize {
        self.adapter.a.ncols()
    }

    /// Hash of the encoder's bit patterns, for detecting any modification.
    pub fn encoder_checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.encoder.dim().hash(&mut h);
        for v in &self.encoder {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Device-side embedding `ze = x We`.
    pub fn embed(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.embedding.nrows() {
            return Err(Error::Dimension(format!(
                "input has {} features, embedding expects {}",
                x.ncols(),
                self.embedding.nrows()
            )));
        }
        Ok(x.dot(&self.embedding))
    }

    /// Server-side encoding of already-embedded inputs.
    pub fn encode(&self, embedded: Array2<f64>) -> Result<ServerActivations> {
        if embedded.ncols() != self.encoder.nrows() {
            return Err(Error::Dimension(format!(
                "embedding has {} columns, encoder expects {}",
                embedded.ncols(),
                self.encoder.nrows()
            )));
        }
        let hidden = embedded.dot(&self.adapter.a);
        let mut features = embedded.dot(&self.encoder);
        features.mapv_inplace(f64::tanh);
        features += &hidden.dot(&self.adapter.b);
        Ok(ServerActivations {
            embedded,
            hidden,
            features,
        })
    }

    /// Full forward pass of one device's samples, returning activations and
    /// the device head's logits.
    pub fn forward(&self, device: usize, x: &Array2<f64>) -> Result<DeviceForward> {
        let head = self.head(device)?;
        let activations = self.encode(self.embed(x)?)?;
        let logits = head.logits(&activations.features);
        Ok(DeviceForward {
            device,
            activations,
            logits,
        })
    }

    pub fn head(&self, device: usize) -> Result<&TaskHead> {
        self.heads.get(device).ok_or_else(|| {
            Error::Dimension(format!(
                "device {device} out of range for {} heads",
                self.heads.len()
            ))
        })
    }
}

/// What the server caches from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerActivations {
    /// `ze`, received from the device.
    pub embedded: Array2<f64>,
    /// `ze A`
    pub hidden: Array2<f64>,
    /// `z`, returned to the device.
    pub features: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceForward {
    pub device: usize,
    pub activations: ServerActivations,
    pub logits: Array2<f64>,
}

/// Forward pass for every scheduled device on its minibatch. Output order
/// follows `scheduled`.
pub fn forward_round(
    model: &SplitModel,
    batches: &BTreeMap<usize, Dataset>,
    scheduled: &[usize],
) -> Result<Vec<DeviceForward>> {
    if scheduled.is_empty() {
        return Err(Error::Domain("scheduled set is empty".into()));
    }
    scheduled
        .iter()
        .map(|&k| {
            let batch = batches
                .get(&k)
                .ok_or_else(|| Error::Dimension(format!("no batch for scheduled device {k}")))?;
            model.forward(k, &batch.features)
        })
        .collect()
}

/// Mean softmax cross-entropy scaled by `weight`, and its gradient with
/// respect to the logits.
pub fn cross_entropy(
    logits: &Array2<f64>,
    labels: &[usize],
    weight: f64,
) -> Result<(f64, Array2<f64>)> {
    let (n, classes) = logits.dim();
    if labels.len() != n || n == 0 {
        return Err(Error::Dimension(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Dimension(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let scale = weight / n as f64;
    let mut grad = Array2::zeros((n, classes));
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.outer_iter().zip(grad.outer_iter_mut()).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - row[y];
        Zip::from(&mut g)
            .and(&row)
            .for_each(|g, &v| *g = scale * (v - log_sum).exp());
        g[y] -= scale;
    }
    Ok((weight * loss / n as f64, grad))
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                );
            best.0 == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// A device's result after its local backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGradients {
    pub device: usize,
    pub loss: f64,
    /// Gradient of the loss with respect to the device's task head.
    pub head: TaskHead,
    /// Gradient of the loss with respect to the received features `z`; this
    /// is what the device uploads.
    pub feature_grad: Array2<f64>,
}

pub fn local_gradients(
    model: &SplitModel,
    fwd: &DeviceForward,
    labels: &[usize],
) -> Result<LocalGradients> {
    local_gradients_weighted(model, fwd, labels, 1.0)
}

/// [`local_gradients`] for the loss multiplied by `weight`.
pub fn local_gradients_weighted(
    model: &SplitModel,
    fwd: &DeviceForward,
    labels: &[usize],
    weight: f64,
) -> Result<LocalGradients> {
    let head = model.head(fwd.device)?;
    let (loss, dlogits) = cross_entropy(&fwd.logits, labels, weight)?;
    let z = &fwd.activations.features;
    Ok(LocalGradients {
        device: fwd.device,
        loss,
        head: TaskHead {
            weight: z.t().dot(&dlogits),
            bias: dlogits.sum_axis(Axis(0)),
        },
        feature_grad: dlogits.dot(&head.weight.t()),
    })
}

/// Chain rule through `A` and `B` for one device's cached activations.
pub fn adapter_gradient(
    model: &SplitModel,
    activations: &ServerActivations,
    feature_grad: &Array2<f64>,
) -> Result<LowRankAdapter> {
    if feature_grad.dim() != activations.features.dim() {
        return Err(Error::Dimension(format!(
            "feature gradient {:?} does not match features {:?}",
            feature_grad.dim(),
            activations.features.dim()
        )));
    }
    Ok(LowRankAdapter {
        a: activations
            .embedded
            .t()
            .dot(&feature_grad.dot(&model.adapter.b.t())),
        b: activations.hidden.t().dot(feature_grad),
    })
}

/// Server-side average of the adapter gradients of exactly the scheduled
/// devices.
pub fn aggregate_adapter_grads(
    model: &SplitModel,
    forwards: &[DeviceForward],
    uploads: &BTreeMap<usize, Array2<f64>>,
    scheduled: &[usize],
) -> Result<LowRankAdapter> {
    if scheduled.is_empty() {
        return Err(Error::Domain("scheduled set is empty".into()));
    }
    let mut total = model.adapter.zeros_like();
    for &k in scheduled {
        let upload = uploads.get(&k).ok_or(Error::MissingUpload(k))?;
        let fwd = forwards
            .iter()
            .find(|f| f.device == k)
            .ok_or_else(|| Error::Dimension(format!("no cached activations for device {k}")))?;
        total.scaled_add(1.0, &adapter_gradient(model, &fwd.activations, upload)?);
    }
    let inv = 1.0 / scheduled.len() as f64;
    total.a *= inv;
    total.b *= inv;
    Ok(total)
}

/// One SGD step on the adapter and on the heads of the scheduled devices.
pub fn apply_updates(
    model: &mut SplitModel,
    adapter_grad: &LowRankAdapter,
    head_grads: &BTreeMap<usize, TaskHead>,
    scheduled: &[usize],
    eta: f64,
) -> Result<()> {
    if adapter_grad.a.dim() != model.adapter.a.dim()
        || adapter_grad.b.dim() != model.adapter.b.dim()
    {
        return Err(Error::Dimension("adapter gradient shape mismatch".into()));
    }
    for &k in scheduled {
        let g = head_grads.get(&k).ok_or(Error::MissingUpload(k))?;
        let head = model
            .heads
            .get(k)
            .ok_or_else(|| Error::Dimension(format!("device {k} has no task head")))?;
        if g.weight.dim() != head.weight.dim() || g.bias.len() != head.bias.len() {
            return Err(Error::Dimension(format!(
                "head gradient {k} shape mismatch"
            )));
        }
    }
    if eta == 0.0 {
        return Ok(());
    }
    model.adapter.scaled_add(-eta, adapter_grad);
    for &k in scheduled {
        let g = &head_grads[&k];
        let head = &mut model.heads[k];
        head.weight.scaled_add(-eta, &g.weight);
        head.bias.scaled_add(-eta, &g.bias);
    }
    Ok(())
}

/// Loss and exact gradients of one device's objective on a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceGradient {
    pub loss: f64,
    pub head: TaskHead,
    pub adapter: LowRankAdapter,
}

pub fn device_gradient(
    model: &SplitModel,
    device: usize,
    data: &Dataset,
) -> Result<DeviceGradient> {
    let fwd = model.forward(device, &data.features)?;
    let local = local_gradients(model, &fwd, &data.labels)?;
    let adapter = adapter_gradient(model, &fwd.activations, &local.feature_grad)?;
    Ok(DeviceGradient {
        loss: local.loss,
        head: local.head,
        adapter,
    })
}

/// Global objective: mean over devices of each device's mean loss on its own
/// data with its own head.
pub fn global_loss(model: &SplitModel, shards: &[Dataset]) -> Result<f64> {
    let sets = shards
        .iter()
        .map(|s| EvalSet::new(model, s))
        .collect::<Result<Vec<_>>>()?;
    global_loss_on(model, &sets)
}

/// Test accuracy of every device head on a shared test set, averaged.
pub fn mean_test_accuracy(model: &SplitModel, test: &Dataset) -> Result<f64> {
    Ok(mean_accuracy_on(model, &EvalSet::new(model, test)?))
}

/// A dataset pushed through the frozen embedding and encoder once, so that
/// repeated evaluation only recomputes the adapter and head terms.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    embedded: Array2<f64>,
    frozen: Array2<f64>,
    labels: Vec<usize>,
}

impl EvalSet {
    pub fn new(model: &SplitModel, data: &Dataset) -> Result<Self> {
        let embedded = model.embed(&data.features)?;
        let frozen = embedded.dot(model.encoder()).mapv(f64::tanh);
        Ok(Self {
            embedded,
            frozen,
            labels: data.labels.clone(),
        })
    }

    /// Features `z` under the model's current adapter.
    pub fn features(&self, model: &SplitModel) -> Array2<f64> {
        &self.frozen + &self.embedded.dot(&model.adapter.a).dot(&model.adapter.b)
    }
}

/// [`global_loss`] over prepared per-device sets.
pub fn global_loss_on(model: &SplitModel, sets: &[EvalSet]) -> Result<f64> {
    if sets.len() != model.num_devices() {
        return Err(Error::Dimension(format!(
            "{} datasets for {} devices",
            sets.len(),
            model.num_devices()
        )));
    }
    let mut total = 0.0;
    for (head, set) in model.heads.iter().zip(sets) {
        total += cross_entropy(&head.logits(&set.features(model)), &set.labels, 1.0)?.0;
    }
    Ok(total / sets.len() as f64)
}

/// [`mean_test_accuracy`] over a prepared test set.
pub fn mean_accuracy_on(model: &SplitModel, test: &EvalSet) -> f64 {
    let features = test.features(model);
    let total: f64 = model
        .heads
        .iter()
        .map(|h| accuracy(&h.logits(&features), &test.labels))
        .sum();
    total / model.num_devices() as f64
}
