//! Device deployment, block-fading channel gains and FDMA rate/delay evaluation.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Small-scale fading model applied on top of path loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fading {
    /// Unit-mean exponential power (Rayleigh amplitude), redrawn every round.
    #[default]
    Rayleigh,
    /// No small-scale fading: the power draw is fixed to 1.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Edge server coordinates in metres.
    pub server_position: [f64; 2],
    pub device_disc_center: [f64; 2],
    pub device_disc_radius: f64,
    /// Path-loss reference distance `d0` in metres.
    pub reference_distance: f64,
    pub pathloss_exponent: f64,
    /// Noise power spectral density in W/Hz.
    pub noise_psd: f64,
    /// Shared uplink bandwidth in Hz.
    pub total_bandwidth: f64,
    pub num_devices: usize,
    pub rng_seed: u64,
    pub fading: Fading,
    /// Transmit power in W; multiplies every gain.
    pub transmit_power: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            server_position: [0.0, 0.0],
            device_disc_center: [300.0, 0.0],
            device_disc_radius: 50.0,
            reference_distance: 10.0,
            pathloss_exponent: 3.5,
            noise_psd: 1e-11,
            total_bandwidth: 10e6,
            num_devices: 20,
            rng_seed: 0,
            fading: Fading::Rayleigh,
            transmit_power: 1.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.device_disc_radius,
            self.reference_distance,
            self.pathloss_exponent,
            self.noise_psd,
            self.total_bandwidth,
            self.transmit_power,
        ]
        .iter()
        .chain(self.server_position.iter())
        .chain(self.device_disc_center.iter())
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("channel parameters must be finite".into()));
        }
        if self.reference_distance <= 0.0 {
            return Err(Error::Config("reference_distance must be > 0".into()));
        }
        if self.noise_psd <= 0.0 {
            return Err(Error::Config("noise_psd must be > 0".into()));
        }
        if self.total_bandwidth <= 0.0 {
            return Err(Error::Config("total_bandwidth must be > 0".into()));
        }
        if self.num_devices == 0 {
            return Err(Error::Config("num_devices must be >= 1".into()));
        }
        if self.device_disc_radius < 0.0 {
            return Err(Error::Config("device_disc_radius must be >= 0".into()));
        }
        if self.transmit_power <= 0.0 {
            return Err(Error::Config("transmit_power must be > 0".into()));
        }
        Ok(())
    }

    /// Path-loss factor `(d / d0)^-exponent`, with `d` clamped below at `d0`.
    pub fn pathloss(&self, position: [f64; 2]) -> f64 {
        let dx = position[0] - self.server_position[0];
        let dy = position[1] - self.server_position[1];
        let d = dx.hypot(dy).max(self.reference_distance);
        (d / self.reference_distance).powf(-self.pathloss_exponent)
    }
}

/// Per-round channel power gains `|h_k(t)|^2`, one per device.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSnapshot {
    pub round: usize,
    pub gains: Vec<f64>,
}

impl ChannelSnapshot {
    pub fn new(round: usize, gains: Vec<f64>) -> Result<Self> {
        if gains.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Domain(
                "channel gains must be finite and >= 0".into(),
            ));
        }
        Ok(Self { round, gains })
    }

    pub fn num_devices(&self) -> usize {
        self.gains.len()
    }

    /// Device indices ordered by gain, strongest first; ties go to the lower index.
    pub fn descending_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.gains.len()).collect();
        order.sort_by(|&a, &b| self.gains[b].total_cmp(&self.gains[a]).then(a.cmp(&b)));
        order
    }
}

/// RNG used for device placement. Independent of every per-round stream.
pub fn deployment_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// RNG for the fading draws of round `t`; a pure function of `(seed, t)`.
pub fn round_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// Places `K` devices uniformly on the configured disc.
pub fn deploy_devices(cfg: &ChannelConfig) -> Vec<[f64; 2]> {
    let mut rng = deployment_rng(cfg.rng_seed);
    let [cx, cy] = cfg.device_disc_center;
    (0..cfg.num_devices)
        .map(|_| {
            let u: f64 = rng.random();
            let theta: f64 = rng.random::<f64>() * 2.0 * PI;
            let r = cfg.device_disc_radius * u.sqrt();
            [cx + r * theta.cos(), cy + r * theta.sin()]
        })
        .collect()
}

/// Draws one block-fading snapshot for the given device positions.
pub fn sample_gains<R: Rng + ?Sized>(
    cfg: &ChannelConfig,
    positions: &[[f64; 2]],
    t: usize,
    rng: &mut R,
) -> ChannelSnapshot {
    let gains = positions
        .iter()
        .map(|&p| {
            let small_scale = match cfg.fading {
                Fading::Rayleigh => rng.sample::<f64, _>(Exp1),
                Fading::None => 1.0,
            };
            cfg.transmit_power * cfg.pathloss(p) * small_scale
        })
        .collect();
    ChannelSnapshot { round: t, gains }
}

/// Positions plus the seed they were drawn from; produces reproducible
/// snapshots for any round index.
#[derive(Debug, Clone)]
pub struct ChannelSimulator {
    cfg: ChannelConfig,
    positions: Vec<[f64; 2]>,
}

impl ChannelSimulator {
    pub fn new(cfg: ChannelConfig) -> Result<Self> {
        cfg.validate()?;
        let positions = deploy_devices(&cfg);
        Ok(Self { cfg, positions })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn snapshot(&self, t: usize) -> ChannelSnapshot {
        let mut rng = round_rng(self.cfg.rng_seed, t);
        sample_gains(&self.cfg, &self.positions, t, &mut rng)
    }
}

/// FDMA uplink rate `B_k log2(1 + g / (B_k sigma^2))` in bit/s.
///
/// A zero bandwidth yields rate 0, the continuous limit.
pub fn achievable_rate(bandwidth: f64, gain: f64, noise_psd: f64) -> Result<f64> {
    if !(noise_psd > 0.0) {
        return Err(Error::Domain(format!(
            "noise psd must be > 0, got {noise_psd}"
        )));
    }
    if !(bandwidth >= 0.0) || !(gain >= 0.0) {
        return Err(Error::Domain(format!(
            "bandwidth and gain must be >= 0, got {bandwidth} and {gain}"
        )));
    }
    if bandwidth == 0.0 || gain == 0.0 {
        return Ok(0.0);
    }
    if bandwidth.is_infinite() {
        return Ok(gain / (noise_psd * LN_2));
    }
    Ok(bandwidth * (gain / (bandwidth * noise_psd)).ln_1p() / LN_2)
}

/// Round delay `max_k mu / r_k` over the scheduled devices.
pub fn transmission_delay(payload_bits: f64, rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::Domain("transmission delay of an empty set".into()));
    }
    if !(payload_bits > 0.0) {
        return Err(Error::Domain(format!(
            "payload must be > 0, got {payload_bits}"
        )));
    }
    let mut worst: f64 = 0.0;
    for (device, &r) in rates.iter().enumerate() {
        if !(r > 0.0) {
            return Err(Error::Unreachable { device });
        }
        worst = worst.max(payload_bits / r);
    }
    Ok(worst)
}
