//! Efficiency benchmark on a virtual clock.
//!
//! The online protocol streams frames at a fixed rate and drops every frame
//! that arrives while the previous one is still being processed. The offline
//! protocol runs a warmup followed by a fixed number of timed invocations.
//! Both drive a simulated device whose temperature and battery respond to the
//! load, with latencies stretched while the device is throttled.

mod device;
mod latency;
mod report;

use serde::{Deserialize, Serialize};

pub use device::{device_step, DeviceModel, DeviceState, DeviceStep, ThermalState, ThermalThresholds};
pub use latency::{
    ConstantLatency, LatencyProfile, LatencySource, ScriptedLatency, StochasticLatency, WallClock,
};
pub use report::{BenchReport, BenchSummary, FrameRecord, TelemetrySample};

use crate::error::{FearError, Result};

/// Slack for comparing event times accumulated in floating point.
const TIME_EPS: f64 = 1e-9;
pub const MINUTE: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    pub fps: f64,
    /// Seconds of simulated stream.
    pub duration: f64,
    pub telemetry_period: f64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            fps: 30.0,
            duration: 1800.0,
            telemetry_period: 1.0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("fps", self.fps),
            ("duration", self.duration),
            ("telemetry_period", self.telemetry_period),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FearError::config(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// Frames delivered by the stream: `floor(fps * duration)`.
    pub fn frame_count(&self) -> usize {
        (self.fps * self.duration + TIME_EPS).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    pub warmup: usize,
    pub count: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            warmup: 20,
            count: 100,
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 {
            return Err(FearError::config("warmup", "must be at least 1"));
        }
        if self.count == 0 {
            return Err(FearError::config("count", "must be at least 1"));
        }
        Ok(())
    }
}

/// A device model together with the latency of the model running on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub device: DeviceModel,
    pub latency: LatencyProfile,
}

impl DeviceProfile {
    pub fn efficient() -> Self {
        DeviceProfile {
            device: DeviceModel::efficient(),
            latency: LatencyProfile::Constant { ms: 8.0 },
        }
    }

    pub fn inefficient() -> Self {
        DeviceProfile {
            device: DeviceModel::inefficient(),
            latency: LatencyProfile::Constant { ms: 45.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.latency.validate()
    }
}

/// Steady-state achieved rate for constant effective latency `latency`:
/// every `ceil(latency / period)`-th frame is processed.
pub fn steady_state_fps(fps: f64, latency: f64) -> f64 {
    let period = 1.0 / fps;
    let stride = ((latency / period) - TIME_EPS).ceil().max(1.0);
    fps / stride
}

/// Mean utilization of the steady state above.
pub fn steady_state_utilization(fps: f64, latency: f64) -> f64 {
    let period = 1.0 / fps;
    let stride = ((latency / period) - TIME_EPS).ceil().max(1.0);
    (latency / (period * stride)).min(1.0)
}

/// Piecewise-exact device integration between events.
struct Sim<'a> {
    device: &'a DeviceModel,
    state: DeviceState,
    thermal: ThermalState,
    now: f64,
    busy_until: f64,
    time_to_serious: Option<f64>,
}

impl<'a> Sim<'a> {
    fn new(device: &'a DeviceModel) -> Self {
        Sim {
            device,
            state: DeviceState::fresh(device),
            thermal: ThermalState::Nominal,
            now: 0.0,
            busy_until: 0.0,
            time_to_serious: None,
        }
    }

    fn integrate(&mut self, dt: f64, utilization: f64) {
        if dt <= 0.0 {
            return;
        }
        let before = self.state.temperature;
        let step = device_step(self.device, &self.state, utilization, dt);
        self.state.apply(&step);
        if self.time_to_serious.is_none() && step.thermal.throttled() {
            // temperature moves linearly within a piece
            let target = self.device.thresholds.serious;
            let rate = (self.state.temperature - before) / dt;
            let offset = if rate > 0.0 { ((target - before) / rate).clamp(0.0, dt) } else { 0.0 };
            self.time_to_serious = Some(self.now + offset);
        }
        self.thermal = step.thermal;
        self.now += dt;
    }

    /// Advances to `t`, busy until `busy_until` and idle afterwards.
    fn advance_to(&mut self, t: f64) {
        if t <= self.now {
            return;
        }
        let busy_end = self.busy_until.clamp(self.now, t);
        self.integrate(busy_end - self.now, 1.0);
        self.integrate(t - self.now, 0.0);
        self.now = t;
    }

    fn latency_multiplier(&self) -> f64 {
        if self.thermal.throttled() {
            self.device.throttle_factor
        } else {
            1.0
        }
    }
}

/// Online protocol: frame `k` arrives at `k / fps` and is processed iff the
/// engine is idle at that instant; otherwise it is skipped.
pub fn run_online(
    source: &mut dyn LatencySource,
    cfg: &OnlineConfig,
    device: &DeviceModel,
) -> Result<BenchReport> {
    cfg.validate()?;
    device.validate()?;
    let n = cfg.frame_count();
    let mut sim = Sim::new(device);
    let mut records = Vec::with_capacity(n);
    let mut telemetry = Vec::new();
    let mut next_tel = 0usize;
    let mut processed_total = 0usize;
    let mut processed_at_last_tel = 0usize;

    let mut emit_until = |sim: &mut Sim<'_>, t: f64, processed: usize, telemetry: &mut Vec<TelemetrySample>| {
        loop {
            let tt = next_tel as f64 * cfg.telemetry_period;
            if tt > t + TIME_EPS || tt > cfg.duration + TIME_EPS {
                break;
            }
            sim.advance_to(tt);
            let window = if next_tel == 0 { 0.0 } else { cfg.telemetry_period };
            telemetry.push(TelemetrySample {
                time: tt,
                battery_pct: sim.state.battery_pct(device),
                temperature: sim.state.temperature,
                thermal: sim.thermal,
                processed,
                fps: if window > 0.0 {
                    (processed - processed_at_last_tel) as f64 / window
                } else {
                    0.0
                },
            });
            processed_at_last_tel = processed;
            next_tel += 1;
        }
    };

    for k in 0..n {
        let t = k as f64 / cfg.fps;
        // a sample taken at a frame's arrival instant excludes that frame
        emit_until(&mut sim, t, processed_total, &mut telemetry);
        sim.advance_to(t);
        let idle = t + TIME_EPS >= sim.busy_until;
        let latency = if idle {
            let l = source.invoke() * sim.latency_multiplier();
            sim.busy_until = t + l;
            processed_total += 1;
            l
        } else {
            0.0
        };
        records.push(FrameRecord {
            index: k,
            time: t,
            latency,
            processed: idle,
            warmup: false,
            battery_pct: sim.state.battery_pct(device),
            thermal: sim.thermal,
        });
    }
    emit_until(&mut sim, cfg.duration, processed_total, &mut telemetry);
    sim.advance_to(cfg.duration);

    let processed = processed_total;
    let skipped = n - processed;
    let minute_fps = bucket_fps(&records, cfg.duration, MINUTE);
    let latencies: Vec<f64> = records.iter().filter(|r| r.processed).map(|r| r.latency).collect();
    Ok(BenchReport {
        records,
        telemetry,
        summary: BenchSummary {
            protocol: "online".into(),
            invocations: processed,
            processed,
            skipped,
            fps: processed as f64 / cfg.duration,
            minute_fps,
            mean_latency: mean(&latencies),
            final_battery_pct: sim.state.battery_pct(device),
            final_temperature: sim.state.temperature,
            time_to_serious: sim.time_to_serious,
        },
    })
}

/// Processed frames per second within consecutive buckets of `width` seconds;
/// a trailing partial bucket is divided by its own length.
pub fn bucket_fps(records: &[FrameRecord], duration: f64, width: f64) -> Vec<f64> {
    let buckets = (duration / width - TIME_EPS).ceil().max(1.0) as usize;
    let mut counts = vec![0usize; buckets];
    for r in records.iter().filter(|r| r.processed) {
        let b = ((r.time / width + TIME_EPS).floor() as usize).min(buckets - 1);
        counts[b] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(b, &c)| {
            let len = (duration - b as f64 * width).min(width);
            c as f64 / len
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Offline protocol: `warmup + count` back-to-back invocations; the rate is
/// `count / sum(latency)` over the counted invocations only.
pub fn run_offline(
    source: &mut dyn LatencySource,
    cfg: &OfflineConfig,
    device: &DeviceModel,
) -> Result<BenchReport> {
    cfg.validate()?;
    device.validate()?;
    let mut sim = Sim::new(device);
    let total = cfg.warmup + cfg.count;
    let mut records = Vec::with_capacity(total);
    let mut counted = 0.0;
    let mut counted_latencies = Vec::with_capacity(cfg.count);
    for k in 0..total {
        let t = sim.now;
        let l = source.invoke() * sim.latency_multiplier();
        let warmup = k < cfg.warmup;
        if !warmup {
            counted += l;
            counted_latencies.push(l);
        }
        records.push(FrameRecord {
            index: k,
            time: t,
            latency: l,
            processed: true,
            warmup,
            battery_pct: sim.state.battery_pct(device),
            thermal: sim.thermal,
        });
        sim.busy_until = t + l;
        sim.advance_to(t + l);
    }
    let fps = if counted > 0.0 { cfg.count as f64 / counted } else { f64::INFINITY };
    Ok(BenchReport {
        records,
        telemetry: Vec::new(),
        summary: BenchSummary {
            protocol: "offline".into(),
            invocations: total,
            processed: cfg.count,
            skipped: 0,
            fps,
            minute_fps: Vec::new(),
            mean_latency: mean(&counted_latencies),
            final_battery_pct: sim.state.battery_pct(device),
            final_temperature: sim.state.temperature,
            time_to_serious: sim.time_to_serious,
        },
    })
}
