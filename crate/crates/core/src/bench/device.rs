use serde::{Deserialize, Serialize};

use crate::error::{FearError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThermalState {
    Nominal,
    Fair,
    Serious,
    Critical,
}

impl ThermalState {
    pub fn throttled(self) -> bool {
        self >= ThermalState::Serious
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ThermalState::Nominal => "nominal",
            ThermalState::Fair => "fair",
            ThermalState::Serious => "serious",
            ThermalState::Critical => "critical",
        }
    }
}

/// Temperatures (°C) at which each non-nominal state begins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalThresholds {
    pub fair: f64,
    pub serious: f64,
    pub critical: f64,
}

impl ThermalThresholds {
    pub fn state(&self, temperature: f64) -> ThermalState {
        if temperature >= self.critical {
            ThermalState::Critical
        } else if temperature >= self.serious {
            ThermalState::Serious
        } else if temperature >= self.fair {
            ThermalState::Fair
        } else {
            ThermalState::Nominal
        }
    }
}

/// First-order battery and thermal model of the device running the tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceModel {
    /// Joules per inference at the reference latency.
    pub energy_per_inference: f64,
    /// Latency (s) over which one inference spends `energy_per_inference`.
    pub reference_latency: f64,
    pub battery_capacity: f64,
    /// Power drawn regardless of load, in watts.
    pub idle_power: f64,
    /// Heating in °C/s at full utilization.
    pub heat_rate: f64,
    /// Passive cooling in °C/s.
    pub cool_rate: f64,
    pub ambient: f64,
    pub thresholds: ThermalThresholds,
    /// Latency multiplier while the state is serious or worse.
    pub throttle_factor: f64,
}

impl DeviceModel {
    /// Light model on a device whose heating never outpaces cooling at the
    /// model's duty cycle.
    pub fn efficient() -> Self {
        DeviceModel {
            energy_per_inference: 0.02,
            reference_latency: 0.008,
            battery_capacity: 40_000.0,
            idle_power: 0.5,
            heat_rate: 0.02,
            cool_rate: 0.01,
            ambient: 30.0,
            thresholds: ThermalThresholds {
                fair: 35.0,
                serious: 40.0,
                critical: 48.0,
            },
            throttle_factor: 1.6,
        }
    }

    /// Heavy model that heats the device into throttling within minutes.
    pub fn inefficient() -> Self {
        DeviceModel {
            energy_per_inference: 0.25,
            reference_latency: 0.045,
            heat_rate: 0.05,
            ..DeviceModel::efficient()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("energy_per_inference", self.energy_per_inference),
            ("reference_latency", self.reference_latency),
            ("battery_capacity", self.battery_capacity),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FearError::config(name, "must be positive"));
            }
        }
        for (name, v) in [
            ("idle_power", self.idle_power),
            ("heat_rate", self.heat_rate),
            ("cool_rate", self.cool_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FearError::config(name, "must be non-negative"));
            }
        }
        let t = &self.thresholds;
        if !(self.ambient < t.fair && t.fair < t.serious && t.serious < t.critical) {
            return Err(FearError::config(
                "thresholds",
                "must satisfy ambient < fair < serious < critical",
            ));
        }
        if !(self.throttle_factor >= 1.0) {
            return Err(FearError::config("throttle_factor", "must be at least 1"));
        }
        Ok(())
    }

    /// Power while inferring, in watts.
    pub fn active_power(&self) -> f64 {
        self.energy_per_inference / self.reference_latency
    }

    /// Time for sustained utilization `u` to heat the device from ambient to
    /// the serious threshold, if it ever gets there.
    pub fn time_to_serious(&self, utilization: f64) -> Option<f64> {
        let rate = self.heat_rate * utilization - self.cool_rate;
        (rate > 0.0).then(|| (self.thresholds.serious - self.ambient) / rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub temperature: f64,
    /// Remaining energy in joules.
    pub battery: f64,
}

impl DeviceState {
    pub fn fresh(model: &DeviceModel) -> Self {
        DeviceState {
            temperature: model.ambient,
            battery: model.battery_capacity,
        }
    }

    pub fn battery_pct(&self, model: &DeviceModel) -> f64 {
        100.0 * self.battery / model.battery_capacity
    }

    pub fn apply(&mut self, step: &DeviceStep) {
        self.temperature += step.temperature_delta;
        self.battery = (self.battery + step.battery_delta).max(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceStep {
    /// Non-positive change of stored energy (J).
    pub battery_delta: f64,
    pub temperature_delta: f64,
    /// State after the step.
    pub thermal: ThermalState,
}

/// Integrates `dt` seconds at constant `utilization`.
pub fn device_step(model: &DeviceModel, state: &DeviceState, utilization: f64, dt: f64) -> DeviceStep {
    let u = utilization.clamp(0.0, 1.0);
    let dt = dt.max(0.0);
    let next = (state.temperature + (model.heat_rate * u - model.cool_rate) * dt).max(model.ambient);
    let drain = (model.idle_power + u * model.active_power()) * dt;
    DeviceStep {
        battery_delta: -drain.min(state.battery),
        temperature_delta: next - state.temperature,
        thermal: model.thresholds.state(next),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idle_device_cools_to_ambient() {
        let m = DeviceModel::inefficient();
        let mut s = DeviceState {
            temperature: 45.0,
            battery: 100.0,
        };
        let step = device_step(&m, &s, 0.0, 10_000.0);
        s.apply(&step);
        assert_eq!(s.temperature, m.ambient);
        assert_eq!(step.thermal, ThermalState::Nominal);
    }

    #[test]
    fn sustained_load_reaches_serious_at_closed_form_time() {
        let m = DeviceModel::inefficient();
        let t = m.time_to_serious(1.0).unwrap();
        assert!((t - 10.0 / 0.04).abs() < 1e-9);
        let mut s = DeviceState::fresh(&m);
        let dt = 0.5;
        let mut time = 0.0;
        let mut crossed = None;
        while time < 400.0 {
            let step = device_step(&m, &s, 1.0, dt);
            s.apply(&step);
            time += dt;
            if crossed.is_none() && step.thermal.throttled() {
                crossed = Some(time);
            }
        }
        assert!((crossed.unwrap() - t).abs() <= dt);
        assert!(m.time_to_serious(0.1).is_none());
    }

    #[test]
    fn states_are_ordered() {
        assert!(ThermalState::Nominal < ThermalState::Fair);
        assert!(ThermalState::Serious.throttled() && !ThermalState::Fair.throttled());
        let t = &DeviceModel::efficient().thresholds;
        assert_eq!(t.state(36.0), ThermalState::Fair);
        assert_eq!(t.state(48.0), ThermalState::Critical);
    }

    #[test]
    fn presets_validate() {
        DeviceModel::efficient().validate().unwrap();
        DeviceModel::inefficient().validate().unwrap();
        let mut bad = DeviceModel::efficient();
        bad.throttle_factor = 0.5;
        assert!(bad.validate().unwrap_err().to_string().contains("throttle_factor"));
    }
}
