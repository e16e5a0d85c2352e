use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FearError, Result};

/// Something the benchmark can invoke; each call reports its latency in
/// seconds.
pub trait LatencySource {
    fn invoke(&mut self) -> f64;
}

#[derive(Debug, Clone)]
pub struct ConstantLatency(pub f64);

impl LatencySource for ConstantLatency {
    fn invoke(&mut self) -> f64 {
        self.0
    }
}

/// Replays a fixed sequence, repeating the last value once exhausted.
#[derive(Debug, Clone)]
pub struct ScriptedLatency {
    values: Vec<f64>,
    next: usize,
}

impl ScriptedLatency {
    pub fn new(values: Vec<f64>) -> Self {
        ScriptedLatency { values, next: 0 }
    }

    pub fn calls(&self) -> usize {
        self.next
    }
}

impl LatencySource for ScriptedLatency {
    fn invoke(&mut self) -> f64 {
        let v = self
            .values
            .get(self.next)
            .or(self.values.last())
            .copied()
            .unwrap_or(0.0);
        self.next += 1;
        v
    }
}

/// Normally distributed latency truncated below at a tenth of the mean.
#[derive(Debug, Clone)]
pub struct StochasticLatency {
    dist: Normal<f64>,
    floor: f64,
    rng: ChaCha8Rng,
}

impl StochasticLatency {
    pub fn new(mean: f64, std: f64, seed: u64) -> Result<Self> {
        let dist = Normal::new(mean, std).map_err(|e| FearError::config("std_ms", e.to_string()))?;
        Ok(StochasticLatency {
            dist,
            floor: mean * 0.1,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl LatencySource for StochasticLatency {
    fn invoke(&mut self) -> f64 {
        self.dist.sample(&mut self.rng).max(self.floor)
    }
}

/// Measures a real callable with the host clock.
pub struct WallClock<F: FnMut()> {
    f: F,
}

impl<F: FnMut()> WallClock<F> {
    pub fn new(f: F) -> Self {
        WallClock { f }
    }
}

impl<F: FnMut()> LatencySource for WallClock<F> {
    fn invoke(&mut self) -> f64 {
        let start = Instant::now();
        (self.f)();
        start.elapsed().as_secs_f64()
    }
}

/// Serializable description of a synthetic latency source, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LatencyProfile {
    Constant { ms: f64 },
    Stochastic { mean_ms: f64, std_ms: f64, seed: u64 },
    Scripted { ms: Vec<f64> },
}

impl LatencyProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LatencyProfile::Constant { ms } => *ms > 0.0,
            LatencyProfile::Stochastic { mean_ms, std_ms, .. } => *mean_ms > 0.0 && *std_ms >= 0.0,
            LatencyProfile::Scripted { ms } => !ms.is_empty() && ms.iter().all(|v| *v > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(FearError::config("latency", "latencies must be positive"))
        }
    }

    pub fn source(&self) -> Result<Box<dyn LatencySource>> {
        self.validate()?;
        Ok(match self {
            LatencyProfile::Constant { ms } => Box::new(ConstantLatency(ms / 1000.0)),
            LatencyProfile::Stochastic {
                mean_ms,
                std_ms,
                seed,
            } => Box::new(StochasticLatency::new(mean_ms / 1000.0, std_ms / 1000.0, *seed)?),
            LatencyProfile::Scripted { ms } => {
                Box::new(ScriptedLatency::new(ms.iter().map(|v| v / 1000.0).collect()))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_repeats_last() {
        let mut s = ScriptedLatency::new(vec![0.1, 0.2]);
        assert_eq!([s.invoke(), s.invoke(), s.invoke()], [0.1, 0.2, 0.2]);
        assert_eq!(s.calls(), 3);
    }

    #[test]
    fn stochastic_is_seeded_and_positive() {
        let mut a = StochasticLatency::new(0.02, 0.03, 5).unwrap();
        let mut b = StochasticLatency::new(0.02, 0.03, 5).unwrap();
        for _ in 0..100 {
            let x = a.invoke();
            assert_eq!(x, b.invoke());
            assert!(x >= 0.002);
        }
    }

    #[test]
    fn profile_from_toml() {
        let p: LatencyProfile = toml::from_str("kind = \"constant\"\nms = 20.0").unwrap();
        assert_eq!(p, LatencyProfile::Constant { ms: 20.0 });
        assert_eq!(p.source().unwrap().invoke(), 0.02);
    }

    #[test]
    fn wall_clock_measures_something() {
        let mut w = WallClock::new(|| std::thread::sleep(std::time::Duration::from_millis(2)));
        assert!(w.invoke() >= 0.002);
    }
}
