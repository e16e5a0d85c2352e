use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ThermalState;
use crate::error::Result;

/// One invocation slot: a stream frame (online) or a timed call (offline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    /// Simulated seconds at which the frame arrived or the call started.
    pub time: f64,
    /// Effective latency in seconds; zero for skipped frames.
    pub latency: f64,
    pub processed: bool,
    pub warmup: bool,
    pub battery_pct: f64,
    pub thermal: ThermalState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub time: f64,
    pub battery_pct: f64,
    pub temperature: f64,
    pub thermal: ThermalState,
    /// Frames processed so far.
    pub processed: usize,
    /// Processed frames per second over the preceding telemetry period.
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub protocol: String,
    pub invocations: usize,
    pub processed: usize,
    pub skipped: usize,
    /// Online: processed frames over the stream duration. Offline: counted
    /// calls over their summed latency.
    pub fps: f64,
    pub minute_fps: Vec<f64>,
    pub mean_latency: f64,
    pub final_battery_pct: f64,
    pub final_temperature: f64,
    pub time_to_serious: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub records: Vec<FrameRecord>,
    pub telemetry: Vec<TelemetrySample>,
    pub summary: BenchSummary,
}

impl BenchReport {
    pub fn write_records_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.records)
    }

    pub fn write_telemetry_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.telemetry)
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    /// Writes `records.csv`, `telemetry.csv` (online only) and `summary.json`
    /// into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_records_csv(&dir.join("records.csv"))?;
        if !self.telemetry.is_empty() {
            self.write_telemetry_csv(&dir.join("telemetry.csv"))?;
        }
        std::fs::write(dir.join("summary.json"), self.summary_json()?)?;
        Ok(())
    }
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{run_online, ConstantLatency, DeviceModel, OnlineConfig};

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = OnlineConfig {
            duration: 2.0,
            ..OnlineConfig::default()
        };
        let r = run_online(&mut ConstantLatency(0.05), &cfg, &DeviceModel::efficient()).unwrap();
        r.write_all(dir.path()).unwrap();
        let mut rd = csv::Reader::from_path(dir.path().join("records.csv")).unwrap();
        let back: Vec<FrameRecord> = rd.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(back, r.records);
        let s: BenchSummary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(s, r.summary);
        assert!(dir.path().join("telemetry.csv").exists());
    }
}
