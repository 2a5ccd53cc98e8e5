//! End-of-run metrics, mode comparison and output files.
//!
//! Output schemas are fixed:
//!
//! * `trajectory.csv`: one row per vehicle per tick with the columns in
//!   [`trajectory_header`].
//! * `summary.json`: a serialized [`RunSummary`].
//! * `events.jsonl`: one [`Event`] per line.
//! * `comparison.json`: a serialized [`Comparison`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{count_stops, Event, Mode, RunOutput, ScenarioConfig, TickRecord};
use crate::fuel::STANDSTILL_SPEED;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    /// Litres per vehicle, indexed by vehicle id.
    pub vehicle_fuel: Vec<f64>,
    pub leader_fuel: f64,
    pub total_fuel: f64,
    pub vehicle_stops: Vec<u32>,
    pub leader_stops: u32,
    pub travel_time: f64,
    pub split_count: usize,
    pub split_times: Vec<f64>,
    pub laps_completed: f64,
}

impl RunSummary {
    /// Stops are counted from each vehicle's first motion, so the shared
    /// standstill at spawn is not a stop.
    pub fn from_run(config: &ScenarioConfig, records: &[TickRecord], events: &[Event], laps_completed: f64) -> Self {
        let n = config.vehicle_count;
        let mut vehicle_fuel = vec![0.0; n];
        let mut speeds = vec![Vec::with_capacity(records.len()); n];
        for r in records {
            for v in &r.vehicles {
                let i = v.vehicle_id.0 as usize;
                vehicle_fuel[i] += v.fuel_rate * config.dt;
                speeds[i].push(v.v);
            }
        }
        let vehicle_stops: Vec<u32> = speeds
            .iter()
            .map(|s| {
                let first_motion = s.iter().position(|&v| v >= STANDSTILL_SPEED).unwrap_or(s.len());
                count_stops(&s[first_motion..], config.dt)
            })
            .collect();
        let split_times: Vec<f64> = events
            .iter()
            .filter_map(|e| match e {
                Event::Split { t, .. } => Some(*t),
                _ => None,
            })
            .collect();
        Self {
            mode: config.mode,
            leader_fuel: vehicle_fuel.first().copied().unwrap_or(0.0),
            total_fuel: vehicle_fuel.iter().sum(),
            vehicle_fuel,
            leader_stops: vehicle_stops.first().copied().unwrap_or(0),
            vehicle_stops,
            travel_time: records.last().map_or(0.0, |r| r.t),
            split_count: split_times.len(),
            split_times,
            laps_completed,
        }
    }
}

/// Percentage saved going from `baseline` to `advisory`.
pub fn savings_pct(baseline: f64, advisory: f64) -> f64 {
    (baseline - advisory) / baseline * 100.0
}

/// One decimal, truncated toward zero (41.27 is shown as 41.2).
pub fn one_decimal(pct: f64) -> f64 {
    let scaled = pct * 10.0;
    // absorb representation error such as 37.49999999 for an exact 37.5
    let nudged = scaled + 1e-9 * scaled.signum();
    nudged.trunc() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub leader_fuel_baseline: f64,
    pub leader_fuel_advisory: f64,
    pub leader_savings_pct: f64,
    pub platoon_fuel_baseline: f64,
    pub platoon_fuel_advisory: f64,
    pub platoon_savings_pct: f64,
    pub leader_stops_baseline: u32,
    pub leader_stops_advisory: u32,
    pub advisory_split_count: usize,
}

impl Comparison {
    pub fn new(baseline: &RunSummary, advisory: &RunSummary) -> Self {
        Self {
            leader_fuel_baseline: baseline.leader_fuel,
            leader_fuel_advisory: advisory.leader_fuel,
            leader_savings_pct: one_decimal(savings_pct(baseline.leader_fuel, advisory.leader_fuel)),
            platoon_fuel_baseline: baseline.total_fuel,
            platoon_fuel_advisory: advisory.total_fuel,
            platoon_savings_pct: one_decimal(savings_pct(baseline.total_fuel, advisory.total_fuel)),
            leader_stops_baseline: baseline.leader_stops,
            leader_stops_advisory: advisory.leader_stops,
            advisory_split_count: advisory.split_count,
        }
    }

    pub fn table(&self) -> String {
        format!(
            "{:<16}{:>14}{:>14}{:>18}\n{:<16}{:>14.4}{:>14.4}{:>18.1}\n{:<16}{:>14.4}{:>14.4}{:>18.1}\n",
            "",
            "Baseline (L)",
            "Advisory (L)",
            "Fuel Savings (%)",
            "Platoon Leader",
            self.leader_fuel_baseline,
            self.leader_fuel_advisory,
            self.leader_savings_pct,
            "Entire Platoon",
            self.platoon_fuel_baseline,
            self.platoon_fuel_advisory,
            self.platoon_savings_pct,
        )
    }
}

/// Header for the trajectory CSV given the signal ids in record order.
pub fn trajectory_header(records: &[TickRecord]) -> Vec<String> {
    let mut header: Vec<String> = [
        "t",
        "vehicle_id",
        "platoon_id",
        "arc_s",
        "x",
        "y",
        "v",
        "u",
        "delta",
        "fuel_rate",
        "cum_fuel",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if let Some(first) = records.first() {
        for s in &first.signals {
            header.push(format!("signal_{}_phase", s.signal_id));
            header.push(format!("signal_{}_remaining", s.signal_id));
        }
    }
    header
}

pub fn write_trajectory_csv(records: &[TickRecord], out: impl Write) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(records))?;
    for r in records {
        let mut signal_cols = Vec::with_capacity(2 * r.signals.len());
        for s in &r.signals {
            signal_cols.push(s.phase.as_str().to_string());
            signal_cols.push(format!("{}", s.remaining));
        }
        for v in &r.vehicles {
            let mut row = vec![
                format!("{}", r.t),
                v.vehicle_id.to_string(),
                v.platoon_id.to_string(),
                format!("{}", v.arc_s),
                format!("{}", v.x),
                format!("{}", v.y),
                format!("{}", v.v),
                format!("{}", v.u),
                format!("{}", v.delta),
                format!("{}", v.fuel_rate),
                format!("{}", v.cum_fuel),
            ];
            row.extend(signal_cols.iter().cloned());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_events_jsonl(events: &[Event], mut out: impl Write) -> Result<(), ReportError> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `trajectory.csv`, `summary.json` and `events.jsonl` into `dir`.
pub fn write_run(dir: &Path, output: &RunOutput) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    write_trajectory_csv(
        &output.records,
        BufWriter::new(File::create(dir.join("trajectory.csv"))?),
    )?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&output.summary)? + "\n",
    )?;
    write_events_jsonl(&output.events, BufWriter::new(File::create(dir.join("events.jsonl"))?))?;
    Ok(())
}

pub fn write_comparison(dir: &Path, comparison: &Comparison) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("comparison.json"),
        serde_json::to_string_pretty(comparison)? + "\n",
    )?;
    Ok(())
}
