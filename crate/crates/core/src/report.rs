//! CSV and JSON writers for run artifacts.

use std::io::Write;

use serde::Serialize;

use crate::autodp::TransitionLog;
use crate::engine::{CacheEvent, EpochRow, TimelineEntry};
use crate::error::Result;

/// Column order of the run report CSV.
pub const REPORT_COLUMNS: [&str; 15] = [
    "epoch",
    "frozen_layers",
    "pipeline_length",
    "replicas",
    "micro_batches",
    "iterations",
    "iteration_time",
    "epoch_time",
    "throughput",
    "bubble_time",
    "comm_time",
    "exposed_comm_time",
    "cache_enabled",
    "cache_stall",
    "transition_overhead",
];

pub fn write_report_csv<W: Write>(rows: &[EpochRow], out: W) -> Result<()> {
    write_csv(rows, out)
}

/// Writes serializable rows with a header line.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timeline<W: Write>(entries: &[TimelineEntry], out: W) -> Result<()> {
    write_json(entries, out)
}

pub fn write_cache_events<W: Write>(events: &[CacheEvent], out: W) -> Result<()> {
    write_json(events, out)
}

/// One JSON object per line.
pub fn write_transitions<W: Write>(logs: &[TransitionLog], mut out: W) -> Result<()> {
    for log in logs {
        serde_json::to_writer(&mut out, log)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized, W: Write>(value: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
