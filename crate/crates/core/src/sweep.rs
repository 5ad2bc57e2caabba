//! One-parameter scenario sweeps.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use crate::autodp::Topology;
use crate::autopipe::{load_balance, optimal_chunks};
use crate::engine::{iteration_setup, simulate_run, static_stages, Features, Scenario};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::m_partition;
use crate::report::write_csv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Freeze aggressiveness `α`.
    Alpha,
    /// Micro-batch profiles at the given pipeline lengths.
    Chunks,
    /// Inter-node bandwidth in bytes/s.
    Bandwidth,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "chunks" => Ok(SweepAxis::Chunks),
            "bandwidth" => Ok(SweepAxis::Bandwidth),
            other => Err(Error::config(
                "sweep",
                format!("unknown axis `{other}` (expected alpha, chunks or bandwidth)"),
            )),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Chunks => "chunks",
            SweepAxis::Bandwidth => "bandwidth",
        })
    }
}

/// Parses a number, accepting fractions such as `1/3`.
pub fn parse_value(s: &str) -> Result<f64> {
    let s = s.trim();
    let bad = || Error::config("values", format!("`{s}` is not a number"));
    let v = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            n / d
        }
        None => s.parse().map_err(|_| bad())?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

pub fn parse_values(list: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = list
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(parse_value)
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::config("values", "no sweep values given"));
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSweepRow {
    pub value: f64,
    pub speedup: f64,
    pub comm_ratio: f64,
    pub total_time: f64,
    pub baseline_time: f64,
    pub final_pipeline_length: usize,
    pub final_frozen_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkSweepRow {
    pub pipeline_length: usize,
    pub replicas: usize,
    pub micro_batches: usize,
    pub iteration_time: f64,
    pub chosen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepOutput {
    Runs(Vec<RunSweepRow>),
    Chunks(Vec<ChunkSweepRow>),
}

impl SweepOutput {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        match self {
            SweepOutput::Runs(rows) => write_csv(rows, out),
            SweepOutput::Chunks(rows) => write_csv(rows, out),
        }
    }
}

pub fn sweep(
    scenario: &Scenario,
    features: Features,
    axis: SweepAxis,
    values: &[f64],
    exec: Execution,
) -> Result<SweepOutput> {
    if values.is_empty() {
        return Err(Error::config("values", "no sweep values given"));
    }
    match axis {
        SweepAxis::Alpha | SweepAxis::Bandwidth => {
            let rows = exec::try_map(exec, values, |&v| {
                let mut s = scenario.clone();
                match axis {
                    SweepAxis::Alpha => s.training.alpha = v,
                    _ => s.cluster.inter_node_bandwidth = v,
                }
                let c = simulate_run(&s, features, Execution::Sequential)?;
                let last = c.run.report.rows.last().expect("at least one epoch");
                Ok::<_, Error>(RunSweepRow {
                    value: v,
                    speedup: c.speedup(),
                    comm_ratio: c.run.report.comm_ratio(),
                    total_time: c.run.report.total_time(),
                    baseline_time: c.baseline.total_time(),
                    final_pipeline_length: last.pipeline_length,
                    final_frozen_layers: last.frozen_layers,
                })
            })?;
            Ok(SweepOutput::Runs(rows))
        }
        SweepAxis::Chunks => {
            let lengths: Vec<usize> = values
                .iter()
                .map(|&v| {
                    if v >= 1.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::config("values", format!("{v} is not a pipeline length")))
                    }
                })
                .collect::<Result<_>>()?;
            let seq = m_partition(&scenario.model, 0)?;
            let tables = exec::try_map(exec, &lengths, |&k| {
                let topology = Topology::new(scenario.cluster.clone(), k)?;
                let plan = load_balance(&seq, k, scenario.training.lambda_frozen, scenario.criterion)?;
                let stages = static_stages(&plan, &scenario.model, 0, scenario.cost.bucket_bytes);
                let setup = iteration_setup(scenario, stages, 1.0, &topology);
                let profile = optimal_chunks(&setup, Execution::Sequential)?;
                Ok::<_, Error>(
                    profile
                        .candidates
                        .iter()
                        .map(|&(m, t)| ChunkSweepRow {
                            pipeline_length: k,
                            replicas: topology.replicas(),
                            micro_batches: m,
                            iteration_time: t,
                            chosen: m == profile.chosen,
                        })
                        .collect::<Vec<_>>(),
                )
            })?;
            Ok(SweepOutput::Chunks(tables.into_iter().flatten().collect()))
        }
    }
}
