//! Affine latency model for the collectives and its calibration.
//!
//! `latency = rounds * alpha + per_block_bytes * us_per_byte`, with separate
//! parameters per primitive and per link. On chip a collective takes `log2(N)`
//! rounds; off chip it takes a fixed number of global-memory round trips
//! (write partials, then aggregate).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::traffic::TrafficBreakdown;
use crate::collectives::Primitive;
use crate::error::{Result, SimError};
use crate::sim::validate_cluster_size;

/// Cluster size the bundled latency fixture was measured at.
pub const FIXTURE_CLUSTER_SIZE: usize = 4;

/// Bundled microbenchmark fixture (`fixtures/table1.csv`).
pub const TABLE1_CSV: &str = include_str!("../../../../fixtures/table1.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    OnChip,
    OffChip,
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::OnChip => "on_chip",
            Link::OffChip => "off_chip",
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Link {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "on_chip" | "on-chip" | "dsmem" => Ok(Link::OnChip),
            "off_chip" | "off-chip" | "global" => Ok(Link::OffChip),
            other => Err(format!("unknown channel `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineCost {
    /// Latency per round, microseconds.
    pub alpha_us: f64,
    /// Inverse bandwidth, microseconds per byte sent by one block.
    pub us_per_byte: f64,
}

impl AffineCost {
    /// Bandwidth in bytes per microsecond (infinite when `us_per_byte` is 0).
    pub fn beta_bytes_per_us(&self) -> f64 {
        1.0 / self.us_per_byte
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveCost {
    pub on_chip: AffineCost,
    pub off_chip: AffineCost,
}

impl PrimitiveCost {
    pub fn link(&self, link: Link) -> &AffineCost {
        match link {
            Link::OnChip => &self.on_chip,
            Link::OffChip => &self.off_chip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub reduce: PrimitiveCost,
    pub gather: PrimitiveCost,
    /// Global-memory round trips per off-chip collective.
    pub off_chip_rounds: u32,
}

impl CostParams {
    pub fn primitive(&self, p: Primitive) -> &PrimitiveCost {
        match p {
            Primitive::Reduce => &self.reduce,
            Primitive::Gather => &self.gather,
        }
    }

    /// Parameters fitted to the bundled fixture.
    pub fn calibrated() -> Self {
        let points = parse_fixture(TABLE1_CSV).expect("bundled fixture parses");
        calibrate_cost_params(&points, FIXTURE_CLUSTER_SIZE, 2)
            .expect("bundled fixture is well-conditioned")
            .params
    }
}

pub fn rounds(link: Link, n: usize, off_chip_rounds: u32) -> u32 {
    if n <= 1 {
        return 0;
    }
    match link {
        Link::OnChip => n.trailing_zeros(),
        Link::OffChip => off_chip_rounds,
    }
}

/// Bytes one block moves during a collective.
///
/// On chip: reduce sends the buffer every round, gather sends `N - 1` segments
/// in total. Off chip: reduce writes its partial and reads the result; gather
/// writes its segment and reads all `N`.
pub fn per_block_bytes(primitive: Primitive, payload_bytes: u64, n: usize, link: Link) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let p = payload_bytes as f64;
    let n_f = n as f64;
    match (primitive, link) {
        (Primitive::Reduce, Link::OnChip) => p * n.trailing_zeros() as f64,
        (Primitive::Gather, Link::OnChip) => p * (n_f - 1.0),
        (Primitive::Reduce, Link::OffChip) => 2.0 * p,
        (Primitive::Gather, Link::OffChip) => p * (n_f + 1.0),
    }
}

/// Estimated collective latency in microseconds. Zero for a single block.
pub fn estimate_collective_latency(
    primitive: Primitive,
    payload_bytes: u64,
    n: usize,
    link: Link,
    params: &CostParams,
) -> f64 {
    let cost = params.primitive(primitive).link(link);
    rounds(link, n, params.off_chip_rounds) as f64 * cost.alpha_us
        + per_block_bytes(primitive, payload_bytes, n, link) * cost.us_per_byte
}

/// Sum of the estimated latencies of every collective in a breakdown.
pub fn dataflow_latency(breakdown: &TrafficBreakdown, link: Link, params: &CostParams) -> f64 {
    breakdown
        .entries
        .iter()
        .map(|e| estimate_collective_latency(e.primitive, e.payload_bytes, breakdown.n_blocks, link, params))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyPoint {
    pub primitive: Primitive,
    pub size_kb: f64,
    pub link: Link,
    pub latency_us: f64,
}

impl LatencyPoint {
    pub fn payload_bytes(&self) -> u64 {
        (self.size_kb * 1024.0).round() as u64
    }
}

#[derive(Deserialize)]
struct FixtureRow {
    operation: String,
    size_kb: f64,
    channel: String,
    latency_us: f64,
}

fn parse_primitive(s: &str) -> std::result::Result<Primitive, String> {
    match s.trim() {
        "cluster_reduce" | "reduce" | "allreduce" => Ok(Primitive::Reduce),
        "cluster_gather" | "gather" | "allgather" => Ok(Primitive::Gather),
        other => Err(format!("unknown operation `{other}`")),
    }
}

/// Parses `operation,size_kb,channel,latency_us` rows. Lines starting with `#` are comments.
pub fn parse_fixture(text: &str) -> Result<Vec<LatencyPoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| SimError::FixtureParse {
        line: e.position().map_or(1, |p| p.line()),
        message: e.to_string(),
    })?
    .clone();
    if headers.is_empty() {
        return Err(SimError::FixtureParse {
            line: 1,
            message: "empty fixture: expected header `operation,size_kb,channel,latency_us`".into(),
        });
    }
    let mut points = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| SimError::FixtureParse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let fail = |message: String| SimError::FixtureParse { line, message };
        let row: FixtureRow = rec.deserialize(Some(&headers)).map_err(|e| fail(e.to_string()))?;
        let primitive = parse_primitive(&row.operation).map_err(fail)?;
        let link = row.channel.parse::<Link>().map_err(fail)?;
        if !(row.size_kb > 0.0 && row.latency_us > 0.0) {
            return Err(fail("size_kb and latency_us must be positive".into()));
        }
        points.push(LatencyPoint {
            primitive,
            size_kb: row.size_kb,
            link,
            latency_us: row.latency_us,
        });
    }
    if points.is_empty() {
        return Err(SimError::FixtureParse {
            line: 1,
            message: "fixture contains no data rows".into(),
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub point: LatencyPoint,
    pub predicted_us: f64,
    /// `(predicted - observed) / observed`.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: CostParams,
    pub cluster_size: usize,
    pub residuals: Vec<Residual>,
}

impl Calibration {
    pub fn max_relative_residual(&self) -> f64 {
        self.residuals.iter().map(|r| r.relative.abs()).fold(0.0, f64::max)
    }
}

/// Ordinary least squares `y = c + g x`, constrained to `c, g >= 0`.
fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    if slope < 0.0 {
        (my.max(0.0), 0.0)
    } else if intercept < 0.0 {
        let sxx0: f64 = xs.iter().map(|x| x * x).sum();
        let sxy0: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
        (0.0, sxy0 / sxx0)
    } else {
        (intercept, slope)
    }
}

/// Fits the affine model separately for each (primitive, link) from points
/// measured at cluster size `n`.
pub fn calibrate_cost_params(points: &[LatencyPoint], n: usize, off_chip_rounds: u32) -> Result<Calibration> {
    validate_cluster_size(n)?;
    if n < 2 {
        return Err(SimError::DegenerateFixture("calibration needs a cluster of at least 2 blocks".into()));
    }
    if off_chip_rounds == 0 {
        return Err(SimError::DegenerateFixture("off-chip rounds must be positive".into()));
    }
    let fit = |primitive: Primitive, link: Link| -> Result<AffineCost> {
        let pts: Vec<&LatencyPoint> = points
            .iter()
            .filter(|p| p.primitive == primitive && p.link == link)
            .collect();
        let mut sizes: Vec<f64> = pts.iter().map(|p| p.size_kb).collect();
        sizes.sort_by(f64::total_cmp);
        sizes.dedup();
        if sizes.len() < 2 {
            return Err(SimError::DegenerateFixture(format!(
                "{} {link} needs at least 2 distinct sizes, found {}",
                primitive.name(),
                sizes.len()
            )));
        }
        let xs: Vec<f64> = pts
            .iter()
            .map(|p| per_block_bytes(primitive, p.payload_bytes(), n, link))
            .collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.latency_us).collect();
        let (intercept, slope) = fit_line(&xs, &ys);
        Ok(AffineCost {
            alpha_us: intercept / rounds(link, n, off_chip_rounds) as f64,
            us_per_byte: slope,
        })
    };
    let params = CostParams {
        reduce: PrimitiveCost {
            on_chip: fit(Primitive::Reduce, Link::OnChip)?,
            off_chip: fit(Primitive::Reduce, Link::OffChip)?,
        },
        gather: PrimitiveCost {
            on_chip: fit(Primitive::Gather, Link::OnChip)?,
            off_chip: fit(Primitive::Gather, Link::OffChip)?,
        },
        off_chip_rounds,
    };
    let residuals = points
        .iter()
        .map(|p| {
            let predicted_us = estimate_collective_latency(p.primitive, p.payload_bytes(), n, p.link, &params);
            Residual {
                point: *p,
                predicted_us,
                relative: (predicted_us - p.latency_us) / p.latency_us,
            }
        })
        .collect();
    Ok(Calibration {
        params,
        cluster_size: n,
        residuals,
    })
}

/// Raw hardware parameters from DSMEM profiling, as an alternative to a fitted
/// model. Only the two quoted bandwidth points are known; bandwidth between
/// them is interpolated linearly in `log2(N)` and held constant outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Assumed SM clock used to convert cycles to microseconds.
    pub clock_ghz: f64,
    pub dsmem_latency_cycles: f64,
    pub global_round_trip_cycles: f64,
    pub dsmem_bandwidth_tbps_at_2: f64,
    pub dsmem_bandwidth_tbps_at_16: f64,
    pub global_bandwidth_tbps: f64,
}

impl Default for HardwareProfile {
    fn default() -> Self {
        Self {
            clock_ghz: 1.6,
            dsmem_latency_cycles: 190.0,
            global_round_trip_cycles: 900.0,
            dsmem_bandwidth_tbps_at_2: 3.7,
            dsmem_bandwidth_tbps_at_16: 2.90,
            global_bandwidth_tbps: 2.96,
        }
    }
}

impl HardwareProfile {
    pub fn dsmem_bandwidth_tbps(&self, n: usize) -> f64 {
        let t = ((n.max(2) as f64).log2() - 1.0) / 3.0;
        let t = t.clamp(0.0, 1.0);
        self.dsmem_bandwidth_tbps_at_2 + t * (self.dsmem_bandwidth_tbps_at_16 - self.dsmem_bandwidth_tbps_at_2)
    }

    /// Cost parameters for cluster size `n`. 1 TB/s is 1e6 bytes per microsecond.
    pub fn cost_params(&self, n: usize) -> CostParams {
        let cycles_to_us = |c: f64| c / (self.clock_ghz * 1e3);
        let on_chip = AffineCost {
            alpha_us: cycles_to_us(self.dsmem_latency_cycles),
            us_per_byte: 1.0 / (self.dsmem_bandwidth_tbps(n) * 1e6),
        };
        let off_chip = AffineCost {
            alpha_us: cycles_to_us(self.global_round_trip_cycles),
            us_per_byte: 1.0 / (self.global_bandwidth_tbps * 1e6),
        };
        let both = PrimitiveCost { on_chip, off_chip };
        CostParams {
            reduce: both,
            gather: both,
            off_chip_rounds: 2,
        }
    }
}
