use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use clustersim::analysis::{
    calibrate_cost_params, parse_fixture, swapped_split_token_traffic, sweep_cluster_sizes, Calibration, CostParams,
    DEFAULT_TOTAL_SMS, FIXTURE_CLUSTER_SIZE,
};
use clustersim::presets::{DimOverrides, ModelPreset};
use clustersim::report::{traffic_row, verify_scenario, ReportRow, ScenarioSpec};
use clustersim::{DataflowKind, DecodeScenario, Precision, SimError, StatsReduction, MAX_CLUSTER_SIZE};

const SCHEMA_VERSION: &str = "1";

#[derive(Parser)]
#[command(name = "clustersim", version, about = "Cluster dataflow simulator: verification, traffic and latency reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run dataflows against the dense oracle and reconcile traffic.
    Verify(CommonArgs),
    /// Analytical and measured DSMEM traffic over a grid.
    Traffic {
        #[command(flatten)]
        common: CommonArgs,
        /// Which table to emit.
        #[arg(long, value_enum, default_value_t = TrafficTable::Rows)]
        table: TrafficTable,
    },
    /// Run one dataflow and report per-stage ledger totals.
    Simulate(CommonArgs),
    /// Fit the latency model to a microbenchmark fixture.
    Calibrate {
        #[arg(long, default_value = "fixtures/table1.csv")]
        fixture: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Cluster size the fixture was measured at.
        #[arg(long = "N", default_value_t = FIXTURE_CLUSTER_SIZE, value_parser = parse_cluster_size)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        off_chip_rounds: u32,
        /// Overwrite an existing output file.
        #[arg(long)]
        force: bool,
    },
    /// Traffic and estimated latency across cluster sizes.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = DEFAULT_TOTAL_SMS)]
        total_sms: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrafficTable {
    Rows,
    Crossover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML scenario file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelPreset>,
    /// Comma-separated dataflows (split_token, fused_mla, split_head).
    #[arg(long, value_delimiter = ',', value_parser = parse_dataflow)]
    dataflow: Vec<DataflowKind>,
    /// Comma-separated cluster sizes (powers of two up to 16).
    #[arg(long = "N", value_delimiter = ',', value_parser = parse_cluster_size)]
    n: Vec<usize>,
    /// Comma-separated cached sequence lengths.
    #[arg(long = "S", value_delimiter = ',')]
    s: Vec<usize>,
    #[arg(long = "B")]
    b: Option<usize>,
    #[arg(long, value_parser = parse_dtype)]
    dtype: Option<Precision>,
    #[arg(long)]
    seed: Option<u64>,
    /// Softmax statistics reduction: two_pass or merged.
    #[arg(long, value_parser = parse_stats)]
    stats: Option<StatsReduction>,
    /// Calibrated parameter file from `calibrate`; defaults to the bundled fit.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

/// Scenario file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelPreset>,
    dataflow: Option<OneOrMany<DataflowKind>>,
    #[serde(rename = "N")]
    n: Option<OneOrMany<usize>>,
    #[serde(rename = "S")]
    s: Option<OneOrMany<usize>>,
    #[serde(rename = "B")]
    b: Option<usize>,
    dtype: Option<String>,
    seed: Option<u64>,
    stats: Option<StatsReduction>,
    format: Option<Format>,
    out: Option<PathBuf>,
    params: Option<PathBuf>,
    dims: DimOverrides,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(v) => v,
        }
    }
}

struct Resolved {
    model: ModelPreset,
    overrides: DimOverrides,
    dataflows: Vec<DataflowKind>,
    ns: Vec<usize>,
    ss: Vec<usize>,
    b: usize,
    dtype: Precision,
    seed: u64,
    stats: StatsReduction,
    params: CostParams,
    out: Option<PathBuf>,
    format: Format,
}

impl Resolved {
    fn specs(&self) -> Vec<ScenarioSpec> {
        let mut specs = Vec::new();
        for &dataflow in &self.dataflows {
            for &n in &self.ns {
                for &seq_len in &self.ss {
                    specs.push(ScenarioSpec {
                        model: self.model,
                        overrides: self.overrides,
                        dataflow,
                        n,
                        seq_len,
                        batch: self.b,
                        precision: self.dtype,
                        seed: self.seed,
                        stats: self.stats,
                    });
                }
            }
        }
        specs
    }
}

fn parse_cluster_size(s: &str) -> Result<usize, String> {
    let n: usize = s.trim().parse().map_err(|_| format!("`{s}` is not an integer"))?;
    if n == 0 || !n.is_power_of_two() || n > MAX_CLUSTER_SIZE {
        return Err(format!(
            "cluster size must be a power of two between 1 and {MAX_CLUSTER_SIZE}, got {n}"
        ));
    }
    Ok(n)
}

fn parse_model(s: &str) -> Result<ModelPreset, String> {
    s.parse()
}

fn parse_dataflow(s: &str) -> Result<DataflowKind, String> {
    s.trim().parse().map_err(|e| format!("{e}"))
}

fn parse_dtype(s: &str) -> Result<Precision, String> {
    s.parse()
}

fn parse_stats(s: &str) -> Result<StatsReduction, String> {
    match s {
        "two_pass" => Ok(StatsReduction::TwoPass),
        "merged" => Ok(StatsReduction::Merged),
        other => Err(format!("unknown statistics reduction `{other}` (expected two_pass or merged)")),
    }
}

fn default_dataflows(model: ModelPreset, overrides: &DimOverrides) -> Vec<DataflowKind> {
    if model.dims(1, 0, overrides).kv_lora_rank.is_some() {
        vec![DataflowKind::FusedMla]
    } else {
        vec![DataflowKind::SplitToken, DataflowKind::SplitHead]
    }
}

fn load_params(path: &Path) -> Result<CostParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    #[derive(Deserialize)]
    struct Saved {
        params: CostParams,
    }
    let saved: Saved = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(saved.params)
}

fn resolve(args: &CommonArgs, default_n: &[usize], default_s: &[usize]) -> Result<Resolved> {
    let cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<ConfigFile>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ConfigFile::default(),
    };
    let model = args.model.or(cfg.model).unwrap_or(ModelPreset::Llama2_7b);
    let overrides = cfg.dims;
    let dataflows = if !args.dataflow.is_empty() {
        args.dataflow.clone()
    } else if let Some(d) = cfg.dataflow {
        d.into_vec()
    } else {
        default_dataflows(model, &overrides)
    };
    let ns = if !args.n.is_empty() {
        args.n.clone()
    } else if let Some(n) = cfg.n {
        let v = n.into_vec();
        for &n in &v {
            parse_cluster_size(&n.to_string()).map_err(anyhow::Error::msg)?;
        }
        v
    } else {
        default_n.to_vec()
    };
    let ss = if !args.s.is_empty() {
        args.s.clone()
    } else {
        cfg.s.map(OneOrMany::into_vec).unwrap_or_else(|| default_s.to_vec())
    };
    let dtype = match (args.dtype, cfg.dtype) {
        (Some(d), _) => d,
        (None, Some(s)) => s.parse().map_err(anyhow::Error::msg)?,
        (None, None) => Precision::F32,
    };
    let params = match args.params.as_ref().or(cfg.params.as_ref()) {
        Some(p) => load_params(p)?,
        None => CostParams::calibrated(),
    };
    Ok(Resolved {
        model,
        overrides,
        dataflows,
        ns,
        ss,
        b: args.b.or(cfg.b).unwrap_or(1),
        dtype,
        seed: args.seed.or(cfg.seed).unwrap_or(0),
        stats: args.stats.or(cfg.stats).unwrap_or_default(),
        params,
        out: args.out.clone().or(cfg.out),
        format: args.format.or(cfg.format).unwrap_or(Format::Csv),
    })
}

#[derive(Serialize)]
struct JsonDoc<'a, R: Serialize> {
    schema_version: &'static str,
    command: &'a str,
    rows: &'a [R],
}

fn render<R: Serialize>(command: &str, rows: &[R], format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new()
                .quote_style(csv::QuoteStyle::Necessary)
                .from_writer(Vec::new());
            for r in rows {
                w.serialize(r)?;
            }
            Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
        }
        Format::Json => {
            let doc = JsonDoc {
                schema_version: SCHEMA_VERSION,
                command,
                rows,
            };
            let mut v = serde_json::to_vec_pretty(&doc)?;
            v.push(b'\n');
            Ok(v)
        }
    }
}

fn emit(bytes: &[u8], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => {
            io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct FailureRecord<'a> {
    schema_version: &'static str,
    status: &'static str,
    scenario_id: &'a str,
    reason: String,
}

fn cmd_verify(args: &CommonArgs) -> Result<ExitCode> {
    let r = resolve(args, &[4], &[64])?;
    let mut rows = Vec::new();
    for spec in r.specs() {
        rows.push(verify_scenario(&spec, &r.params)?.row);
    }
    emit(&render("verify", &rows, r.format)?, r.out.as_deref())?;
    let mut ok = true;
    for row in rows.iter().filter(|row| !row.pass) {
        ok = false;
        let reason = if row.dsmem_bytes_measured != row.dsmem_bytes_analytical {
            format!(
                "traffic mismatch: measured {} analytical {}",
                row.dsmem_bytes_measured, row.dsmem_bytes_analytical
            )
        } else {
            format!("oracle error {:?} exceeds tolerance", row.max_abs_error_vs_oracle)
        };
        let rec = FailureRecord {
            schema_version: SCHEMA_VERSION,
            status: "fail",
            scenario_id: &row.scenario_id,
            reason,
        };
        eprintln!("{}", serde_json::to_string(&rec)?);
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

#[derive(Serialize)]
struct CrossoverRow {
    model: String,
    n: usize,
    s: usize,
    b: usize,
    dtype: String,
    split_token_bytes: u64,
    split_head_bytes: u64,
    /// Split-token total with the reduce and gather payloads interchanged; does not reconcile with the ledger.
    split_token_swapped_form_bytes: u64,
    lower_traffic: &'static str,
}

fn cmd_traffic(args: &CommonArgs, table: TrafficTable) -> Result<ExitCode> {
    let r = resolve(args, &[1, 2, 4, 8, 16], &[128, 256, 512, 1024, 2048, 4096, 8192, 16384])?;
    match table {
        TrafficTable::Rows => {
            let mut rows: Vec<ReportRow> = Vec::new();
            for spec in r.specs() {
                rows.push(traffic_row(&spec, &r.params)?.0);
            }
            emit(&render("traffic", &rows, r.format)?, r.out.as_deref())?;
            Ok(if rows.iter().all(|row| row.pass) { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        TrafficTable::Crossover => {
            let mut rows = Vec::new();
            for &n in &r.ns {
                for &s in &r.ss {
                    let spec = |dataflow| ScenarioSpec {
                        model: r.model,
                        overrides: r.overrides,
                        dataflow,
                        n,
                        seq_len: s,
                        batch: r.b,
                        precision: r.dtype,
                        seed: r.seed,
                        stats: r.stats,
                    };
                    let st = traffic_row(&spec(DataflowKind::SplitToken), &r.params)?.0;
                    let sh = traffic_row(&spec(DataflowKind::SplitHead), &r.params)?.0;
                    let dims = spec(DataflowKind::SplitToken).dims();
                    rows.push(CrossoverRow {
                        model: r.model.name().to_string(),
                        n,
                        s,
                        b: r.b,
                        dtype: r.dtype.name().to_string(),
                        split_token_bytes: st.dsmem_bytes_headline,
                        split_head_bytes: sh.dsmem_bytes_headline,
                        split_token_swapped_form_bytes: swapped_split_token_traffic(&dims, n, r.dtype)?,
                        lower_traffic: if st.dsmem_bytes_headline <= sh.dsmem_bytes_headline {
                            "split_token"
                        } else {
                            "split_head"
                        },
                    });
                }
            }
            emit(&render("traffic", &rows, r.format)?, r.out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[derive(Serialize)]
struct StageRow {
    scenario_id: String,
    stage: String,
    clusters: usize,
    bytes_per_cluster: u64,
    bytes_total: u64,
    rounds: usize,
    atomic_adds: u64,
}

fn cmd_simulate(args: &CommonArgs) -> Result<ExitCode> {
    let r = resolve(args, &[4], &[64])?;
    let mut rows = Vec::new();
    for spec in r.specs() {
        spec.validate()?;
        let dims = spec.dims();
        let result = if spec.dataflow.is_mla() {
            let sc = DecodeScenario::<f32>::random_mla(dims, spec.cluster(), spec.seed)?;
            clustersim::run_decode(spec.dataflow, &sc)?
        } else {
            let sc = DecodeScenario::<f32>::random_mha(dims, spec.cluster(), spec.seed)?;
            clustersim::run_decode(spec.dataflow, &sc)?
        };
        let per_cluster = result.ledger.stage_totals_for_cluster(0);
        let rounds = |stage: &str| {
            let ev = result.ledger.events().iter().find(|e| e.cluster == 0 && e.stage == stage);
            ev.map_or(0, |e| result.ledger.rounds_of(0, e.invocation))
        };
        for (stage, total) in &result.stage_traffic {
            rows.push(StageRow {
                scenario_id: spec.id(),
                stage: stage.clone(),
                clusters: dims.n_heads,
                bytes_per_cluster: per_cluster.get(stage).copied().unwrap_or(0),
                bytes_total: *total,
                rounds: rounds(stage),
                atomic_adds: result.atomic_adds,
            });
        }
    }
    emit(&render("simulate", &rows, r.format)?, r.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct CalibrationDoc<'a> {
    schema_version: &'static str,
    source: String,
    #[serde(flatten)]
    calibration: &'a Calibration,
    max_relative_residual: f64,
}

#[derive(Serialize)]
struct ResidualRow {
    operation: &'static str,
    size_kb: f64,
    channel: &'static str,
    latency_us: f64,
    predicted_us: f64,
    relative_residual: f64,
}

fn cmd_calibrate(fixture: &Path, out: &Path, format: Format, n: usize, off_chip_rounds: u32, force: bool) -> Result<ExitCode> {
    if out.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", out.display());
    }
    let text = fs::read_to_string(fixture).with_context(|| format!("reading {}", fixture.display()))?;
    let points = parse_fixture(&text).with_context(|| format!("parsing {}", fixture.display()))?;
    let cal = calibrate_cost_params(&points, n, off_chip_rounds)?;
    let bytes = match format {
        Format::Json => {
            let doc = CalibrationDoc {
                schema_version: SCHEMA_VERSION,
                source: fixture.display().to_string(),
                calibration: &cal,
                max_relative_residual: cal.max_relative_residual(),
            };
            let mut v = serde_json::to_vec_pretty(&doc)?;
            v.push(b'\n');
            v
        }
        Format::Csv => {
            let rows: Vec<ResidualRow> = cal
                .residuals
                .iter()
                .map(|r| ResidualRow {
                    operation: r.point.primitive.name(),
                    size_kb: r.point.size_kb,
                    channel: r.point.link.name(),
                    latency_us: r.point.latency_us,
                    predicted_us: r.predicted_us,
                    relative_residual: r.relative,
                })
                .collect();
            render("calibrate", &rows, Format::Csv)?
        }
    };
    emit(&bytes, Some(out))?;
    eprintln!(
        "fitted {} points; max relative residual {:.2}%",
        cal.residuals.len(),
        100.0 * cal.max_relative_residual()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SweepReportRow {
    model: String,
    dataflow: String,
    s: usize,
    b: usize,
    dtype: String,
    n: usize,
    traffic_measured: u64,
    traffic_analytical: u64,
    est_latency_on_chip_us: f64,
    est_latency_off_chip_us: f64,
    active_block_slots: usize,
    best: bool,
}

fn cmd_sweep(args: &CommonArgs, total_sms: usize) -> Result<ExitCode> {
    let r = resolve(args, &[2, 4, 8, 16], &[4096])?;
    let mut rows = Vec::new();
    for &dataflow in &r.dataflows {
        for &s in &r.ss {
            let dims = r.model.dims(r.b, s, &r.overrides);
            for row in sweep_cluster_sizes(dataflow, &dims, &r.ns, r.dtype, &r.params, total_sms)? {
                rows.push(SweepReportRow {
                    model: r.model.name().to_string(),
                    dataflow: dataflow.name().to_string(),
                    s,
                    b: r.b,
                    dtype: r.dtype.name().to_string(),
                    n: row.n,
                    traffic_measured: row.traffic_measured,
                    traffic_analytical: row.traffic_analytical,
                    est_latency_on_chip_us: row.latency_on_chip_us,
                    est_latency_off_chip_us: row.latency_off_chip_us,
                    active_block_slots: row.active_block_slots,
                    best: row.best,
                });
            }
        }
    }
    emit(&render("sweep", &rows, r.format)?, r.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Verify(args) => cmd_verify(&args),
        Command::Traffic { common, table } => cmd_traffic(&common, table),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Calibrate {
            fixture,
            out,
            format,
            n,
            off_chip_rounds,
            force,
        } => cmd_calibrate(&fixture, &out, format, n, off_chip_rounds, force),
        Command::Sweep { common, total_sms } => cmd_sweep(&common, total_sms),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<SimError>(),
                    Some(SimError::InvalidClusterSize(_) | SimError::InvalidDims(_))
                )
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
