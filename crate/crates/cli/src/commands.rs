use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use harmonia_core::dataflow::{choose_policy, ema_report, GemmShape, Policy, DEFAULT_PJ_PER_BIT};
use harmonia_core::grouping::{group_tensor, GroupAxis};
use harmonia_core::numerics::{quantization_error, EXPONENT_BITS};
use harmonia_core::pipeline::{
    ablation, calibrate_on, run, run_sweep, run_with_scale, AblationToggles, ModelConfig,
};
use harmonia_core::smoothing::ScaleVector;
use harmonia_core::BfpConfig;
use serde_json::{json, Value};

use crate::bfp_file;
use crate::error::{CliError, Result};
use crate::report::{build_report, validate_report};
use crate::tensor_file::TensorFile;

pub const SEED_ENV: &str = "HARMONIA_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "harmonia",
    version,
    about = "BFP conversion, traffic model and attention simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an HRMT tensor to an HBFP file.
    Convert(ConvertArgs),
    /// Expand an HBFP file back to an f64 HRMT tensor.
    Dequantize(DequantizeArgs),
    /// External-memory traffic of a tiled GEMM.
    Ema(EmaArgs),
    /// Run the toy attention block and write a JSON report.
    AttnSim(AttnSimArgs),
    /// Learn the smoothing scale on sample inputs.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Token,
    Channel,
}

impl From<AxisArg> for GroupAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Token => GroupAxis::PerToken,
            AxisArg::Channel => GroupAxis::PerChannel,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub group_size: usize,
    #[arg(long, default_value_t = 8)]
    pub mantissa_bits: u32,
    #[arg(long, value_enum, default_value = "token")]
    pub axis: AxisArg,
    /// Also write the dequantized values as an f64 tensor.
    #[arg(long)]
    pub dequantize: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DequantizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Auto,
    Col,
    Row,
}

#[derive(Debug, Args)]
pub struct EmaArgs {
    #[arg(long = "M", alias = "m")]
    pub m: u64,
    #[arg(long = "K", alias = "k")]
    pub k: u64,
    #[arg(long = "N", alias = "n")]
    pub n: u64,
    #[arg(long)]
    pub tile_m: u64,
    #[arg(long)]
    pub tile_n: u64,
    #[arg(long, default_value_t = 16.0)]
    pub bits_a: f64,
    #[arg(long, default_value_t = 16.0)]
    pub bits_b: f64,
    #[arg(long, value_enum, default_value = "auto")]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = DEFAULT_PJ_PER_BIT)]
    pub pj_per_bit: f64,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttnSimArgs {
    /// Model config JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    /// Use the scale from a `calibrate` sidecar instead of calibrating.
    #[arg(long)]
    pub scales: Option<PathBuf>,
    /// Write a group-size by mantissa-width error table as CSV.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 64, 128])]
    pub group_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u32, 2, 3, 4, 5, 6, 7, 8, 9, 10])]
    pub mantissa_bits: Vec<u32>,
    /// Write paired all-on / all-off reports instead of a single report.
    #[arg(long)]
    pub ablation: bool,
    /// Seeds for the ablation pairs; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// HRMT tensor, `rows x hidden` or `samples x rows x hidden`.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(v).map_err(|e| CliError::Invariant(e.to_string()))?;
    text.push('\n');
    write(path, text.as_bytes())
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        let msg = format!("{}: {e}", path.display());
        if e.is_data() {
            CliError::Config(msg)
        } else {
            CliError::Format(msg)
        }
    })
}

/// Reads the config (or defaults) and applies the seed override.
pub fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    let mut cfg: ModelConfig = match path {
        Some(p) => parse_json(p)?,
        None => ModelConfig::default(),
    };
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={seed:?} is not an integer")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_cli(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Convert(a) => convert(&a, out),
        Command::Dequantize(a) => dequantize(&a, out),
        Command::Ema(a) => ema(&a, out),
        Command::AttnSim(a) => attn_sim(&a, out),
        Command::Calibrate(a) => calibrate(&a, out),
    }
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub fn convert(a: &ConvertArgs, out: &mut dyn Write) -> Result<()> {
    let x = TensorFile::from_bytes(&read(&a.input)?)?.to_matrix()?;
    let cfg = BfpConfig::new(a.group_size, a.mantissa_bits)?;
    let axis = GroupAxis::from(a.axis);
    let t = group_tensor(&x, axis, &cfg)?;
    write(&a.output, &bfp_file::to_bytes(&t))?;
    if let Some(p) = &a.dequantize {
        write(p, &TensorFile::from_matrix_f64(&t.dequantize()).to_bytes())?;
    }
    let metrics = quantization_error(&x, &cfg, axis)?;
    let groups = t.groups().len() + t.residual().len();
    let elements = x.rows() * x.cols();
    let bits =
        elements as f64 * f64::from(1 + a.mantissa_bits) + (groups as u32 * EXPONENT_BITS) as f64;
    say(out, format_args!("groups: {groups}"))?;
    say(
        out,
        format_args!("bits_per_element: {:.6}", bits / elements.max(1) as f64),
    )?;
    say(out, format_args!("mse: {:e}", metrics.mse))?;
    say(out, format_args!("max_abs: {:e}", metrics.max_abs))?;
    say(out, format_args!("max_rel: {:e}", metrics.max_rel))
}

pub fn dequantize(a: &DequantizeArgs, out: &mut dyn Write) -> Result<()> {
    let t = bfp_file::from_bytes(&read(&a.input)?)?;
    let x = t.dequantize();
    write(&a.output, &TensorFile::from_matrix_f64(&x).to_bytes())?;
    say(out, format_args!("shape: {}x{}", x.rows(), x.cols()))
}

pub fn ema(a: &EmaArgs, out: &mut dyn Write) -> Result<()> {
    let shape = GemmShape::new(a.m, a.k, a.n, a.tile_m, a.tile_n)?.with_bits(a.bits_a, a.bits_b);
    shape.validate()?;
    let policy = match a.policy {
        PolicyArg::Auto => choose_policy(&shape)?.policy,
        PolicyArg::Col => Policy::ColumnFirst,
        PolicyArg::Row => Policy::RowFirst,
    };
    let r = ema_report(&shape, policy, a.pj_per_bit)?;
    say(
        out,
        format_args!("column_first: {}", r.column_first_elements),
    )?;
    say(out, format_args!("row_first: {}", r.row_first_elements))?;
    say(out, format_args!("policy: {}", r.policy.name()))?;
    say(out, format_args!("total_bits: {}", r.total_bits))?;
    say(out, format_args!("energy_pJ: {}", r.energy_pj))?;
    if let Some(p) = &a.json {
        write_json(
            p,
            &json!({
                "shape": shape,
                "policy": r.policy.name(),
                "elements_A": r.elements_a,
                "elements_B": r.elements_b,
                "column_first_elements": r.column_first_elements,
                "row_first_elements": r.row_first_elements,
                "total_bits": r.total_bits,
                "energy_pJ": r.energy_pj,
            }),
        )?;
    }
    Ok(())
}

fn checked_report(result: &harmonia_core::pipeline::RunResult) -> Result<Value> {
    let report = build_report(result);
    validate_report(&report)?;
    Ok(report)
}

pub fn attn_sim(a: &AttnSimArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let scale = match &a.scales {
        Some(p) => {
            let sidecar: Value = parse_json(p)?;
            let s: Vec<f64> = serde_json::from_value(sidecar["S"].clone())
                .map_err(|e| CliError::Format(format!("{}: S: {e}", p.display())))?;
            Some(ScaleVector::new(s)?)
        }
        None => None,
    };

    if a.ablation {
        let seeds = if a.seeds.is_empty() {
            vec![cfg.seed]
        } else {
            a.seeds.clone()
        };
        let mut pairs = Vec::new();
        for seed in seeds {
            let rep = ablation(
                &ModelConfig {
                    seed,
                    ..cfg.clone()
                },
                AblationToggles::ALL,
            )?;
            say(
                out,
                format_args!(
                    "seed {seed}: enabled {:.6} naive {:.6}",
                    rep.enabled.attention_error, rep.naive.attention_error
                ),
            )?;
            pairs.push(json!({
                "seed": seed,
                "attention_error_delta": rep.attention_error_delta,
                "enabled": {
                    "toggles": rep.enabled.toggles,
                    "seed": rep.enabled.seed,
                    "attention_error": rep.enabled.attention_error,
                    "report": checked_report(&rep.enabled.result)?,
                },
                "naive": {
                    "toggles": rep.naive.toggles,
                    "seed": rep.naive.seed,
                    "attention_error": rep.naive.attention_error,
                    "report": checked_report(&rep.naive.result)?,
                },
            }));
        }
        write_json(&a.report, &json!({ "pairs": pairs }))?;
    } else {
        let result = match scale {
            Some(s) => run_with_scale(&cfg, s)?,
            None => run(&cfg)?,
        };
        let report = checked_report(&result)?;
        say(out, format_args!("tokens: {}", report["tokens"]))?;
        say(
            out,
            format_args!("storage_bits: {}", report["storage_bits"]),
        )?;
        say(
            out,
            format_args!("attention_error: {:e}", result.attention_error()),
        )?;
        say(
            out,
            format_args!("max_output_error: {:e}", result.max_output_error()),
        )?;
        write_json(&a.report, &report)?;
    }

    if let Some(p) = &a.sweep {
        let rows = run_sweep(&cfg, &a.group_sizes, &a.mantissa_bits)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r)
                .map_err(|e| CliError::Invariant(e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CliError::Invariant(e.to_string()))?;
        write(p, &bytes)?;
        say(out, format_args!("sweep rows: {}", rows.len()))?;
    }
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let samples = TensorFile::from_bytes(&read(&a.samples)?)?.to_matrices()?;
    let c = calibrate_on(&cfg, &samples)?;
    say(
        out,
        format_args!(
            "objective: {:e} -> {:e}",
            c.result.initial_objective, c.result.objective
        ),
    )?;
    write_json(
        &a.out,
        &json!({
            "seed": cfg.seed,
            "config": cfg,
            "S": c.result.scale.as_slice(),
            "offsets": c.offsets.offsets(),
            "active_channels": c.offsets.active_channels(),
            "initial_objective": c.result.initial_objective,
            "objective": c.result.objective,
            "evaluations": c.result.evaluations,
            "history": c.result.history,
        }),
    )
}
