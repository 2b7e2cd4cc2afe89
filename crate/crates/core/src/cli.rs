//! Command-line surface: calibrate -> quantize -> gemm, plus analysis.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::calib::{build_plan_with_bits, plan_diagnostics, CalibStats};
use crate::error::{Error, Result};
use crate::error_model::DEFAULT_HIGH_PRECISION_BITS;
use crate::gemm::{mixed_gemm, quantize_linear, reorder_and_quantize, GroupFormats};
use crate::io::{self, PlanFile, QuantFile, QuantPayload};
use crate::mx::MxFormat;
use crate::report::{analyze_csv, bits_report, formats_table};

#[derive(Debug, Parser)]
#[command(name = "micromix", version, about = "MX mixed-precision quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print format parameters and every code point of every format.
    Formats,
    /// Build a channel plan from calibration activations (one tensor file
    /// per sample, rows x channels).
    Calibrate {
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
        /// Width of the integer format whose error ceiling sets the thresholds.
        #[arg(long, default_value_t = DEFAULT_HIGH_PRECISION_BITS)]
        hp_bits: u32,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Reorder and quantize an activation (rows x channels) or, with
    /// --weight, a weight (channels x out_features).
    Quantize {
        input: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value = "e3m2")]
        fmt6: MxFormat,
        #[arg(long, default_value = "e4m3")]
        fmt8: MxFormat,
        #[arg(long)]
        weight: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mixed-precision GEMM of a quantized activation and weight; writes the
    /// BF16 result widened to f32.
    Gemm {
        activation: PathBuf,
        weight: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-channel statistics, group and threshold violations as CSV.
    Analyze {
        input: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average bits and memory of a weight quantized with a plan.
    Bits {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out_features: usize,
    },
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Formats => emit(out, &formats_table()),
        Command::Calibrate {
            layer,
            out: path,
            hp_bits,
            inputs,
        } => {
            let mut stats: Option<CalibStats<f64>> = None;
            for input in &inputs {
                let sample = io::read_tensor(input)?;
                let s = stats.get_or_insert_with(|| CalibStats::new(layer.clone(), sample.cols()));
                s.accumulate(&sample)?;
            }
            let stats = stats.expect("at least one input");
            let plan = build_plan_with_bits(&stats, hp_bits)?;
            let diag = plan_diagnostics(&[(&plan, &stats)])?;
            io::write_plan(&path, &PlanFile::new(plan.clone(), &stats))?;
            emit(
                out,
                &format!(
                    "{}: n4={} n6={} n8={} avg_bits={} violations={}\n",
                    plan.layer_id,
                    plan.n4,
                    plan.n6,
                    plan.n8,
                    plan.avg_bits(),
                    diag[0].total_violations()
                ),
            )
        }
        Command::Quantize {
            input,
            plan,
            fmt6,
            fmt8,
            weight,
            out: path,
        } => {
            let formats = GroupFormats::new(fmt6, fmt8)?;
            let plan = io::read_plan(&plan)?.plan;
            let t = io::read_tensor(&input)?;
            let qf = if weight {
                QuantFile::weight(quantize_linear(&t, &plan, formats)?)
            } else {
                let a = reorder_and_quantize(&t, &plan, formats)?;
                QuantFile::activation(plan, a)
            };
            io::write_quant(&path, &qf)
        }
        Command::Gemm {
            activation,
            weight,
            out: path,
        } => {
            let a = io::read_quant(&activation)?;
            let w = io::read_quant(&weight)?;
            let (a_plan, a) = match a.payload {
                QuantPayload::Activation(x) => (a.plan, x),
                QuantPayload::Weight(_) => {
                    return Err(Error::PlanMismatch(format!(
                        "{} holds a weight, expected an activation",
                        activation.display()
                    )))
                }
            };
            let QuantPayload::Weight(lin) = w.payload else {
                return Err(Error::PlanMismatch(format!(
                    "{} holds an activation, expected a weight",
                    weight.display()
                )));
            };
            if a_plan.permutation != lin.plan().permutation {
                return Err(Error::PlanMismatch(
                    "activation and weight were reordered with different plans".into(),
                ));
            }
            let y = mixed_gemm(&a, &lin)?;
            io::write_tensor(&path, &y.to_tensor())
        }
        Command::Analyze {
            input,
            plan,
            out: path,
        } => {
            let plan = io::read_plan(&plan)?.plan;
            let csv = analyze_csv(&io::read_tensor(&input)?, &plan)?;
            match path {
                Some(p) => io::write_atomic(&p, csv.as_bytes()),
                None => emit(out, &csv),
            }
        }
        Command::Bits { plan, out_features } => {
            let plan = io::read_plan(&plan)?.plan;
            let report = bits_report(&plan, out_features);
            emit(out, &format!("{}\n", serde_json::to_string_pretty(&report)?))
        }
    }
}
