//! Text reports: bit accounting, per-channel analysis CSV, format tables.

use std::fmt::Write as _;

use serde::Serialize;

use crate::calib::{CalibStats, ChannelPlan, Proportions};
use crate::error::{Error, Result};
use crate::mx::{ElementCode, MxFormat, BLOCK_SIZE};
use crate::tensor::DenseTensor;

/// Storage cost of a `K x out_features` weight quantized with a plan.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BitsReport {
    pub layer_id: String,
    pub avg_bits: f64,
    /// Element bits plus one scale byte per 32 elements.
    pub memory_bytes: u64,
    pub proportions: Proportions,
}

pub fn avg_bits(plan: &ChannelPlan) -> f64 {
    plan.avg_bits()
}

pub fn bits_report(plan: &ChannelPlan, out_features: usize) -> BitsReport {
    let n = out_features as u64;
    let element_bits = (4 * plan.n4 + 6 * plan.n6 + 8 * plan.n8) as u64 * n;
    let scale_bytes = (plan.padded_channels() / BLOCK_SIZE) as u64 * n;
    BitsReport {
        layer_id: plan.layer_id.clone(),
        avg_bits: plan.avg_bits(),
        memory_bytes: element_bits.div_ceil(8) + scale_bytes,
        proportions: plan.proportions(),
    }
}

/// Header of [`analyze_csv`]. Changing it is a format break.
pub const ANALYZE_COLUMNS: &str =
    "channel,position,group,abs_mean,abs_max,t4,t6,int8_ceiling,violation";

/// One row per real channel, in channel order: its statistics on `x`, the
/// group the plan puts it in, the plan's thresholds, and whether its maximum
/// exceeds its group's threshold.
pub fn analyze_csv(x: &DenseTensor<f32>, plan: &ChannelPlan) -> Result<String> {
    if x.cols() != plan.num_channels {
        return Err(Error::shape(format!(
            "tensor has {} channels, plan {} has {}",
            x.cols(),
            plan.layer_id,
            plan.num_channels
        )));
    }
    let mut stats = CalibStats::<f64>::new(plan.layer_id.clone(), x.cols());
    stats.accumulate(x)?;
    let mean = stats.channel_abs_mean();
    let max = stats.channel_abs_max();
    let pos = plan.inverse_permutation();
    let t = &plan.thresholds;

    let mut out = String::new();
    writeln!(out, "{ANALYZE_COLUMNS}").unwrap();
    for c in 0..plan.num_channels {
        let group = plan.group_of_position(pos[c]);
        let violation = t.limit(group).is_some_and(|l| max[c] > l);
        writeln!(
            out,
            "{c},{},{},{},{},{},{},{},{}",
            pos[c],
            group.label(),
            mean[c],
            max[c],
            t.t4,
            t.t6,
            t.int8_ceiling,
            violation as u8
        )
        .unwrap();
    }
    Ok(out)
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "Inf" } else { "-Inf" }.into()
    } else {
        format!("{v}")
    }
}

/// Format parameters followed by every code of every format.
pub fn formats_table() -> String {
    let mut out = String::new();
    writeln!(out, "format  bits  exp  mant  bias  max_normal  block  scale").unwrap();
    for f in MxFormat::ALL {
        let q = f.q_max();
        let q = if *q.denom() == 1 { q.numer().to_string() } else { format!("{}/{}", q.numer(), q.denom()) };
        writeln!(
            out,
            "{:<6}  {:>4}  {:>3}  {:>4}  {:>4}  {:>10}  {:>5}  E8M0 ({} bits)",
            f.to_string(),
            f.element_bits(),
            f.exponent_bits(),
            f.mantissa_bits(),
            f.bias(),
            q,
            f.block_size(),
            f.scale_bits()
        )
        .unwrap();
    }
    for f in MxFormat::ALL {
        writeln!(out).unwrap();
        let positive: Vec<String> = f.code_points().iter().map(|(_, v)| fmt_value(*v)).collect();
        writeln!(out, "{f} positive values: {}", positive.join(" ")).unwrap();
        writeln!(out, "{f} codes:").unwrap();
        for c in 0..f.code_count() {
            writeln!(out, "  {c:#04x}  {}", fmt_value(f.value(ElementCode(c as u8)))).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error_model::{thresholds, Precision};

    #[test]
    fn bits_examples() {
        let t = thresholds(1.0).unwrap();
        let plan = ChannelPlan::from_parts("l", 96, (0..96).collect(), [32, 32, 32], t).unwrap();
        let r = bits_report(&plan, 10);
        assert_eq!(r.avg_bits, 6.25);
        // (4 + 6 + 8) * 32 * 10 bits + 3 scales * 10
        assert_eq!(r.memory_bytes, 720 + 30);
        assert_eq!(avg_bits(&ChannelPlan::uniform("l", 32, Precision::Fp4)), 4.25);
    }

    #[test]
    fn formats_table_lists_fp4_values() {
        let s = formats_table();
        assert!(s.contains("E2M1 positive values: 0 0.5 1 1.5 2 3 4 6\n"));
        assert!(s.contains("E2M3       6    2     3     1        15/2"));
        assert!(s.contains("E5M2 positive values:"));
        assert!(s.contains("57344"));
        assert_eq!(s.matches("  0x").count(), 16 + 64 + 64 + 256 + 256);
    }
}
