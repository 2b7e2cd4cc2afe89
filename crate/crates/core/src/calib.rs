//! Calibration statistics and per-layer channel plans.
//!
//! Channel maxima decide *how many* channels each precision gets (threshold
//! comparison); channel absolute means decide *which* channels (ascending
//! mean goes to lower precision). The two orderings can disagree, see
//! [`plan_diagnostics`].

use std::cmp::Ordering;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_model::{thresholds_with_bits, Precision, ThresholdSet, DEFAULT_HIGH_PRECISION_BITS};
use crate::mx::BLOCK_SIZE;
use crate::scalar::{Real, Scalar};
use crate::tensor::DenseTensor;

/// Running per-channel statistics of one linear layer's input.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibStats<T = f64> {
    layer_id: String,
    num_samples: usize,
    num_rows: usize,
    abs_sum: Vec<T>,
    channel_abs_max: Vec<T>,
    tensor_max: T,
}

impl<T: Real> CalibStats<T> {
    pub fn new(layer_id: impl Into<String>, num_channels: usize) -> Self {
        CalibStats {
            layer_id: layer_id.into(),
            num_samples: 0,
            num_rows: 0,
            abs_sum: vec![T::zero(); num_channels],
            channel_abs_max: vec![T::zero(); num_channels],
            tensor_max: T::zero(),
        }
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn num_channels(&self) -> usize {
        self.abs_sum.len()
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn tensor_max(&self) -> T {
        self.tensor_max
    }

    pub fn channel_abs_max(&self) -> &[T] {
        &self.channel_abs_max
    }

    /// `M`: mean of `|X|` over every row seen so far, per channel.
    pub fn channel_abs_mean(&self) -> Vec<T> {
        if self.num_rows == 0 {
            return vec![T::zero(); self.num_channels()];
        }
        let rows = <T as Scalar>::from_usize(self.num_rows);
        self.abs_sum.iter().map(|&s| s / rows).collect()
    }

    /// Fold one calibration sample (`rows x channels`) into the statistics.
    pub fn accumulate<S: Scalar>(&mut self, sample: &DenseTensor<S>) -> Result<()> {
        if sample.cols() != self.num_channels() {
            return Err(Error::shape(format!(
                "layer {}: sample has {} channels, expected {}",
                self.layer_id,
                sample.cols(),
                self.num_channels()
            )));
        }
        for r in 0..sample.rows() {
            for (c, v) in sample.row(r).iter().enumerate() {
                let a = T::from_f64(v.to_f64_lossy()).expect("finite sample").abs();
                self.abs_sum[c] = self.abs_sum[c] + a;
                if a > self.channel_abs_max[c] {
                    self.channel_abs_max[c] = a;
                }
            }
        }
        self.tensor_max = self
            .channel_abs_max
            .iter()
            .fold(self.tensor_max, |m, &v| m.max(v));
        self.num_rows += sample.rows();
        self.num_samples += 1;
        Ok(())
    }

    /// Combine statistics gathered independently for the same layer. Maxima
    /// merge exactly; means merge weighted by the rows behind them.
    pub fn merge(&mut self, other: &CalibStats<T>) -> Result<()> {
        if other.layer_id != self.layer_id || other.num_channels() != self.num_channels() {
            return Err(Error::PlanMismatch(format!(
                "cannot merge stats of {} ({} channels) into {} ({} channels)",
                other.layer_id,
                other.num_channels(),
                self.layer_id,
                self.num_channels()
            )));
        }
        for c in 0..self.num_channels() {
            self.abs_sum[c] = self.abs_sum[c] + other.abs_sum[c];
            self.channel_abs_max[c] = self.channel_abs_max[c].max(other.channel_abs_max[c]);
        }
        self.tensor_max = self.tensor_max.max(other.tensor_max);
        self.num_rows += other.num_rows;
        self.num_samples += other.num_samples;
        Ok(())
    }

    fn thresholds(&self, hp_bits: u32) -> Result<ThresholdSet<T>> {
        if self.num_samples == 0 {
            return Err(Error::domain(format!("layer {}: no calibration samples", self.layer_id)));
        }
        if self.tensor_max == T::zero() {
            return Err(Error::domain(format!(
                "layer {}: all calibration activations are zero",
                self.layer_id
            )));
        }
        thresholds_with_bits(self.tensor_max, hp_bits)
    }
}

/// Fractions of channels per precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub p4: f64,
    pub p6: f64,
    pub p8: f64,
}

impl Proportions {
    pub fn get(&self, p: Precision) -> f64 {
        match p {
            Precision::Fp4 => self.p4,
            Precision::Fp6 => self.p6,
            Precision::Fp8 => self.p8,
        }
    }
}

/// Classify every channel maximum against the layer's thresholds.
pub fn estimate_proportions<T: Real>(stats: &CalibStats<T>) -> Result<Proportions> {
    estimate_proportions_with_bits(stats, DEFAULT_HIGH_PRECISION_BITS)
}

/// [`estimate_proportions`] against a `hp_bits`-wide integer error ceiling.
pub fn estimate_proportions_with_bits<T: Real>(
    stats: &CalibStats<T>,
    hp_bits: u32,
) -> Result<Proportions> {
    let t = stats.thresholds(hp_bits)?;
    Ok(proportions_against(stats.channel_abs_max(), &t))
}

/// Fractions of `channel_maxima` falling under `t4`, in `(t4, t6]`, and above.
pub fn proportions_against<T: Scalar>(channel_maxima: &[T], t: &ThresholdSet<T>) -> Proportions {
    let mut counts = [0usize; 3];
    for &m in channel_maxima {
        counts[t.classify(m) as usize] += 1;
    }
    let n = channel_maxima.len().max(1) as f64;
    Proportions {
        p4: counts[0] as f64 / n,
        p6: counts[1] as f64 / n,
        p8: counts[2] as f64 / n,
    }
}

fn round_up_block(x: f64) -> usize {
    // tolerate representation error in p * I before taking the ceiling
    let blocks = ((x - 1e-9) / BLOCK_SIZE as f64).ceil().max(0.0);
    blocks as usize * BLOCK_SIZE
}

/// Group sizes `(n4, n6, n8)` for `channels` channels: each a multiple of
/// 32, FP8 rounded up first, then FP6, FP4 takes the remainder of the padded
/// channel count.
pub fn partition_counts(props: &Proportions, channels: usize) -> [usize; 3] {
    let padded = channels.div_ceil(BLOCK_SIZE) * BLOCK_SIZE;
    let n8 = round_up_block(props.p8 * channels as f64).min(padded);
    let n6 = round_up_block(props.p6 * channels as f64).min(padded - n8);
    [padded - n8 - n6, n6, n8]
}

/// Channel assignment of one linear layer.
///
/// `permutation[j]` is the source channel placed at position `j`; positions
/// are laid out as `[FP4 | FP6 | FP8]`. Indices at or above `num_channels`
/// denote zero padding channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub layer_id: String,
    pub num_channels: usize,
    pub permutation: Vec<usize>,
    pub n4: usize,
    pub n6: usize,
    pub n8: usize,
    pub p4: f64,
    pub p6: f64,
    pub p8: f64,
    #[serde(flatten)]
    pub thresholds: ThresholdSet<f64>,
}

impl ChannelPlan {
    /// Assemble and validate a plan from explicit parts. Proportions are the
    /// group sizes over the padded channel count.
    pub fn from_parts(
        layer_id: impl Into<String>,
        num_channels: usize,
        permutation: Vec<usize>,
        counts: [usize; 3],
        thresholds: ThresholdSet<f64>,
    ) -> Result<Self> {
        let padded: usize = counts.iter().sum();
        let frac = |n: usize| if padded == 0 { 0.0 } else { n as f64 / padded as f64 };
        let plan = ChannelPlan {
            layer_id: layer_id.into(),
            num_channels,
            permutation,
            n4: counts[0],
            n6: counts[1],
            n8: counts[2],
            p4: frac(counts[0]),
            p6: frac(counts[1]),
            p8: frac(counts[2]),
            thresholds,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Identity-ordered plan putting every channel in one precision. It is
    /// not calibrated, so its recorded thresholds are zero.
    pub fn uniform(layer_id: impl Into<String>, num_channels: usize, precision: Precision) -> Self {
        let padded = num_channels.div_ceil(BLOCK_SIZE) * BLOCK_SIZE;
        let mut counts = [0; 3];
        counts[precision as usize] = padded;
        let t = ThresholdSet {
            tensor_max: 0.0,
            t4: 0.0,
            t6: 0.0,
            int8_ceiling: 0.0,
        };
        Self::from_parts(layer_id, num_channels, (0..padded).collect(), counts, t)
            .expect("uniform plan is valid")
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.n4, self.n6, self.n8]
    }

    pub fn count(&self, p: Precision) -> usize {
        self.counts()[p as usize]
    }

    pub fn proportions(&self) -> Proportions {
        Proportions {
            p4: self.p4,
            p6: self.p6,
            p8: self.p8,
        }
    }

    /// Channel count after padding to a multiple of 32.
    pub fn padded_channels(&self) -> usize {
        self.n4 + self.n6 + self.n8
    }

    /// Positions (in reordered space) of a precision group.
    pub fn group_range(&self, p: Precision) -> Range<usize> {
        match p {
            Precision::Fp4 => 0..self.n4,
            Precision::Fp6 => self.n4..self.n4 + self.n6,
            Precision::Fp8 => self.n4 + self.n6..self.padded_channels(),
        }
    }

    pub fn group_of_position(&self, pos: usize) -> Precision {
        if pos < self.n4 {
            Precision::Fp4
        } else if pos < self.n4 + self.n6 {
            Precision::Fp6
        } else {
            Precision::Fp8
        }
    }

    /// `inverse[c]` is the position of source channel `c`.
    pub fn inverse_permutation(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (pos, &c) in self.permutation.iter().enumerate() {
            inv[c] = pos;
        }
        inv
    }

    /// Average stored bits per element, including the amortized 8-bit E8M0
    /// scale shared by 32 elements.
    pub fn avg_bits(&self) -> f64 {
        let total = self.padded_channels() as f64;
        let element = (4 * self.n4 + 6 * self.n6 + 8 * self.n8) as f64 / total;
        element + 8.0 / BLOCK_SIZE as f64
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::PlanMismatch(format!("plan {}: {msg}", self.layer_id)));
        let padded = self.padded_channels();
        if self.counts().iter().any(|n| n % BLOCK_SIZE != 0) {
            return fail(format!("group sizes {:?} are not multiples of {BLOCK_SIZE}", self.counts()));
        }
        if padded != self.num_channels.div_ceil(BLOCK_SIZE) * BLOCK_SIZE {
            return fail(format!(
                "group sizes sum to {padded}, expected {} channels padded to {BLOCK_SIZE}",
                self.num_channels
            ));
        }
        if self.permutation.len() != padded {
            return fail(format!("permutation has {} entries, expected {padded}", self.permutation.len()));
        }
        let mut seen = vec![false; padded];
        for &c in &self.permutation {
            if c >= padded || std::mem::replace(&mut seen[c], true) {
                return fail(format!("permutation is not a bijection (entry {c})"));
            }
        }
        if padded > 0 && (self.p4 + self.p6 + self.p8 - 1.0).abs() > 1e-9 {
            return fail("proportions do not sum to 1".into());
        }
        Ok(())
    }
}

/// Sort channels by absolute mean, size groups from thresholded maxima.
pub fn build_plan<T: Real>(stats: &CalibStats<T>) -> Result<ChannelPlan> {
    build_plan_with_bits(stats, DEFAULT_HIGH_PRECISION_BITS)
}

pub fn build_plan_with_bits<T: Real>(stats: &CalibStats<T>, hp_bits: u32) -> Result<ChannelPlan> {
    let props = estimate_proportions_with_bits(stats, hp_bits)?;
    let t = stats.thresholds(hp_bits)?;
    let channels = stats.num_channels();
    let counts = partition_counts(&props, channels);

    let mean = stats.channel_abs_mean();
    let mut order: Vec<usize> = (0..channels).collect();
    order.sort_by(|&a, &b| {
        mean[a]
            .partial_cmp(&mean[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });

    // real channels fill groups from the top; padding fills what is left,
    // which is the FP4 group whenever it has room
    let r8 = counts[2].min(channels);
    let r6 = counts[1].min(channels - r8);
    let real = [channels - r8 - r6, r6, r8];
    let mut permutation = Vec::with_capacity(counts.iter().sum());
    let mut pads = channels..;
    let mut next = order.into_iter();
    for g in 0..3 {
        permutation.extend(next.by_ref().take(real[g]));
        permutation.extend(pads.by_ref().take(counts[g] - real[g]));
    }

    let f = |v: T| v.to_f64_lossy();
    Ok(ChannelPlan {
        layer_id: stats.layer_id().to_string(),
        num_channels: channels,
        permutation,
        n4: counts[0],
        n6: counts[1],
        n8: counts[2],
        p4: props.p4,
        p6: props.p6,
        p8: props.p8,
        thresholds: ThresholdSet {
            tensor_max: f(t.tensor_max),
            t4: f(t.t4),
            t6: f(t.t6),
            int8_ceiling: f(t.int8_ceiling),
        },
    })
}

/// Threshold violations and bit cost of one layer's plan.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerDiagnostics {
    pub layer_id: String,
    /// Channels whose maximum exceeds their group's threshold, per
    /// precision (FP8 has no threshold, so its entry is always 0).
    pub violations: [usize; 3],
    pub avg_bits: f64,
    pub proportions: Proportions,
}

impl LayerDiagnostics {
    pub fn total_violations(&self) -> usize {
        self.violations.iter().sum()
    }
}

/// Count channels placed below the precision their maximum requires. These
/// arise when mean-based ordering and max-based sizing disagree.
pub fn plan_diagnostics<T: Real>(
    layers: &[(&ChannelPlan, &CalibStats<T>)],
) -> Result<Vec<LayerDiagnostics>> {
    layers
        .iter()
        .map(|(plan, stats)| {
            if plan.layer_id != stats.layer_id() || plan.num_channels != stats.num_channels() {
                return Err(Error::PlanMismatch(format!(
                    "plan {} does not describe stats of {}",
                    plan.layer_id,
                    stats.layer_id()
                )));
            }
            let maxima = stats.channel_abs_max();
            let mut violations = [0usize; 3];
            for (pos, &c) in plan.permutation.iter().enumerate() {
                if c >= plan.num_channels {
                    continue;
                }
                let group = plan.group_of_position(pos);
                if let Some(limit) = plan.thresholds.limit(group) {
                    if maxima[c].to_f64_lossy() > limit {
                        violations[group as usize] += 1;
                    }
                }
            }
            Ok(LayerDiagnostics {
                layer_id: plan.layer_id.clone(),
                violations,
                avg_bits: plan.avg_bits(),
                proportions: plan.proportions(),
            })
        })
        .collect()
}
