//! Joint supervision: decoder loss plus lambda-weighted per-stage edge and
//! segmentation losses.

use crate::model::HeadOutputs;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

/// Stage weights used unless configured otherwise.
pub const DEFAULT_LAMBDAS: [f64; 4] = [1.0; 4];

/// Scalar values of every loss term of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub decoder: f64,
    pub stage_edge: [f64; 4],
    pub stage_seg: [f64; 4],
    pub lambdas: [f64; 4],
    pub total: f64,
}

impl LossBreakdown {
    /// `decoder + sum_i lambda_i * (edge_i + seg_i)`, recomputed from the parts.
    pub fn recomputed_total(&self) -> f64 {
        self.decoder
            + (0..4)
                .map(|i| self.lambdas[i] * (self.stage_edge[i] + self.stage_seg[i]))
                .sum::<f64>()
    }

    /// Elementwise sum, for averaging over iterations.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.decoder += other.decoder;
        for i in 0..4 {
            self.stage_edge[i] += other.stage_edge[i];
            self.stage_seg[i] += other.stage_seg[i];
        }
        self.total += other.total;
    }

    pub fn scaled(mut self, s: f64) -> LossBreakdown {
        self.decoder *= s;
        for i in 0..4 {
            self.stage_edge[i] *= s;
            self.stage_seg[i] *= s;
        }
        self.total *= s;
        self
    }

    pub fn zero(lambdas: [f64; 4]) -> LossBreakdown {
        LossBreakdown {
            decoder: 0.0,
            stage_edge: [0.0; 4],
            stage_seg: [0.0; 4],
            lambdas,
            total: 0.0,
        }
    }
}

/// Record the total loss on `tape`. Stage terms are zero when the network
/// has no multi-task heads.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &HeadOutputs,
    seg_mask: Var,
    edge_mask: Var,
    lambdas: [f64; 4],
) -> Result<(Var, LossBreakdown), TensorError> {
    let decoder = tape.bce_loss(outputs.seg_logits, seg_mask)?;
    let mut breakdown = LossBreakdown::zero(lambdas);
    breakdown.decoder = tape.value(decoder).item().as_f64();
    let mut total = decoder;
    if let (Some(edges), Some(segs)) = (outputs.stage_edge_logits, outputs.stage_seg_logits) {
        for i in 0..4 {
            let le = tape.bce_loss(edges[i], edge_mask)?;
            let ls = tape.bce_loss(segs[i], seg_mask)?;
            breakdown.stage_edge[i] = tape.value(le).item().as_f64();
            breakdown.stage_seg[i] = tape.value(ls).item().as_f64();
            let stage = tape.add(le, ls)?;
            let weight = tape.constant(Tensor::scalar(T::from_f64_lossy(lambdas[i])));
            let weighted = tape.mul(stage, weight)?;
            total = tape.add(total, weighted)?;
        }
    }
    breakdown.total = tape.value(total).item().as_f64();
    Ok((total, breakdown))
}
