//! Operation and memory instrumentation.
//!
//! Every matrix product in the toy model goes through [`Census::matmul`],
//! which books `2 p q r` FLOPs for a `(p x q) (q x r)` product against the
//! phase it runs in. Tensors kept for the backward pass are booked with
//! [`Census::retain`] and freed with [`Census::release`].

use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    BackboneFwd,
    /// Anything that would produce gradients of backbone weights. The side
    /// network never runs in this phase.
    BackboneBwd,
    AdapterFwd,
    AdapterBwd,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub backbone_fwd_flops: u64,
    pub backbone_bwd_flops: u64,
    pub adapter_fwd_flops: u64,
    pub adapter_bwd_flops: u64,
    pub retained_bytes: u64,
    pub peak_retained_bytes: u64,
}

impl Census {
    pub fn record(&mut self, phase: Phase, flops: u64) {
        let slot = match phase {
            Phase::BackboneFwd => &mut self.backbone_fwd_flops,
            Phase::BackboneBwd => &mut self.backbone_bwd_flops,
            Phase::AdapterFwd => &mut self.adapter_fwd_flops,
            Phase::AdapterBwd => &mut self.adapter_bwd_flops,
        };
        *slot += flops;
    }

    pub fn matmul(&mut self, phase: Phase, a: &Tensor, b: &Tensor) -> Tensor {
        self.record(phase, 2 * (a.rows() * a.cols() * b.cols()) as u64);
        a.matmul(b)
    }

    /// `a^T b` without materialising the transpose in the count.
    pub fn matmul_tn(&mut self, phase: Phase, a: &Tensor, b: &Tensor) -> Tensor {
        self.record(phase, 2 * (a.cols() * a.rows() * b.cols()) as u64);
        a.transpose().matmul(b)
    }

    /// `a b^T`.
    pub fn matmul_nt(&mut self, phase: Phase, a: &Tensor, b: &Tensor) -> Tensor {
        self.record(phase, 2 * (a.rows() * a.cols() * b.rows()) as u64);
        a.matmul(&b.transpose())
    }

    pub fn retain(&mut self, bytes: u64) {
        self.retained_bytes += bytes;
        self.peak_retained_bytes = self.peak_retained_bytes.max(self.retained_bytes);
    }

    pub fn release(&mut self, bytes: u64) {
        self.retained_bytes -= bytes;
    }

    /// Sums counters; the peak is the larger of the two peaks.
    pub fn merge(&mut self, other: &Census) {
        self.backbone_fwd_flops += other.backbone_fwd_flops;
        self.backbone_bwd_flops += other.backbone_bwd_flops;
        self.adapter_fwd_flops += other.adapter_fwd_flops;
        self.adapter_bwd_flops += other.adapter_bwd_flops;
        self.peak_retained_bytes = self.peak_retained_bytes.max(other.peak_retained_bytes);
    }
}
