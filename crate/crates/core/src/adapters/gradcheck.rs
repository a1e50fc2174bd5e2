//! Central finite differences against the analytic side-network gradients.

use serde::{Deserialize, Serialize};

use super::{AdapterError, AdapterState, Census, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter with the largest error, as `name[index]`.
    pub worst: String,
    /// Backbone backward FLOPs booked during the analytic pass.
    pub backbone_bwd_flops: u64,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Perturbs every parameter by `±step` and compares the loss slope with the
/// backward pass.
pub fn gradient_check(
    state: &AdapterState,
    taps: &[Tensor],
    batch: usize,
    labels: &[usize],
    step: f64,
) -> Result<GradCheck, AdapterError> {
    let mut census = Census::default();
    let pass = state.forward(taps, batch, &mut census)?;
    let analytic = state.backward(pass, labels, 1.0, &mut census)?.flat();
    let names: Vec<(String, usize)> = state.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let loss_at = |s: &AdapterState| -> Result<f64, AdapterError> {
        let pass = s.forward(taps, batch, &mut Census::default())?;
        AdapterState::loss(&pass, labels, 1.0)
    };
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
        backbone_bwd_flops: census.backbone_bwd_flops,
    };
    let mut flat_index = 0;
    for (t, (name, len)) in names.iter().enumerate() {
        for i in 0..*len {
            let mut probe = state.clone();
            let nudge = |s: &mut AdapterState, delta: f64| {
                let mut k = 0;
                s.visit_mut(|_, tensor| {
                    if k == t {
                        tensor.data_mut()[i] += delta;
                    }
                    k += 1;
                });
            };
            nudge(&mut probe, step);
            let up = loss_at(&probe)?;
            nudge(&mut probe, -2.0 * step);
            let down = loss_at(&probe)?;
            let numeric = (up - down) / (2.0 * step);
            let err = rel_error(numeric, analytic[flat_index]);
            if err > out.max_rel_error || out.worst.is_empty() {
                out.max_rel_error = err.max(out.max_rel_error);
                out.worst = format!("{name}[{i}]");
            }
            out.checked += 1;
            flat_index += 1;
        }
    }
    Ok(out)
}
