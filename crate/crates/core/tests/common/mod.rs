//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use gist_core::model::{forward, lm_loss, Example, LossMode, ModelParams};

/// Mean loss over all contributing positions, by forward passes only.
pub fn loss_by_forward(p: &ModelParams<f64>, batch: &[Example], mode: LossMode) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ex in batch {
        let out = forward(p, &ex.seq, &ex.mask).unwrap();
        let lo = lm_loss(&out, &ex.seq, mode).unwrap();
        sum += lo.sum();
        count += lo.count();
    }
    sum / count as f64
}

/// Denominator floor for relative error: below this magnitude the central
/// difference itself is dominated by f64 roundoff (~eps·|L|/h ≈ 1e-12).
pub const REL_FLOOR: f64 = 1e-8;

pub struct FdReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
    pub failures: Vec<String>,
}

/// Central differences with step `h` over every parameter coordinate.
pub fn finite_difference_check(
    p: &ModelParams<f64>,
    analytic: &ModelParams<f64>,
    batch: &[Example],
    mode: LossMode,
    h: f64,
    tol: f64,
    atol: f64,
) -> FdReport {
    let mut probe = p.clone();
    let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, t)| t.data.clone()).collect();
    let mut report = FdReport {
        checked: 0,
        worst: 0.0,
        worst_at: String::new(),
        failures: Vec::new(),
    };
    for (ti, name) in names.iter().enumerate() {
        for i in 0..grads[ti].len() {
            let orig = probe.tensors()[ti].1.data[i];
            probe.tensors_mut()[ti].1.data[i] = orig + h;
            let up = loss_by_forward(&probe, batch, mode);
            probe.tensors_mut()[ti].1.data[i] = orig - h;
            let down = loss_by_forward(&probe, batch, mode);
            probe.tensors_mut()[ti].1.data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[ti][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.worst {
                report.worst = rel;
                report.worst_at = format!("{name}[{i}]");
            }
            if rel >= tol && (a - numeric).abs() > atol {
                report
                    .failures
                    .push(format!("{name}[{i}]: analytic {a:e} numeric {numeric:e} rel {rel:e}"));
            }
            report.checked += 1;
        }
    }
    report
}
