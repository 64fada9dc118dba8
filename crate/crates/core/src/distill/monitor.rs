use serde::Serialize;

use super::report::TrainReport;

/// Smoothness constant used for the envelope; only its shape is meaningful.
const KAPPA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceSummary {
    /// `min_{s≤t}` of the gradient-norm proxy, per iteration.
    pub running_min: Vec<f64>,
    /// `√(2(L₀−L*)/(tγC) + 2κγC(1+σ²d))` with `L* = 0`, per iteration.
    pub envelope: Vec<f64>,
    pub final_min: Option<f64>,
    /// Running minimum at iteration `⌊T/10⌋`.
    pub min_at_tenth: Option<f64>,
    /// Running minimum at iteration `⌊T/2⌋`.
    pub min_at_half: Option<f64>,
    /// The running minimum did not decrease over the second half of training.
    pub stalled: bool,
}

pub fn convergence_monitor(report: &TrainReport) -> ConvergenceSummary {
    let mut running_min = Vec::with_capacity(report.records.len());
    let mut m = f64::INFINITY;
    for r in &report.records {
        m = m.min(r.grad_norm);
        running_min.push(m);
    }
    let l0 = report.records.first().map_or(0.0, |r| r.teacher_loss);
    let gc = report.gamma * report.norm_bound;
    let d = report.classes as f64;
    let floor = 2.0 * KAPPA * gc * (1.0 + report.noise_scale.powi(2) * d);
    let envelope = (1..=report.records.len())
        .map(|t| (2.0 * l0 / (t as f64 * gc) + floor).sqrt())
        .collect();
    let t = running_min.len();
    let at = |i: usize| running_min.get(i).copied();
    let min_at_half = if t > 0 { at(t / 2) } else { None };
    let final_min = running_min.last().copied();
    ConvergenceSummary {
        stalled: match (min_at_half, final_min) {
            (Some(h), Some(f)) => f >= h,
            _ => false,
        },
        min_at_tenth: if t > 0 { at(t / 10) } else { None },
        min_at_half,
        final_min,
        envelope,
        running_min,
    }
}
