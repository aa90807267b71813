use super::ParamBlock;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor name and index of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub n_coords: usize,
}

/// Compares `analytic` against central differences of `f` at `params`,
/// coordinate by coordinate. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-6)`; the floor sits above the round-off
/// of a central difference on an O(1) loss.
pub fn grad_check<L>(
    params: &ParamBlock<f64>,
    analytic: &ParamBlock<f64>,
    epsilon: f64,
    f: L,
) -> Result<GradCheckReport>
where
    L: Fn(&ParamBlock<f64>) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1e-2], got {epsilon}")));
    }
    if !params.same_layout(analytic) {
        return Err(Error::invalid("analytic gradient layout differs from parameters"));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        n_coords: params.len(),
    };
    for i in 0..params.len() {
        let orig = params.values()[i];
        probe.values_mut()[i] = orig + epsilon;
        let up = f(&probe)?;
        probe.values_mut()[i] = orig - epsilon;
        let down = f(&probe)?;
        probe.values_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss while probing coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.values()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = rel;
            report.analytic = a;
            report.numeric = numeric;
            report.worst = params
                .layout()
                .locate(i)
                .map(|(n, k)| format!("{n}[{k}]"))
                .unwrap_or_else(|| i.to_string());
        }
    }
    Ok(report)
}
