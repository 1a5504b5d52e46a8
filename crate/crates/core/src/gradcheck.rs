//! Central-difference gradient verification.
//!
//! Every check runs in `f64`. A coordinate is *flagged* (and left out of the
//! reported maximum) when the loss is visibly non-differentiable there: the
//! one-sided slopes jump, or the central difference disagrees with the
//! analytic value while one of the one-sided slopes agrees with it (a kink
//! inside the stencil on the other side).

pub const DEFAULT_STEP: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-8;

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over unflagged coordinates.
    pub max_rel_error: f64,
    /// Coordinate achieving `max_rel_error`.
    pub worst_index: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Coordinates treated as non-differentiable.
    pub flagged: Vec<usize>,
    pub checked: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

/// Central difference `(f(x+h) - f(x-h)) / 2h` of `f` along coordinate `i`.
pub fn central_difference<F>(f: &mut F, params: &mut [f64], i: usize, h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let x0 = params[i];
    params[i] = x0 + h;
    let fp = f(params);
    params[i] = x0 - h;
    let fm = f(params);
    params[i] = x0;
    (fp - fm) / (2.0 * h)
}

/// Compares `analytic` against central differences of `loss` at `params`
/// for every coordinate listed in `indices` (all coordinates when `None`).
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &mut [f64],
    analytic: &[f64],
    h: f64,
    indices: Option<&[usize]>,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "analytic gradient length");
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let f0 = loss(params);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        flagged: Vec::new(),
        checked: 0,
    };
    for &i in indices {
        let x0 = params[i];
        params[i] = x0 + h;
        let fp = loss(params);
        params[i] = x0 - h;
        let fm = loss(params);
        params[i] = x0;

        let central = (fp - fm) / (2.0 * h);
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        let a = analytic[i];
        let err = relative_error(a, central);

        let jump = (forward - backward).abs();
        let jumped = jump > 0.5 * forward.abs().max(backward.abs()) && jump > 1e-6;
        let one_sided_agrees = err > tolerance
            && (relative_error(a, forward) <= tolerance || relative_error(a, backward) <= tolerance);
        if jumped || one_sided_agrees {
            report.flagged.push(i);
            continue;
        }
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
            report.analytic_at_worst = a;
            report.numeric_at_worst = central;
        }
    }
    report
}
