//! Finite-difference gradient checking.
//!
//! The lab's credibility rests on its gradients, so checking them is a
//! first-class utility rather than test-only scaffolding. Two stencils
//! are provided: plain central differences and a fourth-order stencil
//! whose truncation error is O(h^4), which keeps the comparison sharp on
//! coordinates with small gradients.

/// Which finite-difference stencil to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// (f(x+h) - f(x-h)) / 2h
    Central,
    /// (-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h
    FourthOrder,
}

/// Outcome of checking one gradient vector against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates excluded because the analytic gradient was below the
    /// exclusion threshold.
    pub excluded: usize,
    /// Largest relative error among checked coordinates.
    pub max_rel_err: f64,
    /// Coordinate achieving `max_rel_err`.
    pub worst_coord: Option<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked == 0 || self.max_rel_err < tol
    }
}

/// Finite-difference estimate of `d f / d x[i]`.
pub fn finite_diff(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &mut [f64],
    i: usize,
    h: f64,
    stencil: Stencil,
) -> f64 {
    let x0 = x[i];
    let mut eval = |v: f64, x: &mut [f64]| {
        x[i] = v;
        let y = f(x);
        x[i] = x0;
        y
    };
    match stencil {
        Stencil::Central => {
            let fp = eval(x0 + h, x);
            let fm = eval(x0 - h, x);
            (fp - fm) / (2.0 * h)
        }
        Stencil::FourthOrder => {
            let fp2 = eval(x0 + 2.0 * h, x);
            let fp1 = eval(x0 + h, x);
            let fm1 = eval(x0 - h, x);
            let fm2 = eval(x0 - 2.0 * h, x);
            (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h)
        }
    }
}

/// Compare `analytic` against finite differences of `f` at `x` on the
/// given coordinates. Coordinates whose analytic gradient magnitude is
/// below `exclude_below` are skipped; relative error uses
/// `|fd - g| / max(|fd|, |g|)`.
pub fn check_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &mut [f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    exclude_below: f64,
    stencil: Stencil,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut report =
        GradCheckReport { checked: 0, excluded: 0, max_rel_err: 0.0, worst_coord: None };
    for &i in coords {
        let g = analytic[i];
        if g.abs() < exclude_below {
            report.excluded += 1;
            continue;
        }
        let fd = finite_diff(f, x, i, h, stencil);
        let rel = (fd - g).abs() / fd.abs().max(g.abs());
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = Some(i);
        }
    }
    report
}
