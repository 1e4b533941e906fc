//! Central finite-difference verification of tape gradients.

use super::{AutodiffError, Tape, Tensor, Var};

/// Per-parameter comparison between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// (flat index, analytic, numeric) of the worst component.
    pub worst: Option<(usize, f64, f64)>,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub step: f64,
    /// Set when two builds of the same program disagree on the loss value
    /// (e.g. a dropout mask was resampled); finite differences are skipped.
    pub nondeterministic: bool,
    pub checks: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        !self.nondeterministic && self.checks.iter().all(|c| c.pass)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.nondeterministic {
            writeln!(f, "grad check: FAIL (program is not deterministic)")?;
            return Ok(());
        }
        for c in &self.checks {
            writeln!(
                f,
                "  {:<24} max rel err {:>10.3e}  {}",
                c.name,
                c.max_rel_err,
                if c.pass { "ok" } else { "FAIL" }
            )?;
        }
        writeln!(
            f,
            "grad check: {} (tol {:.1e}, step {:.1e})",
            if self.pass() { "PASS" } else { "FAIL" },
            self.tol,
            self.step
        )
    }
}

// Components whose analytic and numeric gradients are both below this floor
// are compared absolutely against it; guards against finite-difference
// roundoff blowing up the relative error of near-zero entries.
const REL_FLOOR: f64 = 1e-4;

// Absolute discrepancy absorbed before the relative comparison. Central
// differences of a loss built from ~1e5 flops carry accumulated-roundoff
// noise of order eps * |loss| * ops / (2 step) even where the true gradient
// is exactly zero (a conv bias followed by batch norm is the canonical
// case: mean subtraction cancels it identically). One step width of
// allowance covers that noise without masking real defects, which scale
// with the gradient itself.
const ABS_ALLOWANCE: f64 = 1e-5;

/// Checks d(loss)/d(param) for every parameter against central differences.
///
/// `build` must be deterministic given the parameter values (freeze any
/// dropout masks by cloning the RNG it captures); it is re-run twice per
/// perturbed component.
pub fn grad_check<F>(
    build: &F,
    params: &[(String, Tensor)],
    tol: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    grad_check_with_step(build, params, tol, 1e-5)
}

pub fn grad_check_with_step<F>(
    build: &F,
    params: &[(String, Tensor)],
    tol: f64,
    step: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();

    // Determinism probe: identical builds must produce identical losses.
    let v0 = eval(&base)?;
    let v1 = eval(&base)?;
    if v0.to_bits() != v1.to_bits() {
        return Ok(GradCheckReport {
            tol,
            step,
            nondeterministic: true,
            checks: Vec::new(),
        });
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = base.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let gradients = tape.backward(loss)?;

    let mut checks = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        let analytic = gradients
            .get(vars[p])
            .expect("trainable leaves always have gradients")
            .data()
            .to_vec();
        let mut max_rel = 0.0f64;
        let mut worst = None;
        for i in 0..base[p].len() {
            let mut plus = base.clone();
            plus[p].data_mut()[i] += step;
            let mut minus = base.clone();
            minus[p].data_mut()[i] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[i];
            let excess = ((a - numeric).abs() - ABS_ALLOWANCE).max(0.0);
            let rel = excess / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > max_rel {
                max_rel = rel;
                worst = Some((i, a, numeric));
            }
        }
        checks.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_rel,
            worst,
            pass: max_rel <= tol,
        });
    }

    Ok(GradCheckReport {
        tol,
        step,
        nondeterministic: false,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_passes_tightly() {
        // f(w) = sum((w - c)^2): exact up to roundoff for quadratics.
        let build = |tape: &mut Tape, vars: &[Var]| {
            let c = tape.constant(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
            let d = tape.sub(vars[0], c)?;
            let sq = tape.square(d);
            Ok(tape.sum(sq))
        };
        let params = vec![(
            "w".to_string(),
            Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(),
        )];
        let report = grad_check(&build, &params, 1e-6).unwrap();
        assert!(report.pass(), "{report}");
    }

    #[test]
    fn nondeterministic_program_is_flagged() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let build = move |tape: &mut Tape, vars: &[Var]| {
            counter.set(counter.get() + 1.0);
            let c = tape.constant(Tensor::scalar(counter.get()));
            let s = tape.sum(vars[0]);
            tape.mul_elem(s, c)
        };
        let params = vec![("w".to_string(), Tensor::new(&[2], vec![1.0, 2.0]).unwrap())];
        let report = grad_check(&build, &params, 1e-4).unwrap();
        assert!(report.nondeterministic);
        assert!(!report.pass());
    }
}
