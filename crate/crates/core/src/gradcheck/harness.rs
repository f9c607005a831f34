use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Central-difference step used at `f64`.
pub const STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]; gradients below it are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one named gradient check, aggregated over all draws.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub draws: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            draws: 0,
            coords: 0,
            max_rel_err: 0.0,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.coords > 0 && self.max_rel_err < self.tolerance && self.max_rel_err.is_finite()
    }

    /// Folds another draw's worst error into this result.
    pub fn absorb(&mut self, draw: &CheckResult) {
        self.draws += draw.draws.max(1);
        self.coords += draw.coords;
        if !(draw.max_rel_err <= self.max_rel_err) {
            self.max_rel_err = draw.max_rel_err;
        }
    }
}

/// Central difference of `f` at `x` along each coordinate in `coords`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares a claimed gradient against central differences of `value` on the
/// listed coordinates. `analytic` is indexed like `x`.
pub fn check_function(
    name: &str,
    x: &[f64],
    value: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    coords: &[usize],
    tolerance: f64,
) -> CheckResult {
    let numeric = numeric_gradient(value, x, coords, STEP);
    let max_rel_err = coords
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| relative_error(analytic[i], n))
        .fold(0.0, f64::max);
    CheckResult {
        name: name.to_string(),
        draws: 1,
        coords: coords.len(),
        max_rel_err,
        tolerance,
    }
}

/// Checks the tape gradient of a scalar function of several tensors.
///
/// `build` receives leaves for `inputs` in order and returns the scalar output.
/// When `coords` is `None` every coordinate of every input is checked.
pub fn check_tape<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    build: F,
    coords: Option<&[usize]>,
    tolerance: f64,
) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let unflatten = |x: &[f64]| -> Vec<Tensor<f64>> {
        let mut off = 0;
        inputs
            .iter()
            .map(|t| {
                let n = t.numel();
                let out = Tensor::new(t.shape().to_vec(), x[off..off + n].to_vec()).expect("same shape");
                off += n;
                out
            })
            .collect()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut analytic = Vec::with_capacity(flat.len());
    for (v, t) in vars.iter().zip(inputs) {
        match tape.grad(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(t.numel())),
        }
    }

    let mut failure = None;
    let value = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = unflatten(x).into_iter().map(|t| tape.leaf(t)).collect();
        match build(&mut tape, &vars) {
            Ok(v) => tape.value(v).data()[0],
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..flat.len()).collect();
            &all
        }
    };
    let result = check_function(name, &flat, value, &analytic, coords, tolerance);
    match failure {
        Some(e) => Err(e),
        None => Ok(result),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_gradient_passes_and_wrong_one_fails() {
        let x = [0.3f64, -1.2, 2.0];
        let f = |x: &[f64]| x[0] * x[0] + x[1].sin() * x[2];
        let good = [2.0 * x[0], x[1].cos() * x[2], x[1].sin()];
        let bad = [good[0] * 1.01, good[1], good[2]];
        let all = [0, 1, 2];
        assert!(check_function("ok", &x, f, &good, &all, 1e-6).passed());
        let r = check_function("corrupt", &x, f, &bad, &all, 1e-6);
        assert!(!r.passed());
        assert_eq!(r.name, "corrupt");
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-9, 2e-9) < 1e-2);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }
}
