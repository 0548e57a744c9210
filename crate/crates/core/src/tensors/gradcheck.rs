use serde::Serialize;

use super::{Array, OpKind, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error; keeps gradients that are
/// zero up to rounding from reporting huge relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub step: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape's analytic gradients with central differences.
///
/// `f` rebuilds the scalar function on a fresh tape from the given
/// parameter leaves. `max_coords` caps how many entries per parameter are
/// perturbed (spread evenly over the array); `None` checks all of them.
pub fn finite_diff_check<Fun>(
    f: Fun,
    params: &[(String, Array<f64>)],
    h: f64,
    tol: f64,
    max_coords: Option<usize>,
    corrupt: Option<OpKind>,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Array<f64>], tape: Tape<f64>| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = tape;
        let vars: Vec<Var> = values.iter().map(|a| tape.leaf(a.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        Ok((tape, vars, out))
    };

    let mut values: Vec<Array<f64>> = params.iter().map(|(_, a)| a.clone()).collect();
    let (tape, vars, out) = eval(&values, Tape::new().with_corruption(corrupt))?;
    let analytic = tape.grad(out, &vars)?;
    drop(tape);

    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, arr)) in params.iter().enumerate() {
        let n = arr.len();
        let coords: Vec<usize> = match max_coords {
            Some(c) if c < n => (0..c).map(|i| (i * n) / c + (n / c) / 2).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &ci in &coords {
            let orig = values[pi].data()[ci];
            values[pi].data_mut()[ci] = orig + h;
            let (t, _, o) = eval(&values, Tape::new())?;
            let plus = t.scalar(o);
            values[pi].data_mut()[ci] = orig - h;
            let (t, _, o) = eval(&values, Tape::new())?;
            let minus = t.scalar(o);
            values[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let e = rel_err(analytic[pi].data()[ci], numeric);
            if !e.is_finite() {
                worst = f64::INFINITY;
            } else {
                worst = worst.max(e);
            }
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            checked: coords.len(),
            max_rel_err: worst,
            passed: worst < tol,
        });
    }
    Ok(GradCheckReport {
        tol,
        step: h,
        entries,
    })
}
