use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub group: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<EntryCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn evaluate<F>(params: &[Tensor], f: &F, with_grad: bool) -> Result<(f64, Vec<Option<Tensor>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if with_grad {
                tape.param(p.clone())
            } else {
                tape.constant(p.clone())
            }
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("grad_check loss = {value}")));
    }
    let grads = if with_grad {
        tape.backward(loss)?;
        vars.iter().map(|&v| tape.grad(v).cloned()).collect()
    } else {
        Vec::new()
    };
    Ok((value, grads))
}

/// Compares the tape gradient of `f` with central differences at the given
/// `(parameter group, flat index)` entries.
pub fn grad_check_entries<F>(params: &[Tensor], f: F, entries: &[(usize, usize)]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, grads) = evaluate(params, &f, true)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(entries.len());
    for &(group, index) in entries {
        let p = params
            .get(group)
            .ok_or_else(|| Error::invalid(format!("no parameter group {group}")))?;
        if index >= p.len() {
            return Err(Error::invalid(format!(
                "index {index} outside parameter group {group} of size {}",
                p.len()
            )));
        }
        let analytic = grads[group].as_ref().map_or(0.0, |g| g.data()[index]);
        let base = p.data()[index];
        work[group].data_mut()[index] = base + FD_STEP;
        let (plus, _) = evaluate(&work, &f, false)?;
        work[group].data_mut()[index] = base - FD_STEP;
        let (minus, _) = evaluate(&work, &f, false)?;
        work[group].data_mut()[index] = base;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        out.push(EntryCheck {
            group,
            index,
            analytic,
            numeric,
            rel_error: (analytic - numeric).abs() / denom,
        });
    }
    let max_rel_error = out.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        entries: out,
    })
}

/// Checks `samples` random scalar parameters. Sample `k` is drawn from
/// group `k mod groups`, so every non-empty group is covered once
/// `samples` reaches the group count.
pub fn grad_check<F>(params: &[Tensor], f: F, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let groups: Vec<usize> = (0..params.len()).filter(|&g| !params[g].is_empty()).collect();
    if groups.is_empty() {
        return Err(Error::invalid("grad_check needs at least one parameter"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<(usize, usize)> = (0..samples)
        .map(|k| {
            let g = groups[k % groups.len()];
            (g, rng.gen_range(0..params[g].len()))
        })
        .collect();
    grad_check_entries(params, f, &entries)
}
