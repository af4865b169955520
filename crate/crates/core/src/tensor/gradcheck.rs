//! Central-difference verification of analytic gradients.
//!
//! Non-scalar outputs are reduced to a scalar with a fixed pseudo-random
//! projection, so every output element contributes to the checked gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};
use crate::params::ParamStore;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
}

impl GradcheckReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            checked: 0,
            worst: None,
        }
    }

    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((input, elem));
        }
    }
}

fn projection(len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ len as u64);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn reduce(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        Ok(out)
    } else {
        let w = projection(tape.value(out).len());
        tape.dot_const(out, w)
    }
}

/// Checks `f` with respect to every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let s = reduce(&mut tape, out)?;
        Ok(tape.value(s).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let s = reduce(&mut tape, out)?;
    tape.backward(s)?;

    let mut report = GradcheckReport::new();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(i, j, a, (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks `f` with respect to the named trainable parameters. At most
/// `max_per_param` evenly spaced elements of each parameter are perturbed.
pub fn gradcheck_params<F>(
    store: &ParamStore<f64>,
    names: &[String],
    max_per_param: usize,
    step: f64,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let s = reduce(&mut tape, out)?;
    tape.backward(s)?;
    let grads = crate::params::Grads::from_pairs(tape.param_grads());

    let eval = |st: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::without_param_grads();
        let out = f(&mut tape, st)?;
        let s = reduce(&mut tape, out)?;
        Ok(tape.value(s).data()[0])
    };

    let mut report = GradcheckReport::new();
    let mut work = store.clone();
    for (i, name) in names.iter().enumerate() {
        let len = store.get(name).map(Tensor::len).unwrap_or(0);
        let stride = len.div_ceil(max_per_param.max(1)).max(1);
        for j in (0..len).step_by(stride) {
            let a = grads.get(name).map_or(0.0, |g| g[j]);
            let orig = store.get(name).unwrap().data()[j];
            work.get_mut(name).unwrap().data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[j] = orig;
            report.record(i, j, a, (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}
