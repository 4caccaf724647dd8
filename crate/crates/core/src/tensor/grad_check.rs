//! Central-difference verification of tape gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Fixed pseudo-random weights used to reduce a non-scalar output to a scalar.
fn contraction_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = ((i as f64 + 1.0) * 0.618_033_988_749_895).fract();
            2.0 * x - 1.0 + 0.1
        })
        .collect()
}

fn scalarize(tape: &Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out);
    let n: usize = shape.iter().product();
    if n == 1 {
        return Ok(out);
    }
    let w = tape.constant(Tensor::new(shape, contraction_weights(n))?);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Max over every input coordinate of `|analytic − numeric| / max(1, |analytic|)`.
///
/// `f` builds the op under test on a fresh tape from the bound inputs. Outputs
/// that are not scalar are contracted with fixed weights first.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i:03}")).collect();
    for (name, t) in names.iter().zip(inputs) {
        store.insert(name.clone(), t.clone());
    }
    grad_check_params(
        |tape, store| {
            let vars = names.iter().map(|n| tape.param(store, n)).collect::<Result<Vec<_>>>()?;
            f(tape, &vars)
        },
        &store,
        h,
    )
}

/// Like [`grad_check`] but perturbs every entry of a parameter store.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let tape = Tape::new();
    let out = f(&tape, store)?;
    let loss = scalarize(&tape, out)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::inference();
        let out = f(&tape, s)?;
        let loss = scalarize(&tape, out)?;
        tape.check()?;
        Ok(tape.value(loss).item())
    };

    let mut work = store.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let Some(analytic) = grads.named(&name) else { continue };
        let analytic = analytic.data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name).expect("present").data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
