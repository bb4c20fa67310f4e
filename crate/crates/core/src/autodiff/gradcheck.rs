//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::invalid("grad_check", "function must be scalar-valued"));
    }
    Ok(v.item())
}

/// Max over checked elements of `|analytic - numeric| / max(1, |numeric|)`.
///
/// `pick(input_index, len)` selects which elements of each input to check.
fn check_with<F, P>(f: F, inputs: &[Tensor<f64>], eps: f64, mut pick: P) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    P: FnMut(usize, usize) -> Vec<usize>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let zeros = vec![0.0; n];
        let analytic = grads.get(*var).unwrap_or(&zeros).to_vec();
        for j in pick(k, n) {
            let orig = inputs[k].data()[j];
            work[k].data_mut()[j] = orig + eps;
            let up = eval(&f, &work)?;
            work[k].data_mut()[j] = orig - eps;
            let down = eval(&f, &work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Checks every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    check_with(f, inputs, eps, |_, n| (0..n).collect())
}

/// Checks at most `per_input` randomly chosen elements of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    check_with(f, inputs, eps, |_, n| {
        if n <= per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_input).into_vec()
        }
    })
}
