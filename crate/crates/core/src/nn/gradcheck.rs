//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Reduce a non-scalar output to a scalar with fixed pseudo-random weights so
/// every output element contributes to the checked gradient.
fn scalarize(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).len();
    if n == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.dot_const(out, w)
}

fn evaluate<F>(op: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    Ok(tape.value(s).data()[0])
}

/// Maximum relative error between the tape gradient and central differences
/// over every element of every input.
pub fn grad_check<F>(op: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with(&op, inputs, epsilon, false)
}

/// Like [`grad_check`] with the five-point central stencil, whose truncation
/// error is `O(h^4)`. A wider step then keeps rounding noise small on
/// gradient entries that are tiny compared with the output.
pub fn grad_check_five_point<F>(op: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with(&op, inputs, epsilon, true)
}

fn check_with<F>(op: &F, inputs: &[Tensor], epsilon: f64, five_point: bool) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let s = scalarize(&mut tape, out)?;
    let mut grads = tape.backward(s)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            let mut at = |k: f64| -> Result<f64> {
                probe[i].data_mut()[j] = orig + k * epsilon;
                let v = evaluate(op, &probe);
                probe[i].data_mut()[j] = orig;
                v
            };
            let numeric = if five_point {
                (at(-2.0)? - 8.0 * at(-1.0)? + 8.0 * at(1.0)? - at(2.0)?) / (12.0 * epsilon)
            } else {
                (at(1.0)? - at(-1.0)?) / (2.0 * epsilon)
            };
            worst = worst.max(relative_error(analytic[i][j], numeric));
        }
    }
    Ok(worst)
}
