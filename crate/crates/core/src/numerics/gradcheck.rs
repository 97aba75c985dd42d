use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Finite-difference step.
pub const STEP: f64 = 1e-4;

/// Smaller steps tried when an element fails at [`STEP`]. A wrong adjoint
/// fails at every step; a relu or clamp kink closer than `STEP` to the probe
/// point does not.
const RETRY_STEPS: [f64; 2] = [1e-5, 1e-6];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    /// Worst relative error for each input tensor.
    pub per_input_errors: Vec<f64>,
    pub passed: bool,
    /// Location of the first non-finite gradient, if any.
    pub failure: Option<String>,
    /// Elements that only passed at a smaller step.
    pub retried: usize,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {} max_rel_error={:.3e}",
            self.op_name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error
        )?;
        if self.retried > 0 {
            write!(f, " retried={}", self.retried)?;
        }
        if let Some(loc) = &self.failure {
            write!(f, " ({loc})")?;
        }
        Ok(())
    }
}

/// Relative error between an analytic and a numeric derivative.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `op` against central differences.
///
/// The op output is reduced to a scalar by a fixed pseudo-random weighted sum,
/// so ops whose plain sum is constant (softmax, normalization) still get a
/// non-trivial check.
pub fn grad_check<F>(op_name: &str, op: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();
    check_elements(op_name, &op, inputs, &all, tol)
}

/// Like [`grad_check`] but probes at most `max_elements` randomly chosen
/// entries, for inputs too large to perturb exhaustively.
pub fn grad_check_sampled<F>(
    op_name: &str,
    op: F,
    inputs: &[Tensor<f64>],
    tol: f64,
    max_elements: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    use rand::seq::SliceRandom;
    let mut all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();
    if all.len() > max_elements {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        all.truncate(max_elements);
        all.sort_unstable();
    }
    check_elements(op_name, &op, inputs, &all, tol)
}

fn reduction_weights(shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut w = Tensor::<f64>::uniform(shape, 1.0, &mut rng);
    for v in w.data_mut() {
        // keep weights away from zero
        *v += v.signum() * 0.5;
    }
    w
}

fn reduced<F>(op: &F, inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>) -> Result<(f64, Tensor<f64>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let w = match weights {
        Some(w) => w.clone(),
        None => reduction_weights(tape.shape(out)),
    };
    let total = tape
        .value(out)
        .data()
        .iter()
        .zip(w.data())
        .map(|(a, b)| a * b)
        .sum();
    Ok((total, w))
}

fn check_elements<F>(
    op_name: &str,
    op: &F,
    inputs: &[Tensor<f64>],
    elements: &[(usize, usize)],
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let weights = reduction_weights(tape.shape(out));
    let weighted = tape.mul_const(out, &weights)?;
    let loss = tape.sum_all(weighted);
    tape.backward(loss);

    let mut per_input = vec![0.0f64; inputs.len()];
    let mut failure = None;
    let mut retried = 0;
    let mut perturbed = inputs.to_vec();
    for &(i, e) in elements {
        let analytic = tape.grad(vars[i]).map(|g| g.data()[e]).unwrap_or(0.0);
        let orig = inputs[i].data()[e];
        let mut central = |h: f64| -> Result<f64> {
            perturbed[i].data_mut()[e] = orig + h;
            let (plus, _) = reduced(op, &perturbed, Some(&weights))?;
            perturbed[i].data_mut()[e] = orig - h;
            let (minus, _) = reduced(op, &perturbed, Some(&weights))?;
            perturbed[i].data_mut()[e] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        let mut numeric = central(STEP)?;
        if analytic.is_finite() && numeric.is_finite() && rel_error(analytic, numeric) >= tol {
            for h in RETRY_STEPS {
                let n = central(h)?;
                if n.is_finite() && rel_error(analytic, n) < tol {
                    numeric = n;
                    retried += 1;
                    break;
                }
            }
        }
        if !analytic.is_finite() || !numeric.is_finite() {
            failure.get_or_insert_with(|| {
                format!("non-finite gradient at input {i}, element {e}: analytic {analytic}, numeric {numeric}")
            });
            per_input[i] = f64::INFINITY;
            continue;
        }
        let err = rel_error(analytic, numeric);
        if err > per_input[i] {
            per_input[i] = err;
        }
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error,
        per_input_errors: per_input,
        passed: failure.is_none() && max_rel_error < tol,
        failure,
        retried,
    })
}
