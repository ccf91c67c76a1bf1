//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};

/// Step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Number of coordinates compared.
    pub checked: usize,
    /// Largest relative error seen.
    pub worst: f64,
    /// `(input, flat index, analytic, numeric)` at the worst coordinate.
    pub worst_at: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.worst < tol
    }

    fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.worst || self.worst_at.is_none() {
            self.worst = self.worst.max(err);
            self.worst_at = Some((input, index, analytic, numeric));
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-5)`; the floor keeps vanishing gradients
/// from turning round-off into huge ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for coordinate `index` of `inputs[which]`.
pub fn central_difference(
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    which: usize,
    index: usize,
    h: f64,
) -> Result<f64> {
    let mut xs = inputs.to_vec();
    let base = inputs[which].data()[index];
    let mut at = |v: f64| -> Result<f64> {
        let mut d = inputs[which].to_vec();
        d[index] = v;
        xs[which] = Tensor::new(inputs[which].shape(), d)?;
        f(&xs)
    };
    Ok((at(base + h)? - at(base - h)?) / (2.0 * h))
}

/// Compare the tape gradient of the scalar `f(inputs)` against central
/// differences at up to `samples` random coordinates of every input.
pub fn check_gradients<F>(inputs: &[Tensor], samples: usize, seed: u64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    tape.backward(f(&tape, &vars)?)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    let value = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck { checked: 0, worst: 0.0, worst_at: None };
    for (which, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let numeric = central_difference(&value, inputs, which, i, FD_STEP)?;
            report.record(which, i, grads[which].data()[i], numeric);
        }
    }
    Ok(report)
}
