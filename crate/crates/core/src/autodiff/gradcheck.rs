use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Result of comparing tape gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Norm-wise relative error per input tensor.
    pub per_input: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks `d f / d inputs` from the tape against central differences with the
/// given step. `f` must build a scalar on the tape from the input leaves.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut params: Vec<Tensor> = inputs.to_vec();
    params.iter_mut().for_each(|t| t.set_requires_grad(true));

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("gradient check needs a scalar output"));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&params)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut numeric = Vec::with_capacity(params.len());
    let mut work = params.clone();
    for ti in 0..params.len() {
        let mut g = vec![0.0; params[ti].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = params[ti].data()[j];
            work[ti].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[ti].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * step);
        }
        numeric.push(g);
    }

    let per_input = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(GradCheck {
        per_input,
        analytic,
        numeric,
    })
}
