//! Central finite-difference verification of analytic gradients.
//!
//! The checked function maps leaf tensors to any-shape output; it is reduced
//! to a scalar through a fixed random projection so every output element
//! contributes. Only forward evaluations are used for the numerical side.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward against central differences with step `h`.
/// `f` must build the same graph every time it is called.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], proj: Option<&Tensor<f64>>| -> Result<(Tape<f64>, Vec<Var>, Var, Tensor<f64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let out_value = tape.value(out).clone();
        let proj = match proj {
            Some(p) => p.clone(),
            None => out_value.clone(),
        };
        let w = tape.constant(proj);
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        Ok((tape, vars, loss, out_value))
    };

    // Shape discovery pass, then the random projection.
    let (_, _, _, probe) = eval(inputs, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = Tensor::from_fn(probe.shape(), |_| rng.random_range(-1.0..1.0));

    let (tape, vars, loss, _) = eval(inputs, Some(&proj))?;
    let grads = tape.backward(loss)?;

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].len()];
        let analytic = grads.get(v).unwrap_or(&zeros).to_vec();
        for i in 0..inputs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let (t1, _, l1, _) = eval(&xs, Some(&proj))?;
            xs[k].data_mut()[i] = orig - h;
            let (t2, _, l2, _) = eval(&xs, Some(&proj))?;
            xs[k].data_mut()[i] = orig;
            let numeric = (t1.scalar(l1) - t2.scalar(l2)) / (2.0 * h);
            max_rel_err = max_rel_err.max(rel_err(analytic[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, checked })
}
