use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use super::NumericsError;

/// Central-difference estimate of `df/dx` for every coordinate of every
/// parameter tensor.
pub fn central_difference<T, F>(f: &F, params: &[Tensor<T>], step: f64) -> Result<Vec<Vec<f64>>, NumericsError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, NumericsError>,
{
    let mut out = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for p in 0..params.len() {
        let mut col = Vec::with_capacity(params[p].numel());
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = T::from_f64(orig.as_f64() + step);
            let plus = evaluate(f, &work, false)?;
            work[p].data_mut()[i] = T::from_f64(orig.as_f64() - step);
            let minus = evaluate(f, &work, false)?;
            work[p].data_mut()[i] = orig;
            col.push((plus - minus) / (2.0 * step));
        }
        out.push(col);
    }
    Ok(out)
}

fn evaluate<T, F>(f: &F, params: &[Tensor<T>], grad: bool) -> Result<f64, NumericsError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_requires_grad(grad)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item().as_f64())
}

/// Maximum over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` is evaluated twice at `params` first; differing results are reported
/// as [`NumericsError::NonDeterministic`].
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], step: f64) -> Result<f64, NumericsError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, NumericsError>,
{
    if !(step > 0.0 && step <= 0.1) {
        return Err(NumericsError::BadStep(step));
    }
    let first = evaluate(&f, params, false)?;
    let second = evaluate(&f, params, false)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let numeric = central_difference(&f, params, step)?;
    let analytic: Vec<Vec<f64>> = if tape.requires_grad(loss) {
        let grads = tape.backward(loss)?;
        vars.iter()
            .map(|&v| grads.get(v).unwrap().data().iter().map(|g| g.as_f64()).collect())
            .collect()
    } else {
        // f does not depend on its parameters at all.
        params.iter().map(|p| vec![0.0; p.numel()]).collect()
    };

    let mut worst = 0.0f64;
    for (a_col, n_col) in analytic.iter().zip(&numeric) {
        for (&a, &n) in a_col.iter().zip(n_col) {
            let err = (a - n).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
