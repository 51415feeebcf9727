//! Central finite differences for checking backward rules.

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `‖a - b‖ / max(‖a‖, ‖b‖, floor)`.
///
/// The floor keeps vanishing gradients from turning rounding noise into a
/// large ratio.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Largest relative error over all parameters between the tape gradient of
/// the scalar built by `build` and central differences.
pub fn check_tape<F>(store: &ParamStore, build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = build(&mut tape, s)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut work = store.clone();
    for id in store.ids() {
        let x = store.value(id).data().to_vec();
        let mut failure = None;
        let numeric = central_difference(
            |probe| {
                work.value_mut(id).data_mut().copy_from_slice(probe);
                match eval(&work) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &x,
            h,
        );
        work.value_mut(id).data_mut().copy_from_slice(&x);
        if let Some(e) = failure {
            return Err(e);
        }
        let analytic = match grads.get(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; x.len()],
        };
        let err = relative_error(&analytic, &numeric, 1e-8);
        if !err.is_finite() {
            return Err(Error::non_finite(format!("gradient check of {}", store.name(id))));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
