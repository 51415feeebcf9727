//! Records a small computation on the tape and compares its backward pass
//! with central finite differences.

use hyciss::autograd::{Activation, ParamStore, Tape};
use hyciss::geometry::{expmap0, mobius_add, Curvature, TangentVector};
use hyciss::gradcheck::{central_difference, check_tape, relative_error, STEP};
use hyciss::tensor::Tensor;

fn main() -> hyciss::Result<()> {
    let c = Curvature::new(1.0)?;

    // first coordinate of expmap0(a) ⊕ expmap0(b), as a plain function
    let f = |v: &[f64]| {
        let a = expmap0(&TangentVector::new(v[..2].to_vec()).unwrap(), c);
        let b = expmap0(&TangentVector::new(v[2..].to_vec()).unwrap(), c);
        mobius_add(&a, &b, c).unwrap().coords()[0]
    };
    let at = [0.3, -0.1, 0.2, 0.4];
    let g = central_difference(f, &at, STEP);
    println!("numeric gradient {g:.6?}");

    let mut store = ParamStore::new();
    let w = store.insert("w", Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 0.3, 0.8, 0.1, -0.6])?);
    let worst = check_tape(
        &store,
        |tape: &mut Tape, s: &ParamStore| {
            let v = tape.param(s, w);
            let t = tape.activation(v, Activation::Tanh);
            let y = tape.sigmoid(t);
            Ok(tape.sum(y))
        },
        STEP,
    )?;
    println!("tape vs finite differences on sum(sigmoid(tanh(w))): relative error {worst:.2e}");
    println!("relative_error([1, 0], [1, 1e-6]) = {:.2e}", relative_error(&[1.0, 0.0], &[1.0, 1e-6], 1e-8));
    Ok(())
}
