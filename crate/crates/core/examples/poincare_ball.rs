//! Möbius arithmetic, the exponential and logarithmic maps at the origin, and
//! signed hyperplane logits on the Poincaré ball.

use hyciss::geometry::{
    expmap0, hyperplane_logit, logmap0, mobius_add, project, BallPoint, Curvature, Gyroplane, TangentVector,
};

fn main() -> hyciss::Result<()> {
    let c = Curvature::new(3.0)?;
    println!("curvature {} max norm {:.6}", c.value(), c.max_norm());

    let x = BallPoint::new(vec![0.1, 0.2], c)?;
    let y = BallPoint::new(vec![-0.3, 0.05], c)?;
    let sum = mobius_add(&x, &y, c)?;
    let back = mobius_add(&x.neg(), &sum, c)?;
    println!("x ⊕ y = {:?}", sum.coords());
    println!("(-x) ⊕ (x ⊕ y) = {:?} (recovers y)", back.coords());

    let v = TangentVector::new(vec![0.4, -0.2])?;
    let p = expmap0(&v, c);
    println!("expmap0({:?}) = {:?}, logmap0 back = {:?}", v.coords(), p.coords(), logmap0(&p, c)?.coords());

    // far-away tangent vectors saturate just inside the boundary
    let far = expmap0(&TangentVector::new(vec![50.0, 0.0])?, c);
    println!("expmap0 of a huge vector has norm {:.6}", far.coords()[0]);
    println!("projection of (1, 1): {:?}", project(&[1.0, 1.0], c).coords());

    let plane = Gyroplane { offset: BallPoint::new(vec![0.1, 0.0], c)?, orientation: TangentVector::new(vec![1.0, 0.0])? };
    for px in [-0.3, 0.0, 0.1, 0.3, 0.5] {
        let z = BallPoint::new(vec![px, 0.0], c)?;
        println!("logit at x = ({px:+.1}, 0): {:+.5}", hyperplane_logit(&z, &plane, c)?);
    }
    Ok(())
}
