//! Poincaré-ball primitives with closed-form vector–Jacobian products.
//!
//! The ball of curvature `-c` is the open set `{x : c‖x‖² < 1}`. Every
//! operation here comes in two flavours: a typed API over [`BallPoint`] /
//! [`TangentVector`], and slice kernels (`*_into`, `*_vjp`) used by the
//! autodiff tape and the classification head where allocation matters.
//!
//! All points leaving an operation are clamped to radius `(1 - 1e-5)/√c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative margin kept between projected points and the ball boundary.
pub const BOUNDARY_EPS: f64 = 1e-5;
/// Norms below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;
/// Denominators below this magnitude are reported as [`Error::NonFinite`].
pub const MIN_DENOMINATOR: f64 = 1e-12;

/// Magnitude `c > 0` of the ball's constant negative curvature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Self(c))
        } else {
            Err(Error::InvalidCurvature(c))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Largest norm a projected point may have.
    pub fn max_norm(self) -> f64 {
        (1.0 - BOUNDARY_EPS) / self.sqrt()
    }
}

impl TryFrom<f64> for Curvature {
    type Error = Error;
    fn try_from(c: f64) -> Result<Self> {
        Curvature::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

/// A point strictly inside the ball.
#[derive(Clone, Debug, PartialEq)]
pub struct BallPoint(Vec<f64>);

impl BallPoint {
    /// Wraps `coords`, rejecting points on or outside the boundary.
    pub fn new(coords: Vec<f64>, c: Curvature) -> Result<Self> {
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("ball point coordinates"));
        }
        if c.value() * norm_sq(&coords) >= 1.0 {
            return Err(Error::non_finite("point outside the Poincaré ball"));
        }
        Ok(Self(coords))
    }

    pub fn origin(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    /// Gyro-inverse `-x`.
    pub fn neg(&self) -> Self {
        Self(self.0.iter().map(|v| -v).collect())
    }
}

/// A tangent vector (at the origin unless stated otherwise).
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("tangent vector"));
        }
        Ok(Self(coords))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }
}

/// Decision boundary in the ball: the set of `x` with `⟨(-offset) ⊕ x, orientation⟩ = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gyroplane {
    pub offset: BallPoint,
    pub orientation: TangentVector,
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

// ---------------------------------------------------------------------------
// projection

/// Clamps `x` in place to radius `(1-ε)/√c`. Idempotent bit for bit.
pub fn project_in_place(x: &mut [f64], c: Curvature) {
    let max = c.max_norm();
    let n = norm_sq(x).sqrt();
    if n > max {
        let scale = max / n;
        x.iter_mut().for_each(|v| *v *= scale);
        // rounding can leave the norm a few ulps above the radius
        while norm_sq(x).sqrt() > max {
            x.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
        }
    }
}

pub fn project(x: &[f64], c: Curvature) -> BallPoint {
    let mut out = x.to_vec();
    project_in_place(&mut out, c);
    BallPoint(out)
}

/// Gradient of the projection with respect to its raw input, accumulated into `gx`.
pub fn project_vjp(raw: &[f64], g: &[f64], c: Curvature, gx: &mut [f64]) {
    let max = c.max_norm();
    let n = norm_sq(raw).sqrt();
    if n > max {
        let k = max / n;
        let radial = dot(raw, g) / (n * n);
        for i in 0..raw.len() {
            gx[i] += k * (g[i] - radial * raw[i]);
        }
    } else {
        for i in 0..raw.len() {
            gx[i] += g[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Möbius addition

struct MobiusTerms {
    x2: f64,
    y2: f64,
    a: f64,
    b: f64,
    d: f64,
}

fn mobius_terms(x: &[f64], y: &[f64], c: f64) -> Result<MobiusTerms> {
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let d = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    if !(d.abs() >= MIN_DENOMINATOR) {
        return Err(Error::non_finite("Möbius addition denominator"));
    }
    Ok(MobiusTerms { x2, y2, a, b, d })
}

/// Unprojected Möbius sum written into `out`.
fn mobius_add_raw(x: &[f64], y: &[f64], c: f64, out: &mut [f64]) -> Result<()> {
    let t = mobius_terms(x, y, c)?;
    for i in 0..x.len() {
        out[i] = (t.a * x[i] + t.b * y[i]) / t.d;
    }
    Ok(())
}

/// `x ⊕ y`, projected into the ball.
pub fn mobius_add_into(x: &[f64], y: &[f64], c: Curvature, out: &mut [f64]) -> Result<()> {
    mobius_add_raw(x, y, c.value(), out)?;
    project_in_place(out, c);
    Ok(())
}

pub fn mobius_add(x: &BallPoint, y: &BallPoint, c: Curvature) -> Result<BallPoint> {
    let mut out = vec![0.0; x.dim()];
    mobius_add_into(&x.0, &y.0, c, &mut out)?;
    Ok(BallPoint(out))
}

/// Accumulates `∂⟨g, x⊕y⟩/∂x` into `gx` and `∂/∂y` into `gy`.
pub fn mobius_add_vjp(
    x: &[f64],
    y: &[f64],
    c: Curvature,
    g: &[f64],
    gx: &mut [f64],
    gy: &mut [f64],
) -> Result<()> {
    let cv = c.value();
    let n = x.len();
    let t = mobius_terms(x, y, cv)?;
    let mut raw = vec![0.0; n];
    for i in 0..n {
        raw[i] = (t.a * x[i] + t.b * y[i]) / t.d;
    }
    let mut graw = vec![0.0; n];
    project_vjp(&raw, g, c, &mut graw);
    mobius_raw_vjp(x, y, cv, &t, &raw, &graw, gx, gy);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn mobius_raw_vjp(
    x: &[f64],
    y: &[f64],
    c: f64,
    t: &MobiusTerms,
    raw: &[f64],
    g: &[f64],
    gx: &mut [f64],
    gy: &mut [f64],
) {
    let inv_d = 1.0 / t.d;
    let g_a = dot(g, x) * inv_d;
    let g_b = dot(g, y) * inv_d;
    let g_d = -dot(g, raw) * inv_d;
    for i in 0..x.len() {
        gx[i] += t.a * g[i] * inv_d
            + g_a * 2.0 * c * y[i]
            - g_b * 2.0 * c * x[i]
            + g_d * (2.0 * c * y[i] + 2.0 * c * c * t.y2 * x[i]);
        gy[i] += t.b * g[i] * inv_d
            + g_a * (2.0 * c * x[i] + 2.0 * c * y[i])
            + g_d * (2.0 * c * x[i] + 2.0 * c * c * t.x2 * y[i]);
    }
}

// ---------------------------------------------------------------------------
// exponential / logarithmic maps at the origin

/// `tanh(√c‖v‖) v / (√c‖v‖)`, projected; zero for `‖v‖ < 1e-12`.
pub fn expmap0_into(v: &[f64], c: Curvature, out: &mut [f64]) {
    let n = norm_sq(v).sqrt();
    if n < MIN_NORM {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let sn = c.sqrt() * n;
    let f = sn.tanh() / sn;
    for i in 0..v.len() {
        out[i] = f * v[i];
    }
    project_in_place(out, c);
}

pub fn expmap0(v: &TangentVector, c: Curvature) -> BallPoint {
    let mut out = vec![0.0; v.0.len()];
    expmap0_into(&v.0, c, &mut out);
    BallPoint(out)
}

/// Accumulates the gradient of `expmap0` at `v` into `gv`.
pub fn expmap0_vjp(v: &[f64], c: Curvature, g: &[f64], gv: &mut [f64]) {
    let n = norm_sq(v).sqrt();
    if n < MIN_NORM {
        // Jacobian at the origin is the identity
        for i in 0..v.len() {
            gv[i] += g[i];
        }
        return;
    }
    let s = c.sqrt();
    let sn = s * n;
    let th = sn.tanh();
    let f = th / sn;
    let mut raw = vec![0.0; v.len()];
    for i in 0..v.len() {
        raw[i] = f * v[i];
    }
    let mut graw = vec![0.0; v.len()];
    project_vjp(&raw, g, c, &mut graw);
    let sech2 = 1.0 - th * th;
    // d f / d n
    let df = (sn * sech2 - th) / (s * n * n);
    let radial = df * dot(&graw, v) / n;
    for i in 0..v.len() {
        gv[i] += f * graw[i] + radial * v[i];
    }
}

/// `artanh(√c‖x‖) x / (√c‖x‖)`; zero for `‖x‖ < 1e-12`.
pub fn logmap0_into(x: &[f64], c: Curvature, out: &mut [f64]) -> Result<()> {
    let n = norm_sq(x).sqrt();
    if !(c.sqrt() * n < 1.0) {
        return Err(Error::non_finite("logmap0 of a point outside the ball"));
    }
    if n < MIN_NORM {
        out.iter_mut().for_each(|o| *o = 0.0);
        return Ok(());
    }
    let sn = c.sqrt() * n;
    let f = sn.atanh() / sn;
    for i in 0..x.len() {
        out[i] = f * x[i];
    }
    Ok(())
}

pub fn logmap0(x: &BallPoint, c: Curvature) -> Result<TangentVector> {
    let mut out = vec![0.0; x.dim()];
    logmap0_into(&x.0, c, &mut out)?;
    Ok(TangentVector(out))
}

pub fn logmap0_vjp(x: &[f64], c: Curvature, g: &[f64], gx: &mut [f64]) -> Result<()> {
    let n = norm_sq(x).sqrt();
    let s = c.sqrt();
    let sn = s * n;
    if !(sn < 1.0) {
        return Err(Error::non_finite("logmap0 of a point outside the ball"));
    }
    if n < MIN_NORM {
        for i in 0..x.len() {
            gx[i] += g[i];
        }
        return Ok(());
    }
    let at = sn.atanh();
    let f = at / sn;
    let df = (sn / (1.0 - sn * sn) - at) / (s * n * n);
    let radial = df * dot(g, x) / n;
    for i in 0..x.len() {
        gx[i] += f * g[i] + radial * x[i];
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// hyperplane logits

/// Scratch space for [`hyperplane_logit_into`] and its gradient.
#[derive(Clone, Debug)]
pub struct LogitScratch {
    neg_offset: Vec<f64>,
    z: Vec<f64>,
    gz: Vec<f64>,
    g_neg_offset: Vec<f64>,
}

impl LogitScratch {
    pub fn new(dim: usize) -> Self {
        Self {
            neg_offset: vec![0.0; dim],
            z: vec![0.0; dim],
            gz: vec![0.0; dim],
            g_neg_offset: vec![0.0; dim],
        }
    }
}

struct LogitTerms {
    rn: f64,
    gamma: f64,
    q: f64,
}

fn logit_terms(z: &[f64], r: &[f64], c: Curvature) -> Result<LogitTerms> {
    let zr = dot(z, r);
    let z2 = norm_sq(z);
    let rn = norm_sq(r).sqrt();
    if !(rn > MIN_NORM) {
        return Err(Error::non_finite("hyperplane orientation with zero norm"));
    }
    let gamma = 1.0 - c.value() * z2;
    if !(gamma >= MIN_DENOMINATOR) {
        return Err(Error::non_finite("hyperplane logit at the ball boundary"));
    }
    let q = 2.0 * c.sqrt() * zr / (gamma * rn);
    Ok(LogitTerms { rn, gamma, q })
}

/// Signed hyperbolic-regression logit of `x` against the plane `(offset, orientation)`.
pub fn hyperplane_logit_into(
    x: &[f64],
    offset: &[f64],
    orientation: &[f64],
    c: Curvature,
    scratch: &mut LogitScratch,
) -> Result<f64> {
    for (n, o) in scratch.neg_offset.iter_mut().zip(offset) {
        *n = -o;
    }
    mobius_add_into(&scratch.neg_offset, x, c, &mut scratch.z)?;
    let t = logit_terms(&scratch.z, orientation, c)?;
    Ok(2.0 / c.sqrt() * t.rn * t.q.asinh())
}

pub fn hyperplane_logit(x: &BallPoint, plane: &Gyroplane, c: Curvature) -> Result<f64> {
    let mut scratch = LogitScratch::new(x.dim());
    hyperplane_logit_into(&x.0, &plane.offset.0, &plane.orientation.0, c, &mut scratch)
}

/// Accumulates `g · ∂logit` with respect to the point, the offset and the orientation.
#[allow(clippy::too_many_arguments)]
pub fn hyperplane_logit_vjp(
    x: &[f64],
    offset: &[f64],
    orientation: &[f64],
    c: Curvature,
    g: f64,
    gx: &mut [f64],
    goffset: &mut [f64],
    gorientation: &mut [f64],
    scratch: &mut LogitScratch,
) -> Result<()> {
    let n = x.len();
    for (m, o) in scratch.neg_offset.iter_mut().zip(offset) {
        *m = -o;
    }
    mobius_add_into(&scratch.neg_offset, x, c, &mut scratch.z)?;
    let t = logit_terms(&scratch.z, orientation, c)?;
    let s = c.sqrt();
    let dl_dq = 2.0 / s * t.rn / (1.0 + t.q * t.q).sqrt();
    let dq_dzr = 2.0 * s / (t.gamma * t.rn);
    let dq_dz2 = t.q * c.value() / t.gamma;
    let asinh_q = t.q.asinh();
    for i in 0..n {
        let zi = scratch.z[i];
        let ri = orientation[i];
        scratch.gz[i] = g * dl_dq * (dq_dzr * ri + dq_dz2 * 2.0 * zi);
        let r_hat = ri / t.rn;
        gorientation[i] +=
            g * (2.0 / s * asinh_q * r_hat + dl_dq * (dq_dzr * zi - t.q * r_hat / t.rn));
    }
    scratch.g_neg_offset.iter_mut().for_each(|v| *v = 0.0);
    let (neg, gz, gneg) = (&scratch.neg_offset, &scratch.gz, &mut scratch.g_neg_offset);
    mobius_add_vjp(neg, x, c, gz, gneg, gx)?;
    for i in 0..n {
        goffset[i] -= scratch.g_neg_offset[i];
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// batched hyperplane logits
//
// The logit of x against (o, r) depends on x only through <o,x>, |x|^2 and
// <x,r>, so a whole batch reduces to two small matrix products plus scalar
// work per pair.

struct PairTerms {
    a: f64,
    b: f64,
    d: f64,
    n1: f64,
    n2: f64,
    zr_raw: f64,
    z2_raw: f64,
    projected: bool,
    gamma: f64,
    q: f64,
}

fn pair_terms(ux: f64, x2: f64, xr: f64, u2: f64, ur: f64, rn: f64, c: Curvature) -> Result<PairTerms> {
    let cv = c.value();
    let a = 1.0 + 2.0 * cv * ux + cv * x2;
    let b = 1.0 - cv * u2;
    let d = 1.0 + 2.0 * cv * ux + cv * cv * u2 * x2;
    if !(d.abs() >= MIN_DENOMINATOR) {
        return Err(Error::non_finite("Möbius addition denominator"));
    }
    let n1 = a * ur + b * xr;
    let n2 = (a * a * u2 + 2.0 * a * b * ux + b * b * x2).max(0.0);
    let zr_raw = n1 / d;
    let z2_raw = n2 / (d * d);
    let max = c.max_norm();
    let projected = z2_raw.sqrt() > max;
    let (zr, z2) = if projected { (max * zr_raw / z2_raw.sqrt(), max * max) } else { (zr_raw, z2_raw) };
    let gamma = 1.0 - cv * z2;
    if !(gamma >= MIN_DENOMINATOR) {
        return Err(Error::non_finite("hyperplane logit at the ball boundary"));
    }
    let q = 2.0 * c.sqrt() * zr / (gamma * rn);
    Ok(PairTerms { a, b, d, n1, n2, zr_raw, z2_raw, projected, gamma, q })
}

struct PlaneStats {
    u2: Vec<f64>,
    ur: Vec<f64>,
    rn: Vec<f64>,
}

fn plane_stats(o: &[f64], r: &[f64], n: usize) -> Result<PlaneStats> {
    let k = o.len() / n.max(1);
    let mut s = PlaneStats { u2: vec![0.0; k], ur: vec![0.0; k], rn: vec![0.0; k] };
    for j in 0..k {
        let (oj, rj) = (&o[j * n..(j + 1) * n], &r[j * n..(j + 1) * n]);
        s.u2[j] = norm_sq(oj);
        s.ur[j] = -dot(oj, rj);
        s.rn[j] = norm_sq(rj).sqrt();
        if !(s.rn[j] > MIN_NORM) {
            return Err(Error::non_finite("hyperplane orientation with zero norm"));
        }
    }
    Ok(s)
}

/// Logits of `P` points (row-major `P×n`) against `K` planes, as a row-major `P×K` matrix.
pub fn hyperplane_logits_batch(x: &[f64], o: &[f64], r: &[f64], n: usize, c: Curvature) -> Result<Vec<f64>> {
    let p = x.len() / n.max(1);
    let k = o.len() / n.max(1);
    let s = plane_stats(o, r, n)?;
    let scale = 2.0 / c.sqrt();
    let mut out = vec![0.0; p * k];
    for i in 0..p {
        let xi = &x[i * n..(i + 1) * n];
        let x2 = norm_sq(xi);
        for j in 0..k {
            let ux = -dot(&o[j * n..(j + 1) * n], xi);
            let xr = dot(xi, &r[j * n..(j + 1) * n]);
            let t = pair_terms(ux, x2, xr, s.u2[j], s.ur[j], s.rn[j], c)?;
            out[i * k + j] = scale * s.rn[j] * t.q.asinh();
        }
    }
    Ok(out)
}

/// Accumulates the gradient of `Σ g[i,j]·logit(x_i; o_j, r_j)` into `gx`, `go` and `gr`.
#[allow(clippy::too_many_arguments)]
pub fn hyperplane_logits_batch_vjp(
    x: &[f64],
    o: &[f64],
    r: &[f64],
    n: usize,
    c: Curvature,
    g: &[f64],
    gx: &mut [f64],
    go: &mut [f64],
    gr: &mut [f64],
) -> Result<()> {
    let p = x.len() / n.max(1);
    let k = o.len() / n.max(1);
    let s = plane_stats(o, r, n)?;
    let (cv, sc) = (c.value(), c.sqrt());
    let max = c.max_norm();
    // per-plane scalar sums
    let mut s_u2 = vec![0.0; k];
    let mut s_ur = vec![0.0; k];
    let mut s_rn = vec![0.0; k];
    let mut c_ux = vec![0.0; k];
    let mut c_xr = vec![0.0; k];
    for i in 0..p {
        let xi = &x[i * n..(i + 1) * n];
        let x2 = norm_sq(xi);
        let mut s_x2 = 0.0;
        for j in 0..k {
            let up = g[i * k + j];
            c_ux[j] = 0.0;
            c_xr[j] = 0.0;
            if up == 0.0 {
                continue;
            }
            let (oj, rj) = (&o[j * n..(j + 1) * n], &r[j * n..(j + 1) * n]);
            let ux = -dot(oj, xi);
            let xr = dot(xi, rj);
            let (u2, ur, rn) = (s.u2[j], s.ur[j], s.rn[j]);
            let t = pair_terms(ux, x2, xr, u2, ur, rn, c)?;
            let lq = 2.0 / sc * rn / (1.0 + t.q * t.q).sqrt();
            let g_zr = up * lq * 2.0 * sc / (t.gamma * rn);
            let g_z2 = up * lq * t.q * cv / t.gamma;
            s_rn[j] += up * (2.0 / sc * t.q.asinh() - lq * t.q / rn);
            let (g_zr_raw, g_z2_raw) = if t.projected {
                let norm = t.z2_raw.sqrt();
                (g_zr * max / norm, -0.5 * g_zr * max * t.zr_raw / (norm * t.z2_raw))
            } else {
                (g_zr, g_z2)
            };
            let (a, b, d) = (t.a, t.b, t.d);
            let g_n1 = g_zr_raw / d;
            let g_n2 = g_z2_raw / (d * d);
            let g_d = -g_zr_raw * t.n1 / (d * d) - 2.0 * g_z2_raw * t.n2 / (d * d * d);
            let g_a = g_n1 * ur + g_n2 * (2.0 * a * u2 + 2.0 * b * ux);
            let g_b = g_n1 * xr + g_n2 * (2.0 * a * ux + 2.0 * b * x2);
            let g_ur = g_n1 * a;
            let g_xr = g_n1 * b;
            let g_ux = g_n2 * 2.0 * a * b + 2.0 * cv * g_a + 2.0 * cv * g_d;
            let g_u2 = g_n2 * a * a - cv * g_b + cv * cv * x2 * g_d;
            let g_x2 = g_n2 * b * b + cv * g_a + cv * cv * u2 * g_d;
            s_x2 += g_x2;
            s_u2[j] += g_u2;
            s_ur[j] += g_ur;
            c_ux[j] = -g_ux;
            c_xr[j] = g_xr;
        }
        let gxi = &mut gx[i * n..(i + 1) * n];
        for (m, v) in gxi.iter_mut().enumerate() {
            *v += 2.0 * s_x2 * xi[m];
        }
        for j in 0..k {
            if c_ux[j] == 0.0 && c_xr[j] == 0.0 {
                continue;
            }
            let (oj, rj) = (&o[j * n..(j + 1) * n], &r[j * n..(j + 1) * n]);
            let goj = &mut go[j * n..(j + 1) * n];
            let grj = &mut gr[j * n..(j + 1) * n];
            for m in 0..n {
                gxi[m] += c_ux[j] * oj[m] + c_xr[j] * rj[m];
                goj[m] += c_ux[j] * xi[m];
                grj[m] += c_xr[j] * xi[m];
            }
        }
    }
    for j in 0..k {
        let (oj, rj) = (&o[j * n..(j + 1) * n], &r[j * n..(j + 1) * n]);
        let goj = &mut go[j * n..(j + 1) * n];
        let grj = &mut gr[j * n..(j + 1) * n];
        for m in 0..n {
            goj[m] += 2.0 * s_u2[j] * oj[m] - s_ur[j] * rj[m];
            grj[m] += -s_ur[j] * oj[m] + s_rn[j] / s.rn[j] * rj[m];
        }
    }
    Ok(())
}
