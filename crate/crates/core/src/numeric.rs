//! Adaptive Gauss-Kronrod quadrature, bracketed root finding and a small
//! dense Cholesky factorization.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];

// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

const MAX_INTERVALS: usize = 4000;

/// 15-point Kronrod estimate and its difference to the embedded 7-point
/// Gauss rule.
fn gk15(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Globally adaptive integral of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (value, err) = gk15(&mut f, a, b);
    let mut parts = vec![(a, b, value, err)];
    let (mut total, mut total_err) = (value, err);
    while total_err > tol {
        if parts.len() >= MAX_INTERVALS {
            return Err(Error::Numeric(format!(
                "quadrature did not reach tolerance {tol:e} (error estimate {total_err:e})"
            )));
        }
        let worst = parts.iter().enumerate().max_by(|x, y| x.1 .3.total_cmp(&y.1 .3)).map(|(i, _)| i).unwrap_or(0);
        let (lo, hi, v, e) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if !(mid > lo && mid < hi) {
            return Err(Error::Numeric("quadrature interval cannot be subdivided further".into()));
        }
        let left = gk15(&mut f, lo, mid);
        let right = gk15(&mut f, mid, hi);
        total += left.0 + right.0 - v;
        total_err += left.1 + right.1 - e;
        parts.push((lo, mid, left.0, left.1));
        parts.push((mid, hi, right.0, right.1));
        if !total.is_finite() {
            return Err(Error::Numeric("integrand produced a non-finite value".into()));
        }
    }
    // Re-sum to shed the drift of the running updates.
    Ok(parts.iter().map(|p| p.2).sum())
}

/// Integral of `f` over `[a, inf)` via `x = a + s / (1 - s)`.
pub fn integrate_upper(mut f: impl FnMut(f64) -> f64, a: f64, tol: f64) -> Result<f64> {
    integrate(
        |s| {
            let one_minus = 1.0 - s;
            let x = a + s / one_minus;
            let jac = 1.0 / (one_minus * one_minus);
            let v = f(x) * jac;
            if v.is_finite() {
                v
            } else {
                0.0
            }
        },
        0.0,
        1.0,
        tol,
    )
}

/// Root of a continuous, decreasing `f`, bracketed by stepping away from
/// `start` with doubling steps, then refined by Illinois steps with a
/// bisection safeguard until `|f| <= ftol`.
pub fn solve_decreasing(mut f: impl FnMut(f64) -> Result<f64>, start: f64, ftol: f64) -> Result<f64> {
    let f0 = f(start)?;
    if f0.abs() <= ftol {
        return Ok(start);
    }
    let dir = if f0 > 0.0 { 1.0 } else { -1.0 };
    let (mut a, mut fa) = (start, f0);
    let mut step = start.abs().max(1.0) * 0.5;
    let mut b = start + dir * step;
    let mut fb = f(b)?;
    let mut tries = 0;
    while fb.abs() > ftol && fa.signum() == fb.signum() {
        tries += 1;
        if tries > 80 {
            return Err(Error::Numeric(format!("could not bracket a root starting from {start}")));
        }
        a = b;
        fa = fb;
        step *= 2.0;
        b = a + dir * step;
        fb = f(b)?;
    }
    if fb.abs() <= ftol {
        return Ok(b);
    }
    let (mut lo, mut flo, mut hi, mut fhi) = if a < b { (a, fa, b, fb) } else { (b, fb, a, fa) };
    let mut last_side = 0i8;
    for _ in 0..400 {
        let mut x = (lo * fhi - hi * flo) / (fhi - flo);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let fx = f(x)?;
        if fx.abs() <= ftol || hi - lo <= 4.0 * f64::EPSILON * x.abs().max(1e-300) {
            return Ok(x);
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
            if last_side == -1 {
                fhi *= 0.5;
            }
            last_side = -1;
        } else {
            hi = x;
            fhi = fx;
            if last_side == 1 {
                flo *= 0.5;
            }
            last_side = 1;
        }
    }
    Err(Error::Numeric("root refinement did not converge".into()))
}

/// Lower-triangular `L` with `L L' = a` for a symmetric positive definite
/// row-major `n x n` matrix.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}
