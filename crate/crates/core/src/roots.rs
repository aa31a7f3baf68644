//! Bracketed scalar root finding for monotone equations.
//!
//! Every nested equation the solver touches is strictly monotone in one
//! variable, so a geometric bracket search followed by Brent's method is
//! globally convergent.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct RootOptions {
    pub xtol_abs: f64,
    pub xtol_rel: f64,
    pub max_iter: usize,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self { xtol_abs: 1e-14, xtol_rel: 1e-14, max_iter: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotone {
    Increasing,
    Decreasing,
}

/// Search interval limits and initial step for [`bracket`].
#[derive(Debug, Clone, Copy)]
pub struct Search {
    pub start: f64,
    pub step: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Bracket {
    pub lo: f64,
    pub f_lo: f64,
    pub hi: f64,
    pub f_hi: f64,
    pub evaluations: usize,
}

/// Grows a bracket geometrically from `search.start` until `f` changes sign.
///
/// Returns a degenerate bracket (`lo == hi`) when `f` vanishes exactly at a
/// probe point.
pub fn bracket<F>(mut f: F, dir: Monotone, search: Search, what: &str) -> Result<Bracket>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut x = search.start.clamp(search.lower, search.upper);
    let mut fx = f(x)?;
    let mut evaluations = 1;
    if fx == 0.0 {
        return Ok(Bracket { lo: x, f_lo: fx, hi: x, f_hi: fx, evaluations });
    }
    if fx.is_nan() {
        return Err(Error::Bracket(format!("{what}: NaN at start {x}")));
    }
    // root lies to the right when an increasing f is negative, or a decreasing f positive
    let go_right = (fx < 0.0) == (dir == Monotone::Increasing);
    let mut step = search.step.abs().max(f64::MIN_POSITIVE);
    loop {
        let next = if go_right { (x + step).min(search.upper) } else { (x - step).max(search.lower) };
        if next == x {
            return Err(Error::Bracket(format!("{what}: reached search limit {x} with f = {fx}")));
        }
        let fnext = f(next)?;
        evaluations += 1;
        if fnext.is_nan() {
            return Err(Error::Bracket(format!("{what}: NaN at {next}")));
        }
        if fnext == 0.0 || fnext.signum() != fx.signum() {
            let (lo, f_lo, hi, f_hi) = if go_right { (x, fx, next, fnext) } else { (next, fnext, x, fx) };
            return Ok(Bracket { lo, f_lo, hi, f_hi, evaluations });
        }
        x = next;
        fx = fnext;
        step *= 2.0;
    }
}

/// Brent's method on a sign-changing bracket. Returns the root and the
/// number of function evaluations used.
pub fn brent<F>(mut f: F, br: Bracket, opts: &RootOptions, what: &'static str) -> Result<(f64, usize)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut a, mut fa, mut b, mut fb) = (br.lo, br.f_lo, br.hi, br.f_hi);
    if fa == 0.0 {
        return Ok((a, 0));
    }
    if fb == 0.0 {
        return Ok((b, 0));
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Bracket(what.to_string()));
    }
    let mut c = b;
    let mut fc = fb;
    let mut d = b - a;
    let mut e = d;
    for iter in 0..opts.max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * (opts.xtol_abs + opts.xtol_rel * b.abs());
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Ok((b, iter));
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b)?;
        if fb.is_nan() {
            return Err(Error::Domain(format!("{what}: NaN during root search at {b}")));
        }
    }
    Err(Error::Convergence { what, iterations: opts.max_iter })
}

/// Bracket then polish. The total evaluation count is returned alongside
/// the root.
pub fn solve_monotone<F>(
    mut f: F,
    dir: Monotone,
    search: Search,
    opts: &RootOptions,
    what: &'static str,
) -> Result<(f64, usize)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let br = bracket(&mut f, dir, search, what)?;
    if br.lo == br.hi {
        return Ok((br.lo, br.evaluations));
    }
    let (x, n) = brent(&mut f, br, opts, what)?;
    Ok((x, n + br.evaluations))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn search(start: f64) -> Search {
        Search { start, step: 1.0, lower: -1e6, upper: 1e6 }
    }

    #[test]
    fn finds_cube_root() {
        let (x, _) =
            solve_monotone(|x| Ok(x * x * x - 2.0), Monotone::Increasing, search(0.0), &RootOptions::default(), "cube")
                .unwrap();
        assert!((x - 2f64.cbrt()).abs() < 1e-14);
    }

    #[test]
    fn decreasing_function_bracketed_to_the_left() {
        let (x, _) =
            solve_monotone(|x| Ok((-x).exp() - 1e4), Monotone::Decreasing, search(3.0), &RootOptions::default(), "exp")
                .unwrap();
        assert!((x + 1e4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bracket_fails_at_limit() {
        let err = bracket(
            |x: f64| Ok(x.atan() + 3.0),
            Monotone::Increasing,
            Search { start: 0.0, step: 1.0, lower: -50.0, upper: 50.0 },
            "atan",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Bracket(_)));
    }

    #[test]
    fn exact_zero_at_start() {
        let (x, n) =
            solve_monotone(|x| Ok(x - 1.5), Monotone::Increasing, search(1.5), &RootOptions::default(), "lin").unwrap();
        assert_eq!(x, 1.5);
        assert_eq!(n, 1);
    }

    #[test]
    fn errors_propagate_from_inner_function() {
        let err = solve_monotone(
            |_| Err(Error::Domain("inner".into())),
            Monotone::Increasing,
            search(0.0),
            &RootOptions::default(),
            "fail",
        )
        .unwrap_err();
        assert_eq!(err, Error::Domain("inner".into()));
    }
}
