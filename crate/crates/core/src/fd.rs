//! Finite-difference stencils over phase-space points.

use nalgebra::DVector;

use crate::error::Result;
use crate::expr::Bindings;
use crate::scalar::Real;

/// Fourth-order central derivative of `f` along `dir` at `pt`, step `h`
/// measured along the unit direction. `None` when `dir` vanishes.
pub fn directional4<T: Real>(
    f: &mut dyn FnMut(&Bindings<T>) -> Result<DVector<T>>,
    pt: &Bindings<T>,
    dir: &DVector<T>,
    h: T,
) -> Result<Option<DVector<T>>> {
    let n = dir.norm();
    if n == T::zero() {
        return Ok(None);
    }
    let unit = dir / n;
    let two = T::lit(2.0);
    let fp2 = f(&pt.shifted(&unit, two * h))?;
    let fp1 = f(&pt.shifted(&unit, h))?;
    let fm1 = f(&pt.shifted(&unit, -h))?;
    let fm2 = f(&pt.shifted(&unit, -two * h))?;
    let d = (fm2 - fp2 + (fp1 - fm1) * T::lit(8.0)) / (T::lit(12.0) * h);
    Ok(Some(d * n))
}

/// Second-order central derivative of `f` along `dir` (unnormalized step).
pub fn directional2<T: Real>(
    f: &mut dyn FnMut(&Bindings<T>) -> Result<DVector<T>>,
    pt: &Bindings<T>,
    dir: &DVector<T>,
    h: T,
) -> Result<DVector<T>> {
    let fp = f(&pt.shifted(dir, h))?;
    let fm = f(&pt.shifted(dir, -h))?;
    Ok((fp - fm) / (T::lit(2.0) * h))
}

/// Columns of the Jacobian of `f` along the 2D coordinate directions.
pub fn jacobian4<T: Real>(
    f: &mut dyn FnMut(&Bindings<T>) -> Result<DVector<T>>,
    pt: &Bindings<T>,
    h: T,
    rows: usize,
) -> Result<nalgebra::DMatrix<T>> {
    let n = 2 * pt.dim();
    let mut jac = nalgebra::DMatrix::zeros(rows, n);
    for j in 0..n {
        let e = DVector::from_fn(n, |i, _| if i == j { T::one() } else { T::zero() });
        if let Some(col) = directional4(f, pt, &e, h)? {
            jac.set_column(j, &col);
        }
    }
    Ok(jac)
}
