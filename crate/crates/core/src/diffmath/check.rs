use crate::error::{LabError, Result};

/// Largest relative error between `analytic` and central differences of `f`
/// over every coordinate of `point`.
///
/// Relative error per coordinate is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_check<F>(f: F, analytic: &[f64], point: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_diff_check_coords(f, analytic, point, eps, &coords, Stencil::Central)
}

/// Difference formula used to estimate each partial derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h^2).
    Central,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, truncation error
    /// O(h^4). Allows a larger `h`, which keeps loss roundoff from dominating
    /// coordinates with very small gradients.
    FivePoint,
}

/// Same as [`finite_diff_check`] restricted to a subset of coordinates, for
/// functions too expensive to probe in every direction.
pub fn finite_diff_check_coords<F>(
    mut f: F,
    analytic: &[f64],
    point: &[f64],
    eps: f64,
    coords: &[usize],
    stencil: Stencil,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(LabError::Shape {
            op: "finite_diff_check",
            lhs: (analytic.len(), 1),
            rhs: (point.len(), 1),
        });
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = x[i];
        let mut diff = |h: f64| -> Result<f64> {
            x[i] = orig + h;
            let fp = f(&x);
            x[i] = orig - h;
            let fm = f(&x);
            x[i] = orig;
            for v in [fp, fm] {
                if !v.is_finite() {
                    return Err(LabError::NonFinite { coord: i, value: v });
                }
            }
            Ok(fp - fm)
        };
        let numeric = match stencil {
            Stencil::Central => diff(eps)? / (2.0 * eps),
            Stencil::FivePoint => (8.0 * diff(eps)? - diff(2.0 * eps)?) / (12.0 * eps),
        };
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = [0.3, -1.2, 2.5];
        let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_check(|x| x.iter().map(|v| v * v).sum(), &g, &p, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        // central differences leave an h^2 term from the cubic; five points cancel it
        let p = [0.7f64, -1.3];
        let f = |x: &[f64]| x.iter().map(|v| v.powi(3) + v.powi(4)).sum::<f64>();
        let g: Vec<f64> = p.iter().map(|v| 3.0 * v * v + 4.0 * v.powi(3)).collect();
        let central = finite_diff_check_coords(f, &g, &p, 1e-2, &[0, 1], Stencil::Central).unwrap();
        let five = finite_diff_check_coords(f, &g, &p, 1e-2, &[0, 1], Stencil::FivePoint).unwrap();
        assert!(central > 1e-5, "{central}");
        assert!(five < 1e-12, "{five}");
    }

    #[test]
    fn zero_function() {
        let err = finite_diff_check(|_| 0.0, &[0.0, 0.0], &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let f = |x: &[f64]| if x[1] > 1.0 { f64::NAN } else { 0.0 };
        match finite_diff_check(f, &[0.0, 0.0], &[0.0, 1.0], 1e-3) {
            Err(LabError::NonFinite { coord, .. }) => assert_eq!(coord, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
