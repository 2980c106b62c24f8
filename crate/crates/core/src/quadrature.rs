//! Gauss quadrature on the reference triangle `{x, y >= 0, x + y <= 1}`
//! and on the unit interval `[0, 1]`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unsupported quadrature degree {degree}; supported range is {min}..={max}")]
pub struct UnsupportedDegree {
    pub degree: usize,
    pub min: usize,
    pub max: usize,
}

pub const MAX_TRIANGLE_DEGREE: usize = 12;
pub const MAX_INTERVAL_DEGREE: usize = 41;

/// Points and positive weights integrating polynomials up to `degree`
/// exactly on a `D`-dimensional reference cell.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<const D: usize> {
    pub points: Vec<[f64; D]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

pub type TriangleRule = QuadratureRule<2>;
pub type IntervalRule = QuadratureRule<1>;

impl<const D: usize> QuadratureRule<D> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64; D], f64)> {
        self.points.iter().zip(self.weights.iter().copied())
    }
}

/// Volumetric rule degree used for polynomial order `k`.
pub fn default_degree(k: usize) -> usize {
    2 * k + 4
}

pub fn triangle_rule(degree: usize) -> Result<TriangleRule, UnsupportedDegree> {
    if degree == 0 || degree > MAX_TRIANGLE_DEGREE {
        return Err(UnsupportedDegree { degree, min: 1, max: MAX_TRIANGLE_DEGREE });
    }
    let (points, weights) = match degree {
        1 => (vec![[1.0 / 3.0, 1.0 / 3.0]], vec![0.5]),
        2 => (
            vec![[1.0 / 6.0, 1.0 / 6.0], [2.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 2.0 / 3.0]],
            vec![1.0 / 6.0; 3],
        ),
        3..=5 => radon7(),
        _ => collapsed(degree),
    };
    Ok(QuadratureRule { points, weights, degree })
}

/// Gauss-Legendre rule on `[0, 1]`.
pub fn interval_rule(degree: usize) -> Result<IntervalRule, UnsupportedDegree> {
    if degree == 0 || degree > MAX_INTERVAL_DEGREE {
        return Err(UnsupportedDegree { degree, min: 1, max: MAX_INTERVAL_DEGREE });
    }
    let n = degree / 2 + 1;
    let (x, w) = gauss_legendre(n);
    Ok(QuadratureRule {
        points: x.iter().map(|&xi| [0.5 * (xi + 1.0)]).collect(),
        weights: w.iter().map(|wi| 0.5 * wi).collect(),
        degree,
    })
}

// Seven-point symmetric rule, exact to degree 5.
fn radon7() -> (Vec<[f64; 2]>, Vec<f64>) {
    let s15 = 15f64.sqrt();
    let a1 = (6.0 - s15) / 21.0;
    let a2 = (6.0 + s15) / 21.0;
    let w1 = (155.0 - s15) / 2400.0;
    let w2 = (155.0 + s15) / 2400.0;
    let points = vec![
        [1.0 / 3.0, 1.0 / 3.0],
        [a1, a1],
        [1.0 - 2.0 * a1, a1],
        [a1, 1.0 - 2.0 * a1],
        [a2, a2],
        [1.0 - 2.0 * a2, a2],
        [a2, 1.0 - 2.0 * a2],
    ];
    let weights = vec![9.0 / 80.0, w1, w1, w1, w2, w2, w2];
    (points, weights)
}

// Collapsed tensor-product Gauss rule: (s, t) in [0,1]^2 maps to
// (s, t (1 - s)) with Jacobian (1 - s).
fn collapsed(degree: usize) -> (Vec<[f64; 2]>, Vec<f64>) {
    let n = (degree + 2).div_ceil(2);
    let (x, w) = gauss_legendre(n);
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for i in 0..n {
        let s = 0.5 * (x[i] + 1.0);
        for j in 0..n {
            let t = 0.5 * (x[j] + 1.0);
            points.push([s, t * (1.0 - s)]);
            weights.push(0.25 * w[i] * w[j] * (1.0 - s));
        }
    }
    (points, weights)
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        dp = if d != 0.0 { d } else { dp };
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, z);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    // int_T x^a y^b = a! b! / (a + b + 2)!
    fn simplex_moment(a: u32, b: u32) -> f64 {
        factorial(a) * factorial(b) / factorial(a + b + 2)
    }

    fn integrate(rule: &TriangleRule, a: i32, b: i32) -> f64 {
        rule.iter().map(|(p, w)| w * p[0].powi(a) * p[1].powi(b)).sum()
    }

    #[test]
    fn centroid_rule() {
        let r = triangle_rule(1).unwrap();
        assert_eq!(r.points, vec![[1.0 / 3.0, 1.0 / 3.0]]);
        assert_eq!(r.weights, vec![0.5]);
    }

    #[test]
    fn analytic_moments() {
        for d in 2..=MAX_TRIANGLE_DEGREE {
            let r = triangle_rule(d).unwrap();
            assert!((integrate(&r, 1, 1) - 1.0 / 24.0).abs() < 1e-15);
        }
        for d in 5..=MAX_TRIANGLE_DEGREE {
            let r = triangle_rule(d).unwrap();
            assert!((integrate(&r, 2, 3) - 1.0 / 420.0).abs() < 1e-15);
        }
    }

    #[test]
    fn triangle_exactness_sweep() {
        for d in 1..=MAX_TRIANGLE_DEGREE {
            let r = triangle_rule(d).unwrap();
            assert!(r.weights.iter().all(|&w| w > 0.0));
            assert!((r.weights.iter().sum::<f64>() - 0.5).abs() < 1e-15);
            for p in r.points.iter() {
                assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-15);
            }
            for a in 0..=d as u32 {
                for b in 0..=(d as u32 - a) {
                    let exact = simplex_moment(a, b);
                    let got = integrate(&r, a as i32, b as i32);
                    assert!((got - exact).abs() < 1e-14, "degree {d}, x^{a} y^{b}: {got} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn interval_rules() {
        let mid = interval_rule(1).unwrap();
        assert_eq!(mid.points, vec![[0.5]]);
        assert_eq!(mid.weights, vec![1.0]);
        let two = interval_rule(3).unwrap();
        assert_eq!(two.len(), 2);
        let i3: f64 = two.iter().map(|(p, w)| w * p[0].powi(3)).sum();
        assert!((i3 - 0.25).abs() < 1e-15);
        let three = interval_rule(5).unwrap();
        assert_eq!(three.len(), 3);
        let i5: f64 = three.iter().map(|(p, w)| w * p[0].powi(5)).sum();
        assert!((i5 - 1.0 / 6.0).abs() < 1e-15);
        for d in 1..=MAX_INTERVAL_DEGREE {
            let r = interval_rule(d).unwrap();
            for k in 0..=d as i32 {
                let got: f64 = r.iter().map(|(p, w)| w * p[0].powi(k)).sum();
                assert!((got - 1.0 / (k as f64 + 1.0)).abs() < 1e-14, "degree {d}, x^{k}");
            }
        }
    }

    #[test]
    fn unsupported_degrees() {
        let err = triangle_rule(0).unwrap_err();
        assert_eq!(err.max, MAX_TRIANGLE_DEGREE);
        assert!(err.to_string().contains("supported range"));
        assert!(triangle_rule(MAX_TRIANGLE_DEGREE + 1).is_err());
        assert!(interval_rule(0).is_err());
    }
}
