//! Stress-dependent diffusivity laws.
//!
//! Tensors are 2x2 row-major `[xx, xy, yx, yy]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Tensor = [f64; 4];

pub const IDENTITY: Tensor = [1.0, 0.0, 0.0, 1.0];

/// Relative positivity floor applied to every law.
pub const FLOOR_FACTOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LawError {
    #[error("non-finite stress {0:?}")]
    NonFinite(Tensor),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionLaw {
    /// `D0`
    Constant { d0: f64 },
    /// `eta0 D0 + eta1 exp(-eta1 tr sigma)`
    ExpTrace { d0: f64, eta0: f64, eta1: f64 },
    /// `D0 + D0 exp(-eta0 tr sigma)`
    IsoExp { d0: f64, eta0: f64 },
    /// `eta0 D0 I - eta2 D0 sigma + eta2 D0 sigma^2`
    Quadratic { d0: f64, eta0: f64, eta2: f64 },
    /// `D0 - D0 exp(-eta |tr sigma|)`
    HinderedExp { d0: f64, eta: f64 },
}

/// Directional derivative together with a flag set when evaluated at a
/// non-differentiable point (one-sided value returned).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivative {
    pub value: Tensor,
    pub kink: bool,
}

pub fn trace(s: &Tensor) -> f64 {
    s[0] + s[3]
}

pub fn frobenius(s: &Tensor) -> f64 {
    s.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn sym(s: &Tensor) -> Tensor {
    let o = 0.5 * (s[1] + s[2]);
    [s[0], o, o, s[3]]
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

fn scaled(c: f64, s: &Tensor) -> Tensor {
    [c * s[0], c * s[1], c * s[2], c * s[3]]
}

/// Eigen-decomposition of a symmetric 2x2 tensor: `(values, first eigenvector)`.
pub fn sym_eigen(s: &Tensor) -> ([f64; 2], [f64; 2]) {
    let (a, b, d) = (s[0], 0.5 * (s[1] + s[2]), s[3]);
    let m = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (l1, l2) = (m - r, m + r);
    let v = if b.abs() > 1e-300 {
        let v = [b, l1 - a];
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        [v[0] / n, v[1] / n]
    } else if a <= d {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    ([l1, l2], v)
}

impl DiffusionLaw {
    pub fn d0(&self) -> f64 {
        match *self {
            DiffusionLaw::Constant { d0 }
            | DiffusionLaw::ExpTrace { d0, .. }
            | DiffusionLaw::IsoExp { d0, .. }
            | DiffusionLaw::Quadratic { d0, .. }
            | DiffusionLaw::HinderedExp { d0, .. } => d0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DiffusionLaw::Constant { .. } => "constant",
            DiffusionLaw::ExpTrace { .. } => "exp_trace",
            DiffusionLaw::IsoExp { .. } => "iso_exp",
            DiffusionLaw::Quadratic { .. } => "quadratic",
            DiffusionLaw::HinderedExp { .. } => "hindered_exp",
        }
    }

    /// Laws whose value is a multiple of the identity.
    pub fn is_isotropic(&self) -> bool {
        !matches!(self, DiffusionLaw::Quadratic { .. })
    }

    /// Whether the law depends on the stress at all.
    pub fn is_constant(&self) -> bool {
        matches!(self, DiffusionLaw::Constant { .. })
    }

    pub fn floor(&self) -> f64 {
        FLOOR_FACTOR * self.d0()
    }

    pub fn eval(&self, s: &Tensor) -> Result<Tensor, LawError> {
        self.eval_flagged(s).map(|(d, _)| d)
    }

    /// Value and whether the positivity floor was applied.
    pub fn eval_flagged(&self, s: &Tensor) -> Result<(Tensor, bool), LawError> {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(LawError::NonFinite(*s));
        }
        let eps = self.floor();
        let tr = trace(s);
        let iso = |c: f64| {
            if c < eps {
                (scaled(eps, &IDENTITY), true)
            } else {
                (scaled(c, &IDENTITY), false)
            }
        };
        Ok(match *self {
            DiffusionLaw::Constant { d0 } => iso(d0),
            DiffusionLaw::ExpTrace { d0, eta0, eta1 } => iso(eta0 * d0 + eta1 * (-eta1 * tr).exp()),
            DiffusionLaw::IsoExp { d0, eta0 } => iso(d0 + d0 * (-eta0 * tr).exp()),
            DiffusionLaw::HinderedExp { d0, eta } => iso(d0 - d0 * (-eta * tr.abs()).exp()),
            DiffusionLaw::Quadratic { d0, eta0, eta2 } => {
                let ss = sym(s);
                let s2 = matmul(&ss, &ss);
                let d: Tensor = std::array::from_fn(|i| eta0 * d0 * IDENTITY[i] - eta2 * d0 * ss[i] + eta2 * d0 * s2[i]);
                let (ev, v) = sym_eigen(&d);
                if ev[0] >= eps {
                    (d, false)
                } else {
                    // Clamp the spectrum at the floor.
                    let l = [ev[0].max(eps), ev[1].max(eps)];
                    let w = [-v[1], v[0]];
                    let out = [
                        l[0] * v[0] * v[0] + l[1] * w[0] * w[0],
                        l[0] * v[0] * v[1] + l[1] * w[0] * w[1],
                        l[0] * v[0] * v[1] + l[1] * w[0] * w[1],
                        l[0] * v[1] * v[1] + l[1] * w[1] * w[1],
                    ];
                    (out, true)
                }
            }
        })
    }

    /// Closed-form directional derivative `dD/dsigma [ds]`.
    pub fn eval_derivative(&self, s: &Tensor, ds: &Tensor) -> Result<Derivative, LawError> {
        let (_, floored) = self.eval_flagged(s)?;
        let tr = trace(s);
        let dtr = trace(ds);
        let kink = matches!(self, DiffusionLaw::HinderedExp { .. }) && tr == 0.0;
        let value = match *self {
            DiffusionLaw::Constant { .. } => [0.0; 4],
            _ if floored && self.is_isotropic() => [0.0; 4],
            DiffusionLaw::ExpTrace { eta1, .. } => scaled(-eta1 * eta1 * (-eta1 * tr).exp() * dtr, &IDENTITY),
            DiffusionLaw::IsoExp { d0, eta0 } => scaled(-eta0 * d0 * (-eta0 * tr).exp() * dtr, &IDENTITY),
            DiffusionLaw::HinderedExp { d0, eta } => {
                let sign = if tr < 0.0 { -1.0 } else { 1.0 };
                scaled(eta * d0 * (-eta * tr.abs()).exp() * sign * dtr, &IDENTITY)
            }
            DiffusionLaw::Quadratic { d0, eta2, .. } => {
                let (ss, dd) = (sym(s), sym(ds));
                let a = matmul(&ss, &dd);
                let b = matmul(&dd, &ss);
                std::array::from_fn(|i| eta2 * d0 * (-dd[i] + a[i] + b[i]))
            }
        };
        if kink {
            log::warn!("diffusion law derivative evaluated at its kink; using the one-sided value");
        }
        Ok(Derivative { value, kink })
    }

    /// Lipschitz constant in the Frobenius norm over `{|sigma|_F <= radius}`.
    pub fn lipschitz(&self, radius: f64) -> f64 {
        let trmax = std::f64::consts::SQRT_2 * radius;
        // |tr ds| |I|_F <= 2 |ds|_F
        match *self {
            DiffusionLaw::Constant { .. } => 0.0,
            DiffusionLaw::ExpTrace { eta1, .. } => 2.0 * eta1 * eta1 * (eta1.abs() * trmax).exp(),
            DiffusionLaw::IsoExp { d0, eta0 } => 2.0 * eta0.abs() * d0 * (eta0.abs() * trmax).exp(),
            DiffusionLaw::HinderedExp { d0, eta } => 2.0 * eta.abs() * d0,
            DiffusionLaw::Quadratic { d0, eta2, .. } => eta2.abs() * d0 * (1.0 + 2.0 * radius),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_laws() -> Vec<DiffusionLaw> {
        vec![
            DiffusionLaw::Constant { d0: 0.3 },
            DiffusionLaw::ExpTrace { d0: 0.01, eta0: 1.0, eta1: 0.01 },
            DiffusionLaw::IsoExp { d0: 5.3e-5, eta0: 5e-5 },
            DiffusionLaw::IsoExp { d0: 1.0, eta0: 0.3 },
            DiffusionLaw::Quadratic { d0: 5.3e-5, eta0: 0.02, eta2: 1e-5 },
            DiffusionLaw::Quadratic { d0: 1.0, eta0: 0.5, eta2: 0.2 },
            DiffusionLaw::HinderedExp { d0: 2.0, eta: 0.4 },
        ]
    }

    #[test]
    fn closed_form_values() {
        let z = [0.0; 4];
        let d0 = 0.7;
        assert_eq!(DiffusionLaw::IsoExp { d0, eta0: 3.0 }.eval(&z).unwrap(), scaled(2.0 * d0, &IDENTITY));
        let (h, floored) = DiffusionLaw::HinderedExp { d0, eta: 1.0 }.eval_flagged(&z).unwrap();
        assert!(floored);
        assert_eq!(h, scaled(1e-8 * d0, &IDENTITY));

        // Quadratic at diag(10, -10): sigma^2 = 100 I.
        let (d0, e0, e2) = (5.3e-5, 0.02, 1e-5);
        let d = DiffusionLaw::Quadratic { d0, eta0: e0, eta2: e2 }.eval(&[10.0, 0.0, 0.0, -10.0]).unwrap();
        let xx = e0 * d0 - e2 * d0 * 10.0 + e2 * d0 * 100.0;
        let yy = e0 * d0 + e2 * d0 * 10.0 + e2 * d0 * 100.0;
        assert!((d[0] - xx).abs() < 1e-20 && (d[3] - yy).abs() < 1e-20);
        assert_eq!((d[1], d[2]), (0.0, 0.0));

        assert!(DiffusionLaw::Constant { d0: 1.0 }.eval(&[f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn closed_form_derivatives() {
        let z = [0.0; 4];
        let c = DiffusionLaw::Constant { d0: 1.0 }.eval_derivative(&[1.0, 2.0, 3.0, 4.0], &IDENTITY).unwrap();
        assert_eq!(c.value, [0.0; 4]);
        let (d0, eta0) = (0.4, 0.25);
        let d = DiffusionLaw::IsoExp { d0, eta0 }.eval_derivative(&z, &IDENTITY).unwrap();
        assert_eq!(d.value, scaled(-2.0 * eta0 * d0, &IDENTITY));
        let k = DiffusionLaw::HinderedExp { d0: 1.0, eta: 1.0 }.eval_derivative(&z, &IDENTITY).unwrap();
        assert!(k.kink);
    }

    #[test]
    fn finite_difference_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for law in all_laws() {
            let s: Tensor = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
            let ds: Tensor = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let base = law.eval(&s).unwrap();
            let exact = law.eval_derivative(&s, &ds).unwrap().value;
            let scale = frobenius(&exact).max(1e-300);
            let hs = [1e-1, 1e-2, 1e-3, 1e-4];
            let errs: Vec<f64> = hs
                .iter()
                .map(|&h| {
                    let sp: Tensor = std::array::from_fn(|i| s[i] + h * ds[i]);
                    let dp = law.eval(&sp).unwrap();
                    let fd: Tensor = std::array::from_fn(|i| (dp[i] - base[i]) / h - exact[i]);
                    frobenius(&fd) / scale
                })
                .collect();
            if law.is_constant() {
                assert!(errs.iter().all(|&e| e == 0.0));
                continue;
            }
            // Quadratic is exact up to the second-order term; the fit is
            // still first-order or better.
            // Drop steps where cancellation in the difference quotient dominates.
            let noise = |h: f64| 1e3 * f64::EPSILON * frobenius(&base) / (h * scale);
            let (lx, ly): (Vec<f64>, Vec<f64>) = hs
                .iter()
                .zip(&errs)
                .filter(|(h, e)| **e > 1e-14 && **e > noise(**h))
                .map(|(h, e)| (h.ln(), e.ln()))
                .unzip();
            if lx.len() < 2 {
                continue;
            }
            let mx = lx.iter().sum::<f64>() / lx.len() as f64;
            let my = ly.iter().sum::<f64>() / ly.len() as f64;
            let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
                / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
            assert!(slope >= 0.9, "{law:?}: slope {slope}, errs {errs:?}");
        }
    }

    #[test]
    fn lipschitz_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let radius = 10.0; // entries in [-5, 5]
        for law in all_laws() {
            let l = law.lipschitz(radius);
            for _ in 0..100 {
                let a: Tensor = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
                let b: Tensor = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
                let (da, db) = (law.eval(&a).unwrap(), law.eval(&b).unwrap());
                let diff: Tensor = std::array::from_fn(|i| da[i] - db[i]);
                let dist: Tensor = std::array::from_fn(|i| a[i] - b[i]);
                assert!(frobenius(&diff) <= l * frobenius(&dist) * (1.0 + 1e-12), "{law:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn values_are_symmetric_and_floored(entries in prop::array::uniform4(-50.0f64..50.0)) {
            for law in all_laws() {
                let d = law.eval(&entries).unwrap();
                prop_assert!((d[1] - d[2]).abs() <= 1e-15 * frobenius(&d));
                let (ev, _) = sym_eigen(&d);
                prop_assert!(ev[0] >= law.floor() * (1.0 - 1e-9));
                if law.is_isotropic() {
                    prop_assert_eq!(d[1], 0.0);
                    prop_assert_eq!(d[0], d[3]);
                }
            }
        }

        #[test]
        fn eigen_reconstructs(a in -10.0f64..10.0, b in -10.0f64..10.0, d in -10.0f64..10.0) {
            let s = [a, b, b, d];
            let (ev, v) = sym_eigen(&s);
            let sv = [s[0] * v[0] + s[1] * v[1], s[2] * v[0] + s[3] * v[1]];
            prop_assert!((sv[0] - ev[0] * v[0]).abs() < 1e-9 && (sv[1] - ev[0] * v[1]).abs() < 1e-9);
            prop_assert!(ev[0] <= ev[1]);
        }
    }
}
