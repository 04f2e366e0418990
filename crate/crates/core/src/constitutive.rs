//! Convex viscous potentials `F(D) = φ(|D|)` with their subdifferential selection, convex
//! conjugate and proximal map.
//!
//! | kind      | `φ(t)`          | selection `S(D)`                   | growth `(p, F̲, F̄, c)` |
//! |-----------|-----------------|------------------------------------|------------------------|
//! | newtonian | `μ t²`          | `2μD`                              | `(2, μ, μ, 0)`         |
//! | powerlaw  | `α t² + β t^p`  | `2αD + pβ|D|^{p−2}D`               | `(p, β, α+β, α)`       |
//! | bingham   | `S̄ t + μ t²`    | `S̄D/|D| + 2μD`, `0` at `D = 0`     | `(2, μ, μ+S̄, S̄)`       |
//!
//! The growth constants satisfy `F̲|D|^p − c ≤ F(D) ≤ F̄|D|^p + c`.

use crate::error::{Error, Result};
use crate::geometry::Sym2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Potential {
    Newtonian { mu: f64 },
    #[serde(rename = "powerlaw")]
    PowerLaw { alpha: f64, beta: f64, p: f64 },
    Bingham { yield_stress: f64, mu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthBounds {
    pub p: f64,
    pub lower: f64,
    pub upper: f64,
    pub c: f64,
}

impl Potential {
    pub fn newtonian(mu: f64) -> Result<Self> {
        let p = Potential::Newtonian { mu };
        p.validate()?;
        Ok(p)
    }

    pub fn power_law(alpha: f64, beta: f64, p: f64) -> Result<Self> {
        let pot = Potential::PowerLaw { alpha, beta, p };
        pot.validate()?;
        Ok(pot)
    }

    pub fn bingham(yield_stress: f64, mu: f64) -> Result<Self> {
        let p = Potential::Bingham { yield_stress, mu };
        p.validate()?;
        Ok(p)
    }

    /// Returns the offending parameter name and reason on failure.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let pos = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((name, format!("must be positive, got {v}")))
            }
        };
        match *self {
            Potential::Newtonian { mu } => pos("mu", mu),
            Potential::PowerLaw { alpha, beta, p } => {
                if !(alpha >= 0.0 && alpha.is_finite()) {
                    return Err(("alpha", format!("must be non-negative, got {alpha}")));
                }
                pos("beta", beta)?;
                if !(p >= 2.0 && p.is_finite()) {
                    return Err(("p", format!("must be at least 2, got {p}")));
                }
                Ok(())
            }
            Potential::Bingham { yield_stress, mu } => {
                pos("yield_stress", yield_stress)?;
                pos("mu", mu)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(k, why)| Error::InvalidArgument(format!("{k} {why}")))
    }

    /// Growth exponent `p`.
    pub fn exponent(&self) -> f64 {
        match *self {
            Potential::PowerLaw { p, .. } => p,
            _ => 2.0,
        }
    }

    pub fn growth(&self) -> GrowthBounds {
        match *self {
            Potential::Newtonian { mu } => GrowthBounds { p: 2.0, lower: mu, upper: mu, c: 0.0 },
            Potential::PowerLaw { alpha, beta, p } => GrowthBounds { p, lower: beta, upper: alpha + beta, c: alpha },
            Potential::Bingham { yield_stress, mu } => {
                GrowthBounds { p: 2.0, lower: mu, upper: mu + yield_stress, c: yield_stress }
            }
        }
    }

    /// Radial profile `φ(t)`, `F(D) = φ(|D|)`.
    pub fn profile(&self, t: f64) -> f64 {
        match *self {
            Potential::Newtonian { mu } => mu * t * t,
            Potential::PowerLaw { alpha, beta, p } => alpha * t * t + beta * t.powf(p),
            Potential::Bingham { yield_stress, mu } => yield_stress * t + mu * t * t,
        }
    }

    /// `φ'(t)` for `t > 0`.
    pub fn profile_slope(&self, t: f64) -> f64 {
        match *self {
            Potential::Newtonian { mu } => 2.0 * mu * t,
            Potential::PowerLaw { alpha, beta, p } => 2.0 * alpha * t + p * beta * t.powf(p - 1.0),
            Potential::Bingham { yield_stress, mu } => yield_stress + 2.0 * mu * t,
        }
    }

    /// Secant viscosity `ν(t) = φ'(t) / (2t)`, so that the selection is `2ν(|D|)D`. The
    /// Bingham yield term uses `sqrt(t² + eps²)` in place of `t`.
    pub fn secant_viscosity(&self, t: f64, eps: f64) -> f64 {
        match *self {
            Potential::Newtonian { mu } => mu,
            Potential::PowerLaw { alpha, beta, p } => {
                if p == 2.0 {
                    alpha + beta
                } else {
                    alpha + 0.5 * p * beta * t.powf(p - 2.0)
                }
            }
            Potential::Bingham { yield_stress, mu } => mu + 0.5 * yield_stress / (t * t + eps * eps).sqrt(),
        }
    }

    /// Secant viscosity without the yield contribution; bounds the stiffness seen by an
    /// explicit diffusion step.
    pub fn flow_viscosity(&self, t: f64) -> f64 {
        match *self {
            Potential::Bingham { mu, .. } => mu,
            _ => self.secant_viscosity(t, 0.0),
        }
    }

    /// `φ*(s) = sup_{t ≥ 0} (s t − φ(t))` for `s ≥ 0`.
    pub fn conjugate_profile(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        match *self {
            Potential::Newtonian { mu } => s * s / (4.0 * mu),
            Potential::Bingham { yield_stress, mu } => {
                let e = (s - yield_stress).max(0.0);
                e * e / (4.0 * mu)
            }
            Potential::PowerLaw { alpha, beta, p } => {
                if alpha == 0.0 {
                    let t = (s / (p * beta)).powf(1.0 / (p - 1.0));
                    return (p - 1.0) * beta * t.powf(p);
                }
                let hi = (s / (2.0 * alpha)).min((s / (p * beta)).powf(1.0 / (p - 1.0)));
                let g = |t: f64| s * t - self.profile(t);
                let t = golden_max(g, 0.0, hi, 1e-10);
                g(t).max(0.0)
            }
        }
    }
}

/// Maximizer of a unimodal `f` on `[a, b]`, bracket shrunk to `rel_tol·(b − a)`.
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, rel_tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let width = (b - a).abs();
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > rel_tol * width {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let m = 0.5 * (a + b);
    [a, b, m].into_iter().fold(m, |best, t| if f(t) > f(best) { t } else { best })
}

pub fn eval_potential(pot: &Potential, d: Sym2) -> f64 {
    let t2 = d.norm_sq();
    match *pot {
        Potential::Newtonian { mu } => mu * t2,
        Potential::PowerLaw { alpha, beta, p } => alpha * t2 + beta * t2.powf(0.5 * p),
        Potential::Bingham { yield_stress, mu } => yield_stress * t2.sqrt() + mu * t2,
    }
}

/// The selection of `∂F(D)`: `φ'(|D|) D/|D|`, and `0` at `D = 0`.
pub fn stress_select(pot: &Potential, d: Sym2) -> Sym2 {
    let t = d.norm();
    if t == 0.0 {
        return Sym2::ZERO;
    }
    match *pot {
        Potential::Newtonian { mu } => d * (2.0 * mu),
        Potential::PowerLaw { alpha, beta, p } => d * (2.0 * alpha + p * beta * t.powf(p - 2.0)),
        Potential::Bingham { yield_stress, mu } => d * (yield_stress / t + 2.0 * mu),
    }
}

/// `F*(S) = sup_D {S:D − F(D)}`.
pub fn conjugate(pot: &Potential, s: Sym2) -> f64 {
    pot.conjugate_profile(s.norm())
}

/// `F(D) + F*(S) − S:D`; non-negative up to the conjugate tolerance, zero iff `S ∈ ∂F(D)`.
pub fn fenchel_gap(pot: &Potential, d: Sym2, s: Sym2) -> f64 {
    eval_potential(pot, d) + conjugate(pot, s) - s.ddot(d)
}

/// `prox_{λF}(Z) = argmin_D F(D) + |D − Z|²/(2λ)`.
pub fn prox(pot: &Potential, lambda: f64, z: Sym2) -> Sym2 {
    let zn = z.norm();
    if zn == 0.0 || lambda <= 0.0 {
        return if lambda <= 0.0 { z } else { Sym2::ZERO };
    }
    // radial problem: t + λφ'(t) = |Z|, or t = 0 when |Z| ≤ λφ'(0+)
    let t = match *pot {
        Potential::Newtonian { mu } => zn / (1.0 + 2.0 * lambda * mu),
        Potential::Bingham { yield_stress, mu } => (zn - lambda * yield_stress).max(0.0) / (1.0 + 2.0 * lambda * mu),
        Potential::PowerLaw { .. } => {
            let f = |t: f64| t + lambda * pot.profile_slope(t) - zn;
            let (mut lo, mut hi) = (0.0, zn);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo <= 1e-15 * zn {
                    break;
                }
            }
            0.5 * (lo + hi)
        }
    };
    z * (t / zn)
}

/// A strain/stress pair together with its Fenchel gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualPair {
    pub d: Sym2,
    pub s: Sym2,
    pub gap: f64,
}

impl DualPair {
    pub fn new(pot: &Potential, d: Sym2, s: Sym2) -> Self {
        DualPair { d, s, gap: fenchel_gap(pot, d, s) }
    }

    pub fn selected(pot: &Potential, d: Sym2) -> Self {
        DualPair::new(pot, d, stress_select(pot, d))
    }

    /// `S ∈ ∂F(D)` up to `tol`.
    pub fn is_admissible(&self, tol: f64) -> bool {
        self.gap.abs() <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        let n = Potential::newtonian(1.0).unwrap();
        let d = Sym2::diag(1.0, -1.0);
        assert_eq!(eval_potential(&n, d), 2.0);
        assert_eq!(stress_select(&n, d), Sym2::diag(2.0, -2.0));

        let b = Potential::bingham(1.0, 0.5).unwrap();
        let d2 = Sym2::diag(2.0f64.sqrt(), 2.0f64.sqrt()); // |D| = 2
        assert!((eval_potential(&b, d2) - 4.0).abs() < 1e-14);
        assert_eq!(stress_select(&b, Sym2::ZERO), Sym2::ZERO);

        let pl = Potential::power_law(0.0, 1.0, 4.0).unwrap();
        let s = stress_select(&pl, d);
        assert!((s.xx - 8.0).abs() < 1e-12 && (s.yy + 8.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Potential::newtonian(0.0).is_err());
        assert!(Potential::power_law(1.0, 1.0, 1.5).is_err());
        assert!(Potential::bingham(-1.0, 1.0).is_err());
    }

    #[test]
    fn golden_section_matches_closed_form_when_alpha_vanishes() {
        // α = 0 has a closed form; a tiny α must land on (nearly) the same value
        let exact = Potential::power_law(0.0, 0.7, 3.0).unwrap();
        let near = Potential::PowerLaw { alpha: 1e-12, beta: 0.7, p: 3.0 };
        for s in [0.1, 1.0, 7.5] {
            let a = exact.conjugate_profile(s);
            let b = near.conjugate_profile(s);
            assert!((a - b).abs() <= 1e-9 * (1.0 + a), "{s}: {a} vs {b}");
        }
    }

    #[test]
    fn prox_satisfies_optimality() {
        // (Z − D)/λ ∈ ∂F(D) ⇔ the gap of (D, (Z−D)/λ) vanishes
        let z = Sym2::new(0.4, -0.1, 0.9);
        for pot in [
            Potential::newtonian(0.3).unwrap(),
            Potential::power_law(0.2, 0.5, 3.0).unwrap(),
            Potential::bingham(0.5, 0.2).unwrap(),
        ] {
            let lam = 0.8;
            let d = prox(&pot, lam, z);
            let s = (z - d) * (1.0 / lam);
            assert!(fenchel_gap(&pot, d, s).abs() < 1e-9, "{pot:?}");
        }
    }

    #[test]
    fn bingham_yield_ball_has_zero_conjugate() {
        let b = Potential::bingham(1.0, 0.5).unwrap();
        assert_eq!(conjugate(&b, Sym2::new(0.5, -0.5, 0.0)), 0.0);
        let s = Sym2::new(1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0); // |S| = S̄
        assert!(fenchel_gap(&b, Sym2::ZERO, s).abs() < 1e-15);
    }
}
