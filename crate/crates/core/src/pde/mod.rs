//! Closed-form solutions, conserved mass `b(t)` and front positions for five
//! one-dimensional conservation laws.
//!
//! | family    | parameter | Ω        | u(0, x)              | b(t)                          |
//! |-----------|-----------|----------|----------------------|-------------------------------|
//! | Diffusion | k > 0     | [0, 2π]  | sin x                | 0                             |
//! | PME       | m ≥ 0.99  | [0, 1]   | 0                    | m^(1+1/m) t^(1+1/m) / (m+1)   |
//! | Stefan    | u* ∈ (0,1)| [0, 1]   | 0                    | 2 c1 √(t/π)                   |
//! | Advection | β > 0     | [0, 1]   | 1{x ≤ 1/2}           | 1/2 + βt                      |
//! | Burgers   | a ≥ 1     | [-1, 1]  | a, -ax, 0 piecewise  | (a/2)(1 + at)                 |
//!
//! The mass formulas assume the front never reaches the right boundary, so
//! every instance checks that at construction for its whole time window.

mod stefan;

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use stefan::{erf, solve_stefan_constants, StefanConstants};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PdeFamily {
    Diffusion,
    Pme,
    Stefan,
    Advection,
    Burgers,
}

impl PdeFamily {
    pub const ALL: [PdeFamily; 5] = [
        PdeFamily::Diffusion,
        PdeFamily::Pme,
        PdeFamily::Stefan,
        PdeFamily::Advection,
        PdeFamily::Burgers,
    ];

    pub fn space_domain(self) -> (f64, f64) {
        match self {
            PdeFamily::Diffusion => (0.0, 2.0 * PI),
            PdeFamily::Pme | PdeFamily::Stefan | PdeFamily::Advection => (0.0, 1.0),
            PdeFamily::Burgers => (-1.0, 1.0),
        }
    }

    /// Time window used by the test settings for each family.
    pub fn default_time_horizon(self) -> f64 {
        match self {
            PdeFamily::Diffusion | PdeFamily::Pme => 1.0,
            PdeFamily::Stefan | PdeFamily::Advection => 0.1,
            PdeFamily::Burgers => 0.5,
        }
    }

    /// Name of the scalar parameter (`k`, `m`, `u*`, `beta`, `a`).
    pub fn param_name(self) -> &'static str {
        match self {
            PdeFamily::Diffusion => "k",
            PdeFamily::Pme => "m",
            PdeFamily::Stefan => "u_star",
            PdeFamily::Advection => "beta",
            PdeFamily::Burgers => "a",
        }
    }

    pub(crate) fn check_param(self, p: f64) -> Result<()> {
        let ok = p.is_finite()
            && match self {
                PdeFamily::Diffusion | PdeFamily::Advection => p > 0.0,
                PdeFamily::Pme => p >= 0.99,
                PdeFamily::Stefan => p > 0.0 && p < 1.0,
                PdeFamily::Burgers => p >= 1.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Range(format!(
                "{self}: parameter {} = {p} outside admissible range",
                self.param_name()
            )))
        }
    }
}

impl fmt::Display for PdeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PdeFamily::Diffusion => "diffusion",
            PdeFamily::Pme => "pme",
            PdeFamily::Stefan => "stefan",
            PdeFamily::Advection => "advection",
            PdeFamily::Burgers => "burgers",
        };
        f.write_str(s)
    }
}

/// A member of one of the five families, with its time window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeInstance {
    family: PdeFamily,
    param: f64,
    time_horizon: f64,
    stefan: Option<StefanConstants>,
}

impl PdeInstance {
    pub fn new(family: PdeFamily, param: f64, time_horizon: f64) -> Result<Self> {
        family.check_param(param)?;
        if !(time_horizon > 0.0 && time_horizon.is_finite()) {
            return Err(Error::Range(format!("time horizon {time_horizon} must be positive")));
        }
        let stefan = match family {
            PdeFamily::Stefan => Some(solve_stefan_constants(param).map_err(|e| {
                Error::Dependency(format!("Stefan constants for u* = {param}: {e}"))
            })?),
            _ => None,
        };
        let instance = PdeInstance {
            family,
            param,
            time_horizon,
            stefan,
        };
        instance.check_front_contained()?;
        Ok(instance)
    }

    /// Instance on the family's default time window.
    pub fn with_default_horizon(family: PdeFamily, param: f64) -> Result<Self> {
        Self::new(family, param, family.default_time_horizon())
    }

    pub fn family(&self) -> PdeFamily {
        self.family
    }

    pub fn param(&self) -> f64 {
        self.param
    }

    pub fn time_horizon(&self) -> f64 {
        self.time_horizon
    }

    pub fn space_domain(&self) -> (f64, f64) {
        self.family.space_domain()
    }

    /// Stefan similarity constants; `None` for the other families.
    pub fn stefan_constants(&self) -> Option<&StefanConstants> {
        self.stefan.as_ref()
    }

    fn stefan(&self) -> Result<&StefanConstants> {
        self.stefan
            .as_ref()
            .ok_or_else(|| Error::Dependency("Stefan constants unresolved".into()))
    }

    fn check_front_contained(&self) -> Result<()> {
        let (_, right) = self.space_domain();
        let t = self.time_horizon;
        let front = match self.family {
            PdeFamily::Diffusion => return Ok(()),
            PdeFamily::Pme => t,
            PdeFamily::Stefan => self.stefan()?.alpha * t.sqrt(),
            PdeFamily::Advection => 0.5 + self.param * t,
            PdeFamily::Burgers => {
                let a = self.param;
                if a * t < 1.0 {
                    0.0
                } else {
                    0.5 * (a * t - 1.0)
                }
            }
        };
        if front > right {
            return Err(Error::Range(format!(
                "{}: front reaches {front} > {right} before t = {t}",
                self.family
            )));
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.time_horizon).contains(&t) {
            return Err(Error::Range(format!(
                "t = {t} outside [0, {}]",
                self.time_horizon
            )));
        }
        Ok(())
    }

    fn check_position(&self, x: f64) -> Result<()> {
        let (a, b) = self.space_domain();
        if !(a..=b).contains(&x) {
            return Err(Error::Range(format!("x = {x} outside [{a}, {b}]")));
        }
        Ok(())
    }

    /// Exact solution `u(t, x)`.
    pub fn eval_exact(&self, t: f64, x: f64) -> Result<f64> {
        self.check_time(t)?;
        self.check_position(x)?;
        let p = self.param;
        let u = match self.family {
            PdeFamily::Diffusion => (-p * t).exp() * x.sin(),
            PdeFamily::Pme => {
                let s = (p * (t - x)).max(0.0);
                if s == 0.0 {
                    0.0
                } else {
                    s.powf(1.0 / p)
                }
            }
            PdeFamily::Stefan => {
                let c = self.stefan()?;
                if t == 0.0 {
                    if x == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else if x <= c.alpha * t.sqrt() {
                    1.0 - c.c1 * erf(x / (2.0 * t.sqrt()))
                } else {
                    0.0
                }
            }
            PdeFamily::Advection => {
                if x - p * t <= 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            PdeFamily::Burgers => {
                let a = p;
                if a * t < 1.0 {
                    // Characteristics have not crossed yet: the ramp steepens.
                    if x <= a * t - 1.0 {
                        a
                    } else if x <= 0.0 {
                        a * x / (a * t - 1.0)
                    } else {
                        0.0
                    }
                } else if x <= 0.5 * (a * t - 1.0) {
                    a
                } else {
                    0.0
                }
            }
        };
        Ok(u)
    }

    /// Exact solution at time `t` on each of `positions`.
    pub fn profile(&self, t: f64, positions: &[f64]) -> Result<Vec<f64>> {
        positions.iter().map(|&x| self.eval_exact(t, x)).collect()
    }

    /// Total conserved quantity `b(t) = ∫_Ω u(t, x) dx`.
    pub fn conserved_mass(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let p = self.param;
        let b = match self.family {
            PdeFamily::Diffusion => 0.0,
            PdeFamily::Pme => p.powf(1.0 + 1.0 / p) / (p + 1.0) * t.powf(1.0 + 1.0 / p),
            PdeFamily::Stefan => 2.0 * self.stefan()?.c1 * (t / PI).sqrt(),
            PdeFamily::Advection => 0.5 + p * t,
            PdeFamily::Burgers => 0.5 * p * (1.0 + p * t),
        };
        Ok(b)
    }

    /// Exact front position at `t`, or `None` when the family has no front
    /// (Diffusion) or it has not formed yet (Burgers before `t = 1/a`).
    ///
    /// For the PME this is the degeneracy point `x = t`, where the solution is
    /// continuous but its support ends.
    pub fn shock_position_exact(&self, t: f64) -> Result<Option<f64>> {
        self.check_time(t)?;
        let p = self.param;
        let x = match self.family {
            PdeFamily::Diffusion => None,
            PdeFamily::Pme => Some(t),
            PdeFamily::Stefan => Some(self.stefan()?.alpha * t.sqrt()),
            PdeFamily::Advection => Some(0.5 + p * t),
            PdeFamily::Burgers => (p * t >= 1.0).then(|| 0.5 * (p * t - 1.0)),
        };
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(family: PdeFamily, p: f64) -> PdeInstance {
        PdeInstance::with_default_horizon(family, p).unwrap()
    }

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = 0.5 * (f(a) + f(b));
        for i in 1..n {
            s += f(a + h * i as f64);
        }
        s * h
    }

    #[test]
    fn diffusion_initial_condition() {
        let p = inst(PdeFamily::Diffusion, 1.0);
        assert_eq!(p.eval_exact(0.0, PI / 2.0).unwrap(), 1.0);
        assert_eq!(p.conserved_mass(0.37).unwrap(), 0.0);
        assert_eq!(p.shock_position_exact(0.5).unwrap(), None);
    }

    #[test]
    fn pme_values() {
        let p = inst(PdeFamily::Pme, 1.0);
        assert!((p.eval_exact(0.5, 0.25).unwrap() - 0.25).abs() < 1e-15);
        for m in [1.0, 2.0, 3.0, 6.0] {
            let p = inst(PdeFamily::Pme, m);
            assert_eq!(p.eval_exact(0.3, 0.8).unwrap(), 0.0);
        }
        assert!((p.conserved_mass(0.5).unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(inst(PdeFamily::Pme, 3.0).shock_position_exact(0.5).unwrap(), Some(0.5));
    }

    #[test]
    fn pme_mass_matches_fine_quadrature() {
        let p = inst(PdeFamily::Pme, 1.0);
        let q = trapezoid(|x| p.eval_exact(0.5, x).unwrap(), 0.0, 1.0, 100_000);
        assert!((q - 0.125).abs() < 1e-8);
    }

    #[test]
    fn advection_mass() {
        let p = PdeInstance::new(PdeFamily::Advection, 3.0, 0.1).unwrap();
        assert!((p.conserved_mass(0.1).unwrap() - 0.8).abs() < 1e-15);
        let q = trapezoid(|x| p.eval_exact(0.1, x).unwrap(), 0.0, 1.0, 100_000);
        assert!((q - 0.8).abs() < 2e-5);
    }

    #[test]
    fn burgers_branches() {
        let p = PdeInstance::new(PdeFamily::Burgers, 1.0, 2.0).unwrap();
        assert_eq!(p.eval_exact(2.0, 0.0).unwrap(), 1.0);
        assert_eq!(p.shock_position_exact(1.0).unwrap(), Some(0.0));
        assert_eq!(p.shock_position_exact(0.5).unwrap(), None);
        // Ramp before breaking.
        assert!((p.eval_exact(0.5, -0.25).unwrap() - 0.5).abs() < 1e-15);
        // Mass is continuous across the breaking time.
        let below = p.conserved_mass(1.0 - 1e-12).unwrap();
        let at = p.conserved_mass(1.0).unwrap();
        assert!((below - at).abs() < 1e-11);
        for t in [0.3, 0.999, 1.0, 1.7] {
            let q = trapezoid(|x| p.eval_exact(t, x).unwrap(), -1.0, 1.0, 200_000);
            assert!((q - p.conserved_mass(t).unwrap()).abs() < 1e-4, "t = {t}");
        }
    }

    #[test]
    fn stefan_profile_and_front() {
        let p = inst(PdeFamily::Stefan, 0.6);
        let c = *p.stefan_constants().unwrap();
        let t = 0.05;
        let front = p.shock_position_exact(t).unwrap().unwrap();
        assert!((front - c.alpha * t.sqrt()).abs() < 1e-15);
        assert!((front - 0.235_086_681_142_627_3).abs() < 1e-12);
        // The profile equals u* at the front and vanishes beyond it.
        assert!((p.eval_exact(t, front).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(p.eval_exact(t, front + 1e-9).unwrap(), 0.0);
        // Dirichlet data.
        for t in [0.01, 0.05, 0.1] {
            assert_eq!(p.eval_exact(t, 0.0).unwrap(), 1.0);
            assert_eq!(p.eval_exact(t, 1.0).unwrap(), 0.0);
        }
        let q = trapezoid(|x| p.eval_exact(t, x).unwrap(), 0.0, 1.0, 200_000);
        assert!((q - p.conserved_mass(t).unwrap()).abs() < 1e-5);
        assert!((p.conserved_mass(t).unwrap() - 0.185_946_205_947_599_7).abs() < 1e-12);
    }

    #[test]
    fn stefan_front_matches_fine_grid_zero_crossing() {
        let p = inst(PdeFamily::Stefan, 0.6);
        let t = 0.05;
        let n = 1_000_000;
        let h = 1.0 / n as f64;
        let first_zero = (0..=n)
            .map(|i| i as f64 * h)
            .find(|&x| p.eval_exact(t, x).unwrap() == 0.0)
            .unwrap();
        let exact = p.shock_position_exact(t).unwrap().unwrap();
        assert!(first_zero >= exact && first_zero - exact <= h);
    }

    #[test]
    fn gpme_family_is_nonnegative() {
        for p in [inst(PdeFamily::Pme, 1.0), inst(PdeFamily::Pme, 4.5), inst(PdeFamily::Stefan, 0.7)] {
            for i in 0..=20 {
                let t = p.time_horizon() * i as f64 / 20.0;
                for j in 0..=50 {
                    let x = j as f64 / 50.0;
                    assert!(p.eval_exact(t, x).unwrap() >= 0.0);
                }
            }
        }
    }

    #[test]
    fn range_errors() {
        assert!(matches!(PdeInstance::new(PdeFamily::Diffusion, -1.0, 1.0), Err(Error::Range(_))));
        assert!(matches!(PdeInstance::new(PdeFamily::Pme, 0.5, 1.0), Err(Error::Range(_))));
        assert!(matches!(PdeInstance::new(PdeFamily::Stefan, 1.2, 0.1), Err(Error::Range(_))));
        assert!(matches!(PdeInstance::new(PdeFamily::Burgers, 0.5, 0.5), Err(Error::Range(_))));
        // Front would leave the domain.
        assert!(matches!(PdeInstance::new(PdeFamily::Pme, 2.0, 1.5), Err(Error::Range(_))));
        assert!(matches!(PdeInstance::new(PdeFamily::Advection, 6.0, 0.1), Err(Error::Range(_))));
        assert!(matches!(PdeInstance::new(PdeFamily::Burgers, 1.0, 3.5), Err(Error::Range(_))));
        let p = inst(PdeFamily::Pme, 2.0);
        assert!(matches!(p.eval_exact(1.1, 0.5), Err(Error::Range(_))));
        assert!(matches!(p.eval_exact(0.5, -0.1), Err(Error::Range(_))));
        assert!(matches!(p.conserved_mass(-0.1), Err(Error::Range(_))));
    }
}
