//! Random falsification probes of the coefficient bounds.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{CoefficientBounds, FbsdeProblem};

/// Which inequality a probe tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeCheck {
    MonotoneDrift,
    MonotoneDriver,
    LipschitzDrift,
    LipschitzDiffusion,
    LipschitzDriver,
    LipschitzDriverZ,
    LipschitzTerminal,
    GrowthDrift,
    GrowthDiffusion,
    GrowthDriver,
    GrowthTerminal,
    NonFinite,
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub check: ProbeCheck,
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// Non-finite coefficient output.
    pub hard: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub probes: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, check: ProbeCheck) -> bool {
        self.violations.iter().any(|v| v.check == check)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    /// Number of random probe pairs.
    pub count: usize,
    /// Probes are drawn from `[-radius, radius]` in every coordinate.
    pub radius: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { count: 1000, radius: 10.0, seed: 0 }
    }
}

const REL_SLACK: f64 = 1e-9;
const ABS_SLACK: f64 = 1e-12;

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn dot_diff(a1: &[f64], a2: &[f64], b1: &[f64], b2: &[f64]) -> f64 {
    a1.iter().zip(a2).zip(b1.iter().zip(b2)).map(|((p, q), (r, s))| (p - q) * (r - s)).sum()
}

struct Sampler {
    rng: ChaCha8Rng,
    radius: f64,
}

impl Sampler {
    fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn sym(&mut self) -> f64 {
        self.radius * (2.0 * self.unit() - 1.0)
    }

    fn fill(&mut self, v: &mut [f64]) {
        for x in v {
            *x = self.sym();
        }
    }
}

struct Probe<'a> {
    problem: &'a FbsdeProblem,
    b: &'a CoefficientBounds,
    violations: Vec<Violation>,
}

impl Probe<'_> {
    fn check(&mut self, check: ProbeCheck, t: f64, lhs: f64, rhs: f64) {
        if !lhs.is_finite() {
            self.violations.push(Violation { check: ProbeCheck::NonFinite, t, lhs, rhs, hard: true });
        } else if lhs > rhs + REL_SLACK * rhs.abs() + ABS_SLACK {
            self.violations.push(Violation { check, t, lhs, rhs, hard: false });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run(&mut self, t: f64, x1: &[f64], x2: &[f64], y1: f64, y2: f64, z1: &[f64], z2: &[f64]) {
        let p = self.problem;
        let b = *self.b;
        let (dx, dw) = (p.dim_x(), p.dim_w());
        let mut b1 = vec![0.0; dx];
        let mut b2 = vec![0.0; dx];
        let mut s1 = vec![0.0; dx * dw];
        let mut s2 = vec![0.0; dx * dw];
        let ddx = dist2(x1, x2);
        let ddy = (y1 - y2) * (y1 - y2);
        let ddz = dist2(z1, z2);

        p.drift(t, x1, y1, &mut b1);
        p.drift(t, x2, y1, &mut b2);
        self.check(ProbeCheck::MonotoneDrift, t, dot_diff(&b1, &b2, x1, x2), b.k_b * ddx);

        p.drift(t, x2, y2, &mut b2);
        self.check(ProbeCheck::LipschitzDrift, t, dist2(&b1, &b2), b.k_lip * ddx + b.b_y * ddy);
        self.check(ProbeCheck::GrowthDrift, t, norm2(&b1), b.b_0 + b.k_lip * norm2(x1) + b.b_y * y1 * y1);

        p.diffusion(t, x1, y1, &mut s1);
        p.diffusion(t, x2, y2, &mut s2);
        self.check(ProbeCheck::LipschitzDiffusion, t, dist2(&s1, &s2), b.sigma_x * ddx + b.sigma_y * ddy);
        self.check(
            ProbeCheck::GrowthDiffusion,
            t,
            norm2(&s1),
            b.sigma_0 + b.sigma_x * norm2(x1) + b.sigma_y * y1 * y1,
        );

        let f11 = p.driver(t, x1, y1, z1);
        let f12 = p.driver(t, x1, y2, z1);
        self.check(ProbeCheck::MonotoneDriver, t, (f11 - f12) * (y1 - y2), b.k_f * ddy);
        let f22 = p.driver(t, x2, y2, z2);
        self.check(
            ProbeCheck::LipschitzDriver,
            t,
            (f11 - f22).powi(2),
            b.f_x * ddx + b.k_lip * ddy + b.f_z * ddz,
        );
        let fz = p.driver(t, x1, y1, z2);
        self.check(ProbeCheck::LipschitzDriverZ, t, (f11 - fz).powi(2), b.f_z * ddz);
        self.check(
            ProbeCheck::GrowthDriver,
            t,
            f11 * f11,
            b.f_0 + b.f_x * norm2(x1) + b.k_lip * y1 * y1 + b.f_z * norm2(z1),
        );

        let g1 = p.terminal(x1);
        let g2 = p.terminal(x2);
        self.check(ProbeCheck::LipschitzTerminal, t, (g1 - g2).powi(2), b.g_x * ddx);
        self.check(ProbeCheck::GrowthTerminal, t, g1 * g1, b.g_0 + b.g_x * norm2(x1));
    }
}

/// Probes every inequality of the bounds at random points and at the corners
/// `±radius · (1, …, 1)`. A pass is evidence, not proof.
pub fn validate_problem(problem: &FbsdeProblem, bounds: &CoefficientBounds, config: ProbeConfig) -> ValidationReport {
    let (dx, dw) = (problem.dim_x(), problem.dim_w());
    let mut sampler = Sampler { rng: ChaCha8Rng::seed_from_u64(config.seed), radius: config.radius };
    let mut probe = Probe { problem, b: bounds, violations: Vec::new() };
    let mut x1 = vec![0.0; dx];
    let mut x2 = vec![0.0; dx];
    let mut z1 = vec![0.0; dw];
    let mut z2 = vec![0.0; dw];

    let rho = config.radius;
    for &(a, c) in &[(rho, -rho), (-rho, rho), (rho, 0.0), (0.0, rho)] {
        x1.fill(a);
        x2.fill(c);
        z1.fill(a);
        z2.fill(c);
        probe.run(0.0, &x1, &x2, a, c, &z1, &z2);
    }
    for _ in 0..config.count {
        let t = problem.horizon() * sampler.unit();
        sampler.fill(&mut x1);
        sampler.fill(&mut x2);
        sampler.fill(&mut z1);
        sampler.fill(&mut z2);
        let y1 = sampler.sym();
        let y2 = sampler.sym();
        probe.run(t, &x1, &x2, y1, y2, &z1, &z2);
    }
    ValidationReport { probes: config.count + 4, violations: probe.violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{counterexample, counterexample_bounds, SineParams};

    #[test]
    fn zero_problem_passes_with_zero_bounds() {
        let p = FbsdeProblem::builder(2, 3).build().unwrap();
        let r = validate_problem(&p, &CoefficientBounds::zero(), ProbeConfig::default());
        assert!(r.passed(), "{:?}", r.violations.first());
    }

    #[test]
    fn sine_problem_passes_with_analytic_bounds() {
        let params = SineParams::new(1, 0.1, 0.0);
        let r = validate_problem(&params.problem().unwrap(), &params.bounds(), ProbeConfig::default());
        assert!(r.passed(), "{:?}", r.violations.first());
        for params in [SineParams::new(4, 0.4, 0.0), SineParams::new(3, 0.3, 1.5), SineParams::new(2, 0.2, -0.5)] {
            let r = validate_problem(&params.problem().unwrap(), &params.bounds(), ProbeConfig { seed: 3, ..Default::default() });
            assert!(r.passed(), "{params:?}: {:?}", r.violations.first());
            assert!(!r.has(ProbeCheck::LipschitzDriverZ));
        }
    }

    #[test]
    fn quadratic_terminal_fails_linear_growth() {
        let p = FbsdeProblem::builder(1, 1).terminal(|x| x[0] * x[0]).build().unwrap();
        let bounds = CoefficientBounds { g_x: 1.0, k_lip: 1.0, ..CoefficientBounds::zero() };
        let r = validate_problem(&p, &bounds, ProbeConfig::default());
        assert!(r.has(ProbeCheck::GrowthTerminal));
    }

    #[test]
    fn non_finite_output_is_hard() {
        let p = FbsdeProblem::builder(1, 1).driver(|_, x, _, _| 1.0 / (x[0] - x[0])).build().unwrap();
        let r = validate_problem(&p, &CoefficientBounds::zero(), ProbeConfig { count: 3, ..Default::default() });
        assert!(r.violations.iter().any(|v| v.hard && v.check == ProbeCheck::NonFinite));
    }

    #[test]
    fn counterexample_bounds_hold() {
        let p = counterexample(1.0, 3.0 * std::f64::consts::FRAC_PI_4).unwrap();
        let r = validate_problem(&p, &counterexample_bounds(), ProbeConfig::default());
        assert!(r.passed(), "{:?}", r.violations.first());
    }
}
