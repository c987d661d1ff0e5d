//! Ramsey and spin-echo impurity interferometry.
//!
//! Impurities carry a spin and sit at one of a few abstract positions. Each
//! branch of the joint state holds one configuration of labeled impurities
//! and the amplitude picked up by the quasihole state along that branch.
//! Dynamical phases are taken to cancel between the mirror-symmetric halves
//! of the path, so transport only multiplies branches by geometric factors.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;

use faer::Mat;
use num_complex::Complex64 as c64;

use crate::error::{Error, Result};

/// Allowed deviation of `|factor|` from one for transport factors.
pub const UNIT_MODULUS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Spin {
    Up,
    Down,
}

/// One impurity: position label and spin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Impurity {
    pub position: usize,
    pub spin: Spin,
}

/// Superposition of labeled impurity configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchState {
    branches: BTreeMap<Vec<Impurity>, c64>,
}

impl BranchState {
    /// All impurities spin up at the given positions.
    pub fn spin_up(positions: &[usize]) -> Self {
        let config = positions
            .iter()
            .map(|&position| Impurity {
                position,
                spin: Spin::Up,
            })
            .collect();
        Self {
            branches: BTreeMap::from([(config, c64::new(1.0, 0.0))]),
        }
    }

    pub fn branches(&self) -> impl Iterator<Item = (&[Impurity], c64)> {
        self.branches.iter().map(|(k, v)| (k.as_slice(), *v))
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn norm_squared(&self) -> f64 {
        self.branches.values().map(|a| a.norm_sqr()).sum()
    }

    fn rotate_each(&self, rotation: impl Fn(Spin) -> [(Spin, c64); 2]) -> Self {
        let mut out: BTreeMap<Vec<Impurity>, c64> = BTreeMap::new();
        for (config, amp) in &self.branches {
            let mut partial: Vec<(Vec<Impurity>, c64)> = vec![(Vec::new(), *amp)];
            for imp in config {
                partial = partial
                    .into_iter()
                    .flat_map(|(prefix, a)| {
                        rotation(imp.spin).into_iter().map(move |(spin, c)| {
                            let mut next = prefix.clone();
                            next.push(Impurity { spin, ..*imp });
                            (next, a * c)
                        })
                    })
                    .collect();
            }
            for (config, a) in partial {
                *out.entry(config).or_default() += a;
            }
        }
        out.retain(|_, a| a.norm_sqr() > 0.0);
        Self { branches: out }
    }

    /// Ramsey pulse: `↑ → (↑+↓)/√2`, `↓ → (↑−↓)/√2` on every impurity.
    pub fn half_pulse(&self) -> Self {
        let s = c64::new(FRAC_1_SQRT_2, 0.0);
        self.rotate_each(|spin| match spin {
            Spin::Up => [(Spin::Up, s), (Spin::Down, s)],
            Spin::Down => [(Spin::Up, s), (Spin::Down, -s)],
        })
    }

    /// Spin-echo pulse: flip every impurity.
    pub fn pi_pulse(&self) -> Self {
        let one = c64::new(1.0, 0.0);
        let zero = c64::new(0.0, 0.0);
        self.rotate_each(|spin| match spin {
            Spin::Up => [(Spin::Down, one), (Spin::Up, zero)],
            Spin::Down => [(Spin::Up, one), (Spin::Down, zero)],
        })
    }

    /// Move every spin-up impurity; `route(label, position)` gives its new
    /// position.
    pub fn move_up(&self, route: impl Fn(usize, usize) -> usize) -> Self {
        let mut out: BTreeMap<Vec<Impurity>, c64> = BTreeMap::new();
        for (config, amp) in &self.branches {
            let moved: Vec<Impurity> = config
                .iter()
                .enumerate()
                .map(|(label, imp)| match imp.spin {
                    Spin::Up => Impurity {
                        position: route(label, imp.position),
                        ..*imp
                    },
                    Spin::Down => *imp,
                })
                .collect();
            *out.entry(moved).or_default() += *amp;
        }
        Self { branches: out }
    }

    /// Multiply every branch by `factor(config)`.
    pub fn apply_factors(&self, factor: impl Fn(&[Impurity]) -> c64) -> Self {
        Self {
            branches: self.branches.iter().map(|(k, a)| (k.clone(), a * factor(k))).collect(),
        }
    }

    /// Amplitude of one labeled configuration.
    pub fn amplitude(&self, config: &[Impurity]) -> c64 {
        self.branches.get(config).copied().unwrap_or_default()
    }
}

fn check_unit(factor: c64, what: &str) -> Result<()> {
    if !(factor.re.is_finite() && factor.im.is_finite()) || (factor.norm() - 1.0).abs() > UNIT_MODULUS_TOLERANCE {
        return Err(Error::InvalidParameter(format!(
            "transport factor {what} = {factor} is not of unit modulus"
        )));
    }
    Ok(())
}

/// Probability of finding the impurity spin up at the far end after
/// moving it along one half of a loop (phase `phase_first_half`), echoing,
/// and moving the other spin component along the second half.
pub fn run_single_impurity_sequence(phase_first_half: f64, phase_second_half: f64) -> f64 {
    let (start, end) = (0, 1);
    let u1 = c64::from_polar(1.0, phase_first_half);
    let u2 = c64::from_polar(1.0, phase_second_half);
    let s = BranchState::spin_up(&[start]).half_pulse();
    let s = s
        .move_up(|_, _| end)
        .apply_factors(|c| if c[0].position == end { u1 } else { c64::new(1.0, 0.0) });
    let s = s.pi_pulse();
    let s = s.move_up(|_, p| if p == start { end } else { p }).apply_factors(|c| {
        if c[0].spin == Spin::Up {
            u2
        } else {
            c64::new(1.0, 0.0)
        }
    });
    let s = s.half_pulse();
    s.amplitude(&[Impurity {
        position: end,
        spin: Spin::Up,
    }])
    .norm_sqr()
}

/// Closed form of [`run_single_impurity_sequence`].
pub fn single_impurity_probability(phi_geo: f64) -> f64 {
    (phi_geo / 2.0).cos().powi(2)
}

/// Quasihole transport factors of the four two-impurity branches, named by
/// where the impurities starting at `r1` and `r2` end up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExchangeFactors {
    /// `U(r1→r3) U(r2→r4)`: both moved in the first half.
    pub direct: c64,
    /// `U(r1→r4) U(r2→r3)`: both moved in the second half (exchange).
    pub exchange: c64,
    /// `U(r1→r3) U(r2→r3)`.
    pub both_at_r3: c64,
    /// `U(r1→r4) U(r2→r4)`.
    pub both_at_r4: c64,
}

impl ExchangeFactors {
    /// Abelian factors with relative phase `phi_geo` between the exchange
    /// and direct branches.
    pub fn abelian(phi_geo: f64) -> Self {
        let one = c64::new(1.0, 0.0);
        Self {
            direct: one,
            exchange: c64::from_polar(1.0, phi_geo),
            both_at_r3: one,
            both_at_r4: one,
        }
    }
}

/// Result of the two-impurity sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoImpurityOutcome {
    pub p_up_up: f64,
    /// Branch norm after each of the five stages (pulses and transports).
    pub norms: Vec<f64>,
    pub final_state: BranchState,
}

/// Ramsey, transport, echo, transport, Ramsey on two impurities starting
/// at `r1`, `r2`; returns the probability of both spins up at `r3`, `r4`.
pub fn run_two_impurity_sequence(factors: &ExchangeFactors) -> Result<TwoImpurityOutcome> {
    check_unit(factors.direct, "U13·U24")?;
    check_unit(factors.exchange, "U14·U23")?;
    check_unit(factors.both_at_r3, "U13·U23")?;
    check_unit(factors.both_at_r4, "U14·U24")?;
    let (r1, r2, r3, r4) = (0, 1, 2, 3);
    let mut norms = Vec::with_capacity(5);

    let s = BranchState::spin_up(&[r1, r2]).half_pulse();
    norms.push(s.norm_squared());
    let s = s.move_up(|_, p| match p {
        p if p == r1 => r3,
        p if p == r2 => r4,
        p => p,
    });
    norms.push(s.norm_squared());
    let s = s.pi_pulse();
    norms.push(s.norm_squared());
    let s = s.move_up(|_, p| match p {
        p if p == r1 => r4,
        p if p == r2 => r3,
        p => p,
    });
    // Every impurity has now moved once; the end points fix the factor.
    let s = s.apply_factors(|c| match (c[0].position, c[1].position) {
        (a, b) if a == r3 && b == r4 => factors.direct,
        (a, b) if a == r4 && b == r3 => factors.exchange,
        (a, b) if a == r3 && b == r3 => factors.both_at_r3,
        _ => factors.both_at_r4,
    });
    norms.push(s.norm_squared());
    let s = s.half_pulse();
    norms.push(s.norm_squared());

    // Identical impurities: both labelings of {r3↑, r4↑} add coherently.
    let up = |position| Impurity {
        position,
        spin: Spin::Up,
    };
    let amp = s.amplitude(&[up(r3), up(r4)]) + s.amplitude(&[up(r4), up(r3)]);
    Ok(TwoImpurityOutcome {
        p_up_up: amp.norm_sqr(),
        norms,
        final_state: s,
    })
}

/// Closed form of the two-impurity probability, `cos²(φ/2)/4`.
pub fn two_impurity_probability(phi_geo: f64) -> f64 {
    0.25 * (phi_geo / 2.0).cos().powi(2)
}

/// Diagonal Wilson-loop element `⟨ψ|W|ψ⟩` in polar form.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct WilsonSample {
    pub magnitude: f64,
    pub phase: f64,
}

impl WilsonSample {
    pub fn new(magnitude: f64, phase: f64) -> Result<Self> {
        if !(magnitude.is_finite() && phase.is_finite()) || !(0.0..=1.0 + 1e-12).contains(&magnitude) {
            return Err(Error::InvalidParameter(format!(
                "Wilson-loop magnitude must lie in [0, 1], got {magnitude}"
            )));
        }
        Ok(Self {
            magnitude: magnitude.min(1.0),
            phase,
        })
    }

    /// Abelian limit: a pure phase.
    pub fn abelian(phase: f64) -> Self {
        Self { magnitude: 1.0, phase }
    }

    /// `⟨ψ|W|ψ⟩` for a unitary loop matrix `w` and a state `psi` of the
    /// degenerate manifold (normalized here).
    pub fn from_loop(w: &Mat<c64>, psi: &[c64]) -> Result<Self> {
        let m = psi.len();
        if w.nrows() != m || w.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: w.nrows(),
            });
        }
        let norm = psi.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::InvalidParameter("state vector has zero norm".into()));
        }
        let mut z = c64::new(0.0, 0.0);
        for i in 0..m {
            for j in 0..m {
                z += psi[i].conj() * w[(i, j)] * psi[j];
            }
        }
        z /= norm * norm;
        Self::new(z.norm(), z.arg())
    }
}

/// `(1 + |⟨W⟩| cos φ^ψ) / 8`.
pub fn nonabelian_probability(w: &WilsonSample) -> f64 {
    (1.0 + w.magnitude * w.phase.cos()) / 8.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn single_impurity_limits() {
        assert!((run_single_impurity_sequence(0.0, 0.0) - 1.0).abs() < 1e-12);
        assert!(run_single_impurity_sequence(PI, 0.0).abs() < 1e-12);
        assert!((run_single_impurity_sequence(0.7, 0.2) - single_impurity_probability(0.5)).abs() < 1e-12);
    }

    #[test]
    fn pulses_are_unitary() {
        let s = BranchState::spin_up(&[0, 1]);
        let h = s.half_pulse();
        assert_eq!(h.n_branches(), 4);
        assert!((h.norm_squared() - 1.0).abs() < 1e-14);
        let back = h.half_pulse();
        // two Ramsey pulses return ↑↑
        let up = |p| Impurity {
            position: p,
            spin: Spin::Up,
        };
        assert!((back.amplitude(&[up(0), up(1)]) - c64::new(1.0, 0.0)).norm() < 1e-14);
        assert!((h.pi_pulse().norm_squared() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn two_impurity_limits() {
        let out = run_two_impurity_sequence(&ExchangeFactors::abelian(0.0)).unwrap();
        assert!((out.p_up_up - 0.25).abs() < 1e-12);
        assert!(out.norms.iter().all(|n| (n - 1.0).abs() < 1e-12));
        let out = run_two_impurity_sequence(&ExchangeFactors::abelian(PI)).unwrap();
        assert!(out.p_up_up.abs() < 1e-12);
        // coincident branches survive until the projection
        assert!(out
            .final_state
            .branches()
            .any(|(c, a)| c[0].position == c[1].position && a.norm() > 0.1));
    }

    #[test]
    fn rejects_non_unit_factors() {
        let mut f = ExchangeFactors::abelian(0.3);
        f.both_at_r4 = c64::new(0.5, 0.0);
        assert!(run_two_impurity_sequence(&f).is_err());
    }

    #[test]
    fn nonabelian_limits() {
        assert!((nonabelian_probability(&WilsonSample::abelian(0.0)) - 0.25).abs() < 1e-15);
        assert!((nonabelian_probability(&WilsonSample::new(0.0, 1.3).unwrap()) - 0.125).abs() < 1e-15);
        assert!(nonabelian_probability(&WilsonSample::abelian(PI)).abs() < 1e-15);
        assert!(WilsonSample::new(1.5, 0.0).is_err());
    }

    #[test]
    fn wilson_sample_from_loop() {
        let theta: f64 = 0.8;
        let w = Mat::from_fn(2, 2, |i, j| match (i, j) {
            (0, 0) | (1, 1) => c64::new(theta.cos(), 0.0),
            (0, 1) => c64::new(-theta.sin(), 0.0),
            _ => c64::new(theta.sin(), 0.0),
        });
        let s = WilsonSample::from_loop(&w, &[c64::new(1.0, 0.0), c64::new(0.0, 0.0)]).unwrap();
        assert!((s.magnitude - theta.cos()).abs() < 1e-14);
        assert!(s.phase.abs() < 1e-14);
        let d = Mat::from_fn(2, 2, |i, j| {
            if i == j {
                c64::from_polar(1.0, 0.4)
            } else {
                c64::default()
            }
        });
        let s = WilsonSample::from_loop(&d, &[c64::new(0.3, 0.1), c64::new(-0.2, 0.5)]).unwrap();
        assert!((s.magnitude - 1.0).abs() < 1e-14 && (s.phase - 0.4).abs() < 1e-14);
    }
}
