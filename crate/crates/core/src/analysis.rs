//! Closed-form Aharonov-Bohm predictions, charge fits in the defect flux,
//! exchange-phase isolation and the Gaussian-envelope charge estimator.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geomphase::wrap_phase;
use crate::manybody::{density, DensityField, SlaterState};

/// Default envelope width of the charge estimator (lattice constants).
pub const DEFAULT_ENVELOPE: f64 = 2.0;

/// Phase for a charge `q_star` circling a defect of `delta_alpha` per
/// plaquette spread over four plaquettes; paths with `πR² < 4` enclose
/// only part of it.
pub fn predict_ab_local(delta_alpha: f64, radius: f64, q_star: f64) -> f64 {
    2.0 * PI * delta_alpha * (PI * radius * radius).min(4.0) * q_star
}

/// Phase for a charge `q_star` circling background flux `alpha` per
/// plaquette plus a fully enclosed defect `delta_phi`.
pub fn predict_ab_background(delta_phi: f64, radius: f64, alpha: f64, q_star: f64) -> f64 {
    2.0 * PI * q_star * (alpha * PI * radius * radius + delta_phi)
}

/// Least-squares line `φ = 2π q* δΦ + c`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ChargeFit {
    pub q_star: f64,
    pub intercept: f64,
    pub residual_rms: f64,
    pub points: Vec<(f64, f64)>,
}

pub fn fit_charge(points: &[(f64, f64)]) -> Result<ChargeFit> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "charge fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidParameter("non-finite point in charge fit".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) {
        return Err(Error::InvalidParameter(
            "all δΦ values in the charge fit are identical".into(),
        ));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual_rms = (points
        .iter()
        .map(|p| (p.1 - slope * p.0 - intercept).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(ChargeFit {
        q_star: slope / (2.0 * PI),
        intercept,
        residual_rms,
        points: points.to_vec(),
    })
}

/// Shift each phase by a multiple of 2π onto the branch closest to its
/// predecessor; `anchor` fixes the branch of the first entry.
pub fn unwrap_sequence(phases: &[f64], anchor: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let mut prev = anchor;
    for &p in phases {
        let shifted = p + 2.0 * PI * ((prev - p) / (2.0 * PI)).round();
        out.push(shifted);
        prev = shifted;
    }
    out
}

/// `φ_geo − φ_AB` reduced to `(-π, π]`.
pub fn exchange_phase(phi_geo: f64, phi_ab: f64) -> f64 {
    wrap_phase(phi_geo - phi_ab)
}

/// Angular distance between two phases, in `[0, π]`.
pub fn phase_distance(a: f64, b: f64) -> f64 {
    wrap_phase(a - b).abs()
}

/// Magnetic length `1/√(2πα)` in lattice constants.
pub fn magnetic_length(alpha: f64) -> f64 {
    1.0 / (2.0 * PI * alpha).sqrt()
}

/// `Σ_r exp(-|r-R|²/ξ²) (⟨n_r⟩ − n⁰_r)`.
pub fn charge_expectation(
    state: &SlaterState,
    reference: &DensityField,
    pin_center: (f64, f64),
    xi: f64,
) -> Result<f64> {
    if !(xi.is_finite() && xi > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "envelope width must be positive, got {xi}"
        )));
    }
    let g = state.geometry();
    if reference.values().len() != g.n_sites() {
        return Err(Error::DimensionMismatch {
            expected: g.n_sites(),
            found: reference.values().len(),
        });
    }
    let n = density(state);
    let q = n
        .values()
        .iter()
        .zip(reference.values())
        .enumerate()
        .map(|(i, (n, n0))| {
            let (x, y) = g.site_coords(i);
            let d2 = (x as f64 - pin_center.0).powi(2) + (y as f64 - pin_center.1).powi(2);
            (-d2 / (xi * xi)).exp() * (n - n0)
        })
        .sum();
    Ok(q)
}

/// [`charge_expectation`] with a log line comparing `ξ` to the magnetic
/// length at flux `alpha`.
pub fn charge_expectation_logged(
    state: &SlaterState,
    reference: &DensityField,
    pin_center: (f64, f64),
    xi: f64,
    alpha: f64,
) -> Result<f64> {
    let l_b = magnetic_length(alpha);
    log::info!("charge envelope ξ = {xi}, magnetic length ℓ_B = {l_b:.4}");
    if xi <= l_b {
        log::warn!("charge envelope ξ = {xi} does not exceed ℓ_B = {l_b:.4}");
    }
    charge_expectation(state, reference, pin_center, xi)
}
