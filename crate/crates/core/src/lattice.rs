//! Single-particle Hofstadter Hamiltonian on an open square lattice.
//!
//! Energies are in units of the hopping amplitude `J = 1`, lengths in
//! lattice constants. Sites are indexed `x + lx * y`, plaquettes by their
//! lower-left corner `(px, py)` with `0 <= px < lx - 1`, `0 <= py < ly - 1`.
//!
//! Link phases are built from the target plaquette flux field directly: the
//! vertical link `(x, y) -> (x, y + 1)` carries `2π Σ_{x' < x} Φ(x', y)`,
//! horizontal links are phase free. For a homogeneous field this is the
//! Landau gauge `e^{i 2π α x}`; a flux defect stays confined to its
//! plaquettes. The hopping element for `i -> j` is `H[j, i] = -J e^{iθ}`,
//! so a particle moved counter-clockwise around positive flux picks up a
//! positive Aharonov-Bohm phase.

use std::f64::consts::PI;

use faer::Mat;
use num_complex::Complex64 as c64;

use crate::error::{Error, Result};

/// Lattice extent and site/plaquette indexing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub lx: usize,
    pub ly: usize,
}

impl Geometry {
    pub fn new(lx: usize, ly: usize) -> Result<Self> {
        if lx < 2 || ly < 2 {
            return Err(Error::InvalidParameter(format!(
                "lattice must be at least 2x2, got {lx}x{ly}"
            )));
        }
        Ok(Self { lx, ly })
    }

    pub fn n_sites(&self) -> usize {
        self.lx * self.ly
    }

    pub fn site_index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.lx && y < self.ly);
        x + self.lx * y
    }

    pub fn site_coords(&self, index: usize) -> (usize, usize) {
        (index % self.lx, index / self.lx)
    }

    pub fn contains_plaquette(&self, (px, py): (usize, usize)) -> bool {
        px + 1 < self.lx && py + 1 < self.ly
    }

    fn check_plaquette(&self, p: (usize, usize)) -> Result<()> {
        if self.contains_plaquette(p) {
            Ok(())
        } else {
            Err(Error::PlaquetteOutOfBounds {
                px: p.0,
                py: p.1,
                lx: self.lx,
                ly: self.ly,
            })
        }
    }

    /// Geometric center `((lx - 1) / 2, (ly - 1) / 2)`.
    pub fn center(&self) -> (f64, f64) {
        ((self.lx as f64 - 1.0) / 2.0, (self.ly as f64 - 1.0) / 2.0)
    }
}

/// Extra flux `δΦ` shared equally among a set of plaquettes.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectFlux {
    plaquettes: Vec<(usize, usize)>,
    delta_phi_total: f64,
}

impl DefectFlux {
    pub fn none() -> Self {
        Self {
            plaquettes: Vec::new(),
            delta_phi_total: 0.0,
        }
    }

    /// `delta_phi_total` split over `plaquettes` (duplicates removed).
    pub fn new(mut plaquettes: Vec<(usize, usize)>, delta_phi_total: f64) -> Result<Self> {
        if !delta_phi_total.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "defect flux must be finite, got {delta_phi_total}"
            )));
        }
        plaquettes.sort_unstable();
        plaquettes.dedup();
        if plaquettes.is_empty() && delta_phi_total != 0.0 {
            return Err(Error::InvalidParameter(
                "nonzero defect flux needs at least one plaquette".into(),
            ));
        }
        Ok(Self {
            plaquettes,
            delta_phi_total,
        })
    }

    /// The plaquettes touching the lattice center: the central 2x2 block
    /// for odd sizes, the single central plaquette for even ones.
    pub fn central(geometry: Geometry, delta_phi_total: f64) -> Result<Self> {
        let (x0, y0) = geometry.center();
        let near = |p: usize, c: f64| ((p as f64 + 0.5) - c).abs() < 1.0;
        let plaquettes = (0..geometry.ly - 1)
            .flat_map(|py| (0..geometry.lx - 1).map(move |px| (px, py)))
            .filter(|&(px, py)| near(px, x0) && near(py, y0))
            .collect();
        Self::new(plaquettes, delta_phi_total)
    }

    pub fn plaquettes(&self) -> &[(usize, usize)] {
        &self.plaquettes
    }

    pub fn delta_phi_total(&self) -> f64 {
        self.delta_phi_total
    }

    /// Per-plaquette share `δα = δΦ / |plaquettes|`.
    pub fn per_plaquette(&self) -> f64 {
        if self.plaquettes.is_empty() {
            0.0
        } else {
            self.delta_phi_total / self.plaquettes.len() as f64
        }
    }

    fn contains(&self, p: (usize, usize)) -> bool {
        self.plaquettes.binary_search(&p).is_ok()
    }
}

/// Lattice geometry, background flux `α` and the localized flux defect.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSpec {
    geometry: Geometry,
    alpha: f64,
    defect: DefectFlux,
    center: (f64, f64),
}

impl LatticeSpec {
    /// Homogeneous flux `alpha` per plaquette, no defect. Values outside
    /// `[0, 1)` are reduced modulo one.
    pub fn new(lx: usize, ly: usize, alpha: f64) -> Result<Self> {
        let geometry = Geometry::new(lx, ly)?;
        if !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be finite, got {alpha}")));
        }
        let reduced = alpha.rem_euclid(1.0);
        if reduced != alpha {
            log::warn!("background flux {alpha} reduced to {reduced} (mod 1)");
        }
        Ok(Self {
            geometry,
            alpha: reduced,
            defect: DefectFlux::none(),
            center: geometry.center(),
        })
    }

    /// Thread `delta_phi` through the central plaquettes.
    pub fn with_central_defect(self, delta_phi: f64) -> Result<Self> {
        let defect = DefectFlux::central(self.geometry, delta_phi)?;
        self.with_defect(defect)
    }

    pub fn with_defect(mut self, defect: DefectFlux) -> Result<Self> {
        for &p in defect.plaquettes() {
            self.geometry.check_plaquette(p)?;
        }
        self.defect = defect;
        Ok(self)
    }

    pub fn with_center(mut self, center: (f64, f64)) -> Result<Self> {
        if !(center.0.is_finite() && center.1.is_finite()) {
            return Err(Error::InvalidParameter("center must be finite".into()));
        }
        self.center = center;
        Ok(self)
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn lx(&self) -> usize {
        self.geometry.lx
    }

    pub fn ly(&self) -> usize {
        self.geometry.ly
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn defect(&self) -> &DefectFlux {
        &self.defect
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    /// Target flux through plaquette `p`: `α + δα` on defect plaquettes,
    /// `α` elsewhere.
    pub fn target_flux(&self, p: (usize, usize)) -> f64 {
        if self.defect.contains(p) {
            self.alpha + self.defect.per_plaquette()
        } else {
            self.alpha
        }
    }
}

/// Radial shape of a pin with width `σ` at distance `d` from its center.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PinProfile {
    /// `exp(-d² / 2σ²)`.
    #[default]
    Standard,
    /// `exp(-d² / σ²)`, i.e. the standard profile with width `σ/√2`.
    Compact,
}

impl PinProfile {
    fn envelope(self, d2: f64, width: f64) -> f64 {
        let scale = match self {
            PinProfile::Standard => 2.0 * width * width,
            PinProfile::Compact => width * width,
        };
        (-d2 / scale).exp()
    }
}

/// Gaussian on-site potential, `V exp(-|r - R|² / 2σ²)` by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinSpec {
    pub center: (f64, f64),
    pub strength: f64,
    pub width: f64,
    pub profile: PinProfile,
}

impl PinSpec {
    pub fn new(center: (f64, f64), strength: f64, width: f64) -> Result<Self> {
        let pin = Self {
            center,
            strength,
            width,
            profile: PinProfile::Standard,
        };
        pin.validate()?;
        Ok(pin)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.center.0, self.center.1, self.strength, self.width]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter(format!("non-finite pin parameter in {self:?}")));
        }
        if self.width <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "pin width must be positive, got {}",
                self.width
            )));
        }
        Ok(())
    }

    pub fn with_profile(mut self, profile: PinProfile) -> Self {
        self.profile = profile;
        self
    }

    /// The same pin moved to `center`.
    pub fn at(&self, center: (f64, f64)) -> Self {
        Self { center, ..*self }
    }

    pub fn potential(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        self.strength * self.profile.envelope(dx * dx + dy * dy, self.width)
    }
}

/// Dense Hermitian single-particle Hamiltonian.
#[derive(Debug, Clone)]
pub struct HamiltonianMatrix {
    geometry: Geometry,
    matrix: Mat<c64>,
}

impl HamiltonianMatrix {
    /// Wrap an existing matrix. Used for gauge-transformed copies and tests;
    /// Hermiticity is checked to `1e-12`.
    pub fn from_matrix(geometry: Geometry, matrix: Mat<c64>) -> Result<Self> {
        let n = geometry.n_sites();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: matrix.nrows(),
            });
        }
        let h = Self { geometry, matrix };
        let dev = h.hermiticity_defect();
        if !(dev < 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "matrix is not Hermitian (defect {dev:.3e})"
            )));
        }
        Ok(h)
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Mat<c64> {
        &self.matrix
    }

    pub fn get(&self, row: usize, col: usize) -> c64 {
        self.matrix[(row, col)]
    }

    /// `max |H - H†|`.
    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            for i in 0..n {
                worst = worst.max((self.matrix[(i, j)] - self.matrix[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// Conjugate by `diag(e^{iχ_r})`: `H' = D H D†`.
    pub fn gauge_transformed(&self, chi: &[f64]) -> Result<Self> {
        if chi.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: chi.len(),
            });
        }
        let phases: Vec<c64> = chi.iter().map(|&c| c64::from_polar(1.0, c)).collect();
        let matrix = Mat::from_fn(self.dim(), self.dim(), |i, j| {
            phases[i] * self.matrix[(i, j)] * phases[j].conj()
        });
        Ok(Self {
            geometry: self.geometry,
            matrix,
        })
    }

    /// Add `Σ_pins V(r)` to the diagonal of a copy.
    pub fn with_pins(&self, pins: &[PinSpec]) -> Result<Self> {
        for pin in pins {
            pin.validate()?;
        }
        let mut out = self.clone();
        for idx in 0..self.dim() {
            let (x, y) = self.geometry.site_coords(idx);
            let v: f64 = pins.iter().map(|p| p.potential(x as f64, y as f64)).sum();
            out.matrix[(idx, idx)] += c64::new(v, 0.0);
        }
        Ok(out)
    }
}

fn hopping(spec: &LatticeSpec) -> Mat<c64> {
    let g = spec.geometry();
    let n = g.n_sites();
    let mut h = Mat::<c64>::zeros(n, n);
    let minus_j = c64::new(-1.0, 0.0);
    for y in 0..g.ly {
        for x in 0..g.lx {
            let i = g.site_index(x, y);
            if x + 1 < g.lx {
                let j = g.site_index(x + 1, y);
                h[(j, i)] = minus_j;
                h[(i, j)] = minus_j;
            }
            if y + 1 < g.ly {
                // Flux of the plaquettes to the left of this link.
                let enclosed: f64 = (0..x).map(|px| spec.target_flux((px, y))).sum();
                let hop = minus_j * c64::from_polar(1.0, 2.0 * PI * enclosed);
                let j = g.site_index(x, y + 1);
                h[(j, i)] = hop;
                h[(i, j)] = hop.conj();
            }
        }
    }
    h
}

/// Hofstadter hopping plus the on-site pin potentials, open boundaries.
pub fn build_hamiltonian(spec: &LatticeSpec, pins: &[PinSpec]) -> Result<HamiltonianMatrix> {
    HamiltonianMatrix {
        geometry: spec.geometry(),
        matrix: hopping(spec),
    }
    .with_pins(pins)
}

/// Flux through plaquette `p` reconstructed from the link phases of `h`,
/// in units of the flux quantum, reduced to `(-1/2, 1/2]`.
pub fn plaquette_flux(h: &HamiltonianMatrix, p: (usize, usize)) -> Result<f64> {
    let g = h.geometry();
    g.check_plaquette(p)?;
    let (px, py) = p;
    let corners = [
        g.site_index(px, py),
        g.site_index(px + 1, py),
        g.site_index(px + 1, py + 1),
        g.site_index(px, py + 1),
    ];
    let mut product = c64::new(1.0, 0.0);
    for k in 0..4 {
        let from = corners[k];
        let to = corners[(k + 1) % 4];
        let link = -h.get(to, from);
        let norm = link.norm();
        if norm == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "missing link {from} -> {to} around plaquette {p:?}"
            )));
        }
        product *= link / norm;
    }
    let flux = product.arg() / (2.0 * PI);
    // arg is in (-π, π]; keep the upper end closed.
    Ok(if flux <= -0.5 { flux + 1.0 } else { flux })
}
