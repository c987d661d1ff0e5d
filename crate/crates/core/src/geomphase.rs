//! Adiabatic transport of pinning potentials and gauge-invariant geometric
//! phases from closed products of Slater-determinant overlaps.
//!
//! For ground states `ψ_0 … ψ_N` along a discretized loop the phase is
//!
//! ```text
//! φ_geo = Im log ( ⟨ψ_0|ψ_N⟩ · Π_{j<N} ⟨ψ_{j+1}|ψ_j⟩ )
//! ```
//!
//! which is invariant under any re-phasing (or, for Slater states, any
//! unitary re-basing) of the intermediate states. It is only defined
//! modulo 2π. The winding number that fixes the branch is obtained from
//! [`enclosed_phase`], a surface sum of small gauge-invariant cell phases
//! over a polar grid spanning the loop.

use std::f64::consts::PI;

use faer::Mat;
use num_complex::Complex64 as c64;

use crate::error::{Error, Result};
use crate::lattice::{build_hamiltonian, HamiltonianMatrix, LatticeSpec, PinSpec};
use crate::manybody::{ground_slater, ground_slater_projected, BandProjector, SlaterState};
use crate::parallel;

/// Below this smallest singular value of the orbital overlap matrix two
/// consecutive occupied subspaces are treated as orthogonal.
pub const ALIGNMENT_TOLERANCE: f64 = 1e-8;

/// Minimum number of steps for any path.
pub const MIN_STEPS: usize = 8;

/// Reduce an angle to `(-π, π]`.
pub fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    /// One pin around a full circle.
    SingleLoop,
    /// Two pins at opposite points, each moving through half the circle.
    ExchangeHalfLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    CounterClockwise,
    Clockwise,
}

impl Orientation {
    fn sign(self) -> f64 {
        match self {
            Orientation::CounterClockwise => 1.0,
            Orientation::Clockwise => -1.0,
        }
    }
}

/// Discretized circular trajectory of all pin centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPlan {
    kind: PathKind,
    center: (f64, f64),
    radius: f64,
    n_steps: usize,
    start_angle: f64,
    orientation: Orientation,
}

impl PathPlan {
    pub fn new(kind: PathKind, center: (f64, f64), radius: f64, n_steps: usize) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "radius must be positive, got {radius}"
            )));
        }
        if !(center.0.is_finite() && center.1.is_finite()) {
            return Err(Error::InvalidParameter("path center must be finite".into()));
        }
        if n_steps < MIN_STEPS {
            return Err(Error::InvalidParameter(format!(
                "n_steps must be at least {MIN_STEPS}, got {n_steps}"
            )));
        }
        Ok(Self {
            kind,
            center,
            radius,
            n_steps,
            start_angle: 0.0,
            orientation: Orientation::CounterClockwise,
        })
    }

    pub fn single_loop(center: (f64, f64), radius: f64, n_steps: usize) -> Result<Self> {
        Self::new(PathKind::SingleLoop, center, radius, n_steps)
    }

    pub fn exchange(center: (f64, f64), radius: f64, n_steps: usize) -> Result<Self> {
        Self::new(PathKind::ExchangeHalfLoop, center, radius, n_steps)
    }

    /// Angle of the first pin at step 0 (default 0: pin at `(x0 + R, y0)`).
    pub fn with_start_angle(mut self, angle: f64) -> Self {
        self.start_angle = angle;
        self
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    /// The same loop traversed the other way.
    pub fn reversed(self) -> Self {
        let orientation = match self.orientation {
            Orientation::CounterClockwise => Orientation::Clockwise,
            Orientation::Clockwise => Orientation::CounterClockwise,
        };
        self.with_orientation(orientation)
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn start_angle(&self) -> f64 {
        self.start_angle
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    fn sweep_angle(&self) -> f64 {
        match self.kind {
            PathKind::SingleLoop => 2.0 * PI,
            PathKind::ExchangeHalfLoop => PI,
        }
    }

    /// Angle of the first pin at step `j`.
    pub fn angle(&self, j: usize) -> f64 {
        self.start_angle + self.orientation.sign() * self.sweep_angle() * j as f64 / self.n_steps as f64
    }

    fn point(&self, theta: f64) -> (f64, f64) {
        (
            self.center.0 + self.radius * theta.cos(),
            self.center.1 + self.radius * theta.sin(),
        )
    }

    /// Pin centers at step `j` (`0 <= j <= n_steps`). The last step repeats
    /// the first configuration exactly (pins swapped for an exchange).
    pub fn pin_positions(&self, j: usize) -> Vec<(f64, f64)> {
        assert!(j <= self.n_steps, "step {j} beyond {}", self.n_steps);
        if j == self.n_steps {
            let mut first = self.pin_positions(0);
            first.reverse();
            return first;
        }
        let theta = self.angle(j);
        match self.kind {
            PathKind::SingleLoop => vec![self.point(theta)],
            PathKind::ExchangeHalfLoop => vec![self.point(theta), self.point(theta + PI)],
        }
    }

    pub fn configurations(&self) -> Vec<Vec<(f64, f64)>> {
        (0..=self.n_steps).map(|j| self.pin_positions(j)).collect()
    }

    /// Whether every pin position stays inside the lattice rectangle.
    pub fn fits(&self, spec: &LatticeSpec) -> bool {
        let (xmax, ymax) = ((spec.lx() - 1) as f64, (spec.ly() - 1) as f64);
        let (cx, cy) = self.center;
        cx - self.radius >= 0.0 && cx + self.radius <= xmax && cy - self.radius >= 0.0 && cy + self.radius <= ymax
    }
}

/// Per-step overlap diagnostics and the resulting closed-loop phase.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PhaseRecord {
    /// Per-step phases in the transported gauge; they sum to `phi_unwrapped`.
    pub step_args: Vec<f64>,
    /// `|⟨ψ_{j+1}|ψ_j⟩|` for each step.
    pub step_mags: Vec<f64>,
    /// `|⟨ψ_0|ψ_N⟩|`; one up to round-off for a closed path.
    pub closure_mag: f64,
    pub phi_unwrapped: f64,
    /// Closed-product phase reduced to `(-π, π]`.
    pub phi_mod: f64,
    pub min_mag: f64,
    /// Branch index: `phi_unwrapped = phi_mod + 2π winding`.
    pub winding: i64,
    /// `max |step_args| < π/2`.
    pub reliable: bool,
    transport_args: Vec<f64>,
}

impl PhaseRecord {
    fn assemble(transport_args: Vec<f64>, step_mags: Vec<f64>, closure_mag: f64, phi_mod: f64, winding: i64) -> Self {
        let n = transport_args.len();
        let phi_unwrapped = phi_mod + 2.0 * PI * winding as f64;
        let transported: f64 = transport_args.iter().sum();
        let twist = (phi_unwrapped - transported) / n as f64;
        let step_args: Vec<f64> = transport_args.iter().map(|a| a + twist).collect();
        let reliable = step_args.iter().all(|a| a.abs() < PI / 2.0);
        let min_mag = step_mags.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            step_args,
            step_mags,
            closure_mag,
            phi_unwrapped,
            phi_mod,
            min_mag,
            winding,
            reliable,
            transport_args,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.step_args.len()
    }

    /// The same record on branch `winding`.
    pub fn with_winding(&self, winding: i64) -> Self {
        Self::assemble(
            self.transport_args.clone(),
            self.step_mags.clone(),
            self.closure_mag,
            self.phi_mod,
            winding,
        )
    }

    /// The branch closest to `target`.
    pub fn nearest_branch(&self, target: f64) -> Self {
        self.with_winding(((target - self.phi_mod) / (2.0 * PI)).round() as i64)
    }
}

/// `⟨a|b⟩ = det(A†B)` for two Slater determinants with orbital matrices
/// `A`, `B`.
pub fn slater_overlap(a: &SlaterState, b: &SlaterState) -> Result<c64> {
    check_compatible(a, b)?;
    let m = a.orbitals().adjoint() * b.orbitals();
    Ok(m.determinant())
}

fn check_compatible(a: &SlaterState, b: &SlaterState) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if a.n_particles() != b.n_particles() {
        return Err(Error::DimensionMismatch {
            expected: a.n_particles(),
            found: b.n_particles(),
        });
    }
    Ok(())
}

/// Re-base `cur` by the unitary polar factor of `⟨cur|prev⟩` so that the
/// orbital overlap with `prev` becomes Hermitian positive definite. The
/// occupied subspace is unchanged.
pub fn align_to_previous(prev: &SlaterState, cur: &SlaterState) -> Result<SlaterState> {
    check_compatible(prev, cur)?;
    let m = cur.orbitals().adjoint() * prev.orbitals();
    let svd = m.svd().map_err(|_| Error::EigenSolver)?;
    let s = svd.S().column_vector();
    let smallest = (0..s.nrows()).map(|i| s[i].re).fold(f64::INFINITY, f64::min);
    if !(smallest > ALIGNMENT_TOLERANCE) {
        return Err(Error::AlignmentLost {
            smallest_singular: smallest,
        });
    }
    let polar: Mat<c64> = svd.U() * svd.V().adjoint();
    cur.rebased(polar.as_ref())
}

/// Phase record of a closed sequence `ψ_0 … ψ_N` (`ψ_N` the same physical
/// state as `ψ_0`), transported step by step.
pub fn bargmann_record(states: &[SlaterState]) -> Result<PhaseRecord> {
    if states.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "closed path needs at least 3 states, got {}",
            states.len()
        )));
    }
    let n = states.len() - 1;

    // Gauge-invariant closed product, accumulated as a sum of arguments to
    // stay clear of underflow in long products.
    let mut raw = 0.0;
    for j in 0..n {
        let o = slater_overlap(&states[j + 1], &states[j]).map_err(|e| e.at_step(j))?;
        raw += o.arg();
    }
    let closing = slater_overlap(&states[0], &states[n])?;
    let phi_mod = wrap_phase(raw + closing.arg());

    let mut transported = states[0].clone();
    let mut transport_args = Vec::with_capacity(n);
    let mut step_mags = Vec::with_capacity(n);
    for (j, next) in states.iter().enumerate().skip(1) {
        let aligned = align_to_previous(&transported, next).map_err(|e| e.at_step(j))?;
        let o = slater_overlap(&aligned, &transported)?;
        transport_args.push(o.arg());
        step_mags.push(o.norm());
        transported = aligned;
    }
    Ok(PhaseRecord::assemble(
        transport_args,
        step_mags,
        closing.norm(),
        phi_mod,
        0,
    ))
}

/// Ground state for a set of pin centers.
fn pinned_ground_state(
    base: &HamiltonianMatrix,
    template: &PinSpec,
    centers: &[(f64, f64)],
    n: usize,
    projector: Option<&BandProjector>,
) -> Result<SlaterState> {
    let pins: Vec<PinSpec> = centers.iter().map(|&c| template.at(c)).collect();
    let h = base.with_pins(&pins)?;
    match projector {
        Some(p) => ground_slater_projected(&h, p, n),
        None => ground_slater(&h, n),
    }
}

/// Ground states at every step of `path` (inclusive of the closing step).
pub fn path_states(
    spec: &LatticeSpec,
    pin_template: &PinSpec,
    path: &PathPlan,
    n: usize,
    projector: Option<&BandProjector>,
) -> Result<Vec<SlaterState>> {
    pin_template.validate()?;
    let base = build_hamiltonian(spec, &[])?;
    let configs = path.configurations();
    let states = parallel::map_range(configs.len(), |j| {
        pinned_ground_state(&base, pin_template, &configs[j], n, projector).map_err(|e| e.at_step(j))
    });
    states.into_iter().collect()
}

/// Transport the pins along `path`, solving for the ground state at each
/// step, and return the closed-loop phase record (principal branch).
pub fn sweep(
    spec: &LatticeSpec,
    pin_template: &PinSpec,
    path: &PathPlan,
    n: usize,
    projector: Option<&BandProjector>,
) -> Result<PhaseRecord> {
    let states = path_states(spec, pin_template, path, n, projector)?;
    bargmann_record(&states)
}

/// Exchange two identical pins along opposite halves of a circle of
/// `radius` around the lattice center.
pub fn run_exchange(
    spec: &LatticeSpec,
    pin_template: &PinSpec,
    radius: f64,
    n_steps: usize,
    n: usize,
    projector: Option<&BandProjector>,
) -> Result<PhaseRecord> {
    let path = PathPlan::exchange(spec.center(), radius, n_steps)?;
    if !path.fits(spec) {
        return Err(Error::InvalidParameter(format!(
            "exchange circle of radius {radius} does not fit in a {}x{} lattice",
            spec.lx(),
            spec.ly()
        )));
    }
    sweep(spec, pin_template, &path, n, projector)
}

/// Resolution of the polar grid used by [`enclosed_phase`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FluxGrid {
    /// Upper bound on the area of a grid cell (lattice units).
    pub max_cell_area: f64,
    /// Upper bound on the spacing of concentric rings.
    pub max_radial_step: f64,
    /// Inner rings never drop below this many points.
    pub min_ring_points: usize,
}

impl Default for FluxGrid {
    fn default() -> Self {
        Self {
            max_cell_area: 0.75,
            max_radial_step: 1.0,
            min_ring_points: 8,
        }
    }
}

/// Surface sum of cell phases over the disk bounded by a single-pin loop.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EnclosedPhase {
    /// Unwrapped phase enclosed by the loop, same orientation as the path.
    pub total: f64,
    /// Largest `|cell phase|`; the total is trustworthy while below π/2.
    pub max_cell_phase: f64,
    pub n_cells: usize,
    pub n_states: usize,
    pub ring_points: Vec<usize>,
}

impl EnclosedPhase {
    pub fn reliable(&self) -> bool {
        self.max_cell_phase < PI / 2.0
    }

    /// Branch index placing `phi_mod` on the enclosed-phase branch.
    pub fn winding_for(&self, phi_mod: f64) -> i64 {
        ((self.total - phi_mod) / (2.0 * PI)).round() as i64
    }
}

/// Phase of the closed polygon `v_0 → v_1 → … → v_0`.
pub fn polygon_phase(vertices: &[&SlaterState]) -> Result<f64> {
    let p = vertices.len();
    let mut sum = 0.0;
    for k in 0..p {
        sum += slater_overlap(vertices[(k + 1) % p], vertices[k])?.arg();
    }
    Ok(wrap_phase(sum))
}

fn ring_layout(path: &PathPlan, grid: &FluxGrid) -> Vec<usize> {
    let r = path.radius();
    let n = path.n_steps();
    let arc = 2.0 * PI * r / n as f64;
    let step = grid.max_radial_step.min(grid.max_cell_area / arc);
    let rings = (r / step).ceil().max(1.0) as usize;
    let dr = r / rings as f64;
    let mut counts = vec![n; rings];
    for k in (0..rings - 1).rev() {
        let outer = counts[k + 1];
        let half = outer / 2;
        let r_outer = dr * (k + 2) as f64;
        let cell_area = dr * 2.0 * PI * r_outer / half as f64;
        counts[k] = if outer.is_multiple_of(2) && half >= grid.min_ring_points && cell_area <= grid.max_cell_area {
            half
        } else {
            outer
        };
    }
    counts
}

/// Unwrapped phase enclosed by a single-pin loop, as the sum of the
/// gauge-invariant phases of the cells of a polar grid whose outer ring is
/// the loop itself. Modulo 2π it equals the loop phase exactly.
pub fn enclosed_phase(
    spec: &LatticeSpec,
    pin_template: &PinSpec,
    path: &PathPlan,
    n: usize,
    projector: Option<&BandProjector>,
    grid: &FluxGrid,
) -> Result<EnclosedPhase> {
    if path.kind() != PathKind::SingleLoop {
        return Err(Error::InvalidParameter("enclosed phase needs a single-pin loop".into()));
    }
    if !(grid.max_cell_area > 0.0 && grid.max_radial_step > 0.0) {
        return Err(Error::InvalidParameter(format!("invalid flux grid {grid:?}")));
    }
    pin_template.validate()?;
    let counts = ring_layout(path, grid);
    let rings = counts.len();
    let dr = path.radius() / rings as f64;
    let (cx, cy) = path.center();

    // Counter-clockwise point set; a clockwise loop covers the same points.
    let mut points = vec![(cx, cy)];
    let mut offsets = Vec::with_capacity(rings);
    for (k, &m) in counts.iter().enumerate() {
        offsets.push(points.len());
        let r = dr * (k + 1) as f64;
        for i in 0..m {
            let theta = path.start_angle() + 2.0 * PI * i as f64 / m as f64;
            points.push((cx + r * theta.cos(), cy + r * theta.sin()));
        }
    }

    let base = build_hamiltonian(spec, &[])?;
    let states: Vec<SlaterState> = parallel::map_range(points.len(), |i| {
        pinned_ground_state(&base, pin_template, &points[i..=i], n, projector).map_err(|e| e.at_step(i))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let at = |k: usize, i: usize| &states[offsets[k] + i % counts[k]];
    let mut cells: Vec<Vec<&SlaterState>> = Vec::new();
    for i in 0..counts[0] {
        cells.push(vec![&states[0], at(0, i), at(0, i + 1)]);
    }
    for k in 0..rings - 1 {
        let ratio = counts[k + 1] / counts[k];
        for i in 0..counts[k] {
            let mut cell = vec![at(k, i)];
            cell.extend((0..=ratio).map(|s| at(k + 1, ratio * i + s)));
            cell.push(at(k, i + 1));
            cells.push(cell);
        }
    }
    let phases = parallel::try_map(&cells, |c| polygon_phase(c))?;
    let total: f64 = phases.iter().sum::<f64>() * path.orientation().sign();
    let max_cell_phase = phases.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    Ok(EnclosedPhase {
        total,
        max_cell_phase,
        n_cells: cells.len(),
        n_states: states.len(),
        ring_points: counts,
    })
}
