//! Ground states of non-interacting fermions: Slater determinants built
//! from the lowest eigenvectors of a lattice Hamiltonian, optionally
//! restricted to the lowest Hofstadter band.

use faer::{Mat, MatRef, Side};
use num_complex::Complex64 as c64;

use crate::error::{Error, Result};
use crate::lattice::{Geometry, HamiltonianMatrix};

/// Smallest admissible gap `ε_{N+1} - ε_N` (units of `J`). Below it the
/// N-particle ground state is not unique and geometric phases are undefined.
pub const DEGENERACY_TOLERANCE: f64 = 1e-8;

/// Fraction of the spectrum scanned for the band gap of the projector.
pub const BAND_SCAN_FRACTION: f64 = 0.4;

/// Full eigendecomposition, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub energies: Vec<f64>,
    pub vectors: Mat<c64>,
}

fn eigh(matrix: MatRef<'_, c64>) -> Result<Spectrum> {
    let evd = matrix.self_adjoint_eigen(Side::Lower).map_err(|_| Error::EigenSolver)?;
    let s = evd.S().column_vector();
    let energies = (0..s.nrows()).map(|i| s[i].re).collect();
    Ok(Spectrum {
        energies,
        vectors: evd.U().to_owned(),
    })
}

pub fn diagonalize(h: &HamiltonianMatrix) -> Result<Spectrum> {
    eigh(h.matrix().as_ref())
}

/// N-fermion Slater determinant. Columns of `orbitals` are orthonormal and
/// span the occupied subspace; `orbital_energies` and `gap` describe the
/// spectrum of that subspace and survive any unitary re-basing of columns.
#[derive(Debug, Clone)]
pub struct SlaterState {
    geometry: Geometry,
    orbitals: Mat<c64>,
    orbital_energies: Vec<f64>,
    gap: f64,
}

impl SlaterState {
    /// Assemble a state from explicit orbitals. Orthonormality is checked
    /// to `1e-10`.
    pub fn from_orbitals(geometry: Geometry, orbitals: Mat<c64>, orbital_energies: Vec<f64>, gap: f64) -> Result<Self> {
        if orbitals.nrows() != geometry.n_sites() {
            return Err(Error::DimensionMismatch {
                expected: geometry.n_sites(),
                found: orbitals.nrows(),
            });
        }
        if orbital_energies.len() != orbitals.ncols() {
            return Err(Error::DimensionMismatch {
                expected: orbitals.ncols(),
                found: orbital_energies.len(),
            });
        }
        let state = Self {
            geometry,
            orbitals,
            orbital_energies,
            gap,
        };
        let defect = state.orthonormality_defect();
        if !(defect < 1e-10) {
            return Err(Error::InvalidParameter(format!(
                "orbitals not orthonormal (defect {defect:.3e})"
            )));
        }
        Ok(state)
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn dim(&self) -> usize {
        self.orbitals.nrows()
    }

    pub fn n_particles(&self) -> usize {
        self.orbitals.ncols()
    }

    pub fn orbitals(&self) -> &Mat<c64> {
        &self.orbitals
    }

    pub fn orbital_energies(&self) -> &[f64] {
        &self.orbital_energies
    }

    pub fn gap(&self) -> f64 {
        self.gap
    }

    /// `Σ_k ε_k`.
    pub fn total_energy(&self) -> f64 {
        self.orbital_energies.iter().sum()
    }

    /// `max |C†C - 1|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = self.orbitals.adjoint() * &self.orbitals;
        let n = gram.nrows();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            for i in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - c64::new(target, 0.0)).norm());
            }
        }
        worst
    }

    /// Same occupied subspace with columns mixed by the `N x N` unitary `u`.
    pub fn rebased(&self, u: MatRef<'_, c64>) -> Result<Self> {
        let n = self.n_particles();
        if u.nrows() != n || u.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: u.nrows(),
            });
        }
        Ok(Self {
            geometry: self.geometry,
            orbitals: &self.orbitals * u,
            orbital_energies: self.orbital_energies.clone(),
            gap: self.gap,
        })
    }
}

fn slater_from_spectrum(
    geometry: Geometry,
    energies: &[f64],
    vectors: MatRef<'_, c64>,
    n: usize,
) -> Result<SlaterState> {
    let dim = energies.len();
    if n == 0 || n > dim {
        return Err(Error::InvalidParameter(format!(
            "particle number {n} outside 1..={dim}"
        )));
    }
    let gap = if n < dim {
        energies[n] - energies[n - 1]
    } else {
        f64::INFINITY
    };
    if gap < DEGENERACY_TOLERANCE {
        return Err(Error::GroundStateDegenerate {
            n,
            gap,
            tolerance: DEGENERACY_TOLERANCE,
        });
    }
    Ok(SlaterState {
        geometry,
        orbitals: vectors.subcols(0, n).to_owned(),
        orbital_energies: energies[..n].to_vec(),
        gap,
    })
}

/// Fill the `n` lowest orbitals of `h`.
pub fn ground_slater(h: &HamiltonianMatrix, n: usize) -> Result<SlaterState> {
    if n == 0 || n > h.dim() {
        return Err(Error::InvalidParameter(format!(
            "particle number {n} outside 1..={}",
            h.dim()
        )));
    }
    let spectrum = diagonalize(h)?;
    slater_from_spectrum(h.geometry(), &spectrum.energies, spectrum.vectors.as_ref(), n)
}

/// Site occupations `<n_r>`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    geometry: Geometry,
    values: Vec<f64>,
}

impl DensityField {
    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[self.geometry.site_index(x, y)]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// `<n_r> = Σ_k |φ_k(r)|²`.
pub fn density(state: &SlaterState) -> DensityField {
    let c = state.orbitals();
    let values = (0..c.nrows())
        .map(|r| (0..c.ncols()).map(|k| c[(r, k)].norm_sqr()).sum())
        .collect();
    DensityField {
        geometry: state.geometry(),
        values,
    }
}

/// Orthonormal basis of the lowest band of a pin-free Hamiltonian.
#[derive(Debug, Clone)]
pub struct BandProjector {
    geometry: Geometry,
    basis: Mat<c64>,
    band_gap: f64,
}

impl BandProjector {
    /// Projector onto the whole single-particle space.
    pub fn full(geometry: Geometry) -> Self {
        let n = geometry.n_sites();
        Self {
            geometry,
            basis: Mat::identity(n, n),
            band_gap: f64::INFINITY,
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn basis(&self) -> &Mat<c64> {
        &self.basis
    }

    /// Band dimension `M`.
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Width of the spectral window identified as the band gap.
    pub fn band_gap(&self) -> f64 {
        self.band_gap
    }
}

/// Minimum ratio between the widest window of the low spectrum and the
/// width the same number of levels would span at the mean level spacing.
pub const BAND_GAP_CONTRAST: f64 = 2.0;

/// Eigenvectors of `h_free` below the mid-gap energy of the lowest band.
///
/// With open boundaries chiral edge states thread the bulk gap at a
/// spacing that can rival the largest single level gap, so the gap is
/// located as the widest energy window spanned by `k = ⌈√dim⌉` consecutive
/// levels within the lowest 40% of the spectrum. The band consists of all
/// levels below the middle of that window, i.e. the bulk band plus the
/// lower half of the in-gap edge states. Fails when the window is narrower
/// than [`BAND_GAP_CONTRAST`] times `k` mean level spacings.
pub fn lowest_band_projector(h_free: &HamiltonianMatrix) -> Result<BandProjector> {
    let spectrum = diagonalize(h_free)?;
    let e = &spectrum.energies;
    let dim = e.len();
    let k = ((dim as f64).sqrt().ceil() as usize).clamp(1, dim - 1);
    let scan = ((dim as f64 * BAND_SCAN_FRACTION) as usize).clamp(k + 1, dim);
    let (lower, window) = (0..scan - k)
        .map(|i| (i, e[i + k] - e[i]))
        .fold(
            (0, f64::NEG_INFINITY),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        );
    let mean_spacing = (e[dim - 1] - e[0]) / (dim - 1) as f64;
    let threshold = BAND_GAP_CONTRAST * k as f64 * mean_spacing;
    if !(window >= threshold) {
        return Err(Error::NoBandGap {
            largest_gap: window,
            threshold,
        });
    }
    let mid_gap = 0.5 * (e[lower] + e[lower + k]);
    let rank = e.iter().take_while(|&&x| x < mid_gap).count();
    Ok(BandProjector {
        geometry: h_free.geometry(),
        basis: spectrum.vectors.subcols(0, rank).to_owned(),
        band_gap: window,
    })
}

/// Ground state of `P†HP` in the band subspace, lifted back to sites.
pub fn ground_slater_projected(h: &HamiltonianMatrix, projector: &BandProjector, n: usize) -> Result<SlaterState> {
    if projector.basis.nrows() != h.dim() {
        return Err(Error::DimensionMismatch {
            expected: h.dim(),
            found: projector.basis.nrows(),
        });
    }
    if n == 0 || n > projector.rank() {
        return Err(Error::InvalidParameter(format!(
            "particle number {n} outside 1..={} (band dimension)",
            projector.rank()
        )));
    }
    let p = &projector.basis;
    let reduced = p.adjoint() * (h.matrix() * p);
    // Symmetrize against round-off before the Hermitian solve.
    let m = reduced.nrows();
    let reduced = Mat::from_fn(m, m, |i, j| (reduced[(i, j)] + reduced[(j, i)].conj()) * 0.5);
    let spectrum = eigh(reduced.as_ref())?;
    let lifted = p * &spectrum.vectors;
    slater_from_spectrum(h.geometry(), &spectrum.energies, lifted.as_ref(), n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_hamiltonian, LatticeSpec, PinSpec};

    #[test]
    fn four_cycle_ground_state() {
        let spec = LatticeSpec::new(2, 2, 0.0).unwrap();
        let h = build_hamiltonian(&spec, &[]).unwrap();
        let s = ground_slater(&h, 1).unwrap();
        assert!((s.orbital_energies()[0] + 2.0).abs() < 1e-12);
        for r in 0..4 {
            assert!((s.orbitals()[(r, 0)].norm() - 0.5).abs() < 1e-12);
        }
        let d = density(&s);
        for &v in d.values() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn four_cycle_two_particles_is_degenerate() {
        // levels -2, 0, 0, 2: the second and third coincide
        let spec = LatticeSpec::new(2, 2, 0.0).unwrap();
        let h = build_hamiltonian(&spec, &[]).unwrap();
        assert!(matches!(
            ground_slater(&h, 2),
            Err(Error::GroundStateDegenerate { n: 2, .. })
        ));
    }

    #[test]
    fn fully_filled_density_is_one() {
        let spec = LatticeSpec::new(4, 3, 0.3).unwrap();
        let h = build_hamiltonian(&spec, &[PinSpec::new((1.0, 1.0), 1.0, 1.0).unwrap()]).unwrap();
        let s = ground_slater(&h, h.dim()).unwrap();
        assert!(s.gap().is_infinite());
        for &v in density(&s).values() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_particle_numbers() {
        let h = build_hamiltonian(&LatticeSpec::new(3, 3, 0.1).unwrap(), &[]).unwrap();
        assert!(ground_slater(&h, 0).is_err());
        assert!(ground_slater(&h, 10).is_err());
    }

    #[test]
    fn eigen_residual_and_orthonormality() {
        let spec = LatticeSpec::new(6, 5, 0.2).unwrap().with_central_defect(0.05).unwrap();
        let h = build_hamiltonian(&spec, &[PinSpec::new((2.4, 2.2), 1.5, 1.0).unwrap()]).unwrap();
        let s = ground_slater(&h, 7).unwrap();
        assert!(s.orthonormality_defect() < 1e-10);
        let hv = h.matrix() * s.orbitals();
        let norm: f64 = (0..h.dim())
            .flat_map(|i| (0..h.dim()).map(move |j| (i, j)))
            .map(|(i, j)| h.get(i, j).norm_sqr())
            .sum::<f64>()
            .sqrt();
        for k in 0..7 {
            for r in 0..h.dim() {
                let res = hv[(r, k)] - s.orbitals()[(r, k)] * s.orbital_energies()[k];
                assert!(res.norm() < 1e-10 * norm);
            }
        }
        assert!((density(&s).total() - 7.0).abs() < 1e-10);
    }

    #[test]
    fn chern_band_dimension() {
        let h = build_hamiltonian(&LatticeSpec::new(15, 15, 0.2).unwrap(), &[]).unwrap();
        let p = lowest_band_projector(&h).unwrap();
        // roughly α·L² states, bulk band plus the lower edge branch
        assert!((43..=47).contains(&p.rank()), "rank {}", p.rank());
        assert!(p.band_gap() > 1.0);
        let b = p.basis();
        let gram = b.adjoint() * b;
        for i in 0..p.rank() {
            for j in 0..p.rank() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - c64::new(want, 0.0)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn no_band_gap_without_flux() {
        let h = build_hamiltonian(&LatticeSpec::new(15, 15, 0.0).unwrap(), &[]).unwrap();
        assert!(matches!(lowest_band_projector(&h), Err(Error::NoBandGap { .. })));
    }

    #[test]
    fn full_projection_matches_direct_solve() {
        let spec = LatticeSpec::new(5, 4, 0.25).unwrap();
        let h = build_hamiltonian(&spec, &[PinSpec::new((1.5, 2.0), 1.0, 1.0).unwrap()]).unwrap();
        let direct = ground_slater(&h, 4).unwrap();
        let projected = ground_slater_projected(&h, &BandProjector::full(spec.geometry()), 4).unwrap();
        for (a, b) in direct.orbital_energies().iter().zip(projected.orbital_energies()) {
            assert!((a - b).abs() < 1e-10);
        }
        let da = density(&direct);
        let db = density(&projected);
        for (a, b) in da.values().iter().zip(db.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
