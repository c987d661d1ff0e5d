//! Shared test helpers: a brute-force Fock-space oracle that never uses
//! determinants of orbital overlaps, and seeded random unitaries.

#![allow(dead_code)]

use faer::{Mat, Side};
use num_complex::Complex64 as c64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Occupation-number basis of `n` fermions on `d` modes, as bit masks in
/// ascending order.
pub struct FockBasis {
    pub modes: usize,
    pub states: Vec<u64>,
}

impl FockBasis {
    pub fn new(modes: usize, n: usize) -> Self {
        assert!(modes < 64);
        let states = (0u64..1 << modes).filter(|m| m.count_ones() as usize == n).collect();
        Self { modes, states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    fn index(&self, mask: u64) -> usize {
        self.states.binary_search(&mask).expect("mask in basis")
    }

    /// Amplitudes of `c†_{φ_0} … c†_{φ_{N-1}} |0⟩` in this basis, with modes
    /// created in ascending order. Determinants are expanded by permutations.
    pub fn slater_vector(&self, orbitals: &Mat<c64>) -> Vec<c64> {
        let n = orbitals.ncols();
        self.states
            .iter()
            .map(|&mask| {
                let rows: Vec<usize> = (0..self.modes).filter(|&i| mask >> i & 1 == 1).collect();
                leibniz(n, |r, c| orbitals[(rows[r], c)])
            })
            .collect()
    }

    /// Second-quantized `Σ_ij h_ij c†_i c_j`.
    pub fn hamiltonian(&self, h: &Mat<c64>) -> Mat<c64> {
        let dim = self.len();
        let mut out = Mat::<c64>::zeros(dim, dim);
        for (col, &mask) in self.states.iter().enumerate() {
            for j in (0..self.modes).filter(|&j| mask >> j & 1 == 1) {
                let removed = mask & !(1 << j);
                let sign_j = parity(mask & ((1 << j) - 1));
                for i in 0..self.modes {
                    if removed >> i & 1 == 1 {
                        continue;
                    }
                    let sign_i = parity(removed & ((1 << i) - 1));
                    let row = self.index(removed | 1 << i);
                    out[(row, col)] += h[(i, j)] * (sign_i * sign_j);
                }
            }
        }
        out
    }

    /// Many-body ground vector of `h` and the gap above it.
    pub fn ground_state(&self, h: &Mat<c64>) -> (Vec<c64>, f64, f64) {
        let hm = self.hamiltonian(h);
        let evd = hm.self_adjoint_eigen(Side::Lower).expect("eigensolver");
        let s = evd.S().column_vector();
        let u = evd.U();
        let v = (0..self.len()).map(|i| u[(i, 0)]).collect();
        (v, s[0].re, s[1].re - s[0].re)
    }
}

fn parity(bits: u64) -> f64 {
    if bits.count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

fn leibniz(n: usize, entry: impl Fn(usize, usize) -> c64) -> c64 {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut total = c64::new(0.0, 0.0);
    permute(&mut perm, 0, 1.0, &entry, &mut total);
    total
}

fn permute(perm: &mut Vec<usize>, k: usize, sign: f64, entry: &impl Fn(usize, usize) -> c64, total: &mut c64) {
    if k == perm.len() {
        let mut prod = c64::new(sign, 0.0);
        for (r, &c) in perm.iter().enumerate() {
            prod *= entry(r, c);
        }
        *total += prod;
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, if i == k { sign } else { -sign }, entry, total);
        perm.swap(k, i);
    }
}

pub fn inner(a: &[c64], b: &[c64]) -> c64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Haar-ish random unitary from the QR factor of a Gaussian-like matrix.
pub fn random_unitary(n: usize, rng: &mut ChaCha8Rng) -> Mat<c64> {
    let a = Mat::from_fn(n, n, |_, _| {
        c64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    a.qr().compute_Q()
}

pub fn random_phases(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
        .collect()
}
