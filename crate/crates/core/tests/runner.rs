//! End-to-end runs of small experiments and the pin-profile behaviour of
//! the Chern-insulator configuration.

use braidsim::analysis::charge_expectation;
use braidsim::experiment::{run_experiment, PresetLibrary, CSV_HEADER};
use braidsim::lattice::{build_hamiltonian, LatticeSpec, PinProfile, PinSpec};
use braidsim::manybody::{density, ground_slater};
use serde_json::json;

fn pinned_charge(profile: PinProfile) -> (f64, f64) {
    let spec = LatticeSpec::new(15, 15, 0.2).unwrap();
    let c = spec.center();
    let pin = PinSpec::new(c, 1.5, 1.0).unwrap().with_profile(profile);
    let reference = density(&ground_slater(&build_hamiltonian(&spec, &[]).unwrap(), 35).unwrap());
    let pinned = ground_slater(&build_hamiltonian(&spec, &[pin]).unwrap(), 35).unwrap();
    let n = density(&pinned);
    // Depletion within three lattice constants of the pin.
    let g = spec.geometry();
    let depletion: f64 = (0..g.n_sites())
        .filter(|&i| {
            let (x, y) = g.site_coords(i);
            (x as f64 - c.0).hypot(y as f64 - c.1) < 3.0
        })
        .map(|i| reference.values()[i] - n.values()[i])
        .sum();
    (depletion, charge_expectation(&pinned, &reference, c, 2.0).unwrap())
}

#[test]
fn standard_profile_binds_two_holes() {
    let (depletion, q) = pinned_charge(PinProfile::Standard);
    assert!((depletion - 2.0).abs() < 0.3, "depletion {depletion}");
    assert!(q < -1.1, "charge {q}");
}

#[test]
fn compact_profile_binds_one_hole() {
    let (depletion, q) = pinned_charge(PinProfile::Compact);
    assert!((depletion - 1.0).abs() < 0.3, "depletion {depletion}");
    assert!((-1.0..-0.6).contains(&q), "charge {q}");
}

#[test]
fn charge_run_writes_density_table() {
    let cfg = PresetLibrary::builtin()
        .resolve(&json!({
            "kind": "charge_operator",
            "lattice": { "lx": 9, "ly": 9, "alpha": 0.2 },
            "pin": { "strengths": [1.5], "width": 1.0, "profile": "compact" },
            "delta_phis": [0.0],
            "n_particles": 12,
            "charge": { "pin_sets": [[[0.0, 0.0]], [[1.5, 0.0], [-1.5, 0.0]]] }
        }))
        .unwrap();
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.rows.len(), 2);
    assert_eq!(out.rows[0].n_pins, 1);
    assert_eq!(out.densities.len(), 2 * 81);
    assert!(out.rows.iter().all(|r| r.charge.unwrap() < 0.0));

    let dir = tempfile::tempdir().unwrap();
    let files = out.write(dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.starts_with(CSV_HEADER));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(summary["kind"], "charge_operator");
    let density = std::fs::read_to_string(dir.path().join("density.csv")).unwrap();
    assert_eq!(density.lines().count(), 1 + 2 * 81);
}

#[test]
fn output_is_deterministic_and_order_independent() {
    let lib = PresetLibrary::builtin();
    let base = json!({
        "kind": "exchange",
        "lattice": { "lx": 8, "ly": 8, "alpha": 0.15 },
        "pin": { "strengths": [-2.0], "width": 1.0 },
        "radii": [1.5, 2.5],
        "delta_phis": [0.0, 0.05],
        "n_particles": 1,
        "n_particles_exchange": 2,
        "n_steps_loop": 16,
        "n_steps_exchange": 16
    });
    let mut shuffled = base.clone();
    shuffled["radii"] = json!([2.5, 1.5]);
    shuffled["delta_phis"] = json!([0.05, 0.0]);
    let a = run_experiment(&lib.resolve(&base).unwrap()).unwrap();
    let b = run_experiment(&lib.resolve(&shuffled).unwrap()).unwrap();
    assert_eq!(a.results_csv(), b.results_csv());
    assert_eq!(a.fits.len(), 2);
    assert!(a.fits.iter().all(|f| f.ab.is_some() && f.geo.is_some()));
}
