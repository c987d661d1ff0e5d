//! Declarative experiments: JSON configs (optionally layered on named
//! presets), the batch runner over pin strengths, radii and defect fluxes,
//! and deterministic CSV / JSON output.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::{
    charge_expectation_logged, exchange_phase, fit_charge, magnetic_length, phase_distance, ChargeFit,
};
use crate::error::{Error, Result};
use crate::geomphase::{
    enclosed_phase, run_exchange, sweep, EnclosedPhase, FluxGrid, PathPlan, PhaseRecord, ALIGNMENT_TOLERANCE,
};
use crate::interferometry::{
    run_single_impurity_sequence, run_two_impurity_sequence, single_impurity_probability, two_impurity_probability,
    ExchangeFactors,
};
use crate::lattice::{build_hamiltonian, LatticeSpec, PinProfile, PinSpec};
use crate::manybody::{
    density, ground_slater, ground_slater_projected, lowest_band_projector, BandProjector, DensityField,
    DEGENERACY_TOLERANCE,
};
use crate::parallel;

/// Presets shipped with the crate: name and JSON.
pub const BUILTIN_PRESETS: &[(&str, &str)] = &[
    ("fig2", include_str!("../presets/fig2.json")),
    ("fig3", include_str!("../presets/fig3.json")),
    ("fig4", include_str!("../presets/fig4.json")),
    ("fig5", include_str!("../presets/fig5.json")),
    ("fig6", include_str!("../presets/fig6.json")),
    ("figS1", include_str!("../presets/figS1.json")),
    ("figS2", include_str!("../presets/figS2.json")),
];

/// Exchange phases within this distance of π count as fermionic.
pub const DEFAULT_EXCHANGE_TOLERANCE: f64 = 0.1 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Single-pin loops only.
    SingleLoopAb,
    /// Single-pin loops plus two-pin exchanges.
    Exchange,
    /// Pinned charge and densities, no transport.
    ChargeOperator,
    /// As `Exchange`, with interferometric probabilities per point.
    InterferometryCheck,
}

/// How the 2π branch of single-loop phases is chosen at the first δΦ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchPolicy {
    /// Surface sum of cell phases over the enclosed disk.
    #[default]
    EnclosedPhase,
    /// Principal value in `(-π, π]`.
    Principal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub lx: usize,
    pub ly: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinConfig {
    pub strengths: Vec<f64>,
    pub width: f64,
    #[serde(default)]
    pub profile: PinProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChargeConfig {
    #[serde(default = "default_xi")]
    pub xi: f64,
    /// Pin offsets from the lattice center; the charge is evaluated at the
    /// first pin of each set.
    pub pin_sets: Vec<Vec<(f64, f64)>>,
}

fn default_xi() -> f64 {
    crate::analysis::DEFAULT_ENVELOPE
}

fn default_true() -> bool {
    true
}

fn default_steps() -> usize {
    40
}

/// Fully resolved experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    /// Preset this config was layered on (informational once resolved).
    #[serde(default)]
    pub preset: Option<String>,
    pub kind: ExperimentKind,
    pub lattice: LatticeConfig,
    pub pin: PinConfig,
    #[serde(default)]
    pub radii: Vec<f64>,
    #[serde(default)]
    pub delta_phis: Vec<f64>,
    pub n_particles: usize,
    /// Particle number for two-pin runs; defaults to `n_particles`.
    #[serde(default)]
    pub n_particles_exchange: Option<usize>,
    #[serde(default = "default_steps")]
    pub n_steps_loop: usize,
    #[serde(default = "default_steps")]
    pub n_steps_exchange: usize,
    #[serde(default)]
    pub start_angle: f64,
    #[serde(default)]
    pub projected: bool,
    /// Build the band projector with the defect flux in place.
    #[serde(default = "default_true")]
    pub projector_includes_defect: bool,
    #[serde(default)]
    pub branch: BranchPolicy,
    #[serde(default)]
    pub flux_grid: Option<FluxGrid>,
    #[serde(default)]
    pub charge: Option<ChargeConfig>,
    #[serde(default)]
    pub exchange_tolerance: Option<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn experiment_id(&self) -> String {
        self.id
            .clone()
            .or_else(|| self.preset.clone())
            .unwrap_or_else(|| "custom".to_string())
    }

    pub fn n_exchange(&self) -> usize {
        self.n_particles_exchange.unwrap_or(self.n_particles)
    }

    pub fn exchange_tolerance(&self) -> f64 {
        self.exchange_tolerance.unwrap_or(DEFAULT_EXCHANGE_TOLERANCE)
    }

    pub fn flux_grid(&self) -> FluxGrid {
        self.flux_grid.unwrap_or(FluxGrid {
            max_cell_area: 0.5,
            ..FluxGrid::default()
        })
    }

    fn needs_transport(&self) -> bool {
        self.kind != ExperimentKind::ChargeOperator
    }

    fn has_exchange(&self) -> bool {
        matches!(
            self.kind,
            ExperimentKind::Exchange | ExperimentKind::InterferometryCheck
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let mut numbers: Vec<(&str, f64)> = vec![
            ("lattice.alpha", self.lattice.alpha),
            ("pin.width", self.pin.width),
            ("start_angle", self.start_angle),
        ];
        numbers.extend(self.pin.strengths.iter().map(|&v| ("pin.strengths", v)));
        numbers.extend(self.radii.iter().map(|&v| ("radii", v)));
        numbers.extend(self.delta_phis.iter().map(|&v| ("delta_phis", v)));
        if let Some(t) = self.exchange_tolerance {
            numbers.push(("exchange_tolerance", t));
        }
        if let Some((name, v)) = numbers.iter().find(|(_, v)| !v.is_finite()) {
            return bad(format!("{name} must be finite, got {v}"));
        }
        if self.lattice.lx < 2 || self.lattice.ly < 2 {
            return bad("lattice must be at least 2x2".into());
        }
        if self.pin.strengths.is_empty() {
            return bad("pin.strengths is empty".into());
        }
        if self.pin.width <= 0.0 {
            return bad(format!("pin.width must be positive, got {}", self.pin.width));
        }
        let dim = self.lattice.lx * self.lattice.ly;
        if self.n_particles == 0 || self.n_particles >= dim || self.n_exchange() == 0 || self.n_exchange() >= dim {
            return bad(format!("particle numbers must lie in 1..{dim}"));
        }
        if self.delta_phis.is_empty() {
            return bad("delta_phis is empty".into());
        }
        if self.needs_transport() {
            if self.radii.is_empty() {
                return bad("radii is empty".into());
            }
            if self.radii.iter().any(|&r| r <= 0.0) {
                return bad("radii must be positive".into());
            }
            if self.n_steps_loop < crate::geomphase::MIN_STEPS || self.n_steps_exchange < crate::geomphase::MIN_STEPS {
                return bad(format!("n_steps must be at least {}", crate::geomphase::MIN_STEPS));
            }
        } else {
            let charge = self
                .charge
                .as_ref()
                .ok_or_else(|| Error::Config("charge_operator needs a `charge` block".into()))?;
            if charge.pin_sets.is_empty() || charge.pin_sets.iter().any(|s| s.is_empty()) {
                return bad("charge.pin_sets must hold non-empty pin lists".into());
            }
            if !(charge.xi.is_finite() && charge.xi > 0.0) {
                return bad(format!("charge.xi must be positive, got {}", charge.xi));
            }
        }
        Ok(())
    }
}

/// Named presets: the built-in ones plus `*.json` files of a directory.
#[derive(Debug, Clone, Default)]
pub struct PresetLibrary {
    entries: BTreeMap<String, (String, Value)>,
}

impl PresetLibrary {
    pub fn builtin() -> Self {
        let mut entries = BTreeMap::new();
        for (name, text) in BUILTIN_PRESETS {
            let value: Value = serde_json::from_str(text).expect("built-in preset is valid JSON");
            entries.insert(name.to_string(), ("builtin".to_string(), value));
        }
        Self { entries }
    }

    /// Built-ins plus every `<name>.json` in `dir`; files shadow built-ins.
    pub fn with_dir(dir: &Path) -> Result<Self> {
        let mut lib = Self::builtin();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::Config(format!("cannot read preset directory {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for path in files {
            let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let text = std::fs::read_to_string(&path)?;
            let value: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("preset {}: {e}", path.display())))?;
            lib.entries.insert(name, (path.display().to_string(), value));
        }
        Ok(lib)
    }

    /// `(name, source, description)` rows, sorted by name.
    pub fn listing(&self) -> Vec<(String, String, String)> {
        self.entries
            .iter()
            .map(|(name, (source, value))| {
                let description = value
                    .get("description")
                    .and_then(Value::as_str)
                    .unwrap_or("")
                    .to_string();
                (name.clone(), source.clone(), description)
            })
            .collect()
    }

    pub fn get(&self, name: &str) -> Result<&Value> {
        self.entries.get(name).map(|(_, v)| v).ok_or_else(|| {
            let suggestion = self
                .entries
                .keys()
                .map(|k| (strsim::jaro_winkler(k, name), k))
                .filter(|(score, _)| *score > 0.7)
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, k)| format!("; did you mean `{k}`?"))
                .unwrap_or_default();
            Error::Config(format!("unknown preset `{name}`{suggestion}"))
        })
    }

    /// Merge `overrides` onto its preset chain and deserialize.
    pub fn resolve(&self, overrides: &Value) -> Result<ExperimentConfig> {
        let merged = self.expand(overrides, &mut Vec::new())?;
        let config: ExperimentConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    fn expand(&self, value: &Value, seen: &mut Vec<String>) -> Result<Value> {
        if !value.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let Some(name) = value.get("preset").and_then(Value::as_str).map(str::to_string) else {
            return Ok(value.clone());
        };
        if seen.contains(&name) {
            return Err(Error::Config(format!("preset cycle through `{name}`")));
        }
        seen.push(name.clone());
        let base = self.get(&name)?.clone();
        let mut base = self.expand(&base, seen)?;
        merge(&mut base, value);
        // The nearest named preset is the one recorded.
        base["preset"] = Value::String(name);
        Ok(base)
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Parse a config file's text and resolve presets.
pub fn load_config(text: &str, presets: &PresetLibrary) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed JSON: {e}")))?;
    presets.resolve(&value)
}

/// One output row; `None` fields are written empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub v_pin: f64,
    pub radius: f64,
    pub delta_phi: f64,
    pub n_pins: usize,
    pub phi_unwrapped: Option<f64>,
    pub phi_mod: Option<f64>,
    pub min_mag: Option<f64>,
    pub reliable: Option<bool>,
    pub q_star: Option<f64>,
    pub phi_geo_unwrapped: Option<f64>,
    pub phi_geo_mod: Option<f64>,
    pub geo_min_mag: Option<f64>,
    pub geo_reliable: Option<bool>,
    pub q_star_geo: Option<f64>,
    pub phi_exc: Option<f64>,
    pub exchange_ok: Option<bool>,
    pub charge: Option<f64>,
    pub p_up: Option<f64>,
    pub p_up_up: Option<f64>,
}

pub const CSV_HEADER: &str = "experiment,v_pin,radius,delta_phi,n_pins,phi_unwrapped,phi_mod,min_mag,reliable,q_star,\
phi_geo_unwrapped,phi_geo_mod,geo_min_mag,geo_reliable,q_star_geo,phi_exc,exchange_ok,charge,p_up,p_up_up";

/// Twelve significant digits, fixed notation for moderate magnitudes.
pub fn format_number(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        let fixed = if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        };
        if fixed == "-0" {
            "0".to_string()
        } else {
            fixed
        }
    } else {
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{mantissa}e{exp}")
    }
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        let num = |x: Option<f64>| x.map(format_number).unwrap_or_default();
        let flag = |b: Option<bool>| b.map(|b| b.to_string()).unwrap_or_default();
        [
            self.experiment.clone(),
            format_number(self.v_pin),
            format_number(self.radius),
            format_number(self.delta_phi),
            self.n_pins.to_string(),
            num(self.phi_unwrapped),
            num(self.phi_mod),
            num(self.min_mag),
            flag(self.reliable),
            num(self.q_star),
            num(self.phi_geo_unwrapped),
            num(self.phi_geo_mod),
            num(self.geo_min_mag),
            flag(self.geo_reliable),
            num(self.q_star_geo),
            num(self.phi_exc),
            flag(self.exchange_ok),
            num(self.charge),
            num(self.p_up),
            num(self.p_up_up),
        ]
        .join(",")
    }
}

/// Charge fits for one `(V, R)` group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub v_pin: f64,
    pub radius: f64,
    pub ab: Option<ChargeFit>,
    pub geo: Option<ChargeFit>,
    /// Branch index of the loop phase at the first δΦ.
    pub winding: i64,
    pub enclosed: Option<EnclosedPhase>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityRow {
    pub delta_phi: f64,
    pub v_pin: f64,
    pub pin_set: usize,
    pub x: usize,
    pub y: usize,
    pub density: f64,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub min_mag: Option<f64>,
    pub geo_min_mag: Option<f64>,
    pub unreliable_rows: usize,
    pub exchange_outside_tolerance: usize,
    pub band_ranks: Vec<(f64, usize)>,
    pub magnetic_length: f64,
    pub max_closed_form_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub jobs: Vec<(String, f64)>,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub experiment: String,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub rows: Vec<ResultRow>,
    pub fits: Vec<FitSummary>,
    pub densities: Vec<DensityRow>,
    pub diagnostics: Diagnostics,
    pub timings: Timings,
    pub parallel: bool,
    pub threads: usize,
}

/// SHA-256 of the canonical JSON of a resolved config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let canonical = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&canonical).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

struct Setup<'a> {
    config: &'a ExperimentConfig,
    specs: Vec<LatticeSpec>,
    projectors: Vec<Option<BandProjector>>,
}

impl Setup<'_> {
    fn pin(&self, v: f64) -> Result<PinSpec> {
        Ok(PinSpec::new((0.0, 0.0), v, self.config.pin.width)?.with_profile(self.config.pin.profile))
    }
}

#[derive(Debug, Clone, Copy)]
enum Job {
    Loop { v: usize, r: usize, d: usize },
    Exchange { v: usize, r: usize, d: usize },
    Enclosed { v: usize, r: usize },
}

enum JobResult {
    Record(PhaseRecord),
    Enclosed(EnclosedPhase),
}

fn job_label(config: &ExperimentConfig, job: &Job) -> String {
    let v = |i: usize| config.pin.strengths[i];
    match *job {
        Job::Loop { v: vi, r, d } => format!("loop V={} R={} δΦ={}", v(vi), config.radii[r], config.delta_phis[d]),
        Job::Exchange { v: vi, r, d } => {
            format!("exchange V={} R={} δΦ={}", v(vi), config.radii[r], config.delta_phis[d])
        }
        Job::Enclosed { v: vi, r } => format!("enclosed phase V={} R={}", v(vi), config.radii[r]),
    }
}

fn run_job(setup: &Setup, job: &Job) -> Result<JobResult> {
    let c = setup.config;
    match *job {
        Job::Loop { v, r, d } => {
            let spec = &setup.specs[d];
            let path =
                PathPlan::single_loop(spec.center(), c.radii[r], c.n_steps_loop)?.with_start_angle(c.start_angle);
            let rec = sweep(
                spec,
                &setup.pin(c.pin.strengths[v])?,
                &path,
                c.n_particles,
                setup.projectors[d].as_ref(),
            )?;
            Ok(JobResult::Record(rec))
        }
        Job::Exchange { v, r, d } => {
            let spec = &setup.specs[d];
            let rec = run_exchange(
                spec,
                &setup.pin(c.pin.strengths[v])?,
                c.radii[r],
                c.n_steps_exchange,
                c.n_exchange(),
                setup.projectors[d].as_ref(),
            )?;
            Ok(JobResult::Record(rec))
        }
        Job::Enclosed { v, r } => {
            let spec = &setup.specs[0];
            let path =
                PathPlan::single_loop(spec.center(), c.radii[r], c.n_steps_loop)?.with_start_angle(c.start_angle);
            let enc = enclosed_phase(
                spec,
                &setup.pin(c.pin.strengths[v])?,
                &path,
                c.n_particles,
                setup.projectors[0].as_ref(),
                &c.flux_grid(),
            )?;
            Ok(JobResult::Enclosed(enc))
        }
    }
}

fn sorted_unique(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Execute a resolved config on the current rayon pool.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let started = Instant::now();
    // Sorted grids make the output ordering independent of the config.
    let mut config = config.clone();
    config.radii = sorted_unique(&config.radii);
    config.delta_phis = sorted_unique(&config.delta_phis);
    let config = &config;
    let id = config.experiment_id();

    let mut specs = Vec::with_capacity(config.delta_phis.len());
    for &dphi in &config.delta_phis {
        specs.push(
            LatticeSpec::new(config.lattice.lx, config.lattice.ly, config.lattice.alpha)?.with_central_defect(dphi)?,
        );
    }
    let projectors: Vec<Option<BandProjector>> = if config.projected {
        let clean = LatticeSpec::new(config.lattice.lx, config.lattice.ly, config.lattice.alpha)?;
        let build = |spec: &LatticeSpec| -> Result<BandProjector> {
            let base = if config.projector_includes_defect { spec } else { &clean };
            lowest_band_projector(&build_hamiltonian(base, &[])?)
        };
        parallel::try_map(&specs, |s| build(s).map(Some))?
    } else {
        vec![None; specs.len()]
    };
    let band_ranks = projectors
        .iter()
        .zip(&config.delta_phis)
        .filter_map(|(p, &d)| p.as_ref().map(|p| (d, p.rank())))
        .collect();
    let setup = Setup {
        config,
        specs,
        projectors,
    };

    let mut output = RunOutput {
        experiment: id.clone(),
        config: config.clone(),
        config_sha256: config_hash(config),
        rows: Vec::new(),
        fits: Vec::new(),
        densities: Vec::new(),
        diagnostics: Diagnostics {
            min_mag: None,
            geo_min_mag: None,
            unreliable_rows: 0,
            exchange_outside_tolerance: 0,
            band_ranks,
            magnetic_length: magnetic_length(config.lattice.alpha),
            max_closed_form_deviation: None,
        },
        timings: Timings {
            total_seconds: 0.0,
            jobs: Vec::new(),
        },
        parallel: parallel::is_parallel(),
        threads: current_threads(),
    };

    if config.kind == ExperimentKind::ChargeOperator {
        run_charge(&setup, &mut output)?;
    } else {
        run_transport(&setup, &mut output)?;
    }
    output.timings.total_seconds = started.elapsed().as_secs_f64();
    Ok(output)
}

fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

fn run_transport(setup: &Setup, out: &mut RunOutput) -> Result<()> {
    let c = setup.config;
    let (nv, nr, nd) = (c.pin.strengths.len(), c.radii.len(), c.delta_phis.len());
    let mut jobs = Vec::new();
    for v in 0..nv {
        for r in 0..nr {
            if c.branch == BranchPolicy::EnclosedPhase {
                jobs.push(Job::Enclosed { v, r });
            }
            for d in 0..nd {
                jobs.push(Job::Loop { v, r, d });
                if c.has_exchange() {
                    jobs.push(Job::Exchange { v, r, d });
                }
            }
        }
    }
    let results = parallel::try_map(&jobs, |job| {
        let t = Instant::now();
        let label = job_label(c, job);
        let res = run_job(setup, job).map_err(|e| e.in_job(label.clone()))?;
        Ok::<_, Error>((label, t.elapsed().as_secs_f64(), res))
    })?;

    let mut loops: BTreeMap<(usize, usize, usize), PhaseRecord> = BTreeMap::new();
    let mut exchanges: BTreeMap<(usize, usize, usize), PhaseRecord> = BTreeMap::new();
    let mut enclosed: BTreeMap<(usize, usize), EnclosedPhase> = BTreeMap::new();
    for (job, (label, secs, res)) in jobs.iter().zip(results) {
        out.timings.jobs.push((label, secs));
        match (*job, res) {
            (Job::Loop { v, r, d }, JobResult::Record(rec)) => {
                loops.insert((v, r, d), rec);
            }
            (Job::Exchange { v, r, d }, JobResult::Record(rec)) => {
                exchanges.insert((v, r, d), rec);
            }
            (Job::Enclosed { v, r }, JobResult::Enclosed(e)) => {
                if !e.reliable() {
                    log::warn!(
                        "V={} R={}: enclosed-phase grid has a cell phase of {:.3} rad; winding may be off",
                        c.pin.strengths[v],
                        c.radii[r],
                        e.max_cell_phase
                    );
                }
                enclosed.insert((v, r), e);
            }
            _ => unreachable!("job and result kinds match"),
        }
    }

    let tol = c.exchange_tolerance();
    for v in 0..nv {
        for r in 0..nr {
            let enc = enclosed.get(&(v, r)).cloned();
            let mut ab: Vec<PhaseRecord> = Vec::with_capacity(nd);
            let mut geo: Vec<PhaseRecord> = Vec::with_capacity(nd);
            let mut winding = 0;
            for d in 0..nd {
                let raw = &loops[&(v, r, d)];
                let rec = match (d, &enc) {
                    (0, Some(e)) => raw.with_winding(e.winding_for(raw.phi_mod)),
                    (0, None) => raw.clone(),
                    _ => raw.nearest_branch(ab[d - 1].phi_unwrapped),
                };
                if d == 0 {
                    winding = rec.winding;
                }
                if let Some(ex) = exchanges.get(&(v, r, d)) {
                    let ex = if d == 0 {
                        ex.nearest_branch(rec.phi_unwrapped)
                    } else {
                        ex.nearest_branch(geo[d - 1].phi_unwrapped)
                    };
                    geo.push(ex);
                }
                ab.push(rec);
            }
            let points = |recs: &[PhaseRecord]| -> Vec<(f64, f64)> {
                c.delta_phis
                    .iter()
                    .zip(recs)
                    .map(|(&d, rec)| (d, rec.phi_unwrapped))
                    .collect()
            };
            let ab_fit = (nd >= 2).then(|| fit_charge(&points(&ab))).transpose()?;
            let geo_fit = (nd >= 2 && !geo.is_empty())
                .then(|| fit_charge(&points(&geo)))
                .transpose()?;

            for (d, a) in ab.iter().enumerate() {
                let mut row = ResultRow {
                    experiment: out.experiment.clone(),
                    v_pin: c.pin.strengths[v],
                    radius: c.radii[r],
                    delta_phi: c.delta_phis[d],
                    n_pins: 1,
                    phi_unwrapped: Some(a.phi_unwrapped),
                    phi_mod: Some(a.phi_mod),
                    min_mag: Some(a.min_mag),
                    reliable: Some(a.reliable),
                    q_star: ab_fit.as_ref().map(|f| f.q_star),
                    ..ResultRow::default()
                };
                let mut reliable = a.reliable;
                if let Some(g) = geo.get(d) {
                    let exc = exchange_phase(g.phi_unwrapped, a.phi_unwrapped);
                    let ok = phase_distance(exc, PI) <= tol;
                    row.n_pins = 2;
                    row.phi_geo_unwrapped = Some(g.phi_unwrapped);
                    row.phi_geo_mod = Some(g.phi_mod);
                    row.geo_min_mag = Some(g.min_mag);
                    row.geo_reliable = Some(g.reliable);
                    row.q_star_geo = geo_fit.as_ref().map(|f| f.q_star);
                    row.phi_exc = Some(exc);
                    row.exchange_ok = Some(ok);
                    reliable &= g.reliable;
                    if !ok {
                        out.diagnostics.exchange_outside_tolerance += 1;
                    }
                    out.diagnostics.geo_min_mag =
                        Some(out.diagnostics.geo_min_mag.map_or(g.min_mag, |m| m.min(g.min_mag)));
                    if c.kind == ExperimentKind::InterferometryCheck {
                        let p_up = run_single_impurity_sequence(a.phi_unwrapped, 0.0);
                        let p_up_up = run_two_impurity_sequence(&ExchangeFactors::abelian(g.phi_unwrapped))?.p_up_up;
                        let dev = (p_up - single_impurity_probability(a.phi_unwrapped))
                            .abs()
                            .max((p_up_up - two_impurity_probability(g.phi_unwrapped)).abs());
                        out.diagnostics.max_closed_form_deviation =
                            Some(out.diagnostics.max_closed_form_deviation.map_or(dev, |m| m.max(dev)));
                        row.p_up = Some(p_up);
                        row.p_up_up = Some(p_up_up);
                    }
                }
                if !reliable {
                    out.diagnostics.unreliable_rows += 1;
                }
                out.diagnostics.min_mag = Some(out.diagnostics.min_mag.map_or(a.min_mag, |m| m.min(a.min_mag)));
                out.rows.push(row);
            }
            out.fits.push(FitSummary {
                v_pin: c.pin.strengths[v],
                radius: c.radii[r],
                ab: ab_fit,
                geo: geo_fit,
                winding,
                enclosed: enc,
            });
        }
    }
    sort_rows(&mut out.rows);
    Ok(())
}

fn run_charge(setup: &Setup, out: &mut RunOutput) -> Result<()> {
    let c = setup.config;
    let charge = c.charge.as_ref().expect("validated");
    let (nv, nd, ns) = (c.pin.strengths.len(), c.delta_phis.len(), charge.pin_sets.len());
    let solve = |d: usize, pins: &[PinSpec]| -> Result<DensityField> {
        let h = build_hamiltonian(&setup.specs[d], pins)?;
        let s = match &setup.projectors[d] {
            Some(p) => ground_slater_projected(&h, p, c.n_particles)?,
            None => ground_slater(&h, c.n_particles)?,
        };
        Ok(density(&s))
    };
    // Reference densities without pins, one per δΦ.
    let references = parallel::try_map_range(nd, |d| solve(d, &[]))?;

    let jobs: Vec<(usize, usize, usize)> = (0..nv)
        .flat_map(|v| (0..nd).flat_map(move |d| (0..ns).map(move |s| (v, d, s))))
        .collect();
    let center = setup.specs[0].center();
    let results = parallel::try_map(&jobs, |&(v, d, s)| {
        let t = Instant::now();
        let label = format!(
            "charge V={} δΦ={} pins={:?}",
            c.pin.strengths[v], c.delta_phis[d], charge.pin_sets[s]
        );
        let run = || -> Result<(f64, DensityField)> {
            let pin = setup.pin(c.pin.strengths[v])?;
            let pins: Vec<PinSpec> = charge.pin_sets[s]
                .iter()
                .map(|o| pin.at((center.0 + o.0, center.1 + o.1)))
                .collect();
            let h = build_hamiltonian(&setup.specs[d], &pins)?;
            let state = match &setup.projectors[d] {
                Some(p) => ground_slater_projected(&h, p, c.n_particles)?,
                None => ground_slater(&h, c.n_particles)?,
            };
            let q = charge_expectation_logged(&state, &references[d], pins[0].center, charge.xi, c.lattice.alpha)?;
            Ok((q, density(&state)))
        };
        let res = run().map_err(|e| e.in_job(label.clone()))?;
        Ok::<_, Error>((label, t.elapsed().as_secs_f64(), res))
    })?;

    for (&(v, d, s), (label, secs, (q, dens))) in jobs.iter().zip(results) {
        out.timings.jobs.push((label, secs));
        let first = charge.pin_sets[s][0];
        out.rows.push(ResultRow {
            experiment: out.experiment.clone(),
            v_pin: c.pin.strengths[v],
            radius: first.0.hypot(first.1),
            delta_phi: c.delta_phis[d],
            n_pins: charge.pin_sets[s].len(),
            charge: Some(q),
            ..ResultRow::default()
        });
        let g = setup.specs[d].geometry();
        for (i, (&n, &n0)) in dens.values().iter().zip(references[d].values()).enumerate() {
            let (x, y) = g.site_coords(i);
            out.densities.push(DensityRow {
                delta_phi: c.delta_phis[d],
                v_pin: c.pin.strengths[v],
                pin_set: s,
                x,
                y,
                density: n,
                reference: n0,
            });
        }
    }
    sort_rows(&mut out.rows);
    Ok(())
}

fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.experiment
            .cmp(&b.experiment)
            .then(a.v_pin.total_cmp(&b.v_pin))
            .then(a.radius.total_cmp(&b.radius))
            .then(a.delta_phi.total_cmp(&b.delta_phi))
            .then(a.n_pins.cmp(&b.n_pins))
    });
}

impl RunOutput {
    pub fn results_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.to_csv());
            s.push('\n');
        }
        s
    }

    pub fn density_csv(&self) -> String {
        let mut s = String::from("delta_phi,v_pin,pin_set,x,y,density,reference\n");
        for r in &self.densities {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                format_number(r.delta_phi),
                format_number(r.v_pin),
                r.pin_set,
                r.x,
                r.y,
                format_number(r.density),
                format_number(r.reference)
            );
        }
        s
    }

    pub fn summary_json(&self) -> Value {
        let c = &self.config;
        serde_json::json!({
            "experiment": self.experiment,
            "kind": c.kind,
            "config_sha256": self.config_sha256,
            "config": c,
            "n_steps": { "loop": c.n_steps_loop, "exchange": c.n_steps_exchange },
            "tolerances": {
                "degeneracy": DEGENERACY_TOLERANCE,
                "alignment": ALIGNMENT_TOLERANCE,
                "reliable_step_arg": PI / 2.0,
                "exchange": c.exchange_tolerance(),
            },
            "fits": self.fits,
            "diagnostics": self.diagnostics,
            "timings": self.timings,
            "parallel": self.parallel,
            "threads": self.threads,
        })
    }

    /// Write `results.csv`, `summary.json` and, for charge runs,
    /// `density.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = vec![dir.join("results.csv"), dir.join("summary.json")];
        std::fs::write(&written[0], self.results_csv())?;
        let summary = serde_json::to_string_pretty(&self.summary_json()).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(&written[1], summary + "\n")?;
        if !self.densities.is_empty() {
            let path = dir.join("density.csv");
            std::fs::write(&path, self.density_csv())?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_formatting() {
        assert_eq!(format_number(0.0), "0");
        assert_eq!(format_number(-0.0), "0");
        assert_eq!(format_number(35.530575843921), "35.5305758439");
        assert_eq!(format_number(-1.5), "-1.5");
        assert_eq!(format_number(1e-7), "1e-7");
        assert_eq!(format_number(1.234e-3), "0.001234");
        assert_eq!(format_number(2.0 * PI * 0.16), "1.00530964915");
        assert_eq!(format_number(1.0 / 3.0e15), "3.33333333333e-16");
    }

    #[test]
    fn builtin_presets_resolve() {
        let lib = PresetLibrary::builtin();
        for (name, _) in BUILTIN_PRESETS {
            let cfg = lib.resolve(&serde_json::json!({ "preset": name })).unwrap();
            assert_eq!(cfg.preset.as_deref(), Some(*name));
        }
        let s2 = lib.resolve(&serde_json::json!({ "preset": "figS2" })).unwrap();
        assert!(s2.projected);
        assert_eq!(s2.n_particles, 35);
        assert_eq!(s2.experiment_id(), "figS2");
    }

    #[test]
    fn overrides_merge_deeply() {
        let lib = PresetLibrary::builtin();
        let cfg = lib
            .resolve(&serde_json::json!({ "preset": "fig5", "pin": { "strengths": [2.0] }, "radii": [3.5] }))
            .unwrap();
        assert_eq!(cfg.pin.strengths, vec![2.0]);
        assert_eq!(cfg.pin.profile, PinProfile::Compact);
        assert_eq!(cfg.radii, vec![3.5]);
    }

    #[test]
    fn unknown_preset_suggests_name() {
        let lib = PresetLibrary::builtin();
        let err = lib.resolve(&serde_json::json!({ "preset": "fig_5" })).unwrap_err();
        assert!(err.to_string().contains("did you mean `fig5`"), "{err}");
    }

    #[test]
    fn malformed_configs_rejected() {
        let lib = PresetLibrary::builtin();
        assert!(load_config("{", &lib).is_err());
        assert!(lib
            .resolve(&serde_json::json!({ "preset": "fig2", "radiuses": [1.0] }))
            .is_err());
        assert!(lib
            .resolve(&serde_json::json!({ "preset": "fig2", "radii": [] }))
            .is_err());
        assert!(lib
            .resolve(&serde_json::json!({ "preset": "fig2", "n_particles": 0 }))
            .is_err());
        assert!(lib.resolve(&serde_json::json!([1, 2])).is_err());
    }

    fn tiny() -> ExperimentConfig {
        PresetLibrary::builtin()
            .resolve(&serde_json::json!({
                "kind": "interferometry_check",
                "lattice": { "lx": 7, "ly": 7, "alpha": 0.1 },
                "pin": { "strengths": [-2.0], "width": 1.0 },
                "radii": [2.0, 1.5],
                "delta_phis": [0.04, 0.0],
                "n_particles": 1,
                "n_particles_exchange": 2,
                "n_steps_loop": 16,
                "n_steps_exchange": 16
            }))
            .unwrap()
    }

    #[test]
    fn small_run_is_sorted_and_complete() {
        let out = run_experiment(&tiny()).unwrap();
        assert_eq!(out.rows.len(), 4);
        let keys: Vec<(f64, f64)> = out.rows.iter().map(|r| (r.radius, r.delta_phi)).collect();
        assert_eq!(keys, vec![(1.5, 0.0), (1.5, 0.04), (2.0, 0.0), (2.0, 0.04)]);
        assert!(out
            .rows
            .iter()
            .all(|r| r.q_star.is_some() && r.phi_exc.is_some() && r.p_up_up.is_some()));
        assert!(out.diagnostics.max_closed_form_deviation.unwrap() < 1e-12);
        let csv = out.results_csv();
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(out.config_sha256.len(), 64);
    }

    #[test]
    fn tracking_failures_carry_job_and_step() {
        // 2x2 lattice at zero flux: N=2 is degenerate at every step.
        let cfg = PresetLibrary::builtin()
            .resolve(&serde_json::json!({
                "kind": "single_loop_ab",
                "lattice": { "lx": 2, "ly": 2, "alpha": 0.0 },
                "pin": { "strengths": [0.0], "width": 1.0 },
                "radii": [0.5],
                "delta_phis": [0.0],
                "n_particles": 2,
                "branch": "principal"
            }))
            .unwrap();
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.is_tracking_failure());
        assert_eq!(err.step(), Some(0));
        assert!(err.to_string().contains("loop V=0 R=0.5"), "{err}");
    }
}
