//! Synthetic measurement generation: π-model snapshots from a nodal
//! admittance solve, constant multiplicative IT ratio errors, and additive
//! per-sample PMU noise.
//!
//! Everything is a pure function of (network, scenario, seed), so a dataset
//! regenerated with the same inputs is bit-identical and Monte-Carlo trials
//! can run in parallel on independent RNG streams.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    BranchId, BranchMeasurements, BusCurrentSet, BusId, LineParams, NetworkSpec, Phasor, Sample,
};

/// Additive-noise and IT accuracy-class settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Maximum total vector error of the PMU, as a fraction (0.001 = 0.1 %).
    pub tve_max: f64,
    /// Master seed for η draws and noise.
    pub rng_seed: u64,
    /// Accuracy class of regular ITs, in percent.
    pub it_accuracy_regular: f64,
    /// Accuracy class of the RQM pair, in percent.
    pub it_accuracy_rqm: f64,
    /// Phase-angle bound per unit class percent, in degrees. The ratio-error
    /// standard's phase limits are a configuration knob here; the default
    /// maps a 0.6 class to ±0.52°.
    pub eta_angle_deg_per_class: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            tve_max: 0.001,
            rng_seed: 0,
            it_accuracy_regular: 0.6,
            it_accuracy_rqm: 0.15,
            eta_angle_deg_per_class: 0.87,
        }
    }
}

/// Per-component Gaussian σ that maps the TVE bound to a 3σ radial error.
pub fn tve_sigma(tve_max: f64, true_magnitude: f64) -> f64 {
    tve_max * true_magnitude / (3.0 * std::f64::consts::SQRT_2)
}

/// Bus loading profile: a linear ramp across each solve window plus a small
/// per-bus harmonic diversity term that keeps bus current profiles from
/// being collinear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadScenario {
    /// Total generated samples (all solve windows back to back).
    pub n_total: usize,
    /// Samples per solve window; the ramp restarts at each window.
    pub n_window: usize,
    /// Fractional load increase across one window (0.60 = +60 %).
    pub ramp_fraction: f64,
    /// Amplitude of the per-bus harmonic diversity term.
    pub diversity_amplitude: f64,
    /// Complex base current injections per bus (loads negative).
    pub injections: BTreeMap<BusId, Phasor>,
    /// Bus held at a fixed voltage during the snapshot solve.
    pub source_bus: BusId,
    pub source_voltage: Phasor,
}

impl LoadScenario {
    /// Default loading for a network: every non-source bus draws a modest
    /// lagging current, deterministic in the bus id.
    pub fn default_for(spec: &NetworkSpec, n_window: usize, windows: usize) -> Self {
        let source_bus = *spec.buses.iter().min().expect("network has buses");
        let mut injections = BTreeMap::new();
        for &bus in &spec.buses {
            if bus == source_bus {
                continue;
            }
            let mag = 0.08 + 0.04 * ((bus * 3) % 5) as f64 / 4.0;
            let ang = -0.10 - 0.05 * ((bus * 7) % 4) as f64;
            let inj = -mag * Complex64::new(ang.cos(), ang.sin());
            injections.insert(bus, Phasor::from_complex(inj));
        }
        LoadScenario {
            n_total: n_window * windows,
            n_window,
            ramp_fraction: 0.60,
            diversity_amplitude: 0.08,
            injections,
            source_bus,
            source_voltage: Phasor { re: 1.0, im: 0.0 },
        }
    }

    /// Load scale factor for a bus at sample index t.
    pub fn scale(&self, bus: BusId, t: usize) -> f64 {
        let n = self.n_window.max(2);
        let frac = (t % n) as f64 / (n - 1) as f64;
        let cycles = 1.0 + (bus % 3) as f64;
        let phase = 2.0 * std::f64::consts::PI * (bus as f64 * 0.618_033_988_75).fract();
        1.0 + self.ramp_fraction * frac
            + self.diversity_amplitude
                * (2.0 * std::f64::consts::PI * cycles * frac + phase).sin()
    }

    pub fn injections_at(&self, t: usize) -> BTreeMap<BusId, Complex64> {
        self.injections
            .iter()
            .map(|(&bus, inj)| (bus, inj.to_complex() * self.scale(bus, t)))
            .collect()
    }
}

/// Constant complex ratio error per IT channel. Keys are (branch, end bus)
/// for branch-mounted VTs/CTs and the bus id for the residual-current CTs.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaAssignment {
    pub vt: BTreeMap<(BranchId, BusId), Complex64>,
    pub ct: BTreeMap<(BranchId, BusId), Complex64>,
    pub residual_ct: BTreeMap<BusId, Complex64>,
}

impl EtaAssignment {
    /// All channels exactly ideal.
    pub fn unity(spec: &NetworkSpec) -> Self {
        let one = Complex64::new(1.0, 0.0);
        let mut vt = BTreeMap::new();
        let mut ct = BTreeMap::new();
        for b in &spec.branches {
            let id = b.id();
            for end in [id.from, id.to] {
                vt.insert((id, end), one);
                ct.insert((id, end), one);
            }
        }
        let residual_ct = spec.buses.iter().map(|&q| (q, one)).collect();
        EtaAssignment {
            vt,
            ct,
            residual_ct,
        }
    }

    pub fn vt_eta(&self, branch: &BranchId, end: BusId) -> Result<Complex64> {
        lookup_channel(&self.vt, branch, end, "VT")
    }

    pub fn ct_eta(&self, branch: &BranchId, end: BusId) -> Result<Complex64> {
        lookup_channel(&self.ct, branch, end, "CT")
    }

    /// True correction factor of a VT channel: 1/η.
    pub fn vt_cf(&self, branch: &BranchId, end: BusId) -> Result<Complex64> {
        Ok(Complex64::new(1.0, 0.0) / self.vt_eta(branch, end)?)
    }

    pub fn ct_cf(&self, branch: &BranchId, end: BusId) -> Result<Complex64> {
        Ok(Complex64::new(1.0, 0.0) / self.ct_eta(branch, end)?)
    }
}

fn lookup_channel(
    map: &BTreeMap<(BranchId, BusId), Complex64>,
    branch: &BranchId,
    end: BusId,
    kind: &str,
) -> Result<Complex64> {
    map.iter()
        .find(|((b, e), _)| b.key() == branch.key() && *e == end)
        .map(|(_, eta)| *eta)
        .ok_or_else(|| Error::Topology(format!("no {kind} channel for branch {branch} end {end}")))
}

/// Draws one ratio error: magnitude uniform inside the class band, angle
/// uniform inside ±(angle_deg_per_class · class) degrees.
pub fn sample_eta(
    accuracy_class: f64,
    angle_deg_per_class: f64,
    rng: &mut impl Rng,
) -> Result<Complex64> {
    if accuracy_class <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "accuracy class must be positive, got {accuracy_class}"
        )));
    }
    let half = accuracy_class / 100.0;
    let mag = rng.gen_range(1.0 - half..1.0 + half);
    let bound = (angle_deg_per_class * accuracy_class).to_radians();
    let ang = rng.gen_range(-bound..bound);
    Ok(Complex64::from_polar(mag, ang))
}

/// Samples η for every channel of the network. Accuracy classes come from
/// the per-branch spec; residual-current CTs use the regular class. With
/// `rqm_perfect` the two RQM channels are forced to exactly 1.
pub fn sample_eta_assignment(
    spec: &NetworkSpec,
    noise: &NoiseConfig,
    rqm_perfect: bool,
    rng: &mut impl Rng,
) -> Result<EtaAssignment> {
    let apc = noise.eta_angle_deg_per_class;
    let mut vt = BTreeMap::new();
    let mut ct = BTreeMap::new();
    for b in &spec.branches {
        let id = b.id();
        vt.insert((id, id.from), sample_eta(b.accuracy_class_vt_from, apc, rng)?);
        vt.insert((id, id.to), sample_eta(b.accuracy_class_vt_to, apc, rng)?);
        ct.insert((id, id.from), sample_eta(b.accuracy_class_ct_from, apc, rng)?);
        ct.insert((id, id.to), sample_eta(b.accuracy_class_ct_to, apc, rng)?);
    }
    let mut residual_ct = BTreeMap::new();
    for &q in &spec.buses {
        residual_ct.insert(q, sample_eta(noise.it_accuracy_regular, apc, rng)?);
    }
    if rqm_perfect {
        let one = Complex64::new(1.0, 0.0);
        let rqm = spec.rqm_branch;
        let end = spec.rqm_end;
        for ((b, e), eta) in vt.iter_mut() {
            if b.key() == rqm.key() && *e == end {
                *eta = one;
            }
        }
        for ((b, e), eta) in ct.iter_mut() {
            if b.key() == rqm.key() && *e == end {
                *eta = one;
            }
        }
    }
    Ok(EtaAssignment {
        vt,
        ct,
        residual_ct,
    })
}

/// Exact π-model end currents for given terminal voltages.
pub fn branch_currents(
    params: &LineParams,
    v_from: Complex64,
    v_to: Complex64,
) -> (Complex64, Complex64) {
    let z = params.series_impedance();
    let y = params.shunt_admittance();
    let series = (v_from - v_to) / z;
    (y * v_from + series, y * v_to - series)
}

/// Noise-free phasor time series for the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueSeries {
    pub bus_voltages: BTreeMap<BusId, Vec<Complex64>>,
    /// Bus-end branch currents, flowing from the bus into the line.
    pub end_currents: BTreeMap<(BranchId, BusId), Vec<Complex64>>,
    /// Residual current per bus: minus the sum of monitored end currents.
    pub residual_currents: BTreeMap<BusId, Vec<Complex64>>,
}

impl TrueSeries {
    pub fn n(&self) -> usize {
        self.bus_voltages.values().next().map_or(0, Vec::len)
    }
}

/// Fixed-voltage-source nodal-admittance solver with a cached factorization.
pub struct SnapshotSolver {
    spec: NetworkSpec,
    params: BTreeMap<BranchId, LineParams>,
    source_bus: BusId,
    source_voltage: Complex64,
    reduced: Vec<BusId>,
    lu: nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
    y_source: DVector<Complex64>,
}

impl SnapshotSolver {
    pub fn new(spec: &NetworkSpec, source_bus: BusId, source_voltage: Complex64) -> Result<Self> {
        if !spec.buses.contains(&source_bus) {
            return Err(Error::Topology(format!("source bus {source_bus} not in network")));
        }
        let params = spec.line_params()?;
        let mut buses: Vec<BusId> = spec.buses.clone();
        buses.sort_unstable();
        let index: BTreeMap<BusId, usize> =
            buses.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        let n = buses.len();
        let mut y = DMatrix::<Complex64>::zeros(n, n);
        for b in &spec.branches {
            let lp = params[&b.id()];
            let ys = Complex64::new(1.0, 0.0) / lp.series_impedance();
            let ysh = lp.shunt_admittance();
            let (i, j) = (index[&b.from], index[&b.to]);
            y[(i, i)] += ys + ysh;
            y[(j, j)] += ys + ysh;
            y[(i, j)] -= ys;
            y[(j, i)] -= ys;
        }
        let reduced: Vec<BusId> = buses.iter().copied().filter(|&b| b != source_bus).collect();
        let m = reduced.len();
        let mut y_rr = DMatrix::<Complex64>::zeros(m, m);
        let mut y_source = DVector::<Complex64>::zeros(m);
        let src = index[&source_bus];
        for (ri, &bi) in reduced.iter().enumerate() {
            y_source[ri] = y[(index[&bi], src)];
            for (rj, &bj) in reduced.iter().enumerate() {
                y_rr[(ri, rj)] = y[(index[&bi], index[&bj])];
            }
        }
        let lu = y_rr.lu();
        if !lu.is_invertible() {
            return Err(Error::Generation("singular network admittance matrix".into()));
        }
        Ok(SnapshotSolver {
            spec: spec.clone(),
            params,
            source_bus,
            source_voltage,
            reduced,
            lu,
            y_source,
        })
    }

    /// Solves one instant: bus voltages plus exact π-model end currents.
    #[allow(clippy::type_complexity)]
    pub fn solve(
        &self,
        injections: &BTreeMap<BusId, Complex64>,
    ) -> Result<(
        BTreeMap<BusId, Complex64>,
        BTreeMap<(BranchId, BusId), Complex64>,
    )> {
        let m = self.reduced.len();
        let mut rhs = DVector::<Complex64>::zeros(m);
        for (ri, &bus) in self.reduced.iter().enumerate() {
            let inj = injections.get(&bus).copied().unwrap_or_default();
            rhs[ri] = inj - self.y_source[ri] * self.source_voltage;
        }
        let v_red = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Generation("snapshot solve failed".into()))?;
        let mut voltages = BTreeMap::new();
        voltages.insert(self.source_bus, self.source_voltage);
        for (ri, &bus) in self.reduced.iter().enumerate() {
            voltages.insert(bus, v_red[ri]);
        }
        let mut currents = BTreeMap::new();
        for b in &self.spec.branches {
            let id = b.id();
            let (i_from, i_to) =
                branch_currents(&self.params[&id], voltages[&id.from], voltages[&id.to]);
            currents.insert((id, id.from), i_from);
            currents.insert((id, id.to), i_to);
        }
        Ok((voltages, currents))
    }
}

/// Generates the noise-free series for a load scenario.
pub fn generate_true_series(spec: &NetworkSpec, load: &LoadScenario) -> Result<TrueSeries> {
    let solver = SnapshotSolver::new(spec, load.source_bus, load.source_voltage.to_complex())?;
    let mut bus_voltages: BTreeMap<BusId, Vec<Complex64>> = spec
        .buses
        .iter()
        .map(|&b| (b, Vec::with_capacity(load.n_total)))
        .collect();
    let mut end_currents: BTreeMap<(BranchId, BusId), Vec<Complex64>> = BTreeMap::new();
    for b in &spec.branches {
        let id = b.id();
        end_currents.insert((id, id.from), Vec::with_capacity(load.n_total));
        end_currents.insert((id, id.to), Vec::with_capacity(load.n_total));
    }
    for t in 0..load.n_total {
        let (volts, currents) = solver.solve(&load.injections_at(t))?;
        for (&bus, series) in bus_voltages.iter_mut() {
            series.push(volts[&bus]);
        }
        for (key, series) in end_currents.iter_mut() {
            series.push(currents[key]);
        }
    }
    let mut residual_currents: BTreeMap<BusId, Vec<Complex64>> = BTreeMap::new();
    for &q in &spec.buses {
        let incident: Vec<&Vec<Complex64>> = end_currents
            .iter()
            .filter(|((b, e), _)| *e == q && b.touches(q))
            .map(|(_, s)| s)
            .collect();
        let series = (0..load.n_total)
            .map(|t| -incident.iter().map(|s| s[t]).sum::<Complex64>())
            .collect();
        residual_currents.insert(q, series);
    }
    Ok(TrueSeries {
        bus_voltages,
        end_currents,
        residual_currents,
    })
}

fn noisy_channel(
    truth: &[Complex64],
    eta: Complex64,
    tve: f64,
    rng: &mut impl Rng,
) -> Vec<Phasor> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    truth
        .iter()
        .map(|&v| {
            let mut m = eta * v;
            if tve > 0.0 {
                let sigma = tve_sigma(tve, v.norm());
                m.re += sigma * normal.sample(rng);
                m.im += sigma * normal.sample(rng);
            }
            Phasor::from_complex(m)
        })
        .collect()
}

/// Applies η scaling and additive noise to the true series, producing the
/// measurement sets. The bus-end CT channel of a branch appears both in the
/// branch measurement and in the bus current set; they share one noise
/// realization because they are one physical channel.
#[allow(clippy::type_complexity)]
pub fn apply_composite_noise(
    spec: &NetworkSpec,
    truth: &TrueSeries,
    etas: &EtaAssignment,
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<(
    BTreeMap<BranchId, BranchMeasurements>,
    BTreeMap<BusId, BusCurrentSet>,
)> {
    let tve = noise.tve_max;
    if tve < 0.0 {
        return Err(Error::InvalidInput("tve_max must be >= 0".into()));
    }
    let mut vt_meas: BTreeMap<(BranchId, BusId), Vec<Phasor>> = BTreeMap::new();
    let mut ct_meas: BTreeMap<(BranchId, BusId), Vec<Phasor>> = BTreeMap::new();
    for b in &spec.branches {
        let id = b.id();
        for end in [id.from, id.to] {
            let v_true = &truth.bus_voltages[&end];
            vt_meas.insert(
                (id, end),
                noisy_channel(v_true, etas.vt_eta(&id, end)?, tve, rng),
            );
        }
        for end in [id.from, id.to] {
            let i_true = &truth.end_currents[&(id, end)];
            ct_meas.insert(
                (id, end),
                noisy_channel(i_true, etas.ct_eta(&id, end)?, tve, rng),
            );
        }
    }
    let mut residual_meas: BTreeMap<BusId, Vec<Phasor>> = BTreeMap::new();
    for &q in &spec.buses {
        let eta = *etas
            .residual_ct
            .get(&q)
            .ok_or_else(|| Error::Topology(format!("no residual CT for bus {q}")))?;
        residual_meas.insert(q, noisy_channel(&truth.residual_currents[&q], eta, tve, rng));
    }

    let n = truth.n();
    let mut branches = BTreeMap::new();
    for b in &spec.branches {
        let id = b.id();
        let vf = &vt_meas[&(id, id.from)];
        let vt = &vt_meas[&(id, id.to)];
        let i_f = &ct_meas[&(id, id.from)];
        let i_t = &ct_meas[&(id, id.to)];
        let samples: Vec<Sample> = (0..n)
            .map(|t| Sample {
                v_from: vf[t],
                v_to: vt[t],
                i_from: i_f[t],
                i_to: i_t[t],
            })
            .collect();
        branches.insert(id, BranchMeasurements::new(id, samples)?);
    }
    let mut buses = BTreeMap::new();
    for &q in &spec.buses {
        let mut branch_currents: Vec<(BranchId, Vec<Phasor>)> = ct_meas
            .iter()
            .filter(|((b, e), _)| *e == q && b.touches(q))
            .map(|((b, _), s)| (*b, s.clone()))
            .collect();
        branch_currents.sort_by_key(|(b, _)| b.key());
        buses.insert(
            q,
            BusCurrentSet {
                bus: q,
                branch_currents,
                residual: residual_meas[&q].clone(),
            },
        );
    }
    Ok((branches, buses))
}

/// Scenario presets matching the evaluation taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Perfect RQM pair (η exactly 1) and zero additive noise.
    Ideal,
    /// Perfect RQM pair with 0.1 % TVE additive noise.
    NoisyPerfectRqm,
    /// RQM pair drawn from the 0.15 class with 0.1 % TVE additive noise.
    Realistic,
    /// Noise settings taken verbatim from the config.
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(Preset::Ideal),
            "noisy-perfect-rqm" => Ok(Preset::NoisyPerfectRqm),
            "realistic" => Ok(Preset::Realistic),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::Parse(format!("unknown scenario preset '{other}'"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Preset::Ideal => "ideal",
            Preset::NoisyPerfectRqm => "noisy-perfect-rqm",
            Preset::Realistic => "realistic",
            Preset::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Fully resolved generation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub preset: Preset,
    pub noise: NoiseConfig,
    pub rqm_perfect: bool,
    pub load: LoadScenario,
    /// Relative half-width of the uniform perturbation applied to the true
    /// line parameters to form the "database" initial values.
    pub database_jitter: f64,
}

impl ScenarioConfig {
    pub fn preset(
        preset: Preset,
        spec: &NetworkSpec,
        mut noise: NoiseConfig,
        n_window: usize,
        windows: usize,
    ) -> Self {
        let rqm_perfect = match preset {
            Preset::Ideal => {
                noise.tve_max = 0.0;
                true
            }
            Preset::NoisyPerfectRqm => {
                noise.tve_max = 0.001;
                true
            }
            Preset::Realistic => {
                noise.tve_max = 0.001;
                false
            }
            Preset::Custom => false,
        };
        ScenarioConfig {
            preset,
            noise,
            rqm_perfect,
            load: LoadScenario::default_for(spec, n_window, windows),
            database_jitter: 0.10,
        }
    }
}

/// Ground truth retained next to the measurements for scoring. The true
/// series is present for in-memory datasets; datasets reloaded from disk
/// carry only the parameter and η truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub line_params: BTreeMap<BranchId, LineParams>,
    /// Perturbed "database" parameters used as solver initial values.
    pub database_params: BTreeMap<BranchId, LineParams>,
    pub etas: EtaAssignment,
    pub true_series: Option<TrueSeries>,
}

/// A complete generated measurement set with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub network: NetworkSpec,
    pub branches: BTreeMap<BranchId, BranchMeasurements>,
    pub buses: BTreeMap<BusId, BusCurrentSet>,
    pub truth: GroundTruth,
}

impl Dataset {
    pub fn n_total(&self) -> usize {
        self.branches.values().next().map_or(0, BranchMeasurements::n)
    }
}

pub(crate) fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn perturbed_database_params(
    params: &BTreeMap<BranchId, LineParams>,
    jitter: f64,
    rng: &mut impl Rng,
) -> Result<BTreeMap<BranchId, LineParams>> {
    let mut out = BTreeMap::new();
    for (&id, lp) in params {
        let mut f = || {
            if jitter > 0.0 {
                1.0 + rng.gen_range(-jitter..jitter)
            } else {
                1.0
            }
        };
        out.insert(id, LineParams::new(lp.r * f(), lp.x * f(), lp.b * f())?);
    }
    Ok(out)
}

/// Generates one dataset: η assignment, database parameters, true series,
/// and measured series, all derived from the given seed.
pub fn generate_dataset(
    spec: &NetworkSpec,
    scenario: &ScenarioConfig,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    let mut rng_eta = derive_rng(seed, 1);
    let mut rng_db = derive_rng(seed, 2);
    let mut rng_noise = derive_rng(seed, 3);

    let etas = sample_eta_assignment(spec, &scenario.noise, scenario.rqm_perfect, &mut rng_eta)?;
    let line_params = spec.line_params()?;
    let database_params =
        perturbed_database_params(&line_params, scenario.database_jitter, &mut rng_db)?;
    let true_series = generate_true_series(spec, &scenario.load)?;
    let (branches, buses) =
        apply_composite_noise(spec, &true_series, &etas, &scenario.noise, &mut rng_noise)?;
    Ok(Dataset {
        network: spec.clone(),
        branches,
        buses,
        truth: GroundTruth {
            line_params,
            database_params,
            etas,
            true_series: Some(true_series),
        },
    })
}

/// RNG seed for one Monte-Carlo trial, derived from the root seed by a
/// SplitMix64 step so trial streams stay well separated.
pub fn trial_seed(root_seed: u64, trial: usize) -> u64 {
    let mut z = root_seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(trial as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::build_design_system;
    use crate::formulation::theta_from_entries;
    use crate::model::PsiVector;
    use approx::assert_relative_eq;

    fn builtin_spec() -> NetworkSpec {
        NetworkSpec::builtin(0.6, 0.15)
    }

    fn ideal_scenario(spec: &NetworkSpec) -> ScenarioConfig {
        ScenarioConfig::preset(Preset::Ideal, spec, NoiseConfig::default(), 20, 3)
    }

    #[test]
    fn two_bus_current_without_shunt() {
        let lp = LineParams::new(0.01, 0.05, 0.0).unwrap();
        let v_p = Complex64::new(1.0, 0.0);
        let v_q = Complex64::from_polar(0.99, (-1.0f64).to_radians());
        let (i_pq, _) = branch_currents(&lp, v_p, v_q);
        let expect = (v_p - v_q) / Complex64::new(0.01, 0.05);
        assert_relative_eq!(i_pq.re, expect.re, epsilon = 1e-15);
        assert_relative_eq!(i_pq.im, expect.im, epsilon = 1e-15);
    }

    #[test]
    fn end_current_sum_is_shunt_injection() {
        let lp = LineParams::new(0.004, 0.04, 0.3).unwrap();
        let v_p = Complex64::new(1.01, 0.02);
        let v_q = Complex64::new(0.98, -0.03);
        let (i_pq, i_qp) = branch_currents(&lp, v_p, v_q);
        let expect = lp.shunt_admittance() * (v_p + v_q);
        let sum = i_pq + i_qp;
        assert_relative_eq!(sum.re, expect.re, epsilon = 1e-14);
        assert_relative_eq!(sum.im, expect.im, epsilon = 1e-14);
    }

    #[test]
    fn chain_snapshot_satisfies_kcl() {
        // 4-bus chain with declared injections; KCL residual at every bus.
        let line = |from, to, r, x, b| crate::model::BranchSpec {
            from,
            to,
            r,
            x,
            b,
            accuracy_class_vt_from: 0.6,
            accuracy_class_vt_to: 0.6,
            accuracy_class_ct_from: 0.6,
            accuracy_class_ct_to: 0.6,
        };
        let spec = NetworkSpec {
            base_mva: 100.0,
            base_kv: 345.0,
            buses: vec![1, 2, 3, 4],
            branches: vec![
                line(1, 2, 0.01, 0.05, 0.1),
                line(2, 3, 0.008, 0.04, 0.12),
                line(3, 4, 0.012, 0.06, 0.08),
            ],
            rqm_branch: BranchId::new(1, 2),
            rqm_end: 1,
        };
        let solver = SnapshotSolver::new(&spec, 1, Complex64::new(1.0, 0.0)).unwrap();
        let mut injections = BTreeMap::new();
        injections.insert(2, Complex64::new(-0.2, -0.05));
        injections.insert(3, Complex64::new(-0.15, -0.02));
        injections.insert(4, Complex64::new(-0.1, -0.04));
        let (_volts, currents) = solver.solve(&injections).unwrap();
        for &q in &[2usize, 3, 4] {
            let sum: Complex64 = spec
                .branches
                .iter()
                .map(|b| b.id())
                .filter(|b| b.touches(q))
                .map(|b| currents[&(b, q)])
                .sum();
            let inj = injections[&q];
            assert!(
                (sum - inj).norm() < 1e-12,
                "KCL residual at bus {q}: {:.3e}",
                (sum - inj).norm()
            );
        }
    }

    #[test]
    fn residual_channel_closes_kcl_everywhere() {
        let spec = builtin_spec();
        let scenario = ideal_scenario(&spec);
        let truth = generate_true_series(&spec, &scenario.load).unwrap();
        for (&q, residual) in &truth.residual_currents {
            for t in 0..truth.n() {
                let sum: Complex64 = truth
                    .end_currents
                    .iter()
                    .filter(|((b, e), _)| *e == q && b.touches(q))
                    .map(|(_, s)| s[t])
                    .sum::<Complex64>()
                    + residual[t];
                assert!(sum.norm() < 1e-12, "bus {q} t {t}: {:.3e}", sum.norm());
            }
        }
    }

    #[test]
    fn generated_voltages_stay_in_band() {
        let spec = builtin_spec();
        let scenario = ideal_scenario(&spec);
        let truth = generate_true_series(&spec, &scenario.load).unwrap();
        for (bus, series) in &truth.bus_voltages {
            for v in series {
                let m = v.norm();
                assert!(
                    (0.85..1.15).contains(&m),
                    "bus {bus} voltage magnitude {m}"
                );
            }
        }
    }

    #[test]
    fn identity_noise_reproduces_truth() {
        let spec = builtin_spec();
        let scenario = ideal_scenario(&spec);
        let truth = generate_true_series(&spec, &scenario.load).unwrap();
        let etas = EtaAssignment::unity(&spec);
        let noise = NoiseConfig {
            tve_max: 0.0,
            ..NoiseConfig::default()
        };
        let mut rng = derive_rng(0, 3);
        let (branches, buses) =
            apply_composite_noise(&spec, &truth, &etas, &noise, &mut rng).unwrap();
        for (id, m) in &branches {
            let v_true = &truth.bus_voltages[&id.from];
            for (t, s) in m.samples.iter().enumerate() {
                assert_eq!(s.v_from.to_complex(), v_true[t]);
            }
        }
        for (q, set) in &buses {
            for (t, r) in set.residual.iter().enumerate() {
                assert_eq!(r.to_complex(), truth.residual_currents[q][t]);
            }
        }
    }

    #[test]
    fn pure_scaling_applies_eta_exactly() {
        let spec = builtin_spec();
        let scenario = ideal_scenario(&spec);
        let truth = generate_true_series(&spec, &scenario.load).unwrap();
        let mut etas = EtaAssignment::unity(&spec);
        let id = spec.rqm_branch;
        etas.vt.insert((id, id.from), Complex64::new(1.005, 0.0));
        let noise = NoiseConfig {
            tve_max: 0.0,
            ..NoiseConfig::default()
        };
        let mut rng = derive_rng(0, 3);
        let (branches, _) = apply_composite_noise(&spec, &truth, &etas, &noise, &mut rng).unwrap();
        let m = &branches[&id];
        for (t, s) in m.samples.iter().enumerate() {
            let expect = truth.bus_voltages[&id.from][t] * 1.005;
            assert_eq!(s.v_from.to_complex(), expect);
        }
    }

    #[test]
    fn tve_exceedance_rate_matches_three_sigma_mapping() {
        // Radial error beyond the TVE bound should be rare (Rayleigh tail at
        // 3σ ≈ 0.012 %); assert the generous 0.3 % ceiling.
        let truth: Vec<Complex64> = vec![Complex64::new(1.0, 0.0); 100_000];
        let mut rng = derive_rng(42, 9);
        let noisy = noisy_channel(&truth, Complex64::new(1.0, 0.0), 0.001, &mut rng);
        let exceed = noisy
            .iter()
            .zip(&truth)
            .filter(|(m, t)| (m.to_complex() - *t).norm() > 0.001 * t.norm())
            .count();
        let rate = exceed as f64 / truth.len() as f64;
        assert!(rate < 0.003, "exceedance rate {rate}");
    }

    #[test]
    fn eta_bounds_per_class() {
        let mut rng = derive_rng(7, 1);
        let mut min: f64 = f64::MAX;
        let mut max: f64 = f64::MIN;
        for _ in 0..10_000 {
            let eta = sample_eta(0.6, 0.87, &mut rng).unwrap();
            min = min.min(eta.norm());
            max = max.max(eta.norm());
            assert!((0.994..1.006).contains(&eta.norm()));
            assert!(eta.arg().to_degrees().abs() <= 0.87 * 0.6);
        }
        // Sampling statistics: extremes approach the class bounds.
        assert!((min - 0.994).abs() < 0.994 * 0.001);
        assert!((max - 1.006).abs() < 1.006 * 0.001);
        let eta = sample_eta(0.15, 0.87, &mut rng).unwrap();
        assert!((0.9985..1.0015).contains(&eta.norm()));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = builtin_spec();
        let scenario =
            ScenarioConfig::preset(Preset::Realistic, &spec, NoiseConfig::default(), 20, 3);
        let a = generate_dataset(&spec, &scenario, 99).unwrap();
        let b = generate_dataset(&spec, &scenario, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec, &scenario, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_free_design_residual_vanishes_at_truth() {
        // Composite conventions line up end to end: measurements generated
        // with arbitrary η and zero noise must make ‖D f(ψ_true) − c‖∞ tiny.
        let spec = builtin_spec();
        let mut scenario =
            ScenarioConfig::preset(Preset::Realistic, &spec, NoiseConfig::default(), 20, 3);
        scenario.noise.tve_max = 0.0;
        let ds = generate_dataset(&spec, &scenario, 5).unwrap();
        for b in &spec.branches {
            let id = b.id();
            let m = &ds.branches[&id];
            let sys = build_design_system(m, id.from).unwrap();
            let a_from = ds.truth.etas.vt_cf(&id, id.from).unwrap();
            let a_to = ds.truth.etas.vt_cf(&id, id.to).unwrap();
            let b_from = ds.truth.etas.ct_cf(&id, id.from).unwrap();
            let b_to = ds.truth.etas.ct_cf(&id, id.to).unwrap();
            let psi = PsiVector::from_parts(
                id,
                id.from,
                &ds.truth.line_params[&id],
                a_to / a_from,
                b_from / a_from,
                b_to / a_from,
            )
            .unwrap();
            let theta = theta_from_entries(&psi.entries);
            let tv = nalgebra::DVector::from_column_slice(&theta);
            let resid = &sys.d * tv - &sys.c;
            let inf = resid.amax();
            assert!(inf <= 1e-10, "branch {id}: residual {inf:.3e}");
        }
    }
}
