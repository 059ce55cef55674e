//! Domain types: phasors, line parameters, correction factors, measurement
//! sets, and the connected tree with branch-path finding.
//!
//! Everything here is an immutable value object once constructed, so the
//! types can be shared freely across parallel Monte-Carlo trials.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type BusId = usize;

/// A complex per-unit quantity as reported by a PMU channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phasor {
    pub re: f64,
    pub im: f64,
}

impl Phasor {
    pub const ZERO: Phasor = Phasor { re: 0.0, im: 0.0 };
    pub const ONE: Phasor = Phasor { re: 1.0, im: 0.0 };

    /// Builds a phasor, rejecting NaN/Inf components.
    pub fn new(re: f64, im: f64) -> Result<Self> {
        if !re.is_finite() || !im.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite phasor components ({re}, {im})"
            )));
        }
        Ok(Phasor { re, im })
    }

    /// Infallible conversion for internally generated values. Panics on
    /// non-finite input, which indicates a bug upstream.
    pub fn from_complex(c: Complex64) -> Self {
        assert!(
            c.re.is_finite() && c.im.is_finite(),
            "non-finite phasor {c}"
        );
        Phasor { re: c.re, im: c.im }
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }

    pub fn magnitude(self) -> f64 {
        self.re.hypot(self.im)
    }

    pub fn angle_rad(self) -> f64 {
        self.im.atan2(self.re)
    }

    pub fn angle_deg(self) -> f64 {
        self.angle_rad().to_degrees()
    }

    pub fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

impl From<Complex64> for Phasor {
    fn from(c: Complex64) -> Self {
        Phasor::from_complex(c)
    }
}

impl fmt::Display for Phasor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+.6}{:+.6}j", self.re, self.im)
    }
}

/// Series impedance and per-end shunt susceptance of one π-section line,
/// all in per-unit on the declared system base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    /// Series resistance.
    pub r: f64,
    /// Series reactance.
    pub x: f64,
    /// Shunt susceptance applied at each line end.
    pub b: f64,
}

impl LineParams {
    pub fn new(r: f64, x: f64, b: f64) -> Result<Self> {
        if !(r.is_finite() && x.is_finite() && b.is_finite()) {
            return Err(Error::InvalidInput("non-finite line parameters".into()));
        }
        if x <= 0.0 {
            return Err(Error::InvalidInput(format!("reactance must be > 0, got {x}")));
        }
        if r < 0.0 {
            return Err(Error::InvalidInput(format!("resistance must be >= 0, got {r}")));
        }
        if b < 0.0 {
            return Err(Error::InvalidInput(format!("susceptance must be >= 0, got {b}")));
        }
        Ok(LineParams { r, x, b })
    }

    /// z = r + jx.
    pub fn series_impedance(&self) -> Complex64 {
        Complex64::new(self.r, self.x)
    }

    /// Per-end shunt admittance jb.
    pub fn shunt_admittance(&self) -> Complex64 {
        Complex64::new(0.0, self.b)
    }
}

/// Magnitude window accepted for any correction factor. Far wider than any
/// IT accuracy class; acts purely as a sanity bound.
pub const CF_MAGNITUDE_MIN: f64 = 0.5;
pub const CF_MAGNITUDE_MAX: f64 = 1.5;

/// The four complex instrument-transformer correction factors of one branch:
/// α for the VTs, β for the CTs, at each end. A correction factor is the
/// reciprocal of the channel's ratio error η.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionFactors {
    pub alpha_from: Phasor,
    pub alpha_to: Phasor,
    pub beta_from: Phasor,
    pub beta_to: Phasor,
}

impl CorrectionFactors {
    pub fn new(
        alpha_from: Phasor,
        alpha_to: Phasor,
        beta_from: Phasor,
        beta_to: Phasor,
    ) -> Result<Self> {
        for (name, cf) in [
            ("alpha_from", alpha_from),
            ("alpha_to", alpha_to),
            ("beta_from", beta_from),
            ("beta_to", beta_to),
        ] {
            let m = cf.magnitude();
            if !(CF_MAGNITUDE_MIN..CF_MAGNITUDE_MAX).contains(&m) {
                return Err(Error::NumericDomain(format!(
                    "correction factor {name} magnitude {m:.6} outside ({CF_MAGNITUDE_MIN}, {CF_MAGNITUDE_MAX})"
                )));
            }
        }
        Ok(CorrectionFactors {
            alpha_from,
            alpha_to,
            beta_from,
            beta_to,
        })
    }

    pub fn all_unity() -> Self {
        CorrectionFactors {
            alpha_from: Phasor::ONE,
            alpha_to: Phasor::ONE,
            beta_from: Phasor::ONE,
            beta_to: Phasor::ONE,
        }
    }
}

/// A monitored line, identified by its declared (from, to) bus pair.
/// (p, q) and (q, p) denote the same physical line with the measurement
/// roles swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BranchId {
    pub from: BusId,
    pub to: BusId,
}

impl BranchId {
    pub fn new(from: BusId, to: BusId) -> Self {
        BranchId { from, to }
    }

    /// Unordered identity key: the same physical line regardless of
    /// orientation.
    pub fn key(&self) -> (BusId, BusId) {
        if self.from <= self.to {
            (self.from, self.to)
        } else {
            (self.to, self.from)
        }
    }

    pub fn touches(&self, bus: BusId) -> bool {
        self.from == bus || self.to == bus
    }

    pub fn other_end(&self, bus: BusId) -> Result<BusId> {
        if bus == self.from {
            Ok(self.to)
        } else if bus == self.to {
            Ok(self.from)
        } else {
            Err(Error::Topology(format!("bus {bus} is not an end of branch {self}")))
        }
    }

    /// The single bus shared with another branch, if any. Parallel lines
    /// (same unordered key) share two buses and return None.
    pub fn shared_bus(&self, other: &BranchId) -> Option<BusId> {
        if self.key() == other.key() {
            return None;
        }
        for end in [self.from, self.to] {
            if other.touches(end) {
                return Some(end);
            }
        }
        None
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}-{})", self.from, self.to)
    }
}

/// The nine real unknowns of one branch: line parameters followed by the
/// three complex correction-factor ratios, all referenced to the VT at
/// `reference_end`.
///
/// Entry order (0-based): r, x, b, Re/Im(α_other/α_ref), Re/Im(β_ref/α_ref),
/// Re/Im(β_other/α_ref).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiVector {
    pub branch: BranchId,
    pub reference_end: BusId,
    pub entries: [f64; 9],
}

impl PsiVector {
    pub fn new(branch: BranchId, reference_end: BusId, entries: [f64; 9]) -> Result<Self> {
        if !branch.touches(reference_end) {
            return Err(Error::Topology(format!(
                "reference end {reference_end} is not an end of branch {branch}"
            )));
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidInput("non-finite psi entries".into()));
        }
        Ok(PsiVector {
            branch,
            reference_end,
            entries,
        })
    }

    /// Builds the vector from physical parts.
    pub fn from_parts(
        branch: BranchId,
        reference_end: BusId,
        params: &LineParams,
        alpha_ratio: Complex64,
        beta_ref_ratio: Complex64,
        beta_other_ratio: Complex64,
    ) -> Result<Self> {
        Self::new(
            branch,
            reference_end,
            [
                params.r,
                params.x,
                params.b,
                alpha_ratio.re,
                alpha_ratio.im,
                beta_ref_ratio.re,
                beta_ref_ratio.im,
                beta_other_ratio.re,
                beta_other_ratio.im,
            ],
        )
    }

    pub fn other_end(&self) -> BusId {
        self.branch
            .other_end(self.reference_end)
            .expect("reference end checked at construction")
    }

    pub fn r(&self) -> f64 {
        self.entries[0]
    }

    pub fn x(&self) -> f64 {
        self.entries[1]
    }

    pub fn b(&self) -> f64 {
        self.entries[2]
    }

    pub fn line_params(&self) -> Result<LineParams> {
        LineParams::new(self.r(), self.x(), self.b())
    }

    /// α_other / α_ref.
    pub fn alpha_ratio(&self) -> Complex64 {
        Complex64::new(self.entries[3], self.entries[4])
    }

    /// β_ref / α_ref.
    pub fn beta_ref_ratio(&self) -> Complex64 {
        Complex64::new(self.entries[5], self.entries[6])
    }

    /// β_other / α_ref.
    pub fn beta_other_ratio(&self) -> Complex64 {
        Complex64::new(self.entries[7], self.entries[8])
    }

    /// Checks the physical invariants: valid line parameters and CFR
    /// magnitudes inside the sanity window.
    pub fn validate(&self) -> Result<()> {
        self.line_params()?;
        for (name, ratio) in [
            ("alpha_ratio", self.alpha_ratio()),
            ("beta_ref_ratio", self.beta_ref_ratio()),
            ("beta_other_ratio", self.beta_other_ratio()),
        ] {
            let m = ratio.norm();
            if !(CF_MAGNITUDE_MIN..CF_MAGNITUDE_MAX).contains(&m) {
                return Err(Error::NumericDomain(format!(
                    "{name} magnitude {m:.6} outside ({CF_MAGNITUDE_MIN}, {CF_MAGNITUDE_MAX})"
                )));
            }
        }
        Ok(())
    }
}

/// The eight linear-system unknowns of one branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaVector(pub [f64; 8]);

/// One time instant of the four branch channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub v_from: Phasor,
    pub v_to: Phasor,
    pub i_from: Phasor,
    pub i_to: Phasor,
}

impl Sample {
    pub fn is_finite(&self) -> bool {
        self.v_from.is_finite()
            && self.v_to.is_finite()
            && self.i_from.is_finite()
            && self.i_to.is_finite()
    }
}

/// Minimum number of time instants per solve window: 4n rows must cover the
/// 9 unknowns with margin.
pub const MIN_SAMPLES: usize = 3;

/// Time-stacked V/I phasor series for one monitored line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchMeasurements {
    pub branch: BranchId,
    pub samples: Vec<Sample>,
}

impl BranchMeasurements {
    pub fn new(branch: BranchId, samples: Vec<Sample>) -> Result<Self> {
        if samples.len() < MIN_SAMPLES {
            return Err(Error::InvalidInput(format!(
                "branch {branch}: {} samples, need at least {MIN_SAMPLES}",
                samples.len()
            )));
        }
        if let Some(k) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "branch {branch}: non-finite sample at index {k}"
            )));
        }
        Ok(BranchMeasurements { branch, samples })
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    /// Extracts a contiguous solve window.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.samples.len() {
            return Err(Error::InvalidInput(format!(
                "window [{start}, {}) exceeds series length {}",
                start + len,
                self.samples.len()
            )));
        }
        BranchMeasurements::new(self.branch, self.samples[start..start + len].to_vec())
    }

    /// Voltage series measured at the given end.
    pub fn voltage_at(&self, bus: BusId) -> Result<Vec<Complex64>> {
        if bus == self.branch.from {
            Ok(self.samples.iter().map(|s| s.v_from.to_complex()).collect())
        } else if bus == self.branch.to {
            Ok(self.samples.iter().map(|s| s.v_to.to_complex()).collect())
        } else {
            Err(Error::Topology(format!(
                "bus {bus} is not an end of branch {}",
                self.branch
            )))
        }
    }

    /// Current series measured at the given end (flowing from the bus into
    /// the line).
    pub fn current_at(&self, bus: BusId) -> Result<Vec<Complex64>> {
        if bus == self.branch.from {
            Ok(self.samples.iter().map(|s| s.i_from.to_complex()).collect())
        } else if bus == self.branch.to {
            Ok(self.samples.iter().map(|s| s.i_to.to_complex()).collect())
        } else {
            Err(Error::Topology(format!(
                "bus {bus} is not an end of branch {}",
                self.branch
            )))
        }
    }
}

/// All current channels metered at one bus: the incident monitored branch
/// series plus the residual channel that aggregates every other inflow
/// through its own CT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusCurrentSet {
    pub bus: BusId,
    /// Per incident monitored branch, the bus-end current series exactly as
    /// measured by that branch's CT.
    pub branch_currents: Vec<(BranchId, Vec<Phasor>)>,
    /// Residual current series I_qL.
    pub residual: Vec<Phasor>,
}

impl BusCurrentSet {
    pub fn branch_current(&self, branch: &BranchId) -> Result<&[Phasor]> {
        self.branch_currents
            .iter()
            .find(|(b, _)| b.key() == branch.key())
            .map(|(_, s)| s.as_slice())
            .ok_or_else(|| {
                Error::Topology(format!("branch {branch} not metered at bus {}", self.bus))
            })
    }

    pub fn n(&self) -> usize {
        self.residual.len()
    }
}

/// A connected set of double-PMU-monitored lines containing the RQM branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectedTree {
    pub buses: Vec<BusId>,
    pub branches: Vec<BranchId>,
    pub rqm_branch: BranchId,
    pub rqm_end: BusId,
}

impl ConnectedTree {
    pub fn new(
        buses: Vec<BusId>,
        branches: Vec<BranchId>,
        rqm_branch: BranchId,
        rqm_end: BusId,
    ) -> Result<Self> {
        let tree = ConnectedTree {
            buses,
            branches,
            rqm_branch,
            rqm_end,
        };
        tree.validate()?;
        Ok(tree)
    }

    fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Topology("tree has no branches".into()));
        }
        let bus_set: BTreeSet<BusId> = self.buses.iter().copied().collect();
        let mut keys = BTreeSet::new();
        for b in &self.branches {
            if b.from == b.to {
                return Err(Error::Topology(format!("branch {b} is a self-loop")));
            }
            if !bus_set.contains(&b.from) || !bus_set.contains(&b.to) {
                return Err(Error::Topology(format!("branch {b} references unknown bus")));
            }
            if !keys.insert(b.key()) {
                return Err(Error::Topology(format!("duplicate branch {b}")));
            }
        }
        if !self.contains(&self.rqm_branch) {
            return Err(Error::Topology(format!(
                "RQM branch {} is not in the tree",
                self.rqm_branch
            )));
        }
        if !self.rqm_branch.touches(self.rqm_end) {
            return Err(Error::Topology(format!(
                "RQM end {} is not an end of branch {}",
                self.rqm_end, self.rqm_branch
            )));
        }

        // Connectivity over bus adjacency.
        let adj = self.bus_adjacency();
        let start = *self.buses.iter().min().expect("non-empty");
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        seen.insert(start);
        while let Some(u) = queue.pop_front() {
            for &v in adj.get(&u).map(|v| v.as_slice()).unwrap_or(&[]) {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        if seen.len() != bus_set.len() {
            return Err(Error::Topology("tree is not connected".into()));
        }
        Ok(())
    }

    pub fn contains(&self, branch: &BranchId) -> bool {
        self.branches.iter().any(|b| b.key() == branch.key())
    }

    /// Branches incident to a bus, sorted by unordered key.
    pub fn incident(&self, bus: BusId) -> Vec<BranchId> {
        let mut out: Vec<BranchId> = self
            .branches
            .iter()
            .copied()
            .filter(|b| b.touches(bus))
            .collect();
        out.sort_by_key(|b| b.key());
        out
    }

    fn bus_adjacency(&self) -> BTreeMap<BusId, Vec<BusId>> {
        let mut adj: BTreeMap<BusId, Vec<BusId>> = BTreeMap::new();
        for bus in &self.buses {
            adj.entry(*bus).or_default();
        }
        for b in &self.branches {
            adj.entry(b.from).or_default().push(b.to);
            adj.entry(b.to).or_default().push(b.from);
        }
        for v in adj.values_mut() {
            v.sort_unstable();
        }
        adj
    }
}

/// Finds the branch path ζ from the RQM branch to `target`: first element is
/// the RQM branch, last is `target`, and consecutive branches share exactly
/// one bus. BFS over branch adjacency; shortest by branch count with
/// lowest-bus-id tie-break, so the result is deterministic for a fixed bus
/// ordering.
pub fn find_path(tree: &ConnectedTree, target: &BranchId) -> Result<Vec<BranchId>> {
    if !tree.contains(target) {
        return Err(Error::Topology(format!("target branch {target} is not in the tree")));
    }
    let canon = |b: &BranchId| -> BranchId {
        tree.branches
            .iter()
            .copied()
            .find(|t| t.key() == b.key())
            .expect("membership checked")
    };
    let start = canon(&tree.rqm_branch);
    let goal = canon(target);
    if start.key() == goal.key() {
        return Ok(vec![start]);
    }

    // Neighbors of a branch: branches sharing a bus, ordered by the shared
    // bus id then by branch key.
    let neighbors = |b: &BranchId| -> Vec<BranchId> {
        let mut out: Vec<(BusId, BranchId)> = Vec::new();
        for end in [b.from.min(b.to), b.from.max(b.to)] {
            for other in tree.incident(end) {
                if other.key() != b.key() {
                    out.push((end, other));
                }
            }
        }
        out.sort_by_key(|(bus, br)| (*bus, br.key()));
        out.into_iter().map(|(_, br)| br).collect()
    };

    let mut parent: BTreeMap<(BusId, BusId), BranchId> = BTreeMap::new();
    let mut seen: BTreeSet<(BusId, BusId)> = BTreeSet::new();
    let mut queue = VecDeque::from([start]);
    seen.insert(start.key());
    while let Some(cur) = queue.pop_front() {
        for nb in neighbors(&cur) {
            if seen.insert(nb.key()) {
                parent.insert(nb.key(), cur);
                if nb.key() == goal.key() {
                    let mut path = vec![nb];
                    let mut at = nb.key();
                    while let Some(p) = parent.get(&at) {
                        path.push(*p);
                        at = p.key();
                    }
                    path.reverse();
                    return Ok(path);
                }
                queue.push_back(nb);
            }
        }
    }
    Err(Error::Topology(format!(
        "no path from RQM branch {} to {target}",
        tree.rqm_branch
    )))
}

/// One line of a serialized network specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub accuracy_class_vt_from: f64,
    pub accuracy_class_vt_to: f64,
    pub accuracy_class_ct_from: f64,
    pub accuracy_class_ct_to: f64,
}

impl BranchSpec {
    pub fn id(&self) -> BranchId {
        BranchId::new(self.from, self.to)
    }

    pub fn params(&self) -> Result<LineParams> {
        LineParams::new(self.r, self.x, self.b)
    }
}

/// Serialized description of the monitored network: topology, true line
/// parameters, per-channel IT accuracy classes, the RQM location, and the
/// per-unit base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub base_mva: f64,
    pub base_kv: f64,
    pub buses: Vec<BusId>,
    pub branches: Vec<BranchSpec>,
    pub rqm_branch: BranchId,
    pub rqm_end: BusId,
}

impl NetworkSpec {
    pub fn to_tree(&self) -> Result<ConnectedTree> {
        ConnectedTree::new(
            self.buses.clone(),
            self.branches.iter().map(|b| b.id()).collect(),
            self.rqm_branch,
            self.rqm_end,
        )
    }

    pub fn line_params(&self) -> Result<BTreeMap<BranchId, LineParams>> {
        let mut map = BTreeMap::new();
        for b in &self.branches {
            map.insert(b.id(), b.params()?);
        }
        Ok(map)
    }

    pub fn branch_spec(&self, branch: &BranchId) -> Result<&BranchSpec> {
        self.branches
            .iter()
            .find(|b| b.id().key() == branch.key())
            .ok_or_else(|| Error::Topology(format!("branch {branch} not in network spec")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_mva <= 0.0 || self.base_kv <= 0.0 {
            return Err(Error::InvalidInput("base quantities must be positive".into()));
        }
        for b in &self.branches {
            b.params()?;
            for class in [
                b.accuracy_class_vt_from,
                b.accuracy_class_vt_to,
                b.accuracy_class_ct_from,
                b.accuracy_class_ct_to,
            ] {
                if class <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "branch {} has non-positive accuracy class",
                        b.id()
                    )));
                }
            }
        }
        self.to_tree()?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: NetworkSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The built-in desk-scale test network: a 10-branch, 11-bus tree with
    /// the RQM pair at bus 1 of branch (1,2). Values are typical of a 345 kV
    /// overlay in per-unit on 100 MVA.
    pub fn builtin(regular_class: f64, rqm_class: f64) -> Self {
        let line = |from, to, r, x, b, vt_f: f64, ct_f: f64| BranchSpec {
            from,
            to,
            r,
            x,
            b,
            accuracy_class_vt_from: vt_f,
            accuracy_class_vt_to: regular_class,
            accuracy_class_ct_from: ct_f,
            accuracy_class_ct_to: regular_class,
        };
        let rc = regular_class;
        NetworkSpec {
            base_mva: 100.0,
            base_kv: 345.0,
            buses: (1..=11).collect(),
            branches: vec![
                // RQM pair lives at bus 1 of this branch.
                line(1, 2, 0.0035, 0.0320, 0.080, rqm_class, rqm_class),
                line(2, 3, 0.0060, 0.0480, 0.110, rc, rc),
                line(3, 4, 0.0045, 0.0395, 0.095, rc, rc),
                line(4, 5, 0.0080, 0.0540, 0.125, rc, rc),
                line(2, 6, 0.0052, 0.0430, 0.100, rc, rc),
                line(6, 7, 0.0090, 0.0610, 0.140, rc, rc),
                line(3, 8, 0.0040, 0.0360, 0.088, rc, rc),
                line(8, 9, 0.0070, 0.0500, 0.115, rc, rc),
                line(1, 10, 0.0065, 0.0465, 0.105, rc, rc),
                line(4, 11, 0.0055, 0.0415, 0.098, rc, rc),
            ],
            rqm_branch: BranchId::new(1, 2),
            rqm_end: 1,
        }
    }
}
