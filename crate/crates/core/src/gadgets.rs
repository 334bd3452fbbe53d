//! Composite operations: the two nondemolition parity checks,
//! the DOF-transfer transforms, the pair eraser and the
//! diagonalizer/correlator.
//!
//! Gadgets never apply their feed-forward themselves. Each outcome carries
//! the local corrections it prescribes, so callers can inspect the state
//! before and after them.

use std::fmt;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::hyperstate::{
    BasisKet, Dof, Ensemble, Photon, PhotonSet, PureState, Subsystem, H, M1, M2, V, W1, W2,
};
use crate::numfmt::sig15;
use crate::optics::{
    apply_unitary, frequency_multiply_all, homodyne_classify, kerr_tag, overwrite_ensemble,
    prepare_dof, KerrRule, PolGate, TaggedState,
};

const fn sub(p: Photon, d: Dof) -> Subsystem {
    Subsystem::new(p, d)
}

/// A prescribed local unitary on one DOF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Correction {
    pub target: Subsystem,
    pub gate: PolGate,
}

impl Correction {
    pub fn new(target: Subsystem, gate: PolGate) -> Correction {
        Correction { target, gate }
    }
}

impl fmt::Display for Correction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.gate, self.target)
    }
}

/// Applies corrections in order.
pub fn apply_corrections(state: &PureState, corrections: &[Correction]) -> Result<PureState> {
    corrections
        .iter()
        .try_fold(state.clone(), |s, c| apply_unitary(&s, c.target, c.gate))
}

/// One classical outcome of a gadget.
#[derive(Debug, Clone, PartialEq)]
pub struct GadgetOutcome {
    pub label: String,
    pub probability: f64,
    /// Post-measurement state, before `corrections`.
    pub state: PureState,
    pub corrections: Vec<Correction>,
}

impl GadgetOutcome {
    pub fn corrected(&self) -> Result<PureState> {
        apply_corrections(&self.state, &self.corrections)
    }
}

/// Trace-log line: label, probability with 15 digits, corrections.
impl fmt::Display for GadgetOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let corr = if self.corrections.is_empty() {
            "-".to_string()
        } else {
            self.corrections
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(f, "{}\t{}\t{}", self.label, sig15(self.probability), corr)
    }
}

pub const QND1_UP: &str = "qnd1.up";
pub const QND1_DOWN: &str = "qnd1.down";
pub const QND2_ALICE_UP: &str = "qnd2.alice.up";
pub const QND2_ALICE_DOWN: &str = "qnd2.alice.down";
pub const QND2_BOB_UP: &str = "qnd2.bob.up";
pub const QND2_BOB_DOWN: &str = "qnd2.bob.down";

const PROBES: [&str; 6] = [
    QND1_UP,
    QND1_DOWN,
    QND2_ALICE_UP,
    QND2_ALICE_DOWN,
    QND2_BOB_UP,
    QND2_BOB_DOWN,
];

/// Cross-Kerr layout of both nondemolition detectors.
///
/// The default QND1 table couples spatial modes with θ and frequencies with
/// 2θ, so the up/down difference is zero exactly when A and C disagree in
/// both spatial mode and frequency. For QND2 the upper beam gains θ for `H`
/// or mode 2 and the lower beam for `V` or mode 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CouplingTable {
    pub rules: Vec<KerrRule>,
    /// Homodyne class that heralds QND1 success.
    pub qnd1_success_class: u32,
}

impl Default for CouplingTable {
    fn default() -> Self {
        use Photon::*;
        let r = KerrRule::new;
        CouplingTable {
            rules: vec![
                r(QND1_UP, A, Dof::Spatial, M1, 1),
                r(QND1_UP, C, Dof::Spatial, M1, 1),
                r(QND1_UP, A, Dof::Freq, W1, 2),
                r(QND1_UP, C, Dof::Freq, W1, 2),
                r(QND1_DOWN, A, Dof::Spatial, M2, 1),
                r(QND1_DOWN, C, Dof::Spatial, M2, 1),
                r(QND1_DOWN, A, Dof::Freq, W2, 2),
                r(QND1_DOWN, C, Dof::Freq, W2, 2),
                r(QND2_ALICE_UP, A, Dof::Pol, H, 1),
                r(QND2_ALICE_UP, C, Dof::Spatial, M2, 1),
                r(QND2_ALICE_DOWN, A, Dof::Pol, V, 1),
                r(QND2_ALICE_DOWN, C, Dof::Spatial, M1, 1),
                r(QND2_BOB_UP, B, Dof::Pol, H, 1),
                r(QND2_BOB_UP, D, Dof::Spatial, M2, 1),
                r(QND2_BOB_DOWN, B, Dof::Pol, V, 1),
                r(QND2_BOB_DOWN, D, Dof::Spatial, M1, 1),
            ],
            qnd1_success_class: 0,
        }
    }
}

impl CouplingTable {
    fn rules_for<'a>(&'a self, probes: &'a [&'a str]) -> impl Iterator<Item = &'a KerrRule> + 'a {
        self.rules.iter().filter(move |r| probes.contains(&r.probe.as_str()))
    }

    /// Parses the text form: one `probe photon dof value units` line per
    /// rule, plus an optional `qnd1.success_class N` line. A file that
    /// mentions a probe replaces all default rules for that probe.
    /// `#` starts a comment.
    pub fn parse(text: &str) -> std::result::Result<CouplingTable, (usize, String)> {
        let mut table = CouplingTable::default();
        let mut given: Vec<KerrRule> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: String| (n + 1, msg);
            if fields[0] == "qnd1.success_class" {
                let [_, v] = fields[..] else {
                    return Err(err("expected `qnd1.success_class N`".into()));
                };
                table.qnd1_success_class =
                    v.parse().map_err(|_| err(format!("bad class `{v}`")))?;
                continue;
            }
            let [probe, photon, dof, value, units] = fields[..] else {
                return Err(err("expected `probe photon dof value units`".into()));
            };
            if !PROBES.contains(&probe) {
                return Err(err(format!("unknown probe `{probe}`")));
            }
            let photon = photon
                .chars()
                .next()
                .filter(|_| photon.len() == 1)
                .and_then(Photon::from_label)
                .ok_or_else(|| err(format!("bad photon `{photon}`")))?;
            let dof = Dof::from_name(dof).ok_or_else(|| err(format!("bad dof `{dof}`")))?;
            let value = dof
                .parse_value(value)
                .ok_or_else(|| err(format!("bad {dof} value `{value}`")))?;
            let units = units
                .parse()
                .map_err(|_| err(format!("bad θ multiple `{units}`")))?;
            given.push(KerrRule::new(probe, photon, dof, value, units));
        }
        table
            .rules
            .retain(|r| !given.iter().any(|g| g.probe == r.probe));
        table.rules.extend(given);
        Ok(table)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("qnd1.success_class {}\n", self.qnd1_success_class);
        for r in &self.rules {
            for (s, v) in &r.conditions {
                out.push_str(&format!(
                    "{} {} {} {} {}\n",
                    r.probe,
                    s.photon,
                    s.dof,
                    s.value_label(*v),
                    r.units
                ));
            }
        }
        out
    }
}

fn require(state: &PureState, photons: &[Photon], what: &str) -> Result<()> {
    let need = PhotonSet::of(photons);
    if need.is_subset(state.photons()) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what} needs photons {{{need}}}, state carries {{{}}}",
            state.photons()
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Qnd1Result {
    pub success: Option<GadgetOutcome>,
    /// One outcome per non-heralding homodyne class.
    pub failures: Vec<GadgetOutcome>,
}

impl Qnd1Result {
    pub fn success_probability(&self) -> f64 {
        self.success.as_ref().map_or(0.0, |o| o.probability)
    }

    pub fn failure_probability(&self) -> f64 {
        self.failures.iter().map(|o| o.probability).sum()
    }
}

/// Alice's first parity check on photons A and C, realized with the probe
/// couplings of `coupling`.
pub fn qnd1(state: &PureState, coupling: &CouplingTable) -> Result<Qnd1Result> {
    require(state, &[Photon::A, Photon::C], "qnd1")?;
    let tagged = coupling
        .rules_for(&[QND1_UP, QND1_DOWN])
        .fold(TaggedState::new(state.clone()), kerr_tag);
    // make sure both probes exist even with an empty table
    let tagged = kerr_tag(kerr_tag(tagged, &KerrRule::new(QND1_UP, Photon::A, Dof::Pol, H, 0)), &KerrRule::new(QND1_DOWN, Photon::A, Dof::Pol, H, 0));
    let mut result = Qnd1Result {
        success: None,
        failures: Vec::new(),
    };
    for b in homodyne_classify(&tagged, QND1_UP, QND1_DOWN)? {
        let heralded = b.outcome.class == coupling.qnd1_success_class;
        let outcome = GadgetOutcome {
            label: if heralded {
                "qnd1=success".to_string()
            } else {
                format!("qnd1=fail({})", b.outcome.class)
            },
            probability: b.probability,
            state: b.state.untag(),
            corrections: Vec::new(),
        };
        if heralded {
            result.success = Some(outcome);
        } else {
            result.failures.push(outcome);
        }
    }
    Ok(result)
}

/// Declarative QND1 contract: keep kets where A and C differ in both
/// spatial mode and frequency.
pub fn qnd1_contract(state: &PureState) -> Option<(f64, PureState)> {
    let (asp, csp) = (sub(Photon::A, Dof::Spatial), sub(Photon::C, Dof::Spatial));
    let (afr, cfr) = (sub(Photon::A, Dof::Freq), sub(Photon::C, Dof::Freq));
    state.project(|k| k.get(asp) != k.get(csp) && k.get(afr) != k.get(cfr))
}

fn single_branch(e: Ensemble, what: &str) -> Result<PureState> {
    match e.as_pure() {
        Some(s) => Ok(s.clone()),
        None => Err(Error::Precondition(format!(
            "{what} left a {}-branch mixture",
            e.len()
        ))),
    }
}

fn require_anticorrelated(state: &PureState, pairs: &[(Photon, Photon)], what: &str) -> Result<()> {
    for &(x, y) in pairs {
        let (fx, fy) = (sub(x, Dof::Freq), sub(y, Dof::Freq));
        if state.iter().any(|(k, _)| k.get(fx) == k.get(fy)) {
            return Err(Error::CoherenceLoss(format!(
                "{what}: frequencies of {x} and {y} are not anti-correlated on every ket"
            )));
        }
    }
    Ok(())
}

fn overwrite_all(
    state: &PureState,
    plan: &[(Photon, Dof, Dof, [u8; 2])],
) -> Result<Ensemble> {
    plan.iter().try_fold(Ensemble::pure(state.clone()), |e, &(p, t, c, rule)| {
        overwrite_ensemble(&e, sub(p, t), sub(p, c), rule)
    })
}

/// Polarization-from-frequency transfer followed by frequency multipliers.
/// A and D take `H` for ω1 and `V` for ω2; B and C the opposite.
pub fn pol_freq_transform(state: &PureState) -> Result<PureState> {
    require(state, &Photon::ALL, "pol_freq_transform")?;
    require_anticorrelated(state, &[(Photon::A, Photon::C), (Photon::B, Photon::D)], "pol_freq_transform")?;
    let direct = [H, V];
    let opposite = [V, H];
    let e = overwrite_all(
        state,
        &[
            (Photon::A, Dof::Pol, Dof::Freq, direct),
            (Photon::B, Dof::Pol, Dof::Freq, opposite),
            (Photon::C, Dof::Pol, Dof::Freq, opposite),
            (Photon::D, Dof::Pol, Dof::Freq, direct),
        ],
    )?;
    frequency_multiply_all(&single_branch(e, "pol_freq_transform")?)
}

/// Spatial-from-frequency transfer followed by frequency multipliers.
/// A and C take mode 1 for ω1 and mode 2 for ω2; B and D the opposite.
pub fn spatial_freq_transform(state: &PureState) -> Result<PureState> {
    require(state, &Photon::ALL, "spatial_freq_transform")?;
    require_anticorrelated(
        state,
        &[(Photon::A, Photon::B), (Photon::C, Photon::D)],
        "spatial_freq_transform",
    )?;
    let direct = [M1, M2];
    let opposite = [M2, M1];
    let e = overwrite_all(
        state,
        &[
            (Photon::A, Dof::Spatial, Dof::Freq, direct),
            (Photon::B, Dof::Spatial, Dof::Freq, opposite),
            (Photon::C, Dof::Spatial, Dof::Freq, direct),
            (Photon::D, Dof::Spatial, Dof::Freq, opposite),
        ],
    )?;
    frequency_multiply_all(&single_branch(e, "spatial_freq_transform")?)
}

/// Puts A and B polarization into |+⟩ whatever it was, and copies the
/// spatial mode of C and D into their own polarization (mode 1 → `H`).
pub fn diagonalize_and_correlate(state: &PureState) -> Result<PureState> {
    require(state, &Photon::ALL, "diagonalize_and_correlate")?;
    let r = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let plus = [r, r];
    let e = Ensemble::pure(state.clone());
    let e = prepare_dof(&e, sub(Photon::A, Dof::Pol), plus)?;
    let e = prepare_dof(&e, sub(Photon::B, Dof::Pol), plus)?;
    let e = overwrite_ensemble(&e, sub(Photon::C, Dof::Pol), sub(Photon::C, Dof::Spatial), [H, V])?;
    let e = overwrite_ensemble(&e, sub(Photon::D, Dof::Pol), sub(Photon::D, Dof::Spatial), [H, V])?;
    single_branch(e, "diagonalize_and_correlate")
}

/// Both parties' parity checks: Alice on (A pol, C spatial), Bob on
/// (B pol, D spatial). Unequal classes prescribe a bit flip on A.
pub fn qnd2(state: &PureState, coupling: &CouplingTable) -> Result<Vec<GadgetOutcome>> {
    require(state, &Photon::ALL, "qnd2")?;
    for p in [Photon::C, Photon::D] {
        let (ps, ss) = (sub(p, Dof::Pol), sub(p, Dof::Spatial));
        if state.iter().any(|(k, _)| k.get(ps) != k.get(ss)) {
            return Err(Error::Precondition(format!(
                "qnd2 expects the polarization of {p} to mirror its spatial mode"
            )));
        }
    }
    let probes = [QND2_ALICE_UP, QND2_ALICE_DOWN, QND2_BOB_UP, QND2_BOB_DOWN];
    let mut tagged = coupling
        .rules_for(&probes)
        .fold(TaggedState::new(state.clone()), kerr_tag);
    for p in probes {
        tagged = kerr_tag(tagged, &KerrRule::new(p, Photon::A, Dof::Pol, H, 0));
    }
    let mut out = Vec::new();
    for alice in homodyne_classify(&tagged, QND2_ALICE_UP, QND2_ALICE_DOWN)? {
        for bob in homodyne_classify(&alice.state, QND2_BOB_UP, QND2_BOB_DOWN)? {
            let (ca, cb) = (alice.outcome.class, bob.outcome.class);
            let corrections = if ca == cb {
                Vec::new()
            } else {
                vec![Correction::new(sub(Photon::A, Dof::Pol), PolGate::Flip)]
            };
            out.push(GadgetOutcome {
                label: format!("qnd2=({ca},{cb})"),
                probability: alice.probability * bob.probability,
                state: bob.state.untag(),
                corrections,
            });
        }
    }
    Ok(out)
}

/// Finds a kept subsystem whose value determines `s` on every ket, as
/// `s = r ⊕ offset`.
fn affine_reference(state: &PureState, s: Subsystem, kept: PhotonSet) -> Option<Subsystem> {
    let mut candidates: Vec<Subsystem> = Vec::new();
    for p in kept.iter() {
        candidates.push(sub(p, s.dof));
    }
    for p in kept.iter() {
        for d in Dof::ALL {
            if d != s.dof {
                candidates.push(sub(p, d));
            }
        }
    }
    candidates.into_iter().find(|&r| {
        let mut offset = None;
        state.iter().all(|(k, _)| {
            let x = k.get(s) ^ k.get(r);
            *offset.get_or_insert(x) == x
        })
    })
}

fn diagonal_projector(outcome: u8) -> [[Complex64; 2]; 2] {
    let h = Complex64::new(0.5, 0.0);
    let o = if outcome == 0 { h } else { -h };
    [[h, o], [o, h]]
}

/// Disentangles `pair` from the other two photons and resets it to
/// `|H, mode 1⟩` on both photons.
///
/// Each polarization and spatial DOF of the pair that is still coherent is
/// measured in the diagonal basis. A `−` result flips the relative phase of
/// whatever kept DOF it was correlated with, so it prescribes `σ_z` there;
/// the measured DOF itself is rotated and flipped back to value 0. DOFs that
/// are already classical are just flipped to 0 when needed.
pub fn erase_pair(state: &PureState, pair: [Photon; 2]) -> Result<Vec<GadgetOutcome>> {
    require(state, &pair, "erase_pair")?;
    let pair_set = PhotonSet::of(&pair);
    let kept = state.photons().difference(pair_set);

    struct Partial {
        labels: Vec<String>,
        probability: f64,
        state: PureState,
        resets: Vec<Correction>,
        phases: Vec<Subsystem>,
    }
    let mut partials = vec![Partial {
        labels: Vec::new(),
        probability: 1.0,
        state: state.clone(),
        resets: Vec::new(),
        phases: Vec::new(),
    }];

    for p in pair {
        for dof in [Dof::Pol, Dof::Spatial] {
            let s = sub(p, dof);
            let mut next = Vec::new();
            for part in partials {
                if let Some(v) = part.state.classical_value(s) {
                    let mut part = part;
                    if v == 1 {
                        part.resets.push(Correction::new(s, PolGate::Flip));
                    }
                    next.push(part);
                    continue;
                }
                let reference = affine_reference(&part.state, s, kept).ok_or_else(|| {
                    Error::Precondition(format!(
                        "{s} is entangled with the kept photons in a way no local phase can undo"
                    ))
                })?;
                for outcome in 0..2u8 {
                    let Some((prob, projected)) =
                        part.state.apply_operator(s, &diagonal_projector(outcome))?
                    else {
                        continue;
                    };
                    let mut labels = part.labels.clone();
                    labels.push(format!("{s}={}", if outcome == 0 { '+' } else { '-' }));
                    let mut resets = part.resets.clone();
                    resets.push(Correction::new(s, PolGate::Hadamard));
                    let mut phases = part.phases.clone();
                    if outcome == 1 {
                        resets.push(Correction::new(s, PolGate::Flip));
                        phases.push(reference);
                    }
                    next.push(Partial {
                        labels,
                        probability: part.probability * prob,
                        state: projected,
                        resets,
                        phases,
                    });
                }
            }
            partials = next;
        }
    }

    let mut out = Vec::with_capacity(partials.len());
    for part in partials {
        let mut corrections = part.resets;
        let mut phases = part.phases;
        phases.sort();
        for group in phases.chunk_by(|a, b| a == b) {
            if group.len() % 2 == 1 {
                corrections.push(Correction::new(group[0], PolGate::PhaseZ));
            }
        }
        let outcome = GadgetOutcome {
            label: if part.labels.is_empty() {
                format!("erase{pair_set}=trivial")
            } else {
                part.labels.join(";")
            },
            probability: part.probability,
            state: part.state,
            corrections,
        };
        check_erased(&outcome.corrected()?, pair)?;
        out.push(outcome);
    }
    Ok(out)
}

fn check_erased(corrected: &PureState, pair: [Photon; 2]) -> Result<()> {
    let (_, cfg) = corrected.factor_out(PhotonSet::of(&pair))?;
    for p in pair {
        if cfg.get(sub(p, Dof::Pol)) != H || cfg.get(sub(p, Dof::Spatial)) != M1 {
            return Err(Error::Precondition(format!(
                "photon {p} did not end in |H, {}⟩",
                sub(p, Dof::Spatial).value_label(M1)
            )));
        }
    }
    Ok(())
}

/// Splits the corrected state of an outcome into the state of `keep` and
/// drops the remaining photons, which must be in a product basis state.
pub fn reduce_to(state: &PureState, keep: PhotonSet) -> Result<PureState> {
    let drop = state.photons().difference(keep);
    if drop.is_empty() {
        return Ok(state.clone());
    }
    state.factor_out(drop).map(|(s, _)| s)
}

/// The basis ket with every carried photon at `|H, mode 1, ω2⟩`.
pub fn reset_ket(photons: PhotonSet) -> BasisKet {
    photons
        .iter()
        .fold(BasisKet::default(), |k, p| k.with_photon(p, H, M1, W2))
}
