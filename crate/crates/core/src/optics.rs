//! Optical element primitives.
//!
//! Wave plates act as 2×2 unitaries on one degree of freedom. Frequency
//! multipliers and path swaps are relabelings. Path-merging chains (PBS, HWP,
//! OD/OM) are modeled as a measure-discard-prepare channel on the target DOF.
//! Cross-Kerr couplings never touch amplitudes: they attach an integer count
//! of θ units to each basis ket of a probe, and an X-homodyne readout
//! partitions kets by the magnitude of the up/down count difference.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::hyperstate::{
    fidelity, BasisKet, Branch, Dof, Ensemble, Gate2, Photon, PureState, Subsystem, NORM_TOL,
};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Named single-qubit operations used by the protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolGate {
    /// σ_x, a half-wave plate at 45°.
    Flip,
    /// |H⟩ → (|H⟩+|V⟩)/√2, |V⟩ → (|H⟩−|V⟩)/√2.
    Hadamard,
    /// σ_z.
    PhaseZ,
    Identity,
}

impl PolGate {
    pub fn matrix(self) -> Gate2 {
        let r = Complex64::new(FRAC_1_SQRT_2, 0.0);
        match self {
            PolGate::Flip => [[ZERO, ONE], [ONE, ZERO]],
            PolGate::Hadamard => [[r, r], [r, -r]],
            PolGate::PhaseZ => [[ONE, ZERO], [ZERO, -ONE]],
            PolGate::Identity => [[ONE, ZERO], [ZERO, ONE]],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PolGate::Flip => "flip",
            PolGate::Hadamard => "hadamard",
            PolGate::PhaseZ => "phase_z",
            PolGate::Identity => "identity",
        }
    }
}

impl FromStr for PolGate {
    type Err = Error;

    fn from_str(s: &str) -> Result<PolGate> {
        match s.to_ascii_lowercase().as_str() {
            "flip" | "x" | "sigma_x" => Ok(PolGate::Flip),
            "hadamard" | "h" => Ok(PolGate::Hadamard),
            "phase_z" | "z" | "sigma_z" => Ok(PolGate::PhaseZ),
            "identity" | "i" | "id" => Ok(PolGate::Identity),
            _ => Err(Error::UnknownUnitary(s.to_string())),
        }
    }
}

impl fmt::Display for PolGate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Applies a named unitary to one photon's polarization.
pub fn apply_pol_unitary(state: &PureState, photon: Photon, gate: PolGate) -> Result<PureState> {
    apply_unitary(state, Subsystem::new(photon, Dof::Pol), gate)
}

/// Applies a named unitary to any single DOF.
pub fn apply_unitary(state: &PureState, sub: Subsystem, gate: PolGate) -> Result<PureState> {
    state.apply_gate(sub, &gate.matrix())
}

/// A function on one binary DOF.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofMap {
    Identity,
    Swap,
    /// Every value goes to the given one (a frequency multiplier is `Const(ω2)`).
    Const(u8),
}

/// Relabels one DOF of one photon. Constant maps merge kets that differ only
/// in that DOF, so they are refused whenever two populated kets would land on
/// the same output ket.
pub fn relabel_dof(state: &PureState, photon: Photon, dof: Dof, map: DofMap) -> Result<PureState> {
    state.require_photon(photon)?;
    let sub = Subsystem::new(photon, dof);
    let relabel = |k: BasisKet| match map {
        DofMap::Identity => k,
        DofMap::Swap => k.flip(sub),
        DofMap::Const(v) => k.with(sub, v),
    };
    let mut amps: BTreeMap<BasisKet, Complex64> = BTreeMap::new();
    for (k, a) in state.iter() {
        let out = relabel(k);
        if amps.insert(out, a).is_some() {
            return Err(Error::CoherenceLoss(format!(
                "relabeling {sub} merges two populated kets into {}",
                out.render(state.photons())
            )));
        }
    }
    PureState::normalized(state.photons(), amps)
}

/// Frequency multiplier on every carried photon: ω1 → ω2.
pub fn frequency_multiply_all(state: &PureState) -> Result<PureState> {
    state
        .photons()
        .iter()
        .try_fold(state.clone(), |s, p| relabel_dof(&s, p, Dof::Freq, DofMap::Const(1)))
}

/// Measures `target` in its computational basis, forgets the result and
/// re-prepares it in `prepare(ket)` (a normalized 2-vector on the target).
/// Branches that end in the same state and carry the same record are merged.
fn measure_discard_prepare<F>(state: &PureState, target: Subsystem, prepare: F) -> Result<Vec<Branch>>
where
    F: Fn(BasisKet) -> [Complex64; 2],
{
    state.require_photon(target.photon)?;
    let mut branches = Vec::with_capacity(2);
    for m in 0..2u8 {
        let mut amps: BTreeMap<BasisKet, Complex64> = BTreeMap::new();
        let mut weight = 0.0;
        for (k, a) in state.iter().filter(|(k, _)| k.get(target) == m) {
            weight += a.norm_sqr();
            let p = prepare(k);
            for (v, pv) in p.iter().enumerate() {
                if *pv != ZERO {
                    *amps.entry(k.with(target, v as u8)).or_default() += a * pv;
                }
            }
        }
        if weight > NORM_TOL * NORM_TOL {
            branches.push(Branch {
                weight,
                state: PureState::normalized(state.photons(), amps)?,
                record: Vec::new(),
            });
        }
    }
    Ok(branches)
}

/// Combines branches holding the same state (up to global phase) and the
/// same record, preserving first-seen order.
pub fn merge_identical(branches: Vec<Branch>) -> Vec<Branch> {
    let mut out: Vec<Branch> = Vec::with_capacity(branches.len());
    for b in branches {
        let same = out.iter_mut().find(|o| {
            o.record == b.record
                && o.state.photons() == b.state.photons()
                && fidelity(&o.state, &b.state).is_ok_and(|f| f > 1.0 - NORM_TOL)
        });
        match same {
            Some(o) => o.weight += b.weight,
            None => out.push(b),
        }
    }
    out
}

fn map_ensemble<F>(ens: &Ensemble, f: F) -> Result<Ensemble>
where
    F: Fn(&PureState) -> Result<Vec<Branch>>,
{
    let mut out = Vec::new();
    for b in ens.branches() {
        for nb in f(&b.state)? {
            out.push(Branch {
                weight: b.weight * nb.weight,
                state: nb.state,
                record: b.record.clone(),
            });
        }
    }
    Ok(Ensemble::from_branches(merge_identical(out)))
}

fn check_distinct(target: Subsystem, control: Subsystem) -> Result<()> {
    if target == control {
        Err(Error::Aliasing(target.to_string()))
    } else {
        Ok(())
    }
}

/// Overwrites `target` with `rule[c]`, where `c` is the value of `control`
/// on each ket. The previous target value is measured and discarded.
pub fn overwrite_dof_from(
    state: &PureState,
    target: Subsystem,
    control: Subsystem,
    rule: [u8; 2],
) -> Result<Ensemble> {
    overwrite_ensemble(&Ensemble::pure(state.clone()), target, control, rule)
}

/// [`overwrite_dof_from`] applied to every branch of an ensemble.
pub fn overwrite_ensemble(
    ens: &Ensemble,
    target: Subsystem,
    control: Subsystem,
    rule: [u8; 2],
) -> Result<Ensemble> {
    check_distinct(target, control)?;
    if let Some(b) = ens.branches().first() {
        b.state.require_photon(control.photon)?;
    }
    map_ensemble(ens, |s| {
        measure_discard_prepare(s, target, |k| {
            let mut p = [ZERO; 2];
            p[rule[k.get(control) as usize] as usize] = ONE;
            p
        })
    })
}

/// Replaces `target` by the fixed state `prepared`, whatever it was before.
pub fn prepare_dof(ens: &Ensemble, target: Subsystem, prepared: [Complex64; 2]) -> Result<Ensemble> {
    let norm = prepared.iter().map(|c| c.norm_sqr()).sum::<f64>();
    if (norm - 1.0).abs() > NORM_TOL {
        return Err(Error::Normalization(format!("prepared vector has norm² {norm}")));
    }
    map_ensemble(ens, |s| measure_discard_prepare(s, target, |_| prepared))
}

/// A named coherent probe beam with per-ket accumulated θ counts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeBeam {
    pub id: String,
    accumulated: BTreeMap<BasisKet, u32>,
}

impl ProbeBeam {
    pub fn count(&self, ket: BasisKet) -> u32 {
        self.accumulated.get(&ket).copied().unwrap_or(0)
    }
}

/// Cross-Kerr coupling: kets matching every `(subsystem, value)` condition
/// add `units` θ to the probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KerrRule {
    pub probe: String,
    pub conditions: Vec<(Subsystem, u8)>,
    pub units: u32,
}

impl KerrRule {
    pub fn new(probe: &str, photon: Photon, dof: Dof, value: u8, units: u32) -> KerrRule {
        KerrRule {
            probe: probe.to_string(),
            conditions: vec![(Subsystem::new(photon, dof), value)],
            units,
        }
    }

    pub fn matches(&self, ket: BasisKet) -> bool {
        self.conditions.iter().all(|(s, v)| ket.get(*s) == *v)
    }
}

/// A state together with the probes that have been coupled to it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedState {
    state: PureState,
    probes: BTreeMap<String, ProbeBeam>,
}

impl TaggedState {
    pub fn new(state: PureState) -> TaggedState {
        TaggedState {
            state,
            probes: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &PureState {
        &self.state
    }

    pub fn probe(&self, id: &str) -> Option<&ProbeBeam> {
        self.probes.get(id)
    }

    /// Drops every tag, returning the underlying state.
    pub fn untag(self) -> PureState {
        self.state
    }
}

/// Couples a probe to the state according to `rule`. Creates the probe on
/// first use.
pub fn kerr_tag(mut tagged: TaggedState, rule: &KerrRule) -> TaggedState {
    let probe = tagged
        .probes
        .entry(rule.probe.clone())
        .or_insert_with(|| ProbeBeam {
            id: rule.probe.clone(),
            accumulated: BTreeMap::new(),
        });
    if rule.units > 0 {
        for (k, _) in tagged.state.iter() {
            if rule.matches(k) {
                *probe.accumulated.entry(k).or_insert(0) += rule.units;
            }
        }
    }
    tagged
}

/// Magnitude of the up/down phase difference in θ units. The sign is not
/// observable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HomodyneOutcome {
    pub class: u32,
}

impl fmt::Display for HomodyneOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}θ", self.class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomodyneBranch {
    pub outcome: HomodyneOutcome,
    pub probability: f64,
    /// Projected state; the two read-out probes are removed, others kept.
    pub state: TaggedState,
}

/// Reads out a pair of probes. Kets are partitioned by
/// `|count_up − count_down|`; each class yields one renormalized branch.
pub fn homodyne_classify(tagged: &TaggedState, up: &str, down: &str) -> Result<Vec<HomodyneBranch>> {
    let (Some(pu), Some(pd)) = (tagged.probes.get(up), tagged.probes.get(down)) else {
        return Err(Error::ProtocolOrder(format!(
            "probes `{up}` and `{down}` must be tagged before homodyne readout"
        )));
    };
    let class_of = |k: BasisKet| pu.count(k).abs_diff(pd.count(k));
    let mut classes: Vec<u32> = tagged.state.iter().map(|(k, _)| class_of(k)).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut out = Vec::with_capacity(classes.len());
    for class in classes {
        let Some((probability, state)) = tagged.state.project(|k| class_of(k) == class) else {
            continue;
        };
        let probes = tagged
            .probes
            .iter()
            .filter(|(id, _)| id.as_str() != up && id.as_str() != down)
            .map(|(id, p)| {
                let accumulated = p
                    .accumulated
                    .iter()
                    .filter(|(k, _)| class_of(**k) == class)
                    .map(|(k, c)| (*k, *c))
                    .collect();
                (
                    id.clone(),
                    ProbeBeam {
                        id: id.clone(),
                        accumulated,
                    },
                )
            })
            .collect();
        out.push(HomodyneBranch {
            outcome: HomodyneOutcome { class },
            probability,
            state: TaggedState { state, probes },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperstate::{PhotonSet, H, M1, M2, V, W1, W2};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    const AP: Subsystem = Subsystem::new(Photon::A, Dof::Pol);
    const AS: Subsystem = Subsystem::new(Photon::A, Dof::Spatial);
    const AF: Subsystem = Subsystem::new(Photon::A, Dof::Freq);
    const CP: Subsystem = Subsystem::new(Photon::C, Dof::Pol);
    const CS: Subsystem = Subsystem::new(Photon::C, Dof::Spatial);

    fn a_only() -> PhotonSet {
        PhotonSet::of(&[Photon::A])
    }

    #[test]
    fn pol_unitary_examples() {
        let h = PureState::basis(a_only(), BasisKet::default()).unwrap();
        let v = apply_pol_unitary(&h, Photon::A, PolGate::Flip).unwrap();
        assert_eq!(v.amplitude(BasisKet::default().with(AP, V)), ONE);

        let plus = apply_pol_unitary(&h, Photon::A, PolGate::Hadamard).unwrap();
        assert_abs_diff_eq!(plus.amplitude(BasisKet::default()).re, FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(
            plus.amplitude(BasisKet::default().with(AP, V)).re,
            FRAC_1_SQRT_2,
            epsilon = 1e-15
        );

        let back = apply_pol_unitary(&v, Photon::A, PolGate::Flip).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn pol_unitary_errors() {
        assert_eq!(
            "rotate".parse::<PolGate>().unwrap_err(),
            Error::UnknownUnitary("rotate".into())
        );
        let h = PureState::basis(a_only(), BasisKet::default()).unwrap();
        assert_eq!(
            apply_pol_unitary(&h, Photon::B, PolGate::Flip).unwrap_err(),
            Error::AbsentPhoton('B')
        );
    }

    #[test]
    fn frequency_multiplier_merges_classical_frequency() {
        let k = BasisKet::default().with(AP, V).with(AF, W1);
        let s = PureState::basis(a_only(), k).unwrap();
        let out = relabel_dof(&s, Photon::A, Dof::Freq, DofMap::Const(W2)).unwrap();
        assert_eq!(out.amplitude(k.with(AF, W2)), ONE);

        // correlated superposition: frequency differs alongside polarization
        let s = PureState::superpose(
            a_only(),
            [(c(1.0), BasisKet::default()), (c(1.0), BasisKet::default().with(AP, V).with(AF, W2))],
        )
        .unwrap();
        let out = relabel_dof(&s, Photon::A, Dof::Freq, DofMap::Const(W2)).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|(k, _)| k.get(AF) == W2));
    }

    #[test]
    fn frequency_multiplier_refuses_coherent_frequency() {
        let s = PureState::superpose(
            a_only(),
            [(c(0.6), BasisKet::default()), (c(0.8), BasisKet::default().with(AF, W2))],
        )
        .unwrap();
        assert!(matches!(
            relabel_dof(&s, Photon::A, Dof::Freq, DofMap::Const(W2)),
            Err(Error::CoherenceLoss(_))
        ));
    }

    #[test]
    fn swap_is_an_involution() {
        let s = PureState::superpose(
            a_only(),
            [(c(0.6), BasisKet::default()), (Complex64::new(0.0, 0.8), BasisKet::default().with(AF, W2))],
        )
        .unwrap();
        let once = relabel_dof(&s, Photon::A, Dof::Freq, DofMap::Swap).unwrap();
        assert_ne!(once, s);
        assert_eq!(relabel_dof(&once, Photon::A, Dof::Freq, DofMap::Swap).unwrap(), s);
        assert_eq!(relabel_dof(&s, Photon::A, Dof::Freq, DofMap::Identity).unwrap(), s);
    }

    #[test]
    fn overwrite_correlates_target_with_control() {
        // A pol in |+⟩, A freq in (|ω1⟩+|ω2⟩)/√2
        let terms = (0..4u8).map(|i| (c(0.5), BasisKet::default().with(AP, i & 1).with(AF, i >> 1)));
        let s = PureState::superpose(a_only(), terms).unwrap();
        let e = overwrite_dof_from(&s, AP, AF, [H, V]).unwrap();
        assert_eq!(e.len(), 1);
        assert_abs_diff_eq!(e.total_weight(), 1.0, epsilon = 1e-12);
        let out = e.as_pure().unwrap();
        let expect = PureState::superpose(
            a_only(),
            [
                (c(1.0), BasisKet::default().with(AP, H).with(AF, W1)),
                (c(1.0), BasisKet::default().with(AP, V).with(AF, W2)),
            ],
        )
        .unwrap();
        assert_abs_diff_eq!(fidelity(out, &expect).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn overwrite_fixed_point() {
        let k = BasisKet::default().with(AP, V).with(AF, W2);
        let s = PureState::basis(a_only(), k).unwrap();
        let e = overwrite_dof_from(&s, AP, AF, [H, V]).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e.branches()[0].weight, 1.0);
        assert_eq!(e.as_pure().unwrap(), &s);
    }

    #[test]
    fn overwrite_rejects_aliasing() {
        let s = PureState::basis(a_only(), BasisKet::default()).unwrap();
        assert!(matches!(overwrite_dof_from(&s, AP, AP, [H, V]), Err(Error::Aliasing(_))));
    }

    #[test]
    fn overwrite_of_entangled_target_leaves_a_mixture() {
        // A pol entangled with C pol; overwriting A pol from A spatial
        // decoheres C pol.
        let set = PhotonSet::of(&[Photon::A, Photon::C]);
        let s = PureState::superpose(
            set,
            [(c(1.0), BasisKet::default()), (c(1.0), BasisKet::default().with(AP, V).with(CP, V))],
        )
        .unwrap();
        let e = overwrite_dof_from(&s, AP, AS, [H, V]).unwrap();
        assert_eq!(e.len(), 2);
        assert_abs_diff_eq!(e.total_weight(), 1.0, epsilon = 1e-12);
        let again = overwrite_ensemble(&e, AP, AS, [H, V]).unwrap();
        assert_eq!(again, e);
    }

    #[test]
    fn kerr_tag_examples() {
        let s = PureState::superpose(
            a_only(),
            [(c(1.0), BasisKet::default().with(AS, M1)), (c(1.0), BasisKet::default().with(AS, M2))],
        )
        .unwrap();
        let rule = KerrRule::new("up", Photon::A, Dof::Spatial, M1, 1);
        let t = kerr_tag(TaggedState::new(s.clone()), &rule);
        let p = t.probe("up").unwrap();
        assert_eq!(p.count(BasisKet::default().with(AS, M1)), 1);
        assert_eq!(p.count(BasisKet::default().with(AS, M2)), 0);
        assert_eq!(t.state(), &s);

        let zero = KerrRule { units: 0, ..rule.clone() };
        let t0 = kerr_tag(TaggedState::new(s.clone()), &zero);
        assert_eq!(t0.probe("up").unwrap().count(BasisKet::default().with(AS, M1)), 0);

        let t2 = kerr_tag(t, &rule);
        assert_eq!(t2.probe("up").unwrap().count(BasisKet::default().with(AS, M1)), 2);
        assert_eq!(t2.untag(), s);
    }

    #[test]
    fn homodyne_single_class() {
        let s = PureState::basis(a_only(), BasisKet::default()).unwrap();
        let t = kerr_tag(TaggedState::new(s.clone()), &KerrRule::new("u", Photon::A, Dof::Pol, H, 1));
        let t = kerr_tag(t, &KerrRule::new("d", Photon::A, Dof::Pol, V, 1));
        let out = homodyne_classify(&t, "u", "d").unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].probability, 1.0);
        assert_eq!(out[0].state.state(), &s);
        assert!(out[0].state.probe("u").is_none());
    }

    #[test]
    fn homodyne_requires_tagged_probes() {
        let s = PureState::basis(a_only(), BasisKet::default()).unwrap();
        assert!(matches!(
            homodyne_classify(&TaggedState::new(s), "u", "d"),
            Err(Error::ProtocolOrder(_))
        ));
    }

    #[test]
    fn one_sided_parity_check_splits_evenly() {
        // |+⟩_A ⊗ (|H c1⟩ + |V c2⟩)/√2 with the Alice-side QND2 couplings.
        let set = PhotonSet::of(&[Photon::A, Photon::C]);
        let mut terms = Vec::new();
        for a in [H, V] {
            for (cp, cs) in [(H, M1), (V, M2)] {
                terms.push((c(0.5), BasisKet::default().with(AP, a).with(CP, cp).with(CS, cs)));
            }
        }
        let s = PureState::superpose(set, terms).unwrap();

        // oracle: enumerate the four kets by hand
        let mut expected: BTreeMap<u32, f64> = BTreeMap::new();
        for (k, amp) in s.iter() {
            let up = u32::from(k.get(AP) == H) + u32::from(k.get(CS) == M2);
            let down = u32::from(k.get(AP) == V) + u32::from(k.get(CS) == M1);
            *expected.entry(up.abs_diff(down)).or_default() += amp.norm_sqr();
        }
        assert_eq!(expected.keys().copied().collect::<Vec<_>>(), vec![0, 2]);

        let rules = [
            KerrRule::new("up", Photon::A, Dof::Pol, H, 1),
            KerrRule::new("up", Photon::C, Dof::Spatial, M2, 1),
            KerrRule::new("down", Photon::A, Dof::Pol, V, 1),
            KerrRule::new("down", Photon::C, Dof::Spatial, M1, 1),
        ];
        let t = rules.iter().fold(TaggedState::new(s), kerr_tag);
        let out = homodyne_classify(&t, "up", "down").unwrap();
        assert_eq!(out.len(), 2);
        for b in &out {
            assert_abs_diff_eq!(b.probability, expected[&b.outcome.class], epsilon = 1e-12);
            assert_abs_diff_eq!(b.probability, 0.5, epsilon = 1e-12);
        }
    }

    fn arb_state(set: PhotonSet) -> impl Strategy<Value = PureState> {
        proptest::collection::vec(((-1.0..1.0f64, -1.0..1.0f64), 0usize..4096), 1..12).prop_filter_map(
            "nonzero",
            move |terms| {
                let kets = terms.into_iter().map(|((re, im), i)| {
                    (Complex64::new(re, im), BasisKet::from_index(i).unwrap().restricted(set))
                });
                PureState::superpose(set, kets).ok()
            },
        )
    }

    fn arb_rules() -> impl Strategy<Value = Vec<KerrRule>> {
        proptest::collection::vec((any::<bool>(), 0usize..4, 0usize..3, 0u8..2, 0u32..4), 1..8).prop_map(
            |rs| {
                rs.into_iter()
                    .map(|(up, p, d, v, u)| {
                        KerrRule::new(if up { "up" } else { "down" }, Photon::ALL[p], Dof::ALL[d], v, u)
                    })
                    .collect()
            },
        )
    }

    fn populations(e: &Ensemble) -> BTreeMap<BasisKet, f64> {
        let mut out = BTreeMap::new();
        for b in e.branches() {
            for (k, a) in b.state.iter() {
                *out.entry(k).or_insert(0.0) += b.weight * a.norm_sqr();
            }
        }
        out.retain(|_, p| *p > 1e-13);
        out
    }

    proptest! {
        #[test]
        fn unitaries_preserve_norm_and_commute_with_relabels(s in arb_state(PhotonSet::ALL), g in 0usize..4, p in 0usize..4) {
            let gate = [PolGate::Flip, PolGate::Hadamard, PolGate::PhaseZ, PolGate::Identity][g];
            let photon = Photon::ALL[p];
            let u = apply_pol_unitary(&s, photon, gate).unwrap();
            prop_assert!((u.norm_sqr() - 1.0).abs() < 1e-12);
            let r1 = relabel_dof(&u, photon, Dof::Spatial, DofMap::Swap).unwrap();
            let r2 = apply_pol_unitary(&relabel_dof(&s, photon, Dof::Spatial, DofMap::Swap).unwrap(), photon, gate).unwrap();
            prop_assert!((fidelity(&r1, &r2).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn homodyne_partitions_and_tags_are_inert(s in arb_state(PhotonSet::ALL), rules in arb_rules()) {
            let mut rules = rules;
            rules.push(KerrRule::new("up", Photon::A, Dof::Pol, 0, 0));
            rules.push(KerrRule::new("down", Photon::A, Dof::Pol, 0, 0));
            let t = rules.iter().fold(TaggedState::new(s.clone()), kerr_tag);
            prop_assert_eq!(t.state(), &s);
            let out = homodyne_classify(&t, "up", "down").unwrap();
            let total: f64 = out.iter().map(|b| b.probability).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (i, a) in out.iter().enumerate() {
                for b in &out[i + 1..] {
                    prop_assert!(a.state.state().inner(b.state.state()).norm() < 1e-12);
                }
            }
            prop_assert_eq!(t.untag(), s);
        }

        #[test]
        fn homodyne_classes_ignore_sign(s in arb_state(PhotonSet::ALL), rules in arb_rules()) {
            let mut rules = rules;
            rules.push(KerrRule::new("up", Photon::A, Dof::Pol, 0, 0));
            rules.push(KerrRule::new("down", Photon::A, Dof::Pol, 0, 0));
            let t = rules.iter().fold(TaggedState::new(s), kerr_tag);
            let fwd = homodyne_classify(&t, "up", "down").unwrap();
            let rev = homodyne_classify(&t, "down", "up").unwrap();
            prop_assert_eq!(fwd, rev);
        }

        #[test]
        fn overwrite_is_trace_preserving_and_idempotent(s in arb_state(PhotonSet::ALL), t in 0usize..12, c in 0usize..12) {
            prop_assume!(t != c);
            let subs = Subsystem::all_of(PhotonSet::ALL);
            let e = overwrite_dof_from(&s, subs[t], subs[c], [1, 0]).unwrap();
            prop_assert!((e.total_weight() - 1.0).abs() < 1e-12);
            // A second pass re-measures a target that now mirrors the control,
            // so only basis populations are guaranteed to be fixed.
            let again = overwrite_ensemble(&e, subs[t], subs[c], [1, 0]).unwrap();
            prop_assert!((again.total_weight() - 1.0).abs() < 1e-12);
            let pa = populations(&again);
            let pe = populations(&e);
            prop_assert_eq!(pa.len(), pe.len());
            for (k, p) in &pe {
                prop_assert!((pa[k] - p).abs() < 1e-12);
            }
            // with a classical control the output state itself is a fixed point
            let classical = overwrite_dof_from(&s, subs[c], subs[t], [0, 0]).unwrap();
            let once = overwrite_ensemble(&classical, subs[t], subs[c], [1, 0]).unwrap();
            let twice = overwrite_ensemble(&once, subs[t], subs[c], [1, 0]).unwrap();
            prop_assert_eq!(once.len(), twice.len());
            for (a, b) in once.branches().iter().zip(twice.branches()) {
                prop_assert!((a.weight - b.weight).abs() < 1e-12);
                prop_assert!((fidelity(&a.state, &b.state).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
