//! End-to-end drivers for both schemes: initial states for every error
//! case, gadget sequencing, feed-forward and success accounting.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gadgets::{
    diagonalize_and_correlate, erase_pair, pol_freq_transform, qnd1, qnd2, reduce_to,
    spatial_freq_transform, Correction, CouplingTable,
};
use crate::hyperstate::{BasisKet, Dof, Photon, PhotonSet, PureState, Subsystem, H, M1, M2, V, W2};

const NORM_RELATION_TOL: f64 = 1e-12;
const WEIGHT_TOL: f64 = 1e-12;

/// Amplitudes of one photon pair. Scheme 2 ignores `epsilon` and `eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairParams {
    pub alpha: Complex64,
    pub beta: Complex64,
    pub gamma: Complex64,
    pub delta: Complex64,
    pub epsilon: Complex64,
    pub eta: Complex64,
}

impl Default for PairParams {
    fn default() -> Self {
        let r = Complex64::new(FRAC_1_SQRT_2, 0.0);
        PairParams {
            alpha: r,
            beta: r,
            gamma: r,
            delta: r,
            epsilon: r,
            eta: r,
        }
    }
}

impl PairParams {
    pub fn real(alpha: f64, beta: f64, gamma: f64, delta: f64, epsilon: f64, eta: f64) -> PairParams {
        let c = |x| Complex64::new(x, 0.0);
        PairParams {
            alpha: c(alpha),
            beta: c(beta),
            gamma: c(gamma),
            delta: c(delta),
            epsilon: c(epsilon),
            eta: c(eta),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("alpha", "beta", self.alpha, self.beta),
            ("gamma", "delta", self.gamma, self.delta),
            ("epsilon", "eta", self.epsilon, self.eta),
        ];
        for (xn, yn, x, y) in pairs {
            let s = x.norm_sqr() + y.norm_sqr();
            if !s.is_finite() || (s - 1.0).abs() > NORM_RELATION_TOL {
                return Err(Error::Constraint(format!(
                    "|{xn}|^2+|{yn}|^2=1 is violated (sum {s})"
                )));
            }
        }
        Ok(())
    }
}

/// Amplitudes of both pairs plus the case mixture weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeParams {
    pub ab: PairParams,
    /// Separate amplitudes for CD; `None` shares `ab`.
    pub cd: Option<PairParams>,
    /// F₁..F₄.
    pub pol_weights: [f64; 4],
    /// G₁..G₄, used by Scheme 2 only.
    pub spatial_weights: [f64; 4],
}

impl Default for SchemeParams {
    fn default() -> Self {
        SchemeParams {
            ab: PairParams::default(),
            cd: None,
            pol_weights: [1.0, 0.0, 0.0, 0.0],
            spatial_weights: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

impl SchemeParams {
    pub fn shared(p: PairParams) -> SchemeParams {
        SchemeParams {
            ab: p,
            ..SchemeParams::default()
        }
    }

    pub fn cd(&self) -> &PairParams {
        self.cd.as_ref().unwrap_or(&self.ab)
    }

    pub fn validate(&self) -> Result<()> {
        self.ab.validate()?;
        if let Some(cd) = &self.cd {
            cd.validate()
                .map_err(|e| Error::Constraint(format!("CD pair: {e}")))?;
        }
        check_weights("F1+F2+F3+F4=1", &self.pol_weights)?;
        check_weights("G1+G2+G3+G4=1", &self.spatial_weights)
    }
}

fn check_weights(relation: &str, w: &[f64; 4]) -> Result<()> {
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Normalization(format!("{relation}: weights must be nonnegative")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::Normalization(format!("{relation} is violated (sum {s})")));
    }
    Ok(())
}

/// Which error case each pair is in. Indices are 1-based. Scheme 1 pairs
/// carry no spatial case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CasePair {
    pub pol_ab: u8,
    pub pol_cd: u8,
    pub spatial: Option<(u8, u8)>,
}

impl CasePair {
    pub fn scheme1(pol_ab: u8, pol_cd: u8) -> CasePair {
        CasePair {
            pol_ab,
            pol_cd,
            spatial: None,
        }
    }

    pub fn scheme2(pol_ab: u8, spatial_ab: u8, pol_cd: u8, spatial_cd: u8) -> CasePair {
        CasePair {
            pol_ab,
            pol_cd,
            spatial: Some((spatial_ab, spatial_cd)),
        }
    }

    fn validate(&self, scheme: Scheme) -> Result<()> {
        let ok = |i: u8| (1..=4).contains(&i);
        let mut idx = vec![self.pol_ab, self.pol_cd];
        match (scheme, self.spatial) {
            (Scheme::One, Some(_)) => {
                return Err(Error::InvalidCase("Scheme 1 cases carry no spatial index".into()))
            }
            (Scheme::Two, None) => {
                return Err(Error::InvalidCase("Scheme 2 cases need spatial indices".into()))
            }
            (_, Some((a, b))) => idx.extend([a, b]),
            _ => {}
        }
        match idx.into_iter().find(|&i| !ok(i)) {
            Some(i) => Err(Error::InvalidCase(format!("{i} is outside 1..=4"))),
            None => Ok(()),
        }
    }

    /// All 16 Scheme 1 cases, AB index major.
    pub fn all_scheme1() -> Vec<CasePair> {
        (1..=4)
            .flat_map(|a| (1..=4).map(move |c| CasePair::scheme1(a, c)))
            .collect()
    }

    /// All 256 Scheme 2 cases in (pol_ab, spatial_ab, pol_cd, spatial_cd)
    /// lexicographic order.
    pub fn all_scheme2() -> Vec<CasePair> {
        let mut out = Vec::with_capacity(256);
        for pa in 1..=4 {
            for sa in 1..=4 {
                for pc in 1..=4 {
                    for sc in 1..=4 {
                        out.push(CasePair::scheme2(pa, sa, pc, sc));
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for CasePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.spatial {
            None => write!(f, "p{},p{}", self.pol_ab, self.pol_cd),
            Some((sa, sc)) => write!(f, "p{}s{},p{}s{}", self.pol_ab, sa, self.pol_cd, sc),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    One,
    Two,
}

impl Scheme {
    pub fn number(self) -> u8 {
        match self {
            Scheme::One => 1,
            Scheme::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Scheme> {
        match n {
            1 => Some(Scheme::One),
            2 => Some(Scheme::Two),
            _ => None,
        }
    }
}

/// Two-qubit case state `x|00⟩ ± y|11⟩` or `x|01⟩ ± y|10⟩` as
/// `(amplitude, first value, second value)`.
fn case_terms(index: u8, x: Complex64, y: Complex64) -> Result<[(Complex64, u8, u8); 2]> {
    Ok(match index {
        1 => [(x, 0, 0), (y, 1, 1)],
        2 => [(x, 0, 1), (y, 1, 0)],
        3 => [(x, 0, 0), (-y, 1, 1)],
        4 => [(x, 0, 1), (-y, 1, 0)],
        i => return Err(Error::InvalidCase(format!("{i} is outside 1..=4"))),
    })
}

type Terms = [(Complex64, u8, u8); 2];

fn pair_state(pair: [Photon; 2], pol: Terms, spatial: Terms, freq: Terms) -> Result<PureState> {
    let mut terms = Vec::with_capacity(8);
    for (ap, p1, p2) in pol {
        for (asp, s1, s2) in spatial {
            for (af, f1, f2) in freq {
                let k = BasisKet::default()
                    .with_photon(pair[0], p1, s1, f1)
                    .with_photon(pair[1], p2, s2, f2);
                terms.push((ap * asp * af, k));
            }
        }
    }
    PureState::superpose(PhotonSet::of(&pair), terms)
}

/// Four-photon input of Scheme 1 for one pol case pair.
pub fn build_initial_scheme1(params: &SchemeParams, case: CasePair) -> Result<PureState> {
    params.validate()?;
    case.validate(Scheme::One)?;
    let one = |pair, p: &PairParams, pol_case| {
        pair_state(
            pair,
            case_terms(pol_case, p.alpha, p.beta)?,
            case_terms(1, p.gamma, p.delta)?,
            case_terms(2, p.epsilon, p.eta)?,
        )
    };
    let ab = one([Photon::A, Photon::B], &params.ab, case.pol_ab)?;
    let cd = one([Photon::C, Photon::D], params.cd(), case.pol_cd)?;
    ab.tensor(&cd)
}

/// Four-photon input of Scheme 2 for one full case.
pub fn build_initial_scheme2(params: &SchemeParams, case: CasePair) -> Result<PureState> {
    params.validate()?;
    case.validate(Scheme::Two)?;
    let (sa, sc) = case.spatial.expect("validated");
    let r = Complex64::new(FRAC_1_SQRT_2, 0.0);
    let one = |pair, p: &PairParams, pol_case, sp_case| {
        pair_state(
            pair,
            case_terms(pol_case, p.alpha, p.beta)?,
            case_terms(sp_case, p.gamma, p.delta)?,
            case_terms(2, r, r)?,
        )
    };
    let ab = one([Photon::A, Photon::B], &params.ab, case.pol_ab, sa)?;
    let cd = one([Photon::C, Photon::D], params.cd(), case.pol_cd, sc)?;
    ab.tensor(&cd)
}

/// |φ⟩_AB = ½(|HH⟩+|VV⟩)(|a₁b₁⟩+|a₂b₂⟩), frequencies at ω2.
pub fn target_phi() -> PureState {
    let mut terms = Vec::with_capacity(4);
    for p in [H, V] {
        for s in [M1, M2] {
            let k = BasisKet::default()
                .with_photon(Photon::A, p, s, W2)
                .with_photon(Photon::B, p, s, W2);
            terms.push((Complex64::new(0.5, 0.0), k));
        }
    }
    PureState::superpose(PhotonSet::AB, terms).expect("nonzero")
}

/// Pol and spatial subsystems of A and B, in reduced-density order.
pub fn ab_pol_spatial() -> [Subsystem; 4] {
    [
        Subsystem::new(Photon::A, Dof::Pol),
        Subsystem::new(Photon::A, Dof::Spatial),
        Subsystem::new(Photon::B, Dof::Pol),
        Subsystem::new(Photon::B, Dof::Spatial),
    ]
}

/// ⟨φ|ρ|φ⟩ with ρ the pol+spatial reduced state of AB, so frequency is
/// traced out.
pub fn target_fidelity(ab: &PureState) -> Result<f64> {
    let keep = ab_pol_spatial();
    let rho = ab.reduced_density(&keep)?;
    let mut v = DVector::<Complex64>::zeros(16);
    for (k, a) in target_phi().iter() {
        let idx = keep.iter().fold(0usize, |acc, s| (acc << 1) | k.get(*s) as usize);
        v[idx] = a;
    }
    Ok(rho.expectation(&v))
}

/// Closed-form Scheme 1 heralding probability. With equal pairs this is
/// 4|γδεη|².
pub fn analytic_success_scheme1(params: &SchemeParams) -> f64 {
    let (a, c) = (&params.ab, params.cd());
    let spatial = (a.gamma * c.delta).norm_sqr() + (a.delta * c.gamma).norm_sqr();
    let freq = (a.epsilon * c.eta).norm_sqr() + (a.eta * c.epsilon).norm_sqr();
    spatial * freq
}

/// One classical outcome of a whole protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeBranch {
    pub labels: Vec<String>,
    pub probability: f64,
    pub success: bool,
    /// Corrected AB state on success, the post-measurement four-photon
    /// state otherwise.
    pub state: PureState,
    pub corrections: Vec<Correction>,
    pub fidelity: Option<f64>,
}

impl OutcomeBranch {
    pub fn label(&self) -> String {
        self.labels.join(";")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOutcome {
    pub scheme: Scheme,
    pub case: CasePair,
    pub success_probability: f64,
    pub branches: Vec<OutcomeBranch>,
    /// Named intermediate states in pipeline order.
    pub stages: Vec<(String, PureState)>,
}

impl ProtocolOutcome {
    pub fn total_probability(&self) -> f64 {
        self.branches.iter().map(|b| b.probability).sum()
    }

    pub fn successes(&self) -> impl Iterator<Item = &OutcomeBranch> {
        self.branches.iter().filter(|b| b.success)
    }

    /// Lowest success-branch fidelity, `None` without successes.
    pub fn min_fidelity(&self) -> Option<f64> {
        self.successes()
            .filter_map(|b| b.fidelity)
            .min_by(f64::total_cmp)
    }

    /// Probability-weighted mean fidelity over success branches.
    pub fn mean_fidelity(&self) -> Option<f64> {
        if self.success_probability <= 0.0 {
            return None;
        }
        let s: f64 = self
            .successes()
            .map(|b| b.probability * b.fidelity.unwrap_or(0.0))
            .sum();
        Some(s / self.success_probability)
    }

    pub fn corrections_count(&self) -> usize {
        self.successes().map(|b| b.corrections.len()).sum()
    }

    /// Probability of each distinct first label, in first-seen order. For
    /// Scheme 2 these are the four QND2 outcomes.
    pub fn first_stage_marginals(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for b in &self.branches {
            let l = b.labels.first().cloned().unwrap_or_default();
            match out.iter_mut().find(|(x, _)| *x == l) {
                Some((_, p)) => *p += b.probability,
                None => out.push((l, b.probability)),
            }
        }
        out
    }

    pub fn stage(&self, name: &str) -> Option<&PureState> {
        self.stages.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}

pub const STAGE_INITIAL: &str = "initial";
pub const STAGE_QND1: &str = "qnd1.success";
pub const STAGE_POL_FREQ: &str = "pol_freq";
pub const STAGE_SPATIAL_FREQ: &str = "spatial_freq";
pub const STAGE_DIAGONALIZED: &str = "diagonalized";

fn success_branch(
    labels: Vec<String>,
    probability: f64,
    corrected: &PureState,
    corrections: Vec<Correction>,
) -> Result<OutcomeBranch> {
    let ab = reduce_to(corrected, PhotonSet::AB)?;
    let fidelity = target_fidelity(&ab)?;
    Ok(OutcomeBranch {
        labels,
        probability,
        success: true,
        state: ab,
        corrections,
        fidelity: Some(fidelity),
    })
}

/// QND1, then on success the polarization/frequency transfer and the CD
/// eraser.
pub fn scheme1_run(
    params: &SchemeParams,
    case: CasePair,
    coupling: &CouplingTable,
) -> Result<ProtocolOutcome> {
    let initial = build_initial_scheme1(params, case)?;
    let mut stages = vec![(STAGE_INITIAL.to_string(), initial.clone())];
    let q = qnd1(&initial, coupling)?;
    let success_probability = q.success_probability();
    let mut branches = Vec::new();
    if let Some(s) = &q.success {
        stages.push((STAGE_QND1.to_string(), s.state.clone()));
        let transferred = pol_freq_transform(&s.state)?;
        stages.push((STAGE_POL_FREQ.to_string(), transferred.clone()));
        for e in erase_pair(&transferred, [Photon::C, Photon::D])? {
            branches.push(success_branch(
                vec![s.label.clone(), e.label.clone()],
                s.probability * e.probability,
                &e.corrected()?,
                e.corrections,
            )?);
        }
    }
    for f in q.failures {
        branches.push(OutcomeBranch {
            labels: vec![f.label],
            probability: f.probability,
            success: false,
            state: f.state,
            corrections: Vec::new(),
            fidelity: None,
        });
    }
    Ok(ProtocolOutcome {
        scheme: Scheme::One,
        case,
        success_probability,
        branches,
        stages,
    })
}

/// Spatial/frequency transfer, diagonalization, QND2, CD reset and
/// feed-forward.
pub fn scheme2_run(
    params: &SchemeParams,
    case: CasePair,
    coupling: &CouplingTable,
) -> Result<ProtocolOutcome> {
    let initial = build_initial_scheme2(params, case)?;
    let transferred = spatial_freq_transform(&initial)?;
    let diagonal = diagonalize_and_correlate(&transferred)?;
    let stages = vec![
        (STAGE_INITIAL.to_string(), initial),
        (STAGE_SPATIAL_FREQ.to_string(), transferred),
        (STAGE_DIAGONALIZED.to_string(), diagonal.clone()),
    ];
    let mut branches = Vec::new();
    for q in qnd2(&diagonal, coupling)? {
        for e in erase_pair(&q.state, [Photon::C, Photon::D])? {
            let mut corrections = q.corrections.clone();
            corrections.extend(e.corrections.iter().copied());
            let corrected = crate::gadgets::apply_corrections(&e.state, &corrections)?;
            branches.push(success_branch(
                vec![q.label.clone(), e.label.clone()],
                q.probability * e.probability,
                &corrected,
                corrections,
            )?);
        }
    }
    let success_probability = branches.iter().map(|b| b.probability).sum();
    Ok(ProtocolOutcome {
        scheme: Scheme::Two,
        case,
        success_probability,
        branches,
        stages,
    })
}

pub fn run(
    scheme: Scheme,
    params: &SchemeParams,
    case: CasePair,
    coupling: &CouplingTable,
) -> Result<ProtocolOutcome> {
    match scheme {
        Scheme::One => scheme1_run(params, case, coupling),
        Scheme::Two => scheme2_run(params, case, coupling),
    }
}

/// One enumeration table row.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationRow {
    pub case: CasePair,
    pub success_probability: f64,
    /// Scheme 1: success and failure; Scheme 2: the four QND2 outcomes.
    pub outcome_probabilities: Vec<(String, f64)>,
    pub min_fidelity: Option<f64>,
    pub corrections: usize,
}

impl EnumerationRow {
    pub fn from_outcome(o: &ProtocolOutcome) -> EnumerationRow {
        let outcome_probabilities = match o.scheme {
            Scheme::One => vec![
                ("success".to_string(), o.success_probability),
                (
                    "failure".to_string(),
                    o.branches.iter().filter(|b| !b.success).map(|b| b.probability).sum(),
                ),
            ],
            Scheme::Two => o.first_stage_marginals(),
        };
        EnumerationRow {
            case: o.case,
            success_probability: o.success_probability,
            outcome_probabilities,
            min_fidelity: o.min_fidelity(),
            corrections: o.corrections_count(),
        }
    }
}

fn enumerate(
    scheme: Scheme,
    params: &SchemeParams,
    cases: Vec<CasePair>,
    coupling: &CouplingTable,
) -> Result<Vec<EnumerationRow>> {
    params.validate()?;
    cases
        .into_par_iter()
        .map(|c| run(scheme, params, c, coupling).map(|o| EnumerationRow::from_outcome(&o)))
        .collect()
}

/// 16 rows, one per pol case pair.
pub fn scheme1_enumerate(params: &SchemeParams, coupling: &CouplingTable) -> Result<Vec<EnumerationRow>> {
    enumerate(Scheme::One, params, CasePair::all_scheme1(), coupling)
}

/// 256 rows, one per full case.
pub fn scheme2_enumerate(params: &SchemeParams, coupling: &CouplingTable) -> Result<Vec<EnumerationRow>> {
    enumerate(Scheme::Two, params, CasePair::all_scheme2(), coupling)
}

/// Case probability under the mixture weights.
pub fn case_weight(params: &SchemeParams, case: CasePair) -> f64 {
    let f = |i: u8| params.pol_weights[usize::from(i) - 1];
    let g = |i: u8| params.spatial_weights[usize::from(i) - 1];
    let w = f(case.pol_ab) * f(case.pol_cd);
    match case.spatial {
        None => w,
        Some((a, c)) => w * g(a) * g(c),
    }
}

pub fn cases_for(scheme: Scheme) -> Vec<CasePair> {
    match scheme {
        Scheme::One => CasePair::all_scheme1(),
        Scheme::Two => CasePair::all_scheme2(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedOutcome {
    pub success_probability: f64,
    pub mean_fidelity: Option<f64>,
    /// Cases with nonzero weight, with their weight.
    pub cases: Vec<(f64, ProtocolOutcome)>,
}

/// Runs the protocol over the whole mixed input: every case pair with
/// weight `F_i F_j` (times `G_k G_l` for Scheme 2).
pub fn run_mixed(params: &SchemeParams, scheme: Scheme, coupling: &CouplingTable) -> Result<MixedOutcome> {
    params.validate()?;
    let cases: Vec<(f64, ProtocolOutcome)> = cases_for(scheme)
        .into_par_iter()
        .map(|c| (case_weight(params, c), c))
        .filter(|(w, _)| *w > 0.0)
        .map(|(w, c)| run(scheme, params, c, coupling).map(|o| (w, o)))
        .collect::<Result<_>>()?;
    let success_probability: f64 = cases.iter().map(|(w, o)| w * o.success_probability).sum();
    let mean_fidelity = if success_probability > 0.0 {
        let s: f64 = cases
            .iter()
            .map(|(w, o)| w * o.success_probability * o.mean_fidelity().unwrap_or(0.0))
            .sum();
        Some(s / success_probability)
    } else {
        None
    };
    Ok(MixedOutcome {
        success_probability,
        mean_fidelity,
        cases,
    })
}
