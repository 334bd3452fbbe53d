//! Brute-force dense verifier.
//!
//! Everything here is rebuilt from the protocol description with explicit
//! Kraus operators on a dense density matrix, without calling the gadgets.
//! Kets use the same 12-bit layout as the rest of the crate but are handled
//! as raw integers.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gadgets::CouplingTable;
use crate::hyperstate::{DensityMatrix, Ensemble};
use crate::protocols::{self, CasePair, PairParams, Scheme, SchemeParams};

type C = Complex64;

const PRUNE: f64 = 1e-15;
const COMPLETENESS_TOL: f64 = 1e-10;

const POL: usize = 0;
const SPATIAL: usize = 1;
const FREQ: usize = 2;
const A: usize = 0;
const B: usize = 1;
const CC: usize = 2;
const D: usize = 3;

fn pos(photon: usize, dof: usize) -> u32 {
    11 - (3 * photon + dof) as u32
}

fn bit(k: u16, photon: usize, dof: usize) -> u8 {
    ((k >> pos(photon, dof)) & 1) as u8
}

fn set(k: u16, photon: usize, dof: usize, v: u8) -> u16 {
    let m = 1u16 << pos(photon, dof);
    if v == 0 {
        k & !m
    } else {
        k | m
    }
}

/// Density matrix restricted to the span of `basis`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRho {
    basis: Vec<u16>,
    m: DMatrix<C>,
}

impl DenseRho {
    pub fn basis(&self) -> &[u16] {
        &self.basis
    }

    pub fn matrix(&self) -> &DMatrix<C> {
        &self.m
    }

    pub fn trace(&self) -> f64 {
        self.m.trace().re
    }

    fn from_amplitudes(amps: &BTreeMap<u16, C>) -> DenseRho {
        let basis: Vec<u16> = amps.keys().copied().collect();
        let v = nalgebra::DVector::from_iterator(basis.len(), amps.values().copied());
        DenseRho {
            basis,
            m: &v * v.adjoint(),
        }
    }

    fn scaled(&self, f: f64) -> DenseRho {
        DenseRho {
            basis: self.basis.clone(),
            m: self.m.scale(f),
        }
    }

    fn pruned(self) -> DenseRho {
        let keep: Vec<usize> = (0..self.basis.len())
            .filter(|&i| self.m[(i, i)].re > PRUNE)
            .collect();
        if keep.len() == self.basis.len() {
            return self;
        }
        let basis = keep.iter().map(|&i| self.basis[i]).collect();
        let m = DMatrix::from_fn(keep.len(), keep.len(), |r, c| self.m[(keep[r], keep[c])]);
        DenseRho { basis, m }
    }

    /// The matrix on the populated subspace.
    pub fn to_density_matrix(&self) -> DensityMatrix {
        DensityMatrix::from_matrix(self.m.clone())
    }

    /// Traces out the listed photons; the result is indexed by the
    /// remaining photons' bits, most significant first.
    pub fn reduce(&self, keep_photons: &[usize]) -> DensityMatrix {
        let idx = |k: u16| {
            keep_photons.iter().fold(0usize, |acc, &p| {
                (acc << 3)
                    | (bit(k, p, POL) as usize) << 2
                    | (bit(k, p, SPATIAL) as usize) << 1
                    | bit(k, p, FREQ) as usize
            })
        };
        let env_mask: u16 = keep_photons
            .iter()
            .fold(0, |m, &p| m | (0b111 << pos(p, FREQ)));
        let dim = 1usize << (3 * keep_photons.len());
        let mut out = DMatrix::<C>::zeros(dim, dim);
        for (i, &a) in self.basis.iter().enumerate() {
            for (j, &b) in self.basis.iter().enumerate() {
                if a & !env_mask == b & !env_mask {
                    out[(idx(a), idx(b))] += self.m[(i, j)];
                }
            }
        }
        DensityMatrix::from_matrix(out)
    }
}

/// One Kraus operator given by its action on basis kets.
pub struct Kraus {
    pub label: String,
    map: Box<dyn Fn(u16) -> Vec<(u16, C)> + Send + Sync>,
}

impl Kraus {
    pub fn new(label: &str, map: impl Fn(u16) -> Vec<(u16, C)> + Send + Sync + 'static) -> Kraus {
        Kraus {
            label: label.to_string(),
            map: Box::new(map),
        }
    }

    /// Nonzero entries `(row, col, value)` of the operator restricted to
    /// `from`, with rows indexed into the sorted image basis.
    fn entries(&self, from: &[u16]) -> (Vec<u16>, Vec<(usize, usize, C)>) {
        let raw: Vec<(u16, usize, C)> = from
            .iter()
            .enumerate()
            .flat_map(|(j, &k)| (self.map)(k).into_iter().map(move |(out, a)| (out, j, a)))
            .filter(|(_, _, a)| a.norm() > 0.0)
            .collect();
        let mut image: Vec<u16> = raw.iter().map(|e| e.0).collect();
        image.sort_unstable();
        image.dedup();
        let entries = raw
            .into_iter()
            .map(|(out, j, a)| (image.binary_search(&out).expect("in image"), j, a))
            .collect();
        (image, entries)
    }
}

/// A list of Kraus operators. Selective channels keep one output per
/// operator; non-selective ones sum them.
pub struct DenseChannel {
    pub name: String,
    pub ops: Vec<Kraus>,
    pub selective: bool,
}

impl DenseChannel {
    pub fn unitary(name: &str, op: Kraus) -> DenseChannel {
        DenseChannel {
            name: name.to_string(),
            ops: vec![op],
            selective: false,
        }
    }
}

/// One labelled output of a selective channel: unnormalized state.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBranch {
    pub label: String,
    pub probability: f64,
    pub rho: DenseRho,
}

type Entries = Vec<(usize, usize, C)>;

/// Max deviation of Σ K†K from the identity on an `n`-dimensional subspace.
fn completeness_deviation(n: usize, ops: &[(Vec<u16>, Entries)]) -> f64 {
    let mut sum = DMatrix::<C>::identity(n, n).scale(-1.0);
    for (image, entries) in ops {
        let mut by_row: Vec<Vec<(usize, C)>> = vec![Vec::new(); image.len()];
        for &(i, j, a) in entries {
            by_row[i].push((j, a));
        }
        for row in &by_row {
            for &(j1, a1) in row {
                for &(j2, a2) in row {
                    sum[(j1, j2)] += a1.conj() * a2;
                }
            }
        }
    }
    sum.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// K ρ K† accumulated entry by entry.
fn conjugate(rho: &DMatrix<C>, image: Vec<u16>, entries: &Entries) -> DenseRho {
    let mut m = DMatrix::<C>::zeros(image.len(), image.len());
    for &(i1, j1, a1) in entries {
        for &(i2, j2, a2) in entries {
            m[(i1, i2)] += a1 * rho[(j1, j2)] * a2.conj();
        }
    }
    DenseRho { basis: image, m }.pruned()
}

/// Applies `ch`. Non-selective channels give one unlabelled branch with
/// probability equal to the trace.
pub fn apply_dense(rho: &DenseRho, ch: &DenseChannel) -> Result<Vec<DenseBranch>> {
    let ops: Vec<(Vec<u16>, Entries)> = ch.ops.iter().map(|k| k.entries(&rho.basis)).collect();
    let dev = completeness_deviation(rho.basis.len(), &ops);
    if dev > COMPLETENESS_TOL {
        return Err(Error::Precondition(format!(
            "channel `{}` is not complete on the populated subspace (deviation {dev:.3e})",
            ch.name
        )));
    }
    let outs: Vec<DenseRho> = ops
        .into_iter()
        .map(|(image, entries)| conjugate(&rho.m, image, &entries))
        .collect();
    if ch.selective {
        Ok(ch
            .ops
            .iter()
            .zip(outs)
            .map(|(k, r)| DenseBranch {
                label: k.label.clone(),
                probability: r.trace(),
                rho: r,
            })
            .collect())
    } else {
        let sum = sum_rhos(outs);
        Ok(vec![DenseBranch {
            label: String::new(),
            probability: sum.trace(),
            rho: sum,
        }])
    }
}

fn sum_rhos(parts: Vec<DenseRho>) -> DenseRho {
    let mut basis: Vec<u16> = parts.iter().flat_map(|p| p.basis.iter().copied()).collect();
    basis.sort_unstable();
    basis.dedup();
    let mut m = DMatrix::<C>::zeros(basis.len(), basis.len());
    for p in &parts {
        let map: Vec<usize> = p
            .basis
            .iter()
            .map(|k| basis.binary_search(k).expect("union"))
            .collect();
        for (i, &a) in map.iter().enumerate() {
            for (j, &b) in map.iter().enumerate() {
                m[(a, b)] += p.m[(i, j)];
            }
        }
    }
    DenseRho { basis, m }.pruned()
}

fn non_selective(rho: &DenseRho, ch: &DenseChannel) -> Result<DenseRho> {
    Ok(apply_dense(rho, ch)?.remove(0).rho)
}

/// ρ = Σ wᵢ|ψᵢ⟩⟨ψᵢ|.
pub fn densify(e: &Ensemble) -> Result<DenseRho> {
    let Some(first) = e.branches().first() else {
        return Err(Error::Shape("empty ensemble".into()));
    };
    let photons = first.state.photons();
    let mut parts = Vec::with_capacity(e.len());
    for b in e.branches() {
        if b.state.photons() != photons {
            return Err(Error::Shape(format!(
                "ensemble mixes photon sets {{{photons}}} and {{{}}}",
                b.state.photons()
            )));
        }
        let amps: BTreeMap<u16, C> = b.state.iter().map(|(k, a)| (k.index() as u16, a)).collect();
        parts.push(DenseRho::from_amplitudes(&amps).scaled(b.weight));
    }
    Ok(sum_rhos(parts))
}

fn single_qubit(label: &str, photon: usize, dof: usize, op: [[C; 2]; 2]) -> Kraus {
    Kraus::new(label, move |k| {
        let v = bit(k, photon, dof) as usize;
        (0..2u8)
            .filter(|&o| op[o as usize][v].norm() > 0.0)
            .map(|o| (set(k, photon, dof, o), op[o as usize][v]))
            .collect()
    })
}

fn pauli_z(photon: usize, dof: usize) -> Kraus {
    let (one, zero) = (C::new(1.0, 0.0), C::new(0.0, 0.0));
    single_qubit("Z", photon, dof, [[one, zero], [zero, -one]])
}

fn pauli_x(photon: usize, dof: usize) -> Kraus {
    let (one, zero) = (C::new(1.0, 0.0), C::new(0.0, 0.0));
    single_qubit("X", photon, dof, [[zero, one], [one, zero]])
}

/// Measure `target`, forget the result, prepare `rule[control]`.
fn overwrite(photon: usize, target: usize, control: usize, rule: [u8; 2]) -> DenseChannel {
    let ops = (0..2u8)
        .map(|m| {
            Kraus::new(&format!("t={m}"), move |k| {
                if bit(k, photon, target) != m {
                    return Vec::new();
                }
                let v = rule[bit(k, photon, control) as usize];
                vec![(set(k, photon, target, v), C::new(1.0, 0.0))]
            })
        })
        .collect();
    DenseChannel {
        name: format!("overwrite {photon}.{target} <- {control}"),
        ops,
        selective: false,
    }
}

/// Every frequency to ω2.
fn frequency_multipliers() -> DenseChannel {
    DenseChannel::unitary(
        "FM",
        Kraus::new("FM", |k| {
            let out = (0..4).fold(k, |k, p| set(k, p, FREQ, 1));
            vec![(out, C::new(1.0, 0.0))]
        }),
    )
}

/// Polarization of `photon` to |+⟩ regardless of its value.
fn prepare_plus(photon: usize) -> DenseChannel {
    let r = C::new(FRAC_1_SQRT_2, 0.0);
    let ops = (0..2u8)
        .map(|m| {
            Kraus::new(&format!("m={m}"), move |k| {
                if bit(k, photon, POL) != m {
                    return Vec::new();
                }
                vec![(set(k, photon, POL, 0), r), (set(k, photon, POL, 1), r)]
            })
        })
        .collect();
    DenseChannel {
        name: format!("prepare |+> on {photon}"),
        ops,
        selective: false,
    }
}

fn diagonal_projector(photon: usize, dof: usize, minus: bool) -> Kraus {
    let h = C::new(0.5, 0.0);
    let o = if minus { -h } else { h };
    single_qubit(if minus { "-" } else { "+" }, photon, dof, [[h, o], [o, h]])
}

fn apply_chain(rho: DenseRho, chain: &[DenseChannel]) -> Result<DenseRho> {
    chain.iter().try_fold(rho, |r, ch| non_selective(&r, ch))
}

const ERASED: [(usize, usize, &str); 4] = [
    (CC, POL, "C.pol"),
    (CC, SPATIAL, "C.spatial"),
    (D, POL, "D.pol"),
    (D, SPATIAL, "D.spatial"),
];

/// All 16 diagonal-basis outcomes on the CD pol and spatial qubits, with
/// the sign pattern of each (`true` for −).
fn erase_outcomes(rho: &DenseRho) -> Result<Vec<(String, [bool; 4], DenseRho)>> {
    let mut out = Vec::with_capacity(16);
    for pattern in 0..16u8 {
        let signs = [0, 1, 2, 3].map(|i| pattern >> (3 - i) & 1 == 1);
        let mut r = rho.clone();
        let mut labels = Vec::with_capacity(4);
        for (i, &(p, d, name)) in ERASED.iter().enumerate() {
            let op = diagonal_projector(p, d, signs[i]);
            let complement = diagonal_projector(p, d, !signs[i]);
            let ch = DenseChannel {
                name: format!("{name} diagonal"),
                ops: vec![op, complement],
                selective: true,
            };
            r = apply_dense(&r, &ch)?.remove(0).rho;
            labels.push(format!("{name}={}", if signs[i] { '-' } else { '+' }));
        }
        if r.trace() > PRUNE {
            out.push((labels.join(";"), signs, r));
        }
    }
    Ok(out)
}

/// Oracle-side initial state, written directly from the case formulas.
pub fn initial_state(scheme: Scheme, params: &SchemeParams, case: CasePair) -> Result<DenseRho> {
    params.validate()?;
    let coeff = |idx: u8, x: C, y: C, v1: u8, v2: u8| -> Result<C> {
        Ok(match (idx, v1, v2) {
            (1 | 3, 0, 0) | (2 | 4, 0, 1) => x,
            (1, 1, 1) | (2, 1, 0) => y,
            (3, 1, 1) | (4, 1, 0) => -y,
            (1..=4, _, _) => C::new(0.0, 0.0),
            _ => return Err(Error::InvalidCase(format!("{idx} is outside 1..=4"))),
        })
    };
    let r = C::new(FRAC_1_SQRT_2, 0.0);
    let pair_amp = |k: u16, x: usize, y: usize, p: &PairParams, pol: u8, sp: u8| -> Result<C> {
        let pa = coeff(pol, p.alpha, p.beta, bit(k, x, POL), bit(k, y, POL))?;
        let sa = coeff(sp, p.gamma, p.delta, bit(k, x, SPATIAL), bit(k, y, SPATIAL))?;
        let (e, n) = match scheme {
            Scheme::One => (p.epsilon, p.eta),
            Scheme::Two => (r, r),
        };
        let fa = coeff(2, e, n, bit(k, x, FREQ), bit(k, y, FREQ))?;
        Ok(pa * sa * fa)
    };
    let (sab, scd) = match (scheme, case.spatial) {
        (Scheme::One, None) => (1, 1),
        (Scheme::Two, Some(s)) => s,
        _ => return Err(Error::InvalidCase(format!("case {case} does not fit the scheme"))),
    };
    let mut amps = BTreeMap::new();
    for k in 0..4096u16 {
        let a = pair_amp(k, A, B, &params.ab, case.pol_ab, sab)?
            * pair_amp(k, CC, D, params.cd(), case.pol_cd, scd)?;
        if a.norm() > 0.0 {
            amps.insert(k, a);
        }
    }
    Ok(DenseRho::from_amplitudes(&amps))
}

/// One labelled AB result of a dense run.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleBranch {
    pub label: String,
    pub probability: f64,
    /// Normalized AB density matrix over all three DOFs of A and B.
    pub rho_ab: DensityMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub success: Vec<OracleBranch>,
    pub failure_probability: f64,
}

fn finish(label: String, probability: f64, rho: &DenseRho) -> OracleBranch {
    let ab = rho.reduce(&[A, B]);
    let t = ab.trace().re;
    OracleBranch {
        label,
        probability,
        rho_ab: DensityMatrix::from_matrix(ab.matrix().unscale(t)),
    }
}

fn corrected(rho: DenseRho, ops: Vec<Kraus>) -> Result<DenseRho> {
    ops.into_iter()
        .try_fold(rho, |r, k| non_selective(&r, &DenseChannel::unitary("correction", k)))
}

/// Dense Scheme 1: QND1 as a subspace projector, the polarization and spatial transfers as four overwrites
/// plus frequency multipliers, the eraser as diagonal projections, and Z
/// on A per odd parity of − results in each DOF.
pub fn scheme1_dense(params: &SchemeParams, case: CasePair) -> Result<OracleOutcome> {
    let rho = initial_state(Scheme::One, params, case)?;
    let keep = |k: u16| bit(k, A, SPATIAL) != bit(k, CC, SPATIAL) && bit(k, A, FREQ) != bit(k, CC, FREQ);
    let qnd1 = DenseChannel {
        name: "qnd1".into(),
        ops: vec![
            Kraus::new("success", move |k| if keep(k) { vec![(k, C::new(1.0, 0.0))] } else { Vec::new() }),
            Kraus::new("fail", move |k| if keep(k) { Vec::new() } else { vec![(k, C::new(1.0, 0.0))] }),
        ],
        selective: true,
    };
    let mut q = apply_dense(&rho, &qnd1)?;
    let fail = q.pop().expect("two outputs");
    let success = q.pop().expect("two outputs");
    let mut out = OracleOutcome {
        success: Vec::new(),
        failure_probability: fail.probability,
    };
    if success.probability <= PRUNE {
        return Ok(out);
    }
    let s = success.rho.scaled(1.0 / success.probability);
    let transferred = apply_chain(
        s,
        &[
            overwrite(A, POL, FREQ, [0, 1]),
            overwrite(B, POL, FREQ, [1, 0]),
            overwrite(CC, POL, FREQ, [1, 0]),
            overwrite(D, POL, FREQ, [0, 1]),
            frequency_multipliers(),
        ],
    )?;
    for (label, signs, r) in erase_outcomes(&transferred)? {
        let p = r.trace();
        let mut fixes = Vec::new();
        if signs[0] ^ signs[2] {
            fixes.push(pauli_z(A, POL));
        }
        if signs[1] ^ signs[3] {
            fixes.push(pauli_z(A, SPATIAL));
        }
        let r = corrected(r, fixes)?;
        out.success.push(finish(
            format!("qnd1=success;{label}"),
            success.probability * p,
            &r,
        ));
    }
    Ok(out)
}

/// Homodyne class of one side of QND2, counted from the coupling
/// description: upper beam for `H` or mode 2, lower beam for `V` or mode 1.
fn qnd2_class(k: u16, pol_photon: usize, spatial_photon: usize) -> u32 {
    let p = bit(k, pol_photon, POL);
    let s = bit(k, spatial_photon, SPATIAL);
    let up = u32::from(p == 0) + u32::from(s == 1);
    let down = u32::from(p == 1) + u32::from(s == 0);
    up.abs_diff(down)
}

/// Dense Scheme 2: the transfer and diagonalization steps as overwrite channels, QND2 as the
/// four class projectors, X on A for unequal classes, eraser with Z on A
/// for an odd total count of − results.
pub fn scheme2_dense(params: &SchemeParams, case: CasePair) -> Result<OracleOutcome> {
    let rho = initial_state(Scheme::Two, params, case)?;
    let prepared = apply_chain(
        rho,
        &[
            overwrite(A, SPATIAL, FREQ, [0, 1]),
            overwrite(B, SPATIAL, FREQ, [1, 0]),
            overwrite(CC, SPATIAL, FREQ, [0, 1]),
            overwrite(D, SPATIAL, FREQ, [1, 0]),
            frequency_multipliers(),
            prepare_plus(A),
            prepare_plus(B),
            overwrite(CC, POL, SPATIAL, [0, 1]),
            overwrite(D, POL, SPATIAL, [0, 1]),
        ],
    )?;
    let mut ops = Vec::new();
    for ca in [0u32, 2] {
        for cb in [0u32, 2] {
            ops.push(Kraus::new(&format!("qnd2=({ca},{cb})"), move |k| {
                if qnd2_class(k, A, CC) == ca && qnd2_class(k, B, D) == cb {
                    vec![(k, C::new(1.0, 0.0))]
                } else {
                    Vec::new()
                }
            }));
        }
    }
    let qnd2 = DenseChannel {
        name: "qnd2".into(),
        ops,
        selective: true,
    };
    let mut out = OracleOutcome {
        success: Vec::new(),
        failure_probability: 0.0,
    };
    for branch in apply_dense(&prepared, &qnd2)? {
        if branch.probability <= PRUNE {
            continue;
        }
        let flip = {
            let l = &branch.label;
            l != "qnd2=(0,0)" && l != "qnd2=(2,2)"
        };
        let normalized = branch.rho.scaled(1.0 / branch.probability);
        for (label, signs, r) in erase_outcomes(&normalized)? {
            let p = r.trace();
            let mut fixes = Vec::new();
            if flip {
                fixes.push(pauli_x(A, POL));
            }
            if signs.iter().filter(|s| **s).count() % 2 == 1 {
                fixes.push(pauli_z(A, POL));
            }
            let r = corrected(r, fixes)?;
            out.success.push(finish(
                format!("{};{label}", branch.label),
                branch.probability * p,
                &r,
            ));
        }
    }
    Ok(out)
}

pub fn run_dense(scheme: Scheme, params: &SchemeParams, case: CasePair) -> Result<OracleOutcome> {
    match scheme {
        Scheme::One => scheme1_dense(params, case),
        Scheme::Two => scheme2_dense(params, case),
    }
}

/// Oracle-side target |φ⟩⟨φ| on the AB index used by [`DenseRho::reduce`].
pub fn target_rho_ab() -> DensityMatrix {
    DensityMatrix::pure(&target_vector())
}

fn target_vector() -> nalgebra::DVector<C> {
    let mut v = nalgebra::DVector::<C>::zeros(64);
    for p in 0..2usize {
        for s in 0..2usize {
            // freq ω2 on both photons
            let photon = (p << 2) | (s << 1) | 1;
            v[(photon << 3) | photon] = C::new(0.5, 0.0);
        }
    }
    v
}

struct TargetVector(nalgebra::DVector<C>);

impl TargetVector {
    fn expectation(&self, rho: &DensityMatrix) -> f64 {
        rho.expectation(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchComparison {
    pub label: String,
    pub pipeline_probability: f64,
    pub oracle_probability: f64,
    pub probability_delta: f64,
    pub trace_distance: Option<f64>,
    pub oracle_fidelity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub scheme: u8,
    pub case: String,
    pub branches: Vec<BranchComparison>,
    pub failure_probability_delta: f64,
    pub max_probability_delta: f64,
    pub max_trace_distance: f64,
    /// Label mismatches and pipeline errors.
    pub structural: Vec<String>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub tolerance: f64,
    pub cases: usize,
    pub failed_cases: usize,
    pub max_probability_delta: f64,
    pub max_trace_distance: f64,
    pub pass: bool,
    pub reports: Vec<CaseReport>,
}

fn pipeline_rho_ab(state: &crate::hyperstate::PureState) -> DensityMatrix {
    let mut v = nalgebra::DVector::<C>::zeros(64);
    for (k, a) in state.iter() {
        v[k.index() >> 6] = a;
    }
    DensityMatrix::pure(&v)
}

/// Compares the sparse pipeline against the dense composition.
pub fn compare(
    pipeline: Result<protocols::ProtocolOutcome>,
    dense: &OracleOutcome,
    scheme: Scheme,
    case: CasePair,
    tol: f64,
) -> CaseReport {
    let mut report = CaseReport {
        scheme: scheme.number(),
        case: case.to_string(),
        branches: Vec::new(),
        failure_probability_delta: 0.0,
        max_probability_delta: 0.0,
        max_trace_distance: 0.0,
        structural: Vec::new(),
        pass: false,
    };
    let pipeline = match pipeline {
        Ok(p) => p,
        Err(e) => {
            report.structural.push(format!("pipeline error: {e}"));
            return report;
        }
    };
    let pipe_fail: f64 = pipeline.branches.iter().filter(|b| !b.success).map(|b| b.probability).sum();
    report.failure_probability_delta = (pipe_fail - dense.failure_probability).abs();

    let mut pipe: BTreeMap<String, &protocols::OutcomeBranch> = BTreeMap::new();
    for b in pipeline.successes() {
        if pipe.insert(b.label(), b).is_some() {
            report.structural.push(format!("duplicate pipeline label `{}`", b.label()));
        }
    }
    let target = TargetVector(target_vector());
    let mut seen = Vec::new();
    for o in &dense.success {
        seen.push(o.label.clone());
        let fid = Some(target.expectation(&o.rho_ab));
        match pipe.get(&o.label) {
            Some(b) => {
                let td = pipeline_rho_ab(&b.state).trace_distance(&o.rho_ab).ok();
                report.branches.push(BranchComparison {
                    label: o.label.clone(),
                    pipeline_probability: b.probability,
                    oracle_probability: o.probability,
                    probability_delta: (b.probability - o.probability).abs(),
                    trace_distance: td,
                    oracle_fidelity: fid,
                });
            }
            None => {
                if o.probability > tol {
                    report.structural.push(format!("oracle outcome `{}` missing from pipeline", o.label));
                }
                report.branches.push(BranchComparison {
                    label: o.label.clone(),
                    pipeline_probability: 0.0,
                    oracle_probability: o.probability,
                    probability_delta: o.probability,
                    trace_distance: None,
                    oracle_fidelity: fid,
                });
            }
        }
    }
    for (label, b) in &pipe {
        if !seen.contains(label) {
            if b.probability > tol {
                report.structural.push(format!("pipeline outcome `{label}` unknown to the oracle"));
            }
            report.branches.push(BranchComparison {
                label: label.clone(),
                pipeline_probability: b.probability,
                oracle_probability: 0.0,
                probability_delta: b.probability,
                trace_distance: None,
                oracle_fidelity: None,
            });
        }
    }
    report.max_probability_delta = report
        .branches
        .iter()
        .map(|b| b.probability_delta)
        .fold(report.failure_probability_delta, f64::max);
    report.max_trace_distance = report
        .branches
        .iter()
        .filter_map(|b| b.trace_distance)
        .fold(0.0, f64::max);
    report.pass = report.structural.is_empty()
        && report.max_probability_delta < tol
        && report.max_trace_distance < tol;
    report
}

/// Runs both implementations on every case of `scheme` and compares.
pub fn verify(
    scheme: Scheme,
    params: &SchemeParams,
    coupling: &CouplingTable,
    tol: f64,
) -> Result<VerifyReport> {
    params.validate()?;
    let reports: Vec<CaseReport> = protocols::cases_for(scheme)
        .into_par_iter()
        .map(|case| {
            let dense = run_dense(scheme, params, case)?;
            let pipe = protocols::run(scheme, params, case, coupling);
            Ok(compare(pipe, &dense, scheme, case, tol))
        })
        .collect::<Result<_>>()?;
    let failed_cases = reports.iter().filter(|r| !r.pass).count();
    Ok(VerifyReport {
        tolerance: tol,
        cases: reports.len(),
        failed_cases,
        max_probability_delta: reports.iter().map(|r| r.max_probability_delta).fold(0.0, f64::max),
        max_trace_distance: reports.iter().map(|r| r.max_trace_distance).fold(0.0, f64::max),
        pass: failed_cases == 0,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperstate::{BasisKet, Photon, PhotonSet, PureState, Subsystem, Dof};
    use approx::assert_abs_diff_eq;

    fn c(x: f64) -> C {
        C::new(x, 0.0)
    }

    #[test]
    fn densify_examples() {
        let k0 = BasisKet::default();
        let k1 = k0.with(Subsystem::new(Photon::A, Dof::Pol), 1);
        let s0 = PureState::basis(PhotonSet::ALL, k0).unwrap();
        let s1 = PureState::basis(PhotonSet::ALL, k1).unwrap();
        let single = densify(&Ensemble::pure(s0.clone())).unwrap();
        assert_eq!(single.basis(), &[0]);
        assert_abs_diff_eq!(single.trace(), 1.0, epsilon = 1e-12);

        let mix = densify(&Ensemble::mix(vec![(0.7, s0.clone()), (0.3, s1)]).unwrap()).unwrap();
        let ev = mix.to_density_matrix().eigenvalues();
        assert_abs_diff_eq!(ev[ev.len() - 1], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[ev.len() - 2], 0.3, epsilon = 1e-12);

        let ab = PureState::basis(PhotonSet::AB, k0).unwrap();
        let bad = Ensemble::mix(vec![(0.5, s0), (0.5, ab)]).unwrap();
        assert!(matches!(densify(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_pol_mixture_is_maximally_mixed() {
        let r = FRAC_1_SQRT_2;
        let mut parts = Vec::new();
        for case in 1..=4u8 {
            let p = SchemeParams::shared(PairParams::real(r, r, 1.0, 0.0, 1.0, 0.0));
            let rho = initial_state(Scheme::One, &p, CasePair::scheme1(case, 1)).unwrap();
            parts.push(rho.scaled(0.25));
        }
        let rho = sum_rhos(parts);
        let ab = rho.reduce(&[A, B]);
        // the AB polarization marginal: indices differ only in the pol bits
        let mut pol = DMatrix::<C>::zeros(4, 4);
        for i in 0..64 {
            for j in 0..64 {
                let (pi, pj) = (((i >> 5) & 1) << 1 | ((i >> 2) & 1), ((j >> 5) & 1) << 1 | ((j >> 2) & 1));
                if i & 0b011011 == j & 0b011011 {
                    pol[(pi, pj)] += ab.matrix()[(i, j)];
                }
            }
        }
        let expect = DMatrix::<C>::identity(4, 4).scale(0.25);
        assert!((pol - expect).iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn identity_channel_is_a_no_op() {
        let rho = initial_state(Scheme::One, &SchemeParams::default(), CasePair::scheme1(2, 3)).unwrap();
        let id = DenseChannel::unitary("id", Kraus::new("id", |k| vec![(k, c(1.0))]));
        assert_eq!(non_selective(&rho, &id).unwrap(), rho);
    }

    #[test]
    fn incomplete_channel_is_rejected() {
        let rho = initial_state(Scheme::One, &SchemeParams::default(), CasePair::scheme1(1, 1)).unwrap();
        // FM before the frequencies are classical merges kets
        assert!(matches!(non_selective(&rho, &frequency_multipliers()), Err(Error::Precondition(_))));
    }

    #[test]
    fn initial_state_agrees_with_builder() {
        let p = SchemeParams::shared(PairParams::real(0.6, 0.8, 0.28, 0.96, 0.8, 0.6));
        for case in CasePair::all_scheme1() {
            let dense = initial_state(Scheme::One, &p, case).unwrap();
            let sparse = densify(&Ensemble::pure(protocols::build_initial_scheme1(&p, case).unwrap())).unwrap();
            assert_eq!(dense.basis(), sparse.basis());
            assert!((dense.matrix() - sparse.matrix()).iter().all(|z| z.norm() < 1e-12));
        }
        for case in CasePair::all_scheme2().into_iter().step_by(7) {
            let dense = initial_state(Scheme::Two, &p, case).unwrap();
            let sparse = densify(&Ensemble::pure(protocols::build_initial_scheme2(&p, case).unwrap())).unwrap();
            assert_eq!(dense.basis(), sparse.basis());
            assert!((dense.matrix() - sparse.matrix()).iter().all(|z| z.norm() < 1e-12));
        }
    }

    #[test]
    fn qnd1_trace_is_the_success_law() {
        let p = SchemeParams::shared(PairParams::real(0.6, 0.8, 0.6, 0.8, 0.6, 0.8));
        let o = scheme1_dense(&p, CasePair::scheme1(1, 4)).unwrap();
        let ps: f64 = o.success.iter().map(|b| b.probability).sum();
        assert_abs_diff_eq!(ps, 0.21233664, epsilon = 1e-12);
        assert_abs_diff_eq!(o.failure_probability, 1.0 - 0.21233664, epsilon = 1e-12);
        assert_eq!(o.success.len(), 16);
        for b in &o.success {
            assert_abs_diff_eq!(b.rho_ab.trace_distance(&target_rho_ab()).unwrap(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn dense_scheme2_reaches_target() {
        let p = SchemeParams::shared(PairParams::real(0.6, 0.8, 0.8, 0.6, 1.0, 0.0));
        let o = scheme2_dense(&p, CasePair::scheme2(1, 1, 2, 2)).unwrap();
        assert_eq!(o.success.len(), 64);
        let total: f64 = o.success.iter().map(|b| b.probability).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        for b in &o.success {
            assert_abs_diff_eq!(b.probability, 1.0 / 64.0, epsilon = 1e-12);
            assert_abs_diff_eq!(b.rho_ab.trace_distance(&target_rho_ab()).unwrap(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn pipeline_matches_oracle_on_some_cases() {
        let p = SchemeParams::shared(PairParams::real(0.6, 0.8, 0.28, 0.96, 0.8, 0.6));
        let co = CouplingTable::default();
        for (scheme, case) in [
            (Scheme::One, CasePair::scheme1(1, 4)),
            (Scheme::One, CasePair::scheme1(3, 2)),
            (Scheme::Two, CasePair::scheme2(4, 3, 2, 1)),
        ] {
            let dense = run_dense(scheme, &p, case).unwrap();
            let r = compare(protocols::run(scheme, &p, case, &co), &dense, scheme, case, 1e-9);
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn identical_inputs_have_zero_deltas() {
        let p = SchemeParams::default();
        let case = CasePair::scheme1(2, 2);
        let dense = scheme1_dense(&p, case).unwrap();
        let r = compare(protocols::scheme1_run(&p, case, &CouplingTable::default()), &dense, Scheme::One, case, 1e-9);
        assert!(r.max_probability_delta < 1e-14);
        assert!(r.max_trace_distance < 1e-12);
    }

    #[test]
    fn corrupted_coupling_is_flagged() {
        let mut bad = CouplingTable::default();
        // frequency couplings at θ instead of 2θ alias the failure terms
        for r in bad.rules.iter_mut().filter(|r| r.probe.starts_with("qnd1")) {
            r.units = 1;
        }
        let p = SchemeParams::shared(PairParams::real(0.6, 0.8, 0.6, 0.8, 0.6, 0.8));
        let case = CasePair::scheme1(1, 4);
        let dense = scheme1_dense(&p, case).unwrap();
        let r = compare(protocols::scheme1_run(&p, case, &bad), &dense, Scheme::One, case, 1e-9);
        assert!(!r.pass);
    }
}
