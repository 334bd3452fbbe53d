//! State algebra for up to four photons, each carrying three binary degrees of
//! freedom: polarization, spatial mode and frequency.
//!
//! A basis ket is a 12-bit index. Photon `A` occupies the three most
//! significant bits and, within a photon, the order is polarization, spatial,
//! frequency. Bit value 0 stands for `H`, `m1` and `ω1`; 1 stands for `V`, `m2`
//! and `ω2`. Photons a state does not carry keep all their bits at zero.
//!
//! Mixed states are ensembles of weighted pure branches. Density matrices only
//! appear as reduced states and in the dense oracle.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numfmt::sig15;

/// Amplitudes with modulus below this are dropped after every operation.
pub const PRUNE_EPS: f64 = 1e-14;
/// Absolute tolerance on norms, weights and amplitude equality.
pub const NORM_TOL: f64 = 1e-12;
/// Tolerance on probabilities and fidelities.
pub const PROB_TOL: f64 = 1e-9;

/// Polarization values.
pub const H: u8 = 0;
pub const V: u8 = 1;
/// Spatial mode values (`a1`/`a2`, `b1`/`b2`, ... depending on the photon).
pub const M1: u8 = 0;
pub const M2: u8 = 1;
/// Frequency values, `ω2 > ω1`.
pub const W1: u8 = 0;
pub const W2: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Photon {
    A,
    B,
    C,
    D,
}

impl Photon {
    pub const ALL: [Photon; 4] = [Photon::A, Photon::B, Photon::C, Photon::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> char {
        match self {
            Photon::A => 'A',
            Photon::B => 'B',
            Photon::C => 'C',
            Photon::D => 'D',
        }
    }

    pub fn from_label(c: char) -> Option<Photon> {
        match c.to_ascii_uppercase() {
            'A' => Some(Photon::A),
            'B' => Some(Photon::B),
            'C' => Some(Photon::C),
            'D' => Some(Photon::D),
            _ => None,
        }
    }

    fn spatial_prefix(self) -> char {
        self.label().to_ascii_lowercase()
    }
}

impl fmt::Display for Photon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dof {
    Pol,
    Spatial,
    Freq,
}

impl Dof {
    pub const ALL: [Dof; 3] = [Dof::Pol, Dof::Spatial, Dof::Freq];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Dof::Pol => "pol",
            Dof::Spatial => "spatial",
            Dof::Freq => "freq",
        }
    }

    pub fn from_name(s: &str) -> Option<Dof> {
        match s.to_ascii_lowercase().as_str() {
            "pol" | "polarization" => Some(Dof::Pol),
            "spatial" | "path" | "mode" => Some(Dof::Spatial),
            "freq" | "frequency" => Some(Dof::Freq),
            _ => None,
        }
    }

    /// Parses a value label for this DOF (`H`/`V`, `m1`/`a2`/..., `w1`/`ω2`, or `0`/`1`).
    pub fn parse_value(self, s: &str) -> Option<u8> {
        let s = s.trim();
        match s {
            "0" => return Some(0),
            "1" => return Some(1),
            _ => {}
        }
        match self {
            Dof::Pol => match s {
                "H" | "h" => Some(H),
                "V" | "v" => Some(V),
                _ => None,
            },
            Dof::Spatial => {
                let mut chars = s.chars();
                let first = chars.next()?;
                if !matches!(first.to_ascii_lowercase(), 'm' | 'a' | 'b' | 'c' | 'd') {
                    return None;
                }
                match chars.as_str() {
                    "1" => Some(M1),
                    "2" => Some(M2),
                    _ => None,
                }
            }
            Dof::Freq => match s.trim_start_matches(['w', 'W', 'ω']) {
                "1" => Some(W1),
                "2" => Some(W2),
                _ => None,
            },
        }
    }
}

impl fmt::Display for Dof {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One binary degree of freedom of one photon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Subsystem {
    pub photon: Photon,
    pub dof: Dof,
}

impl Subsystem {
    pub const fn new(photon: Photon, dof: Dof) -> Self {
        Subsystem { photon, dof }
    }

    fn shift(self) -> u32 {
        11 - (3 * self.photon.index() + self.dof.index()) as u32
    }

    pub fn mask(self) -> u16 {
        1 << self.shift()
    }

    /// Renders a value of this subsystem, e.g. `H`, `c2`, `ω1`.
    pub fn value_label(self, value: u8) -> String {
        match self.dof {
            Dof::Pol => if value == H { "H" } else { "V" }.to_string(),
            Dof::Spatial => format!("{}{}", self.photon.spatial_prefix(), value + 1),
            Dof::Freq => format!("ω{}", value + 1),
        }
    }

    pub fn all_of(photons: PhotonSet) -> Vec<Subsystem> {
        photons
            .iter()
            .flat_map(|p| Dof::ALL.into_iter().map(move |d| Subsystem::new(p, d)))
            .collect()
    }
}

impl fmt::Display for Subsystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.photon, self.dof)
    }
}

/// Assignment of (pol, spatial, freq) to each of the four photons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BasisKet(u16);

impl BasisKet {
    pub const COUNT: usize = 4096;

    pub fn from_index(index: usize) -> Option<BasisKet> {
        (index < Self::COUNT).then_some(BasisKet(index as u16))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn get(self, sub: Subsystem) -> u8 {
        ((self.0 >> sub.shift()) & 1) as u8
    }

    pub fn with(self, sub: Subsystem, value: u8) -> BasisKet {
        let cleared = self.0 & !sub.mask();
        BasisKet(cleared | (u16::from(value & 1) << sub.shift()))
    }

    pub fn flip(self, sub: Subsystem) -> BasisKet {
        BasisKet(self.0 ^ sub.mask())
    }

    /// Sets (pol, spatial, freq) of one photon.
    pub fn with_photon(self, photon: Photon, pol: u8, spatial: u8, freq: u8) -> BasisKet {
        self.with(Subsystem::new(photon, Dof::Pol), pol)
            .with(Subsystem::new(photon, Dof::Spatial), spatial)
            .with(Subsystem::new(photon, Dof::Freq), freq)
    }

    pub fn photon_bits(self, photon: Photon) -> u16 {
        (self.0 >> (9 - 3 * photon.index())) & 0b111
    }

    fn photons_mask(photons: PhotonSet) -> u16 {
        photons
            .iter()
            .map(|p| 0b111u16 << (9 - 3 * p.index()))
            .fold(0, |a, b| a | b)
    }

    /// Bits belonging to `photons` only.
    pub fn restricted(self, photons: PhotonSet) -> BasisKet {
        BasisKet(self.0 & Self::photons_mask(photons))
    }

    fn combine(self, other: BasisKet) -> BasisKet {
        BasisKet(self.0 | other.0)
    }

    pub fn render(self, photons: PhotonSet) -> String {
        let parts: Vec<String> = photons
            .iter()
            .map(|p| {
                Dof::ALL
                    .iter()
                    .map(|&d| {
                        let s = Subsystem::new(p, d);
                        s.value_label(self.get(s))
                    })
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        format!("|{}⟩", parts.join("; "))
    }
}

/// Subset of {A, B, C, D}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PhotonSet(u8);

impl PhotonSet {
    pub const ALL: PhotonSet = PhotonSet(0b1111);
    pub const AB: PhotonSet = PhotonSet(0b0011);
    pub const CD: PhotonSet = PhotonSet(0b1100);
    pub const EMPTY: PhotonSet = PhotonSet(0);

    pub fn of(photons: &[Photon]) -> PhotonSet {
        PhotonSet(photons.iter().fold(0, |acc, p| acc | (1 << p.index())))
    }

    pub fn contains(self, p: Photon) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn is_disjoint(self, other: PhotonSet) -> bool {
        self.0 & other.0 == 0
    }

    pub fn union(self, other: PhotonSet) -> PhotonSet {
        PhotonSet(self.0 | other.0)
    }

    pub fn difference(self, other: PhotonSet) -> PhotonSet {
        PhotonSet(self.0 & !other.0)
    }

    pub fn is_subset(self, other: PhotonSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Photon> {
        Photon::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

impl fmt::Display for PhotonSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

/// A single-subsystem 2×2 operator, row-major.
pub type Gate2 = [[Complex64; 2]; 2];

/// Normalized sparse superposition of basis kets.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    photons: PhotonSet,
    amps: BTreeMap<BasisKet, Complex64>,
}

impl PureState {
    /// Builds a normalized state from (coefficient, ket) terms. Repeated kets
    /// are summed, so relative phases are preserved.
    pub fn superpose<I>(photons: PhotonSet, terms: I) -> Result<PureState>
    where
        I: IntoIterator<Item = (Complex64, BasisKet)>,
    {
        let mut amps = BTreeMap::new();
        let mut any = false;
        for (c, k) in terms {
            any = true;
            if k.restricted(photons) != k {
                return Err(Error::Shape(format!(
                    "ket {} addresses photons outside {{{photons}}}",
                    k.index()
                )));
            }
            *amps.entry(k).or_insert(Complex64::new(0.0, 0.0)) += c;
        }
        if !any {
            return Err(Error::DegenerateState);
        }
        Self::normalized(photons, amps)
    }

    /// Basis ket with amplitude one.
    pub fn basis(photons: PhotonSet, ket: BasisKet) -> Result<PureState> {
        Self::superpose(photons, [(Complex64::new(1.0, 0.0), ket)])
    }

    pub(crate) fn normalized(
        photons: PhotonSet,
        mut amps: BTreeMap<BasisKet, Complex64>,
    ) -> Result<PureState> {
        amps.retain(|_, a| a.norm() >= PRUNE_EPS);
        let norm = amps.values().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if amps.is_empty() || norm < PRUNE_EPS {
            return Err(Error::DegenerateState);
        }
        for a in amps.values_mut() {
            *a /= norm;
        }
        amps.retain(|_, a| a.norm() >= PRUNE_EPS);
        Ok(PureState { photons, amps })
    }

    pub fn photons(&self) -> PhotonSet {
        self.photons
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    pub fn amplitude(&self, ket: BasisKet) -> Complex64 {
        self.amps.get(&ket).copied().unwrap_or_default()
    }

    /// Terms in ket-index order.
    pub fn iter(&self) -> impl Iterator<Item = (BasisKet, Complex64)> + '_ {
        self.amps.iter().map(|(k, a)| (*k, *a))
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.values().map(|a| a.norm_sqr()).sum()
    }

    /// ⟨self|other⟩.
    pub fn inner(&self, other: &PureState) -> Complex64 {
        let (small, large, conj_small) = if self.len() <= other.len() {
            (self, other, true)
        } else {
            (other, self, false)
        };
        small
            .amps
            .iter()
            .filter_map(|(k, a)| large.amps.get(k).map(|b| (a, b)))
            .map(|(a, b)| if conj_small { a.conj() * b } else { b.conj() * a })
            .sum()
    }

    /// Multiplies every amplitude by `factor` (a global phase when |factor| = 1).
    pub fn scaled(&self, factor: Complex64) -> Result<PureState> {
        let amps = self.amps.iter().map(|(k, a)| (*k, a * factor)).collect();
        Self::normalized(self.photons, amps)
    }

    pub fn require_photon(&self, photon: Photon) -> Result<()> {
        if self.photons.contains(photon) {
            Ok(())
        } else {
            Err(Error::AbsentPhoton(photon.label()))
        }
    }

    /// Tensor product of states over disjoint photon sets.
    pub fn tensor(&self, other: &PureState) -> Result<PureState> {
        if !self.photons.is_disjoint(other.photons) {
            return Err(Error::Shape(format!(
                "tensor of overlapping photon sets {{{}}} and {{{}}}",
                self.photons, other.photons
            )));
        }
        let mut amps = BTreeMap::new();
        for (k1, a1) in &self.amps {
            for (k2, a2) in &other.amps {
                amps.insert(k1.combine(*k2), a1 * a2);
            }
        }
        Self::normalized(self.photons.union(other.photons), amps)
    }

    /// Applies a 2×2 operator to one subsystem. The result is renormalized, so
    /// non-unitary operators act as unnormalized projections.
    pub fn apply_gate(&self, sub: Subsystem, gate: &Gate2) -> Result<PureState> {
        self.require_photon(sub.photon)?;
        Self::normalized(self.photons, self.gate_amplitudes(sub, gate))
    }

    /// Applies a 2×2 operator (typically a projector) without renormalizing
    /// first: returns ‖Mψ‖² and the normalized image, or `None` when the image
    /// vanishes.
    pub fn apply_operator(&self, sub: Subsystem, op: &Gate2) -> Result<Option<(f64, PureState)>> {
        self.require_photon(sub.photon)?;
        let amps = self.gate_amplitudes(sub, op);
        let prob: f64 = amps.values().map(|a| a.norm_sqr()).sum();
        if prob < PRUNE_EPS * PRUNE_EPS {
            return Ok(None);
        }
        Ok(Self::normalized(self.photons, amps).ok().map(|s| (prob, s)))
    }

    fn gate_amplitudes(&self, sub: Subsystem, gate: &Gate2) -> BTreeMap<BasisKet, Complex64> {
        let mut amps: BTreeMap<BasisKet, Complex64> = BTreeMap::new();
        for (k, a) in &self.amps {
            let col = k.get(sub) as usize;
            for (row, line) in gate.iter().enumerate() {
                let g = line[col];
                if g != Complex64::default() {
                    *amps.entry(k.with(sub, row as u8)).or_default() += g * a;
                }
            }
        }
        amps
    }

    /// Keeps only kets satisfying `keep`. Returns the retained probability and
    /// the renormalized state, or `None` if nothing survives.
    pub fn project<F>(&self, keep: F) -> Option<(f64, PureState)>
    where
        F: Fn(BasisKet) -> bool,
    {
        let amps: BTreeMap<_, _> = self
            .amps
            .iter()
            .filter(|(k, _)| keep(**k))
            .map(|(k, a)| (*k, *a))
            .collect();
        let prob: f64 = amps.values().map(|a| a.norm_sqr()).sum();
        if prob < PRUNE_EPS * PRUNE_EPS {
            return None;
        }
        Self::normalized(self.photons, amps).ok().map(|s| (prob, s))
    }

    /// Bitmask of the values `sub` takes across populated kets (bit 0 for
    /// value 0, bit 1 for value 1).
    pub fn values_present(&self, sub: Subsystem) -> u8 {
        self.amps.keys().fold(0, |acc, k| acc | (1 << k.get(sub)))
    }

    /// The single value `sub` takes, if it is the same on every populated ket.
    pub fn classical_value(&self, sub: Subsystem) -> Option<u8> {
        match self.values_present(sub) {
            0b01 => Some(0),
            0b10 => Some(1),
            _ => None,
        }
    }

    /// Removes `photons` from the state. They must sit in one and the same
    /// basis configuration on every populated ket; that configuration is
    /// returned alongside the remaining state.
    pub fn factor_out(&self, photons: PhotonSet) -> Result<(PureState, BasisKet)> {
        if !photons.is_subset(self.photons) {
            return Err(Error::Shape(format!(
                "cannot factor out {{{photons}}} from a state over {{{}}}",
                self.photons
            )));
        }
        let mut removed: Option<BasisKet> = None;
        let keep = self.photons.difference(photons);
        let mut amps = BTreeMap::new();
        for (k, a) in &self.amps {
            let part = k.restricted(photons);
            match removed {
                None => removed = Some(part),
                Some(r) if r != part => {
                    return Err(Error::Precondition(format!(
                        "photons {{{photons}}} are not in a single product configuration"
                    )))
                }
                _ => {}
            }
            amps.insert(k.restricted(keep), *a);
        }
        let state = Self::normalized(keep, amps)?;
        Ok((state, removed.unwrap_or_default()))
    }

    /// Reduced density matrix over `keep`, in the order given (first
    /// subsystem is the most significant index bit).
    pub fn reduced_density(&self, keep: &[Subsystem]) -> Result<DensityMatrix> {
        if keep.is_empty() {
            return Err(Error::Shape("reduced_density needs at least one subsystem".into()));
        }
        for (i, s) in keep.iter().enumerate() {
            self.require_photon(s.photon)?;
            if keep[..i].contains(s) {
                return Err(Error::Shape(format!("subsystem {s} listed twice")));
            }
        }
        let dim = 1usize << keep.len();
        let keep_mask = keep.iter().fold(0u16, |m, s| m | s.mask());
        let mut by_env: HashMap<u16, Vec<(usize, Complex64)>> = HashMap::new();
        for (k, a) in &self.amps {
            let idx = keep
                .iter()
                .fold(0usize, |acc, s| (acc << 1) | k.get(*s) as usize);
            by_env.entry(k.0 & !keep_mask).or_default().push((idx, *a));
        }
        let mut m = DMatrix::<Complex64>::zeros(dim, dim);
        for terms in by_env.values() {
            for (i, ai) in terms {
                for (j, aj) in terms {
                    m[(*i, *j)] += ai * aj.conj();
                }
            }
        }
        Ok(DensityMatrix::from_matrix(m))
    }

    /// Dense amplitude vector over the full 4096-dimensional space.
    pub fn to_dense(&self) -> DVector<Complex64> {
        let mut v = DVector::zeros(BasisKet::COUNT);
        for (k, a) in &self.amps {
            v[k.index()] = *a;
        }
        v
    }
}

/// Stable text form: one term per line, sorted by ket index, amplitudes as
/// `(re,im)` with 15 significant digits.
impl fmt::Display for PureState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, a) in &self.amps {
            writeln!(
                f,
                "{:04} {} ({},{})",
                k.index(),
                k.render(self.photons),
                sig15(a.re),
                sig15(a.im)
            )?;
        }
        Ok(())
    }
}

/// |⟨t|s⟩|².
pub fn fidelity(s: &PureState, t: &PureState) -> Result<f64> {
    if s.photons != t.photons {
        return Err(Error::Shape(format!(
            "fidelity between states over {{{}}} and {{{}}}",
            s.photons, t.photons
        )));
    }
    Ok(t.inner(s).norm_sqr().min(1.0))
}

/// A split of the subsystems a state carries into `left` and its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct Bipartition {
    left: Vec<Subsystem>,
    right: Vec<Subsystem>,
}

impl Bipartition {
    pub fn new(carried: PhotonSet, left: &[Subsystem]) -> Result<Bipartition> {
        let all = Subsystem::all_of(carried);
        if left.is_empty() || left.len() >= all.len() {
            return Err(Error::Shape("both sides of a bipartition must be nonempty".into()));
        }
        for s in left {
            if !all.contains(s) {
                return Err(Error::Shape(format!("subsystem {s} is not carried")));
            }
        }
        let mut l = left.to_vec();
        l.sort();
        l.dedup();
        if l.len() != left.len() {
            return Err(Error::Shape("bipartition side lists a subsystem twice".into()));
        }
        let right = all.into_iter().filter(|s| !l.contains(s)).collect();
        Ok(Bipartition { left: l, right })
    }

    pub fn left(&self) -> &[Subsystem] {
        &self.left
    }

    pub fn right(&self) -> &[Subsystem] {
        &self.right
    }

    pub fn swapped(&self) -> Bipartition {
        Bipartition {
            left: self.right.clone(),
            right: self.left.clone(),
        }
    }
}

/// Von Neumann entropy, in bits, of the left side of `split`.
pub fn entanglement_entropy(s: &PureState, split: &Bipartition) -> Result<f64> {
    Ok(s.reduced_density(split.left())?.entropy_bits())
}

/// Hermitian, unit-trace matrix. Used for reduced states and by the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: DMatrix<Complex64>,
}

impl DensityMatrix {
    pub fn from_matrix(matrix: DMatrix<Complex64>) -> DensityMatrix {
        DensityMatrix { matrix }
    }

    pub fn pure(v: &DVector<Complex64>) -> DensityMatrix {
        DensityMatrix {
            matrix: v * v.adjoint(),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn trace(&self) -> Complex64 {
        self.matrix.trace()
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        let d = &self.matrix - self.matrix.adjoint();
        d.iter().all(|z| z.norm() <= tol)
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigenvalues(&self.matrix)
    }

    pub fn entropy_bits(&self) -> f64 {
        self.eigenvalues()
            .into_iter()
            .filter(|&l| l > 1e-15)
            .map(|l| -l * l.log2())
            .sum::<f64>()
            .max(0.0)
    }

    pub fn purity(&self) -> f64 {
        (&self.matrix * &self.matrix).trace().re
    }

    /// ½‖ρ − σ‖₁.
    pub fn trace_distance(&self, other: &DensityMatrix) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!(
                "trace distance between dimensions {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let diff = &self.matrix - &other.matrix;
        Ok(0.5 * hermitian_eigenvalues(&diff).iter().map(|l| l.abs()).sum::<f64>())
    }

    /// ⟨v|ρ|v⟩.
    pub fn expectation(&self, v: &DVector<Complex64>) -> f64 {
        (v.adjoint() * &self.matrix * v)[(0, 0)].re
    }
}

pub(crate) fn hermitian_eigenvalues(m: &DMatrix<Complex64>) -> Vec<f64> {
    let herm = (m + m.adjoint()).scale(0.5);
    let mut ev: Vec<f64> = herm.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// One weighted pure component of an ensemble, with its classical history.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub weight: f64,
    pub state: PureState,
    pub record: Vec<String>,
}

/// Classically weighted list of pure branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    branches: Vec<Branch>,
}

impl Ensemble {
    /// Builds a mixture with empty records; weights must be positive and sum
    /// to one.
    pub fn mix(weighted: Vec<(f64, PureState)>) -> Result<Ensemble> {
        if weighted.is_empty() {
            return Err(Error::Normalization("empty mixture".into()));
        }
        if let Some((w, _)) = weighted.iter().find(|(w, _)| w.is_nan() || *w <= 0.0) {
            return Err(Error::Normalization(format!("non-positive weight {w}")));
        }
        let total: f64 = weighted.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(Error::Normalization(format!("weights sum to {total}, not 1")));
        }
        Ok(Ensemble {
            branches: weighted
                .into_iter()
                .map(|(weight, state)| Branch {
                    weight,
                    state,
                    record: Vec::new(),
                })
                .collect(),
        })
    }

    pub fn pure(state: PureState) -> Ensemble {
        Ensemble {
            branches: vec![Branch {
                weight: 1.0,
                state,
                record: Vec::new(),
            }],
        }
    }

    pub(crate) fn from_branches(branches: Vec<Branch>) -> Ensemble {
        Ensemble { branches }
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn into_branches(self) -> Vec<Branch> {
        self.branches
    }

    pub fn total_weight(&self) -> f64 {
        self.branches.iter().map(|b| b.weight).sum()
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    /// The only branch's state, if the ensemble is pure.
    pub fn as_pure(&self) -> Option<&PureState> {
        match self.branches.as_slice() {
            [b] => Some(&b.state),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    const AP: Subsystem = Subsystem::new(Photon::A, Dof::Pol);
    const BP: Subsystem = Subsystem::new(Photon::B, Dof::Pol);
    const AS: Subsystem = Subsystem::new(Photon::A, Dof::Spatial);
    const BS: Subsystem = Subsystem::new(Photon::B, Dof::Spatial);

    fn ket_ab(pa: u8, pb: u8) -> BasisKet {
        BasisKet::default().with(AP, pa).with(BP, pb)
    }

    fn bell_pol() -> PureState {
        PureState::superpose(PhotonSet::AB, [(c(1.0), ket_ab(H, H)), (c(1.0), ket_ab(V, V))])
            .unwrap()
    }

    #[test]
    fn ket_index_is_a_bijection() {
        for i in 0..BasisKet::COUNT {
            assert_eq!(BasisKet::from_index(i).unwrap().index(), i);
        }
        assert!(BasisKet::from_index(4096).is_none());
        // photon A polarization is the most significant bit
        assert_eq!(BasisKet::default().with(AP, V).index(), 2048);
        let k = BasisKet::default().with_photon(Photon::D, V, M2, W2);
        assert_eq!(k.index(), 0b111);
    }

    #[test]
    fn superpose_normalizes() {
        let s = bell_pol();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(s.amplitude(ket_ab(H, H)).re, r, epsilon = 1e-15);
        assert_abs_diff_eq!(s.amplitude(ket_ab(V, V)).re, r, epsilon = 1e-15);
    }

    #[test]
    fn superpose_keeps_unit_norm_input() {
        let s = PureState::superpose(PhotonSet::AB, [(c(0.6), ket_ab(H, H)), (c(0.8), ket_ab(V, V))])
            .unwrap();
        assert_abs_diff_eq!(s.amplitude(ket_ab(H, H)).re, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(s.amplitude(ket_ab(V, V)).re, 0.8, epsilon = 1e-15);
    }

    #[test]
    fn superpose_cancellation_is_degenerate() {
        let k = ket_ab(H, V);
        let err = PureState::superpose(PhotonSet::AB, [(c(1.0), k), (c(-1.0), k)]).unwrap_err();
        assert_eq!(err, Error::DegenerateState);
        assert_eq!(
            PureState::superpose(PhotonSet::AB, std::iter::empty()).unwrap_err(),
            Error::DegenerateState
        );
    }

    #[test]
    fn superpose_rejects_uncarried_photons() {
        let k = BasisKet::default().with(Subsystem::new(Photon::C, Dof::Pol), V);
        assert!(matches!(
            PureState::superpose(PhotonSet::AB, [(c(1.0), k)]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fidelity_examples() {
        let s = bell_pol();
        assert_abs_diff_eq!(fidelity(&s, &s).unwrap(), 1.0, epsilon = 1e-12);
        let a = PureState::basis(PhotonSet::AB, ket_ab(H, H)).unwrap();
        let b = PureState::basis(PhotonSet::AB, ket_ab(V, V)).unwrap();
        assert_eq!(fidelity(&a, &b).unwrap(), 0.0);
        // |(0.6 + 0.8)/√2|² = 1.96 / 2
        let partial =
            PureState::superpose(PhotonSet::AB, [(c(0.6), ket_ab(H, H)), (c(0.8), ket_ab(V, V))])
                .unwrap();
        assert_abs_diff_eq!(fidelity(&partial, &s).unwrap(), 0.98, epsilon = 1e-12);
    }

    #[test]
    fn fidelity_needs_matching_photon_sets() {
        let a = PureState::basis(PhotonSet::AB, BasisKet::default()).unwrap();
        let b = PureState::basis(PhotonSet::ALL, BasisKet::default()).unwrap();
        assert!(matches!(fidelity(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn reduced_density_examples() {
        let rho = bell_pol().reduced_density(&[AP]).unwrap();
        assert_abs_diff_eq!(rho.matrix()[(0, 0)].re, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rho.matrix()[(1, 1)].re, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rho.matrix()[(0, 1)].norm(), 0.0, epsilon = 1e-12);

        let prod = PureState::basis(PhotonSet::AB, ket_ab(H, H)).unwrap();
        let rho = prod.reduced_density(&[AP]).unwrap();
        assert_abs_diff_eq!(rho.matrix()[(0, 0)].re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rho.matrix()[(1, 1)].re, 0.0, epsilon = 1e-12);

        let sp = spatial_partial(0.6, 0.8);
        let rho = sp.reduced_density(&[AS]).unwrap();
        assert_abs_diff_eq!(rho.matrix()[(0, 0)].re, 0.36, epsilon = 1e-12);
        assert_abs_diff_eq!(rho.matrix()[(1, 1)].re, 0.64, epsilon = 1e-12);
        assert!(rho.is_hermitian(1e-12));
        assert_abs_diff_eq!(rho.trace().re, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn reduced_density_rejects_empty_keep() {
        assert!(matches!(bell_pol().reduced_density(&[]), Err(Error::Shape(_))));
    }

    fn spatial_partial(g: f64, d: f64) -> PureState {
        let k11 = BasisKet::default().with(AS, M1).with(BS, M1);
        let k22 = BasisKet::default().with(AS, M2).with(BS, M2);
        PureState::superpose(PhotonSet::AB, [(c(g), k11), (c(d), k22)]).unwrap()
    }

    #[test]
    fn entropy_examples() {
        let split = Bipartition::new(PhotonSet::AB, &[AP]).unwrap();
        assert_abs_diff_eq!(entanglement_entropy(&bell_pol(), &split).unwrap(), 1.0, epsilon = 1e-12);
        let prod = PureState::basis(PhotonSet::AB, ket_ab(H, V)).unwrap();
        assert_abs_diff_eq!(entanglement_entropy(&prod, &split).unwrap(), 0.0, epsilon = 1e-12);
        // binary entropy of 0.36, evaluated independently
        let h = -(0.36f64 * 0.36f64.log2() + 0.64 * 0.64f64.log2());
        let split = Bipartition::new(PhotonSet::AB, &[AS]).unwrap();
        let e = entanglement_entropy(&spatial_partial(0.6, 0.8), &split).unwrap();
        assert_abs_diff_eq!(e, h, epsilon = 1e-12);
        assert_abs_diff_eq!(e, 0.942_683_189_255_4, epsilon = 1e-12);
    }

    #[test]
    fn bipartition_validation() {
        assert!(Bipartition::new(PhotonSet::AB, &[]).is_err());
        assert!(Bipartition::new(PhotonSet::AB, &[Subsystem::new(Photon::C, Dof::Pol)]).is_err());
        assert!(Bipartition::new(PhotonSet::AB, &[AP, AP]).is_err());
        let all = Subsystem::all_of(PhotonSet::AB);
        assert!(Bipartition::new(PhotonSet::AB, &all).is_err());
    }

    #[test]
    fn mix_examples() {
        let e = Ensemble::mix(vec![(1.0, bell_pol())]).unwrap();
        assert_eq!(e.len(), 1);
        assert!(e.branches()[0].record.is_empty());
        let states: Vec<_> = (0..4).map(|_| bell_pol()).collect();
        let w = [0.7, 0.1, 0.1, 0.1];
        let e = Ensemble::mix(w.iter().copied().zip(states).collect()).unwrap();
        let got: Vec<f64> = e.branches().iter().map(|b| b.weight).collect();
        assert_eq!(got, w);
        assert!(matches!(
            Ensemble::mix(vec![(0.5, bell_pol()), (0.6, bell_pol())]),
            Err(Error::Normalization(_))
        ));
        assert!(matches!(
            Ensemble::mix(vec![(1.0, bell_pol()), (0.0, bell_pol())]),
            Err(Error::Normalization(_))
        ));
    }

    #[test]
    fn factor_out_requires_product_configuration() {
        let s = bell_pol();
        assert!(matches!(
            s.factor_out(PhotonSet::of(&[Photon::B])),
            Err(Error::Precondition(_))
        ));
        let prod = PureState::basis(PhotonSet::AB, ket_ab(H, V)).unwrap();
        let (rest, removed) = prod.factor_out(PhotonSet::of(&[Photon::B])).unwrap();
        assert_eq!(rest.photons(), PhotonSet::of(&[Photon::A]));
        assert_eq!(removed.get(BP), V);
    }

    #[test]
    fn display_is_sorted_with_fifteen_digits() {
        let text = bell_pol().to_string();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("0000 |H,a1,ω1; H,b1,ω1⟩"));
        assert!(lines[0].ends_with("(0.707106781186547,0)"), "{}", lines[0]);
        assert!(lines[1].starts_with("2304 |V,a1,ω1; V,b1,ω1⟩"));
    }

    fn arb_state() -> impl Strategy<Value = PureState> {
        proptest::collection::vec(((-1.0..1.0f64, -1.0..1.0f64), 0usize..64), 1..8)
            .prop_filter_map("nonzero", |terms| {
                // spread 6 random bits over A and B
                let kets = terms.into_iter().map(|((re, im), bits)| {
                    let mut k = BasisKet::default();
                    for (i, s) in Subsystem::all_of(PhotonSet::AB).into_iter().enumerate() {
                        k = k.with(s, ((bits >> i) & 1) as u8);
                    }
                    (Complex64::new(re, im), k)
                });
                PureState::superpose(PhotonSet::AB, kets).ok()
            })
    }

    proptest! {
        #[test]
        fn states_are_normalized(s in arb_state()) {
            prop_assert!((s.norm_sqr() - 1.0).abs() < NORM_TOL);
            prop_assert!(s.iter().all(|(_, a)| a.norm() >= PRUNE_EPS));
        }

        #[test]
        fn fidelity_symmetric_and_phase_invariant(s in arb_state(), t in arb_state(), phi in 0.0..std::f64::consts::TAU) {
            let f1 = fidelity(&s, &t).unwrap();
            let f2 = fidelity(&t, &s).unwrap();
            prop_assert!((f1 - f2).abs() < PROB_TOL);
            let sp = s.scaled(Complex64::from_polar(1.0, phi)).unwrap();
            prop_assert!((fidelity(&sp, &t).unwrap() - f1).abs() < PROB_TOL);
            prop_assert!((0.0..=1.0).contains(&f1));
        }

        #[test]
        fn entropy_symmetric_across_bipartition(s in arb_state(), mask in 1u8..63) {
            let all = Subsystem::all_of(PhotonSet::AB);
            let left: Vec<_> = all.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, s)| *s).collect();
            let split = Bipartition::new(PhotonSet::AB, &left).unwrap();
            let l = entanglement_entropy(&s, &split).unwrap();
            let r = entanglement_entropy(&s, &split.swapped()).unwrap();
            prop_assert!((l - r).abs() < 1e-10);
            prop_assert!(l >= -1e-12 && l <= left.len().min(6 - left.len()) as f64 + 1e-10);
        }

        #[test]
        fn maximally_entangled_single_dof_reduces_to_identity_half(phi in 0.0..std::f64::consts::TAU, dof in 0usize..3) {
            let d = Dof::ALL[dof];
            let sa = Subsystem::new(Photon::A, d);
            let sb = Subsystem::new(Photon::B, d);
            let k0 = BasisKet::default();
            let k1 = k0.with(sa, 1).with(sb, 1);
            let s = PureState::superpose(PhotonSet::AB, [(c(1.0), k0), (Complex64::from_polar(1.0, phi), k1)]).unwrap();
            let rho = s.reduced_density(&[sa]).unwrap();
            prop_assert!((rho.matrix()[(0, 0)].re - 0.5).abs() < 1e-12);
            prop_assert!((rho.matrix()[(1, 1)].re - 0.5).abs() < 1e-12);
            prop_assert!(rho.matrix()[(0, 1)].norm() < 1e-12);
        }
    }
}
