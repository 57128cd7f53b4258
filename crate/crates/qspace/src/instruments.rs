//! POVMs, quantum instruments and the constructions relating them: associated
//! POVMs, Lüders instruments, minimal-output Kraus-rank-1 dilations,
//! projective groupings, outcome no-signaling factorization, and
//! post-processing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex;
use num_traits::Zero;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::f2::F2Vector;
use crate::linalg::{
    column_space, hermitian_eig, partial_trace, polar_partial_isometry, sqrt_psd, unitary_relating,
    CMatrix, LinalgError, Real, RANK_THRESHOLD,
};

/// Tolerance for operator identities.
pub const OP_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstrumentError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("elements do not sum to the identity (deviation {0:e})")]
    Incomplete(f64),
    #[error("outcome {0} is not projective (deviation {1:e})")]
    NotProjective(OutcomeLabel, f64),
    #[error("outcome {0} does not have Kraus rank 1")]
    NotRankOne(OutcomeLabel),
    #[error("outcome {0} has rank {1}, above the output dimension {2}")]
    RankTooLarge(OutcomeLabel, usize, usize),
    #[error("associated POVM does not factorize over subsystem {0}")]
    NotFactorizable(usize),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
}

/// A classical outcome: a binary string, possibly empty. Ordering is
/// lexicographic with prefixes first.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct OutcomeLabel(Vec<bool>);

impl OutcomeLabel {
    pub fn new(bits: Vec<bool>) -> Self {
        OutcomeLabel(bits)
    }

    pub fn empty() -> Self {
        OutcomeLabel(Vec::new())
    }

    /// Big-endian encoding of `index` with `len` bits.
    pub fn from_index(index: usize, len: usize) -> Self {
        OutcomeLabel((0..len).map(|i| (index >> (len - 1 - i)) & 1 == 1).collect())
    }

    pub fn to_index(&self) -> usize {
        self.0.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn concat(&self, other: &OutcomeLabel) -> OutcomeLabel {
        let mut bits = self.0.clone();
        bits.extend_from_slice(&other.0);
        OutcomeLabel(bits)
    }

    pub fn push(&mut self, bit: bool) {
        self.0.push(bit);
    }

    pub fn prefix(&self, n: usize) -> OutcomeLabel {
        OutcomeLabel(self.0[..n].to_vec())
    }

    pub fn suffix_from(&self, n: usize) -> OutcomeLabel {
        OutcomeLabel(self.0[n..].to_vec())
    }

    pub fn to_f2(&self) -> F2Vector {
        F2Vector::from_bools(&self.0)
    }
}

impl From<F2Vector> for OutcomeLabel {
    fn from(v: F2Vector) -> Self {
        OutcomeLabel(v.iter().collect())
    }
}

impl fmt::Display for OutcomeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("ε");
        }
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for OutcomeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "\"{self}\"")
    }
}

impl FromStr for OutcomeLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "ε" {
            return Ok(OutcomeLabel::empty());
        }
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(format!("invalid outcome bit {other:?}")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(OutcomeLabel)
    }
}

impl Serialize for OutcomeLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let s: String = self.0.iter().map(|&b| if b { '1' } else { '0' }).collect();
        serializer.serialize_str(&s)
    }
}

impl<'de> Deserialize<'de> for OutcomeLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A POVM element, held densely or as a factor `F` with `E = F†F`.
#[derive(Clone)]
pub enum Effect<T> {
    Dense(CMatrix<T>),
    Gram(CMatrix<T>),
}

impl<T: Real> fmt::Debug for Effect<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Effect::Dense(m) => write!(f, "Dense({m:?})"),
            Effect::Gram(m) => write!(f, "Gram({m:?})"),
        }
    }
}

impl<T: Real> Effect<T> {
    pub fn dim(&self) -> usize {
        match self {
            Effect::Dense(m) => m.rows(),
            Effect::Gram(f) => f.cols(),
        }
    }

    pub fn dense(&self) -> CMatrix<T> {
        match self {
            Effect::Dense(m) => m.clone(),
            Effect::Gram(f) => f.adjoint_mul(f),
        }
    }

    pub fn trace(&self) -> T {
        match self {
            Effect::Dense(m) => m.trace().re,
            Effect::Gram(f) => f.frobenius_norm().powi(2),
        }
    }

    /// Rows `s_i = √λ_i v_i†` over the support of the element, so that
    /// `S†S = E`. Rows are mutually orthogonal.
    pub fn spectral_rows(&self) -> Result<CMatrix<T>, InstrumentError> {
        match self {
            Effect::Dense(m) => {
                let eig = hermitian_eig(m, T::lit(OP_TOL))?;
                check_psd(&eig.eigenvalues)?;
                let support = eig.support();
                let mut rows = eig.vectors.select_cols(&support).adjoint();
                for (r, &i) in support.iter().enumerate() {
                    let s = eig.eigenvalues[i].sqrt();
                    for c in 0..rows.cols() {
                        rows[(r, c)] *= s;
                    }
                }
                Ok(rows)
            }
            Effect::Gram(f) => {
                if f.rows() == 0 {
                    return Ok(CMatrix::zeros(0, f.cols()));
                }
                let g = f.mul_adjoint(f);
                if g.max_diff(&CMatrix::identity(g.rows())) <= T::lit(1e-12) {
                    return Ok(f.clone());
                }
                let eig = hermitian_eig(&g, T::lit(OP_TOL))?;
                let support = eig.support();
                Ok(eig.vectors.select_cols(&support).adjoint().matmul(f))
            }
        }
    }

    pub fn rank(&self) -> Result<usize, InstrumentError> {
        Ok(self.spectral_rows()?.rows())
    }

    pub fn sqrt(&self) -> Result<CMatrix<T>, InstrumentError> {
        match self {
            Effect::Dense(m) => Ok(sqrt_psd(m)?),
            Effect::Gram(_) => {
                let s = self.spectral_rows()?;
                let mut scaled = s.clone();
                for r in 0..s.rows() {
                    let lam = s.row(r).iter().map(|z| z.norm_sqr()).sum::<T>();
                    let inv = T::one() / lam.sqrt();
                    for c in 0..s.cols() {
                        scaled[(r, c)] *= inv;
                    }
                }
                Ok(scaled.adjoint_mul(&s))
            }
        }
    }

    /// `‖E² − E‖_max`, evaluated on the smaller side for Gram factors.
    pub fn projector_deviation(&self) -> T {
        match self {
            Effect::Dense(m) => m.matmul(m).max_diff(m),
            Effect::Gram(f) => {
                let g = f.mul_adjoint(f);
                g.matmul(&g).max_diff(&g)
            }
        }
    }

    /// `Tr[self · other]` for Hermitian elements.
    pub fn overlap(&self, other: &Effect<T>) -> T {
        match (self, other) {
            (Effect::Gram(a), Effect::Gram(b)) => a.mul_adjoint(b).frobenius_norm().powi(2),
            _ => {
                let (a, b) = (self.dense(), other.dense());
                a.data().iter().zip(b.data()).map(|(x, y)| (x * y.conj()).re).sum()
            }
        }
    }
}

fn check_psd<T: Real>(eigenvalues: &[T]) -> Result<(), InstrumentError> {
    let lmax = eigenvalues.iter().map(|l| l.abs()).fold(T::zero(), T::max);
    match eigenvalues.first() {
        Some(&l) if l < -T::lit(RANK_THRESHOLD) * lmax => {
            Err(LinalgError::NotPsd(l.to_f64().unwrap_or(f64::NAN)).into())
        }
        _ => Ok(()),
    }
}

/// Outcome-labelled positive operators summing to the identity.
#[derive(Clone, Debug)]
pub struct Povm<T: Real> {
    pub dim: usize,
    pub elements: BTreeMap<OutcomeLabel, Effect<T>>,
    /// Zero elements added only to reach a required outcome count.
    pub padded: BTreeSet<OutcomeLabel>,
}

impl<T: Real> Povm<T> {
    /// Validated construction: shapes, Hermiticity and completeness.
    pub fn new(dim: usize, elements: BTreeMap<OutcomeLabel, Effect<T>>) -> Result<Self, InstrumentError> {
        let p = Povm { dim, elements, padded: BTreeSet::new() };
        for (k, e) in &p.elements {
            if e.dim() != dim {
                return Err(InstrumentError::Dimension(format!("element {k} has dim {}", e.dim())));
            }
            if let Effect::Dense(m) = e {
                if !m.is_square() || m.hermitian_deviation() > T::lit(OP_TOL) {
                    return Err(InstrumentError::Hypothesis(format!("element {k} is not Hermitian")));
                }
            }
        }
        let dev = p.completeness_deviation();
        if dev > T::lit(OP_TOL) {
            return Err(InstrumentError::Incomplete(dev.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(p)
    }

    pub fn from_dense(dim: usize, elements: BTreeMap<OutcomeLabel, CMatrix<T>>) -> Result<Self, InstrumentError> {
        Self::new(dim, elements.into_iter().map(|(k, m)| (k, Effect::Dense(m))).collect())
    }

    /// Construction without validation, for callers that hold the invariants
    /// by construction.
    pub fn from_parts(dim: usize, elements: BTreeMap<OutcomeLabel, Effect<T>>) -> Self {
        Povm { dim, elements, padded: BTreeSet::new() }
    }

    pub fn completeness_deviation(&self) -> T {
        let mut sum = CMatrix::zeros(self.dim, self.dim);
        for e in self.elements.values() {
            sum += &e.dense();
        }
        sum.max_diff(&CMatrix::identity(self.dim))
    }

    pub fn labels(&self) -> impl Iterator<Item = &OutcomeLabel> {
        self.elements.keys()
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn dense(&self, k: &OutcomeLabel) -> Option<CMatrix<T>> {
        self.elements.get(k).map(Effect::dense)
    }

    /// Errors with the first non-projective element.
    pub fn check_projective(&self) -> Result<(), InstrumentError> {
        for (k, e) in &self.elements {
            let dev = e.projector_deviation();
            if dev > T::lit(OP_TOL) {
                return Err(InstrumentError::NotProjective(k.clone(), dev.to_f64().unwrap_or(f64::NAN)));
            }
        }
        Ok(())
    }

    pub fn is_projective(&self) -> bool {
        self.check_projective().is_ok()
    }

    pub fn max_rank(&self) -> Result<usize, InstrumentError> {
        let mut r = 0;
        for e in self.elements.values() {
            r = r.max(e.rank()?);
        }
        Ok(r)
    }

    /// Largest entrywise deviation from another POVM with the same labels.
    pub fn max_deviation(&self, other: &Povm<T>) -> T {
        let labels: BTreeSet<_> = self.labels().chain(other.labels()).collect();
        let zero = CMatrix::zeros(self.dim, self.dim);
        labels
            .into_iter()
            .map(|k| {
                let a = self.dense(k).unwrap_or_else(|| zero.clone());
                let b = other.dense(k).unwrap_or_else(|| zero.clone());
                a.max_diff(&b)
            })
            .fold(T::zero(), T::max)
    }
}

/// Outcome-labelled CP maps given by Kraus lists.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct Instrument<T: Real> {
    pub dim_in: usize,
    pub dim_out: usize,
    pub branches: BTreeMap<OutcomeLabel, Vec<CMatrix<T>>>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub padded: BTreeSet<OutcomeLabel>,
}

impl<T: Real> Instrument<T> {
    /// Validated construction: Kraus shapes and completeness.
    pub fn new(
        dim_in: usize,
        dim_out: usize,
        branches: BTreeMap<OutcomeLabel, Vec<CMatrix<T>>>,
    ) -> Result<Self, InstrumentError> {
        let inst = Self::from_parts(dim_in, dim_out, branches);
        inst.check_shapes()?;
        let dev = inst.completeness_deviation();
        if dev > T::lit(OP_TOL) {
            return Err(InstrumentError::Incomplete(dev.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(inst)
    }

    pub fn from_parts(dim_in: usize, dim_out: usize, branches: BTreeMap<OutcomeLabel, Vec<CMatrix<T>>>) -> Self {
        Instrument { dim_in, dim_out, branches, padded: BTreeSet::new() }
    }

    /// One Kraus operator per outcome.
    pub fn rank_one(dim_in: usize, dim_out: usize, kraus: BTreeMap<OutcomeLabel, CMatrix<T>>) -> Result<Self, InstrumentError> {
        Self::new(dim_in, dim_out, kraus.into_iter().map(|(k, m)| (k, vec![m])).collect())
    }

    pub fn check_shapes(&self) -> Result<(), InstrumentError> {
        for (k, list) in &self.branches {
            for m in list {
                if m.shape() != (self.dim_out, self.dim_in) {
                    return Err(InstrumentError::Dimension(format!(
                        "outcome {k}: Kraus {:?}, expected {:?}",
                        m.shape(),
                        (self.dim_out, self.dim_in)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn completeness_deviation(&self) -> T {
        let mut sum = CMatrix::zeros(self.dim_in, self.dim_in);
        for list in self.branches.values() {
            for k in list {
                sum += &k.adjoint_mul(k);
            }
        }
        sum.max_diff(&CMatrix::identity(self.dim_in))
    }

    pub fn labels(&self) -> impl Iterator<Item = &OutcomeLabel> {
        self.branches.keys()
    }

    pub fn is_rank_one(&self) -> bool {
        self.branches.values().all(|l| l.len() == 1)
    }

    /// The single Kraus operator of a rank-1 branch.
    pub fn kraus(&self, k: &OutcomeLabel) -> Result<&CMatrix<T>, InstrumentError> {
        match self.branches.get(k).map(Vec::as_slice) {
            Some([m]) => Ok(m),
            _ => Err(InstrumentError::NotRankOne(k.clone())),
        }
    }

    fn require_rank_one(&self) -> Result<(), InstrumentError> {
        match self.branches.iter().find(|(_, l)| l.len() != 1) {
            Some((k, _)) => Err(InstrumentError::NotRankOne(k.clone())),
            None => Ok(()),
        }
    }

    /// Drops Kraus operators with Frobenius norm at most `tol` and branches
    /// left empty.
    pub fn pruned(&self, tol: T) -> Self {
        let branches: BTreeMap<_, _> = self
            .branches
            .iter()
            .filter_map(|(k, list)| {
                let kept: Vec<_> = list.iter().filter(|m| m.frobenius_norm() > tol).cloned().collect();
                (!kept.is_empty()).then(|| (k.clone(), kept))
            })
            .collect();
        let padded = self.padded.iter().filter(|k| branches.contains_key(*k)).cloned().collect();
        Instrument { dim_in: self.dim_in, dim_out: self.dim_out, branches, padded }
    }

    pub fn map_scalar<U: Real>(&self, f: impl Fn(T) -> U + Copy) -> Instrument<U> {
        Instrument {
            dim_in: self.dim_in,
            dim_out: self.dim_out,
            branches: self
                .branches
                .iter()
                .map(|(k, l)| (k.clone(), l.iter().map(|m| m.map_scalar(f)).collect()))
                .collect(),
            padded: self.padded.clone(),
        }
    }
}

/// A 0/1 column-stochastic matrix: each fine outcome belongs to exactly one
/// coarse outcome.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingMatrix {
    pub coarse: BTreeSet<OutcomeLabel>,
    pub assign: BTreeMap<OutcomeLabel, OutcomeLabel>,
}

impl GroupingMatrix {
    pub fn new(
        coarse: BTreeSet<OutcomeLabel>,
        assign: BTreeMap<OutcomeLabel, OutcomeLabel>,
    ) -> Result<Self, InstrumentError> {
        if let Some((f, c)) = assign.iter().find(|(_, c)| !coarse.contains(*c)) {
            return Err(InstrumentError::Hypothesis(format!("fine outcome {f} assigned to unknown {c}")));
        }
        Ok(GroupingMatrix { coarse, assign })
    }

    pub fn identity<'a>(labels: impl IntoIterator<Item = &'a OutcomeLabel>) -> Self {
        let assign: BTreeMap<_, _> = labels.into_iter().map(|k| (k.clone(), k.clone())).collect();
        GroupingMatrix { coarse: assign.keys().cloned().collect(), assign }
    }

    /// ν_{coarse, fine} ∈ {0, 1}.
    pub fn entry(&self, coarse: &OutcomeLabel, fine: &OutcomeLabel) -> u8 {
        (self.assign.get(fine) == Some(coarse)) as u8
    }

    /// Fine outcomes grouped under `coarse`, ascending.
    pub fn block(&self, coarse: &OutcomeLabel) -> Vec<OutcomeLabel> {
        self.assign.iter().filter(|(_, c)| *c == coarse).map(|(f, _)| f.clone()).collect()
    }

    pub fn coarse_of(&self, fine: &OutcomeLabel) -> Option<&OutcomeLabel> {
        self.assign.get(fine)
    }
}

/// E_k = Σ_i K_{k,i}† K_{k,i}, kept in factored form.
pub fn associated_povm<T: Real>(inst: &Instrument<T>) -> Povm<T> {
    let elements = inst
        .branches
        .iter()
        .map(|(k, list)| {
            let refs: Vec<&CMatrix<T>> = list.iter().collect();
            let f = if refs.is_empty() {
                CMatrix::zeros(0, inst.dim_in)
            } else {
                CMatrix::vstack(&refs).expect("Kraus operators share a shape")
            };
            (k.clone(), Effect::Gram(f))
        })
        .collect();
    Povm { dim: inst.dim_in, elements, padded: inst.padded.clone() }
}

/// Lüders instrument: one Kraus √E_k per outcome.
pub fn luders<T: Real>(e: &Povm<T>) -> Result<Instrument<T>, InstrumentError> {
    let mut branches = BTreeMap::new();
    for (k, el) in &e.elements {
        branches.insert(k.clone(), vec![el.sqrt()?]);
    }
    Ok(Instrument { dim_in: e.dim, dim_out: e.dim, branches, padded: e.padded.clone() })
}

/// Kraus-rank-1 instrument with Kraus `L_k = J_k √E_k` and the smallest
/// output dimension, `max_k rank E_k`, optionally rounded up to a power of
/// two.
pub fn rank1_min_output<T: Real>(e: &Povm<T>, qubit_shaped: bool) -> Result<Instrument<T>, InstrumentError> {
    let mut r = e.max_rank()?.max(1);
    if qubit_shaped {
        r = r.next_power_of_two();
    }
    rank1_with_output_dim(e, r)
}

/// As [`rank1_min_output`] with an explicit output dimension.
pub fn rank1_with_output_dim<T: Real>(e: &Povm<T>, dim_out: usize) -> Result<Instrument<T>, InstrumentError> {
    let mut branches = BTreeMap::new();
    for (k, el) in &e.elements {
        let s = el.spectral_rows()?;
        if s.rows() > dim_out {
            return Err(InstrumentError::RankTooLarge(k.clone(), s.rows(), dim_out));
        }
        let mut l = CMatrix::zeros(dim_out, e.dim);
        for r in 0..s.rows() {
            for c in 0..e.dim {
                l[(r, c)] = s[(r, c)];
            }
        }
        branches.insert(k.clone(), vec![l]);
    }
    Ok(Instrument { dim_in: e.dim, dim_out, branches, padded: e.padded.clone() })
}

/// The grouping ν with `coarse_k = Σ_{l ∈ B_k} fine_l`, if one exists. Both
/// POVMs must be projective. Zero fine elements join the first coarse outcome.
pub fn projective_grouping<T: Real>(
    coarse: &Povm<T>,
    fine: &Povm<T>,
) -> Result<Option<GroupingMatrix>, InstrumentError> {
    if coarse.dim != fine.dim {
        return Err(InstrumentError::Dimension(format!("{} vs {}", coarse.dim, fine.dim)));
    }
    coarse.check_projective()?;
    fine.check_projective()?;
    let tol = T::lit(OP_TOL);
    let Some(first) = coarse.labels().next().cloned() else {
        return Ok(fine.is_empty().then(|| GroupingMatrix { coarse: BTreeSet::new(), assign: BTreeMap::new() }));
    };
    let mut assign = BTreeMap::new();
    for (l, fl) in &fine.elements {
        let tr = fl.trace();
        if tr <= tol {
            assign.insert(l.clone(), first.clone());
            continue;
        }
        let best = coarse
            .elements
            .iter()
            .map(|(k, ck)| (k, ck.overlap(fl)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        match best {
            Some((k, ov)) if (ov - tr).abs() <= tol * T::one().max(tr) => {
                assign.insert(l.clone(), k.clone());
            }
            _ => return Ok(None),
        }
    }
    let grouping = GroupingMatrix { coarse: coarse.labels().cloned().collect(), assign };
    for (k, ck) in &coarse.elements {
        let mut sum = CMatrix::zeros(coarse.dim, coarse.dim);
        for l in grouping.block(k) {
            sum += &fine.elements[&l].dense();
        }
        if sum.max_diff(&ck.dense()) > tol {
            return Ok(None);
        }
    }
    Ok(Some(grouping))
}

/// Index bookkeeping for one tensor factor `b` of a multipartite space.
struct FactorSplit {
    d_b: usize,
    /// For each flat index: (index on the complement, digit on factor b).
    split: Vec<(usize, usize)>,
}

impl FactorSplit {
    fn new(dims: &[usize], b: usize) -> Self {
        let total: usize = dims.iter().product();
        let split = (0..total)
            .map(|idx| {
                let mut rem = idx;
                let mut digits = vec![0; dims.len()];
                for (i, &d) in dims.iter().enumerate().rev() {
                    digits[i] = rem % d;
                    rem /= d;
                }
                let rest = (0..dims.len()).filter(|&i| i != b).fold(0, |acc, i| acc * dims[i] + digits[i]);
                (rest, digits[b])
            })
            .collect();
        FactorSplit { d_b: dims[b], split }
    }
}

/// Recovers `F_k = Tr_B(E_k)/d_B` when every `E_k = F_k ⊗ I_B` (with B at
/// position `factor_index`) within [`OP_TOL`]; `None` otherwise.
pub fn check_factorization<T: Real>(
    e: &Povm<T>,
    dims: &[usize],
    factor_index: usize,
) -> Result<Option<Povm<T>>, InstrumentError> {
    if dims.iter().product::<usize>() != e.dim || factor_index >= dims.len() {
        return Err(InstrumentError::Dimension(format!(
            "dims {dims:?} with factor {factor_index} for dimension {}",
            e.dim
        )));
    }
    let fs = FactorSplit::new(dims, factor_index);
    let keep: Vec<usize> = (0..dims.len()).filter(|&i| i != factor_index).collect();
    let inv_db = T::one() / T::from_usize(fs.d_b).expect("dimension fits");
    let mut out = BTreeMap::new();
    for (k, el) in &e.elements {
        let full = el.dense();
        let f = partial_trace(&full, dims, &keep)?.scale_real(inv_db);
        for (a, &(ra, ba)) in fs.split.iter().enumerate() {
            for (c, &(rc, bc)) in fs.split.iter().enumerate() {
                let expect = if ba == bc { f[(ra, rc)] } else { Complex::zero() };
                if (full[(a, c)] - expect).norm() > T::lit(OP_TOL) {
                    return Ok(None);
                }
            }
        }
        let reduced = match el {
            Effect::Dense(_) => Effect::Dense(f),
            Effect::Gram(g) => Effect::Gram(reduce_gram_factor(g, &fs, inv_db.sqrt())),
        };
        out.insert(k.clone(), reduced);
    }
    Ok(Some(Povm { dim: e.dim / fs.d_b, elements: out, padded: e.padded.clone() }))
}

/// Stacks the column blocks of `g` for each value of factor B, scaled, so the
/// Gram matrix of the result is `Tr_B(g†g) · scale²`.
fn reduce_gram_factor<T: Real>(g: &CMatrix<T>, fs: &FactorSplit, scale: T) -> CMatrix<T> {
    let d_rest = fs.split.len() / fs.d_b;
    let mut out = CMatrix::zeros(g.rows() * fs.d_b, d_rest);
    for (idx, &(rest, beta)) in fs.split.iter().enumerate() {
        for r in 0..g.rows() {
            out[(beta * g.rows() + r, rest)] = g[(r, idx)] * scale;
        }
    }
    out
}

/// Conditional instruments Θ_{·|l} with `Σ_l Θ_{k|l} ∘ Γ_l = Λ_k`.
///
/// The target must have Kraus rank 1 with a projective associated POVM; the
/// projective measurement of the construction is the target's own POVM, so
/// `X_{k|l} = P_k` for `k ∈ B_l` and `K_{k|l} = W_k P_k V_l† = A_k V_l†`.
/// Where Ran(L_l) is not the whole space, the remainder is routed to a padded
/// zero-probability outcome labelled by `len + 1` one-bits.
pub fn compose_postprocessing<T: Real>(
    target: &Instrument<T>,
    first: &Instrument<T>,
    nu: &GroupingMatrix,
) -> Result<BTreeMap<OutcomeLabel, Instrument<T>>, InstrumentError> {
    target.require_rank_one()?;
    first.require_rank_one()?;
    if target.dim_in != first.dim_in {
        return Err(InstrumentError::Dimension(format!(
            "target input {} vs first input {}",
            target.dim_in, first.dim_in
        )));
    }
    let tol = T::lit(OP_TOL);
    for (k, list) in &target.branches {
        let a = &list[0];
        let g = a.mul_adjoint(a);
        let dev = g.matmul(&g).max_diff(&g);
        if dev > tol {
            return Err(InstrumentError::NotProjective(k.clone(), dev.to_f64().unwrap_or(f64::NAN)));
        }
    }
    for k in target.labels() {
        if nu.coarse_of(k).is_none() {
            return Err(InstrumentError::Hypothesis(format!("target outcome {k} missing from grouping")));
        }
    }
    let pad_len = target.labels().map(OutcomeLabel::len).max().unwrap_or(0) + 1;
    let pad_label = OutcomeLabel::new(vec![true; pad_len]);
    let mut out = BTreeMap::new();
    for (l, list) in &first.branches {
        let ll = &list[0];
        let block = nu.block(l);
        let mut f_l = ll.adjoint_mul(ll);
        for k in &block {
            let a = target.kraus(k)?;
            f_l -= &a.adjoint_mul(a);
        }
        let dev = f_l.max_abs();
        if dev > tol {
            return Err(InstrumentError::Hypothesis(format!(
                "associated POVM of first outcome {l} differs from its grouped target elements by {:e}",
                dev.to_f64().unwrap_or(f64::NAN)
            )));
        }
        let v = polar_partial_isometry(ll)?;
        let mut branches = BTreeMap::new();
        for k in &block {
            branches.insert(k.clone(), vec![target.kraus(k)?.mul_adjoint(&v)]);
        }
        let mid = first.dim_out;
        let complement = &CMatrix::identity(mid) - &v.mul_adjoint(&v);
        let mut padded = BTreeSet::new();
        if complement.max_abs() > tol {
            let basis = column_space(&complement);
            let kraus: Vec<CMatrix<T>> = (0..basis.cols())
                .map(|c| {
                    let mut r = CMatrix::zeros(target.dim_out, mid);
                    for i in 0..mid {
                        r[(0, i)] = basis[(i, c)].conj();
                    }
                    r
                })
                .collect();
            if !kraus.is_empty() {
                branches.insert(pad_label.clone(), kraus);
                padded.insert(pad_label.clone());
            }
        }
        out.insert(
            l.clone(),
            Instrument { dim_in: mid, dim_out: target.dim_out, branches, padded },
        );
    }
    Ok(out)
}

/// Splits a Kraus-rank-1 instrument whose associated POVM factorizes over
/// factor `factor_index` into `G` on the complement and unitaries `U_k` with
/// `K_k = U_k (L_k ⊗ I_B) P`, where `P` moves factor B to the last position.
#[allow(clippy::type_complexity)]
pub fn ons_decompose<T: Real>(
    gamma: &Instrument<T>,
    dims: &[usize],
    factor_index: usize,
) -> Result<(Instrument<T>, BTreeMap<OutcomeLabel, CMatrix<T>>), InstrumentError> {
    gamma.require_rank_one()?;
    let povm = associated_povm(gamma);
    let reduced = check_factorization(&povm, dims, factor_index)?
        .ok_or(InstrumentError::NotFactorizable(factor_index))?;
    let d_b = dims[factor_index];
    if !gamma.dim_out.is_multiple_of(d_b) {
        return Err(InstrumentError::Dimension(format!(
            "output dimension {} not divisible by {d_b}",
            gamma.dim_out
        )));
    }
    let g = rank1_with_output_dim(&reduced, gamma.dim_out / d_b)?;
    let fs = FactorSplit::new(dims, factor_index);
    let mut unitaries = BTreeMap::new();
    for (k, list) in &gamma.branches {
        let q = tensor_with_identity(g.kraus(k)?, &fs);
        let u = unitary_relating(&q, &list[0])?;
        let dev = u.matmul(&q).max_diff(&list[0]);
        if dev > T::lit(OP_TOL) {
            return Err(InstrumentError::Hypothesis(format!(
                "outcome {k}: reconstruction residual {:e}",
                dev.to_f64().unwrap_or(f64::NAN)
            )));
        }
        unitaries.insert(k.clone(), u);
    }
    Ok((g, unitaries))
}

/// `(L ⊗ I_B) P` with P reordering the input so factor B is last.
fn tensor_with_identity<T: Real>(l: &CMatrix<T>, fs: &FactorSplit) -> CMatrix<T> {
    let d_b = fs.d_b;
    let mut q = CMatrix::zeros(l.rows() * d_b, fs.split.len());
    for (idx, &(rest, beta)) in fs.split.iter().enumerate() {
        for o in 0..l.rows() {
            q[(o * d_b + beta, idx)] = l[(o, rest)];
        }
    }
    q
}

/// Public form of the `(L ⊗ I_B) P` construction used by [`ons_decompose`].
pub fn embed_with_identity<T: Real>(l: &CMatrix<T>, dims: &[usize], factor_index: usize) -> CMatrix<T> {
    tensor_with_identity(l, &FactorSplit::new(dims, factor_index))
}

/// Per-outcome comparison of two instruments.
#[derive(Clone, Debug)]
pub struct Comparison<T: Real> {
    /// Max-norm Choi deviation per outcome present on both sides.
    pub per_outcome: BTreeMap<OutcomeLabel, T>,
    /// Structural mismatch (dimensions or outcome sets), if any.
    pub mismatch: Option<String>,
}

impl<T: Real> Comparison<T> {
    pub fn max_deviation(&self) -> T {
        self.per_outcome.values().copied().fold(T::zero(), T::max)
    }

    pub fn within(&self, tol: T) -> bool {
        self.mismatch.is_none() && self.max_deviation() <= tol
    }
}

/// Choi-matrix comparison per outcome after pruning branches whose Kraus
/// operators all have Frobenius norm at most `tol`.
pub fn compare_instruments<T: Real>(a: &Instrument<T>, b: &Instrument<T>, tol: T) -> Comparison<T> {
    let mut cmp = Comparison { per_outcome: BTreeMap::new(), mismatch: None };
    if (a.dim_in, a.dim_out) != (b.dim_in, b.dim_out) {
        cmp.mismatch = Some(format!(
            "dimensions {}->{} vs {}->{}",
            a.dim_in, a.dim_out, b.dim_in, b.dim_out
        ));
        return cmp;
    }
    let (pa, pb) = (a.pruned(tol), b.pruned(tol));
    let la: BTreeSet<_> = pa.labels().collect();
    let lb: BTreeSet<_> = pb.labels().collect();
    if la != lb {
        let only_a: Vec<_> = la.difference(&lb).map(|k| k.to_string()).collect();
        let only_b: Vec<_> = lb.difference(&la).map(|k| k.to_string()).collect();
        cmp.mismatch = Some(format!("outcomes only in first: {only_a:?}; only in second: {only_b:?}"));
    }
    for k in la.intersection(&lb) {
        cmp.per_outcome.insert((*k).clone(), choi_max_diff(&pa.branches[*k], &pb.branches[*k]));
    }
    cmp
}

/// `‖Σ|A_i⟩⟩⟨⟨A_i| − Σ|B_j⟩⟩⟨⟨B_j|‖_max`, entry by entry.
fn choi_max_diff<T: Real>(a: &[CMatrix<T>], b: &[CMatrix<T>]) -> T {
    let n = a.first().or(b.first()).map_or(0, |m| m.data().len());
    let mut worst = T::zero();
    for p in 0..n {
        for q in 0..n {
            let mut z = Complex::<T>::zero();
            for m in a {
                z += m.data()[p] * m.data()[q].conj();
            }
            for m in b {
                z -= m.data()[p] * m.data()[q].conj();
            }
            worst = worst.max(z.norm());
        }
    }
    worst
}

/// Per-outcome CP-map equality within `tol` (Kraus phases are free).
pub fn instruments_equal<T: Real>(a: &Instrument<T>, b: &Instrument<T>, tol: T) -> bool {
    compare_instruments(a, b, tol).within(tol)
}
