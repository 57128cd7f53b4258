//! Qubit-ordering search for the distillation instrument and the projective
//! measurement chain certifying it.
//!
//! An ordering `A_1..A_T` is feasible when, for every `t`, the span of the
//! check-matrix columns `x_τ, z_τ` over `τ = t..T` has dimension at most
//! `n - k - t`. The width `n - T*` for the largest feasible `T*` is optimal.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::f2::{self, F2Subspace, F2Vector};
use crate::instruments::{
    check_factorization, projective_grouping, Effect, GroupingMatrix, InstrumentError, OutcomeLabel, Povm,
};
use crate::stabilizer::{distillation_instrument, CheckMatrix, StabilizerCode, StabilizerError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Stabilizer(#[from] StabilizerError),
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error("ordering {0} is invalid: {1}")]
    BadOrdering(Ordering, String),
    #[error("span bound violated at t = {t}: dimension {dim} > {bound}")]
    SpanBound { t: usize, dim: usize, bound: usize },
}

/// Qubits `A_1..A_T` as 1-based physical indices.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Ordering {
    pub qubits: Vec<usize>,
}

impl Ordering {
    pub fn new(qubits: Vec<usize>) -> Self {
        Ordering { qubits }
    }

    pub fn len(&self) -> usize {
        self.qubits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qubits.is_empty()
    }

    /// 0-based index of `A_t` (t is 1-based).
    pub fn zero_based(&self, t: usize) -> usize {
        self.qubits[t - 1] - 1
    }

    fn validate(&self, n: usize) -> Result<(), SolverError> {
        let mut seen = vec![false; n + 1];
        for &q in &self.qubits {
            if q == 0 || q > n {
                return Err(SolverError::BadOrdering(self.clone(), format!("qubit {q} outside 1..={n}")));
            }
            if std::mem::replace(&mut seen[q], true) {
                return Err(SolverError::BadOrdering(self.clone(), format!("qubit {q} repeated")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.qubits.iter().map(|q| q.to_string()).collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// Outcome of a search at one value of T.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchOutcome {
    /// Lexicographically least feasible ordering on `(A_T, ..., A_1)`.
    pub ordering: Option<Ordering>,
    /// DFS nodes visited, including the root.
    pub nodes_visited: u64,
    /// Whether the whole pruned tree was explored.
    pub exhaustive: bool,
}

/// Result of [`max_delay`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaxDelay {
    pub t_star: usize,
    pub ordering: Ordering,
    /// Exhaustive infeasibility search at `T* + 1`, absent when `T* + 1`
    /// exceeds the trivial bound `n - k`.
    pub lower_bound: Option<SearchOutcome>,
}

impl MaxDelay {
    pub fn optimal_qubits(&self, code: &StabilizerCode) -> usize {
        code.n - self.t_star
    }
}

struct Search {
    cols: Vec<(F2Vector, F2Vector)>,
    nc: usize,
    nodes: u64,
    enumerate: bool,
    found: Vec<Ordering>,
}

impl Search {
    /// Fills positions `tau` down to 1; `chosen` holds `A_T..A_{tau+1}`.
    fn dfs(&mut self, tau: usize, span: &F2Subspace, chosen: &mut Vec<usize>) -> bool {
        self.nodes += 1;
        if tau == 0 {
            let mut q: Vec<usize> = chosen.iter().map(|&i| i + 1).collect();
            q.reverse();
            self.found.push(Ordering::new(q));
            return !self.enumerate;
        }
        let bound = self.nc - tau;
        for q in 0..self.cols.len() {
            if chosen.contains(&q) {
                continue;
            }
            let mut next = span.clone();
            let (x, z) = self.cols[q];
            next.insert(x).expect("column lengths agree");
            next.insert(z).expect("column lengths agree");
            if next.dim() > bound {
                continue;
            }
            chosen.push(q);
            let stop = self.dfs(tau - 1, &next, chosen);
            chosen.pop();
            if stop {
                return true;
            }
        }
        false
    }
}

fn columns(cm: &CheckMatrix) -> Vec<(F2Vector, F2Vector)> {
    (0..cm.n).map(|q| (cm.x_column(q), cm.z_column(q))).collect()
}

/// Depth-first search for an ordering of length `t`, trying qubits in
/// ascending order from `A_T` downward. With `enumerate`, all feasible
/// orderings are collected instead of stopping at the first.
pub fn search(code: &StabilizerCode, t: usize, enumerate: bool) -> (SearchOutcome, Vec<Ordering>) {
    let nc = code.n_checks();
    if t > nc || t > code.n {
        let out = SearchOutcome { ordering: None, nodes_visited: 0, exhaustive: true };
        return (out, Vec::new());
    }
    let mut s = Search {
        cols: columns(&code.check_matrix()),
        nc,
        nodes: 0,
        enumerate,
        found: Vec::new(),
    };
    let stopped = s.dfs(t, &F2Subspace::zero(nc), &mut Vec::new());
    let out = SearchOutcome {
        ordering: s.found.first().cloned(),
        nodes_visited: s.nodes,
        exhaustive: !stopped,
    };
    (out, s.found)
}

/// Largest T with a feasible ordering, the witnessing ordering, and the
/// exhaustive infeasibility certificate at T + 1.
pub fn max_delay(code: &StabilizerCode) -> MaxDelay {
    let mut t_star = 0;
    let mut ordering = Ordering::default();
    loop {
        let (out, _) = search(code, t_star + 1, false);
        match out.ordering {
            Some(o) => {
                t_star += 1;
                ordering = o;
            }
            None => {
                let lower_bound = (t_star < code.n_checks()).then_some(out);
                return MaxDelay { t_star, ordering, lower_bound };
            }
        }
    }
}

/// All feasible orderings of length T, for diagnostics.
pub fn enumerate_orderings(code: &StabilizerCode, t: usize) -> Vec<Ordering> {
    search(code, t, true).1
}

/// `dim span{x_τ, z_τ : τ = t..T}` for each t = 1..T.
pub fn suffix_span_dims(code: &StabilizerCode, ordering: &Ordering) -> Vec<usize> {
    suffix_spans(code, ordering).iter().map(F2Subspace::dim).collect()
}

/// `L⊥_{[t,T]}` for each t = 1..T (index t - 1).
pub fn suffix_spans(code: &StabilizerCode, ordering: &Ordering) -> Vec<F2Subspace> {
    let cm = code.check_matrix();
    let nc = code.n_checks();
    let t_len = ordering.len();
    let mut out = vec![F2Subspace::zero(nc); t_len];
    let mut acc = F2Subspace::zero(nc);
    for t in (1..=t_len).rev() {
        let q = ordering.zero_based(t);
        acc.insert(cm.x_column(q)).expect("lengths agree");
        acc.insert(cm.z_column(q)).expect("lengths agree");
        out[t - 1] = acc.clone();
    }
    out
}

/// Projective measurement chain `P^(1)..P^(T)` with its coset structure.
#[derive(Clone, Debug)]
pub struct ChainCertificate {
    pub t: usize,
    pub ordering: Ordering,
    /// `J_1..J_T`.
    pub subspaces: Vec<F2Subspace>,
    /// `P^(1)..P^(T)`, each element held as stacked distillation Kraus rows.
    pub measurements: Vec<Povm<f64>>,
    /// `μ^(1)..μ^(T)`: syndrome label → chain label.
    pub groupings: Vec<GroupingMatrix>,
}

/// Vectors `u_1..u_{n-k}`: the check-matrix columns scanned as
/// `(x_T, z_T, x_{T-1}, z_{T-1}, ..., x_1, z_1)`, then standard basis
/// vectors, keeping only those independent of the ones kept so far.
pub fn scan_basis(code: &StabilizerCode, ordering: &Ordering) -> Vec<F2Vector> {
    let cm = code.check_matrix();
    let nc = code.n_checks();
    let mut cand = Vec::new();
    for t in (1..=ordering.len()).rev() {
        let q = ordering.zero_based(t);
        cand.push(cm.x_column(q));
        cand.push(cm.z_column(q));
    }
    cand.extend((0..nc).map(|i| F2Vector::unit(nc, i)));
    let mut span = F2Subspace::zero(nc);
    let mut u = Vec::new();
    for v in cand {
        if span.insert(v).expect("lengths agree") {
            u.push(v);
        }
    }
    u
}

/// Builds `J_t = span{u_1..u_{n-k-t}}` and `P^(t)_{s'} = Σ_{s ∈ s' + J_t} P_s`.
pub fn build_chain(code: &StabilizerCode, ordering: &Ordering) -> Result<ChainCertificate, SolverError> {
    ordering.validate(code.n)?;
    let nc = code.n_checks();
    let t_len = ordering.len();
    for (t, dim) in suffix_span_dims(code, ordering).into_iter().enumerate() {
        let bound = nc.checked_sub(t + 1).ok_or(SolverError::SpanBound { t: t + 1, dim, bound: 0 })?;
        if dim > bound {
            return Err(SolverError::SpanBound { t: t + 1, dim, bound });
        }
    }
    let u = scan_basis(code, ordering);
    let target = distillation_instrument(code)?;
    let mut subspaces = Vec::new();
    let mut measurements = Vec::new();
    let mut groupings = Vec::new();
    for t in 1..=t_len {
        let j = f2::span_in(nc, &u[..nc - t]).expect("lengths agree");
        let mut assign = BTreeMap::new();
        let mut rows: BTreeMap<OutcomeLabel, Vec<&crate::ComplexMatrix>> = BTreeMap::new();
        for (s, kraus) in &target.branches {
            let label = OutcomeLabel::from(f2::coset_label(&s.to_f2(), &j).expect("lengths agree"));
            assign.insert(s.clone(), label.clone());
            rows.entry(label).or_default().push(&kraus[0]);
        }
        let elements = rows
            .into_iter()
            .map(|(label, blocks)| {
                (label, Effect::Gram(crate::ComplexMatrix::vstack(&blocks).expect("shapes agree")))
            })
            .collect();
        let grouping = GroupingMatrix::new(assign.values().cloned().collect(), assign)?;
        measurements.push(Povm::from_parts(target.dim_in, elements));
        groupings.push(grouping);
        subspaces.push(j);
    }
    Ok(ChainCertificate { t: t_len, ordering: ordering.clone(), subspaces, measurements, groupings })
}

/// Per-condition result of [`verify_chain_report`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainReport {
    /// `P^(t)` composable from `P^(t+1)` (or from `{P_s}` for t = T), per t.
    pub composable: Vec<bool>,
    /// `P^(t)` composable from `{P_s}` directly, per t.
    pub composable_from_target: Vec<bool>,
    /// `P^(t)` factorizes over `A_t`, per t.
    pub no_signaling: Vec<bool>,
    /// Every element of `P^(t)` has rank `2^{n-t}`, per t.
    pub ranks: Vec<bool>,
    /// Rows of `μ^(t)` are constant on cosets of `L⊥_{[t,T]}`, per t.
    pub coset_constant: Vec<bool>,
    pub failure: Option<String>,
}

impl ChainReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
            && [&self.composable, &self.composable_from_target, &self.no_signaling, &self.ranks, &self.coset_constant]
                .iter()
                .all(|v| v.iter().all(|&b| b))
    }
}

/// Re-checks the certificate numerically at the operator tolerance.
pub fn verify_chain_report(code: &StabilizerCode, cert: &ChainCertificate) -> ChainReport {
    let mut rep = ChainReport::default();
    if let Err(e) = check_shape(code, cert) {
        rep.failure = Some(e);
        return rep;
    }
    let target = match distillation_instrument(code) {
        Ok(t) => crate::instruments::associated_povm(&t),
        Err(e) => {
            rep.failure = Some(e.to_string());
            return rep;
        }
    };
    let dims = vec![2; code.n];
    let spans = suffix_spans(code, &cert.ordering);
    for t in 1..=cert.t {
        let p = &cert.measurements[t - 1];
        let finer = if t == cert.t { &target } else { &cert.measurements[t] };
        rep.composable.push(matches!(projective_grouping(p, finer), Ok(Some(_))));
        rep.composable_from_target.push(
            matches!(projective_grouping(p, &target), Ok(Some(g)) if g == cert.groupings[t - 1]),
        );
        let a_t = cert.ordering.zero_based(t);
        rep.no_signaling.push(matches!(check_factorization(p, &dims, a_t), Ok(Some(_))));
        let want = 1usize << (code.n - t);
        rep.ranks.push(p.elements.values().all(|e| matches!(e.rank(), Ok(r) if r == want)));
        rep.coset_constant.push(rows_coset_constant(&cert.groupings[t - 1], code.n_checks(), &spans[t - 1]));
    }
    rep
}

fn check_shape(code: &StabilizerCode, cert: &ChainCertificate) -> Result<(), String> {
    cert.ordering.validate(code.n).map_err(|e| e.to_string())?;
    let t = cert.t;
    if cert.ordering.len() != t
        || cert.subspaces.len() != t
        || cert.measurements.len() != t
        || cert.groupings.len() != t
    {
        return Err(format!("certificate lists do not all have length T = {t}"));
    }
    Ok(())
}

/// Each row of μ, viewed as a 0/1 function on GF(2)^{n-k}, is constant on
/// cosets of `span`.
fn rows_coset_constant(mu: &GroupingMatrix, nc: usize, span: &F2Subspace) -> bool {
    mu.coarse.iter().all(|row| {
        let f: Vec<f64> = (0..1usize << nc)
            .map(|s| mu.entry(row, &OutcomeLabel::from_index(s, nc)) as f64)
            .collect();
        f2::coset_constant(&f, span).unwrap_or(false)
    })
}

/// True iff every condition of [`verify_chain_report`] holds.
pub fn verify_chain(code: &StabilizerCode, cert: &ChainCertificate) -> bool {
    verify_chain_report(code, cert).passed()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stabilizer::{builtin, parse_code};

    #[test]
    fn table_values() {
        for (name, want) in [("five_one_three", 4), ("steane", 4), ("shor", 3)] {
            let code = builtin(name).unwrap();
            let md = max_delay(&code);
            assert_eq!(md.optimal_qubits(&code), want, "{name}");
            let lb = md.lower_bound.unwrap();
            assert!(lb.ordering.is_none() && lb.exhaustive);
        }
    }

    #[test]
    fn zero_checks_gives_zero_delay() {
        let code = parse_code(r#"{"n":2,"k":2,"generators":[]}"#).unwrap();
        let md = max_delay(&code);
        assert_eq!(md.t_star, 0);
        assert!(md.lower_bound.is_none());
        let cert = build_chain(&code, &md.ordering).unwrap();
        assert_eq!(cert.t, 0);
        assert!(verify_chain(&code, &cert));
    }

    #[test]
    fn ordering_validation() {
        let code = builtin("five_one_three").unwrap();
        assert!(build_chain(&code, &Ordering::new(vec![0])).is_err());
        assert!(build_chain(&code, &Ordering::new(vec![2, 2])).is_err());
    }

    #[test]
    fn feasibility_is_monotone() {
        let code = builtin("shor").unwrap();
        let md = max_delay(&code);
        for t in 0..=md.t_star {
            assert!(search(&code, t, false).0.ordering.is_some());
        }
    }
}
