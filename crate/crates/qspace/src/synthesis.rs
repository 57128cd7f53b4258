//! Circuit synthesis: binary-tree POVM circuits, the half-cut construction
//! for instruments without delayed inputs, and the delayed-input staircase.
//!
//! Slot conventions: an `m`-slot register, slot 0 most significant. Outputs
//! end in slots `0..n_out`, every other slot back in |0⟩. Tree ancillas and
//! loaded inputs use slot `m - 1`. Inputs that no `load` step mentions sit in
//! slots `0..` in ascending order from the start.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruments::{
    associated_povm, ons_decompose, Instrument, InstrumentError, OutcomeLabel, Povm, OP_TOL,
};
use crate::linalg::{extend_isometry, hermitian_eig, unitary_relating, LinalgError, RANK_THRESHOLD};
use crate::solver::{self, build_chain, max_delay, ChainCertificate};
use crate::stabilizer::{distillation_instrument, StabilizerCode, StabilizerError};
use crate::ComplexMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error(transparent)]
    Stabilizer(#[from] StabilizerError),
    #[error(transparent)]
    Solver(#[from] solver::SolverError),
    #[error("composability condition fails: {0}")]
    Composability(String),
    #[error("outcome no-signaling condition fails: {0}")]
    NoSignaling(String),
    #[error("rank condition fails: {0}")]
    Rank(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("chain certificate rejected")]
    Certificate,
}

/// One elementary operation. Tables are keyed by the classical value held
/// before the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Step {
    /// Left-multiply by a `2^m × 2^m` unitary.
    Unitary { table: BTreeMap<OutcomeLabel, ComplexMatrix> },
    /// Measure the listed slots in the computational basis, append the bits
    /// (in list order) to the value, and return the slots to |0⟩.
    Measure { slots: BTreeMap<OutcomeLabel, Vec<usize>> },
    /// Measure and forget: return the slots to |0⟩ without recording.
    Reset { slots: BTreeMap<OutcomeLabel, Vec<usize>> },
    /// Replace the value.
    Classical { table: BTreeMap<OutcomeLabel, OutcomeLabel> },
    /// Measure the listed slots (appending bits), then place the input
    /// qubits `inputs` (0-based) into them.
    Load { slots: BTreeMap<OutcomeLabel, Vec<usize>>, inputs: Vec<usize> },
}

/// A classically controlled circuit on `m` live slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub m: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub steps: Vec<Step>,
}

impl Circuit {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("circuit serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Input qubits in the order they are loaded.
    pub fn load_order(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Load { inputs, .. } => Some(inputs.clone()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn n_loads(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s, Step::Load { .. })).count()
    }

    /// Inputs present from the start, ascending.
    pub fn preplaced(&self) -> Vec<usize> {
        let loaded: BTreeSet<usize> = self.load_order().into_iter().collect();
        (0..self.n_in).filter(|i| !loaded.contains(i)).collect()
    }
}

fn dim(qubits: usize) -> usize {
    1usize << qubits
}

fn log2_exact(d: usize, what: &str) -> Result<usize, SynthesisError> {
    if d.is_power_of_two() {
        Ok(d.trailing_zeros() as usize)
    } else {
        Err(SynthesisError::Hypothesis(format!("{what} dimension {d} is not a power of two")))
    }
}

/// Places row `i` of `a` at row `i << shift` of a `2^m`-row matrix.
fn embed_rows(a: &ComplexMatrix, m: usize, shift: usize) -> ComplexMatrix {
    let mut out = ComplexMatrix::zeros(dim(m), a.cols());
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            out[(r << shift, c)] = a[(r, c)];
        }
    }
    out
}

/// Unitary whose columns at `positions` are the columns of the isometry `v`;
/// the completion fills the remaining columns in ascending order.
fn unitary_with_columns(v: &ComplexMatrix, positions: &[usize]) -> Result<ComplexMatrix, SynthesisError> {
    let full = extend_isometry(v)?;
    let d = full.rows();
    let mut out = ComplexMatrix::zeros(d, d);
    let taken: BTreeSet<usize> = positions.iter().copied().collect();
    let rest: Vec<usize> = (0..d).filter(|c| !taken.contains(c)).collect();
    for (src, &dst) in positions.iter().chain(rest.iter()).enumerate() {
        out.set_column(dst, &full.column(src));
    }
    Ok(out)
}

/// Kraus operators of one binary-tree node: `K_{0|l}, K_{1|l}`.
#[derive(Clone, Debug)]
struct Node {
    kraus: [ComplexMatrix; 2],
}

/// Plan for the binary-tree implementation of one POVM.
#[derive(Clone, Debug)]
struct TreePlan {
    depth: usize,
    /// Leaf index → element tag (`None` for padding).
    leaves: Vec<Option<usize>>,
    /// Prefix (as a label of length < depth) → node.
    nodes: BTreeMap<OutcomeLabel, Node>,
}

impl TreePlan {
    fn trivial(tag: Option<usize>) -> Self {
        TreePlan { depth: 0, leaves: vec![tag], nodes: BTreeMap::new() }
    }
}

/// `R_l` for every prefix `l`, with elements placed at leaves `0..len` and
/// zero padding up to `2^depth`.
fn prefix_sums(elements: &[ComplexMatrix], depth: usize, d: usize) -> BTreeMap<OutcomeLabel, ComplexMatrix> {
    let mut sums = BTreeMap::new();
    for len in 0..=depth {
        for p in 0..dim(len) {
            let mut acc = ComplexMatrix::zeros(d, d);
            let lo = p << (depth - len);
            let hi = (p + 1) << (depth - len);
            for e in elements.iter().take(hi).skip(lo) {
                acc += e;
            }
            sums.insert(OutcomeLabel::from_index(p, len), acc);
        }
    }
    sums
}

/// `√R` and the projector onto Ran(R) from one eigendecomposition.
fn sqrt_and_support(r: &ComplexMatrix) -> Result<(ComplexMatrix, ComplexMatrix, ComplexMatrix), SynthesisError> {
    let eig = hermitian_eig(r, OP_TOL)?;
    let cut = RANK_THRESHOLD * eig.lambda_max_abs();
    let sqrt = eig.apply(|l| if l > cut { l.sqrt() } else { 0.0 });
    let pinv = eig.apply(|l| if l > cut { 1.0 / l.sqrt() } else { 0.0 });
    let proj = eig.apply(|l| if l > cut { 1.0 } else { 0.0 });
    Ok((sqrt, pinv, proj))
}

/// `K_{j|l} = √R_{lj} R_l^{-1/2}`, with `I - Π_l` added to `K_{0|l}` so the
/// pair is an isometry on the whole space. Accumulated operators are
/// unchanged because they map into Ran(R_l).
fn plan_tree(tagged: &[(Option<usize>, ComplexMatrix)], d: usize) -> Result<TreePlan, SynthesisError> {
    if tagged.is_empty() {
        return Err(SynthesisError::Hypothesis("POVM without outcomes".into()));
    }
    let depth = tagged.len().next_power_of_two().trailing_zeros() as usize;
    let mut leaves: Vec<Option<usize>> = tagged.iter().map(|(t, _)| *t).collect();
    leaves.resize(dim(depth), None);
    let elements: Vec<ComplexMatrix> = tagged.iter().map(|(_, e)| e.clone()).collect();
    let sums = prefix_sums(&elements, depth, d);
    let mut nodes = BTreeMap::new();
    for len in 0..depth {
        for p in 0..dim(len) {
            let l = OutcomeLabel::from_index(p, len);
            let (_, pinv, proj) = sqrt_and_support(&sums[&l])?;
            let mut kraus = [ComplexMatrix::zeros(d, d), ComplexMatrix::zeros(d, d)];
            for (j, k) in kraus.iter_mut().enumerate() {
                let child = l.concat(&OutcomeLabel::new(vec![j == 1]));
                let (sq, _, _) = sqrt_and_support(&sums[&child])?;
                *k = sq.matmul(&pinv);
            }
            kraus[0] += &(&ComplexMatrix::identity(d) - &proj);
            nodes.insert(l, Node { kraus });
        }
    }
    Ok(TreePlan { depth, leaves, nodes })
}

/// `m`-qubit unitary for a tree node: system in slots `0..m-1`, ancilla in
/// slot `m - 1`, `U(|ψ⟩|0⟩) = Σ_j K_j|ψ⟩|j⟩`.
fn node_unitary(node: &Node, m: usize) -> Result<ComplexMatrix, SynthesisError> {
    let d = dim(m - 1);
    let mut v = ComplexMatrix::zeros(dim(m), d);
    for (j, k) in node.kraus.iter().enumerate() {
        for sys in 0..d {
            for c in 0..d {
                v[(sys * 2 + j, c)] = k[(sys, c)];
            }
        }
    }
    let positions: Vec<usize> = (0..d).map(|c| c * 2).collect();
    unitary_with_columns(&v, &positions)
}

type LeafMap = BTreeMap<OutcomeLabel, (OutcomeLabel, Option<usize>)>;

/// Tree rounds for several value-conditioned POVMs at once. Instances of
/// smaller depth idle (identity, empty measurement) in the later rounds.
/// Returns the steps and, per leaf value, its instance key and tag.
fn tree_rounds(m: usize, plans: &BTreeMap<OutcomeLabel, TreePlan>) -> Result<(Vec<Step>, LeafMap), SynthesisError> {
    let depth = plans.values().map(|p| p.depth).max().unwrap_or(0);
    let id = ComplexMatrix::identity(dim(m));
    let mut steps = Vec::new();
    for round in 0..depth {
        let mut table = BTreeMap::new();
        let mut slots = BTreeMap::new();
        for (v, plan) in plans {
            if round < plan.depth {
                for p in 0..dim(round) {
                    let l = OutcomeLabel::from_index(p, round);
                    table.insert(v.concat(&l), node_unitary(&plan.nodes[&l], m)?);
                    slots.insert(v.concat(&l), vec![m - 1]);
                }
            } else {
                for p in 0..dim(plan.depth) {
                    let l = OutcomeLabel::from_index(p, plan.depth);
                    table.insert(v.concat(&l), id.clone());
                    slots.insert(v.concat(&l), Vec::new());
                }
            }
        }
        steps.push(Step::Unitary { table });
        steps.push(Step::Measure { slots });
    }
    let mut leaves = BTreeMap::new();
    for (v, plan) in plans {
        for (i, tag) in plan.leaves.iter().enumerate() {
            leaves.insert(v.concat(&OutcomeLabel::from_index(i, plan.depth)), (v.clone(), *tag));
        }
    }
    Ok((steps, leaves))
}

/// Largest deviation `‖K^acc_l − √R_l‖_max` over all tree nodes and leaves,
/// where `K^acc_l` is the product of node Kraus operators along `l`.
pub fn tree_telescoping_deviation(e: &Povm<f64>) -> Result<f64, SynthesisError> {
    let tagged: Vec<(Option<usize>, ComplexMatrix)> =
        e.elements.values().enumerate().map(|(i, el)| (Some(i), el.dense())).collect();
    let plan = plan_tree(&tagged, e.dim)?;
    let elements: Vec<ComplexMatrix> = tagged.into_iter().map(|(_, m)| m).collect();
    let sums = prefix_sums(&elements, plan.depth, e.dim);
    let mut acc: BTreeMap<OutcomeLabel, ComplexMatrix> = BTreeMap::new();
    acc.insert(OutcomeLabel::empty(), ComplexMatrix::identity(e.dim));
    let mut worst = 0f64;
    for len in 0..=plan.depth {
        for p in 0..dim(len) {
            let l = OutcomeLabel::from_index(p, len);
            let (sq, _, _) = sqrt_and_support(&sums[&l])?;
            worst = worst.max(acc[&l].max_diff(&sq));
            if len < plan.depth {
                for j in 0..2 {
                    let child = l.concat(&OutcomeLabel::new(vec![j == 1]));
                    let k = plan.nodes[&l].kraus[j].matmul(&acc[&l]);
                    acc.insert(child, k);
                }
            }
        }
    }
    Ok(worst)
}

/// Label for padded zero-probability outcomes: one bit longer than any label
/// in use, so it cannot collide.
fn pad_label<'a>(labels: impl Iterator<Item = &'a OutcomeLabel>) -> OutcomeLabel {
    let len = labels.map(OutcomeLabel::len).max().unwrap_or(0);
    OutcomeLabel::new(vec![true; len + 1])
}

/// Binary-tree circuit for the Lüders instrument of a POVM on `m - 1`
/// qubits, with `m - 1` preplaced inputs and one ancilla.
pub fn synth_povm_tree(e: &Povm<f64>) -> Result<Circuit, SynthesisError> {
    let n = log2_exact(e.dim, "POVM")?;
    let m = n + 1;
    let labels: Vec<OutcomeLabel> = e.labels().cloned().collect();
    let tagged: Vec<(Option<usize>, ComplexMatrix)> =
        e.elements.values().enumerate().map(|(i, el)| (Some(i), el.dense())).collect();
    let plan = plan_tree(&tagged, e.dim)?;
    let plans = BTreeMap::from([(OutcomeLabel::empty(), plan)]);
    let (mut steps, leaves) = tree_rounds(m, &plans)?;
    let pad = pad_label(labels.iter());
    let table = leaves
        .into_iter()
        .map(|(leaf, (_, tag))| (leaf, tag.map_or_else(|| pad.clone(), |i| labels[i].clone())))
        .collect();
    steps.push(Step::Classical { table });
    Ok(simplify(Circuit { m, n_in: n, n_out: n, steps }))
}

/// One value-conditioned instance of the half-cut construction.
#[derive(Clone, Debug)]
pub struct WodiInstance {
    /// Kraus-rank-1 operators, indexed by tag.
    pub kraus: Vec<ComplexMatrix>,
    /// Tags in `K_0` and `K_1`.
    pub partition: [Vec<usize>; 2],
    /// `P_b = Σ_{k ∈ K_b} A_k†A_k`.
    pub projectors: [ComplexMatrix; 2],
}

/// Half-cut construction for several value-conditioned instruments sharing
/// input and output sizes: measure which half `b` the outcome lies in via an
/// isometry into `m - 1` qubits plus one bit, run the Lüders tree of
/// `N_{k|b} = K_b Ê_k K_b†`, then map each branch to its target Kraus.
fn wodi_steps(
    m: usize,
    n_in: usize,
    n_out: usize,
    instances: &BTreeMap<OutcomeLabel, WodiInstance>,
) -> Result<(Vec<Step>, LeafMap), SynthesisError> {
    if n_in > m || n_out > m || m == 0 {
        return Err(SynthesisError::Hypothesis(format!("n_in = {n_in}, n_out = {n_out} do not fit m = {m}")));
    }
    let half = dim(m - 1);
    let in_positions: Vec<usize> = (0..dim(n_in)).map(|c| c << (m - n_in)).collect();
    let mut first = BTreeMap::new();
    let mut cut = BTreeMap::new();
    let mut plans = BTreeMap::new();
    // Per tree key: (instance key, K_b) for the final channel.
    let mut halves: BTreeMap<OutcomeLabel, (OutcomeLabel, Option<ComplexMatrix>)> = BTreeMap::new();
    for (v, inst) in instances {
        if inst.kraus.len() == 1 {
            let a = embed_rows(&ComplexMatrix::identity(dim(n_in)), m, m - n_in);
            let b = embed_rows(&inst.kraus[0], m, m - n_out);
            first.insert(v.clone(), unitary_relating(&a, &b)?);
            cut.insert(v.clone(), Vec::new());
            plans.insert(v.clone(), TreePlan::trivial(Some(0)));
            halves.insert(v.clone(), (v.clone(), None));
            continue;
        }
        let mut iso = ComplexMatrix::zeros(dim(m), dim(n_in));
        let mut k_b = Vec::new();
        for b in 0..2 {
            let rows = crate::instruments::Effect::Dense(inst.projectors[b].clone()).spectral_rows()?;
            if rows.rows() > half {
                return Err(SynthesisError::Rank(format!(
                    "rank P_{b} = {} exceeds 2^(m-1) = {half}",
                    rows.rows()
                )));
            }
            let mut kb = ComplexMatrix::zeros(half, dim(n_in));
            for r in 0..rows.rows() {
                for c in 0..dim(n_in) {
                    kb[(r, c)] = rows[(r, c)];
                    iso[(r * 2 + b, c)] = rows[(r, c)];
                }
            }
            k_b.push(kb);
        }
        first.insert(v.clone(), unitary_with_columns(&iso, &in_positions)?);
        cut.insert(v.clone(), vec![m - 1]);
        for (b, kb) in k_b.into_iter().enumerate() {
            let key = v.concat(&OutcomeLabel::new(vec![b == 1]));
            let mut tagged = Vec::new();
            for &tag in &inst.partition[b] {
                let a = &inst.kraus[tag];
                if a.frobenius_norm() <= OP_TOL {
                    continue;
                }
                let e = a.adjoint_mul(a);
                tagged.push((Some(tag), kb.matmul(&e).mul_adjoint(&kb)));
            }
            let completion = &ComplexMatrix::identity(half) - &kb.mul_adjoint(&kb);
            if completion.max_abs() > OP_TOL || tagged.is_empty() {
                tagged.push((None, completion));
            }
            plans.insert(key.clone(), plan_tree(&tagged, half)?);
            halves.insert(key, (v.clone(), Some(kb)));
        }
    }
    let mut steps = vec![Step::Unitary { table: first }, Step::Measure { slots: cut }];
    let (tree, leaves) = tree_rounds(m, &plans)?;
    steps.extend(tree);
    let id = ComplexMatrix::identity(dim(m));
    let mut last = BTreeMap::new();
    let mut out_leaves = BTreeMap::new();
    for (leaf, (key, tag)) in leaves {
        let (v, kb) = &halves[&key];
        let w = match (tag, kb) {
            (Some(t), Some(kb)) => {
                let a_k = &instances[v].kraus[t];
                // The tree leaves `√N_{k|b} K_b = K_b √Ê_k` behind.
                let (sqrt_e, _, _) = sqrt_and_support(&a_k.adjoint_mul(a_k))?;
                let l_k = kb.matmul(&sqrt_e);
                unitary_relating(&embed_rows(&l_k, m, 1), &embed_rows(a_k, m, m - n_out))?
            }
            _ => id.clone(),
        };
        last.insert(leaf.clone(), w);
        out_leaves.insert(leaf, (v.clone(), tag));
    }
    steps.push(Step::Unitary { table: last });
    Ok((steps, out_leaves))
}

/// Rank-1 refinement: one tag per Kraus operator, remembering its outcome.
fn flatten(target: &Instrument<f64>) -> (Vec<ComplexMatrix>, Vec<OutcomeLabel>) {
    let mut kraus = Vec::new();
    let mut owner = Vec::new();
    for (k, list) in &target.branches {
        for a in list {
            kraus.push(a.clone());
            owner.push(k.clone());
        }
    }
    (kraus, owner)
}

/// Circuit without input loads for `target` on `m` qubits, given a split of
/// its outcomes into `K_0, K_1` whose summed associated POVM elements are the
/// projectors `P_0, P_1` of rank at most `2^(m-1)`. Branches of higher Kraus
/// rank are refined and merged back by the final classical map.
pub fn synth_wodi(
    target: &Instrument<f64>,
    partition: (&BTreeSet<OutcomeLabel>, &BTreeSet<OutcomeLabel>),
    projectors: (&ComplexMatrix, &ComplexMatrix),
    m: usize,
) -> Result<Circuit, SynthesisError> {
    let n_in = log2_exact(target.dim_in, "input")?;
    let n_out = log2_exact(target.dim_out, "output")?;
    let labels: BTreeSet<&OutcomeLabel> = target.labels().collect();
    let (k0, k1) = partition;
    if k0.intersection(k1).next().is_some() || k0.iter().chain(k1).collect::<BTreeSet<_>>() != labels {
        return Err(SynthesisError::Hypothesis("partition must split the outcome set".into()));
    }
    let (kraus, owner) = flatten(target);
    let split = [k0, k1].map(|set| (0..kraus.len()).filter(|&i| set.contains(&owner[i])).collect::<Vec<_>>());
    for (b, tags) in split.iter().enumerate() {
        let mut sum = ComplexMatrix::zeros(target.dim_in, target.dim_in);
        for &t in tags {
            sum += &kraus[t].adjoint_mul(&kraus[t]);
        }
        let p = if b == 0 { projectors.0 } else { projectors.1 };
        let dev = sum.max_diff(p);
        if dev > OP_TOL {
            return Err(SynthesisError::Composability(format!("block {b} sums to P_{b} only within {dev:e}")));
        }
        if p.matmul(p).max_diff(p) > OP_TOL {
            return Err(SynthesisError::Hypothesis(format!("P_{b} is not a projector")));
        }
    }
    let inst = WodiInstance {
        kraus,
        partition: split,
        projectors: [projectors.0.clone(), projectors.1.clone()],
    };
    let instances = BTreeMap::from([(OutcomeLabel::empty(), inst)]);
    let (mut steps, leaves) = wodi_steps(m, n_in, n_out, &instances)?;
    let pad = pad_label(target.labels());
    let table = leaves
        .into_iter()
        .map(|(leaf, (_, tag))| (leaf, tag.map_or_else(|| pad.clone(), |t| owner[t].clone())))
        .collect();
    steps.push(Step::Classical { table });
    Ok(simplify(Circuit { m, n_in, n_out, steps }))
}

/// One level of the staircase recursion.
struct Level {
    n_in: usize,
    n_out: usize,
    /// Rank-1 Kraus operators with orthonormal rows, stacking to a unitary.
    kraus: BTreeMap<OutcomeLabel, ComplexMatrix>,
    /// `g_t`: target label → chain label, for t = 1..T.
    groupings: Vec<BTreeMap<OutcomeLabel, OutcomeLabel>>,
    /// Positions of `A_1..A_T` among this level's inputs.
    order: Vec<usize>,
    /// Original input index of each of this level's inputs, ascending.
    qubits: Vec<usize>,
}

fn level_steps(level: &Level, m: usize) -> Result<Vec<Step>, SynthesisError> {
    let t_len = level.groupings.len();
    if t_len == 0 {
        return base_steps(level, m);
    }
    let g_t = &level.groupings[t_len - 1];
    let mut blocks: BTreeMap<OutcomeLabel, Vec<OutcomeLabel>> = BTreeMap::new();
    for k in level.kraus.keys() {
        let kt = g_t
            .get(k)
            .ok_or_else(|| SynthesisError::Composability(format!("outcome {k} missing from μ^({t_len})")))?;
        blocks.entry(kt.clone()).or_default().push(k.clone());
    }
    let mut gamma = BTreeMap::new();
    for (kt, ks) in &blocks {
        let parts: Vec<&ComplexMatrix> = ks.iter().map(|k| &level.kraus[k]).collect();
        let g = ComplexMatrix::vstack(&parts)?;
        if g.rows() != dim(m) {
            return Err(SynthesisError::Rank(format!(
                "P^({t_len})_{kt} has rank {}, expected 2^{m}",
                g.rows()
            )));
        }
        gamma.insert(kt.clone(), vec![g]);
    }
    let gamma = Instrument::from_parts(dim(level.n_in), dim(m), gamma);
    let a_pos = level.order[t_len - 1];
    let (g, unitaries) = ons_decompose(&gamma, &vec![2; level.n_in], a_pos).map_err(|e| match e {
        InstrumentError::NotFactorizable(_) => {
            SynthesisError::NoSignaling(format!("P^({t_len}) does not factorize over input {}", level.qubits[a_pos]))
        }
        other => other.into(),
    })?;

    let mut next_groupings = Vec::new();
    for g_s in &level.groupings[..t_len - 1] {
        let mut map = BTreeMap::new();
        for (kt, ks) in &blocks {
            let image = &g_s[&ks[0]];
            if ks.iter().any(|k| &g_s[k] != image) {
                return Err(SynthesisError::Composability(format!(
                    "chain labels are not constant on block {kt}"
                )));
            }
            map.insert(kt.clone(), image.clone());
        }
        next_groupings.push(map);
    }
    let next = Level {
        n_in: level.n_in - 1,
        n_out: m - 1,
        kraus: g.branches.into_iter().map(|(k, mut l)| (k, l.remove(0))).collect(),
        groupings: next_groupings,
        order: level.order[..t_len - 1].iter().map(|&p| if p > a_pos { p - 1 } else { p }).collect(),
        qubits: level.qubits.iter().copied().filter(|&q| q != level.qubits[a_pos]).collect(),
    };
    let mut steps = level_steps(&next, m)?;

    steps.push(Step::Load {
        slots: blocks.keys().map(|kt| (kt.clone(), vec![m - 1])).collect(),
        inputs: vec![level.qubits[a_pos]],
    });

    let zero = OutcomeLabel::new(vec![false]);
    let mut instances = BTreeMap::new();
    for (kt, ks) in &blocks {
        let gam = &gamma.branches[kt][0];
        let u = &unitaries[kt];
        let kraus: Vec<ComplexMatrix> =
            ks.iter().map(|k| level.kraus[k].mul_adjoint(gam).matmul(u)).collect();
        let cut = kraus.len() / 2;
        let partition = [(0..cut).collect::<Vec<_>>(), (cut..kraus.len()).collect()];
        let projectors = partition.clone().map(|tags| {
            let mut p = ComplexMatrix::zeros(dim(m), dim(m));
            for t in tags {
                p += &kraus[t].adjoint_mul(&kraus[t]);
            }
            p
        });
        instances.insert(kt.concat(&zero), WodiInstance { kraus, partition, projectors });
    }
    let (psi, leaves) = wodi_steps(m, m, level.n_out, &instances)?;
    steps.extend(psi);
    let pad = pad_label(level.kraus.keys());
    let table = leaves
        .into_iter()
        .map(|(leaf, (v, tag))| {
            let kt = v.prefix(v.len() - 1);
            let label = tag.map_or_else(|| pad.clone(), |t| blocks[&kt][t].clone());
            (leaf, label)
        })
        .collect();
    steps.push(Step::Classical { table });
    Ok(steps)
}

/// `T = 0`: apply the stacked unitary (outputs first, remainder last) and
/// measure the remainder.
fn base_steps(level: &Level, m: usize) -> Result<Vec<Step>, SynthesisError> {
    if level.n_in != m {
        return Err(SynthesisError::Hypothesis(format!("base level has {} inputs for width {m}", level.n_in)));
    }
    let r = m - level.n_out;
    if level.kraus.len() != dim(r) {
        return Err(SynthesisError::Hypothesis(format!(
            "{} outcomes cannot be read from {r} measured qubits",
            level.kraus.len()
        )));
    }
    let mut u = ComplexMatrix::zeros(dim(m), dim(m));
    let labels: Vec<&OutcomeLabel> = level.kraus.keys().collect();
    for (idx, a) in level.kraus.values().enumerate() {
        for j in 0..a.rows() {
            for c in 0..a.cols() {
                u[((j << r) + idx, c)] = a[(j, c)];
            }
        }
    }
    let dev = u.isometry_deviation();
    if dev > OP_TOL {
        return Err(SynthesisError::Hypothesis(format!("stacked Kraus operators are not unitary ({dev:e})")));
    }
    let root = OutcomeLabel::empty();
    let mut steps = vec![Step::Unitary { table: BTreeMap::from([(root.clone(), u)]) }];
    steps.push(Step::Measure { slots: BTreeMap::from([(root, (level.n_out..m).collect())]) });
    let table = (0..dim(r)).map(|i| (OutcomeLabel::from_index(i, r), labels[i].clone())).collect();
    steps.push(Step::Classical { table });
    Ok(steps)
}

/// Staircase circuit of width `n_in - T` with the certificate's loads.
pub fn synth_staircase(target: &Instrument<f64>, cert: &ChainCertificate) -> Result<Circuit, SynthesisError> {
    let n_in = log2_exact(target.dim_in, "input")?;
    let n_out = log2_exact(target.dim_out, "output")?;
    if cert.t > n_in || n_in - cert.t < n_out {
        return Err(SynthesisError::Rank(format!("T = {} leaves fewer than {n_out} qubits", cert.t)));
    }
    let m = n_in - cert.t;
    let mut kraus = BTreeMap::new();
    for (k, list) in &target.branches {
        match list.as_slice() {
            [a] => {
                kraus.insert(k.clone(), a.clone());
            }
            _ => return Err(InstrumentError::NotRankOne(k.clone()).into()),
        }
    }
    let level = Level {
        n_in,
        n_out,
        kraus,
        groupings: cert.groupings.iter().map(|g| g.assign.clone()).collect(),
        order: (1..=cert.t).map(|t| cert.ordering.zero_based(t)).collect(),
        qubits: (0..n_in).collect(),
    };
    let steps = level_steps(&level, m)?;
    Ok(simplify(Circuit { m, n_in, n_out, steps }))
}

/// Pipeline: search, chain construction and check, staircase synthesis.
pub fn synth_distillation(code: &StabilizerCode) -> Result<(Circuit, ChainCertificate), SynthesisError> {
    let md = max_delay(code);
    let cert = build_chain(code, &md.ordering)?;
    if !solver::verify_chain(code, &cert) {
        return Err(SynthesisError::Certificate);
    }
    let target = distillation_instrument(code)?;
    Ok((synth_staircase(&target, &cert)?, cert))
}

/// Drops steps that act trivially on every value: all-identity unitaries,
/// measurements and resets of no slots, identity classical maps.
pub fn simplify(mut c: Circuit) -> Circuit {
    let d = dim(c.m);
    let id = ComplexMatrix::identity(d);
    c.steps.retain(|s| match s {
        Step::Unitary { table } => !table.values().all(|u| *u == id),
        Step::Measure { slots } | Step::Reset { slots } => !slots.values().all(Vec::is_empty),
        Step::Classical { table } => !table.iter().all(|(a, b)| a == b),
        Step::Load { .. } => true,
    });
    c
}

/// Associated POVM of an instrument as dense matrices, for comparisons.
pub fn dense_povm(inst: &Instrument<f64>) -> BTreeMap<OutcomeLabel, ComplexMatrix> {
    associated_povm(inst).elements.into_iter().map(|(k, e)| (k, e.dense())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruments::{compare_instruments, instruments_equal, luders, Effect};
    use crate::linalg::{gaussian_matrix, pinv_sqrt_psd};
    use crate::simulator::{audit_width, run};
    use crate::stabilizer::builtin;

    fn random_povm(n: usize, outcomes: usize, seed: u64) -> Povm<f64> {
        let d = dim(n);
        let grams: Vec<ComplexMatrix> = (0..outcomes)
            .map(|i| {
                let g = gaussian_matrix::<f64>(d, d, seed * 131 + i as u64);
                g.adjoint_mul(&g)
            })
            .collect();
        let mut s = ComplexMatrix::zeros(d, d);
        for g in &grams {
            s += g;
        }
        let w = pinv_sqrt_psd(&s).unwrap();
        let len = outcomes.next_power_of_two().trailing_zeros() as usize;
        let elements = grams
            .iter()
            .enumerate()
            .map(|(i, g)| (OutcomeLabel::from_index(i, len), Effect::Dense(w.matmul(g).matmul(&w))))
            .collect();
        Povm::new(d, elements).unwrap()
    }

    #[test]
    fn computational_measurement_tree() {
        let z = |b: usize| {
            let mut m = ComplexMatrix::zeros(2, 2);
            m[(b, b)] = 1.0.into();
            (OutcomeLabel::from_index(b, 1), Effect::Dense(m))
        };
        let e = Povm::new(2, [z(0), z(1)].into_iter().collect()).unwrap();
        let c = synth_povm_tree(&e).unwrap();
        assert_eq!(c.m, 2);
        let r = run(&c).unwrap();
        assert!(instruments_equal(&r.instrument, &luders(&e).unwrap(), 1e-10));
    }

    #[test]
    fn trivial_povm_has_no_rounds() {
        let e = Povm::new(2, BTreeMap::from([(OutcomeLabel::empty(), Effect::Dense(ComplexMatrix::identity(2)))]))
            .unwrap();
        let c = synth_povm_tree(&e).unwrap();
        assert!(c.steps.is_empty());
        assert_eq!(audit_width(&c), 1);
    }

    #[test]
    fn random_tree_round_trip() {
        for seed in 0..5 {
            let e = random_povm(2, 3 + seed as usize % 4, seed);
            assert!(tree_telescoping_deviation(&e).unwrap() < 1e-8);
            let c = synth_povm_tree(&e).unwrap();
            let r = run(&c).unwrap();
            assert!(instruments_equal(&r.instrument, &luders(&e).unwrap(), 1e-9), "seed {seed}");
        }
    }

    #[test]
    fn wodi_computational_measurement() {
        let target = luders(&Povm::new(
            2,
            (0..2)
                .map(|b| {
                    let mut m = ComplexMatrix::zeros(2, 2);
                    m[(b, b)] = 1.0.into();
                    (OutcomeLabel::from_index(b, 1), Effect::Dense(m))
                })
                .collect(),
        )
        .unwrap())
        .unwrap();
        let labels: Vec<OutcomeLabel> = target.labels().cloned().collect();
        let k0 = BTreeSet::from([labels[0].clone()]);
        let k1 = BTreeSet::from([labels[1].clone()]);
        let p = |b: usize| target.branches[&labels[b]][0].adjoint_mul(&target.branches[&labels[b]][0]);
        let c = synth_wodi(&target, (&k0, &k1), (&p(0), &p(1)), 2).unwrap();
        let r = run(&c).unwrap();
        assert!(r.peak_width <= 2);
        assert!(instruments_equal(&r.instrument, &target, 1e-8));
    }

    #[test]
    fn circuit_json_round_trip() {
        let e = random_povm(1, 3, 7);
        let c = synth_povm_tree(&e).unwrap();
        let s = c.to_json();
        let back = Circuit::from_json(&s).unwrap();
        assert_eq!(back.to_json(), s);
    }

    #[test]
    fn five_one_three_end_to_end() {
        let code = builtin("five_one_three").unwrap();
        let (c, cert) = synth_distillation(&code).unwrap();
        assert_eq!(c.m, 4);
        assert_eq!(c.n_loads(), cert.t);
        let r = run(&c).unwrap();
        assert_eq!(r.peak_width, 4);
        let target = distillation_instrument(&code).unwrap();
        let cmp = compare_instruments(&r.instrument, &target, 1e-8);
        assert!(cmp.within(1e-8), "deviation {:e}", cmp.max_deviation());
    }
}
