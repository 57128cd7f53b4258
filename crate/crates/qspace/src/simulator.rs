//! Exact executor for [`Circuit`] values.
//!
//! Each branch carries a list of Kraus operators from the inputs loaded so
//! far to the `m`-slot register. Unloaded inputs are acted on trivially, so
//! they never enter the matrices until their load step.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruments::{Instrument, OutcomeLabel};
use crate::synthesis::{Circuit, Step};
use crate::ComplexMatrix;

/// Kraus operators below this Frobenius norm are dropped after every step.
pub const PRUNE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("circuit needs {needed} live qubits, budget is {budget}")]
    Budget { needed: usize, budget: usize },
    #[error("input qubit {0} loaded twice")]
    DoubleLoad(usize),
    #[error("step {step}: no entry for reachable value {label}")]
    MissingEntry { step: usize, label: OutcomeLabel },
    #[error("malformed circuit: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub instrument: Instrument<f64>,
    pub peak_width: usize,
    /// Number of live branches after each step.
    pub branch_count_trace: Vec<usize>,
}

type Branches = BTreeMap<OutcomeLabel, Vec<ComplexMatrix>>;

fn lookup<'a, V>(table: &'a BTreeMap<OutcomeLabel, V>, step: usize, label: &OutcomeLabel) -> Result<&'a V, SimError> {
    table.get(label).ok_or_else(|| SimError::MissingEntry { step, label: label.clone() })
}

fn check_slots(slots: &[usize], m: usize) -> Result<(), SimError> {
    let distinct: BTreeSet<&usize> = slots.iter().collect();
    if distinct.len() != slots.len() || slots.iter().any(|&s| s >= m) {
        return Err(SimError::Malformed(format!("bad slot list {slots:?} for m = {m}")));
    }
    Ok(())
}

/// Bits of `r` at `slots` (slot 0 most significant), in list order.
fn read_slots(r: usize, slots: &[usize], m: usize) -> usize {
    slots.iter().fold(0, |acc, &s| (acc << 1) | ((r >> (m - 1 - s)) & 1))
}

fn write_slots(r: usize, slots: &[usize], m: usize, x: usize) -> usize {
    let k = slots.len();
    slots.iter().enumerate().fold(r, |acc, (i, &s)| {
        let bit = (x >> (k - 1 - i)) & 1;
        let mask = 1 << (m - 1 - s);
        (acc & !mask) | (bit * mask)
    })
}

/// `(⟨x|_S ⊗ I)` followed by re-preparing the slots in |0⟩.
fn project(k: &ComplexMatrix, slots: &[usize], m: usize, x: usize) -> ComplexMatrix {
    let mut out = ComplexMatrix::zeros(k.rows(), k.cols());
    for r in 0..k.rows() {
        if read_slots(r, slots, m) == x {
            let dst = write_slots(r, slots, m, 0);
            for c in 0..k.cols() {
                out[(dst, c)] = k[(r, c)];
            }
        }
    }
    out
}

fn keep(k: &ComplexMatrix) -> bool {
    k.frobenius_norm() > PRUNE_TOL
}

fn label_bits(x: usize, len: usize) -> OutcomeLabel {
    OutcomeLabel::from_index(x, len)
}

/// Live slots the circuit needs, counted statically: the union of slots any
/// step touches, the preplaced inputs and the outputs. A unitary touches all
/// `m` slots. A circuit with no steps needs `max(n_in, n_out)`.
pub fn audit_width(c: &Circuit) -> usize {
    let mut touched: BTreeSet<usize> = BTreeSet::new();
    for s in &c.steps {
        match s {
            Step::Unitary { .. } => touched.extend(0..c.m),
            Step::Measure { slots } | Step::Reset { slots } | Step::Load { slots, .. } => {
                touched.extend(slots.values().flatten().copied())
            }
            Step::Classical { .. } => {}
        }
    }
    touched.extend(0..c.preplaced().len());
    touched.extend(0..c.n_out);
    touched.len().max(c.n_out)
}

/// Runs the circuit on all inputs at once and returns the realized
/// instrument with inputs in their original order.
pub fn run(c: &Circuit) -> Result<RunResult, SimError> {
    let m = c.m;
    let preplaced = c.preplaced();
    let p = preplaced.len();
    let peak_width = audit_width(c);
    if peak_width > m || c.n_out > m {
        return Err(SimError::Budget { needed: peak_width.max(c.n_out), budget: m });
    }
    if m >= usize::BITS as usize {
        return Err(SimError::Malformed(format!("m = {m} is too large")));
    }
    let d = 1usize << m;
    let mut k0 = ComplexMatrix::zeros(d, 1 << p);
    for col in 0..(1usize << p) {
        k0[(col << (m - p), col)] = 1.0.into();
    }
    let mut branches: Branches = BTreeMap::from([(OutcomeLabel::empty(), vec![k0])]);
    // Column tensor order of the tracked operators.
    let mut loaded: Vec<usize> = preplaced;
    let mut trace = Vec::with_capacity(c.steps.len());

    for (i, step) in c.steps.iter().enumerate() {
        let mut next: Branches = BTreeMap::new();
        match step {
            Step::Unitary { table } => {
                for (label, list) in branches {
                    let u = lookup(table, i, &label)?;
                    if u.shape() != (d, d) {
                        return Err(SimError::Malformed(format!("step {i}: unitary is not {d}×{d}")));
                    }
                    let out: Vec<_> = list.iter().map(|k| u.matmul(k)).filter(keep).collect();
                    next.insert(label, out);
                }
            }
            Step::Measure { slots } => {
                for (label, list) in branches {
                    let s = lookup(slots, i, &label)?;
                    check_slots(s, m)?;
                    for x in 0..(1usize << s.len()) {
                        let child = label.concat(&label_bits(x, s.len()));
                        let out: Vec<_> = list.iter().map(|k| project(k, s, m, x)).filter(keep).collect();
                        next.entry(child).or_default().extend(out);
                    }
                }
            }
            Step::Reset { slots } => {
                for (label, list) in branches {
                    let s = lookup(slots, i, &label)?;
                    check_slots(s, m)?;
                    let entry = next.entry(label.clone()).or_default();
                    for x in 0..(1usize << s.len()) {
                        entry.extend(list.iter().map(|k| project(k, s, m, x)).filter(keep));
                    }
                }
            }
            Step::Classical { table } => {
                for (label, list) in branches {
                    let to = lookup(table, i, &label)?;
                    next.entry(to.clone()).or_default().extend(list);
                }
            }
            Step::Load { slots, inputs } => {
                for &q in inputs {
                    if q >= c.n_in {
                        return Err(SimError::Malformed(format!("step {i}: input {q} out of range")));
                    }
                    if loaded.contains(&q) {
                        return Err(SimError::DoubleLoad(q));
                    }
                }
                let j = inputs.len();
                for (label, list) in branches {
                    let s = lookup(slots, i, &label)?;
                    check_slots(s, m)?;
                    if s.len() != j {
                        return Err(SimError::Malformed(format!("step {i}: {} slots for {j} inputs", s.len())));
                    }
                    for x in 0..(1usize << j) {
                        let child = label.concat(&label_bits(x, j));
                        let mut out = Vec::new();
                        for k in &list {
                            let mut grown = ComplexMatrix::zeros(d, k.cols() << j);
                            for r in 0..d {
                                if read_slots(r, s, m) != x {
                                    continue;
                                }
                                for y in 0..(1usize << j) {
                                    let dst = write_slots(r, s, m, y);
                                    for col in 0..k.cols() {
                                        grown[(dst, (col << j) | y)] = k[(r, col)];
                                    }
                                }
                            }
                            if keep(&grown) {
                                out.push(grown);
                            }
                        }
                        next.entry(child).or_default().extend(out);
                    }
                }
                loaded.extend(inputs);
            }
        }
        next.retain(|_, list| !list.is_empty());
        trace.push(next.len());
        branches = next;
    }

    if loaded.len() != c.n_in {
        return Err(SimError::Malformed(format!("only {} of {} inputs loaded", loaded.len(), c.n_in)));
    }
    let rest = m - c.n_out;
    let dim_out = 1usize << c.n_out;
    let dim_in = 1usize << c.n_in;
    let mut out = BTreeMap::new();
    for (label, list) in branches {
        let mut kraus = Vec::new();
        for k in &list {
            for t in 0..(1usize << rest) {
                let mut a = ComplexMatrix::zeros(dim_out, dim_in);
                for j in 0..dim_out {
                    for col in 0..dim_in {
                        a[(j, original_column(col, &loaded))] = k[((j << rest) | t, col)];
                    }
                }
                if keep(&a) {
                    kraus.push(a);
                }
            }
        }
        if !kraus.is_empty() {
            out.insert(label, kraus);
        }
    }
    Ok(RunResult {
        instrument: Instrument::from_parts(dim_in, dim_out, out),
        peak_width,
        branch_count_trace: trace,
    })
}

/// Column index in original input order for column `col` whose bits follow
/// the tensor order `order` (first entry most significant).
fn original_column(col: usize, order: &[usize]) -> usize {
    let n = order.len();
    order.iter().enumerate().fold(0, |acc, (pos, &q)| {
        let bit = (col >> (n - 1 - pos)) & 1;
        acc | (bit << (n - 1 - q))
    })
}
