//! Oracles and fixtures shared by the integration tests. Everything here is
//! written independently of the library's algorithms so it can check them.
#![allow(dead_code)]

use std::collections::BTreeMap;

use qspace::instruments::{Effect, Instrument, Povm};
use qspace::linalg::{gaussian_matrix, haar_unitary, hermitian_eig};
use qspace::{ComplexMatrix, OutcomeLabel, C64};

pub fn label(i: usize, len: usize) -> OutcomeLabel {
    OutcomeLabel::from_index(i, len)
}

pub fn bits_for(count: usize) -> usize {
    count.next_power_of_two().trailing_zeros() as usize
}

/// Plain triple-loop product, kept separate from `CMatrix::matmul`.
pub fn mul(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = ComplexMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut z = C64::new(0.0, 0.0);
            for k in 0..a.cols() {
                z += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = z;
        }
    }
    out
}

pub fn dagger(a: &ComplexMatrix) -> ComplexMatrix {
    let mut out = ComplexMatrix::zeros(a.cols(), a.rows());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out[(j, i)] = a[(i, j)].conj();
        }
    }
    out
}

pub fn max_diff(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut worst = 0f64;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            worst = worst.max((a[(i, j)] - b[(i, j)]).norm());
        }
    }
    worst
}

/// `Σ_i K_i† K_i` for one branch.
pub fn gram_sum(list: &[ComplexMatrix], d: usize) -> ComplexMatrix {
    let mut s = ComplexMatrix::zeros(d, d);
    for k in list {
        s += &mul(&dagger(k), k);
    }
    s
}

/// Largest entrywise gap between the associated POVMs of `inst` and the
/// dense reference elements. Outcomes missing on one side count as zero.
pub fn povm_gap(inst: &Instrument<f64>, reference: &BTreeMap<OutcomeLabel, ComplexMatrix>) -> f64 {
    let d = inst.dim_in;
    let zero = ComplexMatrix::zeros(d, d);
    let mut worst = 0f64;
    for (k, e) in reference {
        let got = inst.branches.get(k).map_or(zero.clone(), |l| gram_sum(l, d));
        worst = worst.max(max_diff(&got, e));
    }
    for (k, l) in &inst.branches {
        if !reference.contains_key(k) {
            worst = worst.max(max_diff(&gram_sum(l, d), &zero));
        }
    }
    worst
}

/// `S^{-1/2}` through an eigendecomposition; S must be positive definite.
fn inv_sqrt(s: &ComplexMatrix) -> ComplexMatrix {
    hermitian_eig(s, 1e-12).unwrap().apply(|l| 1.0 / l.sqrt())
}

/// Random POVM on `d` dimensions whose element `i` has rank `ranks[i]`:
/// `E_i = S^{-1/2} G_i†G_i S^{-1/2}` with `G_i` a `ranks[i] × d` Gaussian
/// matrix. Labels are big-endian indices of minimal length.
pub fn random_povm_with_ranks(d: usize, ranks: &[usize], seed: u64) -> (Povm<f64>, BTreeMap<OutcomeLabel, ComplexMatrix>) {
    let grams: Vec<ComplexMatrix> = ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let g = gaussian_matrix::<f64>(r, d, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            mul(&dagger(&g), &g)
        })
        .collect();
    let mut s = ComplexMatrix::zeros(d, d);
    for g in &grams {
        s += g;
    }
    let w = inv_sqrt(&s);
    let len = bits_for(ranks.len());
    let dense: BTreeMap<OutcomeLabel, ComplexMatrix> =
        grams.iter().enumerate().map(|(i, g)| (label(i, len), mul(&mul(&w, g), &w))).collect();
    let povm = Povm::new(d, dense.iter().map(|(k, e)| (k.clone(), Effect::Dense(e.clone()))).collect()).unwrap();
    (povm, dense)
}

pub fn random_povm(d: usize, outcomes: usize, seed: u64) -> (Povm<f64>, BTreeMap<OutcomeLabel, ComplexMatrix>) {
    random_povm_with_ranks(d, &vec![d; outcomes], seed)
}

/// Digits of `i` in the mixed radix `dims`, first digit most significant.
pub fn digits(mut i: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for p in (0..dims.len()).rev() {
        out[p] = i % dims[p];
        i /= dims[p];
    }
    out
}

/// `F ⊗ I_B` with factor B at position `b` of `dims`, entry by entry.
pub fn tensor_identity_at(f: &ComplexMatrix, dims: &[usize], b: usize) -> ComplexMatrix {
    let d: usize = dims.iter().product();
    let rest = |i: usize| {
        let dg = digits(i, dims);
        let r = (0..dims.len()).filter(|&p| p != b).fold(0, |acc, p| acc * dims[p] + dg[p]);
        (r, dg[b])
    };
    let mut out = ComplexMatrix::zeros(f.rows() * dims[b], d);
    for c in 0..d {
        let (rc, bc) = rest(c);
        for o in 0..f.rows() {
            out[(o * dims[b] + bc, c)] = f[(o, rc)];
        }
    }
    out
}

pub fn haar(d: usize, seed: u64) -> ComplexMatrix {
    haar_unitary::<f64>(d, seed)
}

/// Rank over GF(2) by plain elimination on `u64` words.
pub fn gf2_rank(mut rows: Vec<u64>) -> usize {
    let mut rank = 0;
    for bit in (0..64).rev() {
        let Some(p) = (rank..rows.len()).find(|&r| rows[r] >> bit & 1 == 1) else { continue };
        rows.swap(rank, p);
        for r in 0..rows.len() {
            if r != rank && rows[r] >> bit & 1 == 1 {
                rows[r] ^= rows[rank];
            }
        }
        rank += 1;
    }
    rank
}

/// X and Z incidence columns of each qubit, as words over the generators,
/// parsed straight from the Pauli strings.
pub fn check_columns(generators: &[&str]) -> Vec<(u64, u64)> {
    let n = generators[0].len();
    (0..n)
        .map(|q| {
            let mut x = 0u64;
            let mut z = 0u64;
            for (i, g) in generators.iter().enumerate() {
                let c = g.as_bytes()[q];
                if c == b'X' || c == b'Y' {
                    x |= 1 << i;
                }
                if c == b'Z' || c == b'Y' {
                    z |= 1 << i;
                }
            }
            (x, z)
        })
        .collect()
}

/// Brute force over all ordered `t`-tuples of distinct qubits: true iff some
/// tuple satisfies the suffix span bound at every position.
pub fn brute_force_feasible(generators: &[&str], k: usize, t: usize) -> (bool, u64) {
    let cols = check_columns(generators);
    let n = cols.len();
    let mut tried = 0u64;
    let mut tuple = Vec::new();
    fn rec(cols: &[(u64, u64)], n: usize, k: usize, t: usize, tuple: &mut Vec<usize>, tried: &mut u64) -> bool {
        if tuple.len() == t {
            *tried += 1;
            return (1..=t).all(|s| {
                let rows: Vec<u64> = tuple[s - 1..].iter().flat_map(|&q| [cols[q].0, cols[q].1]).collect();
                gf2_rank(rows) + s <= n - k
            });
        }
        for q in 0..n {
            if !tuple.contains(&q) {
                tuple.push(q);
                if rec(cols, n, k, t, tuple, tried) {
                    return true;
                }
                tuple.pop();
            }
        }
        false
    }
    let found = rec(&cols, n, k, t, &mut tuple, &mut tried);
    (found, tried)
}

/// The operator acting as `F` on all factors except `b` and as identity on
/// factor `b`, in the original factor order.
pub fn identity_on_factor(f: &ComplexMatrix, dims: &[usize], b: usize) -> ComplexMatrix {
    let d: usize = dims.iter().product();
    let split = |i: usize| {
        let dg = digits(i, dims);
        let r = (0..dims.len()).filter(|&p| p != b).fold(0, |acc, p| acc * dims[p] + dg[p]);
        (r, dg[b])
    };
    let mut out = ComplexMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let ((ri, bi), (rj, bj)) = (split(i), split(j));
            if bi == bj {
                out[(i, j)] = f[(ri, rj)];
            }
        }
    }
    out
}

/// As [`povm_gap`] against another instrument, one outcome at a time so
/// large instruments never hold all dense elements at once.
pub fn povm_gap_between(a: &Instrument<f64>, b: &Instrument<f64>) -> f64 {
    let d = a.dim_in;
    assert_eq!(d, b.dim_in);
    let zero = ComplexMatrix::zeros(d, d);
    let labels: std::collections::BTreeSet<&OutcomeLabel> = a.branches.keys().chain(b.branches.keys()).collect();
    labels
        .into_iter()
        .map(|k| {
            let ga = a.branches.get(k).map_or(zero.clone(), |l| gram_sum(l, d));
            let gb = b.branches.get(k).map_or(zero.clone(), |l| gram_sum(l, d));
            max_diff(&ga, &gb)
        })
        .fold(0f64, f64::max)
}
