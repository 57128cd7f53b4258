//! Linear algebra over GF(2): bit-packed vectors, row-echelon subspaces,
//! coset labels, and the Walsh transform.
//!
//! Vectors are limited to 64 coordinates, which covers every ambient space
//! used here (check-matrix columns live in GF(2)^(n-k), rows in GF(2)^(2n)).

use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Largest supported vector length.
pub const MAX_BITS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum F2Error {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("vector length {0} exceeds {MAX_BITS} bits")]
    TooLong(usize),
    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("invalid bit character {0:?}")]
    BadChar(char),
}

/// A vector in GF(2)^len. Coordinate `i` is stored in bit `i` of the word.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct F2Vector {
    bits: u64,
    len: usize,
}

fn mask(len: usize) -> u64 {
    if len == 64 {
        u64::MAX
    } else {
        (1u64 << len) - 1
    }
}

impl F2Vector {
    pub fn zeros(len: usize) -> Self {
        assert!(len <= MAX_BITS, "F2Vector length {len} exceeds {MAX_BITS}");
        F2Vector { bits: 0, len }
    }

    /// Builds a vector from a raw word; coordinate `i` is bit `i`.
    pub fn from_word(bits: u64, len: usize) -> Self {
        assert!(len <= MAX_BITS, "F2Vector length {len} exceeds {MAX_BITS}");
        F2Vector { bits: bits & mask(len), len }
    }

    /// Standard basis vector e_i.
    pub fn unit(len: usize, i: usize) -> Self {
        let mut v = Self::zeros(len);
        v.set(i, true);
        v
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut v = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            v.set(i, b);
        }
        v
    }

    /// Interprets `index` as a big-endian bit string: coordinate 0 is the
    /// most significant bit.
    pub fn from_index(index: usize, len: usize) -> Self {
        let mut v = Self::zeros(len);
        for i in 0..len {
            v.set(i, (index >> (len - 1 - i)) & 1 == 1);
        }
        v
    }

    /// Inverse of [`F2Vector::from_index`].
    pub fn to_index(&self) -> usize {
        (0..self.len).fold(0usize, |acc, i| (acc << 1) | self.get(i) as usize)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn word(&self) -> u64 {
        self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "index {i} out of range for length {}", self.len);
        (self.bits >> i) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "index {i} out of range for length {}", self.len);
        if value {
            self.bits |= 1 << i;
        } else {
            self.bits &= !(1 << i);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.bits == 0
    }

    pub fn weight(&self) -> u32 {
        self.bits.count_ones()
    }

    /// Position of the lowest-index nonzero coordinate.
    pub fn leading(&self) -> Option<usize> {
        (self.bits != 0).then(|| self.bits.trailing_zeros() as usize)
    }

    pub fn xor(&self, other: &F2Vector) -> Result<F2Vector, F2Error> {
        check_len(self.len, other.len)?;
        Ok(F2Vector { bits: self.bits ^ other.bits, len: self.len })
    }

    /// Inner product s·r mod 2.
    pub fn dot(&self, other: &F2Vector) -> Result<bool, F2Error> {
        check_len(self.len, other.len)?;
        Ok((self.bits & other.bits).count_ones() % 2 == 1)
    }

    /// Concatenation `self || other`.
    pub fn concat(&self, other: &F2Vector) -> F2Vector {
        let len = self.len + other.len;
        assert!(len <= MAX_BITS, "concatenation exceeds {MAX_BITS} bits");
        F2Vector { bits: self.bits | (other.bits << self.len), len }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }
}

fn check_len(expected: usize, found: usize) -> Result<(), F2Error> {
    if expected == found {
        Ok(())
    } else {
        Err(F2Error::LengthMismatch { expected, found })
    }
}

impl fmt::Display for F2Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.iter() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for F2Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F2Vector({self})")
    }
}

impl FromStr for F2Vector {
    type Err = F2Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n = s.chars().count();
        if n > MAX_BITS {
            return Err(F2Error::TooLong(n));
        }
        let mut v = F2Vector::zeros(n);
        for (i, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' => v.set(i, true),
                other => return Err(F2Error::BadChar(other)),
            }
        }
        Ok(v)
    }
}

impl Serialize for F2Vector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for F2Vector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A rectangular GF(2) matrix stored by rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct F2Matrix {
    rows: Vec<F2Vector>,
    cols: usize,
}

impl F2Matrix {
    pub fn new(rows: Vec<F2Vector>, cols: usize) -> Result<Self, F2Error> {
        for r in &rows {
            check_len(cols, r.len())?;
        }
        Ok(F2Matrix { rows, cols })
    }

    pub fn from_rows(rows: Vec<F2Vector>) -> Result<Self, F2Error> {
        let cols = rows.first().map_or(0, |r| r.len());
        Self::new(rows, cols)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        F2Matrix { rows: vec![F2Vector::zeros(cols); rows], cols }
    }

    pub fn rows(&self) -> &[F2Vector] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.rows[r].get(c)
    }

    /// Column `c` as a vector of length `n_rows`.
    pub fn column(&self, c: usize) -> F2Vector {
        let mut v = F2Vector::zeros(self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            v.set(i, r.get(c));
        }
        v
    }
}

/// GF(2) row rank by Gaussian elimination.
pub fn rank(m: &F2Matrix) -> usize {
    let mut pivots: Vec<u64> = Vec::new();
    for row in m.rows() {
        let mut w = row.word();
        for &p in &pivots {
            w = w.min(w ^ p);
        }
        if w != 0 {
            pivots.push(w);
            pivots.sort_unstable_by(|a, b| b.cmp(a));
        }
    }
    pivots.len()
}

/// A subspace of GF(2)^ambient held as a basis in reduced row-echelon form
/// with leftmost (lowest-index) pivots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct F2Subspace {
    basis: Vec<F2Vector>,
    pivots: Vec<usize>,
    ambient: usize,
}

impl F2Subspace {
    pub fn zero(ambient: usize) -> Self {
        assert!(ambient <= MAX_BITS);
        F2Subspace { basis: Vec::new(), pivots: Vec::new(), ambient }
    }

    pub fn full(ambient: usize) -> Self {
        let mut s = Self::zero(ambient);
        for i in 0..ambient {
            s.insert(F2Vector::unit(ambient, i)).expect("unit vector has ambient length");
        }
        s
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[F2Vector] {
        &self.basis
    }

    pub fn pivots(&self) -> &[usize] {
        &self.pivots
    }

    pub fn basis_matrix(&self) -> F2Matrix {
        F2Matrix { rows: self.basis.clone(), cols: self.ambient }
    }

    /// Reduces `v` against the basis; the result has zeros on all pivots.
    pub fn reduce(&self, v: &F2Vector) -> Result<F2Vector, F2Error> {
        check_len(self.ambient, v.len())?;
        let mut w = v.word();
        for (row, &p) in self.basis.iter().zip(&self.pivots) {
            if (w >> p) & 1 == 1 {
                w ^= row.word();
            }
        }
        Ok(F2Vector::from_word(w, self.ambient))
    }

    /// Adds `v` to the spanning set. Returns `true` if the dimension grew.
    pub fn insert(&mut self, v: F2Vector) -> Result<bool, F2Error> {
        let r = self.reduce(&v)?;
        let Some(p) = r.leading() else {
            return Ok(false);
        };
        for row in &mut self.basis {
            if row.get(p) {
                *row = F2Vector::from_word(row.word() ^ r.word(), self.ambient);
            }
        }
        let at = self.pivots.partition_point(|&q| q < p);
        self.pivots.insert(at, p);
        self.basis.insert(at, r);
        Ok(true)
    }

    /// Every element of the subspace, in the order of the binary counter over
    /// basis coefficients.
    pub fn elements(&self) -> Vec<F2Vector> {
        let d = self.dim();
        (0..1usize << d)
            .map(|c| {
                let w = (0..d)
                    .filter(|i| (c >> i) & 1 == 1)
                    .fold(0u64, |acc, i| acc ^ self.basis[i].word());
                F2Vector::from_word(w, self.ambient)
            })
            .collect()
    }

    /// The annihilator {u : u·v = 0 for all v in self}.
    pub fn orthogonal_complement(&self) -> F2Subspace {
        let mut out = F2Subspace::zero(self.ambient);
        for c in (0..self.ambient).filter(|c| !self.pivots.contains(c)) {
            let mut u = F2Vector::unit(self.ambient, c);
            for (row, &p) in self.basis.iter().zip(&self.pivots) {
                if row.get(c) {
                    u.set(p, true);
                }
            }
            out.insert(u).expect("lengths agree");
        }
        out
    }

    /// Coordinates that are not pivots, ascending. Coset labels are read off
    /// these positions.
    pub fn free_coordinates(&self) -> Vec<usize> {
        (0..self.ambient).filter(|c| !self.pivots.contains(c)).collect()
    }
}

/// Echelonized span of `vectors`.
pub fn span(vectors: &[F2Vector]) -> Result<F2Subspace, F2Error> {
    let ambient = vectors.first().map_or(0, |v| v.len());
    span_in(ambient, vectors)
}

/// Span with an explicit ambient dimension, so the empty list is allowed.
pub fn span_in(ambient: usize, vectors: &[F2Vector]) -> Result<F2Subspace, F2Error> {
    if ambient > MAX_BITS {
        return Err(F2Error::TooLong(ambient));
    }
    let mut s = F2Subspace::zero(ambient);
    for v in vectors {
        s.insert(*v)?;
    }
    Ok(s)
}

pub fn contains(s: &F2Subspace, v: &F2Vector) -> Result<bool, F2Error> {
    Ok(s.reduce(v)?.is_zero())
}

/// Canonical label of the coset `s + J`: the free coordinates of the reduced
/// representative. Length is `ambient - dim J`.
pub fn coset_label(s: &F2Vector, j: &F2Subspace) -> Result<F2Vector, F2Error> {
    let r = j.reduce(s)?;
    let free = j.free_coordinates();
    let mut label = F2Vector::zeros(free.len());
    for (i, &c) in free.iter().enumerate() {
        label.set(i, r.get(c));
    }
    Ok(label)
}

/// Unnormalized Walsh-Hadamard transform: out(j) = Σ_i (-1)^{i·j} f(i), where
/// index bits are read big-endian as in [`F2Vector::from_index`].
pub fn walsh_transform<T: Float>(f: &[T]) -> Result<Vec<T>, F2Error> {
    let n = f.len();
    if !n.is_power_of_two() {
        return Err(F2Error::NotPowerOfTwo(n));
    }
    let mut out = f.to_vec();
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(2 * h) {
            for i in block..block + h {
                let (a, b) = (out[i], out[i + h]);
                out[i] = a + b;
                out[i + h] = a - b;
            }
        }
        h *= 2;
    }
    Ok(out)
}

/// Exhaustive test that `f(x + v) == f(x)` for every x and every v in `v_space`.
pub fn coset_constant<T: Float>(f: &[T], v_space: &F2Subspace) -> Result<bool, F2Error> {
    coset_constant_within(f, v_space, T::zero())
}

/// As [`coset_constant`] with an absolute tolerance.
pub fn coset_constant_within<T: Float>(
    f: &[T],
    v_space: &F2Subspace,
    tol: T,
) -> Result<bool, F2Error> {
    let m = v_space.ambient_dim();
    check_len(1usize << m, f.len())?;
    let elems = v_space.elements();
    for x in 0..f.len() {
        let xv = F2Vector::from_index(x, m);
        for v in &elems {
            let y = xv.xor(v)?.to_index();
            if (f[x] - f[y]).abs() > tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
