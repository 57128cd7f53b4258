//! Stabilizer codes: parsing and validation, syndrome projectors, an
//! encoding unitary, and the distillation instrument built from it.
//!
//! Qubit 1 is the leftmost character of a Pauli string and the most
//! significant tensor factor.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::f2::{self, F2Matrix, F2Vector};
use crate::instruments::{Instrument, OutcomeLabel};
use crate::linalg::column_space;
use crate::{ComplexMatrix, C64};

/// Tolerance for the encoding relations.
pub const ENCODING_TOL: f64 = 1e-8;

/// Tolerance for the trace certificate `Tr[P_0] = 2^k`.
pub const TRACE_TOL: f64 = 1e-6;

/// Largest supported code length; dense operators have dimension `2^n`.
pub const MAX_QUBITS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilizerError {
    #[error("generator {index}: {reason}")]
    BadGenerator { index: usize, reason: String },
    #[error("generators {0} and {1} anticommute")]
    Anticommute(usize, usize),
    #[error("generators are dependent: check-matrix rank {rank}, expected {expected}")]
    Dependent { rank: usize, expected: usize },
    #[error("expected n - k = {expected} generators, found {found}")]
    GeneratorCount { expected: usize, found: usize },
    #[error("Tr[P_0] = {found}, expected {expected}")]
    Trace { found: f64, expected: f64 },
    #[error("code has {0} qubits, above the supported {MAX_QUBITS}")]
    TooLarge(usize),
    #[error("encoding relation for generator {index} off by {residual:e}")]
    Encoding { index: usize, residual: f64 },
    #[error("no pure error for syndrome {0}")]
    PureError(String),
    #[error("unknown builtin code {0:?}")]
    UnknownBuiltin(String),
    #[error("invalid code JSON: {0}")]
    Json(String),
}

/// `sign · Π_j i^{x_j z_j} X^{x_j} Z^{z_j}`. Coordinate `j` of `x`/`z` is
/// qubit `j + 1`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PauliString {
    pub n: usize,
    pub x: F2Vector,
    pub z: F2Vector,
    /// +1 or -1.
    pub sign: i8,
}

impl PauliString {
    pub fn identity(n: usize) -> Self {
        PauliString { n, x: F2Vector::zeros(n), z: F2Vector::zeros(n), sign: 1 }
    }

    pub fn parse(s: &str, sign: i8) -> Result<Self, String> {
        let chars: Vec<char> = s.chars().collect();
        let n = chars.len();
        if n > f2::MAX_BITS {
            return Err(format!("length {n} too long"));
        }
        if sign != 1 && sign != -1 {
            return Err(format!("sign must be +1 or -1, found {sign}"));
        }
        let mut p = PauliString::identity(n);
        p.sign = sign;
        for (j, c) in chars.iter().enumerate() {
            let (xb, zb) = match c.to_ascii_uppercase() {
                'I' => (false, false),
                'X' => (true, false),
                'Y' => (true, true),
                'Z' => (false, true),
                other => return Err(format!("invalid Pauli character {other:?}")),
            };
            p.x.set(j, xb);
            p.z.set(j, zb);
        }
        Ok(p)
    }

    /// Symplectic product; true when the two strings anticommute.
    pub fn anticommutes(&self, other: &PauliString) -> bool {
        ((self.x.word() & other.z.word()).count_ones() + (self.z.word() & other.x.word()).count_ones()) % 2 == 1
    }

    /// Phase exponent `e` in `i^e X^x Z^z`.
    fn phase(&self) -> u32 {
        let base = (self.x.word() & self.z.word()).count_ones();
        (base + if self.sign < 0 { 2 } else { 0 }) % 4
    }

    /// Image of a computational basis state: `P|b⟩ = c |b ⊕ x⟩`. `b` is a
    /// big-endian index.
    pub fn apply_basis(&self, b: usize) -> (usize, C64) {
        let xi = self.index_of(&self.x);
        let zi = self.index_of(&self.z);
        let e = self.phase() + 2 * ((zi & b).count_ones() % 2);
        (b ^ xi, i_pow(e))
    }

    fn index_of(&self, v: &F2Vector) -> usize {
        v.to_index()
    }

    /// `P |ψ⟩` for a state vector of length `2^n`.
    pub fn apply(&self, psi: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); psi.len()];
        for (b, amp) in psi.iter().enumerate() {
            let (t, c) = self.apply_basis(b);
            out[t] = c * amp;
        }
        out
    }

    pub fn dense(&self) -> ComplexMatrix {
        let d = 1usize << self.n;
        let mut m = ComplexMatrix::zeros(d, d);
        for b in 0..d {
            let (t, c) = self.apply_basis(b);
            m[(t, b)] = c;
        }
        m
    }
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.sign < 0 { "-" } else { "+" })?;
        for j in 0..self.n {
            let c = match (self.x.get(j), self.z.get(j)) {
                (false, false) => 'I',
                (true, false) => 'X',
                (true, true) => 'Y',
                (false, true) => 'Z',
            };
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

fn i_pow(e: u32) -> C64 {
    match e % 4 {
        0 => C64::new(1.0, 0.0),
        1 => C64::new(0.0, 1.0),
        2 => C64::new(-1.0, 0.0),
        _ => C64::new(0.0, -1.0),
    }
}

/// Pauli operator tracked as `i^e X^x Z^z` for exact products.
#[derive(Clone, Copy, PartialEq, Eq)]
struct PhasedPauli {
    e: u32,
    x: u64,
    z: u64,
}

impl PhasedPauli {
    fn of(p: &PauliString) -> Self {
        PhasedPauli { e: p.phase(), x: p.x.word(), z: p.z.word() }
    }

    fn mul(&self, o: &PhasedPauli) -> PhasedPauli {
        // Z^{z1} X^{x2} = (-1)^{z1·x2} X^{x2} Z^{z1}.
        let swap = 2 * ((self.z & o.x).count_ones() % 2);
        PhasedPauli { e: (self.e + o.e + swap) % 4, x: self.x ^ o.x, z: self.z ^ o.z }
    }
}

/// Binary check matrix: row `i` is `(x | z)` of generator `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckMatrix {
    pub n: usize,
    pub xz: F2Matrix,
}

impl CheckMatrix {
    pub fn n_generators(&self) -> usize {
        self.xz.n_rows()
    }

    /// `x_q` in GF(2)^(n-k): X-incidence of qubit `q` (0-based) per generator.
    pub fn x_column(&self, q: usize) -> F2Vector {
        self.xz.column(q)
    }

    /// `z_q` in GF(2)^(n-k).
    pub fn z_column(&self, q: usize) -> F2Vector {
        self.xz.column(self.n + q)
    }

    pub fn rank(&self) -> usize {
        f2::rank(&self.xz)
    }
}

/// JSON form of a code.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CodeSpec {
    #[serde(default)]
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub generators: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signs: Option<Vec<i8>>,
}

/// A validated `[[n, k]]` stabilizer code.
#[derive(Clone, Debug)]
pub struct StabilizerCode {
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub generators: Vec<PauliString>,
}

impl StabilizerCode {
    /// Validates commutation, independence and the trace certificate.
    pub fn new(name: &str, n: usize, k: usize, generators: Vec<PauliString>) -> Result<Self, StabilizerError> {
        if n > MAX_QUBITS {
            return Err(StabilizerError::TooLarge(n));
        }
        for (i, g) in generators.iter().enumerate() {
            if g.n != n {
                return Err(StabilizerError::BadGenerator {
                    index: i,
                    reason: format!("length {} differs from n = {n}", g.n),
                });
            }
        }
        for i in 0..generators.len() {
            for j in i + 1..generators.len() {
                if generators[i].anticommutes(&generators[j]) {
                    return Err(StabilizerError::Anticommute(i, j));
                }
            }
        }
        if k > n || generators.len() != n - k {
            return Err(StabilizerError::GeneratorCount { expected: n.saturating_sub(k), found: generators.len() });
        }
        let code = StabilizerCode { name: name.to_string(), n, k, generators };
        let rank = code.check_matrix().rank();
        if rank != n - k {
            return Err(StabilizerError::Dependent { rank, expected: n - k });
        }
        let tr = code.trace_p0();
        let expected = (1u64 << k) as f64;
        if (tr - expected).abs() > TRACE_TOL {
            return Err(StabilizerError::Trace { found: tr, expected });
        }
        Ok(code)
    }

    pub fn from_spec(spec: &CodeSpec) -> Result<Self, StabilizerError> {
        let signs = match &spec.signs {
            Some(s) if s.len() != spec.generators.len() => {
                return Err(StabilizerError::Json(format!(
                    "{} signs for {} generators",
                    s.len(),
                    spec.generators.len()
                )))
            }
            Some(s) => s.clone(),
            None => vec![1; spec.generators.len()],
        };
        let gens = spec
            .generators
            .iter()
            .zip(&signs)
            .enumerate()
            .map(|(i, (g, &s))| {
                PauliString::parse(g, s).map_err(|reason| StabilizerError::BadGenerator { index: i, reason })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(&spec.name, spec.n, spec.k, gens)
    }

    pub fn to_spec(&self) -> CodeSpec {
        let signs: Vec<i8> = self.generators.iter().map(|g| g.sign).collect();
        CodeSpec {
            name: self.name.clone(),
            n: self.n,
            k: self.k,
            generators: self.generators.iter().map(|g| g.to_string()[1..].to_string()).collect(),
            signs: signs.iter().any(|&s| s < 0).then_some(signs),
        }
    }

    pub fn n_checks(&self) -> usize {
        self.n - self.k
    }

    pub fn check_matrix(&self) -> CheckMatrix {
        let rows = self
            .generators
            .iter()
            .map(|g| g.x.concat(&g.z))
            .collect::<Vec<_>>();
        let xz = F2Matrix::new(rows, 2 * self.n).expect("rows share length 2n");
        CheckMatrix { n: self.n, xz }
    }

    /// `g^r = Π_i g_i^{r_i}` with exact phase.
    fn product(&self, r: usize) -> PhasedPauli {
        let nc = self.n_checks();
        let mut acc = PhasedPauli { e: 0, x: 0, z: 0 };
        for (i, g) in self.generators.iter().enumerate() {
            if (r >> (nc - 1 - i)) & 1 == 1 {
                acc = acc.mul(&PhasedPauli::of(g));
            }
        }
        acc
    }

    /// `Tr[P_0] = 2^{k} · Σ_r [g^r ∝ I] · phase(g^r)`, computed symbolically.
    fn trace_p0(&self) -> f64 {
        let nc = self.n_checks();
        let mut sum = C64::new(0.0, 0.0);
        for r in 0..1usize << nc {
            let p = self.product(r);
            if p.x == 0 && p.z == 0 {
                sum += i_pow(p.e);
            }
        }
        sum.re * 2f64.powi(self.n as i32 - nc as i32)
    }

    /// The `2^{n-k}` Pauli products `g^r` as explicit strings, indexed by `r`
    /// read big-endian (generator 1 is the most significant bit).
    fn products(&self) -> Vec<(usize, usize, C64)> {
        let nc = self.n_checks();
        (0..1usize << nc)
            .map(|r| {
                let p = self.product(r);
                let to_idx = |w: u64| F2Vector::from_word(w, self.n).to_index();
                (to_idx(p.x), to_idx(p.z), i_pow(p.e))
            })
            .collect()
    }
}

fn check_syndrome(code: &StabilizerCode, s: &F2Vector) -> Result<(), StabilizerError> {
    if s.len() != code.n_checks() {
        return Err(StabilizerError::PureError(format!(
            "syndrome length {} differs from n - k = {}",
            s.len(),
            code.n_checks()
        )));
    }
    Ok(())
}

/// Columns `j` of `P_s` for the listed basis states, via the monomial action
/// of each `g^r`.
fn projector_columns(code: &StabilizerCode, s: &F2Vector, cols: &[usize]) -> ComplexMatrix {
    let d = 1usize << code.n;
    let nc = code.n_checks();
    let norm = 2f64.powi(-(nc as i32));
    let products = code.products();
    let s_idx = s.to_index();
    let mut out = ComplexMatrix::zeros(d, cols.len());
    for (r, &(xi, zi, ph)) in products.iter().enumerate() {
        let sign = if (s_idx & r).count_ones() % 2 == 1 { -norm } else { norm };
        for (c, &b) in cols.iter().enumerate() {
            let z_sign = if (zi & b).count_ones() % 2 == 1 { -sign } else { sign };
            out[(b ^ xi, c)] += ph * z_sign;
        }
    }
    out
}

/// `P_s = 2^{-(n-k)} Σ_r (-1)^{s·r} g^r`, dense.
pub fn syndrome_projector(code: &StabilizerCode, s: &F2Vector) -> Result<ComplexMatrix, StabilizerError> {
    check_syndrome(code, s)?;
    let d = 1usize << code.n;
    let all: Vec<usize> = (0..d).collect();
    Ok(projector_columns(code, s, &all))
}

/// A Pauli `D_s` anticommuting with exactly the generators flagged in `s`.
pub fn pure_error(code: &StabilizerCode, s: &F2Vector) -> Result<PauliString, StabilizerError> {
    check_syndrome(code, s)?;
    let n = code.n;
    let nc = code.n_checks();
    // Unknown (a | b) in GF(2)^{2n}; anticommutation with g_i is
    // x_i·b + z_i·a = s_i, i.e. row (z_i | x_i) dotted with (a | b).
    let mut rows: Vec<(u128, bool)> = code
        .generators
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let row = (g.z.word() as u128) | ((g.x.word() as u128) << n);
            (row, s.get(i))
        })
        .collect();
    let mut pivots = Vec::new();
    let mut r = 0;
    for col in 0..2 * n {
        let Some(p) = (r..nc).find(|&i| (rows[i].0 >> col) & 1 == 1) else { continue };
        rows.swap(r, p);
        for i in 0..nc {
            if i != r && (rows[i].0 >> col) & 1 == 1 {
                rows[i].0 ^= rows[r].0;
                rows[i].1 ^= rows[r].1;
            }
        }
        pivots.push(col);
        r += 1;
    }
    if rows[r..].iter().any(|&(row, rhs)| row == 0 && rhs) {
        return Err(StabilizerError::PureError(s.to_string()));
    }
    let mut sol: u128 = 0;
    for (i, &col) in pivots.iter().enumerate() {
        if rows[i].1 {
            sol |= 1 << col;
        }
    }
    let mask = (1u128 << n) - 1;
    let x = F2Vector::from_word((sol & mask) as u64, n);
    let z = F2Vector::from_word(((sol >> n) & mask) as u64, n);
    // The solution vector is (a | b) = (x-part | z-part) of D_s.
    let d = PauliString { n, x, z, sign: 1 };
    debug_assert!(code
        .generators
        .iter()
        .enumerate()
        .all(|(i, g)| g.anticommutes(&d) == s.get(i)));
    Ok(d)
}

/// Orthonormal basis of the code space Ran(P_0), as columns.
pub fn code_space_basis(code: &StabilizerCode) -> ComplexMatrix {
    let d = 1usize << code.n;
    let all: Vec<usize> = (0..d).collect();
    let p0 = projector_columns(code, &F2Vector::zeros(code.n_checks()), &all);
    column_space(&p0)
}

/// `U = U_enc†` with `U g_i U† = Z_i ⊗ I_out`. Row `s·2^k + j` is
/// `(D_s v_j)†` for an orthonormal basis `v_j` of the code space.
pub fn encoding_unitary(code: &StabilizerCode) -> Result<ComplexMatrix, StabilizerError> {
    let d = 1usize << code.n;
    let nc = code.n_checks();
    let dk = 1usize << code.k;
    let basis = code_space_basis(code);
    if basis.cols() != dk {
        return Err(StabilizerError::Trace { found: basis.cols() as f64, expected: dk as f64 });
    }
    let mut u = ComplexMatrix::zeros(d, d);
    for s_idx in 0..1usize << nc {
        let s = F2Vector::from_index(s_idx, nc);
        let ds = pure_error(code, &s)?;
        for j in 0..dk {
            let v = ds.apply(&basis.column(j));
            for (c, z) in v.iter().enumerate() {
                u[(s_idx * dk + j, c)] = z.conj();
            }
        }
    }
    for (i, g) in code.generators.iter().enumerate() {
        let residual = encoding_residual(&u, g, i, nc, dk);
        if residual > ENCODING_TOL {
            return Err(StabilizerError::Encoding { index: i, residual });
        }
    }
    Ok(u)
}

/// `‖U g − (Z_i ⊗ I) U‖_max`, which equals the conjugation residual for
/// unitary `U`. Uses the monomial form of `g`.
fn encoding_residual(u: &ComplexMatrix, g: &PauliString, i: usize, nc: usize, dk: usize) -> f64 {
    let d = u.rows();
    let mut worst = 0f64;
    for row in 0..d {
        let s_idx = row / dk;
        let flip = (s_idx >> (nc - 1 - i)) & 1 == 1;
        for b in 0..d {
            // (U g)[row, b] = U[row, t] c where g|b⟩ = c|t⟩.
            let (t, c) = g.apply_basis(b);
            let lhs = u[(row, t)] * c;
            let rhs = if flip { -u[(row, b)] } else { u[(row, b)] };
            worst = worst.max((lhs - rhs).norm());
        }
    }
    worst
}

/// Syndrome label `s` as an outcome label of length n - k.
pub fn syndrome_label(s_idx: usize, nc: usize) -> OutcomeLabel {
    OutcomeLabel::from_index(s_idx, nc)
}

/// Λ_s(ρ) = Tr_R[(|s⟩⟨s| ⊗ I) U ρ U†] with Kraus `A_s = (⟨s| ⊗ I) U`.
pub fn distillation_instrument(code: &StabilizerCode) -> Result<Instrument<f64>, StabilizerError> {
    let u = encoding_unitary(code)?;
    Ok(distillation_from_unitary(code, &u))
}

/// As [`distillation_instrument`] for a given `U`.
pub fn distillation_from_unitary(code: &StabilizerCode, u: &ComplexMatrix) -> Instrument<f64> {
    let nc = code.n_checks();
    let dk = 1usize << code.k;
    let branches: BTreeMap<_, _> = (0..1usize << nc)
        .map(|s| {
            let rows: Vec<usize> = (s * dk..(s + 1) * dk).collect();
            (syndrome_label(s, nc), vec![u.select_rows(&rows)])
        })
        .collect();
    Instrument::from_parts(1 << code.n, dk, branches)
}

/// Parses the JSON code schema and validates the result.
pub fn parse_code(json: &str) -> Result<StabilizerCode, StabilizerError> {
    let spec: CodeSpec = serde_json::from_str(json).map_err(|e| StabilizerError::Json(e.to_string()))?;
    StabilizerCode::from_spec(&spec)
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 3] = ["five_one_three", "steane", "shor"];

pub fn builtin_spec(name: &str) -> Result<CodeSpec, StabilizerError> {
    let (full, n, gens): (&str, usize, &[&str]) = match name {
        "five_one_three" => ("[[5,1,3]]", 5, &["XZZXI", "IXZZX", "XIXZZ", "ZXIXZ"]),
        "steane" => (
            "Steane [[7,1,3]]",
            7,
            &["IIIXXXX", "IXXIIXX", "XIXIXIX", "IIIZZZZ", "IZZIIZZ", "ZIZIZIZ"],
        ),
        "shor" => (
            "Shor [[9,1,3]]",
            9,
            &[
                "ZZIIIIIII",
                "IZZIIIIII",
                "IIIZZIIII",
                "IIIIZZIII",
                "IIIIIIZZI",
                "IIIIIIIZZ",
                "XXXXXXIII",
                "IIIXXXXXX",
            ],
        ),
        other => return Err(StabilizerError::UnknownBuiltin(other.to_string())),
    };
    Ok(CodeSpec {
        name: full.to_string(),
        n,
        k: 1,
        generators: gens.iter().map(|g| g.to_string()).collect(),
        signs: None,
    })
}

pub fn builtin(name: &str) -> Result<StabilizerCode, StabilizerError> {
    StabilizerCode::from_spec(&builtin_spec(name)?)
}
