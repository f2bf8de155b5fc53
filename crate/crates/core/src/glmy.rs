//! GLMY path homology of digraphs over ℤ/2 or ℚ.
//!
//! Paths are vertex-index sequences. Boundaries act on the regular quotient:
//! any face with a consecutive repeat is zero. Ω_n is the nullspace of the
//! map sending an allowed chain to the non-allowed coordinates of its
//! boundary, and all ranks come from exact Gaussian elimination.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::IdopNetwork;

/// Exact coefficient field.
pub trait Field: Clone + PartialEq + fmt::Debug + Send + Sync {
    fn zero() -> Self;
    fn one() -> Self;
    fn is_zero(&self) -> bool;
    fn add(&self, other: &Self) -> Self;
    fn sub(&self, other: &Self) -> Self;
    fn mul(&self, other: &Self) -> Self;
    fn neg(&self) -> Self;
    /// Multiplicative inverse; `None` for zero.
    fn inv(&self) -> Option<Self>;

    fn from_sign(negative: bool) -> Self {
        if negative {
            Self::one().neg()
        } else {
            Self::one()
        }
    }
}

/// The field with two elements. Invariant: the payload is 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Z2(u8);

impl Z2 {
    pub fn new(v: u8) -> Self {
        Z2(v & 1)
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl Field for Z2 {
    fn zero() -> Self {
        Z2(0)
    }
    fn one() -> Self {
        Z2(1)
    }
    fn is_zero(&self) -> bool {
        self.0 == 0
    }
    fn add(&self, other: &Self) -> Self {
        Z2(self.0 ^ other.0)
    }
    fn sub(&self, other: &Self) -> Self {
        Z2(self.0 ^ other.0)
    }
    fn mul(&self, other: &Self) -> Self {
        Z2(self.0 & other.0)
    }
    fn neg(&self) -> Self {
        *self
    }
    fn inv(&self) -> Option<Self> {
        (self.0 == 1).then_some(*self)
    }
}

impl Field for BigRational {
    fn zero() -> Self {
        Zero::zero()
    }
    fn one() -> Self {
        One::one()
    }
    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
    fn sub(&self, other: &Self) -> Self {
        self - other
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn neg(&self) -> Self {
        -self
    }
    fn inv(&self) -> Option<Self> {
        (!Zero::is_zero(self)).then(|| self.recip())
    }
}

pub type Q = BigRational;

pub fn rational(n: i64, d: i64) -> Q {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    #[default]
    Z2,
    Q,
}

impl std::str::FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "z2" => Ok(Self::Z2),
            "q" => Ok(Self::Q),
            other => Err(Error::Validation(format!("unknown field '{other}' (expected z2 or q)"))),
        }
    }
}

/// Dense row-major matrix over an exact field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMatrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Field> FieldMatrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, F::one());
        }
        m
    }

    /// Builds a `rows × columns.len()` matrix from column vectors.
    pub fn from_columns(rows: usize, columns: &[Vec<F>]) -> Self {
        let mut m = Self::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            assert_eq!(c.len(), rows, "column length mismatch");
            for (i, v) in c.iter().enumerate() {
                m.set(i, j, v.clone());
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &F {
        &self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    pub fn add_to(&mut self, i: usize, j: usize, v: &F) {
        let k = i * self.cols + j;
        self.data[k] = self.data[k].add(v);
    }

    pub fn column(&self, j: usize) -> Vec<F> {
        (0..self.rows).map(|i| self.get(i, j).clone()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(Field::is_zero)
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "dimension mismatch in product");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a.is_zero() {
                    continue;
                }
                for j in 0..other.cols {
                    let b = other.get(k, j);
                    if !b.is_zero() {
                        out.add_to(i, j, &a.mul(b));
                    }
                }
            }
        }
        out
    }

    /// Columns of `self` followed by columns of `other`.
    pub fn hstack(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "row mismatch in hstack");
        let mut out = Self::zeros(self.rows, self.cols + other.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(i, j, self.get(i, j).clone());
            }
            for j in 0..other.cols {
                out.set(i, self.cols + j, other.get(i, j).clone());
            }
        }
        out
    }

    /// Keeps the listed rows in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = Self::zeros(rows.len(), self.cols);
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..self.cols {
                out.set(r, j, self.get(i, j).clone());
            }
        }
        out
    }

    /// Reduced row echelon form and its pivot columns.
    pub fn rref(&self) -> (Self, Vec<usize>) {
        let mut m = self.clone();
        let mut pivots = Vec::new();
        let mut r = 0;
        for c in 0..m.cols {
            if r == m.rows {
                break;
            }
            let Some(p) = (r..m.rows).find(|&i| !m.get(i, c).is_zero()) else {
                continue;
            };
            m.swap_rows(r, p);
            let inv = m.get(r, c).inv().expect("pivot is nonzero");
            for j in c..m.cols {
                let v = m.get(r, j).mul(&inv);
                m.set(r, j, v);
            }
            for i in 0..m.rows {
                if i == r {
                    continue;
                }
                let f = m.get(i, c).clone();
                if f.is_zero() {
                    continue;
                }
                for j in c..m.cols {
                    let v = m.get(i, j).sub(&f.mul(m.get(r, j)));
                    m.set(i, j, v);
                }
            }
            pivots.push(c);
            r += 1;
        }
        (m, pivots)
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a != b {
            for j in 0..self.cols {
                self.data.swap(a * self.cols + j, b * self.cols + j);
            }
        }
    }

    pub fn rank(&self) -> usize {
        self.rref().1.len()
    }

    /// Basis of the right nullspace as the columns of a `cols × k` matrix.
    pub fn nullspace(&self) -> Self {
        let (r, pivots) = self.rref();
        let is_pivot: BTreeSet<usize> = pivots.iter().copied().collect();
        let free: Vec<usize> = (0..self.cols).filter(|c| !is_pivot.contains(c)).collect();
        let mut out = Self::zeros(self.cols, free.len());
        for (k, &f) in free.iter().enumerate() {
            out.set(f, k, F::one());
            for (row, &p) in pivots.iter().enumerate() {
                out.set(p, k, r.get(row, f).neg());
            }
        }
        out
    }
}

/// Finite digraph without loops or parallel arrows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Digraph {
    vertices: Vec<String>,
    arrows: BTreeSet<(usize, usize)>,
}

impl Digraph {
    pub fn new(vertices: Vec<String>, arrows: &[(usize, usize)]) -> Result<Self> {
        let mut names = BTreeSet::new();
        for v in &vertices {
            if !names.insert(v.as_str()) {
                return Err(Error::Validation(format!("duplicate vertex '{v}'")));
            }
        }
        let mut set = BTreeSet::new();
        for &(a, b) in arrows {
            if a >= vertices.len() || b >= vertices.len() {
                return Err(Error::Validation(format!("arrow ({a}, {b}) references a missing vertex")));
            }
            if a == b {
                return Err(Error::Validation(format!("self-loop on '{}'", vertices[a])));
            }
            if !set.insert((a, b)) {
                return Err(Error::Validation(format!(
                    "duplicate arrow {} -> {}",
                    vertices[a], vertices[b]
                )));
            }
        }
        Ok(Self { vertices, arrows: set })
    }

    /// Vertices named `0..n`.
    pub fn with_vertex_count(n: usize, arrows: &[(usize, usize)]) -> Result<Self> {
        Self::new((0..n).map(|i| i.to_string()).collect(), arrows)
    }

    pub fn from_network(network: &IdopNetwork) -> Result<Self> {
        Ok(WeightedDigraph::from_network(network)?.graph)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[String] {
        &self.vertices
    }

    pub fn arrows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.arrows.iter().copied()
    }

    pub fn n_arrows(&self) -> usize {
        self.arrows.len()
    }

    pub fn has_arrow(&self, a: usize, b: usize) -> bool {
        self.arrows.contains(&(a, b))
    }

    /// Same vertex set, arrows filtered by `keep`.
    pub fn subgraph(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        Self {
            vertices: self.vertices.clone(),
            arrows: self.arrows.iter().copied().filter(|&(a, b)| keep(a, b)).collect(),
        }
    }

    fn out_neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.vertices.len()];
        for &(a, b) in &self.arrows {
            out[a].push(b);
        }
        out
    }

    pub fn is_allowed(&self, path: &[usize]) -> bool {
        path.windows(2).all(|w| self.arrows.contains(&(w[0], w[1])))
    }
}

/// Digraph with one finite weight per arrow.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDigraph {
    pub graph: Digraph,
    pub weights: BTreeMap<(usize, usize), f64>,
}

impl WeightedDigraph {
    pub fn new(vertices: Vec<String>, arrows: &[(usize, usize, f64)]) -> Result<Self> {
        let pairs: Vec<(usize, usize)> = arrows.iter().map(|&(a, b, _)| (a, b)).collect();
        let graph = Digraph::new(vertices, &pairs)?;
        let mut weights = BTreeMap::new();
        for &(a, b, w) in arrows {
            if !w.is_finite() {
                return Err(Error::Validation(format!("non-finite weight on arrow ({a}, {b})")));
            }
            weights.insert((a, b), w);
        }
        Ok(Self { graph, weights })
    }

    /// Signs are dropped; weights are kept for filtrations.
    pub fn from_network(network: &IdopNetwork) -> Result<Self> {
        network.validate()?;
        let pos: HashMap<&str, usize> = network
            .nodes
            .iter()
            .enumerate()
            .map(|(k, n)| (n.id.as_str(), k))
            .collect();
        let arrows: Vec<(usize, usize, f64)> = network
            .edges
            .iter()
            .map(|e| (pos[e.source.as_str()], pos[e.target.as_str()], e.weight))
            .collect();
        Self::new(network.nodes.iter().map(|n| n.id.clone()).collect(), &arrows)
    }

    /// Parses `src dst [weight]` lines; blank lines and `#` comments are
    /// skipped, the weight defaults to 1 and vertices are numbered by first
    /// appearance.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut vertices: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut arrows = Vec::new();
        for (row, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::Parse {
                    row: row + 1,
                    column: fields.len().min(3) + 1,
                    message: format!("expected 'src dst [weight]', found {} fields", fields.len()),
                });
            }
            let mut id = |name: &str| {
                *index.entry(name.to_string()).or_insert_with(|| {
                    vertices.push(name.to_string());
                    vertices.len() - 1
                })
            };
            let (a, b) = (id(fields[0]), id(fields[1]));
            let w = match fields.get(2) {
                Some(s) => s.parse::<f64>().map_err(|e| Error::Parse {
                    row: row + 1,
                    column: 3,
                    message: format!("invalid weight '{s}': {e}"),
                })?,
                None => 1.0,
            };
            arrows.push((a, b, w));
        }
        Self::new(vertices, &arrows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Regular,
    Allowed,
}

/// Ordered list of n-paths (sequences of n + 1 vertices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathBasis {
    pub dim: usize,
    pub kind: PathKind,
    pub paths: Vec<Vec<usize>>,
}

impl PathBasis {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn index(&self) -> HashMap<&[usize], usize> {
        self.paths.iter().enumerate().map(|(k, p)| (p.as_slice(), k)).collect()
    }
}

/// All regular or allowed n-paths in lexicographic order of vertex indices.
pub fn enumerate_paths(graph: &Digraph, n: usize, kind: PathKind) -> PathBasis {
    let nv = graph.n_vertices();
    let next: Vec<Vec<usize>> = match kind {
        PathKind::Regular => (0..nv).map(|v| (0..nv).filter(|&w| w != v).collect()).collect(),
        PathKind::Allowed => graph.out_neighbors(),
    };
    // Vertices from which an allowed walk of each remaining length exists.
    let mut reach = vec![vec![true; nv]; n + 1];
    for len in 1..=n {
        for v in 0..nv {
            reach[len][v] = next[v].iter().any(|&w| reach[len - 1][w]);
        }
    }
    let mut paths = Vec::new();
    let mut stack = Vec::with_capacity(n + 1);
    fn extend(
        next: &[Vec<usize>],
        reach: &[Vec<bool>],
        n: usize,
        stack: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if stack.len() == n + 1 {
            out.push(stack.clone());
            return;
        }
        let remaining = n + 1 - stack.len() - 1;
        let last = *stack.last().expect("stack starts non-empty");
        for &w in &next[last] {
            if reach[remaining][w] {
                stack.push(w);
                extend(next, reach, n, stack, out);
                stack.pop();
            }
        }
    }
    for v in 0..nv {
        if reach[n][v] {
            stack.push(v);
            extend(&next, &reach, n, &mut stack, &mut paths);
            stack.pop();
        }
    }
    PathBasis { dim: n, kind, paths }
}

fn is_regular(path: &[usize]) -> bool {
    path.windows(2).all(|w| w[0] != w[1])
}

fn face(path: &[usize], i: usize) -> Vec<usize> {
    let mut f = Vec::with_capacity(path.len() - 1);
    f.extend_from_slice(&path[..i]);
    f.extend_from_slice(&path[i + 1..]);
    f
}

/// Matrix of ∂_n from `domain` (n-paths) to `codomain` ((n−1)-paths). Faces
/// with a consecutive repeat vanish; every other face must lie in `codomain`.
pub fn boundary_matrix<F: Field>(n: usize, domain: &PathBasis, codomain: &PathBasis) -> Result<FieldMatrix<F>> {
    if domain.dim != n {
        return Err(Error::Domain(format!("domain has dimension {}, expected {n}", domain.dim)));
    }
    if n == 0 {
        return Ok(FieldMatrix::zeros(0, domain.len()));
    }
    if codomain.dim + 1 != n {
        return Err(Error::Domain(format!(
            "codomain has dimension {}, expected {}",
            codomain.dim,
            n - 1
        )));
    }
    let index = codomain.index();
    let mut m = FieldMatrix::zeros(codomain.len(), domain.len());
    for (j, p) in domain.paths.iter().enumerate() {
        for i in 0..p.len() {
            let f = face(p, i);
            if !is_regular(&f) {
                continue;
            }
            let &row = index
                .get(f.as_slice())
                .ok_or_else(|| Error::Domain(format!("face {f:?} of {p:?} is not in the codomain basis")))?;
            m.add_to(row, j, &F::from_sign(i % 2 == 1));
        }
    }
    Ok(m)
}

/// Basis of Ω_n as columns of `coefficients`, written in the allowed basis.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaBasis<F> {
    pub allowed: PathBasis,
    pub coefficients: FieldMatrix<F>,
}

impl<F: Field> OmegaBasis<F> {
    pub fn dim(&self) -> usize {
        self.coefficients.cols()
    }
}

/// Ω_n = {ω ∈ span A_n : ∂ω ∈ span A_{n−1}}.
pub fn omega_basis<F: Field>(graph: &Digraph, n: usize) -> OmegaBasis<F> {
    let allowed = enumerate_paths(graph, n, PathKind::Allowed);
    let mut bad: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut entries = Vec::new();
    if n >= 2 {
        for (j, p) in allowed.paths.iter().enumerate() {
            for i in 0..p.len() {
                let f = face(p, i);
                if is_regular(&f) && !graph.is_allowed(&f) {
                    let next = bad.len();
                    let row = *bad.entry(f).or_insert(next);
                    entries.push((row, j, F::from_sign(i % 2 == 1)));
                }
            }
        }
    }
    let coefficients = if bad.is_empty() {
        FieldMatrix::identity(allowed.len())
    } else {
        let mut m = FieldMatrix::zeros(bad.len(), allowed.len());
        for (r, c, v) in entries {
            m.add_to(r, c, &v);
        }
        m.nullspace()
    };
    OmegaBasis { allowed, coefficients }
}

/// ∂_n on the allowed basis with rows restricted to allowed (n−1)-paths.
/// On Ω_n this is the full boundary, since the other rows vanish there.
fn allowed_boundary<F: Field>(graph: &Digraph, domain: &PathBasis, codomain: &PathBasis) -> FieldMatrix<F> {
    let index = codomain.index();
    let mut m = FieldMatrix::zeros(codomain.len(), domain.len());
    if domain.dim == 0 {
        return m;
    }
    for (j, p) in domain.paths.iter().enumerate() {
        for i in 0..p.len() {
            let f = face(p, i);
            if is_regular(&f) && graph.is_allowed(&f) {
                m.add_to(index[f.as_slice()], j, &F::from_sign(i % 2 == 1));
            }
        }
    }
    m
}

/// Cycles Z_p and boundaries B_p = ∂Ω_{p+1}, both written in the basis of
/// allowed p-paths. `cap` truncates the complex to paths of length ≤ cap.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpaces<F> {
    pub allowed: PathBasis,
    pub cycles: FieldMatrix<F>,
    pub boundaries: FieldMatrix<F>,
}

pub fn chain_spaces<F: Field>(graph: &Digraph, p: usize, cap: Option<usize>) -> ChainSpaces<F> {
    let within = |n: usize| cap.is_none_or(|c| n <= c);
    let omega = omega_basis::<F>(graph, p);
    let allowed = omega.allowed.clone();
    let cycles = if !within(p) {
        FieldMatrix::zeros(allowed.len(), 0)
    } else if p == 0 {
        omega.coefficients
    } else {
        let below = enumerate_paths(graph, p - 1, PathKind::Allowed);
        let d = allowed_boundary::<F>(graph, &allowed, &below).mul(&omega.coefficients);
        omega.coefficients.mul(&d.nullspace())
    };
    let boundaries = if !within(p + 1) {
        FieldMatrix::zeros(allowed.len(), 0)
    } else {
        let up = omega_basis::<F>(graph, p + 1);
        allowed_boundary::<F>(graph, &up.allowed, &allowed).mul(&up.coefficients)
    };
    ChainSpaces {
        allowed,
        cycles,
        boundaries,
    }
}

/// Betti numbers β_0..β_max_dim; β_n = dim Ω_n − rank ∂_n − rank ∂_{n+1}.
pub fn path_homology<F: Field>(graph: &Digraph, max_dim: usize) -> Vec<usize> {
    let omegas: Vec<OmegaBasis<F>> = (0..=max_dim + 1).map(|n| omega_basis(graph, n)).collect();
    let ranks: Vec<usize> = (0..=max_dim + 1)
        .map(|n| {
            if n == 0 {
                return 0;
            }
            let d = allowed_boundary::<F>(graph, &omegas[n].allowed, &omegas[n - 1].allowed);
            d.mul(&omegas[n].coefficients).rank()
        })
        .collect();
    (0..=max_dim).map(|n| omegas[n].dim() - ranks[n] - ranks[n + 1]).collect()
}

/// [`path_homology`] with the field chosen at run time.
pub fn betti_numbers(graph: &Digraph, max_dim: usize, field: FieldKind) -> Vec<usize> {
    match field {
        FieldKind::Z2 => path_homology::<Z2>(graph, max_dim),
        FieldKind::Q => path_homology::<Q>(graph, max_dim),
    }
}
