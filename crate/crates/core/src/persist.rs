//! Arrow and path filtrations of digraphs, persistent Betti numbers and
//! barcodes by inclusion–exclusion over the finite level grid.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glmy::{chain_spaces, ChainSpaces, Digraph, Field, FieldKind, FieldMatrix, WeightedDigraph, Q, Z2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FiltrationKind {
    Arrow,
    Path,
}

impl std::str::FromStr for FiltrationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "arrow" => Ok(Self::Arrow),
            "path" => Ok(Self::Path),
            other => Err(Error::Validation(format!("unknown filtration '{other}'"))),
        }
    }
}

/// One complex of a filtration: a digraph whose paths are optionally capped
/// at a maximal length.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelComplex {
    pub graph: Digraph,
    pub max_length: Option<usize>,
}

/// Nested path complexes indexed by strictly increasing levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtration {
    pub kind: FiltrationKind,
    pub levels: Vec<f64>,
    pub complexes: Vec<LevelComplex>,
}

impl Filtration {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Position of an exact level value.
    pub fn level_index(&self, a: f64) -> Result<usize> {
        self.levels
            .iter()
            .position(|&l| l == a)
            .ok_or_else(|| Error::Domain(format!("{a} is not a filtration level")))
    }
}

/// Level `t` holds the arrows of weight < t. Levels are the distinct
/// weights followed by one terminal level above the maximum, so the first
/// level is empty and the last is the full graph. With `descending`, the
/// filtration parameter is the negated weight: heavy arrows enter first.
pub fn arrow_filtration(graph: &WeightedDigraph, descending: bool) -> Result<Filtration> {
    let key = |w: f64| if descending { -w } else { w };
    if let Some((&(a, b), _)) = graph.weights.iter().find(|(_, w)| !w.is_finite()) {
        return Err(Error::Validation(format!("non-finite weight on arrow ({a}, {b})")));
    }
    let mut distinct: Vec<f64> = graph.weights.values().map(|&w| key(w)).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut levels = distinct.clone();
    match distinct.last() {
        Some(&top) => levels.push(top + 1.0),
        None => levels.push(0.0),
    }
    let complexes = levels
        .iter()
        .map(|&t| LevelComplex {
            graph: graph.graph.subgraph(|a, b| key(graph.weights[&(a, b)]) < t),
            max_length: None,
        })
        .collect();
    Ok(Filtration {
        kind: FiltrationKind::Arrow,
        levels,
        complexes,
    })
}

/// Level k holds the allowed paths of length ≤ k, for k = 0..=k_max.
pub fn path_filtration(graph: &Digraph, k_max: usize) -> Filtration {
    Filtration {
        kind: FiltrationKind::Path,
        levels: (0..=k_max).map(|k| k as f64).collect(),
        complexes: (0..=k_max)
            .map(|k| LevelComplex {
                graph: graph.clone(),
                max_length: Some(k),
            })
            .collect(),
    }
}

/// Persistent Betti numbers of one dimension at every level pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceTable {
    pub dim: usize,
    pub levels: Vec<f64>,
    /// `ranks[i][j]` = β^{a_i, a_j} for i ≤ j; zero below the diagonal.
    pub ranks: Vec<Vec<usize>>,
}

impl PersistenceTable {
    pub fn betti(&self, i: usize) -> usize {
        self.ranks[i][i]
    }
}

/// Rewrites the columns of `m`, given over `from`, in the basis `to`.
/// Requires every path of `from` to occur in `to`.
fn embed<F: Field>(m: &FieldMatrix<F>, from: &ChainSpaces<F>, to: &ChainSpaces<F>) -> Result<FieldMatrix<F>> {
    let index = to.allowed.index();
    let mut out = FieldMatrix::zeros(to.allowed.len(), m.cols());
    for (i, p) in from.allowed.paths.iter().enumerate() {
        let &r = index
            .get(p.as_slice())
            .ok_or_else(|| Error::Internal(format!("path {p:?} vanishes later in the filtration")))?;
        for j in 0..m.cols() {
            out.set(r, j, m.get(i, j).clone());
        }
    }
    Ok(out)
}

fn table<F: Field>(filtration: &Filtration, p: usize) -> Result<PersistenceTable> {
    let spaces: Vec<ChainSpaces<F>> = filtration
        .complexes
        .par_iter()
        .map(|c| chain_spaces::<F>(&c.graph, p, c.max_length))
        .collect();
    let boundary_rank: Vec<usize> = spaces.par_iter().map(|s| s.boundaries.rank()).collect();
    let m = spaces.len();
    let rows: Vec<Vec<usize>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| {
                    if j < i {
                        return Ok(0);
                    }
                    let z = embed(&spaces[i].cycles, &spaces[i], &spaces[j])?;
                    // dim Z_a − dim(Z_a ∩ B_b) = rank[Z_a | B_b] − rank B_b.
                    Ok(z.hstack(&spaces[j].boundaries).rank() - boundary_rank[j])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PersistenceTable {
        dim: p,
        levels: filtration.levels.clone(),
        ranks: rows,
    })
}

pub fn persistence_table(filtration: &Filtration, p: usize, field: FieldKind) -> Result<PersistenceTable> {
    match field {
        FieldKind::Z2 => table::<Z2>(filtration, p),
        FieldKind::Q => table::<Q>(filtration, p),
    }
}

/// Rank of H_p(level a) → H_p(level b).
pub fn persistent_betti(filtration: &Filtration, p: usize, a: f64, b: f64, field: FieldKind) -> Result<usize> {
    let (i, j) = (filtration.level_index(a)?, filtration.level_index(b)?);
    if i > j {
        return Err(Error::Domain(format!("level {a} lies after level {b}")));
    }
    let sub = Filtration {
        kind: filtration.kind,
        levels: vec![a, b],
        complexes: vec![filtration.complexes[i].clone(), filtration.complexes[j].clone()],
    };
    Ok(persistence_table(&sub, p, field)?.ranks[0][1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub birth: f64,
    /// `f64::INFINITY` for classes alive at the last level.
    pub death: f64,
    pub multiplicity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Barcode {
    pub dim: usize,
    pub intervals: Vec<Interval>,
}

impl Barcode {
    /// Σ multiplicities of intervals [birth, death) containing `a`.
    pub fn alive_at(&self, a: f64) -> usize {
        self.intervals
            .iter()
            .filter(|iv| iv.birth <= a && a < iv.death)
            .map(|iv| iv.multiplicity)
            .sum()
    }
}

/// Intervals from inclusion–exclusion over the persistence table; a
/// negative multiplicity is reported as an internal error.
pub fn barcode_from_table(table: &PersistenceTable) -> Result<Barcode> {
    let m = table.levels.len();
    let beta = |i: isize, j: usize| -> i64 {
        if i < 0 || j >= m {
            0
        } else {
            table.ranks[i as usize][j] as i64
        }
    };
    let mut intervals = Vec::new();
    for i in 0..m {
        for j in i + 1..=m {
            let ii = i as isize;
            let mult = beta(ii, j - 1) - beta(ii, j) - beta(ii - 1, j - 1) + beta(ii - 1, j);
            if mult < 0 {
                return Err(Error::Internal(format!(
                    "negative multiplicity {mult} for interval starting at level {i}"
                )));
            }
            if mult > 0 {
                intervals.push(Interval {
                    birth: table.levels[i],
                    death: if j == m { f64::INFINITY } else { table.levels[j] },
                    multiplicity: mult as usize,
                });
            }
        }
    }
    Ok(Barcode {
        dim: table.dim,
        intervals,
    })
}

pub fn barcode(filtration: &Filtration, p: usize, field: FieldKind) -> Result<Barcode> {
    barcode_from_table(&persistence_table(filtration, p, field)?)
}

/// `dimension,birth,death,multiplicity` rows, `inf` for infinite deaths.
pub fn barcodes_to_csv(barcodes: &[Barcode]) -> String {
    let mut out = String::from("dimension,birth,death,multiplicity\n");
    for b in barcodes {
        for iv in &b.intervals {
            let death = if iv.death.is_infinite() {
                "inf".to_string()
            } else {
                iv.death.to_string()
            };
            let _ = writeln!(out, "{},{},{},{}", b.dim, iv.birth, death, iv.multiplicity);
        }
    }
    out
}

pub fn write_barcodes_csv(barcodes: &[Barcode], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, barcodes_to_csv(barcodes))?;
    Ok(())
}

/// Parses the output of [`barcodes_to_csv`].
pub fn read_barcodes_csv(text: &str) -> Result<Vec<Barcode>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut by_dim: HashMap<usize, Vec<Interval>> = HashMap::new();
    let mut order = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| -> Result<&str> {
            rec.get(k).ok_or_else(|| Error::Parse {
                row: row + 2,
                column: k + 1,
                message: "missing field".into(),
            })
        };
        let parse_err = |k: usize, m: String| Error::Parse {
            row: row + 2,
            column: k + 1,
            message: m,
        };
        let dim: usize = field(0)?.parse().map_err(|e| parse_err(0, format!("{e}")))?;
        let birth: f64 = field(1)?.parse().map_err(|e| parse_err(1, format!("{e}")))?;
        let death: f64 = match field(2)? {
            "inf" => f64::INFINITY,
            s => s.parse().map_err(|e| parse_err(2, format!("{e}")))?,
        };
        let multiplicity: usize = field(3)?.parse().map_err(|e| parse_err(3, format!("{e}")))?;
        if !by_dim.contains_key(&dim) {
            order.push(dim);
        }
        by_dim.entry(dim).or_default().push(Interval {
            birth,
            death,
            multiplicity,
        });
    }
    Ok(order
        .into_iter()
        .map(|d| Barcode {
            dim: d,
            intervals: by_dim.remove(&d).unwrap_or_default(),
        })
        .collect())
}
