//! Signed weighted digraphs assembled from qdODE fits, their personalized
//! and multilayer variants, degree/strength summaries, and JSON/DOT export.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::module_expression;
use crate::error::{Error, Result};
use crate::ingest::{ExpressionMatrix, ScaledIndex};
use crate::qdode::{fit_qdode, QdOdeFit, QdOdeOptions};
use crate::select::{select_regulators, RegulatorSet, SelectOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Variable,
    Module,
}

/// Scalar summary of a dependent curve used as the edge weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeWeight {
    /// Mean of |curve| over the grid.
    #[default]
    Mean,
    /// |curve| at the last grid point.
    Final,
    /// Largest |curve| on the grid.
    Max,
}

impl EdgeWeight {
    pub fn apply(self, curve: &[f64]) -> f64 {
        match self {
            Self::Mean => curve.iter().map(|v| v.abs()).sum::<f64>() / curve.len() as f64,
            Self::Final => curve.last().map_or(0.0, |v| v.abs()),
            Self::Max => curve.iter().map(|v| v.abs()).fold(0.0, f64::max),
        }
    }
}

impl std::str::FromStr for EdgeWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "final" => Ok(Self::Final),
            "max" => Ok(Self::Max),
            other => Err(Error::Validation(format!("unknown edge weight '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub module: String,
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: String,
    pub target: String,
    pub weight: f64,
    pub sign: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdopNetwork {
    pub layer: Layer,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeStrength {
    pub in_degree: usize,
    pub out_degree: usize,
    pub in_strength: f64,
    pub out_strength: f64,
}

impl IdopNetwork {
    /// Checks the digraph invariants: known endpoints, no loops, no parallel
    /// edges, finite nonnegative weights and signs of ±1.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(Error::Validation(format!("duplicate node '{}'", n.id)));
            }
        }
        let mut pairs = HashSet::new();
        for e in &self.edges {
            if !ids.contains(e.source.as_str()) || !ids.contains(e.target.as_str()) {
                return Err(Error::Validation(format!(
                    "edge {} -> {} references an unknown node",
                    e.source, e.target
                )));
            }
            if e.source == e.target {
                return Err(Error::Validation(format!("self-edge on '{}'", e.source)));
            }
            if !pairs.insert((e.source.as_str(), e.target.as_str())) {
                return Err(Error::Validation(format!("parallel edge {} -> {}", e.source, e.target)));
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(Error::Validation(format!("invalid weight {} on {} -> {}", e.weight, e.source, e.target)));
            }
            if e.sign != 1 && e.sign != -1 {
                return Err(Error::Validation(format!("sign must be +1 or -1, got {}", e.sign)));
            }
        }
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn edge(&self, source: &str, target: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.source == source && e.target == target)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph idop {\n");
        for n in &self.nodes {
            let _ = writeln!(
                out,
                "  {} [module={}, effect={}];",
                dot_id(&n.id),
                dot_id(&n.module),
                n.effect
            );
        }
        for e in &self.edges {
            let color = if e.sign > 0 { "red" } else { "blue" };
            let _ = writeln!(
                out,
                "  {} -> {} [sign={}, weight={}, color={color}];",
                dot_id(&e.source),
                dot_id(&e.target),
                e.sign,
                e.weight
            );
        }
        out.push_str("}\n");
        out
    }

    pub fn write(&self, path: impl AsRef<Path>, format: ExportFormat) -> Result<()> {
        let text = match format {
            ExportFormat::Json => self.to_json()?,
            ExportFormat::Dot => self.to_dot(),
        };
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn dot_id(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Json,
    Dot,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "dot" => Ok(Self::Dot),
            other => Err(Error::Validation(format!("unknown format '{other}'"))),
        }
    }
}

fn check_fits(fits: &[QdOdeFit], modules: &[String]) -> Result<HashMap<String, usize>> {
    if modules.len() != fits.len() {
        return Err(Error::Validation(format!(
            "{} module labels for {} fits",
            modules.len(),
            fits.len()
        )));
    }
    let mut pos = HashMap::new();
    for (k, f) in fits.iter().enumerate() {
        if pos.insert(f.target.clone(), k).is_some() {
            return Err(Error::Validation(format!("duplicate fit for target '{}'", f.target)));
        }
    }
    for f in fits {
        if let Some(r) = f.regulators.iter().find(|r| !pos.contains_key(*r)) {
            return Err(Error::Validation(format!(
                "regulator '{r}' of '{}' has no fit of its own",
                f.target
            )));
        }
    }
    Ok(pos)
}

/// One node per fit with `effect` = final independent value; an edge
/// regulator → target for every nonzero coefficient with positive weight.
/// `modules` labels the fits positionally.
pub fn assemble_network(fits: &[QdOdeFit], modules: &[String], layer: Layer, weight: EdgeWeight) -> Result<IdopNetwork> {
    let pos = check_fits(fits, modules)?;
    let nodes = fits
        .iter()
        .zip(modules)
        .map(|(f, m)| Node {
            id: f.target.clone(),
            module: m.clone(),
            effect: *f.independent_curve.last().expect("fits have a non-empty grid"),
        })
        .collect();
    let mut edges = Vec::new();
    for f in fits {
        for ((r, &a), curve) in f.regulators.iter().zip(&f.regulator_coeffs).zip(&f.dependent_curves) {
            let w = weight.apply(curve);
            if a != 0.0 && w > 0.0 {
                edges.push(Edge {
                    source: r.clone(),
                    target: f.target.clone(),
                    weight: w,
                    sign: if a > 0.0 { 1 } else { -1 },
                });
            }
        }
    }
    edges.sort_by_key(|e| (pos[&e.source], pos[&e.target]));
    let net = IdopNetwork { layer, nodes, edges };
    net.validate()?;
    Ok(net)
}

/// Network of one sample: the topology of `aggregate`, with weights |dependent
/// curve| and effects taken at the sample's grid point. Weights may be 0.
pub fn personalize(aggregate: &IdopNetwork, fits: &[QdOdeFit], sample: usize) -> Result<IdopNetwork> {
    let by_target: HashMap<&str, &QdOdeFit> = fits.iter().map(|f| (f.target.as_str(), f)).collect();
    let lookup = |id: &str| -> Result<&QdOdeFit> {
        by_target
            .get(id)
            .copied()
            .ok_or_else(|| Error::Validation(format!("no fit for node '{id}'")))
    };
    let at = |f: &QdOdeFit| -> Result<usize> {
        f.sample_grid_index.get(sample).copied().ok_or_else(|| {
            Error::Domain(format!(
                "sample {sample} out of range for {} samples",
                f.sample_grid_index.len()
            ))
        })
    };
    let nodes = aggregate
        .nodes
        .iter()
        .map(|n| {
            let f = lookup(&n.id)?;
            Ok(Node {
                effect: f.independent_curve[at(f)?],
                ..n.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let edges = aggregate
        .edges
        .iter()
        .map(|e| {
            let f = lookup(&e.target)?;
            let curve = f.dependent_curve(&e.source).ok_or_else(|| {
                Error::Validation(format!("fit of '{}' has no regulator '{}'", e.target, e.source))
            })?;
            Ok(Edge {
                weight: curve[at(f)?].abs(),
                ..e.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IdopNetwork {
        layer: aggregate.layer,
        nodes,
        edges,
    })
}

/// In/out degree and signed in/out strength of `node`.
pub fn degree_strength(network: &IdopNetwork, node: &str) -> Result<DegreeStrength> {
    if network.node(node).is_none() {
        return Err(Error::Domain(format!("unknown node '{node}'")));
    }
    let mut d = DegreeStrength {
        in_degree: 0,
        out_degree: 0,
        in_strength: 0.0,
        out_strength: 0.0,
    };
    for e in &network.edges {
        let signed = f64::from(e.sign) * e.weight;
        if e.target == node {
            d.in_degree += 1;
            d.in_strength += signed;
        }
        if e.source == node {
            d.out_degree += 1;
            d.out_strength += signed;
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOptions {
    pub select: SelectOptions,
    pub qdode: QdOdeOptions,
    pub weight: EdgeWeight,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self {
            select: SelectOptions::default(),
            qdode: QdOdeOptions::default(),
            weight: EdgeWeight::Mean,
        }
    }
}

/// Regulator sets, fits and network of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub regulators: Vec<RegulatorSet>,
    pub fits: Vec<QdOdeFit>,
    pub network: IdopNetwork,
}

/// Runs selection, fitting and assembly over every row of `matrix`, using
/// `scaled` as the index axis. A single-row matrix gives one isolated node.
pub fn reconstruct_layer(
    matrix: &ExpressionMatrix,
    scaled: &ScaledIndex,
    modules: &[String],
    layer: Layer,
    opts: &LayerOptions,
) -> Result<LayerResult> {
    let ids = matrix.variable_ids();
    let regulators = ids
        .par_iter()
        .map(|id| select_regulators(matrix, id, &opts.select))
        .collect::<Result<Vec<_>>>()?;
    let fits = regulators
        .par_iter()
        .map(|set| fit_qdode(matrix, scaled, &set.target, set, &opts.qdode))
        .collect::<Result<Vec<_>>>()?;
    let network = assemble_network(&fits, modules, layer, opts.weight)?;
    Ok(LayerResult {
        regulators,
        fits,
        network,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilayerNetwork {
    pub module_layer: IdopNetwork,
    /// Keyed by module label `M1..ML`.
    pub variable_layers: BTreeMap<String, IdopNetwork>,
}

/// Module layer from module sums on the global index, plus one variable
/// layer per module restricted to that module's variables.
pub fn build_multilayer(
    matrix: &ExpressionMatrix,
    scaled: &ScaledIndex,
    assignments: &[usize],
    n_modules: usize,
    opts: &LayerOptions,
) -> Result<MultilayerNetwork> {
    let (sums, _) = module_expression(matrix, assignments, n_modules)?;
    let labels: Vec<String> = sums.variable_ids().to_vec();
    let module_layer = reconstruct_layer(&sums, scaled, &labels, Layer::Module, opts)?.network;
    let variable_layers = (0..n_modules)
        .into_par_iter()
        .map(|k| {
            let members: Vec<usize> = (0..assignments.len()).filter(|&j| assignments[j] == k).collect();
            let label = labels[k].clone();
            if members.is_empty() {
                let empty = IdopNetwork {
                    layer: Layer::Variable,
                    nodes: Vec::new(),
                    edges: Vec::new(),
                };
                return Ok((label, empty));
            }
            let sub = matrix.select_variables(&members)?;
            let tags = vec![label.clone(); members.len()];
            let net = reconstruct_layer(&sub, scaled, &tags, Layer::Variable, opts)?.network;
            Ok((label, net))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(MultilayerNetwork {
        module_layer,
        variable_layers,
    })
}
