//! End-to-end run: ingest → cluster → select → fit → network → homology →
//! persistence, driven by one JSON configuration. Every stage writes its
//! outputs into the output directory, and `manifest.json` records each
//! output's SHA-256. Wall-clock timings go to `timings.json` so that every
//! other file is reproducible byte for byte.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{select_module_count, ClusterOptions, Criterion, ModuleCountSelection};
use crate::error::{Error, Result};
use crate::glmy::{betti_numbers, Digraph, FieldKind, WeightedDigraph};
use crate::ingest::{load_expression_matrix, scale_index, ExpressionMatrix, LoadOptions, ScaledIndex};
use crate::network::{
    assemble_network, build_multilayer, personalize, EdgeWeight, IdopNetwork, Layer, LayerOptions, MultilayerNetwork,
};
use crate::optim::QuasiNewtonOptions;
use crate::persist::{arrow_filtration, barcode, barcodes_to_csv, path_filtration, Barcode, FiltrationKind};
use crate::qdode::{fit_all, ObjectiveMode, QdOdeFit, QdOdeOptions, MAX_LEGENDRE_ORDER};
use crate::select::{select_regulators, Regulator, RegulatorSet, SelectOptions};

/// Highest homology dimension accepted; path counts grow exponentially.
pub const MAX_HOMOLOGY_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub max_modules: usize,
    pub criterion: Criterion,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let o = ClusterOptions::default();
        Self {
            max_modules: 4,
            criterion: Criterion::Bic,
            max_iter: o.max_iter,
            tol: o.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    pub cv_folds: usize,
    pub max_regulators: usize,
    pub path_length: usize,
    pub path_ratio: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        let o = SelectOptions::default();
        Self {
            cv_folds: o.cv_folds,
            max_regulators: o.max_regulators,
            path_length: o.path_length,
            path_ratio: o.path_ratio,
        }
    }
}

impl SelectConfig {
    pub fn options(&self) -> SelectOptions {
        SelectOptions {
            lambda_grid: None,
            cv_folds: self.cv_folds,
            max_regulators: self.max_regulators,
            path_length: self.path_length,
            path_ratio: self.path_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub lop_order: usize,
    pub mode: ObjectiveMode,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let o = QdOdeOptions::default();
        Self {
            lop_order: o.lop_order,
            mode: o.mode,
            max_iter: o.optimizer.max_iter,
            grad_tol: o.optimizer.grad_tol,
        }
    }
}

impl FitConfig {
    pub fn options(&self) -> QdOdeOptions {
        QdOdeOptions {
            lop_order: self.lop_order,
            mode: self.mode,
            optimizer: QuasiNewtonOptions {
                max_iter: self.max_iter,
                grad_tol: self.grad_tol,
                ..QuasiNewtonOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub weight: EdgeWeight,
    /// Sample ids that get a personalized network.
    pub personalize: Vec<String>,
    pub multilayer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomologyConfig {
    pub max_dim: usize,
    pub field: FieldKind,
}

impl Default for HomologyConfig {
    fn default() -> Self {
        Self {
            max_dim: 2,
            field: FieldKind::Z2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersistenceConfig {
    pub filtration: FiltrationKind,
    /// Heavy arrows enter first (arrow filtration only).
    pub descending: bool,
    /// Longest path length of the path filtration; defaults to max_dim + 1.
    pub k_max: Option<usize>,
}

impl Default for PersistenceConfig {
    fn default() -> Self {
        Self {
            filtration: FiltrationKind::Arrow,
            descending: false,
            k_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub allow_negative: bool,
    pub cluster: ClusterConfig,
    pub select: SelectConfig,
    pub fit: FitConfig,
    pub network: NetworkConfig,
    pub homology: HomologyConfig,
    pub persistence: PersistenceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            output_dir: PathBuf::from("idop-out"),
            seed: 0,
            jobs: 1,
            allow_negative: false,
            cluster: ClusterConfig::default(),
            select: SelectConfig::default(),
            fit: FitConfig::default(),
            network: NetworkConfig::default(),
            homology: HomologyConfig::default(),
            persistence: PersistenceConfig::default(),
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(what.to_string()))
    }
}

impl PipelineConfig {
    /// Parses a JSON config; relative paths are resolved against the
    /// config file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.input.is_relative() && !cfg.input.as_os_str().is_empty() {
            cfg.input = base.join(&cfg.input);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check(!self.input.as_os_str().is_empty(), "config needs an 'input' path")?;
        check(self.input.is_file(), &format!("input '{}' is not a readable file", self.input.display()))?;
        self.validate_options()
    }

    /// Range checks that do not touch the file system.
    pub fn validate_options(&self) -> Result<()> {
        check(self.jobs >= 1, "jobs must be at least 1")?;
        check(self.cluster.max_modules >= 1, "cluster.max_modules must be at least 1")?;
        check(self.cluster.max_iter >= 1, "cluster.max_iter must be at least 1")?;
        check(self.cluster.tol > 0.0, "cluster.tol must be positive")?;
        check(self.select.cv_folds >= 2, "select.cv_folds must be at least 2")?;
        check(self.select.max_regulators >= 1, "select.max_regulators must be at least 1")?;
        check(self.select.path_length >= 1, "select.path_length must be at least 1")?;
        check(
            self.select.path_ratio > 0.0 && self.select.path_ratio < 1.0,
            "select.path_ratio must lie in (0, 1)",
        )?;
        check(
            self.fit.lop_order <= MAX_LEGENDRE_ORDER,
            &format!("fit.lop_order must be at most {MAX_LEGENDRE_ORDER}"),
        )?;
        check(self.fit.max_iter >= 1, "fit.max_iter must be at least 1")?;
        check(self.fit.grad_tol > 0.0, "fit.grad_tol must be positive")?;
        check(
            self.homology.max_dim <= MAX_HOMOLOGY_DIM,
            &format!("homology.max_dim must be at most {MAX_HOMOLOGY_DIM}"),
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Cluster,
    Select,
    Fit,
    Network,
    Homology,
    Persist,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Cluster,
        Stage::Select,
        Stage::Fit,
        Stage::Network,
        Stage::Homology,
        Stage::Persist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Cluster => "cluster",
            Stage::Select => "select",
            Stage::Fit => "fit",
            Stage::Network => "network",
            Stage::Homology => "homology",
            Stage::Persist => "persist",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub outputs: Vec<OutputRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: Stage,
    /// `validation` or `numerical`.
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub input: String,
    pub input_sha256: String,
    /// Effective options, without the output directory.
    pub options: serde_json::Value,
    pub stages: Vec<StageRecord>,
    pub error: Option<StageError>,
}

impl RunManifest {
    pub fn outputs(&self) -> impl Iterator<Item = &OutputRecord> {
        self.stages.iter().flat_map(|s| &s.outputs)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn error_kind(e: &Error) -> &'static str {
    if e.is_numerical() {
        "numerical"
    } else {
        "validation"
    }
}

/// Runs `f` on a pool of `jobs` threads.
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn index_csv(matrix: &ExpressionMatrix, scaled: &ScaledIndex) -> String {
    let mut out = String::from("sample,index,scaled\n");
    for (k, id) in matrix.sample_ids().iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", csv_field(id), scaled.raw[k], scaled.scaled[k]);
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cluster_stage(matrix: &ExpressionMatrix, cfg: &ClusterConfig, seed: u64) -> Result<ModuleCountSelection> {
    let l_max = cfg.max_modules.min(matrix.n_variables());
    let opts = ClusterOptions {
        max_iter: cfg.max_iter,
        tol: cfg.tol,
        seed,
    };
    select_module_count(matrix, l_max, cfg.criterion, &opts)
}

/// Module label `M{k+1}` of every variable.
pub fn module_labels(selection: &ModuleCountSelection) -> HashMap<String, String> {
    selection
        .model
        .variable_ids
        .iter()
        .zip(&selection.model.assignments)
        .map(|(id, &k)| (id.clone(), format!("M{}", k + 1)))
        .collect()
}

pub fn select_stage(matrix: &ExpressionMatrix, cfg: &SelectConfig, jobs: usize) -> Result<Vec<RegulatorSet>> {
    use rayon::prelude::*;
    let opts = cfg.options();
    with_pool(jobs, || {
        matrix
            .variable_ids()
            .par_iter()
            .map(|id| select_regulators(matrix, id, &opts))
            .collect::<Result<Vec<_>>>()
    })?
}

/// One row per (target, regulator); a target without regulators gets a row
/// with empty regulator and coefficient fields.
pub fn regulators_to_csv(sets: &[RegulatorSet]) -> String {
    let mut out = String::from("target,regulator,coefficient,lambda\n");
    for s in sets {
        if s.regulators.is_empty() {
            let _ = writeln!(out, "{},,,{}", csv_field(&s.target), s.lambda_used);
        }
        for r in &s.regulators {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                csv_field(&s.target),
                csv_field(&r.id),
                r.coefficient,
                s.lambda_used
            );
        }
    }
    out
}

/// Inverse of [`regulators_to_csv`]; CV curves are not stored.
pub fn read_regulators_csv(text: &str) -> Result<Vec<RegulatorSet>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut sets: Vec<RegulatorSet> = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let err = |column: usize, message: String| Error::Parse {
            row: row + 2,
            column,
            message,
        };
        if rec.len() != 4 {
            return Err(err(rec.len() + 1, format!("expected 4 fields, found {}", rec.len())));
        }
        let target = rec[0].to_string();
        let lambda: f64 = rec[3].parse().map_err(|e| err(4, format!("invalid lambda: {e}")))?;
        if sets.last().is_none_or(|s| s.target != target) {
            if sets.iter().any(|s| s.target == target) {
                return Err(err(1, format!("rows of target '{target}' are not contiguous")));
            }
            sets.push(RegulatorSet {
                target: target.clone(),
                regulators: Vec::new(),
                lambda_used: lambda,
                cv_curve: Vec::new(),
            });
        }
        if !rec[1].is_empty() {
            let coefficient: f64 = rec[2].parse().map_err(|e| err(3, format!("invalid coefficient: {e}")))?;
            sets.last_mut().expect("pushed above").regulators.push(Regulator {
                id: rec[1].to_string(),
                coefficient,
            });
        }
    }
    Ok(sets)
}

/// Fits every target; the first failure in target order aborts.
pub fn fit_stage(
    matrix: &ExpressionMatrix,
    scaled: &ScaledIndex,
    sets: &[RegulatorSet],
    cfg: &FitConfig,
    jobs: usize,
) -> Result<Vec<QdOdeFit>> {
    fit_all(matrix, scaled, sets, &cfg.options(), jobs)?.into_iter().collect()
}

pub fn network_stage(fits: &[QdOdeFit], labels: &HashMap<String, String>, cfg: &NetworkConfig) -> Result<IdopNetwork> {
    let modules: Vec<String> = fits
        .iter()
        .map(|f| labels.get(&f.target).cloned().unwrap_or_default())
        .collect();
    assemble_network(fits, &modules, Layer::Variable, cfg.weight)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BettiReport {
    pub field: FieldKind,
    pub max_dim: usize,
    pub betti: Vec<usize>,
}

pub fn homology_stage(graph: &Digraph, cfg: &HomologyConfig) -> BettiReport {
    BettiReport {
        field: cfg.field,
        max_dim: cfg.max_dim,
        betti: betti_numbers(graph, cfg.max_dim, cfg.field),
    }
}

/// Barcodes of dimensions 0..=max_dim.
pub fn persist_stage(
    graph: &WeightedDigraph,
    cfg: &PersistenceConfig,
    homology: &HomologyConfig,
) -> Result<Vec<Barcode>> {
    let filtration = match cfg.filtration {
        FiltrationKind::Arrow => arrow_filtration(graph, cfg.descending)?,
        FiltrationKind::Path => path_filtration(&graph.graph, cfg.k_max.unwrap_or(homology.max_dim + 1)),
    };
    (0..=homology.max_dim)
        .map(|p| barcode(&filtration, p, homology.field))
        .collect()
}

fn file_stem(id: &str, k: usize) -> String {
    if !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        id.to_string()
    } else {
        format!("sample_{k}")
    }
}

/// Output directory writer that hashes everything it writes.
struct Outputs {
    dir: PathBuf,
    records: Vec<OutputRecord>,
}

impl Outputs {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.records.push(OutputRecord {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }
}

/// Intermediate results of a complete run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub manifest: RunManifest,
    pub matrix: ExpressionMatrix,
    pub clusters: ModuleCountSelection,
    pub regulators: Vec<RegulatorSet>,
    pub fits: Vec<QdOdeFit>,
    pub network: IdopNetwork,
    pub multilayer: Option<MultilayerNetwork>,
    pub betti: BettiReport,
    pub barcodes: Vec<Barcode>,
}

struct Runner {
    manifest: RunManifest,
    timings: serde_json::Map<String, serde_json::Value>,
    dir: PathBuf,
}

impl Runner {
    fn stage<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Outputs) -> Result<T>) -> Result<T> {
        log::info!("[{}] start", stage.name());
        let start = Instant::now();
        let mut out = Outputs {
            dir: self.dir.clone(),
            records: Vec::new(),
        };
        let result = f(&mut out);
        let ms = start.elapsed().as_secs_f64() * 1e3;
        self.timings.insert(stage.name().to_string(), serde_json::json!(ms));
        match result {
            Ok(v) => {
                log::info!("[{}] done in {ms} ms, {} outputs", stage.name(), out.records.len());
                self.manifest.stages.push(StageRecord {
                    stage,
                    outputs: out.records,
                });
                Ok(v)
            }
            Err(e) => {
                log::error!("[{}] failed: {e}", stage.name());
                if !out.records.is_empty() {
                    self.manifest.stages.push(StageRecord {
                        stage,
                        outputs: out.records,
                    });
                }
                self.manifest.error = Some(StageError {
                    stage,
                    kind: error_kind(&e).to_string(),
                    message: e.to_string(),
                });
                self.finish()?;
                Err(e)
            }
        }
    }

    fn finish(&self) -> Result<()> {
        std::fs::write(
            self.dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)? + "\n",
        )?;
        std::fs::write(
            self.dir.join("timings.json"),
            serde_json::to_string_pretty(&self.timings)? + "\n",
        )?;
        Ok(())
    }
}

/// Executes all stages in order. On failure the outputs of completed stages
/// stay on disk and the manifest carries the error.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    let input_bytes = std::fs::read(&config.input)?;
    let mut options = serde_json::to_value(config)?;
    if let Some(map) = options.as_object_mut() {
        map.remove("output_dir");
        map.remove("input");
    }
    let mut run = Runner {
        manifest: RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            input: config
                .input
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            input_sha256: sha256_hex(&input_bytes),
            options,
            stages: Vec::new(),
            error: None,
        },
        timings: serde_json::Map::new(),
        dir: config.output_dir.clone(),
    };
    let jobs = config.jobs;

    let (matrix, scaled) = run.stage(Stage::Ingest, |out| {
        let m = load_expression_matrix(
            &config.input,
            LoadOptions {
                allow_negative: config.allow_negative,
            },
        )?;
        m.require_model_shape()?;
        for id in &config.network.personalize {
            if m.sample_position(id).is_none() {
                return Err(Error::Validation(format!("unknown sample '{id}' in network.personalize")));
            }
        }
        let s = scale_index(m.index())?;
        log::info!("[ingest] {} variables × {} samples", m.n_variables(), m.n_samples());
        out.write("index.csv", index_csv(&m, &s).as_bytes())?;
        Ok((m, s))
    })?;

    let clusters = run.stage(Stage::Cluster, |out| {
        let sel = with_pool(jobs, || cluster_stage(&matrix, &config.cluster, config.seed))??;
        log::info!("[cluster] {:?} selects L = {}", sel.criterion, sel.best);
        out.write("cluster.json", serde_json::to_string_pretty(&sel)?.as_bytes())?;
        Ok(sel)
    })?;
    let labels = module_labels(&clusters);

    let regulators = run.stage(Stage::Select, |out| {
        let sets = select_stage(&matrix, &config.select, jobs)?;
        out.write("regulators.csv", regulators_to_csv(&sets).as_bytes())?;
        Ok(sets)
    })?;

    let fits = run.stage(Stage::Fit, |out| {
        let fits = fit_stage(&matrix, &scaled, &regulators, &config.fit, jobs)?;
        out.write("fits.json", serde_json::to_string_pretty(&fits)?.as_bytes())?;
        Ok(fits)
    })?;

    let (network, multilayer) = run.stage(Stage::Network, |out| {
        let net = network_stage(&fits, &labels, &config.network)?;
        out.write("network.json", net.to_json()?.as_bytes())?;
        out.write("network.dot", net.to_dot().as_bytes())?;
        for id in &config.network.personalize {
            let k = matrix.sample_position(id).expect("checked at ingest");
            let p = personalize(&net, &fits, k)?;
            out.write(&format!("personalized/{}.json", file_stem(id, k)), p.to_json()?.as_bytes())?;
        }
        let ml = if config.network.multilayer {
            let opts = LayerOptions {
                select: config.select.options(),
                qdode: config.fit.options(),
                weight: config.network.weight,
            };
            let ml = with_pool(jobs, || {
                build_multilayer(
                    &matrix,
                    &scaled,
                    &clusters.model.assignments,
                    clusters.model.n_modules,
                    &opts,
                )
            })??;
            out.write("multilayer.json", serde_json::to_string_pretty(&ml)?.as_bytes())?;
            Some(ml)
        } else {
            None
        };
        Ok((net, ml))
    })?;

    let weighted = WeightedDigraph::from_network(&network)?;
    let betti = run.stage(Stage::Homology, |out| {
        let report = homology_stage(&weighted.graph, &config.homology);
        log::info!("[homology] betti {:?}", report.betti);
        out.write("betti.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
        Ok(report)
    })?;

    let barcodes = run.stage(Stage::Persist, |out| {
        let bars = persist_stage(&weighted, &config.persistence, &config.homology)?;
        out.write("barcode.csv", barcodes_to_csv(&bars).as_bytes())?;
        Ok(bars)
    })?;

    run.finish()?;
    Ok(PipelineRun {
        manifest: run.manifest,
        matrix,
        clusters,
        regulators,
        fits,
        network,
        multilayer,
        betti,
        barcodes,
    })
}
