//! `idop` command-line front end. Exit codes: 0 success, 1 invalid input or
//! options, 2 numerical failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idop_core::allometry::fit_matrix;
use idop_core::cluster::{Criterion, ModuleCountSelection};
use idop_core::glmy::{FieldKind, WeightedDigraph};
use idop_core::ingest::{load_expression_matrix, scale_index, ExpressionMatrix, LoadOptions};
use idop_core::network::{build_multilayer, personalize, EdgeWeight, ExportFormat, IdopNetwork, LayerOptions};
use idop_core::persist::{barcodes_to_csv, FiltrationKind};
use idop_core::pipeline::{
    cluster_stage, error_kind, fit_stage, homology_stage, module_labels, network_stage, persist_stage,
    read_regulators_csv, regulators_to_csv, run_pipeline, select_stage, with_pool, PipelineConfig,
};
use idop_core::qdode::{ObjectiveMode, QdOdeFit};
use idop_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "idop", version, about = "Quasi-dynamic interaction networks and their path homology")]
struct Cli {
    /// JSON configuration; its options become the defaults of every subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for `pipeline`, output file for the other subcommands
    /// (standard output when omitted).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Seed for clustering initialization, the only randomized step
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct MatrixInput {
    /// Expression matrix CSV: header `id,<samples>`, one row per variable.
    input: PathBuf,
    /// Accept negative cells.
    #[arg(long)]
    allow_negative: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every stage and write all outputs plus a manifest.
    Pipeline,
    /// Power-law fit of each variable against the expression index (CSV).
    Allometry(MatrixInput),
    /// Functional clustering with module-count selection (JSON).
    Cluster {
        #[command(flatten)]
        matrix: MatrixInput,
        #[arg(long)]
        max_modules: Option<usize>,
        #[arg(long)]
        criterion: Option<Criterion>,
    },
    /// LASSO regulator selection (CSV).
    Select {
        #[command(flatten)]
        matrix: MatrixInput,
        /// Restrict to one target.
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        max_regulators: Option<usize>,
    },
    /// qdODE fits of every target (JSON).
    Fit {
        #[command(flatten)]
        matrix: MatrixInput,
        /// Regulator CSV from `select`; selection runs when omitted.
        #[arg(long)]
        regulators: Option<PathBuf>,
        #[arg(long)]
        lop_order: Option<usize>,
        #[arg(long)]
        mode: Option<ObjectiveMode>,
    },
    /// Assemble the idopNetwork (JSON or DOT).
    Network {
        #[command(flatten)]
        matrix: MatrixInput,
        /// Fits JSON from `fit`; selection and fitting run when omitted.
        #[arg(long)]
        fits: Option<PathBuf>,
        /// Cluster JSON from `cluster`; supplies module labels.
        #[arg(long)]
        clusters: Option<PathBuf>,
        /// Network of one sample instead of the aggregate.
        #[arg(long)]
        personalize: Option<String>,
        /// Module layer plus one variable layer per module.
        #[arg(long)]
        multilayer: bool,
        #[arg(long, default_value = "json")]
        format: ExportFormat,
        #[arg(long)]
        weight: Option<EdgeWeight>,
    },
    /// Path homology Betti numbers of a network JSON or edge list (JSON).
    Homology {
        graph: PathBuf,
        #[arg(long)]
        max_dim: Option<usize>,
        #[arg(long)]
        field: Option<FieldKind>,
    },
    /// Persistence barcodes of a network JSON or edge list (CSV).
    Persist {
        graph: PathBuf,
        #[arg(long)]
        filtration: Option<FiltrationKind>,
        #[arg(long)]
        max_dim: Option<usize>,
        #[arg(long)]
        field: Option<FieldKind>,
        /// Heavy arrows enter the arrow filtration first.
        #[arg(long)]
        descending: bool,
        /// Longest path length of the path filtration.
        #[arg(long)]
        k_max: Option<usize>,
    },
}

fn base_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn load(m: &MatrixInput, cfg: &PipelineConfig) -> Result<ExpressionMatrix> {
    load_expression_matrix(
        &m.input,
        LoadOptions {
            allow_negative: m.allow_negative || cfg.allow_negative,
        },
    )
}

fn load_model(m: &MatrixInput, cfg: &PipelineConfig) -> Result<ExpressionMatrix> {
    let matrix = load(m, cfg)?;
    matrix.require_model_shape()?;
    Ok(matrix)
}

fn load_graph(path: &Path) -> Result<WeightedDigraph> {
    let text = std::fs::read_to_string(path)?;
    if text.trim_start().starts_with('{') {
        WeightedDigraph::from_network(&IdopNetwork::from_json(&text)?)
    } else {
        WeightedDigraph::parse_edge_list(&text)
    }
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

fn allometry_csv(matrix: &ExpressionMatrix) -> String {
    let mut out = String::from("variable,alpha,beta,r_squared,n_used,error\n");
    for (id, fit) in fit_matrix(matrix) {
        match fit {
            Ok(f) => out.push_str(&format!("{id},{},{},{},{},\n", f.alpha, f.beta, f.r_squared, f.n_used)),
            Err(e) => out.push_str(&format!("{id},,,,,\"{}\"\n", e.to_string().replace('"', "'"))),
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    let output = cli.output.as_deref();
    match &cli.command {
        Command::Pipeline => {
            if cli.config.is_none() {
                return Err(Error::Validation("pipeline needs --config".into()));
            }
            if let Some(dir) = output {
                cfg.output_dir = dir.to_path_buf();
            }
            let run = run_pipeline(&cfg)?;
            eprintln!(
                "pipeline finished: {} outputs in {}",
                run.manifest.outputs().count(),
                cfg.output_dir.display()
            );
        }
        Command::Allometry(m) => emit(output, &allometry_csv(&load(m, &cfg)?))?,
        Command::Cluster {
            matrix,
            max_modules,
            criterion,
        } => {
            let m = load_model(matrix, &cfg)?;
            cfg.cluster.max_modules = max_modules.unwrap_or(cfg.cluster.max_modules);
            cfg.cluster.criterion = criterion.unwrap_or(cfg.cluster.criterion);
            cfg.validate_options()?;
            let sel = with_pool(cfg.jobs, || cluster_stage(&m, &cfg.cluster, cfg.seed))??;
            emit(output, &(serde_json::to_string_pretty(&sel)? + "\n"))?;
        }
        Command::Select {
            matrix,
            target,
            folds,
            max_regulators,
        } => {
            let m = load_model(matrix, &cfg)?;
            cfg.select.cv_folds = folds.unwrap_or(cfg.select.cv_folds);
            cfg.select.max_regulators = max_regulators.unwrap_or(cfg.select.max_regulators);
            cfg.validate_options()?;
            let sets = match target {
                Some(t) => {
                    if m.variable_position(t).is_none() {
                        return Err(Error::Validation(format!("unknown target '{t}'")));
                    }
                    vec![idop_core::select::select_regulators(&m, t, &cfg.select.options())?]
                }
                None => select_stage(&m, &cfg.select, cfg.jobs)?,
            };
            emit(output, &regulators_to_csv(&sets))?;
        }
        Command::Fit {
            matrix,
            regulators,
            lop_order,
            mode,
        } => {
            let m = load_model(matrix, &cfg)?;
            cfg.fit.lop_order = lop_order.unwrap_or(cfg.fit.lop_order);
            cfg.fit.mode = mode.unwrap_or(cfg.fit.mode);
            cfg.validate_options()?;
            let fits = fits_for(&m, regulators.as_deref(), &cfg)?;
            emit(output, &(serde_json::to_string_pretty(&fits)? + "\n"))?;
        }
        Command::Network {
            matrix,
            fits,
            clusters,
            personalize: sample,
            multilayer,
            format,
            weight,
        } => {
            let m = load_model(matrix, &cfg)?;
            cfg.network.weight = weight.unwrap_or(cfg.network.weight);
            cfg.validate_options()?;
            let selection: Option<ModuleCountSelection> = match clusters {
                Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
                None if *multilayer => Some(with_pool(cfg.jobs, || cluster_stage(&m, &cfg.cluster, cfg.seed))??),
                None => None,
            };
            let text = if *multilayer {
                let sel = selection.expect("set above for multilayer");
                let scaled = scale_index(m.index())?;
                let opts = LayerOptions {
                    select: cfg.select.options(),
                    qdode: cfg.fit.options(),
                    weight: cfg.network.weight,
                };
                let ml = with_pool(cfg.jobs, || {
                    build_multilayer(&m, &scaled, &sel.model.assignments, sel.model.n_modules, &opts)
                })??;
                match format {
                    ExportFormat::Json => serde_json::to_string_pretty(&ml)? + "\n",
                    ExportFormat::Dot => {
                        let mut s = ml.module_layer.to_dot();
                        for layer in ml.variable_layers.values() {
                            s.push_str(&layer.to_dot());
                        }
                        s
                    }
                }
            } else {
                let fits: Vec<QdOdeFit> = match fits {
                    Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                    None => fits_for(&m, None, &cfg)?,
                };
                let labels = selection.as_ref().map(module_labels).unwrap_or_default();
                let mut net = network_stage(&fits, &labels, &cfg.network)?;
                if let Some(id) = sample {
                    let k = m
                        .sample_position(id)
                        .ok_or_else(|| Error::Validation(format!("unknown sample '{id}'")))?;
                    net = personalize(&net, &fits, k)?;
                }
                match format {
                    ExportFormat::Json => net.to_json()? + "\n",
                    ExportFormat::Dot => net.to_dot(),
                }
            };
            emit(output, &text)?;
        }
        Command::Homology { graph, max_dim, field } => {
            cfg.homology.max_dim = max_dim.unwrap_or(cfg.homology.max_dim);
            cfg.homology.field = field.unwrap_or(cfg.homology.field);
            cfg.validate_options()?;
            let g = load_graph(graph)?;
            let report = homology_stage(&g.graph, &cfg.homology);
            emit(output, &(serde_json::to_string_pretty(&report)? + "\n"))?;
        }
        Command::Persist {
            graph,
            filtration,
            max_dim,
            field,
            descending,
            k_max,
        } => {
            cfg.homology.max_dim = max_dim.unwrap_or(cfg.homology.max_dim);
            cfg.homology.field = field.unwrap_or(cfg.homology.field);
            cfg.persistence.filtration = filtration.unwrap_or(cfg.persistence.filtration);
            cfg.persistence.descending |= *descending;
            cfg.persistence.k_max = k_max.or(cfg.persistence.k_max);
            cfg.validate_options()?;
            let g = load_graph(graph)?;
            let bars = persist_stage(&g, &cfg.persistence, &cfg.homology)?;
            emit(output, &barcodes_to_csv(&bars))?;
        }
    }
    Ok(())
}

fn fits_for(m: &ExpressionMatrix, regulators: Option<&Path>, cfg: &PipelineConfig) -> Result<Vec<QdOdeFit>> {
    let scaled = scale_index(m.index())?;
    let sets = match regulators {
        Some(p) => read_regulators_csv(&std::fs::read_to_string(p)?)?,
        None => select_stage(m, &cfg.select, cfg.jobs)?,
    };
    fit_stage(m, &scaled, &sets, &cfg.fit, cfg.jobs)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if error_kind(&e) == "numerical" {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
