use std::collections::BTreeMap;
use std::path::Path;

use idop_core::glmy::WeightedDigraph;
use idop_core::ingest::{load_expression_matrix, scale_index, LoadOptions};
use idop_core::network::IdopNetwork;
use idop_core::persist::{barcodes_to_csv, read_barcodes_csv};
use idop_core::pipeline::{
    cluster_stage, fit_stage, homology_stage, module_labels, network_stage, persist_stage, read_regulators_csv,
    run_pipeline, select_stage, PipelineConfig, Stage,
};
use idop_core::synthetic::{five_variable_system, linear_system_matrix};
use idop_core::Error;

fn small_matrix(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.csv");
    let text = "id,s1,s2,s3,s4,s5,s6\n\
                a,1.0,1.4,2.1,2.9,4.2,5.8\n\
                b,2.0,2.3,2.9,3.1,3.8,4.1\n\
                c,0.5,0.9,1.2,1.9,2.4,3.3\n\
                d,3.0,3.1,3.3,3.2,3.6,3.9\n";
    std::fs::write(&path, text).unwrap();
    path
}

fn config(input: &Path, out: &Path) -> PipelineConfig {
    PipelineConfig {
        input: input.to_path_buf(),
        output_dir: out.to_path_buf(),
        ..PipelineConfig::default()
    }
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in walk(dir) {
        let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
        out.insert(rel, std::fs::read(&entry).unwrap());
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

#[test]
fn smoke_run_lists_all_stage_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let input = small_matrix(tmp.path());
    let out = tmp.path().join("out");
    let mut cfg = config(&input, &out);
    cfg.network.personalize = vec!["s3".into()];
    let run = run_pipeline(&cfg).unwrap();
    let stages: Vec<Stage> = run.manifest.stages.iter().map(|s| s.stage).collect();
    assert_eq!(stages, Stage::ALL.to_vec());
    assert!(run.manifest.stages.iter().all(|s| !s.outputs.is_empty()));
    assert!(run.manifest.error.is_none());
    for rec in run.manifest.outputs() {
        let bytes = std::fs::read(out.join(&rec.path)).unwrap();
        assert_eq!(idop_core::pipeline::sha256_hex(&bytes), rec.sha256, "{}", rec.path);
    }
    for name in ["index.csv", "cluster.json", "regulators.csv", "fits.json", "network.json", "network.dot", "betti.json", "barcode.csv", "personalized/s3.json", "manifest.json", "timings.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let net = IdopNetwork::read_json(out.join("network.json")).unwrap();
    assert_eq!(net, run.network);
    assert_eq!(run.betti.betti.len(), 3);
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let input = small_matrix(tmp.path());
    let mut a = config(&input, &tmp.path().join("a"));
    a.seed = 42;
    a.network.multilayer = true;
    let mut b = a.clone();
    b.output_dir = tmp.path().join("b");
    b.jobs = 3;
    run_pipeline(&a).unwrap();
    run_pipeline(&b).unwrap();
    let mut fa = read_dir(&a.output_dir);
    let mut fb = read_dir(&b.output_dir);
    fa.remove("timings.json");
    fb.remove("timings.json");
    // The effective options differ only in the job count.
    let strip_jobs = |m: &mut BTreeMap<String, Vec<u8>>| {
        let mut v: serde_json::Value = serde_json::from_slice(&m["manifest.json"]).unwrap();
        v["options"].as_object_mut().unwrap().remove("jobs");
        m.insert("manifest.json".into(), serde_json::to_vec(&v).unwrap());
    };
    strip_jobs(&mut fa);
    strip_jobs(&mut fb);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{k} differs");
    }
}

#[test]
fn pipeline_matches_manual_stage_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, y0) = five_variable_system();
    let m = linear_system_matrix(&a, &y0, 31).unwrap();
    let input = tmp.path().join("five.csv");
    m.write_csv(&input).unwrap();
    let mut cfg = config(&input, &tmp.path().join("out"));
    cfg.allow_negative = true;
    cfg.seed = 5;
    cfg.fit.lop_order = 8;
    cfg.homology.max_dim = 1;
    let run = run_pipeline(&cfg).unwrap();

    // Manual run: each stage fed from the previous stage's files on disk.
    let out = &cfg.output_dir;
    let matrix = load_expression_matrix(&input, LoadOptions { allow_negative: true }).unwrap();
    let scaled = scale_index(matrix.index()).unwrap();
    let clusters = cluster_stage(&matrix, &cfg.cluster, cfg.seed).unwrap();
    assert_eq!(serde_json::to_string_pretty(&clusters).unwrap().as_bytes(), std::fs::read(out.join("cluster.json")).unwrap());
    let sets = select_stage(&matrix, &cfg.select, 2).unwrap();
    let from_disk = read_regulators_csv(&std::fs::read_to_string(out.join("regulators.csv")).unwrap()).unwrap();
    for (s, d) in sets.iter().zip(&from_disk) {
        assert_eq!((&s.target, &s.regulators), (&d.target, &d.regulators));
    }
    let fits = fit_stage(&matrix, &scaled, &from_disk, &cfg.fit, 2).unwrap();
    assert_eq!(fits, run.fits);
    let net = network_stage(&fits, &module_labels(&clusters), &cfg.network).unwrap();
    assert_eq!(net.to_json().unwrap().as_bytes(), std::fs::read(out.join("network.json")).unwrap());
    let g = WeightedDigraph::from_network(&IdopNetwork::read_json(out.join("network.json")).unwrap()).unwrap();
    assert_eq!(homology_stage(&g.graph, &cfg.homology), run.betti);
    let bars = persist_stage(&g, &cfg.persistence, &cfg.homology).unwrap();
    let csv = std::fs::read_to_string(out.join("barcode.csv")).unwrap();
    assert_eq!(barcodes_to_csv(&bars), csv);
    assert_eq!(read_barcodes_csv(&csv).unwrap(), bars.into_iter().filter(|b| !b.intervals.is_empty()).collect::<Vec<_>>());
}

#[test]
fn failing_stage_writes_error_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    // Constant column sums make the index degenerate after ingest parses.
    let input = tmp.path().join("flat.csv");
    std::fs::write(&input, "id,s1,s2,s3\na,1,2,3\nb,3,2,1\n").unwrap();
    let out = tmp.path().join("out");
    let err = run_pipeline(&config(&input, &out)).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["error"]["stage"], "ingest");
    assert_eq!(manifest["error"]["kind"], "validation");

    // Unknown personalized sample is rejected before any modeling.
    let input = small_matrix(tmp.path());
    let mut cfg = config(&input, &tmp.path().join("out2"));
    cfg.network.personalize = vec!["nope".into()];
    assert!(matches!(run_pipeline(&cfg), Err(Error::Validation(_))));
}

#[test]
fn config_paths_resolve_against_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    small_matrix(tmp.path());
    let cfg_path = tmp.path().join("run.json");
    std::fs::write(&cfg_path, r#"{"input": "small.csv", "output_dir": "res", "homology": {"field": "q", "max_dim": 1}}"#).unwrap();
    let cfg = PipelineConfig::from_file(&cfg_path).unwrap();
    assert_eq!(cfg.input, tmp.path().join("small.csv"));
    run_pipeline(&cfg).unwrap();
    assert!(tmp.path().join("res/barcode.csv").is_file());
    std::fs::write(&cfg_path, r#"{"input": "small.csv", "homology": {"fields": "q"}}"#).unwrap();
    assert!(matches!(PipelineConfig::from_file(&cfg_path), Err(Error::Json(_))));
}
