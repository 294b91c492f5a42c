mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use typoprobe::embedding::{read_embeddings, write_embeddings, EmbeddingMatrix, Manifest};

fn tp(args: &[&str]) -> Output {
    tp_env(args, &[])
}

fn tp_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_typoprobe"));
    cmd.args(args).env_remove("TYPOPROBE_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_recipe(dir: &Path, v: Value) -> PathBuf {
    let p = dir.join("recipe.json");
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn small_recipe(dir: &Path) -> PathBuf {
    write_recipe(
        dir,
        json!({
            "tag": "cli", "dim": 24, "seed": 3, "noise_sigma": 0.25, "sentences_per_language": 120,
            "offset_norm": 0.5, "features": [{ "code": "81A", "scale": 5.0 }, { "code": "45A", "scale": 5.0 }],
            "train": { "max_epochs": 5 }
        }),
    )
}

/// Synthesises `recipe` into `dir/corpus`, returning the plan path.
fn synth(dir: &Path, recipe: &Path) -> PathBuf {
    let out = dir.join("corpus");
    let o = tp(&["--quiet", "synth", s(recipe), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("plan.json")
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_fourteen_files_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = common::recipe_path("replica7.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = tp(&["--quiet", "synth", s(&recipe), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(o.stderr.is_empty());
    }
    assert_eq!(fs::read_dir(a.join("embeddings")).unwrap().count(), 14);
    assert_eq!(files_under(&a), files_under(&b));
}

#[test]
fn synth_seed_override_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = small_recipe(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&tp(&["--quiet", "synth", s(&recipe), "--out", s(&a)])), 0);
    assert_eq!(code(&tp(&["--quiet", "--seed", "99", "synth", s(&recipe), "--out", s(&b)])), 0);
    assert_ne!(fs::read(a.join("embeddings/es.emb")).unwrap(), fs::read(b.join("embeddings/es.emb")).unwrap());
    let plan: Value = serde_json::from_slice(&fs::read(b.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["seed"], 99);
}

#[test]
fn synth_rejects_a_dim_too_small() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = write_recipe(
        dir.path(),
        json!({ "tag": "t", "dim": 8, "seed": 1, "noise_sigma": 0.1, "sentences_per_language": 5,
                "catalogue_features": { "scale": 1.0 } }),
    );
    let o = tp(&["synth", s(&recipe), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("cannot orthogonalise"), "{}", stderr(&o));
}

#[test]
fn malformed_recipe_and_arguments_are_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&tp(&["--quiet", "synth", s(&bad), "--out", s(dir.path())])), 2);
    assert_eq!(code(&tp(&["frobnicate"])), 2);
    assert_eq!(code(&tp(&["run"])), 2);
    assert_eq!(code(&tp(&["--version"])), 0);
}

#[test]
fn missing_recipe_is_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = tp(&["--quiet", "synth", s(&dir.path().join("nope.json")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
}

#[test]
fn run_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let plan = synth(dir.path(), &small_recipe(dir.path()));
    let runs = dir.path().join("runs");
    let o = tp(&["run", s(&plan), "--out", s(&runs)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run_dir = PathBuf::from(stdout(&o).trim());
    let name = run_dir.file_name().unwrap().to_str().unwrap();
    let (hash, seed) = name.split_once('-').unwrap();
    assert_eq!(hash.len(), 16);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(seed, "seed3");
    for f in ["plan.json", "manifest.json", "report.csv", "report.json", "report.md", "results/81A.json", "results/45A.json"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    for t in ["81A", "45A"] {
        let probe = typoprobe::probe::TrainedProbe::load(&run_dir.join("probes").join(t)).unwrap();
        assert_eq!(probe.feature, t);
    }
    for line in stderr(&o).lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["event"].is_string() && v["level"].is_string());
    }
    // every written file stays inside the run directory
    let written: Vec<_> = files_under(&runs).into_iter().map(|(p, _)| p).collect();
    assert!(written.iter().all(|p| p.starts_with(name)));
}

#[test]
fn run_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let plan = synth(dir.path(), &small_recipe(dir.path()));
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "4", "4"].iter().enumerate() {
        let runs = dir.path().join(format!("runs{i}"));
        let o = tp_env(&["--quiet", "run", s(&plan), "--out", s(&runs)], &[("TYPOPROBE_THREADS", threads)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let run_dir = PathBuf::from(stdout(&o).trim());
        let reports: Vec<Vec<u8>> = ["report.csv", "report.json", "report.md"]
            .iter()
            .map(|f| fs::read(run_dir.join(f)).unwrap())
            .collect();
        outputs.push((run_dir.file_name().unwrap().to_owned(), reports));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn bad_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let plan = synth(dir.path(), &small_recipe(dir.path()));
    let o = tp_env(&["--quiet", "run", s(&plan), "--out", s(dir.path())], &[("TYPOPROBE_THREADS", "zero")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn modes_flag_restricts_to_self() {
    let dir = tempfile::tempdir().unwrap();
    let plan = synth(dir.path(), &small_recipe(dir.path()));
    let o = tp(&["--quiet", "run", s(&plan), "--out", s(dir.path()), "--modes", "self", "--format", "md,csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run_dir = PathBuf::from(stdout(&o).trim());
    let md = fs::read_to_string(run_dir.join("report.md")).unwrap();
    assert!(md.contains("## Self-neutralisation"));
    assert!(!md.contains("## Cross") && !md.contains("## Baseline"));
    assert_eq!(
        fs::read_to_string(run_dir.join("report.csv")).unwrap(),
        "task,x,mean_same,mean_diff,insufficient,omitted\n"
    );
    assert!(!run_dir.join("report.json").exists());
    let results: Value = serde_json::from_slice(&fs::read(run_dir.join("results/81A.json")).unwrap()).unwrap();
    assert!(results["cross"].as_array().unwrap().is_empty());
}

#[test]
fn overrides_reach_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let plan = synth(dir.path(), &small_recipe(dir.path()));
    let o = tp(&["--quiet", "--seed", "5", "run", s(&plan), "--out", s(dir.path()), "--threshold", "0.9", "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run_dir = PathBuf::from(stdout(&o).trim());
    assert!(run_dir.to_str().unwrap().ends_with("-seed5"));
    let report: Value = serde_json::from_slice(&fs::read(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 5);
    assert_eq!(report["threshold"], 0.9);
    let o = tp(&["--quiet", "run", s(&plan), "--out", s(dir.path()), "--layer", "3"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn bad_run_flags_are_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let plan = synth(dir.path(), &small_recipe(dir.path()));
    for extra in [["--modes", "sideways"], ["--format", "xml"], ["--threshold", "2"]] {
        let mut args = vec!["--quiet", "run", s(&plan), "--out", s(dir.path())];
        args.extend(extra);
        assert_eq!(code(&tp(&args)), 2, "{extra:?}");
    }
}

#[test]
fn missing_embeddings_exit_three_naming_the_language() {
    let dir = tempfile::tempdir().unwrap();
    let plan = synth(dir.path(), &small_recipe(dir.path()));
    fs::remove_file(dir.path().join("corpus/embeddings/mr.emb")).unwrap();
    let o = tp(&["--quiet", "run", s(&plan), "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("mr"), "{}", stderr(&o));
}

#[test]
fn divergent_training_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = write_recipe(
        dir.path(),
        json!({
            "tag": "diverge", "dim": 8, "seed": 1, "noise_sigma": 0.0, "sentences_per_language": 20,
            "dtype": "f64", "features": [{ "code": "81A", "scale": 1e200 }],
            "train": { "optimizer": "sgd", "learning_rate": 1e10, "max_epochs": 5 }
        }),
    );
    let plan = synth(dir.path(), &recipe);
    let o = tp(&["--quiet", "run", s(&plan), "--out", s(dir.path())]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn validate_accepts_a_fresh_corpus() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &small_recipe(dir.path()));
    let o = tp(&["--quiet", "validate", s(&dir.path().join("corpus/manifest.json"))]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["entries"].as_array().unwrap().len(), 14);
}

#[test]
fn validate_reports_a_hash_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &small_recipe(dir.path()));
    let path = dir.path().join("corpus/embeddings/pt.emb");
    let mut bytes = fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0x01;
    fs::write(&path, bytes).unwrap();
    let o = tp(&["validate", s(&dir.path().join("corpus/manifest.json"))]);
    assert_eq!(code(&o), 1);
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let bad: Vec<_> = report["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["hash_ok"] == false)
        .map(|e| e["language"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(bad, ["pt"]);
    assert!(stderr(&o).contains("hash mismatch"));
}

#[test]
fn validate_reports_mixed_layers() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &small_recipe(dir.path()));
    let corpus = dir.path().join("corpus");
    let mut manifest = Manifest::load(&corpus.join("manifest.json")).unwrap();
    let rel = PathBuf::from("embeddings/fr.emb");
    let m = read_embeddings(&corpus.join(&rel)).unwrap();
    let mut header = m.header().clone();
    header.layer = 6;
    write_embeddings(&EmbeddingMatrix::new(header.clone(), m.data().to_vec()).unwrap(), &corpus.join(&rel)).unwrap();
    manifest.entries.retain(|e| e.path != rel);
    manifest.add_file(&header, &rel).unwrap();
    manifest.save(&corpus.join("manifest.json")).unwrap();
    let o = tp(&["--quiet", "validate", s(&corpus.join("manifest.json"))]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("layer 12 vs 6"), "{}", stdout(&o));
}

#[test]
fn validate_missing_manifest_is_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tp(&["--quiet", "validate", s(&dir.path().join("m.json"))])), 3);
}

#[test]
fn library_entry_point_matches_binary() {
    assert_eq!(typoprobe::cli::run(["typoprobe", "--bogus"]), 2);
}
