// SPDX-License-Identifier: MIT OR Apache-2.0

//! Baseline, self- and cross-neutralisation runs and their reports.
//!
//! One probe is trained per task on the raw training-language embeddings
//! and reused by every mode. Deltas are accuracy fractions in [-1, 1].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_probing_task, builtin_catalogue, load_annotations, load_feature_catalogue, make_pairs, standard_pairs,
    AnnotationTable, LanguageId, LanguagePair, ProbingTaskSpec, WalsFeature,
};
use crate::embedding::{read_embeddings, sha256_file, EmbeddingMatrix, Manifest};
use crate::error::{Error, Result};
use crate::neutralise::{compute_centroid_over, cross_neutralise, LanguageCentroid};
use crate::probe::{predict, train_probe, TrainConfig, TrainedProbe};
use crate::rng;

pub const DEFAULT_THRESHOLD: f64 = 0.75;
pub const THREADS_ENV: &str = "TYPOPROBE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Baseline,
    #[serde(rename = "self")]
    SelfNeutral,
    Cross,
}

impl FromStr for ModeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModeKind::Baseline),
            "self" => Ok(ModeKind::SelfNeutral),
            "cross" => Ok(ModeKind::Cross),
            other => Err(Error::Validation(format!(
                "unknown mode {other:?} (expected baseline, self or cross)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Md,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Md];

    /// Parses `all` or a comma-separated subset of `csv,json,md`.
    pub fn parse_list(s: &str) -> Result<Vec<ReportFormat>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim) {
            let f = match part {
                "csv" => ReportFormat::Csv,
                "json" => ReportFormat::Json,
                "md" => ReportFormat::Md,
                other => {
                    return Err(Error::Validation(format!(
                        "unknown report format {other:?} (expected csv, json, md or all)"
                    )))
                }
            };
            if !out.contains(&f) {
                out.push(f);
            }
        }
        Ok(out)
    }

    fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Json => "report.json",
            ReportFormat::Md => "report.md",
        }
    }
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn all_modes() -> Vec<ModeKind> {
    vec![ModeKind::Baseline, ModeKind::SelfNeutral, ModeKind::Cross]
}

fn yes() -> bool {
    true
}

/// `plan.json`. Paths are relative to the plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub tag: String,
    /// Built-in catalogue when absent.
    #[serde(default)]
    pub catalogue: Option<PathBuf>,
    pub annotations: PathBuf,
    pub manifest: PathBuf,
    /// Standard seven pairs when absent.
    #[serde(default)]
    pub pairs: Option<Vec<(String, String)>>,
    /// Every catalogue feature with coverage when absent.
    #[serde(default)]
    pub tasks: Option<Vec<String>>,
    pub encoder: String,
    pub layer: u16,
    /// `train.seed` is replaced by a per-task seed derived from `seed`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "all_modes")]
    pub modes: Vec<ModeKind>,
    /// Languages x to cross-neutralise with; every test language when absent.
    #[serde(default)]
    pub neutralisers: Option<Vec<String>>,
    /// Count x itself in the same-value mean.
    #[serde(default = "yes")]
    pub include_x_in_same: bool,
    /// Fraction of each language's rows reserved for estimating centroids
    /// and left out of evaluation. 0 uses every row for both.
    #[serde(default)]
    pub centroid_holdout: f64,
}

impl Default for PlanFile {
    fn default() -> Self {
        PlanFile {
            tag: "plan".into(),
            catalogue: None,
            annotations: "annotations.tsv".into(),
            manifest: "manifest.json".into(),
            pairs: None,
            tasks: None,
            encoder: "synthetic".into(),
            layer: 12,
            train: TrainConfig::default(),
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            modes: all_modes(),
            neutralisers: None,
            include_x_in_same: true,
            centroid_holdout: 0.0,
        }
    }
}

impl PlanFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            origin: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A plan with its tasks built and every option checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub tag: String,
    pub tasks: Vec<ProbingTaskSpec>,
    /// Catalogue features left out for lack of coverage, with the reason.
    pub skipped_tasks: Vec<(String, String)>,
    pub pairs: Vec<LanguagePair>,
    /// Test languages, in pair order.
    pub language_set: Vec<LanguageId>,
    pub encoder: String,
    pub layer: u16,
    pub train: TrainConfig,
    pub seed: u64,
    pub threshold: f64,
    pub modes: Vec<ModeKind>,
    pub neutralisers: Vec<LanguageId>,
    pub include_x_in_same: bool,
    pub centroid_holdout: f64,
}

impl ExperimentPlan {
    /// Builds the plan from already loaded catalogue and annotations.
    pub fn from_parts(file: &PlanFile, catalogue: &[WalsFeature], annotations: &AnnotationTable) -> Result<Self> {
        let pairs = match &file.pairs {
            Some(p) => {
                let codes: Vec<(&str, &str)> = p.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
                make_pairs(&codes)?
            }
            None => standard_pairs(),
        };
        if !(file.threshold.is_finite() && (0.0..=1.0).contains(&file.threshold)) {
            return Err(Error::Validation(format!("threshold {} outside [0, 1]", file.threshold)));
        }
        if !(0.0..1.0).contains(&file.centroid_holdout) {
            return Err(Error::Validation(format!(
                "centroid_holdout {} outside [0, 1)",
                file.centroid_holdout
            )));
        }
        if file.modes.is_empty() {
            return Err(Error::Validation("plan selects no modes".into()));
        }
        file.train.validate()?;

        let mut tasks = Vec::new();
        let mut skipped_tasks = Vec::new();
        match &file.tasks {
            Some(codes) => {
                let mut seen = BTreeSet::new();
                for code in codes {
                    if !seen.insert(code) {
                        return Err(Error::Validation(format!("task {code} listed twice")));
                    }
                    let feature = catalogue
                        .iter()
                        .find(|f| &f.code == code)
                        .ok_or_else(|| Error::Validation(format!("task {code} is not in the catalogue")))?;
                    tasks.push(build_probing_task(feature, &pairs, annotations)?);
                }
            }
            None => {
                for feature in catalogue {
                    match build_probing_task(feature, &pairs, annotations) {
                        Ok(t) => tasks.push(t),
                        Err(e) => skipped_tasks.push((feature.code.clone(), e.to_string())),
                    }
                }
                if tasks.is_empty() {
                    return Err(Error::Validation("no catalogue feature has annotation coverage".into()));
                }
            }
        }

        let language_set: Vec<LanguageId> = pairs.iter().map(|p| p.test.clone()).collect();
        let neutralisers = match &file.neutralisers {
            Some(codes) => codes
                .iter()
                .map(|c| {
                    let id = LanguageId::new(c)?;
                    if language_set.contains(&id) {
                        Ok(id)
                    } else {
                        Err(Error::Validation(format!("neutraliser {id} is not a test language")))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
            None => language_set.clone(),
        };
        let mut modes = file.modes.clone();
        modes.sort();
        modes.dedup();

        Ok(ExperimentPlan {
            tag: file.tag.clone(),
            tasks,
            skipped_tasks,
            pairs,
            language_set,
            encoder: file.encoder.clone(),
            layer: file.layer,
            train: file.train.clone(),
            seed: file.seed,
            threshold: file.threshold,
            modes,
            neutralisers,
            include_x_in_same: file.include_x_in_same,
            centroid_holdout: file.centroid_holdout,
        })
    }

    /// Loads catalogue and annotations named by `file`, relative to `base_dir`.
    pub fn resolve(file: &PlanFile, base_dir: &Path) -> Result<Self> {
        let catalogue = match &file.catalogue {
            Some(p) => load_feature_catalogue(&base_dir.join(p))?,
            None => builtin_catalogue(),
        };
        let annotations = load_annotations(&base_dir.join(&file.annotations), &catalogue)?;
        Self::from_parts(file, &catalogue, &annotations)
    }

    pub fn runs(&self, mode: ModeKind) -> bool {
        self.modes.contains(&mode)
    }

    /// Every language whose embeddings the plan reads.
    pub fn required_languages(&self) -> BTreeSet<LanguageId> {
        let mut out = BTreeSet::new();
        for t in &self.tasks {
            out.extend(t.train_languages());
            out.extend(t.test_languages());
        }
        if self.runs(ModeKind::Cross) {
            out.extend(self.neutralisers.iter().cloned());
        }
        out
    }

    fn split(&self, count: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        if self.centroid_holdout == 0.0 {
            return (0..count, 0..count);
        }
        let k = ((self.centroid_holdout * count as f64).ceil() as usize).clamp(1, count.saturating_sub(1).max(1));
        (0..k, k..count)
    }
}

/// Per-language matrices for one encoder and layer.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    matrices: BTreeMap<LanguageId, EmbeddingMatrix>,
}

impl EmbeddingStore {
    pub fn from_matrices(matrices: impl IntoIterator<Item = EmbeddingMatrix>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut dim = None;
        for m in matrices {
            let lang = m.language().clone();
            if let Some(d) = dim.filter(|&d| d != m.dim()) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: m.dim(),
                });
            }
            dim = Some(m.dim());
            if map.insert(lang.clone(), m).is_some() {
                return Err(Error::Validation(format!("two matrices for language {lang}")));
            }
        }
        Ok(EmbeddingStore { matrices: map })
    }

    /// Reads the manifest entries for `languages` matching the plan's
    /// encoder and layer, verifying hashes and headers.
    pub fn load(manifest: &Manifest, plan: &ExperimentPlan, languages: &BTreeSet<LanguageId>) -> Result<Self> {
        let loaded = languages
            .par_iter()
            .map(|lang| {
                let entry = manifest
                    .entries
                    .iter()
                    .find(|e| &e.language == lang && e.header.encoder == plan.encoder && e.header.layer == plan.layer)
                    .ok_or_else(|| {
                        Error::Missing(format!(
                            "no embeddings for language {lang} (encoder {}, layer {})",
                            plan.encoder, plan.layer
                        ))
                    })?;
                let path = manifest.resolve(entry);
                if !path.exists() {
                    return Err(Error::Missing(format!(
                        "embedding file for language {lang} not found: {}",
                        path.display()
                    )));
                }
                let hash = sha256_file(&path)?;
                if !hash.eq_ignore_ascii_case(&entry.sha256) {
                    return Err(Error::Validation(format!(
                        "{}: hash {hash} does not match manifest {}",
                        path.display(),
                        entry.sha256
                    )));
                }
                let m = read_embeddings(&path)?;
                if m.header().summary() != entry.header || m.language() != lang {
                    return Err(Error::Validation(format!(
                        "{}: header disagrees with manifest entry",
                        path.display()
                    )));
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        let store = Self::from_matrices(loaded)?;
        store.check_dims()?;
        Ok(store)
    }

    fn check_dims(&self) -> Result<()> {
        let mut dims = self.matrices.values().map(|m| m.dim());
        if let Some(first) = dims.next() {
            if let Some(other) = dims.find(|&d| d != first) {
                return Err(Error::DimensionMismatch {
                    expected: first,
                    actual: other,
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, language: &LanguageId) -> Result<&EmbeddingMatrix> {
        self.matrices
            .get(language)
            .ok_or_else(|| Error::Missing(format!("no embeddings for language {language}")))
    }

    pub fn languages(&self) -> impl Iterator<Item = &LanguageId> {
        self.matrices.keys()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    SelfNeutral,
    Cross(LanguageId),
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Baseline => f.write_str("baseline"),
            Mode::SelfNeutral => f.write_str("self"),
            Mode::Cross(x) => write!(f, "cross:{x}"),
        }
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageDelta {
    pub language: LanguageId,
    pub fv: String,
    pub baseline: f64,
    pub post: f64,
    /// `post - baseline`.
    pub delta: f64,
    /// Most frequent predicted label after the transformation.
    pub modal_prediction: String,
    /// Every row of the evaluated matrix is identical.
    pub degenerate: bool,
    /// Cross mode only: the language shares x's value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub same_as_x: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeutralisationResult {
    pub task: String,
    pub mode: Mode,
    pub per_language: Vec<LanguageDelta>,
}

impl NeutralisationResult {
    pub fn get(&self, language: &LanguageId) -> Option<&LanguageDelta> {
        self.per_language.iter().find(|d| &d.language == language)
    }
}

/// One cell of the cross-neutralisation grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub task: String,
    pub x: LanguageId,
    pub mean_same: Option<f64>,
    pub mean_diff: Option<f64>,
    pub same: Vec<LanguageId>,
    pub diff: Vec<LanguageId>,
    /// x's own baseline accuracy is below the plan threshold.
    pub insufficient: bool,
    /// x has no value for the task.
    pub omitted: bool,
}

impl DeltaRow {
    pub fn omitted(task: &str, x: &LanguageId) -> Self {
        DeltaRow {
            task: task.to_owned(),
            x: x.clone(),
            mean_same: None,
            mean_diff: None,
            same: Vec::new(),
            diff: Vec::new(),
            insufficient: false,
            omitted: true,
        }
    }
}

fn modal(predictions: &[usize], k: usize) -> usize {
    let mut counts = vec![0usize; k];
    for &p in predictions {
        counts[p] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

fn rows_identical(m: &EmbeddingMatrix) -> bool {
    let first = m.row(0);
    m.rows().all(|r| r == first)
}

fn sub_matrix(m: &EmbeddingMatrix, rows: std::ops::Range<usize>) -> Result<EmbeddingMatrix> {
    if rows.start == 0 && rows.end == m.count() {
        return Ok(m.clone());
    }
    let mut header = m.header().clone();
    header.count = rows.len();
    let dim = m.dim();
    EmbeddingMatrix::new(header, m.data()[rows.start * dim..rows.end * dim].to_vec())
}

struct Evaluation {
    accuracy: f64,
    modal: usize,
    degenerate: bool,
}

fn evaluate(probe: &TrainedProbe, matrix: &EmbeddingMatrix, gold: usize) -> Result<Evaluation> {
    let predictions = predict(probe, matrix)?;
    let correct = predictions.iter().filter(|&&p| p == gold).count();
    Ok(Evaluation {
        accuracy: correct as f64 / predictions.len() as f64,
        modal: modal(&predictions, probe.num_classes()),
        degenerate: rows_identical(matrix),
    })
}

/// Centroids of every language the plan neutralises with, from the
/// estimation rows.
pub fn compute_centroids(plan: &ExperimentPlan, store: &EmbeddingStore) -> Result<BTreeMap<LanguageId, LanguageCentroid>> {
    let mut wanted: BTreeSet<LanguageId> = BTreeSet::new();
    if plan.runs(ModeKind::SelfNeutral) || plan.runs(ModeKind::Cross) {
        for t in &plan.tasks {
            wanted.extend(t.test_languages());
        }
    }
    if plan.runs(ModeKind::Cross) {
        wanted.extend(plan.neutralisers.iter().cloned());
    }
    wanted
        .into_par_iter()
        .map(|lang| {
            let m = store.get(&lang)?;
            let (est, _) = plan.split(m.count());
            Ok((lang, compute_centroid_over(m, est)?))
        })
        .collect()
}

/// Trains the task's probe on its raw training-language embeddings.
pub fn train_task_probe(plan: &ExperimentPlan, store: &EmbeddingStore, task: &ProbingTaskSpec) -> Result<TrainedProbe> {
    let mut data = Vec::new();
    for lang in task.train_languages() {
        let label = task.label_of(&lang).expect("included language is annotated").index;
        data.push((store.get(&lang)?, label));
    }
    let config = TrainConfig {
        seed: rng::derive_seed(plan.seed, task.code()),
        ..plan.train.clone()
    };
    train_probe(&task.feature, &data, &config)
}

fn eval_rows(plan: &ExperimentPlan, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let (_, eval) = plan.split(m.count());
    sub_matrix(m, eval)
}

/// Accuracy of every test language on untouched embeddings.
pub fn run_baseline(
    plan: &ExperimentPlan,
    store: &EmbeddingStore,
    task: &ProbingTaskSpec,
    probe: &TrainedProbe,
) -> Result<NeutralisationResult> {
    let per_language = task
        .test_languages()
        .into_iter()
        .map(|lang| {
            let fv = task.label_of(&lang).expect("included language is annotated");
            let m = eval_rows(plan, store.get(&lang)?)?;
            let e = evaluate(probe, &m, fv.index)?;
            Ok(LanguageDelta {
                language: lang,
                fv: fv.label.clone(),
                baseline: e.accuracy,
                post: e.accuracy,
                delta: 0.0,
                modal_prediction: probe.labels[e.modal].clone(),
                degenerate: e.degenerate,
                same_as_x: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NeutralisationResult {
        task: task.code().to_owned(),
        mode: Mode::Baseline,
        per_language,
    })
}

fn neutralised_run<'c>(
    plan: &ExperimentPlan,
    store: &EmbeddingStore,
    task: &ProbingTaskSpec,
    probe: &TrainedProbe,
    baseline: &NeutralisationResult,
    mode: Mode,
    centroid_for: impl Fn(&LanguageId) -> Result<&'c LanguageCentroid>,
) -> Result<NeutralisationResult> {
    let per_language = task
        .test_languages()
        .into_iter()
        .map(|lang| {
            let fv = task.label_of(&lang).expect("included language is annotated");
            let base = baseline
                .get(&lang)
                .ok_or_else(|| Error::Missing(format!("no baseline for {lang} in task {}", task.code())))?
                .baseline;
            let m = eval_rows(plan, store.get(&lang)?)?;
            let v = cross_neutralise(&m, centroid_for(&lang)?)?;
            let e = evaluate(probe, &v, fv.index)?;
            Ok(LanguageDelta {
                language: lang,
                fv: fv.label.clone(),
                baseline: base,
                post: e.accuracy,
                delta: e.accuracy - base,
                modal_prediction: probe.labels[e.modal].clone(),
                degenerate: e.degenerate,
                same_as_x: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NeutralisationResult {
        task: task.code().to_owned(),
        mode,
        per_language,
    })
}

/// Each test language evaluated after subtracting its own centroid.
pub fn run_self_neutralisation(
    plan: &ExperimentPlan,
    store: &EmbeddingStore,
    task: &ProbingTaskSpec,
    probe: &TrainedProbe,
    baseline: &NeutralisationResult,
    centroids: &BTreeMap<LanguageId, LanguageCentroid>,
) -> Result<NeutralisationResult> {
    neutralised_run(plan, store, task, probe, baseline, Mode::SelfNeutral, |lang| {
        centroids
            .get(lang)
            .ok_or_else(|| Error::Missing(format!("no centroid for {lang}")))
    })
}

/// Every test language of the task evaluated after subtracting x's centroid.
pub fn run_cross_neutralisation(
    plan: &ExperimentPlan,
    store: &EmbeddingStore,
    task: &ProbingTaskSpec,
    probe: &TrainedProbe,
    baseline: &NeutralisationResult,
    x: &LanguageCentroid,
) -> Result<NeutralisationResult> {
    let mut result = neutralised_run(plan, store, task, probe, baseline, Mode::Cross(x.language.clone()), |_| Ok(x))?;
    if let Some(fv_x) = task.label_of(&x.language) {
        for d in &mut result.per_language {
            d.same_as_x = Some(d.fv == fv_x.label);
        }
    }
    Ok(result)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Splits a cross result into languages sharing x's value and the rest.
pub fn group_by_feature_value(
    result: &NeutralisationResult,
    task: &ProbingTaskSpec,
    x: &LanguageId,
    threshold: f64,
    include_x: bool,
) -> DeltaRow {
    let Some(fv_x) = task.label_of(x).filter(|_| task.test_languages().contains(x)) else {
        return DeltaRow::omitted(task.code(), x);
    };
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    let (mut same_d, mut diff_d) = (Vec::new(), Vec::new());
    for d in &result.per_language {
        if d.fv == fv_x.label {
            if &d.language == x && !include_x {
                continue;
            }
            same.push(d.language.clone());
            same_d.push(d.delta);
        } else {
            diff.push(d.language.clone());
            diff_d.push(d.delta);
        }
    }
    let insufficient = result.get(x).is_some_and(|d| d.baseline < threshold);
    DeltaRow {
        task: task.code().to_owned(),
        x: x.clone(),
        mean_same: mean(&same_d),
        mean_diff: mean(&diff_d),
        same,
        diff,
        insufficient,
        omitted: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossReport {
    pub row: DeltaRow,
    pub result: Option<NeutralisationResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskReport {
    pub task: String,
    pub name: String,
    pub num_classes: usize,
    /// Uniform chance, 1/K.
    pub chance: f64,
    /// Share of the most frequent label among training sentences.
    pub majority_share: f64,
    pub included_pairs: Vec<u8>,
    pub excluded_pairs: Vec<u8>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub baseline: Option<NeutralisationResult>,
    #[serde(rename = "self")]
    pub self_result: Option<NeutralisationResult>,
    pub cross: Vec<CrossReport>,
    #[serde(skip)]
    pub probe: Option<TrainedProbe>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub tag: String,
    pub seed: u64,
    pub encoder: String,
    pub layer: u16,
    pub threshold: f64,
    pub units: &'static str,
    pub modes: Vec<ModeKind>,
    pub include_x_in_same: bool,
    pub centroid_holdout: f64,
    pub train: TrainConfig,
    pub languages: Vec<LanguageId>,
    pub neutralisers: Vec<LanguageId>,
    pub skipped_tasks: Vec<(String, String)>,
    pub tasks: Vec<TaskReport>,
    /// The cross-neutralisation grid, task-major.
    pub table: Vec<DeltaRow>,
}

pub type Logger<'a> = &'a (dyn Fn(serde_json::Value) + Sync);

/// Trains, evaluates and groups one task.
pub fn run_task(
    plan: &ExperimentPlan,
    store: &EmbeddingStore,
    task: &ProbingTaskSpec,
    centroids: &BTreeMap<LanguageId, LanguageCentroid>,
    log: Logger,
) -> Result<TaskReport> {
    let probe = train_task_probe(plan, store, task)?;
    log(json!({"event": "probe_trained", "task": task.code(), "best_epoch": probe.best_epoch,
               "epochs": probe.train_log.len()}));
    let baseline = run_baseline(plan, store, task, &probe)?;
    let self_result = if plan.runs(ModeKind::SelfNeutral) {
        Some(run_self_neutralisation(plan, store, task, &probe, &baseline, centroids)?)
    } else {
        None
    };
    let mut cross = Vec::new();
    if plan.runs(ModeKind::Cross) {
        cross = plan
            .neutralisers
            .par_iter()
            .map(|x| {
                let row_omitted = !task.test_languages().contains(x);
                if row_omitted {
                    return Ok(CrossReport {
                        row: DeltaRow::omitted(task.code(), x),
                        result: None,
                    });
                }
                let c = centroids
                    .get(x)
                    .ok_or_else(|| Error::Missing(format!("no centroid for {x}")))?;
                let r = run_cross_neutralisation(plan, store, task, &probe, &baseline, c)?;
                Ok(CrossReport {
                    row: group_by_feature_value(&r, task, x, plan.threshold, plan.include_x_in_same),
                    result: Some(r),
                })
            })
            .collect::<Result<Vec<_>>>()?;
    }
    log(json!({"event": "task_done", "task": task.code()}));
    Ok(TaskReport {
        task: task.code().to_owned(),
        name: task.feature.name.clone(),
        num_classes: task.feature.num_classes(),
        chance: 1.0 / task.feature.num_classes() as f64,
        majority_share: probe.majority_share(),
        included_pairs: task.included_pairs.iter().map(|p| p.index).collect(),
        excluded_pairs: task.excluded_pairs.iter().map(|p| p.index).collect(),
        best_epoch: probe.best_epoch,
        epochs_run: probe.train_log.len(),
        baseline: plan.runs(ModeKind::Baseline).then_some(baseline),
        self_result,
        cross,
        probe: Some(probe),
    })
}

/// Worker count from `TYPOPROBE_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Validation(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs every task on a pool of `threads` workers (rayon's default when
/// `None`). Results are merged in plan order, so the thread count never
/// changes the report.
pub fn run_plan(plan: &ExperimentPlan, store: &EmbeddingStore, threads: Option<usize>, log: Logger) -> Result<Report> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    pool.install(|| {
        let centroids = compute_centroids(plan, store)?;
        let tasks = plan
            .tasks
            .par_iter()
            .map(|t| run_task(plan, store, t, &centroids, log))
            .collect::<Result<Vec<_>>>()?;
        let table = tasks.iter().flat_map(|t| t.cross.iter().map(|c| c.row.clone())).collect();
        Ok(Report {
            tag: plan.tag.clone(),
            seed: plan.seed,
            encoder: plan.encoder.clone(),
            layer: plan.layer,
            threshold: plan.threshold,
            units: "accuracy fraction",
            modes: plan.modes.clone(),
            include_x_in_same: plan.include_x_in_same,
            centroid_holdout: plan.centroid_holdout,
            train: plan.train.clone(),
            languages: plan.language_set.clone(),
            neutralisers: plan.neutralisers.clone(),
            skipped_tasks: plan.skipped_tasks.clone(),
            tasks,
            table,
        })
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_csv(report: &Report) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["task", "x", "mean_same", "mean_diff", "insufficient", "omitted"])
        .map_err(csv_err)?;
    for r in &report.table {
        w.write_record([
            r.task.clone(),
            r.x.to_string(),
            opt(r.mean_same),
            opt(r.mean_diff),
            r.insufficient.to_string(),
            r.omitted.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("csv: {e}"))
}

pub fn render_json(report: &Report) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

fn two(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Table-shaped Markdown: one row per task, one column per language.
pub fn render_markdown(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {}\n", report.tag);
    let _ = writeln!(
        out,
        "Encoder `{}`, layer {}, seed {}. Values are accuracy fractions.\n",
        report.encoder, report.layer, report.seed
    );

    let header = |out: &mut String, cols: &[LanguageId]| {
        let _ = write!(out, "| Task | Feature |");
        for c in cols {
            let _ = write!(out, " {c} |");
        }
        let _ = write!(out, "\n|---|---|");
        for _ in cols {
            let _ = write!(out, "---|");
        }
        out.push('\n');
    };
    let per_language_table =
        |out: &mut String, pick: &dyn Fn(&TaskReport) -> Option<&NeutralisationResult>, cell: &dyn Fn(&LanguageDelta) -> String| {
            header(out, &report.languages);
            for t in &report.tasks {
                let _ = write!(out, "| {} | {} |", t.task, t.name);
                for lang in &report.languages {
                    let c = pick(t).and_then(|r| r.get(lang)).map(cell).unwrap_or_default();
                    let _ = write!(out, " {c} |");
                }
                out.push('\n');
            }
            out.push('\n');
        };

    if report.modes.contains(&ModeKind::Baseline) {
        out.push_str("## Baseline accuracy\n\n");
        per_language_table(&mut out, &|t| t.baseline.as_ref(), &|d| two(d.baseline));
    }
    if report.modes.contains(&ModeKind::SelfNeutral) {
        out.push_str("## Self-neutralisation\n\nCells are baseline -> post accuracy.\n\n");
        per_language_table(&mut out, &|t| t.self_result.as_ref(), &|d| {
            format!("{} -> {}", two(d.baseline), two(d.post))
        });
    }
    if report.modes.contains(&ModeKind::Cross) {
        out.push_str("## Cross-neutralisation\n\n");
        let _ = writeln!(
            out,
            "Columns are the neutralising language x. Cells are `same / diff`: mean change over test \
             languages sharing x's value{} and over the rest. Blank: x has no value for the task. \
             Parenthesised: x's own baseline is below {}. `n/a`: empty group.\n",
            if report.include_x_in_same { " (x included)" } else { " (x excluded)" },
            report.threshold
        );
        header(&mut out, &report.neutralisers);
        for t in &report.tasks {
            let _ = write!(out, "| {} | {} |", t.task, t.name);
            for x in &report.neutralisers {
                let cell = match t.cross.iter().find(|c| &c.row.x == x) {
                    Some(c) if !c.row.omitted => {
                        let f = |v: Option<f64>| v.map(two).unwrap_or_else(|| "n/a".into());
                        let body = format!("{} / {}", f(c.row.mean_same), f(c.row.mean_diff));
                        if c.row.insufficient {
                            format!("({body})")
                        } else {
                            body
                        }
                    }
                    _ => String::new(),
                };
                let _ = write!(out, " {cell} |");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    if !report.skipped_tasks.is_empty() {
        out.push_str("## Skipped features\n\n");
        for (code, why) in &report.skipped_tasks {
            let _ = writeln!(out, "- {code}: {why}");
        }
        out.push('\n');
    }
    out
}

/// Writes the requested report files into `dir`.
pub fn emit_report(report: &Report, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    if formats.is_empty() {
        return Err(Error::Validation("no report format requested".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for &f in formats {
        let text = match f {
            ReportFormat::Csv => render_csv(report)?,
            ReportFormat::Json => render_json(report)?,
            ReportFormat::Md => render_markdown(report),
        };
        let path = dir.join(f.file_name());
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Command-line overrides applied on top of a plan file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub layer: Option<u16>,
    pub modes: Option<Vec<ModeKind>>,
    pub threshold: Option<f64>,
    pub formats: Option<Vec<ReportFormat>>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub report: Report,
}

fn absolutise(base: &Path, p: &Path) -> PathBuf {
    let joined = base.join(p);
    fs::canonicalize(&joined).unwrap_or(joined)
}

/// Loads `plan_path`, runs it and writes a run directory under `out_root`
/// named by the plan's content hash and the seed.
pub fn execute(plan_path: &Path, opts: &RunOptions, out_root: &Path, log: Logger) -> Result<RunSummary> {
    let mut file = PlanFile::load(plan_path)?;
    let base = plan_path.parent().unwrap_or(Path::new("."));
    if let Some(s) = opts.seed {
        file.seed = s;
    }
    if let Some(l) = opts.layer {
        file.layer = l;
    }
    if let Some(m) = &opts.modes {
        file.modes = m.clone();
    }
    if let Some(t) = opts.threshold {
        file.threshold = t;
    }
    file.catalogue = file.catalogue.as_ref().map(|p| absolutise(base, p));
    file.annotations = absolutise(base, &file.annotations);
    file.manifest = absolutise(base, &file.manifest);

    let plan = ExperimentPlan::resolve(&file, Path::new(""))?;
    let mut manifest = Manifest::load(&file.manifest)?;
    let store = EmbeddingStore::load(&manifest, &plan, &plan.required_languages())?;

    let mut hasher = Sha256::new();
    let mut unseeded = file.clone();
    unseeded.seed = 0;
    hasher.update(serde_json::to_vec(&unseeded)?);
    for e in &manifest.entries {
        hasher.update(e.sha256.as_bytes());
    }
    let hash = hex::encode(hasher.finalize());
    let run_dir = out_root.join(format!("{}-seed{}", &hash[..16], file.seed));
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    log(json!({"event": "run_start", "run_dir": run_dir.display().to_string(),
               "tasks": plan.tasks.len(), "languages": store.languages().count()}));

    let report = run_plan(&plan, &store, opts.threads, log)?;

    file.save(&run_dir.join("plan.json"))?;
    for e in &mut manifest.entries {
        e.path = manifest.base_dir.join(&e.path);
        e.path = fs::canonicalize(&e.path).unwrap_or(e.path.clone());
    }
    manifest.save(&run_dir.join("manifest.json"))?;
    let results = run_dir.join("results");
    fs::create_dir_all(&results).map_err(|e| Error::io(&results, e))?;
    for t in &report.tasks {
        if let Some(p) = &t.probe {
            p.save(&run_dir.join("probes").join(&t.task))?;
        }
        let path = results.join(format!("{}.json", t.task));
        let mut text = serde_json::to_string_pretty(t)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let formats = opts.formats.clone().unwrap_or_else(|| ReportFormat::ALL.to_vec());
    let files = emit_report(&report, &formats, &run_dir)?;
    log(json!({"event": "run_done", "run_dir": run_dir.display().to_string()}));
    Ok(RunSummary { run_dir, files, report })
}
