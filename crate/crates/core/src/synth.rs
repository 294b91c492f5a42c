// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic multilingual embedding spaces with planted ground truth.
//!
//! Row `i` of language `x` is
//! `o_x + sum over features of s * d[f][fv_x(f)] + eps_i`, `eps_i ~ N(0, sigma^2 I)`.
//! Offsets and value directions come from one Gram-Schmidt basis, so they
//! are mutually orthonormal unless `confound` mixes them on purpose.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    builtin_catalogue, make_pairs, save_feature_catalogue, standard_pairs, AnnotationTable, FeatureCategory,
    LanguageId, LanguagePair, WalsFeature,
};
use crate::embedding::{write_embeddings, Dtype, EmbeddingHeader, EmbeddingMatrix, Manifest};
use crate::error::{Error, Result};
use crate::probe::TrainConfig;
use crate::rng;

fn default_encoder() -> String {
    "synthetic".into()
}

fn default_layer() -> u16 {
    12
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

/// JSON recipe for a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRecipe {
    pub tag: String,
    pub dim: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub sentences_per_language: usize,
    /// Length of every language offset.
    #[serde(default)]
    pub offset_norm: f64,
    /// Overlap mixed from a language's value directions into its offset.
    /// 0 keeps offsets orthogonal to every direction.
    #[serde(default)]
    pub confound: f64,
    #[serde(default = "default_encoder")]
    pub encoder: String,
    #[serde(default = "default_layer")]
    pub layer: u16,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    /// `(train, test)` codes; the standard seven pairs when absent.
    #[serde(default)]
    pub pairs: Option<Vec<(String, String)>>,
    #[serde(default)]
    pub features: Vec<FeatureRecipe>,
    /// Adds catalogue features with automatically assigned values.
    #[serde(default)]
    pub catalogue_features: Option<CatalogueSelection>,
    /// Copied into the generated plan.
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecipe {
    pub code: String,
    /// Defaults to the catalogue entry, or to the code for ad-hoc features.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub category: Option<FeatureCategory>,
    /// Required for codes outside the catalogue.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    pub scale: f64,
    /// Language code to label. Absent: assigned per pair, honouring the
    /// feature's excluded pairs.
    #[serde(default)]
    pub values: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogueSelection {
    pub scale: f64,
    /// All catalogue features when absent.
    #[serde(default)]
    pub codes: Option<Vec<String>>,
}

impl SynthRecipe {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            origin: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedFeature {
    pub feature: WalsFeature,
    pub scale: f64,
    /// One unit direction per label, in class-index order.
    pub directions: Vec<Vec<f64>>,
    /// Class index per annotated language.
    pub assignments: BTreeMap<LanguageId, usize>,
}

/// A fully realised synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub tag: String,
    pub dim: usize,
    pub pairs: Vec<LanguagePair>,
    /// Offsets in pair order: train then test language of each pair.
    pub languages: Vec<(LanguageId, Vec<f64>)>,
    pub features: Vec<PlantedFeature>,
    pub noise_sigma: f64,
    pub sentences_per_language: usize,
    pub seed: u64,
    pub encoder: String,
    pub layer: u16,
    pub dtype: Dtype,
    pub train: TrainConfig,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalise(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `count` orthonormal vectors of length `dim` (modified Gram-Schmidt on
/// Gaussian draws).
pub fn orthonormal_basis(dim: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count > dim {
        return Err(Error::Validation(format!(
            "cannot orthogonalise {count} directions in dim {dim}"
        )));
    }
    let mut rng = rng::stream(seed, "basis");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        // a near-degenerate draw is simply redrawn
        if normalise(&mut v) > 1e-6 {
            basis.push(v);
        }
    }
    Ok(basis)
}

fn check_recipe(r: &SynthRecipe) -> Result<()> {
    let bad = |m: String| Err(Error::Validation(m));
    if r.dim == 0 || r.sentences_per_language == 0 {
        return bad("dim and sentences_per_language must be positive".into());
    }
    for (name, v) in [
        ("noise_sigma", r.noise_sigma),
        ("offset_norm", r.offset_norm),
        ("confound", r.confound),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return bad(format!("{name} must be finite and non-negative, got {v}"));
        }
    }
    let scales = r
        .features
        .iter()
        .map(|f| (f.code.as_str(), f.scale))
        .chain(r.catalogue_features.iter().map(|c| ("catalogue_features", c.scale)));
    for (code, s) in scales {
        if !(s.is_finite() && s > 0.0) {
            return bad(format!("{code}: scale must be positive, got {s}"));
        }
    }
    if r.features.is_empty() && r.catalogue_features.is_none() {
        return bad("recipe plants no features".into());
    }
    Ok(())
}

fn resolve_feature(fr: &FeatureRecipe, catalogue: &[WalsFeature]) -> Result<WalsFeature> {
    let known = catalogue.iter().find(|f| f.code == fr.code);
    match (&fr.labels, known) {
        (Some(labels), k) => {
            let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
            WalsFeature::new(
                &fr.code,
                fr.name.as_deref().or(k.map(|f| f.name.as_str())).unwrap_or(&fr.code),
                fr.category.or(k.map(|f| f.category)).unwrap_or(FeatureCategory::WordOrder),
                &labels,
                k.map(|f| f.excluded_pairs.clone()).unwrap_or_default(),
            )
        }
        (None, Some(f)) => {
            let mut f = f.clone();
            if let Some(n) = &fr.name {
                f.name = n.clone();
            }
            Ok(f)
        }
        (None, None) => Err(Error::Validation(format!(
            "feature {} is not in the catalogue and lists no labels",
            fr.code
        ))),
    }
}

/// Spreads the labels over the pairs not excluded for `feature`: after a
/// seeded shuffle, the i-th pair takes label `i mod K`, and both languages
/// of a pair share it.
fn assign_by_pair(feature: &WalsFeature, pairs: &[LanguagePair], seed: u64) -> Result<BTreeMap<LanguageId, usize>> {
    let mut included: Vec<&LanguagePair> =
        pairs.iter().filter(|p| !feature.excluded_pairs.contains(&p.index)).collect();
    if included.len() < 2 {
        return Err(Error::Validation(format!(
            "feature {} covers {} pair(s); at least 2 are needed to train",
            feature.code,
            included.len()
        )));
    }
    included.shuffle(&mut rng::stream(seed, &format!("values:{}", feature.code)));
    let k = feature.num_classes();
    let mut out = BTreeMap::new();
    for (i, p) in included.into_iter().enumerate() {
        out.insert(p.train.clone(), i % k);
        out.insert(p.test.clone(), i % k);
    }
    Ok(out)
}

fn explicit_assignments(
    feature: &WalsFeature,
    values: &BTreeMap<String, String>,
    languages: &BTreeSet<LanguageId>,
) -> Result<BTreeMap<LanguageId, usize>> {
    let mut out = BTreeMap::new();
    for (lang, label) in values {
        let id = LanguageId::new(lang)?;
        if !languages.contains(&id) {
            return Err(Error::Validation(format!(
                "feature {}: language {id} is in no pair",
                feature.code
            )));
        }
        let v = feature.value(label).ok_or_else(|| {
            Error::Validation(format!("feature {} has no label {label:?}", feature.code))
        })?;
        out.insert(id, v.index);
    }
    Ok(out)
}

/// Resolves features, assigns values and builds the geometry.
pub fn realise(recipe: &SynthRecipe) -> Result<SyntheticSpec> {
    check_recipe(recipe)?;
    let pairs = match &recipe.pairs {
        Some(p) => {
            let codes: Vec<(&str, &str)> = p.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            make_pairs(&codes)?
        }
        None => standard_pairs(),
    };
    let language_ids: Vec<LanguageId> =
        pairs.iter().flat_map(|p| [p.train.clone(), p.test.clone()]).collect();
    let language_set: BTreeSet<LanguageId> = language_ids.iter().cloned().collect();
    let catalogue = builtin_catalogue();

    let mut resolved: Vec<(WalsFeature, f64, BTreeMap<LanguageId, usize>)> = Vec::new();
    let mut seen = BTreeSet::new();
    for fr in &recipe.features {
        let feature = resolve_feature(fr, &catalogue)?;
        let assignments = match &fr.values {
            Some(v) => explicit_assignments(&feature, v, &language_set)?,
            None => assign_by_pair(&feature, &pairs, recipe.seed)?,
        };
        if !seen.insert(feature.code.clone()) {
            return Err(Error::Validation(format!("feature {} planted twice", feature.code)));
        }
        resolved.push((feature, fr.scale, assignments));
    }
    if let Some(sel) = &recipe.catalogue_features {
        let chosen: Vec<&WalsFeature> = match &sel.codes {
            Some(codes) => codes
                .iter()
                .map(|c| {
                    catalogue
                        .iter()
                        .find(|f| &f.code == c)
                        .ok_or_else(|| Error::Validation(format!("unknown catalogue feature {c}")))
                })
                .collect::<Result<_>>()?,
            None => catalogue.iter().collect(),
        };
        for feature in chosen {
            if !seen.insert(feature.code.clone()) {
                return Err(Error::Validation(format!("feature {} planted twice", feature.code)));
            }
            let assignments = assign_by_pair(feature, &pairs, recipe.seed)?;
            resolved.push((feature.clone(), sel.scale, assignments));
        }
    }

    let directions_needed: usize = resolved.iter().map(|(f, _, _)| f.num_classes()).sum();
    let offsets_needed = if recipe.offset_norm > 0.0 { language_ids.len() } else { 0 };
    let basis = orthonormal_basis(recipe.dim, offsets_needed + directions_needed, recipe.seed)?;
    let mut basis = basis.into_iter();
    let offset_basis: Vec<Vec<f64>> = basis.by_ref().take(offsets_needed).collect();

    let features: Vec<PlantedFeature> = resolved
        .into_iter()
        .map(|(feature, scale, assignments)| PlantedFeature {
            directions: basis.by_ref().take(feature.num_classes()).collect(),
            feature,
            scale,
            assignments,
        })
        .collect();

    let languages = language_ids
        .iter()
        .enumerate()
        .map(|(i, lang)| {
            let mut o = vec![0.0; recipe.dim];
            if offsets_needed > 0 {
                o.copy_from_slice(&offset_basis[i]);
                for f in &features {
                    if let Some(&v) = f.assignments.get(lang) {
                        o.iter_mut()
                            .zip(&f.directions[v])
                            .for_each(|(a, d)| *a += recipe.confound * d);
                    }
                }
                normalise(&mut o);
                o.iter_mut().for_each(|a| *a *= recipe.offset_norm);
            }
            (lang.clone(), o)
        })
        .collect();

    Ok(SyntheticSpec {
        tag: recipe.tag.clone(),
        dim: recipe.dim,
        pairs,
        languages,
        features,
        noise_sigma: recipe.noise_sigma,
        sentences_per_language: recipe.sentences_per_language,
        seed: recipe.seed,
        encoder: recipe.encoder.clone(),
        layer: recipe.layer,
        dtype: recipe.dtype,
        train: recipe.train.clone(),
    })
}

impl SyntheticSpec {
    /// Noise-free row of `language`: its offset plus its planted directions.
    pub fn expected_row(&self, language: &LanguageId) -> Option<Vec<f64>> {
        let (_, offset) = self.languages.iter().find(|(l, _)| l == language)?;
        let mut mu = offset.clone();
        for f in &self.features {
            if let Some(&v) = f.assignments.get(language) {
                mu.iter_mut()
                    .zip(&f.directions[v])
                    .for_each(|(m, d)| *m += f.scale * d);
            }
        }
        Some(mu)
    }

    pub fn feature(&self, code: &str) -> Option<&PlantedFeature> {
        self.features.iter().find(|f| f.feature.code == code)
    }

    pub fn catalogue(&self) -> Vec<WalsFeature> {
        self.features.iter().map(|f| f.feature.clone()).collect()
    }

    pub fn annotations(&self) -> AnnotationTable {
        let mut table = AnnotationTable::new(&format!("synthetic:{}", self.tag));
        for f in &self.features {
            for (lang, &v) in &f.assignments {
                table
                    .insert(&f.feature, lang.clone(), &f.feature.labels[v].label)
                    .expect("planted labels are valid");
            }
        }
        table
    }
}

pub struct SyntheticCorpus {
    /// One matrix per language, in the world's language order.
    pub matrices: Vec<EmbeddingMatrix>,
    pub annotations: AnnotationTable,
    pub catalogue: Vec<WalsFeature>,
}

impl SyntheticCorpus {
    pub fn matrix(&self, language: &LanguageId) -> Option<&EmbeddingMatrix> {
        self.matrices.iter().find(|m| m.language() == language)
    }
}

/// Samples every language's rows. Each language draws noise from its own
/// named stream, so languages can be generated in parallel.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::Validation(format!("noise_sigma: {e}")))?;
    let matrices = spec
        .languages
        .par_iter()
        .map(|(lang, _)| {
            let mu = spec.expected_row(lang).expect("language in world");
            let mut rng = rng::stream(spec.seed, &format!("noise:{lang}"));
            let n = spec.sentences_per_language;
            let mut data = Vec::with_capacity(n * spec.dim);
            for _ in 0..n {
                data.extend(mu.iter().map(|m| {
                    if spec.noise_sigma > 0.0 {
                        m + noise.sample(&mut rng)
                    } else {
                        *m
                    }
                }));
            }
            let mut header = EmbeddingHeader::new(lang.clone(), &spec.encoder, spec.layer, spec.dim, n, spec.dtype);
            header.encoder_depth = header.encoder_depth.max(spec.layer);
            header.provenance = format!("synthetic:{}:seed={}", spec.tag, spec.seed);
            EmbeddingMatrix::new(header, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus {
        matrices,
        annotations: spec.annotations(),
        catalogue: spec.catalogue(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleEntry {
    pub language: LanguageId,
    /// Expected component along the language's own value direction after
    /// subtracting x's expected centroid.
    pub residual: f64,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleDelta {
    pub task: String,
    pub x: LanguageId,
    pub entries: Vec<OracleEntry>,
}

impl OracleDelta {
    pub fn degraded(&self) -> BTreeSet<LanguageId> {
        self.entries.iter().filter(|e| e.degraded).map(|e| e.language.clone()).collect()
    }
}

/// Predicts from the planted geometry alone which test languages lose
/// their signal when x's centroid is subtracted. A language is degraded
/// when less than half of its planted component survives.
pub fn oracle_delta(spec: &SyntheticSpec, task: &str, x: &LanguageId) -> Result<OracleDelta> {
    let f = spec
        .feature(task)
        .ok_or_else(|| Error::Validation(format!("feature {task} is not planted")))?;
    let centre = spec
        .expected_row(x)
        .ok_or_else(|| Error::Validation(format!("language {x} is not in the synthetic world")))?;
    let mut entries = Vec::new();
    for pair in &spec.pairs {
        let y = &pair.test;
        let (Some(&vy), Some(_)) = (f.assignments.get(y), f.assignments.get(&pair.train)) else {
            continue;
        };
        let mu = spec.expected_row(y).expect("pair language in world");
        let diff: Vec<f64> = mu.iter().zip(&centre).map(|(a, b)| a - b).collect();
        let residual = dot(&diff, &f.directions[vy]);
        entries.push(OracleEntry {
            language: y.clone(),
            residual,
            degraded: residual < 0.5 * f.scale,
        });
    }
    Ok(OracleDelta {
        task: task.to_owned(),
        x: x.clone(),
        entries,
    })
}

/// Writes `embeddings/<lang>.emb`, `features.json`, `annotations.tsv`,
/// `manifest.json` and a ready-to-run `plan.json` under `out`.
pub fn write_corpus(spec: &SyntheticSpec, corpus: &SyntheticCorpus, out: &Path) -> Result<()> {
    let emb_dir = out.join("embeddings");
    fs::create_dir_all(&emb_dir).map_err(|e| Error::io(&emb_dir, e))?;
    let mut manifest = Manifest::new(&spec.tag, out);
    for m in &corpus.matrices {
        let rel = Path::new("embeddings").join(format!("{}.emb", m.language()));
        write_embeddings(m, &out.join(&rel))?;
        manifest.add_file(m.header(), &rel)?;
    }
    manifest.save(&out.join("manifest.json"))?;
    save_feature_catalogue(&corpus.catalogue, &out.join("features.json"))?;
    let ann = out.join("annotations.tsv");
    fs::write(&ann, corpus.annotations.to_tsv()).map_err(|e| Error::io(&ann, e))?;

    let plan = crate::experiment::PlanFile {
        tag: spec.tag.clone(),
        catalogue: Some("features.json".into()),
        annotations: "annotations.tsv".into(),
        manifest: "manifest.json".into(),
        pairs: Some(
            spec.pairs
                .iter()
                .map(|p| (p.train.to_string(), p.test.to_string()))
                .collect(),
        ),
        tasks: Some(spec.features.iter().map(|f| f.feature.code.clone()).collect()),
        encoder: spec.encoder.clone(),
        layer: spec.layer,
        train: spec.train.clone(),
        seed: spec.seed,
        ..crate::experiment::PlanFile::default()
    };
    plan.save(&out.join("plan.json"))
}
