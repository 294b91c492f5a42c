// SPDX-License-Identifier: MIT OR Apache-2.0

//! Languages, WALS features, annotation tables and paired probing tasks.
//!
//! The feature catalogue is a JSON array of
//! `{code, name, category, labels[], excluded_pairs[]}` objects. Class
//! indices follow the order labels appear in the file. Annotations are a TSV
//! with header `feature\tlanguage\tlabel`; a missing row means the language
//! has no value for that feature.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The catalogue shipped with the crate: the 25 probed WALS features.
pub const BUILTIN_CATALOGUE: &str = include_str!("../data/features.json");

/// Lowercase ISO 639 language code, two or three ASCII letters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageId(String);

impl LanguageId {
    pub fn new(code: &str) -> Result<Self> {
        let valid = (2..=3).contains(&code.len()) && code.bytes().all(|b| b.is_ascii_lowercase());
        if !valid {
            return Err(Error::Validation(format!(
                "language code {code:?} must be 2-3 lowercase ASCII letters"
            )));
        }
        Ok(LanguageId(code.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for LanguageId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LanguageId::new(s)
    }
}

impl TryFrom<String> for LanguageId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        LanguageId::new(&s)
    }
}

impl From<LanguageId> for String {
    fn from(id: LanguageId) -> String {
        id.0
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureCategory {
    NominalCategory,
    VerbalCategory,
    WordOrder,
    SimpleClauses,
}

/// One categorical value of a feature together with its class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureValue {
    pub label: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalsFeature {
    pub code: String,
    pub name: String,
    pub category: FeatureCategory,
    pub labels: Vec<FeatureValue>,
    /// 1-based indices of the standard pairs this feature has no coverage for.
    pub excluded_pairs: Vec<u8>,
}

impl WalsFeature {
    /// Builds a feature, assigning class indices in label order.
    pub fn new(
        code: &str,
        name: &str,
        category: FeatureCategory,
        labels: &[&str],
        excluded_pairs: Vec<u8>,
    ) -> Result<Self> {
        let raw = RawFeature {
            code: code.to_owned(),
            name: name.to_owned(),
            category,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            excluded_pairs,
        };
        raw.into_feature()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn value(&self, label: &str) -> Option<&FeatureValue> {
        self.labels.iter().find(|v| v.label == label)
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|v| v.label.clone()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawFeature {
    code: String,
    name: String,
    category: FeatureCategory,
    labels: Vec<String>,
    #[serde(default)]
    excluded_pairs: Vec<u8>,
}

fn valid_feature_code(code: &str) -> bool {
    let bytes = code.as_bytes();
    match bytes.split_last() {
        Some((last, digits)) => {
            !digits.is_empty()
                && digits.iter().all(u8::is_ascii_digit)
                && last.is_ascii_uppercase()
        }
        None => false,
    }
}

impl RawFeature {
    fn into_feature(self) -> Result<WalsFeature> {
        if !valid_feature_code(&self.code) {
            return Err(Error::Validation(format!(
                "feature code {:?} must be digits followed by one uppercase letter",
                self.code
            )));
        }
        if self.labels.is_empty() {
            return Err(Error::Validation(format!("feature {} has no labels", self.code)));
        }
        let mut seen = BTreeSet::new();
        for label in &self.labels {
            if !seen.insert(label.as_str()) {
                return Err(Error::Validation(format!(
                    "feature {} repeats label {label:?}",
                    self.code
                )));
            }
        }
        let labels = self
            .labels
            .into_iter()
            .enumerate()
            .map(|(index, label)| FeatureValue { label, index })
            .collect();
        Ok(WalsFeature {
            code: self.code,
            name: self.name,
            category: self.category,
            labels,
            excluded_pairs: self.excluded_pairs,
        })
    }
}

impl Serialize for WalsFeature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawFeature {
            code: self.code.clone(),
            name: self.name.clone(),
            category: self.category,
            labels: self.label_names(),
            excluded_pairs: self.excluded_pairs.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for WalsFeature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        RawFeature::deserialize(d)?
            .into_feature()
            .map_err(serde::de::Error::custom)
    }
}

/// Parses a catalogue from JSON text. `origin` names the source in errors.
pub fn parse_feature_catalogue(text: &str, origin: &str) -> Result<Vec<WalsFeature>> {
    if text.trim().is_empty() {
        return Err(Error::Validation(format!("{origin}: no features")));
    }
    let raw: Vec<RawFeature> = serde_json::from_str(text).map_err(|e| Error::Parse {
        origin: origin.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if raw.is_empty() {
        return Err(Error::Validation(format!("{origin}: no features")));
    }
    let mut codes = BTreeSet::new();
    let mut features = Vec::with_capacity(raw.len());
    for r in raw {
        if !codes.insert(r.code.clone()) {
            return Err(Error::Validation(format!(
                "{origin}: duplicate feature code {}",
                r.code
            )));
        }
        features.push(r.into_feature()?);
    }
    Ok(features)
}

pub fn load_feature_catalogue(path: &Path) -> Result<Vec<WalsFeature>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_catalogue(&text, &path.display().to_string())
}

pub fn builtin_catalogue() -> Vec<WalsFeature> {
    parse_feature_catalogue(BUILTIN_CATALOGUE, "builtin features.json")
        .expect("shipped catalogue is valid")
}

pub fn save_feature_catalogue(features: &[WalsFeature], path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(features)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguagePair {
    pub train: LanguageId,
    pub test: LanguageId,
    /// 1-based position in the pair list.
    pub index: u8,
}

impl LanguagePair {
    pub fn new(train: &str, test: &str, index: u8) -> Result<Self> {
        let train = LanguageId::new(train)?;
        let test = LanguageId::new(test)?;
        if train == test {
            return Err(Error::Validation(format!(
                "pair {index} trains and tests on the same language {train}"
            )));
        }
        Ok(LanguagePair { train, test, index })
    }
}

/// Builds numbered pairs from `(train, test)` codes, checking that no
/// language appears twice.
pub fn make_pairs(codes: &[(&str, &str)]) -> Result<Vec<LanguagePair>> {
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(codes.len());
    for (i, (train, test)) in codes.iter().enumerate() {
        let pair = LanguagePair::new(train, test, (i + 1) as u8)?;
        for lang in [&pair.train, &pair.test] {
            if !seen.insert(lang.clone()) {
                return Err(Error::Validation(format!("language {lang} appears in two pairs")));
            }
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

/// The seven typologically diverse pairs; the first language of each trains
/// the probe and the second is tested.
pub fn standard_pairs() -> Vec<LanguagePair> {
    make_pairs(&[
        ("ru", "uk"),
        ("da", "sv"),
        ("cs", "pl"),
        ("pt", "es"),
        ("hi", "mr"),
        ("mk", "bg"),
        ("it", "fr"),
    ])
    .expect("standard pairs are valid")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationTable {
    entries: BTreeMap<(String, LanguageId), FeatureValue>,
    pub source: String,
}

impl AnnotationTable {
    pub fn new(source: &str) -> Self {
        AnnotationTable {
            entries: BTreeMap::new(),
            source: source.to_owned(),
        }
    }

    /// Records `language`'s value for `feature`. Fails if the label is not
    /// one of the feature's values or the cell is already filled.
    pub fn insert(&mut self, feature: &WalsFeature, language: LanguageId, label: &str) -> Result<()> {
        let value = feature.value(label).ok_or_else(|| {
            Error::Validation(format!(
                "feature {} has no label {label:?} (language {language})",
                feature.code
            ))
        })?;
        let key = (feature.code.clone(), language);
        if self.entries.contains_key(&key) {
            return Err(Error::Validation(format!(
                "duplicate annotation for feature {} language {}",
                key.0, key.1
            )));
        }
        self.entries.insert(key, value.clone());
        Ok(())
    }

    pub fn get(&self, feature_code: &str, language: &LanguageId) -> Option<&FeatureValue> {
        self.entries.get(&(feature_code.to_owned(), language.clone()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LanguageId, &FeatureValue)> {
        self.entries.iter().map(|((f, l), v)| (f.as_str(), l, v))
    }

    /// Serialises to the TSV format read by [`load_annotations`].
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("feature\tlanguage\tlabel\n");
        for ((feature, language), value) in &self.entries {
            out.push_str(&format!("{feature}\t{language}\t{}\n", value.label));
        }
        out
    }
}

/// Parses annotation TSV text, validating labels against `catalogue`.
pub fn parse_annotations(text: &str, origin: &str, catalogue: &[WalsFeature]) -> Result<AnnotationTable> {
    let by_code: BTreeMap<&str, &WalsFeature> =
        catalogue.iter().map(|f| (f.code.as_str(), f)).collect();
    let mut table = AnnotationTable::new(origin);
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r') == "feature\tlanguage\tlabel" => {}
        _ => {
            return Err(Error::Parse {
                origin: origin.to_owned(),
                line: 1,
                message: "expected header `feature\\tlanguage\\tlabel`".into(),
            })
        }
    }
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                origin: origin.to_owned(),
                line: line_no,
                message: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let feature = by_code.get(cols[0]).ok_or_else(|| {
            Error::Validation(format!("{origin}:{line_no}: unknown feature {}", cols[0]))
        })?;
        let language = LanguageId::new(cols[1]).map_err(|e| Error::Parse {
            origin: origin.to_owned(),
            line: line_no,
            message: e.to_string(),
        })?;
        table.insert(feature, language, cols[2])?;
    }
    Ok(table)
}

pub fn load_annotations(path: &Path, catalogue: &[WalsFeature]) -> Result<AnnotationTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, &path.display().to_string(), catalogue)
}

/// One feature evaluated over the language pairs that have annotations for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingTaskSpec {
    pub feature: WalsFeature,
    pub included_pairs: Vec<LanguagePair>,
    pub excluded_pairs: Vec<LanguagePair>,
    pub language_labels: BTreeMap<LanguageId, FeatureValue>,
}

impl ProbingTaskSpec {
    pub fn code(&self) -> &str {
        &self.feature.code
    }

    pub fn train_languages(&self) -> Vec<LanguageId> {
        self.included_pairs.iter().map(|p| p.train.clone()).collect()
    }

    pub fn test_languages(&self) -> Vec<LanguageId> {
        self.included_pairs.iter().map(|p| p.test.clone()).collect()
    }

    pub fn label_of(&self, language: &LanguageId) -> Option<&FeatureValue> {
        self.language_labels.get(language)
    }
}

/// Keeps the pairs whose two languages are both annotated for `feature`.
pub fn build_probing_task(
    feature: &WalsFeature,
    pairs: &[LanguagePair],
    annotations: &AnnotationTable,
) -> Result<ProbingTaskSpec> {
    if pairs.is_empty() {
        return Err(Error::Validation("no language pairs given".into()));
    }
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    let mut labels = BTreeMap::new();
    for pair in pairs {
        let train = annotations.get(&feature.code, &pair.train);
        let test = annotations.get(&feature.code, &pair.test);
        match (train, test) {
            (Some(a), Some(b)) => {
                labels.insert(pair.train.clone(), a.clone());
                labels.insert(pair.test.clone(), b.clone());
                included.push(pair.clone());
            }
            _ => excluded.push(pair.clone()),
        }
    }
    if included.is_empty() {
        return Err(Error::Validation(format!(
            "feature {} has no coverage over the given pairs",
            feature.code
        )));
    }
    Ok(ProbingTaskSpec {
        feature: feature.clone(),
        included_pairs: included,
        excluded_pairs: excluded,
        language_labels: labels,
    })
}
