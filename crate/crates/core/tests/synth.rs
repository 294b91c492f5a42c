mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use serde_json::json;
use typoprobe::corpus::LanguageId;
use typoprobe::neutralise::{compute_centroid, cross_neutralise};
use typoprobe::synth::*;

fn lang(code: &str) -> LanguageId {
    LanguageId::new(code).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn set(codes: &[&str]) -> BTreeSet<LanguageId> {
    codes.iter().map(|c| lang(c)).collect()
}

/// es, pt and it are test languages sharing Noun-Genitive; mr is alone in
/// No Dominant Order.
fn genitive(sigma: f64) -> SynthRecipe {
    common::recipe_from(json!({
        "tag": "genitive",
        "dim": 24,
        "seed": 13,
        "noise_sigma": sigma,
        "sentences_per_language": 200,
        "offset_norm": 1.0,
        "dtype": "f64",
        "pairs": [["fr", "es"], ["gl", "pt"], ["ro", "it"], ["de", "nl"], ["ja", "ko"], ["hi", "mr"]],
        "features": [{
            "code": "86A", "scale": 4.0,
            "values": {
                "fr": "Noun-Genitive", "es": "Noun-Genitive", "gl": "Noun-Genitive",
                "pt": "Noun-Genitive", "ro": "Noun-Genitive", "it": "Noun-Genitive",
                "de": "Genitive-Noun", "nl": "Genitive-Noun", "ja": "Genitive-Noun",
                "ko": "Genitive-Noun", "hi": "No Dominant Order", "mr": "No Dominant Order"
            }
        }]
    }))
}

#[test]
fn sharing_languages_differ_only_by_offset_without_noise() {
    let spec = realise(&genitive(0.0)).unwrap();
    let corpus = generate_corpus(&spec).unwrap();
    let offset = |l: &LanguageId| spec.languages.iter().find(|(x, _)| x == l).unwrap().1.clone();
    let (es, pt) = (lang("es"), lang("pt"));
    let (a, b) = (corpus.matrix(&es).unwrap(), corpus.matrix(&pt).unwrap());
    let (oa, ob) = (offset(&es), offset(&pt));
    for (ra, rb) in a.rows().zip(b.rows()) {
        for k in 0..spec.dim {
            assert!(((ra[k] - rb[k]) - (oa[k] - ob[k])).abs() < 1e-12);
        }
    }
}

#[test]
fn centroids_concentrate_on_planted_means() {
    let w = common::world(&common::recipe("replica7.json"));
    let sigma = w.spec.noise_sigma;
    let bound = 4.0 * sigma / (w.spec.sentences_per_language as f64).sqrt();
    for m in &w.corpus.matrices {
        let mu = w.spec.expected_row(m.language()).unwrap();
        let c = compute_centroid(m).unwrap();
        for (got, want) in c.vector.iter().zip(&mu) {
            assert!((got - want).abs() < bound, "{}: {got} vs {want}", m.language());
        }
    }
}

#[test]
fn too_many_directions_for_dim() {
    let err = orthonormal_basis(8, 20, 1).unwrap_err();
    assert!(err.to_string().contains("cannot orthogonalise 20 directions in dim 8"));
    let mut r = genitive(0.1);
    r.dim = 8;
    assert!(realise(&r).is_err());
}

#[test]
fn geometry_is_orthonormal() {
    let spec = realise(&genitive(0.1)).unwrap();
    let f = spec.feature("86A").unwrap();
    for (i, a) in f.directions.iter().enumerate() {
        assert!((dot(a, a) - 1.0).abs() < 1e-12);
        for b in &f.directions[i + 1..] {
            assert!(dot(a, b).abs() < 1e-12);
        }
        for (_, o) in &spec.languages {
            assert!(dot(a, o).abs() < 1e-12);
            assert!((dot(o, o).sqrt() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn confound_tilts_offsets_towards_directions() {
    let mut r = genitive(0.1);
    r.confound = 0.5;
    let spec = realise(&r).unwrap();
    let f = spec.feature("86A").unwrap();
    let (_, o) = spec.languages.iter().find(|(l, _)| l == &lang("es")).unwrap();
    let d = &f.directions[f.assignments[&lang("es")]];
    assert!(dot(o, d) > 0.1);
}

#[test]
fn recipe_errors() {
    let mut r = genitive(0.1);
    r.features[0].values.as_mut().unwrap().insert("es".into(), "Purple".into());
    assert!(realise(&r).is_err());
    let mut r = genitive(0.1);
    r.features[0].values.as_mut().unwrap().insert("zz".into(), "Noun-Genitive".into());
    assert!(realise(&r).is_err());
    let mut r = genitive(0.1);
    r.noise_sigma = -1.0;
    assert!(realise(&r).is_err());
    assert!(serde_json::from_value::<SynthRecipe>(json!({ "tag": "t", "dim": 4 })).is_err());
}

#[test]
fn oracle_degrades_the_sharers_of_spanish() {
    let spec = realise(&genitive(0.1)).unwrap();
    assert_eq!(oracle_delta(&spec, "86A", &lang("es")).unwrap().degraded(), set(&["es", "pt", "it"]));
}

#[test]
fn oracle_degrades_only_a_unique_value() {
    let spec = realise(&genitive(0.1)).unwrap();
    assert_eq!(oracle_delta(&spec, "86A", &lang("mr")).unwrap().degraded(), set(&["mr"]));
}

#[test]
fn oracle_matches_value_sharing_on_the_replica() {
    let spec = realise(&common::recipe("replica7.json")).unwrap();
    let f = spec.feature("81A").unwrap();
    for p in &spec.pairs {
        let x = &p.test;
        let expected: BTreeSet<_> = spec
            .pairs
            .iter()
            .map(|q| q.test.clone())
            .filter(|y| f.assignments[y] == f.assignments[x])
            .collect();
        assert_eq!(oracle_delta(&spec, "81A", x).unwrap().degraded(), expected);
    }
}

#[test]
fn oracle_needs_a_planted_feature() {
    let spec = realise(&genitive(0.1)).unwrap();
    assert!(oracle_delta(&spec, "81A", &lang("es")).is_err());
}

#[test]
fn noise_free_projections_after_cross_neutralising() {
    let spec = realise(&genitive(0.0)).unwrap();
    let corpus = generate_corpus(&spec).unwrap();
    let f = spec.feature("86A").unwrap();
    let x = lang("es");
    let cx = compute_centroid(corpus.matrix(&x).unwrap()).unwrap();
    let vx = f.assignments[&x];
    for (y, &vy) in &f.assignments {
        let before = corpus.matrix(y).unwrap();
        let after = cross_neutralise(before, &cx).unwrap();
        for (rb, ra) in before.rows().zip(after.rows()) {
            if vy == vx {
                assert!(dot(ra, &f.directions[vx]).abs() < 1e-9, "{y}");
            } else {
                let own = &f.directions[vy];
                assert!((dot(ra, own) - dot(rb, own)).abs() < 1e-9, "{y}");
            }
        }
    }
}

#[test]
fn written_corpus_has_every_file() {
    let spec = realise(&common::recipe("replica7.json")).unwrap();
    let corpus = generate_corpus(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&spec, &corpus, dir.path()).unwrap();
    let embs = std::fs::read_dir(dir.path().join("embeddings")).unwrap().count();
    assert_eq!(embs, 14);
    for f in ["manifest.json", "features.json", "annotations.tsv", "plan.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let manifest = typoprobe::embedding::Manifest::load(&dir.path().join("manifest.json")).unwrap();
    assert!(typoprobe::embedding::validate_manifest(&manifest, None).is_consistent());
}

#[test]
fn automatic_values_follow_pairs_and_exclusions() {
    let spec = realise(&common::recipe("full_catalogue.json")).unwrap();
    for f in &spec.features {
        for p in &spec.pairs {
            let (a, b) = (f.assignments.get(&p.train), f.assignments.get(&p.test));
            if f.feature.excluded_pairs.contains(&p.index) {
                assert!(a.is_none() && b.is_none(), "{} pair {}", f.feature.code, p.index);
            } else {
                assert_eq!(a.unwrap(), b.unwrap());
            }
        }
    }
}

proptest! {
    #[test]
    fn basis_is_orthonormal(dim in 1usize..40, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let count = ((dim as f64) * frac) as usize;
        let b = orthonormal_basis(dim, count, seed).unwrap();
        prop_assert_eq!(b.len(), count);
        for i in 0..count {
            for j in 0..count {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot(&b[i], &b[j]) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_deterministic(seed in 0u64..1000) {
        let mut r = genitive(0.3);
        r.seed = seed;
        r.sentences_per_language = 5;
        let a = generate_corpus(&realise(&r).unwrap()).unwrap();
        let b = generate_corpus(&realise(&r).unwrap()).unwrap();
        prop_assert_eq!(a.matrices, b.matrices);
    }
}
