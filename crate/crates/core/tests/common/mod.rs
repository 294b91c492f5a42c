#![allow(dead_code)]

use std::path::{Path, PathBuf};

use typoprobe::experiment::{run_plan, EmbeddingStore, ExperimentPlan, PlanFile, Report};
use typoprobe::synth::{generate_corpus, realise, SynthRecipe, SyntheticCorpus, SyntheticSpec};

pub fn recipe_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("recipes").join(name)
}

pub fn recipe(name: &str) -> SynthRecipe {
    SynthRecipe::load(&recipe_path(name)).unwrap()
}

pub fn recipe_from(json: serde_json::Value) -> SynthRecipe {
    serde_json::from_value(json).unwrap()
}

pub struct World {
    pub spec: SyntheticSpec,
    pub corpus: SyntheticCorpus,
    pub plan: ExperimentPlan,
    pub store: EmbeddingStore,
}

pub fn world(recipe: &SynthRecipe) -> World {
    let spec = realise(recipe).unwrap();
    let corpus = generate_corpus(&spec).unwrap();
    let file = PlanFile {
        tag: recipe.tag.clone(),
        tasks: Some(spec.features.iter().map(|f| f.feature.code.clone()).collect()),
        pairs: Some(
            spec.pairs
                .iter()
                .map(|p| (p.train.to_string(), p.test.to_string()))
                .collect(),
        ),
        train: recipe.train.clone(),
        seed: recipe.seed,
        ..PlanFile::default()
    };
    let plan = ExperimentPlan::from_parts(&file, &corpus.catalogue, &corpus.annotations).unwrap();
    let store = EmbeddingStore::from_matrices(corpus.matrices.clone()).unwrap();
    World { spec, corpus, plan, store }
}

pub fn run(w: &World) -> Report {
    run_plan(&w.plan, &w.store, None, &|_| {}).unwrap()
}
