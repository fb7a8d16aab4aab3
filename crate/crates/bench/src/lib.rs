//! Synthetic inputs shared by the benchmarks.

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapo_core::embedding::{embed, Embedder, VectorIndex};
use rapo_core::graph::{BuildMeta, ModifierCategory, RelationGraph, SceneNode};

pub const VOCAB: &[&str] = &[
    "forest", "beach", "city", "street", "kitchen", "mountain", "river", "desert", "garden", "studio", "dog", "cat",
    "woman", "man", "child", "horse", "bird", "car", "boat", "robot", "runs", "jumps", "walks", "flies", "swims",
    "dances", "sleeps", "reads", "golden", "misty", "bright", "dark", "rainy", "snowy", "calm", "busy", "red", "blue",
    "green", "old", "young", "tall", "small", "fluffy", "shiny", "wooden", "quiet", "loud",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn phrase(rng: &mut impl Rng, words: usize) -> String {
    (0..words)
        .map(|_| *VOCAB.choose(rng).expect("vocab is non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A graph of `scenes` scenes with up to `modifiers` modifiers each.
pub fn random_graph(seed: u64, scenes: usize, modifiers: usize, embedder: &dyn Embedder) -> RelationGraph {
    let mut rng = rng(seed);
    let mut map = IndexMap::new();
    while map.len() < scenes {
        let label = format!("{} {}", phrase(&mut rng, 2), map.len());
        let mut node = SceneNode::new(label.clone());
        for _ in 0..rng.random_range(1..=modifiers.max(1)) {
            let cat = ModifierCategory::ALL[rng.random_range(0..3)];
            let words = rng.random_range(1..4);
            node.add(&phrase(&mut rng, words), cat, rng.random_range(1..5));
        }
        map.insert(label, node);
    }
    RelationGraph::from_scenes(map, embedder, BuildMeta {
        corpus_origin: "synthetic".into(),
        extractor: "synthetic".into(),
        embedder: embedder.name().into(),
        timestamp: 0,
    })
    .expect("synthetic graph is valid")
}

pub fn random_index(seed: u64, n: usize, embedder: &dyn Embedder) -> VectorIndex {
    let mut rng = rng(seed);
    let mut index = VectorIndex::new(embedder.dimension());
    for i in 0..n {
        let words = rng.random_range(2..8);
        let v = embed(&phrase(&mut rng, words), embedder).expect("vocab words embed");
        index.insert(format!("e{i}"), v).expect("ids are unique");
    }
    index
}
