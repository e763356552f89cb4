//! Synthetic taxonomies, corpora and classifiers with known error rates.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::labeling::OracleLabels;
use crate::predictions::{Confidence, ImageId, ModelId, PredictionRecord, PredictionTable};
use crate::taxonomy::{LabelId, TaxonomyBuilder, TaxonomyGraph};

/// Complete tree with `branching` children per node and leaves at
/// `depth`; the leaves are the label set. Node ids are dotted paths from
/// the root `r`.
pub fn balanced_taxonomy(branching: usize, depth: usize) -> TaxonomyGraph {
    let mut b = TaxonomyBuilder::new();
    b.node("r", "s", "entity");
    let mut level = vec!["r".to_string()];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(level.len() * branching);
        for parent in &level {
            for c in 0..branching {
                let id = format!("{parent}.{c}");
                b.node(&id, format!("s{}", &id[1..]), format!("concept {}", &id[2..]));
                b.edge(parent, &id);
                next.push(id);
            }
        }
        level = next;
    }
    for leaf in &level {
        b.label(leaf);
    }
    b.build().expect("balanced tree is a valid taxonomy")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub images: usize,
    /// Probability that an image holds a second object.
    pub multi_object_rate: f64,
    pub nonnatural_rate: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            images: 10_000,
            multi_object_rate: 0.2,
            nonnatural_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub id: ImageId,
    /// Objects present, primary first. Empty for non-natural images.
    pub objects: Vec<LabelId>,
}

/// A corpus with its ground truth.
#[derive(Debug, Clone)]
pub struct World {
    pub labels: Vec<LabelId>,
    pub images: Vec<SyntheticImage>,
    pub oracle: OracleLabels,
}

pub fn generate_world(graph: &TaxonomyGraph, config: &WorldConfig) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let labels = graph.labels().to_vec();
    let width = config.images.max(1).to_string().len();
    let mut images = Vec::with_capacity(config.images);
    let mut oracle = OracleLabels::new();
    for n in 0..config.images {
        let id = ImageId::new(&format!("img{n:0width$}"));
        let objects = if rng.random_bool(config.nonnatural_rate) {
            Vec::new()
        } else {
            let first = *labels.choose(&mut rng).expect("taxonomy has labels");
            let mut objects = vec![first];
            if labels.len() > 1 && rng.random_bool(config.multi_object_rate) {
                loop {
                    let second = *labels.choose(&mut rng).expect("non-empty");
                    if second != first {
                        objects.push(second);
                        break;
                    }
                }
            }
            objects
        };
        let truth: BTreeSet<LabelId> = objects.iter().copied().collect();
        oracle
            .insert(id.clone(), !objects.is_empty(), truth)
            .expect("generated ids are unique");
        images.push(SyntheticImage { id, objects });
    }
    World { labels, images, oracle }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub id: ModelId,
    pub error_rate: f64,
}

impl ModelSpec {
    pub fn new(id: &str, error_rate: f64) -> Self {
        Self {
            id: id.into(),
            error_rate,
        }
    }
}

/// Confidence range, in millionths, of wrong and of correct predictions.
const WRONG_CONFIDENCE: (u32, u32) = (800_000, 1_000_000);
const RIGHT_CONFIDENCE: (u32, u32) = (600_000, 1_000_000);

/// Stream id derived from the model name, so a model's predictions do not
/// depend on which other models are generated alongside it.
fn stream_of(id: &ModelId) -> u64 {
    id.0.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Predictions of a classifier that errs on each natural image
/// independently with probability `error_rate`. Errors are confident
/// predictions of a label the image does not contain; correct predictions
/// name one of its objects. Non-natural images get a random confident label.
pub fn synthetic_model(world: &World, spec: &ModelSpec, seed: u64) -> Vec<PredictionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_of(&spec.id));
    let conf = |rng: &mut ChaCha8Rng, (lo, hi): (u32, u32)| Confidence::from_micros(rng.random_range(lo..=hi));
    world
        .images
        .iter()
        .map(|img| {
            let (label, confidence) = if img.objects.is_empty() {
                (
                    *world.labels.choose(&mut rng).expect("non-empty"),
                    conf(&mut rng, WRONG_CONFIDENCE),
                )
            } else if rng.random_bool(spec.error_rate) && world.labels.len() > img.objects.len() {
                let wrong = loop {
                    let l = *world.labels.choose(&mut rng).expect("non-empty");
                    if !img.objects.contains(&l) {
                        break l;
                    }
                };
                (wrong, conf(&mut rng, WRONG_CONFIDENCE))
            } else {
                (
                    *img.objects.choose(&mut rng).expect("non-empty"),
                    conf(&mut rng, RIGHT_CONFIDENCE),
                )
            };
            PredictionRecord {
                model: spec.id.clone(),
                image: img.id.clone(),
                label,
                confidence,
            }
        })
        .collect()
}

pub fn synthetic_table(world: &World, specs: &[ModelSpec], seed: u64) -> Result<PredictionTable> {
    PredictionTable::from_records(
        specs.iter().map(|s| s.id.clone()).collect(),
        specs.iter().flat_map(|s| synthetic_model(world, s, seed)),
    )
}

/// Fraction of natural images a model gets wrong according to the oracle.
pub fn empirical_error(world: &World, table: &PredictionTable, model: usize) -> f64 {
    let column = table.column_of(model);
    let (mut wrong, mut natural) = (0usize, 0usize);
    for img in &world.images {
        if img.objects.is_empty() {
            continue;
        }
        natural += 1;
        let idx = table.image_index(&img.id).expect("image in table");
        if !img.objects.contains(&column[idx].label) {
            wrong += 1;
        }
    }
    wrong as f64 / natural.max(1) as f64
}
