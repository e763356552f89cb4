//! Maximum-discrepancy image selection for each pair of classifiers.
//!
//! For a pair `(i, j)` every corpus image on which both models are confident
//! (`min(p_i, p_j) >= T`) and disagree (`d_w > 0`) becomes a candidate.
//! Candidates are ordered by distance, largest first, then by image id. The
//! top-k subset is taken greedily in that order while keeping at most three
//! images per predicted label for each of the two models. Images discarded
//! during labeling are replaced by the next admissible candidate past the
//! cursor.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fmt::sig;
use crate::predictions::{Confidence, ImageId, ModelId, PredictionTable};
use crate::taxonomy::{LabelId, TaxonomyGraph};

pub const DEFAULT_K: usize = 30;
pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const MAX_PER_LABEL: usize = 3;

/// Model indices `(i, j)` with `i < j` in competition order.
pub type Pair = (usize, usize);

/// All unordered pairs of `m` models in lexicographic order.
pub fn all_pairs(m: usize) -> Vec<Pair> {
    (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub k: usize,
    pub threshold: Confidence,
    pub max_per_label: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            threshold: Confidence::from_f64(DEFAULT_THRESHOLD).expect("valid default"),
            max_per_label: MAX_PER_LABEL,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.max_per_label == 0 {
            return Err(Error::Config("max images per label must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub image: ImageId,
    pub distance: f64,
    pub label_i: LabelId,
    pub label_j: LabelId,
    pub conf_i: Confidence,
    pub conf_j: Confidence,
}

/// Total order used for candidate lists: distance descending, then id.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.distance.total_cmp(&a.distance).then_with(|| a.image.cmp(&b.image))
}

/// Eligible candidates for models `i` and `j`, sorted by [`candidate_order`].
pub fn rank_pair_candidates(
    table: &PredictionTable,
    graph: &TaxonomyGraph,
    i: usize,
    j: usize,
    threshold: Confidence,
    exec: Exec,
) -> Vec<Candidate> {
    assert_ne!(i, j, "a pair needs two distinct models");
    let (ci, cj) = (table.column_of(i), table.column_of(j));
    let images = table.images();
    let mut out = exec.filter_map_range(images.len(), |x| {
        let (pi, pj) = (ci[x], cj[x]);
        if pi.confidence.min(pj.confidence) < threshold || pi.label == pj.label {
            return None;
        }
        let distance = graph.semantic_distance(pi.label, pj.label);
        (distance > 0.0).then(|| Candidate {
            image: images[x].clone(),
            distance,
            label_i: pi.label,
            label_j: pj.label,
            conf_i: pi.confidence,
            conf_j: pj.confidence,
        })
    });
    exec.sort_by(&mut out, candidate_order);
    out
}

/// Candidate queue and selected top-k subset for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSubset {
    pub pair: Pair,
    candidates: Vec<Candidate>,
    /// Candidate positions, ascending.
    selected: Vec<usize>,
    discarded: Vec<usize>,
    cursor: usize,
    k: usize,
    max_per_label: usize,
    counts_i: HashMap<LabelId, usize>,
    counts_j: HashMap<LabelId, usize>,
}

impl PairSubset {
    /// Walks `candidates` in order, skipping any image that would push
    /// either model past `max_per_label` images of one predicted label.
    pub fn select_top_k(pair: Pair, candidates: Vec<Candidate>, k: usize, max_per_label: usize) -> Self {
        assert!(k >= 1, "k must be positive");
        let mut s = Self {
            pair,
            candidates,
            selected: Vec::with_capacity(k),
            discarded: Vec::new(),
            cursor: 0,
            k,
            max_per_label,
            counts_i: HashMap::new(),
            counts_j: HashMap::new(),
        };
        while s.selected.len() < k {
            if s.advance().is_none() {
                break;
            }
        }
        s
    }

    fn admissible(&self, c: &Candidate) -> bool {
        self.counts_i.get(&c.label_i).copied().unwrap_or(0) < self.max_per_label
            && self.counts_j.get(&c.label_j).copied().unwrap_or(0) < self.max_per_label
    }

    /// Moves the cursor to the next admissible candidate and selects it.
    fn advance(&mut self) -> Option<usize> {
        while self.cursor < self.candidates.len() {
            let pos = self.cursor;
            self.cursor += 1;
            if self.admissible(&self.candidates[pos]) {
                let c = &self.candidates[pos];
                *self.counts_i.entry(c.label_i).or_default() += 1;
                *self.counts_j.entry(c.label_j).or_default() += 1;
                self.selected.push(pos);
                return Some(pos);
            }
        }
        None
    }

    /// Drops `discarded` from the selection, releases its label counts and
    /// selects the next admissible candidate past the cursor. `Ok(None)`
    /// means the candidate list is exhausted.
    pub fn next_replacement(&mut self, discarded: &ImageId) -> Result<Option<&Candidate>> {
        let at = self
            .selected
            .iter()
            .position(|&p| &self.candidates[p].image == discarded)
            .ok_or_else(|| Error::Selection(format!("image `{discarded}` is not selected for pair {:?}", self.pair)))?;
        let pos = self.selected.remove(at);
        let c = &self.candidates[pos];
        release(&mut self.counts_i, c.label_i);
        release(&mut self.counts_j, c.label_j);
        self.discarded.push(pos);
        Ok(self.advance().map(|p| &self.candidates[p]))
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn selected(&self) -> impl ExactSizeIterator<Item = &Candidate> + '_ {
        self.selected.iter().map(|&p| &self.candidates[p])
    }

    pub fn selected_images(&self) -> Vec<ImageId> {
        self.selected().map(|c| c.image.clone()).collect()
    }

    pub fn discarded(&self) -> impl Iterator<Item = &Candidate> + '_ {
        self.discarded.iter().map(|&p| &self.candidates[p])
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Fewer than `k` admissible candidates were available.
    pub fn is_short(&self) -> bool {
        self.selected.len() < self.k
    }

    /// Position of `image` in the candidate list.
    pub fn rank_of(&self, image: &ImageId) -> Option<usize> {
        self.candidates.iter().position(|c| &c.image == image)
    }

    pub fn candidate(&self, image: &ImageId) -> Option<&Candidate> {
        self.candidates.iter().find(|c| &c.image == image)
    }

    /// Per-label selected counts for model `i` (`side = 0`) or `j`.
    pub fn label_counts(&self, side: usize) -> &HashMap<LabelId, usize> {
        if side == 0 {
            &self.counts_i
        } else {
            &self.counts_j
        }
    }
}

fn release(counts: &mut HashMap<LabelId, usize>, label: LabelId) {
    if let Some(n) = counts.get_mut(&label) {
        *n -= 1;
        if *n == 0 {
            counts.remove(&label);
        }
    }
}

/// Ranks candidates and selects the top-k subset for every pair.
pub fn select_all(
    table: &PredictionTable,
    graph: &TaxonomyGraph,
    pairs: &[Pair],
    config: &SelectionConfig,
    exec: Exec,
) -> Vec<PairSubset> {
    exec.map(pairs, |&(i, j)| {
        let candidates = rank_pair_candidates(table, graph, i, j, config.threshold, exec);
        PairSubset::select_top_k((i, j), candidates, config.k, config.max_per_label)
    })
}

/// The union of all selected subsets with back-references to the pairs
/// that chose each image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TestSet {
    pub entries: BTreeMap<ImageId, BTreeSet<Pair>>,
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn build_test_set<'a>(subsets: impl IntoIterator<Item = &'a PairSubset>) -> TestSet {
    let mut set = TestSet::default();
    for s in subsets {
        for c in s.selected() {
            set.entries.entry(c.image.clone()).or_default().insert(s.pair);
        }
    }
    set
}

pub const MANIFEST_HEADER: &str = "i,j,image_id,distance,label_i,label_j,conf_i,conf_j";

/// Serializes a pair's full candidate list, one row per rank.
pub fn format_manifest(subset: &PairSubset, models: &[ModelId], graph: &TaxonomyGraph) -> String {
    let (mi, mj) = (&models[subset.pair.0], &models[subset.pair.1]);
    let mut out = String::with_capacity(64 * (subset.candidates.len() + 1));
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    for c in &subset.candidates {
        out.push_str(&format!(
            "{mi},{mj},{},{},{},{},{},{}\n",
            c.image,
            sig(c.distance, 10),
            graph.label_key(c.label_i),
            graph.label_key(c.label_j),
            c.conf_i,
            c.conf_j
        ));
    }
    out
}

/// Parses a manifest written by [`format_manifest`] for the pair
/// `(model_i, model_j)` and returns its candidate list in file order.
pub fn parse_manifest(
    text: &str,
    origin: &Path,
    graph: &TaxonomyGraph,
    model_i: &ModelId,
    model_j: &ModelId,
) -> Result<Vec<Candidate>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(Error::parse(origin, 1, format!("expected header `{MANIFEST_HEADER}`"))),
    }
    let mut candidates = Vec::new();
    for (lineno, line) in lines {
        let err = |msg: String| Error::parse(origin, lineno + 1, msg);
        let f: Vec<&str> = line.trim().split(',').collect();
        let [i, j, image, dist, li, lj, ci, cj] = f[..] else {
            return Err(err(format!("expected 8 fields, got {}", f.len())));
        };
        if i != model_i.0 || j != model_j.0 {
            return Err(err(format!(
                "row belongs to pair ({i}, {j}), expected ({model_i}, {model_j})"
            )));
        }
        let distance: f64 = dist.parse().map_err(|_| err(format!("bad distance `{dist}`")))?;
        candidates.push(Candidate {
            image: ImageId::new(image),
            distance,
            label_i: graph.label(li).map_err(|e| err(e.to_string()))?,
            label_j: graph.label(lj).map_err(|e| err(e.to_string()))?,
            conf_i: ci.parse().map_err(|e: Error| err(e.to_string()))?,
            conf_j: cj.parse().map_err(|e: Error| err(e.to_string()))?,
        });
    }
    Ok(candidates)
}
