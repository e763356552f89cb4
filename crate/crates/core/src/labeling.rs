//! Turning annotator answers into Case I/II/III verdicts.
//!
//! Each selected image is shown with two yes/no questions, one per predicted
//! label. Five votes are collected; more than three "cannot judge" votes
//! discard the image, otherwise each question is decided by majority of the
//! remaining votes. Answers are stored per image and label pair, so a pair of
//! questions is only ever asked once even when several classifier pairs
//! selected the same image.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictions::{ImageId, ModelId};
use crate::selection::{Pair, PairSubset};
use crate::taxonomy::{LabelId, TaxonomyGraph};

pub const DEFAULT_QUORUM: usize = 5;
/// An image is discarded when strictly more than this many votes flag it.
pub const DEFAULT_DISCARD_ABOVE: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotatorId(pub String);

impl fmt::Display for AnnotatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AnnotatorId {
    fn from(s: &str) -> Self {
        AnnotatorId(s.to_string())
    }
}

/// "Does the image contain a `question_a`?" and the same for `question_b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelQuery {
    pub image: ImageId,
    pub question_a: LabelId,
    pub question_b: LabelId,
    pub pair: Pair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationVote {
    pub annotator: AnnotatorId,
    pub image: ImageId,
    pub answer_a: bool,
    pub answer_b: bool,
    /// "Cannot judge" or non-natural; the answers are ignored when set.
    pub difficulty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Case {
    /// Both predictions correct.
    CaseI,
    /// Only model `i` correct.
    CaseIIi,
    /// Only model `j` correct.
    CaseIIj,
    /// Both predictions wrong.
    CaseIII,
    Discarded,
}

impl Case {
    pub fn from_answers(answer_a: bool, answer_b: bool) -> Self {
        match (answer_a, answer_b) {
            (true, true) => Case::CaseI,
            (true, false) => Case::CaseIIi,
            (false, true) => Case::CaseIIj,
            (false, false) => Case::CaseIII,
        }
    }

    pub fn i_correct(self) -> bool {
        matches!(self, Case::CaseI | Case::CaseIIi)
    }

    pub fn j_correct(self) -> bool {
        matches!(self, Case::CaseI | Case::CaseIIj)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Case::CaseI => "I",
            Case::CaseIIi => "II-i",
            Case::CaseIIj => "II-j",
            Case::CaseIII => "III",
            Case::Discarded => "discarded",
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "I" => Case::CaseI,
            "II-i" => Case::CaseIIi,
            "II-j" => Case::CaseIIj,
            "III" => Case::CaseIII,
            "discarded" => Case::Discarded,
            _ => return Err(Error::Labeling(format!("unknown case `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVerdict {
    pub image: ImageId,
    pub pair: Pair,
    pub case: Case,
    /// Majority answers; `None` for discarded images.
    pub answer_a: Option<bool>,
    pub answer_b: Option<bool>,
    pub votes: Vec<AnnotationVote>,
}

impl LabelVerdict {
    pub fn discarded(image: ImageId, pair: Pair, votes: Vec<AnnotationVote>) -> Self {
        Self {
            image,
            pair,
            case: Case::Discarded,
            answer_a: None,
            answer_b: None,
            votes,
        }
    }

    pub fn answered(image: ImageId, pair: Pair, a: bool, b: bool, votes: Vec<AnnotationVote>) -> Self {
        Self {
            image,
            pair,
            case: Case::from_answers(a, b),
            answer_a: Some(a),
            answer_b: Some(b),
            votes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VotingRule {
    pub quorum: usize,
    pub discard_above: usize,
}

impl Default for VotingRule {
    fn default() -> Self {
        Self {
            quorum: DEFAULT_QUORUM,
            discard_above: DEFAULT_DISCARD_ABOVE,
        }
    }
}

/// Combines exactly `rule.quorum` votes into a verdict for `query`.
///
/// A question tied among the non-difficulty votes resolves to "no": the
/// prediction is only credited when a strict majority confirms it.
pub fn aggregate_votes(query: &LabelQuery, votes: Vec<AnnotationVote>, rule: VotingRule) -> Result<LabelVerdict> {
    if votes.len() != rule.quorum {
        return Err(Error::Labeling(format!(
            "image `{}` has {} votes, quorum is {}",
            query.image,
            votes.len(),
            rule.quorum
        )));
    }
    let mut seen = HashSet::new();
    for v in &votes {
        if v.image != query.image {
            return Err(Error::Labeling(format!(
                "vote for `{}` filed under `{}`",
                v.image, query.image
            )));
        }
        if !seen.insert(&v.annotator) {
            return Err(Error::Labeling(format!(
                "duplicate annotator `{}` on image `{}`",
                v.annotator, query.image
            )));
        }
    }
    let difficult = votes.iter().filter(|v| v.difficulty).count();
    if difficult > rule.discard_above {
        return Ok(LabelVerdict::discarded(query.image.clone(), query.pair, votes));
    }
    let judged = votes.len() - difficult;
    let yes_a = votes.iter().filter(|v| !v.difficulty && v.answer_a).count();
    let yes_b = votes.iter().filter(|v| !v.difficulty && v.answer_b).count();
    Ok(LabelVerdict::answered(
        query.image.clone(),
        query.pair,
        2 * yes_a > judged,
        2 * yes_b > judged,
        votes,
    ))
}

/// Ground truth for simulated annotation: acceptable labels per image and
/// whether the image is natural.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleLabels {
    truth: HashMap<ImageId, BTreeSet<LabelId>>,
    natural: HashMap<ImageId, bool>,
}

impl OracleLabels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image: ImageId, natural: bool, labels: BTreeSet<LabelId>) -> Result<()> {
        if natural && labels.is_empty() {
            return Err(Error::Labeling(format!(
                "natural image `{image}` needs at least one label"
            )));
        }
        if self.natural.insert(image.clone(), natural).is_some() {
            return Err(Error::Labeling(format!("duplicate oracle entry `{image}`")));
        }
        self.truth.insert(image, labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.natural.len()
    }

    pub fn is_empty(&self) -> bool {
        self.natural.is_empty()
    }

    pub fn truth(&self, image: &ImageId) -> Option<&BTreeSet<LabelId>> {
        self.truth.get(image)
    }

    pub fn is_natural(&self, image: &ImageId) -> Option<bool> {
        self.natural.get(image).copied()
    }

    /// One annotator's answer, straight from the truth table.
    pub fn oracle_answer(&self, query: &LabelQuery, annotator: AnnotatorId) -> Result<AnnotationVote> {
        let (Some(truth), Some(&natural)) = (self.truth.get(&query.image), self.natural.get(&query.image)) else {
            return Err(Error::UnknownImage(format!("{} (not in oracle)", query.image)));
        };
        Ok(AnnotationVote {
            annotator,
            image: query.image.clone(),
            answer_a: natural && truth.contains(&query.question_a),
            answer_b: natural && truth.contains(&query.question_b),
            difficulty: !natural,
        })
    }

    /// Reads lines of `image_id natural|nonnatural label_id[,label_id...]`.
    pub fn load(path: &Path, graph: &TaxonomyGraph) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, graph)
    }

    pub fn parse(text: &str, origin: &Path, graph: &TaxonomyGraph) -> Result<Self> {
        let mut out = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::parse(origin, lineno + 1, msg);
            let f: Vec<&str> = line.split_whitespace().collect();
            let (image, kind, labels) = match f[..] {
                [image, kind] => (image, kind, ""),
                [image, kind, labels] => (image, kind, labels),
                _ => return Err(err("expected `image_id natural|nonnatural label_id[,...]`".into())),
            };
            let natural = match kind {
                "natural" => true,
                "nonnatural" => false,
                other => return Err(err(format!("expected natural|nonnatural, got `{other}`"))),
            };
            let mut set = BTreeSet::new();
            for l in labels.split(',').filter(|l| !l.is_empty() && *l != "-") {
                set.insert(graph.label(l).map_err(|e| err(e.to_string()))?);
            }
            out.insert(ImageId::new(image), natural, set)
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn to_text(&self, graph: &TaxonomyGraph) -> String {
        let mut images: Vec<&ImageId> = self.natural.keys().collect();
        images.sort();
        let mut out = String::new();
        for img in images {
            let kind = if self.natural[img] { "natural" } else { "nonnatural" };
            let labels: Vec<&str> = self.truth[img].iter().map(|&l| graph.label_key(l)).collect();
            let labels = if labels.is_empty() {
                "-".to_string()
            } else {
                labels.join(",")
            };
            out.push_str(&format!("{img} {kind} {labels}\n"));
        }
        out
    }
}

/// Where votes for a query come from.
pub trait AnswerSource {
    fn collect(&mut self, query: &LabelQuery, quorum: usize) -> Result<Vec<AnnotationVote>>;
}

impl AnswerSource for OracleLabels {
    /// `quorum` identical votes.
    fn collect(&mut self, query: &LabelQuery, quorum: usize) -> Result<Vec<AnnotationVote>> {
        (1..=quorum)
            .map(|n| self.oracle_answer(query, AnnotatorId(format!("oracle-{n}"))))
            .collect()
    }
}

/// Identity of a question pair on one image, independent of which model
/// asked which question.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnitKey {
    pub image: ImageId,
    pub lo: LabelId,
    pub hi: LabelId,
}

impl UnitKey {
    pub fn of(query: &LabelQuery) -> Self {
        let (lo, hi) = if query.question_a <= query.question_b {
            (query.question_a, query.question_b)
        } else {
            (query.question_b, query.question_a)
        };
        Self {
            image: query.image.clone(),
            lo,
            hi,
        }
    }
}

/// Majority answers per label for a unit, or the discard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnitOutcome {
    Discarded,
    Answered(BTreeMap<LabelId, bool>),
}

impl UnitOutcome {
    pub fn from_verdict(query: &LabelQuery, verdict: &LabelVerdict) -> Self {
        match (verdict.answer_a, verdict.answer_b) {
            (Some(a), Some(b)) => UnitOutcome::Answered(BTreeMap::from([(query.question_a, a), (query.question_b, b)])),
            _ => UnitOutcome::Discarded,
        }
    }

    /// The verdict this outcome implies for `query`.
    pub fn verdict_for(&self, query: &LabelQuery, votes: Vec<AnnotationVote>) -> LabelVerdict {
        match self {
            UnitOutcome::Discarded => LabelVerdict::discarded(query.image.clone(), query.pair, votes),
            UnitOutcome::Answered(ans) => LabelVerdict::answered(
                query.image.clone(),
                query.pair,
                ans[&query.question_a],
                ans[&query.question_b],
                votes,
            ),
        }
    }
}

/// Pre-recorded votes keyed by question pair, e.g. replayed from a live
/// session. Votes answer the questions in the order `oriented_a`, other.
#[derive(Debug, Clone, Default)]
pub struct RecordedVotes {
    units: HashMap<UnitKey, (LabelId, Vec<AnnotationVote>)>,
}

impl RecordedVotes {
    pub fn insert(&mut self, query: &LabelQuery, votes: Vec<AnnotationVote>) {
        self.units.insert(UnitKey::of(query), (query.question_a, votes));
    }
}

impl AnswerSource for RecordedVotes {
    fn collect(&mut self, query: &LabelQuery, quorum: usize) -> Result<Vec<AnnotationVote>> {
        let (oriented_a, votes) = self
            .units
            .get(&UnitKey::of(query))
            .ok_or_else(|| Error::Labeling(format!("no recorded votes for image `{}`", query.image)))?;
        if votes.len() != quorum {
            return Err(Error::Labeling(format!(
                "image `{}` has {} recorded votes, quorum is {quorum}",
                query.image,
                votes.len()
            )));
        }
        let swap = *oriented_a != query.question_a;
        Ok(votes
            .iter()
            .cloned()
            .map(|mut v| {
                if swap {
                    std::mem::swap(&mut v.answer_a, &mut v.answer_b);
                }
                v
            })
            .collect())
    }
}

/// Labels collected so far, reused across pairs and competition rounds.
#[derive(Debug, Clone, Default)]
pub struct LabelStore {
    outcomes: HashMap<UnitKey, (UnitOutcome, Vec<AnnotationVote>)>,
    discarded_images: HashSet<ImageId>,
    labeled_images: BTreeSet<ImageId>,
}

impl LabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the verdict for `query`, asking `source` only when the image
    /// and question pair have not been labeled before. The flag reports
    /// whether new votes were collected.
    pub fn resolve(
        &mut self,
        query: &LabelQuery,
        source: &mut dyn AnswerSource,
        rule: VotingRule,
    ) -> Result<(LabelVerdict, bool)> {
        let key = UnitKey::of(query);
        if let Some((outcome, votes)) = self.outcomes.get(&key) {
            return Ok((outcome.verdict_for(query, votes.clone()), false));
        }
        if self.discarded_images.contains(&query.image) {
            // Ineligible images stay ineligible whatever the question.
            return Ok((
                LabelVerdict::discarded(query.image.clone(), query.pair, Vec::new()),
                false,
            ));
        }
        let votes = source.collect(query, rule.quorum)?;
        let verdict = aggregate_votes(query, votes, rule)?;
        let outcome = UnitOutcome::from_verdict(query, &verdict);
        if outcome == UnitOutcome::Discarded {
            self.discarded_images.insert(query.image.clone());
        }
        self.labeled_images.insert(query.image.clone());
        self.outcomes.insert(key, (outcome, verdict.votes.clone()));
        Ok((verdict, true))
    }

    /// Distinct images that have been shown to annotators.
    pub fn labeled_images(&self) -> &BTreeSet<ImageId> {
        &self.labeled_images
    }

    pub fn units_labeled(&self) -> usize {
        self.outcomes.len()
    }
}

/// Verdicts of one labeling pass, per pair in candidate-rank order
/// (discarded images included at their rank).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelingRun {
    pub verdicts: BTreeMap<Pair, Vec<LabelVerdict>>,
    /// Pairs that ran out of candidates before reaching k verdicts.
    pub exhausted: Vec<Pair>,
    /// Question pairs newly sent to the source.
    pub new_units: usize,
}

/// Labels every selected image, replacing discarded ones until each pair
/// holds k answered verdicts or its candidates run out.
pub fn run_labeling(
    subsets: &mut [PairSubset],
    source: &mut dyn AnswerSource,
    store: &mut LabelStore,
    rule: VotingRule,
) -> Result<LabelingRun> {
    let mut run = LabelingRun::default();
    for subset in subsets.iter_mut() {
        let mut verdicts = Vec::new();
        let mut idx = 0;
        loop {
            let Some(c) = subset.selected().nth(idx) else {
                break;
            };
            let query = LabelQuery {
                image: c.image.clone(),
                question_a: c.label_i,
                question_b: c.label_j,
                pair: subset.pair,
            };
            let (verdict, fresh) = store.resolve(&query, source, rule)?;
            run.new_units += usize::from(fresh);
            let discarded = verdict.case == Case::Discarded;
            verdicts.push(verdict);
            if discarded {
                // The replacement lands at the end of the selection, which
                // is also the next index to visit once this image is gone.
                subset.next_replacement(&query.image)?;
            } else {
                idx += 1;
            }
        }
        if subset.is_short() {
            run.exhausted.push(subset.pair);
        }
        run.verdicts.insert(subset.pair, verdicts);
    }
    Ok(run)
}

pub const VERDICT_HEADER: &str = "pair_i,pair_j,image_id,case,answer_a,answer_b";

fn yes_no(a: Option<bool>) -> &'static str {
    match a {
        Some(true) => "yes",
        Some(false) => "no",
        None => "-",
    }
}

pub fn format_verdicts(verdicts: &BTreeMap<Pair, Vec<LabelVerdict>>, models: &[ModelId]) -> String {
    let mut out = format!("{VERDICT_HEADER}\n");
    for ((i, j), vs) in verdicts {
        for v in vs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                models[*i],
                models[*j],
                v.image,
                v.case,
                yes_no(v.answer_a),
                yes_no(v.answer_b)
            ));
        }
    }
    out
}

/// Reads a verdict file back. Vote provenance is not part of the file.
pub fn parse_verdicts(text: &str, origin: &Path, models: &[ModelId]) -> Result<BTreeMap<Pair, Vec<LabelVerdict>>> {
    let index: HashMap<&str, usize> = models.iter().enumerate().map(|(i, m)| (m.0.as_str(), i)).collect();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == VERDICT_HEADER => {}
        _ => return Err(Error::parse(origin, 1, format!("expected header `{VERDICT_HEADER}`"))),
    }
    let mut out: BTreeMap<Pair, Vec<LabelVerdict>> = BTreeMap::new();
    for (lineno, line) in lines {
        let err = |msg: String| Error::parse(origin, lineno + 1, msg);
        let f: Vec<&str> = line.trim().split(',').collect();
        let [mi, mj, image, case, a, b] = f[..] else {
            return Err(err(format!("expected 6 fields, got {}", f.len())));
        };
        let model = |m: &str| index.get(m).copied().ok_or_else(|| err(format!("unknown model `{m}`")));
        let (i, j) = (model(mi)?, model(mj)?);
        if i >= j {
            return Err(err(format!("pair ({mi}, {mj}) is not in competition order")));
        }
        let case: Case = case.parse().map_err(|e: Error| err(e.to_string()))?;
        let answer = |s: &str| match s {
            "yes" => Ok(Some(true)),
            "no" => Ok(Some(false)),
            "-" => Ok(None),
            _ => Err(err(format!("bad answer `{s}`"))),
        };
        let (a, b) = (answer(a)?, answer(b)?);
        let v = match (case, a, b) {
            (Case::Discarded, None, None) => LabelVerdict::discarded(ImageId::new(image), (i, j), Vec::new()),
            (c, Some(a), Some(b)) if Case::from_answers(a, b) == c => {
                LabelVerdict::answered(ImageId::new(image), (i, j), a, b, Vec::new())
            }
            _ => return Err(err(format!("case `{case}` contradicts answers"))),
        };
        out.entry((i, j)).or_default().push(v);
    }
    Ok(out)
}
