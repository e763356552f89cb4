//! Live annotation session: hands out queries to annotators, persists votes
//! to an append-only log and folds them into verdicts.
//!
//! The log is the only durable state. [`SessionState`] is a deterministic
//! function of the initial selection and the ordered vote records, so a
//! restart replays the log and lands on the same state. Leases are kept in
//! memory only; after a restart annotators simply ask again.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::labeling::{
    aggregate_votes, AnnotationVote, AnnotatorId, Case, LabelQuery, LabelVerdict, UnitKey, UnitOutcome, VotingRule,
};
use crate::predictions::{ImageId, ModelId};
use crate::ranking::{CompetitionState, RankSettings};
use crate::selection::{Candidate, Pair, PairSubset};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("unknown annotator `{0}`")]
    UnknownAnnotator(String),

    #[error("invalid id `{0}`: must be non-empty without whitespace")]
    InvalidId(String),

    #[error("annotator `{annotator}` holds no lease on image `{image}`")]
    NoLease { annotator: String, image: String },

    #[error("annotator `{annotator}` already voted on image `{image}`")]
    DuplicateVote { annotator: String, image: String },

    #[error("image `{0}` has no open question")]
    NotPending(String),

    #[error("vote log line {line}: {msg}")]
    CorruptLog { line: usize, msg: String },
}

fn check_id(s: &str) -> std::result::Result<(), SessionError> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(SessionError::InvalidId(s.to_string()));
    }
    Ok(())
}

/// One line of the vote log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub timestamp_ms: u64,
    pub vote: AnnotationVote,
}

fn flag(b: bool) -> char {
    if b {
        '1'
    } else {
        '0'
    }
}

impl LogRecord {
    /// `timestamp annotator image_id answer_a answer_b difficulty`, booleans
    /// as 0/1.
    pub fn to_line(&self) -> String {
        let v = &self.vote;
        format!(
            "{} {} {} {} {} {}\n",
            self.timestamp_ms,
            v.annotator,
            v.image,
            flag(v.answer_a),
            flag(v.answer_b),
            flag(v.difficulty)
        )
    }

    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split_whitespace().collect();
        let [ts, annotator, image, a, b, d] = f[..] else {
            return Err(format!("expected 6 fields, got {}", f.len()));
        };
        let bit = |s: &str| match s {
            "1" => Ok(true),
            "0" => Ok(false),
            _ => Err(format!("expected 0 or 1, got `{s}`")),
        };
        Ok(Self {
            timestamp_ms: ts.parse().map_err(|_| format!("bad timestamp `{ts}`"))?,
            vote: AnnotationVote {
                annotator: annotator.into(),
                image: image.into(),
                answer_a: bit(a)?,
                answer_b: bit(b)?,
                difficulty: bit(d)?,
            },
        })
    }
}

/// How hard an append is pushed to storage before it is acknowledged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncPolicy {
    /// Handed to the OS: survives a process crash.
    Flush,
    /// fsync'd: survives power loss as well.
    #[default]
    Fsync,
}

#[derive(Debug)]
pub struct VoteLog {
    file: File,
    path: PathBuf,
    len: u64,
    sync: SyncPolicy,
}

/// What opening the log found.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Recovery {
    pub records: Vec<LogRecord>,
    /// Bytes of an incomplete trailing record that were cut off.
    pub truncated_bytes: u64,
}

impl VoteLog {
    /// Opens or creates the log. A final line without its newline is the
    /// remains of an interrupted append and is truncated away; any other
    /// malformed line is an error.
    pub fn open(path: impl AsRef<Path>, sync: SyncPolicy) -> Result<(Self, Recovery)> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        let truncated_bytes = (bytes.len() - complete) as u64;
        if truncated_bytes > 0 {
            file.set_len(complete as u64).map_err(|e| Error::io(&path, e))?;
            file.sync_all().map_err(|e| Error::io(&path, e))?;
        }
        file.seek(SeekFrom::End(0)).map_err(|e| Error::io(&path, e))?;
        let text = std::str::from_utf8(&bytes[..complete]).map_err(|e| SessionError::CorruptLog {
            line: 0,
            msg: e.to_string(),
        })?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = LogRecord::parse(line).map_err(|msg| SessionError::CorruptLog { line: n + 1, msg })?;
            records.push(rec);
        }
        let log = Self {
            file,
            path,
            len: complete as u64,
            sync,
        };
        Ok((
            log,
            Recovery {
                records,
                truncated_bytes,
            },
        ))
    }

    /// Writes one record and pushes it to storage per the sync policy. On
    /// failure the file is cut back so no partial record stays behind.
    pub fn append(&mut self, record: &LogRecord) -> Result<()> {
        let line = record.to_line();
        let res = self.file.write_all(line.as_bytes()).and_then(|_| match self.sync {
            SyncPolicy::Flush => self.file.flush(),
            SyncPolicy::Fsync => self.file.sync_data(),
        });
        if let Err(e) = res {
            let _ = self.file.set_len(self.len);
            return Err(Error::io(&self.path, e));
        }
        self.len += line.len() as u64;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Unit {
    /// Questions as shown to annotators.
    query: LabelQuery,
    votes: Vec<AnnotationVote>,
    outcome: Option<UnitOutcome>,
    /// Pairs waiting on this unit's verdict.
    pairs: BTreeSet<Pair>,
}

/// Result of folding one vote into the state.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VoteEffect {
    /// Verdicts the vote completed, one per affected pair.
    pub finalized: Vec<FinalizedVerdict>,
    /// Images that entered a pair's selection to replace a discard.
    pub replacements: Vec<(Pair, ImageId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalizedVerdict {
    pub pair: Pair,
    pub image: ImageId,
    pub case: Case,
}

/// Durable part of a session: selections, per-unit votes and verdicts.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    models: Vec<ModelId>,
    rule: VotingRule,
    subsets: Vec<PairSubset>,
    units: BTreeMap<UnitKey, Unit>,
    /// Units per image in creation order; the first open one is active.
    image_units: HashMap<ImageId, Vec<UnitKey>>,
    /// Open units by creation sequence, which is the serving order.
    pending: BTreeMap<u64, UnitKey>,
    unit_seq: HashMap<UnitKey, u64>,
    next_seq: u64,
    discarded_images: BTreeSet<ImageId>,
    /// Verdicts per pair keyed by candidate position.
    verdicts: BTreeMap<Pair, BTreeMap<usize, LabelVerdict>>,
    votes_applied: usize,
}

impl SessionState {
    /// Queues the selected images of every pair, in pair then rank order.
    pub fn new(models: Vec<ModelId>, subsets: Vec<PairSubset>, rule: VotingRule) -> Result<Self> {
        if rule.quorum == 0 {
            return Err(Error::Config("quorum must be positive".into()));
        }
        let mut s = Self {
            models,
            rule,
            subsets: Vec::new(),
            units: BTreeMap::new(),
            image_units: HashMap::new(),
            pending: BTreeMap::new(),
            unit_seq: HashMap::new(),
            next_seq: 0,
            discarded_images: BTreeSet::new(),
            verdicts: BTreeMap::new(),
            votes_applied: 0,
        };
        for subset in &subsets {
            for c in subset.selected() {
                check_id(c.image.as_str())?;
            }
            s.verdicts.insert(subset.pair, BTreeMap::new());
        }
        s.subsets = subsets;
        let mut effect = VoteEffect::default();
        for idx in 0..s.subsets.len() {
            let selected: Vec<Candidate> = s.subsets[idx].selected().cloned().collect();
            for c in selected {
                s.enqueue(idx, &c, &mut effect)?;
            }
        }
        Ok(s)
    }

    fn subset_index(&self, pair: Pair) -> usize {
        self.subsets
            .iter()
            .position(|s| s.pair == pair)
            .expect("pair has a subset")
    }

    fn record(&mut self, pair: Pair, image: &ImageId, verdict: LabelVerdict, effect: &mut VoteEffect) {
        let idx = self.subset_index(pair);
        let pos = self.subsets[idx].rank_of(image).expect("selected image is a candidate");
        effect.finalized.push(FinalizedVerdict {
            pair,
            image: image.clone(),
            case: verdict.case,
        });
        self.verdicts.entry(pair).or_default().insert(pos, verdict);
    }

    /// Attaches a selected candidate of subset `idx` to its unit, resolving
    /// it at once when the answer is already known.
    fn enqueue(&mut self, idx: usize, c: &Candidate, effect: &mut VoteEffect) -> Result<()> {
        let mut work = vec![(idx, c.clone())];
        while let Some((idx, c)) = work.pop() {
            let pair = self.subsets[idx].pair;
            let query = LabelQuery {
                image: c.image.clone(),
                question_a: c.label_i,
                question_b: c.label_j,
                pair,
            };
            let key = UnitKey::of(&query);
            if self.discarded_images.contains(&c.image) {
                self.record(
                    pair,
                    &c.image,
                    LabelVerdict::discarded(c.image.clone(), pair, Vec::new()),
                    effect,
                );
                if let Some(next) = self.subsets[idx].next_replacement(&c.image)?.cloned() {
                    effect.replacements.push((pair, next.image.clone()));
                    work.push((idx, next));
                }
                continue;
            }
            if let Some(unit) = self.units.get_mut(&key) {
                match &unit.outcome {
                    Some(outcome) => {
                        let v = outcome.verdict_for(&query, unit.votes.clone());
                        self.record(pair, &c.image, v, effect);
                    }
                    None => {
                        unit.pairs.insert(pair);
                    }
                }
                continue;
            }
            self.units.insert(
                key.clone(),
                Unit {
                    query,
                    votes: Vec::new(),
                    outcome: None,
                    pairs: BTreeSet::from([pair]),
                },
            );
            self.image_units.entry(c.image.clone()).or_default().push(key.clone());
            self.pending.insert(self.next_seq, key.clone());
            self.unit_seq.insert(key, self.next_seq);
            self.next_seq += 1;
        }
        Ok(())
    }

    /// The open unit of `image` that currently collects votes.
    fn active_unit(&self, image: &ImageId) -> Option<&UnitKey> {
        if self.discarded_images.contains(image) {
            return None;
        }
        self.image_units
            .get(image)?
            .iter()
            .find(|k| self.units[*k].outcome.is_none())
    }

    fn has_voted(&self, key: &UnitKey, annotator: &AnnotatorId) -> bool {
        self.units[key].votes.iter().any(|v| &v.annotator == annotator)
    }

    /// Checks a vote against the fold rules without applying it.
    pub fn validate_vote(&self, vote: &AnnotationVote) -> std::result::Result<UnitKey, SessionError> {
        check_id(vote.annotator.0.as_str())?;
        check_id(vote.image.as_str())?;
        let dup = || SessionError::DuplicateVote {
            annotator: vote.annotator.0.clone(),
            image: vote.image.to_string(),
        };
        let Some(key) = self.active_unit(&vote.image) else {
            if self
                .image_units
                .get(&vote.image)
                .is_some_and(|ks| ks.iter().any(|k| self.has_voted(k, &vote.annotator)))
            {
                return Err(dup());
            }
            return Err(SessionError::NotPending(vote.image.to_string()));
        };
        if self.has_voted(key, &vote.annotator) {
            return Err(dup());
        }
        Ok(key.clone())
    }

    /// Folds one vote in. Reaching quorum finalizes the unit; a discard
    /// closes every open unit of the image and pulls in replacements.
    pub fn apply_vote(&mut self, vote: AnnotationVote) -> Result<VoteEffect> {
        let key = self.validate_vote(&vote)?;
        self.votes_applied += 1;
        let unit = self.units.get_mut(&key).expect("active unit exists");
        unit.votes.push(vote);
        let mut effect = VoteEffect::default();
        if unit.votes.len() < self.rule.quorum {
            return Ok(effect);
        }
        let verdict = aggregate_votes(&unit.query, unit.votes.clone(), self.rule)?;
        let outcome = UnitOutcome::from_verdict(&unit.query, &verdict);
        self.close_unit(&key, outcome.clone(), &mut effect)?;
        if outcome == UnitOutcome::Discarded {
            let image = key.image.clone();
            self.discarded_images.insert(image.clone());
            let others: Vec<UnitKey> = self.image_units[&image]
                .iter()
                .filter(|k| self.units[*k].outcome.is_none())
                .cloned()
                .collect();
            for k in others {
                self.close_unit(&k, UnitOutcome::Discarded, &mut effect)?;
            }
        }
        Ok(effect)
    }

    fn close_unit(&mut self, key: &UnitKey, outcome: UnitOutcome, effect: &mut VoteEffect) -> Result<()> {
        let seq = self.unit_seq[key];
        self.pending.remove(&seq);
        let unit = self.units.get_mut(key).expect("unit exists");
        unit.outcome = Some(outcome.clone());
        let pairs = std::mem::take(&mut unit.pairs);
        let votes = unit.votes.clone();
        for pair in pairs {
            let idx = self.subset_index(pair);
            let c = self.subsets[idx].candidate(&key.image).expect("selected").clone();
            let query = LabelQuery {
                image: c.image.clone(),
                question_a: c.label_i,
                question_b: c.label_j,
                pair,
            };
            self.record(pair, &c.image, outcome.verdict_for(&query, votes.clone()), effect);
            if outcome == UnitOutcome::Discarded {
                if let Some(next) = self.subsets[idx].next_replacement(&c.image)?.cloned() {
                    effect.replacements.push((pair, next.image.clone()));
                    self.enqueue(idx, &next, effect)?;
                }
            }
        }
        Ok(())
    }

    pub fn models(&self) -> &[ModelId] {
        &self.models
    }

    pub fn subsets(&self) -> &[PairSubset] {
        &self.subsets
    }

    pub fn rule(&self) -> VotingRule {
        self.rule
    }

    pub fn votes_applied(&self) -> usize {
        self.votes_applied
    }

    /// Open queries in serving order.
    pub fn pending_queries(&self) -> impl Iterator<Item = &LabelQuery> + '_ {
        self.pending.values().map(|k| &self.units[k].query)
    }

    pub fn is_complete(&self) -> bool {
        self.pending.is_empty()
    }

    /// Finalized verdicts per pair in candidate-rank order, discards
    /// included.
    pub fn verdicts(&self) -> BTreeMap<Pair, Vec<LabelVerdict>> {
        self.verdicts
            .iter()
            .map(|(&p, vs)| (p, vs.values().cloned().collect()))
            .collect()
    }

    pub fn votes_for(&self, image: &ImageId) -> Vec<&AnnotationVote> {
        self.image_units
            .get(image)
            .into_iter()
            .flatten()
            .flat_map(|k| &self.units[k].votes)
            .collect()
    }

    pub fn progress(&self) -> Progress {
        let mut pairs = Vec::new();
        for s in &self.subsets {
            let vs = &self.verdicts[&s.pair];
            let discarded = vs.values().filter(|v| v.case == Case::Discarded).count();
            let finalized = vs.len() - discarded;
            let pending = s
                .selected()
                .filter(|c| self.subset_verdict_missing(s.pair, s, &c.image))
                .count();
            pairs.push(PairProgress {
                i: self.models[s.pair.0].clone(),
                j: self.models[s.pair.1].clone(),
                pending,
                finalized,
                discarded,
            });
        }
        Progress {
            pending: pairs.iter().map(|p| p.pending).sum(),
            finalized: pairs.iter().map(|p| p.finalized).sum(),
            discarded: pairs.iter().map(|p| p.discarded).sum(),
            open_queries: self.pending.len(),
            votes: self.votes_applied,
            complete: self.is_complete(),
            pairs,
        }
    }

    fn subset_verdict_missing(&self, pair: Pair, s: &PairSubset, image: &ImageId) -> bool {
        s.rank_of(image)
            .is_some_and(|pos| !self.verdicts[&pair].contains_key(&pos))
    }

    /// Ranking over the verdicts finalized so far.
    pub fn ranking_snapshot(&self, settings: RankSettings) -> Result<Snapshot> {
        let state = CompetitionState::from_verdicts(self.models.clone(), &self.verdicts(), settings)?;
        Ok(Snapshot {
            state,
            partial: !self.is_complete(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairProgress {
    pub i: ModelId,
    pub j: ModelId,
    pub pending: usize,
    pub finalized: usize,
    pub discarded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Progress {
    pub pending: usize,
    pub finalized: usize,
    pub discarded: usize,
    pub open_queries: usize,
    pub votes: usize,
    pub complete: bool,
    pub pairs: Vec<PairProgress>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub state: CompetitionState,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum AnnotatorPolicy {
    /// Any well-formed id may annotate.
    #[default]
    Open,
    Registered(BTreeSet<AnnotatorId>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionOptions {
    pub lease_ttl: Duration,
    pub sync: SyncPolicy,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            lease_ttl: Duration::from_secs(600),
            sync: SyncPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Lease {
    unit: UnitKey,
    expires: Instant,
}

/// Acknowledgement of a durably recorded vote.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoteAck {
    pub image: ImageId,
    #[serde(flatten)]
    pub effect: VoteEffect,
}

/// A session bound to its vote log. Callers serialize access (one writer).
#[derive(Debug)]
pub struct Session {
    state: SessionState,
    log: VoteLog,
    leases: HashMap<AnnotatorId, Lease>,
    policy: AnnotatorPolicy,
    options: SessionOptions,
}

impl Session {
    /// Replays the log at `log_path` onto `initial`, which must be the
    /// state the log was started from.
    pub fn open(
        initial: SessionState,
        log_path: impl AsRef<Path>,
        policy: AnnotatorPolicy,
        options: SessionOptions,
    ) -> Result<(Self, Recovery)> {
        let (log, recovery) = VoteLog::open(log_path, options.sync)?;
        let state = replay(initial, &recovery.records)?;
        Ok((
            Self {
                state,
                log,
                leases: HashMap::new(),
                policy,
                options,
            },
            recovery,
        ))
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn log(&self) -> &VoteLog {
        &self.log
    }

    fn check_annotator(&self, annotator: &AnnotatorId) -> std::result::Result<(), SessionError> {
        check_id(&annotator.0)?;
        match &self.policy {
            AnnotatorPolicy::Registered(set) if !set.contains(annotator) => {
                Err(SessionError::UnknownAnnotator(annotator.0.clone()))
            }
            _ => Ok(()),
        }
    }

    fn expire(&mut self, now: Instant) {
        self.leases.retain(|_, l| l.expires > now);
    }

    pub fn next_query(&mut self, annotator: &AnnotatorId) -> Result<Option<LabelQuery>> {
        self.next_query_at(annotator, Instant::now())
    }

    /// The annotator's current lease if still open, otherwise the first
    /// open query they have not answered and that has room for another
    /// vote. Returns `None` when nothing is left for them.
    pub fn next_query_at(&mut self, annotator: &AnnotatorId, now: Instant) -> Result<Option<LabelQuery>> {
        self.check_annotator(annotator)?;
        self.expire(now);
        let expires = now + self.options.lease_ttl;
        if let Some(lease) = self.leases.get_mut(annotator) {
            let unit = &self.state.units[&lease.unit];
            if unit.outcome.is_none() && !self.state.discarded_images.contains(&lease.unit.image) {
                lease.expires = expires;
                return Ok(Some(unit.query.clone()));
            }
            self.leases.remove(annotator);
        }
        let mut held: HashMap<&UnitKey, usize> = HashMap::new();
        for l in self.leases.values() {
            *held.entry(&l.unit).or_default() += 1;
        }
        let quorum = self.state.rule.quorum;
        let pick = self.state.pending.values().find(|k| {
            let unit = &self.state.units[*k];
            self.state.active_unit(&k.image) == Some(*k)
                && !self.state.has_voted(k, annotator)
                && unit.votes.len() + held.get(k).copied().unwrap_or(0) < quorum
        });
        let Some(key) = pick.cloned() else {
            return Ok(None);
        };
        let query = self.state.units[&key].query.clone();
        self.leases.insert(annotator.clone(), Lease { unit: key, expires });
        Ok(Some(query))
    }

    pub fn submit_vote(&mut self, vote: AnnotationVote) -> Result<VoteAck> {
        self.submit_vote_at(vote, Instant::now(), now_ms())
    }

    /// Validates the vote against the annotator's lease, appends it to the
    /// log and only then applies it.
    pub fn submit_vote_at(&mut self, vote: AnnotationVote, now: Instant, timestamp_ms: u64) -> Result<VoteAck> {
        self.check_annotator(&vote.annotator)?;
        self.expire(now);
        let key = self.state.validate_vote(&vote)?;
        match self.leases.get(&vote.annotator) {
            Some(l) if l.unit == key => {}
            _ => {
                return Err(SessionError::NoLease {
                    annotator: vote.annotator.0.clone(),
                    image: vote.image.to_string(),
                }
                .into())
            }
        }
        self.log.append(&LogRecord {
            timestamp_ms,
            vote: vote.clone(),
        })?;
        self.leases.remove(&vote.annotator);
        let image = vote.image.clone();
        let effect = self.state.apply_vote(vote)?;
        Ok(VoteAck { image, effect })
    }

    pub fn progress(&self) -> Progress {
        self.state.progress()
    }

    pub fn ranking_snapshot(&self, settings: RankSettings) -> Result<Snapshot> {
        self.state.ranking_snapshot(settings)
    }
}

/// Folds log records onto `initial` in order.
pub fn replay(mut state: SessionState, records: &[LogRecord]) -> Result<SessionState> {
    for (n, rec) in records.iter().enumerate() {
        state
            .apply_vote(rec.vote.clone())
            .map_err(|e| SessionError::CorruptLog {
                line: n + 1,
                msg: e.to_string(),
            })?;
    }
    Ok(state)
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}
