//! Selection, labeling and ranking composed into a full competition, plus
//! the incremental path that adds one classifier to a finished one.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::labeling::{run_labeling, AnswerSource, LabelStore, LabelVerdict, VotingRule};
use crate::predictions::PredictionTable;
use crate::ranking::{tally_verdicts, CompetitionState, RankSettings};
use crate::selection::{all_pairs, build_test_set, select_all, Pair, PairSubset, SelectionConfig, TestSet};
use crate::taxonomy::TaxonomyGraph;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompetitionConfig {
    pub selection: SelectionConfig,
    pub rank: RankSettings,
    pub voting: VotingRule,
    pub exec: Exec,
}

impl CompetitionConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        self.rank.validate()?;
        if self.voting.quorum == 0 {
            return Err(Error::Config("quorum must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a finished competition needs to be extended later.
#[derive(Debug, Clone)]
pub struct CompetitionRun {
    pub state: CompetitionState,
    pub subsets: Vec<PairSubset>,
    pub verdicts: BTreeMap<Pair, Vec<LabelVerdict>>,
    pub store: LabelStore,
    pub exhausted: Vec<Pair>,
}

impl CompetitionRun {
    /// The union of the final per-pair selections.
    pub fn test_set(&self) -> TestSet {
        build_test_set(&self.subsets)
    }
}

pub fn run_competition(
    table: &PredictionTable,
    graph: &TaxonomyGraph,
    config: &CompetitionConfig,
    source: &mut dyn AnswerSource,
) -> Result<CompetitionRun> {
    let m = table.num_models();
    if m < 2 {
        return Err(Error::TooFewModels(m));
    }
    config.validate()?;
    let mut subsets = select_all(table, graph, &all_pairs(m), &config.selection, config.exec);
    let mut store = LabelStore::new();
    let run = run_labeling(&mut subsets, source, &mut store, config.voting)?;
    let state = CompetitionState::from_tallies(
        table.models().to_vec(),
        tally_verdicts(&run.verdicts, usize::MAX),
        config.rank,
    )?;
    Ok(CompetitionRun {
        state,
        subsets,
        verdicts: run.verdicts,
        store,
        exhausted: run.exhausted,
    })
}

#[derive(Debug, Clone)]
pub struct Extension {
    pub run: CompetitionRun,
    /// Images shown to annotators for the first time.
    pub new_images: usize,
    /// Image and question pairs sent for labeling.
    pub new_units: usize,
}

/// Adds the last model of `table` to `previous`, which must hold the
/// competition over all other models of `table`. Only the pairs involving
/// the new model are selected and labeled; earlier subsets and verdicts are
/// kept as they are.
pub fn add_model(
    previous: &CompetitionRun,
    table: &PredictionTable,
    graph: &TaxonomyGraph,
    config: &CompetitionConfig,
    source: &mut dyn AnswerSource,
) -> Result<Extension> {
    config.validate()?;
    let m = previous.state.models.len();
    if table.num_models() != m + 1 || table.models()[..m] != previous.state.models[..] {
        return Err(Error::Predictions(format!(
            "expected the {m} ranked models followed by one new model"
        )));
    }
    let new_model = table.models()[m].clone();
    let pairs: Vec<Pair> = (0..m).map(|i| (i, m)).collect();
    let mut subsets = select_all(table, graph, &pairs, &config.selection, config.exec);
    let mut store = previous.store.clone();
    let seen = store.labeled_images().len();
    let labeled = run_labeling(&mut subsets, source, &mut store, config.voting)?;
    let new_images = store.labeled_images().len() - seen;
    let tallies = tally_verdicts(&labeled.verdicts, usize::MAX);
    let column: Vec<_> = pairs.iter().map(|p| tallies[p]).collect();
    let state = previous.state.add_model(new_model, &column)?;

    let mut verdicts = previous.verdicts.clone();
    verdicts.extend(labeled.verdicts);
    let mut all_subsets = previous.subsets.clone();
    all_subsets.extend(subsets);
    let mut exhausted = previous.exhausted.clone();
    exhausted.extend(labeled.exhausted);
    Ok(Extension {
        run: CompetitionRun {
            state,
            subsets: all_subsets,
            verdicts,
            store,
            exhausted,
        },
        new_images,
        new_units: labeled.new_units,
    })
}
