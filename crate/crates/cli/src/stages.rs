//! One function per subcommand. Each stage reads only the files written by
//! the stages before it, so any of them can be rerun on its own.

use std::collections::BTreeSet;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use mad_core::labeling::{format_verdicts, parse_verdicts, RecordedVotes};
use mad_core::predictions::{format_prediction_file, read_prediction_file};
use mad_core::ranking::{format_report, format_stability};
use mad_core::selection::format_manifest;
use mad_core::session::{AnnotatorPolicy, SessionOptions};
use mad_core::synth::{balanced_taxonomy, generate_world, synthetic_model, ModelSpec, WorldConfig};
use mad_core::{
    all_pairs, run_labeling, select_all, AnnotationVote, AnnotatorId, Case, CompetitionConfig, CompetitionRun,
    CompetitionState, Exec, LabelQuery, LabelStore, LabelVerdict, ModelId, OracleLabels, Pair, PairSubset,
    PredictionTable, RankSettings, SelectionConfig, Session, SessionState, TaxonomyGraph, VotingRule,
};
use mad_server::{AppState, ServerConfig};

use crate::layout::{
    check_model_ids, format_models, load_subsets, read, read_models, remove_if_present, write_atomic, OutDir,
    SelectionFile,
};

fn load_taxonomy(path: &Path) -> Result<TaxonomyGraph> {
    Ok(TaxonomyGraph::load(path)?)
}

fn write_manifests(out: &OutDir, subsets: &[PairSubset], models: &[ModelId], graph: &TaxonomyGraph) -> Result<()> {
    for s in subsets {
        let (i, j) = s.pair;
        write_atomic(
            &out.manifest(&models[i], &models[j]),
            &format_manifest(s, models, graph),
        )?;
    }
    Ok(())
}

/// Selects the top-k images of every pair and writes one manifest per pair.
pub fn select(
    taxonomy: &Path,
    predictions: &[PathBuf],
    selection: SelectionConfig,
    out: &OutDir,
    exec: Exec,
) -> Result<()> {
    selection.validate()?;
    let graph = load_taxonomy(taxonomy)?;
    let table = PredictionTable::load(predictions, &graph)?;
    let models = table.models().to_vec();
    check_model_ids(&models)?;
    ensure!(models.len() >= 2, "need at least two models, got {}", models.len());

    let subsets = select_all(&table, &graph, &all_pairs(models.len()), &selection, exec);
    // Manifests of models no longer in the competition would be picked up
    // by nothing, but they would mislead whoever reads the directory.
    let keep: BTreeSet<PathBuf> = subsets
        .iter()
        .map(|s| out.manifest(&models[s.pair.0], &models[s.pair.1]))
        .collect();
    if let Ok(entries) = std::fs::read_dir(out.manifests()) {
        for e in entries.flatten() {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "csv") && !keep.contains(&p) {
                remove_if_present(&p)?;
            }
        }
    }
    write_manifests(out, &subsets, &models, &graph)?;
    write_atomic(&out.selection(), &SelectionFile::of(&selection).to_text())?;
    write_atomic(&out.models(), &format_models(&models))?;
    let short = subsets.iter().filter(|s| s.is_short()).count();
    eprintln!(
        "selected {} images for {} pairs of {} models",
        mad_core::selection::build_test_set(&subsets).len(),
        subsets.len(),
        models.len()
    );
    if short > 0 {
        eprintln!("warning: {short} pairs have fewer than k eligible images");
    }
    Ok(())
}

/// Selection settings recorded by `select`. Explicit flags that disagree
/// with them are an error rather than silently mixing two selections.
pub fn stored_selection(out: &OutDir, explicit: &SelectionFlags) -> Result<SelectionConfig> {
    let stored = SelectionFile::load(out)?;
    let check = |name: &str, given: Option<String>, have: String| -> Result<()> {
        match given {
            Some(g) if g != have => bail!(
                "--{name} {g} disagrees with {} ({name} = {have}); rerun select",
                out.selection().display()
            ),
            _ => Ok(()),
        }
    };
    check("k", explicit.k.map(|x| x.to_string()), stored.k.to_string())?;
    check(
        "confidence-threshold",
        explicit.confidence_threshold.map(|x| x.to_string()),
        stored.confidence_threshold.to_string(),
    )?;
    check(
        "max-per-label",
        explicit.max_per_label.map(|x| x.to_string()),
        stored.max_per_label.to_string(),
    )?;
    stored.config()
}

/// Selection flags after merging with the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct SelectionFlags {
    pub k: Option<usize>,
    pub confidence_threshold: Option<f64>,
    pub max_per_label: Option<usize>,
}

impl SelectionFlags {
    pub fn resolve(&self) -> Result<SelectionConfig> {
        let d = SelectionConfig::default();
        let threshold = match self.confidence_threshold {
            Some(t) => mad_core::Confidence::from_f64(t)?,
            None => d.threshold,
        };
        let config = SelectionConfig {
            k: self.k.unwrap_or(d.k),
            threshold,
            max_per_label: self.max_per_label.unwrap_or(d.max_per_label),
        };
        config.validate()?;
        Ok(config)
    }
}

/// Labels every manifest with the oracle and writes `verdicts.csv`.
pub fn label(taxonomy: &Path, oracle: &Path, selection: &SelectionFlags, out: &OutDir) -> Result<()> {
    let graph = load_taxonomy(taxonomy)?;
    let models = read_models(out)?;
    let config = stored_selection(out, selection)?;
    let mut subsets = load_subsets(out, &graph, &models, &config)?;
    let mut oracle = OracleLabels::load(oracle, &graph)?;
    let run = run_labeling(&mut subsets, &mut oracle, &mut LabelStore::new(), VotingRule::default())?;
    write_atomic(&out.verdicts(), &format_verdicts(&run.verdicts, &models))?;
    let discarded = run
        .verdicts
        .values()
        .flatten()
        .filter(|v| v.case == Case::Discarded)
        .count();
    eprintln!(
        "labeled {} question pairs, {discarded} verdicts discarded",
        run.new_units
    );
    for (i, j) in &run.exhausted {
        eprintln!("warning: pair {} vs {} ran out of candidates", models[*i], models[*j]);
    }
    Ok(())
}

fn load_verdicts(out: &OutDir, models: &[ModelId]) -> Result<std::collections::BTreeMap<Pair, Vec<LabelVerdict>>> {
    let path = out.verdicts();
    Ok(parse_verdicts(&read(&path)?, &path, models)?)
}

fn print_ordering(state: &CompetitionState) -> Result<()> {
    let (rank, _) = state.ordinal_ranks();
    let mut order: Vec<usize> = (0..state.models.len()).collect();
    order.sort_by_key(|&i| rank[i]);
    let mut stdout = std::io::stdout().lock();
    for i in order {
        writeln!(
            stdout,
            "{:>3}  {:<24} {:.6}",
            rank[i], state.models[i].0, state.ranking.r[i]
        )?;
    }
    Ok(())
}

/// Ranks the models from `verdicts.csv` and writes `ranking.txt`.
pub fn rank(settings: RankSettings, selection: &SelectionFlags, out: &OutDir) -> Result<()> {
    settings.validate()?;
    let models = read_models(out)?;
    let config = stored_selection(out, selection)?;
    let verdicts = load_verdicts(out, &models)?;
    let state = CompetitionState::from_verdicts(models, &verdicts, settings)?;
    write_atomic(&out.ranking(), &format_report(&state, &config, false))?;
    print_ordering(&state)
}

/// Ranks again on the top k' verdicts of every pair for every k' below k and
/// writes the rank correlation with the full ranking to `stability.csv`.
pub fn stability(settings: RankSettings, selection: &SelectionFlags, out: &OutDir, exec: Exec) -> Result<()> {
    settings.validate()?;
    let models = read_models(out)?;
    let config = stored_selection(out, selection)?;
    let verdicts = load_verdicts(out, &models)?;
    let rows = mad_core::topk_stability(&models, &verdicts, config.k, settings, exec)?;
    let text = format_stability(&rows);
    write_atomic(&out.stability(), &text)?;
    print!("{text}");
    Ok(())
}

/// Votes that reproduce each recorded verdict, so a finished competition
/// can be rebuilt from its files.
fn replay_source(
    subsets: &[PairSubset],
    verdicts: &std::collections::BTreeMap<Pair, Vec<LabelVerdict>>,
    rule: VotingRule,
) -> Result<RecordedVotes> {
    let mut recorded = RecordedVotes::default();
    for s in subsets {
        for v in verdicts.get(&s.pair).into_iter().flatten() {
            let c = s
                .candidate(&v.image)
                .with_context(|| format!("verdict for `{}` has no manifest entry", v.image))?;
            let query = LabelQuery {
                image: v.image.clone(),
                question_a: c.label_i,
                question_b: c.label_j,
                pair: s.pair,
            };
            let votes = (0..rule.quorum)
                .map(|n| AnnotationVote {
                    annotator: AnnotatorId(format!("replay{n}")),
                    image: v.image.clone(),
                    answer_a: v.answer_a.unwrap_or(false),
                    answer_b: v.answer_b.unwrap_or(false),
                    difficulty: v.case == Case::Discarded,
                })
                .collect();
            recorded.insert(&query, votes);
        }
    }
    Ok(recorded)
}

fn load_run(
    out: &OutDir,
    graph: &TaxonomyGraph,
    models: &[ModelId],
    selection: &SelectionConfig,
    settings: RankSettings,
) -> Result<CompetitionRun> {
    let mut subsets = load_subsets(out, graph, models, selection)?;
    let verdicts = load_verdicts(out, models)?;
    let rule = VotingRule::default();
    let mut source = replay_source(&subsets, &verdicts, rule)?;
    let mut store = LabelStore::new();
    let replay = run_labeling(&mut subsets, &mut source, &mut store, rule)
        .with_context(|| format!("{} does not match the manifests", out.verdicts().display()))?;
    ensure!(
        format_verdicts(&replay.verdicts, models) == format_verdicts(&verdicts, models),
        "{} does not match the manifests",
        out.verdicts().display()
    );
    let state = CompetitionState::from_verdicts(models.to_vec(), &replay.verdicts, settings)?;
    Ok(CompetitionRun {
        state,
        subsets,
        verdicts: replay.verdicts,
        store,
        exhausted: replay.exhausted,
    })
}

/// Adds the one model among `predictions` that is not ranked yet. Only the
/// pairs involving it are selected and labeled.
pub fn add_model(
    taxonomy: &Path,
    predictions: &[PathBuf],
    oracle: &Path,
    settings: RankSettings,
    selection: &SelectionFlags,
    out: &OutDir,
    exec: Exec,
) -> Result<()> {
    settings.validate()?;
    let graph = load_taxonomy(taxonomy)?;
    let models = read_models(out)?;
    let selection = stored_selection(out, selection)?;

    let mut files = Vec::new();
    for p in predictions {
        files.push(read_prediction_file(p, &graph)?);
    }
    let given: Vec<ModelId> = files.iter().map(|(m, _)| m.clone()).collect();
    check_model_ids(&given)?;
    for m in &models {
        ensure!(given.contains(m), "no prediction file for ranked model `{m}`");
    }
    let new: Vec<&ModelId> = given.iter().filter(|m| !models.contains(m)).collect();
    let [new] = new[..] else {
        bail!("expected exactly one new model, got {}", new.len());
    };
    let mut order = models.clone();
    order.push(new.clone());
    let table = PredictionTable::from_records(order.clone(), files.into_iter().flat_map(|(_, r)| r))?;

    let previous = load_run(out, &graph, &models, &selection, settings)?;
    let config = CompetitionConfig {
        selection,
        rank: settings,
        voting: VotingRule::default(),
        exec,
    };
    let mut oracle = OracleLabels::load(oracle, &graph)?;
    let ext = mad_core::add_model(&previous, &table, &graph, &config, &mut oracle)?;
    let m = models.len();
    let added: Vec<PairSubset> = ext.run.subsets.iter().filter(|s| s.pair.1 == m).cloned().collect();
    write_manifests(out, &added, &order, &graph)?;
    write_atomic(&out.verdicts(), &format_verdicts(&ext.run.verdicts, &order))?;
    write_atomic(&out.models(), &format_models(&order))?;
    write_atomic(&out.ranking(), &format_report(&ext.run.state, &selection, false))?;
    // The old sweep no longer describes this competition.
    remove_if_present(&out.stability())?;
    eprintln!(
        "added {new}: {} new images, {} question pairs labeled",
        ext.new_images, ext.new_units
    );
    print_ordering(&ext.run.state)
}

pub struct ServeOptions {
    pub taxonomy: PathBuf,
    pub listen: SocketAddr,
    pub images: Option<PathBuf>,
    pub ui: Option<PathBuf>,
    pub annotators: Option<PathBuf>,
    pub lease_ttl: Duration,
    pub rank: RankSettings,
}

fn load_annotators(path: &Path) -> Result<AnnotatorPolicy> {
    let ids = read(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(AnnotatorId::from)
        .collect();
    Ok(AnnotatorPolicy::Registered(ids))
}

/// Runs the annotation service over the manifests until interrupted. Votes
/// go to `session.log`; `verdicts.csv` is written once every query is
/// answered.
pub fn serve(opts: ServeOptions, selection: &SelectionFlags, out: &OutDir) -> Result<()> {
    opts.rank.validate()?;
    let graph = Arc::new(load_taxonomy(&opts.taxonomy)?);
    let models = read_models(out)?;
    let config = stored_selection(out, selection)?;
    let subsets = load_subsets(out, &graph, &models, &config)?;
    let initial = SessionState::new(models.clone(), subsets, VotingRule::default())?;
    let policy = match &opts.annotators {
        Some(p) => load_annotators(p)?,
        None => AnnotatorPolicy::Open,
    };
    let options = SessionOptions {
        lease_ttl: opts.lease_ttl,
        ..Default::default()
    };
    let (session, recovery) = Session::open(initial, out.session_log(), policy, options)?;
    if recovery.truncated_bytes > 0 {
        eprintln!(
            "dropped {} bytes of a partial record from the vote log",
            recovery.truncated_bytes
        );
    }
    let progress = session.progress();
    eprintln!(
        "{} votes replayed, {} verdicts pending, {} finalized",
        recovery.records.len(),
        progress.pending,
        progress.finalized
    );
    if session.state().is_complete() {
        write_atomic(&out.verdicts(), &format_verdicts(&session.state().verdicts(), &models))?;
    }
    let state = AppState::new(
        session,
        graph,
        ServerConfig {
            image_dir: opts.images,
            ui_dir: opts.ui,
            verdicts_out: Some(out.verdicts()),
            rank: opts.rank,
        },
    );
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(opts.listen)
            .await
            .with_context(|| format!("binding {}", opts.listen))?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        mad_server::serve(listener, state).await.context("serving")
    })
}

pub struct SynthOptions {
    pub out: PathBuf,
    pub models: Vec<ModelSpec>,
    pub world: WorldConfig,
    pub branching: usize,
    pub depth: usize,
}

/// Writes a synthetic taxonomy, one prediction file per model and the
/// matching oracle file.
pub fn synth(opts: &SynthOptions) -> Result<()> {
    ensure!(
        opts.branching >= 2 && opts.depth >= 1,
        "taxonomy needs branching >= 2 and depth >= 1"
    );
    ensure!(opts.world.images > 0, "need at least one image");
    for s in &opts.models {
        ensure!(
            (0.0..=1.0).contains(&s.error_rate),
            "error rate of `{}` must lie in [0, 1]",
            s.id
        );
    }
    let ids: Vec<ModelId> = opts.models.iter().map(|s| s.id.clone()).collect();
    check_model_ids(&ids)?;
    let graph = balanced_taxonomy(opts.branching, opts.depth);
    let world = generate_world(&graph, &opts.world);
    write_atomic(&opts.out.join("taxonomy.txt"), &graph.to_text())?;
    write_atomic(&opts.out.join("oracle.txt"), &world.oracle.to_text(&graph))?;
    for spec in &opts.models {
        let records = synthetic_model(&world, spec, opts.world.seed);
        let text = format_prediction_file(
            &spec.id,
            records.into_iter().map(|r| (r.image, r.label, r.confidence)),
            &graph,
        );
        write_atomic(&opts.out.join("predictions").join(format!("{}.txt", spec.id)), &text)?;
    }
    eprintln!(
        "wrote {} labels, {} images and {} models to {}",
        graph.labels().len(),
        opts.world.images,
        opts.models.len(),
        opts.out.display()
    );
    Ok(())
}
