//! Acceptance gate: one line per criterion, non-zero exit if any fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::time::{Duration, Instant};

use mad_core::labeling::{run_labeling, LabelStore, OracleLabels, VotingRule};
use mad_core::pipeline::{add_model, run_competition, CompetitionConfig, CompetitionRun};
use mad_core::predictions::{Confidence, ImageId, ModelId, PredictionRecord, PredictionTable};
use mad_core::ranking::{
    perron_rank, perron_running_average, srcc, topk_stability, CaseTally, Matrix, RankSettings, Smoothing,
};
use mad_core::selection::{all_pairs, build_test_set, rank_pair_candidates, select_all, PairSubset, SelectionConfig};
use mad_core::session::{replay, AnnotatorPolicy, LogRecord, Session, SessionOptions, SessionState, SyncPolicy};
use mad_core::synth::{
    balanced_taxonomy, generate_world, synthetic_model, synthetic_table, ModelSpec, World, WorldConfig,
};
use mad_core::taxonomy::{TaxonomyBuilder, TaxonomyGraph};
use mad_core::{AnnotationVote, AnnotatorId, Exec};
use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Random single-root DAG: node `v > 0` gets 1 to 3 parents among earlier
/// nodes. Returns the edge list and a random label subset.
fn random_dag(rng: &mut ChaCha8Rng, n: usize) -> (Vec<(usize, usize)>, Vec<usize>) {
    let mut edges = Vec::new();
    for v in 1..n {
        let k = rng.random_range(1..=3.min(v));
        let mut parents: Vec<usize> = (0..v).collect();
        parents.shuffle(rng);
        for &p in &parents[..k] {
            edges.push((p, v));
        }
    }
    let mut labels: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
    while labels.len() < 2 {
        labels = (0..n).collect();
    }
    (edges, labels)
}

fn build_graph(n: usize, edges: &[(usize, usize)], labels: &[usize]) -> TaxonomyGraph {
    let mut b = TaxonomyBuilder::new();
    for v in 0..n {
        b.node(format!("n{v:02}"), format!("s{v}"), format!("node {v}"));
    }
    for &(p, c) in edges {
        b.edge(format!("n{p:02}"), format!("n{c:02}"));
    }
    for &l in labels {
        b.label(format!("n{l:02}"));
    }
    b.build().expect("valid random DAG")
}

/// All-pairs shortest paths over the undirected view; `unit` replaces
/// every weight by one.
fn floyd_warshall(n: usize, edges: &[(usize, usize)], unit: bool) -> Vec<Vec<f64>> {
    let mut depth = vec![usize::MAX; n];
    depth[0] = 0;
    let mut queue = VecDeque::from([0]);
    while let Some(u) = queue.pop_front() {
        for &(p, c) in edges {
            if p == u && depth[c] == usize::MAX {
                depth[c] = depth[u] + 1;
                queue.push_back(c);
            }
        }
    }
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (v, row) in d.iter_mut().enumerate() {
        row[v] = 0.0;
    }
    for &(p, c) in edges {
        let w = if unit { 1.0 } else { 0.5f64.powi(depth[p] as i32) };
        d[p][c] = d[p][c].min(w);
        d[c][p] = d[c][p].min(w);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

fn distance_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut pairs, mut triples) = (0usize, 0usize);
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let (edges, labels) = random_dag(&mut rng, n);
        let g = build_graph(n, &edges, &labels);
        let weighted = floyd_warshall(n, &edges, false);
        let hops = floyd_warshall(n, &edges, true);
        let id = |v: usize| g.label(&format!("n{v:02}")).unwrap();
        for &a in &labels {
            for &b in &labels {
                pairs += 1;
                let d = g.semantic_distance(id(a), id(b));
                if d != weighted[a][b] || g.hop_distance(id(a), id(b)) as f64 != hops[a][b] {
                    return outcome(false, format!("mismatch on n{a:02}-n{b:02}: {d} vs {}", weighted[a][b]));
                }
                if d != g.semantic_distance(id(b), id(a)) || (a == b) != (d == 0.0) {
                    return outcome(false, "symmetry or identity violated");
                }
            }
        }
        for _ in 0..50 {
            let (a, b, c) = (
                *labels.choose(&mut rng).unwrap(),
                *labels.choose(&mut rng).unwrap(),
                *labels.choose(&mut rng).unwrap(),
            );
            triples += 1;
            let d = |x, y| g.semantic_distance(id(x), id(y));
            if d(a, c) > d(a, b) + d(b, c) {
                return outcome(false, "triangle inequality violated");
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        elapsed < Duration::from_secs(10),
        format!(
            "{pairs} label pairs exact, {triples} triples, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn hop_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut graphs = vec![balanced_taxonomy(4, 4).with_unit_weights()];
    for _ in 0..20 {
        let n = rng.random_range(2..=50);
        let (edges, labels) = random_dag(&mut rng, n);
        graphs.push(build_graph(n, &edges, &labels).with_unit_weights());
    }
    for t in 0..1000 {
        let g = &graphs[t % graphs.len()];
        let a = *g.labels().choose(&mut rng).unwrap();
        let b = *g.labels().choose(&mut rng).unwrap();
        if g.semantic_distance(a, b) != g.hop_distance(a, b) as f64 {
            return outcome(false, format!("pair {t} differs"));
        }
    }
    outcome(true, "1000 pairs exact")
}

fn eigen_oracle(b: &Matrix) -> Vec<f64> {
    let n = b.dim();
    let dm = DMatrix::from_fn(n, n, |i, j| b[(i, j)]);
    let lambda = dm
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() < 1e-9)
        .map(|z| z.re)
        .fold(f64::MIN, f64::max);
    let svd = (&dm - DMatrix::identity(n, n) * lambda).svd(false, true);
    let vt = svd.v_t.unwrap();
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let v: Vec<f64> = vt.row(k).iter().copied().collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn perron_fixtures() -> Outcome {
    let ones = perron_rank(&Matrix::filled(3, 1.0), 1e-10, 10_000).unwrap();
    if max_diff(&ones.r, &[1.0 / 3.0; 3]) > 1e-10 {
        return outcome(false, "ones(3)");
    }
    let two = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, 1.0]]).unwrap();
    let two = perron_rank(&two, 1e-10, 10_000).unwrap();
    if max_diff(&two.r, &[2.0 / 3.0, 1.0 / 3.0]) > 1e-8 {
        return outcome(false, "2x2 analytic");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut worst_oracle, mut worst_res, mut worst_avg) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..6).map(|_| rng.random_range(0.01..10.0)).collect())
            .collect();
        let b = Matrix::from_rows(&rows).unwrap();
        let p = perron_rank(&b, 1e-10, 10_000).unwrap();
        worst_oracle = worst_oracle.max(max_diff(&p.r, &eigen_oracle(&b)));
        worst_res = worst_res.max(p.residual);
        let avg = perron_running_average(&b, 1_000_000_000_000).unwrap();
        worst_avg = worst_avg.max(max_diff(&p.r, &avg));
    }
    outcome(
        worst_oracle <= 1e-8 && worst_res <= 1e-10 && worst_avg <= 1e-8,
        format!("eigen oracle {worst_oracle:.1e}, residual {worst_res:.1e}, running average {worst_avg:.1e}"),
    )
}

fn e2e_specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::new("err05", 0.05),
        ModelSpec::new("err10", 0.10),
        ModelSpec::new("err20", 0.20),
        ModelSpec::new("err40", 0.40),
    ]
}

fn e2e_config() -> CompetitionConfig {
    CompetitionConfig {
        selection: SelectionConfig {
            k: 30,
            threshold: Confidence::from_f64(0.8).unwrap(),
            ..Default::default()
        },
        ..Default::default()
    }
}

struct E2e {
    graph: TaxonomyGraph,
    world: World,
    table: PredictionTable,
    run: CompetitionRun,
    elapsed: Duration,
}

fn e2e_run(graph: &TaxonomyGraph, seed: u64) -> E2e {
    let start = Instant::now();
    let world = generate_world(
        graph,
        &WorldConfig {
            images: 10_000,
            multi_object_rate: 0.2,
            nonnatural_rate: 0.0,
            seed,
        },
    );
    let table = synthetic_table(&world, &e2e_specs(), seed).unwrap();
    let run = run_competition(&table, graph, &e2e_config(), &mut world.oracle.clone()).unwrap();
    E2e {
        graph: graph.clone(),
        world,
        table,
        run,
        elapsed: start.elapsed(),
    }
}

fn true_order_score(specs: &[ModelSpec]) -> Vec<f64> {
    specs.iter().map(|s| -s.error_rate).collect()
}

fn ordering_recovery(runs: &[E2e]) -> Outcome {
    let truth = true_order_score(&e2e_specs());
    let mut hits = 0;
    let mut detail = Vec::new();
    for (seed, e) in runs.iter().enumerate() {
        let s = srcc(&e.run.state.ranking.r, &truth).unwrap();
        if s == 1.0 {
            hits += 1;
        } else {
            detail.push(format!("seed {seed}: srcc {s}"));
        }
    }
    let slowest = runs.iter().map(|e| e.elapsed).max().unwrap();
    outcome(
        hits >= 9 && slowest < Duration::from_secs(60),
        format!(
            "{hits}/10 seeds exact, slowest run {:.2}s {}",
            slowest.as_secs_f64(),
            detail.join("; ")
        ),
    )
}

fn reciprocity(runs: &[E2e]) -> Outcome {
    let s = Smoothing::default();
    let zero = CaseTally {
        case_ii_j: 30,
        ..Default::default()
    };
    let (a, _) = mad_core::pairwise_accuracy(&zero, s).unwrap();
    if a != 1.0 / 32.0 {
        return outcome(false, format!("0 of 30 gives {a}"));
    }
    let mut worst = 0.0f64;
    for e in runs {
        let (acc, b) = (&e.run.state.accuracy, &e.run.state.dominance);
        for i in 0..acc.dim() {
            for j in 0..acc.dim() {
                if i == j {
                    continue;
                }
                if !(acc[(i, j)] > 0.0 && acc[(i, j)] < 1.0) {
                    return outcome(false, "accuracy outside (0, 1)");
                }
                worst = worst.max((b[(i, j)] * b[(j, i)] - 1.0).abs());
            }
        }
    }
    outcome(
        worst <= 1e-12,
        format!("max |b_ij b_ji - 1| = {worst:.1e}; 0/30 -> 1/32"),
    )
}

fn incremental(runs: &[E2e]) -> Outcome {
    let cfg = e2e_config();
    let k = cfg.selection.k;
    let mut worst = 0.0f64;
    let mut most_new = 0;
    for (seed, e) in runs.iter().enumerate().take(3) {
        let fifth = ModelSpec::new("err15", 0.15);
        let records = synthetic_model(&e.world, &fifth, seed as u64);
        let full = e.table.with_model(fifth.id.clone(), records).unwrap();
        let ext = add_model(&e.run, &full, &e.graph, &cfg, &mut e.world.oracle.clone()).unwrap();
        let scratch = run_competition(&full, &e.graph, &cfg, &mut e.world.oracle.clone()).unwrap();
        worst = worst.max(max_diff(&ext.run.state.ranking.r, &scratch.state.ranking.r));
        most_new = most_new.max(ext.new_images);
    }
    outcome(
        worst <= 1e-12 && most_new <= 4 * k,
        format!(
            "max |r_inc - r_scratch| = {worst:.1e}, at most {most_new} new images (bound {})",
            4 * k
        ),
    )
}

/// Eleven models; for each pair a private block of 30 images where only
/// those two are confident and they disagree.
fn disjoint_budget() -> usize {
    let g = balanced_taxonomy(4, 4);
    let labels = g.labels().to_vec();
    let m = 11;
    let k = 30;
    let models: Vec<ModelId> = (0..m).map(|i| ModelId(format!("m{i:02}"))).collect();
    let mut records = Vec::new();
    let low = Confidence::from_f64(0.3).unwrap();
    for (p, (i, j)) in all_pairs(m).into_iter().enumerate() {
        for t in 0..k {
            let image = ImageId::new(&format!("b{p:02}_{t:02}"));
            let la = labels[(p * 7 + t) % 128];
            let lb = labels[128 + (p * 11 + t) % 128];
            for (l, model) in models.iter().enumerate() {
                let (label, confidence) = if l == i {
                    (la, Confidence::ONE)
                } else if l == j {
                    (lb, Confidence::ONE)
                } else {
                    (la, low)
                };
                records.push(PredictionRecord {
                    model: model.clone(),
                    image: image.clone(),
                    label,
                    confidence,
                });
            }
        }
    }
    let table = PredictionTable::from_records(models, records).unwrap();
    let subsets = select_all(&table, &g, &all_pairs(m), &SelectionConfig::default(), Exec::Parallel);
    build_test_set(&subsets).len()
}

fn budget(runs: &[E2e]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let g = &runs[0].graph;
    for e in runs {
        let m = e.run.state.models.len();
        if e.run.test_set().len() > m * (m - 1) * 30 / 2 {
            return outcome(false, "e2e test set over budget");
        }
    }
    for trial in 0..30 {
        let m = rng.random_range(2..=7);
        let k = rng.random_range(1..=40);
        let world = generate_world(
            g,
            &WorldConfig {
                images: rng.random_range(50..2_000),
                multi_object_rate: 0.3,
                nonnatural_rate: 0.0,
                seed: trial,
            },
        );
        let specs: Vec<ModelSpec> = (0..m)
            .map(|i| ModelSpec::new(&format!("m{i}"), rng.random_range(0.0..0.6)))
            .collect();
        let table = synthetic_table(&world, &specs, trial).unwrap();
        let cfg = SelectionConfig {
            k,
            ..Default::default()
        };
        let subsets = select_all(&table, g, &all_pairs(m), &cfg, Exec::Parallel);
        if build_test_set(&subsets).len() > m * (m - 1) * k / 2 {
            return outcome(false, format!("trial {trial} over budget"));
        }
    }
    let exact = disjoint_budget();
    outcome(
        exact == 1650,
        format!("randomized runs within bound; m=11, k=30 disjoint -> |S| = {exact}"),
    )
}

fn stability(runs: &[E2e]) -> Outcome {
    let e = &runs[0];
    let rows = topk_stability(
        &e.run.state.models,
        &e.run.verdicts,
        30,
        RankSettings::default(),
        Exec::Parallel,
    )
    .unwrap();
    let low: Vec<String> = rows
        .iter()
        .filter(|(k, s)| *k >= 15 && *s != 1.0)
        .map(|(k, s)| format!("k={k}: {s}"))
        .collect();
    let first_perfect = rows
        .iter()
        .rev()
        .take_while(|(_, s)| *s == 1.0)
        .last()
        .map_or(30, |(k, _)| *k);
    outcome(
        low.is_empty() && rows.len() == 29,
        format!("srcc = 1 for all k' >= {first_perfect} {}", low.join(", ")),
    )
}

fn replacement(runs: &[E2e]) -> Outcome {
    let e = &runs[0];
    let cfg = e2e_config().selection;
    let k = cfg.k;
    let mut checked = 0;
    for (i, j) in all_pairs(4) {
        let cands = rank_pair_candidates(&e.table, &e.graph, i, j, cfg.threshold, Exec::Parallel);
        let top = PairSubset::select_top_k((i, j), cands.clone(), k, cfg.max_per_label);
        let wider = PairSubset::select_top_k((i, j), cands.clone(), k + 1, cfg.max_per_label);
        let victim = top.selected_images()[0].clone();
        // The oracle flags the top image as non-natural.
        let mut oracle = OracleLabels::new();
        for img in &e.world.images {
            let natural = img.id != victim;
            let truth = if natural {
                img.objects.iter().copied().collect()
            } else {
                BTreeSet::new()
            };
            oracle.insert(img.id.clone(), natural, truth).unwrap();
        }
        let mut subsets = vec![top];
        run_labeling(&mut subsets, &mut oracle, &mut LabelStore::new(), VotingRule::default()).unwrap();
        let got: BTreeSet<ImageId> = subsets[0].selected_images().into_iter().collect();
        let mut want: BTreeSet<ImageId> = wider.selected_images().into_iter().collect();
        want.remove(&victim);
        if got != want {
            return outcome(
                false,
                format!("pair ({i}, {j}) differs from top-(k+1) minus the discard"),
            );
        }
        checked += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut sequences = 0;
    for _ in 0..200 {
        let (i, j) = *all_pairs(4).choose(&mut rng).unwrap();
        let cands = rank_pair_candidates(&e.table, &e.graph, i, j, cfg.threshold, Exec::Sequential);
        let mut s = PairSubset::select_top_k((i, j), cands, k, cfg.max_per_label);
        for _ in 0..rng.random_range(1..60) {
            let sel = s.selected_images();
            let Some(victim) = sel.choose(&mut rng).cloned() else {
                break;
            };
            s.next_replacement(&victim).unwrap();
            for side in 0..2 {
                if s.label_counts(side).values().any(|&n| n > cfg.max_per_label) {
                    return outcome(false, "diversity cap exceeded");
                }
            }
        }
        sequences += 1;
    }
    outcome(
        true,
        format!("{checked} pairs match top-(k+1) minus discard; {sequences} random discard sequences within cap"),
    )
}

/// Drives a five-annotator session with noisy answers and returns the log
/// bytes together with the initial state.
fn simulated_session(dir: &Path) -> (SessionState, Vec<u8>) {
    let g = balanced_taxonomy(4, 3);
    let world = generate_world(
        &g,
        &WorldConfig {
            images: 3_000,
            multi_object_rate: 0.2,
            nonnatural_rate: 0.05,
            seed: 21,
        },
    );
    let specs = [
        ModelSpec::new("a", 0.1),
        ModelSpec::new("b", 0.2),
        ModelSpec::new("c", 0.3),
        ModelSpec::new("d", 0.4),
    ];
    let table = synthetic_table(&world, &specs, 21).unwrap();
    let subsets = select_all(&table, &g, &all_pairs(4), &SelectionConfig::default(), Exec::Parallel);
    let initial = SessionState::new(table.models().to_vec(), subsets, VotingRule::default()).unwrap();
    let opts = SessionOptions {
        sync: SyncPolicy::Flush,
        ..Default::default()
    };
    let path = dir.join("votes.log");
    let (mut sess, _) = Session::open(initial.clone(), &path, AnnotatorPolicy::Open, opts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let annotators: Vec<AnnotatorId> = (0..5).map(|n| AnnotatorId(format!("ann{n}"))).collect();
    let oracle = &world.oracle;
    let mut idle = 0;
    while idle < 50 {
        let who = annotators.choose(&mut rng).unwrap();
        let Some(q) = sess.next_query(who).unwrap() else {
            idle += 1;
            continue;
        };
        idle = 0;
        let truth = oracle.oracle_answer(&q, who.clone()).unwrap();
        let vote = AnnotationVote {
            answer_a: truth.answer_a ^ rng.random_bool(0.1),
            answer_b: truth.answer_b ^ rng.random_bool(0.1),
            difficulty: truth.difficulty || rng.random_bool(0.05),
            ..truth
        };
        sess.submit_vote(vote).unwrap();
    }
    drop(sess);
    (initial, std::fs::read(&path).unwrap())
}

fn durability() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (initial, bytes) = simulated_session(dir.path());
    let text = std::str::from_utf8(&bytes).unwrap();
    let records: Vec<LogRecord> = text.lines().map(|l| LogRecord::parse(l).unwrap()).collect();
    let full = replay(initial.clone(), &records).unwrap();
    if !full.is_complete() {
        return outcome(false, "simulated session did not finish");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let opts = SessionOptions {
        sync: SyncPolicy::Flush,
        ..Default::default()
    };
    let crash_log = dir.path().join("crash.log");
    for point in 0..1000 {
        let cut = rng.random_range(0..=bytes.len());
        std::fs::write(&crash_log, &bytes[..cut]).unwrap();
        let durable = bytes[..cut].iter().filter(|&&b| b == b'\n').count();
        let (mut sess, recovery) = Session::open(initial.clone(), &crash_log, AnnotatorPolicy::Open, opts).unwrap();
        let expected = replay(initial.clone(), &records[..durable]).unwrap();
        if sess.state() != &expected || recovery.records.len() != durable {
            return outcome(false, format!("crash point {point} at byte {cut}: state differs"));
        }
        // Every durable vote is present exactly once.
        let mut seen = BTreeMap::new();
        for r in &records[..durable] {
            *seen
                .entry((r.vote.annotator.clone(), r.vote.image.clone()))
                .or_insert(0) += 1;
        }
        for ((who, image), n) in &seen {
            let present = sess
                .state()
                .votes_for(image)
                .iter()
                .filter(|v| &v.annotator == who)
                .count();
            if present != *n {
                return outcome(
                    false,
                    format!("crash point {point}: vote of {who} on {image} seen {present} times"),
                );
            }
        }
        if sess.state().votes_applied() != durable {
            return outcome(false, format!("crash point {point}: vote count differs"));
        }
        // The client retries the vote that was in flight; resending an
        // acknowledged one is refused.
        if durable < records.len() && point % 10 == 0 {
            let next = &records[durable].vote;
            let q = sess.next_query(&next.annotator).unwrap();
            if q.as_ref().map(|q| &q.image) == Some(&next.image) {
                sess.submit_vote(next.clone()).unwrap();
            }
        }
        if durable > 0 && point % 10 == 1 {
            let last = records[durable - 1].vote.clone();
            if sess.submit_vote(last).is_ok() {
                return outcome(false, format!("crash point {point}: duplicate accepted"));
            }
        }
    }
    outcome(
        true,
        format!("1000 crash points over {} votes, state identical", records.len()),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("distance oracle equivalence", distance_oracle()));
    results.push(("hop reduction", hop_reduction()));
    results.push(("perron fixtures", perron_fixtures()));
    let graph = balanced_taxonomy(4, 4);
    let runs: Vec<E2e> = (0..10).map(|seed| e2e_run(&graph, seed)).collect();
    results.push(("reciprocity and smoothing", reciprocity(&runs)));
    results.push(("end-to-end ordering recovery", ordering_recovery(&runs)));
    results.push(("incremental equivalence", incremental(&runs)));
    results.push(("budget bound", budget(&runs)));
    results.push(("stability sweep", stability(&runs)));
    results.push(("replacement protocol", replacement(&runs)));
    results.push(("service durability", durability()));
    let mut failed = 0;
    for (name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {}", o.detail.trim_end());
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
