//! Pairwise accuracies, the dominance matrix and the global Perron ranking.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fmt::sig;
use crate::labeling::{Case, LabelVerdict};
use crate::predictions::ModelId;
use crate::selection::{all_pairs, Pair, SelectionConfig};

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

/// Additive smoothing `(correct + alpha) / (n + 2 alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub alpha: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

impl Smoothing {
    pub fn apply(self, correct: usize, n: usize) -> f64 {
        (correct as f64 + self.alpha) / (n as f64 + 2.0 * self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSettings {
    pub smoothing: Smoothing,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for RankSettings {
    fn default() -> Self {
        Self {
            smoothing: Smoothing::default(),
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

impl RankSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing.alpha > 0.0 && self.smoothing.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "smoothing must be positive, got {}",
                self.smoothing.alpha
            )));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::Config(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Verdict counts for one pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseTally {
    pub case_i: usize,
    pub case_ii_i: usize,
    pub case_ii_j: usize,
    pub case_iii: usize,
    pub discarded: usize,
}

impl CaseTally {
    pub fn add(&mut self, case: Case) {
        match case {
            Case::CaseI => self.case_i += 1,
            Case::CaseIIi => self.case_ii_i += 1,
            Case::CaseIIj => self.case_ii_j += 1,
            Case::CaseIII => self.case_iii += 1,
            Case::Discarded => self.discarded += 1,
        }
    }

    pub fn from_cases(cases: impl IntoIterator<Item = Case>) -> Self {
        let mut t = Self::default();
        cases.into_iter().for_each(|c| t.add(c));
        t
    }

    /// Non-discarded verdicts.
    pub fn judged(&self) -> usize {
        self.case_i + self.case_ii_i + self.case_ii_j + self.case_iii
    }

    pub fn correct_i(&self) -> usize {
        self.case_i + self.case_ii_i
    }

    pub fn correct_j(&self) -> usize {
        self.case_i + self.case_ii_j
    }
}

/// Smoothed accuracies `(a_ij, a_ji)` of the two models on their subset.
pub fn pairwise_accuracy(tally: &CaseTally, smoothing: Smoothing) -> Result<(f64, f64)> {
    let n = tally.judged();
    if n == 0 {
        return Err(Error::Ranking("no judged verdicts for the pair".into()));
    }
    Ok((
        smoothing.apply(tally.correct_i(), n),
        smoothing.apply(tally.correct_j(), n),
    ))
}

/// Dense square matrix, row-major. Equality is bitwise so NaN entries
/// compare equal to themselves.
#[derive(Debug, Clone)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl PartialEq for Matrix {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Matrix {
    pub fn filled(n: usize, value: f64) -> Self {
        Self {
            n,
            data: vec![value; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::filled(n, 0.0);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Ranking("matrix is not square".into()));
        }
        Ok(Self { n, data: rows.concat() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n.max(1))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.rows()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    /// `P M Pᵀ` for the permutation sending index `i` to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::filled(self.n, 0.0);
        for i in 0..self.n {
            for j in 0..self.n {
                out[(perm[i], perm[j])] = self[(i, j)];
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// `a_ij` for every ordered pair. The diagonal is undefined and holds NaN.
pub fn accuracy_matrix(m: usize, tallies: &BTreeMap<Pair, CaseTally>, smoothing: Smoothing) -> Result<Matrix> {
    let mut a = Matrix::filled(m, f64::NAN);
    for (i, j) in all_pairs(m) {
        let t = tallies.get(&(i, j)).copied().unwrap_or_default();
        // A pair without judged verdicts smooths to 0.5 on both sides.
        let n = t.judged();
        a[(i, j)] = smoothing.apply(t.correct_i(), n);
        a[(j, i)] = smoothing.apply(t.correct_j(), n);
    }
    for &(i, j) in tallies.keys() {
        if i >= j || j >= m {
            return Err(Error::Ranking(format!("tally for invalid pair ({i}, {j})")));
        }
    }
    Ok(a)
}

/// `b_ij = a_ij / a_ji` off the diagonal, 1 on it.
pub fn dominance_matrix(a: &Matrix) -> Matrix {
    let n = a.dim();
    let mut b = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            b[(i, j)] = a[(i, j)] / a[(j, i)];
            b[(j, i)] = 1.0 / b[(i, j)];
        }
    }
    b
}

/// Grows `b` by one model: `b'_{i,m} = column[i]` and `b'_{m,i}` its
/// reciprocal, with the existing block copied unchanged.
pub fn expand_dominance(b: &Matrix, column: &[f64]) -> Result<Matrix> {
    let m = b.dim();
    if column.len() != m {
        return Err(Error::Ranking(format!(
            "expected {m} new entries, got {}",
            column.len()
        )));
    }
    let mut out = Matrix::identity(m + 1);
    for i in 0..m {
        out.data[i * (m + 1)..i * (m + 1) + m].copy_from_slice(b.row(i));
        out[(i, m)] = column[i];
        out[(m, i)] = 1.0 / column[i];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerronVector {
    /// Positive scores summing to one; larger is better.
    pub r: Vec<f64>,
    pub eigenvalue: f64,
    pub iterations: usize,
    /// `‖Br − λr‖∞ / λ` at the returned vector.
    pub residual: f64,
}

fn check_positive(b: &Matrix) -> Result<()> {
    if b.dim() == 0 {
        return Err(Error::Ranking("empty matrix".into()));
    }
    if let Some(x) = b.data.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::Ranking(format!("matrix entry {x} is not positive")));
    }
    Ok(())
}

/// Principal eigenvector of a positive matrix by power iteration from the
/// uniform vector, stopping once the relative residual is within
/// `tolerance`.
pub fn perron_rank(b: &Matrix, tolerance: f64, max_iterations: usize) -> Result<PerronVector> {
    check_positive(b)?;
    let n = b.dim();
    let mut x = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for it in 0..max_iterations {
        let y = b.mul_vec(&x);
        // With Σx = 1, Σ(Bx) is the Rayleigh-style eigenvalue estimate.
        let lambda: f64 = y.iter().sum();
        residual = y
            .iter()
            .zip(&x)
            .map(|(yi, xi)| (yi - lambda * xi).abs())
            .fold(0.0, f64::max)
            / lambda;
        if residual <= tolerance {
            return Ok(PerronVector {
                r: x,
                eigenvalue: lambda,
                iterations: it,
                residual,
            });
        }
        x = y.into_iter().map(|v| v / lambda).collect();
    }
    Err(Error::NoConvergence {
        iterations: max_iterations,
        residual,
    })
}

/// `(1/t) Σ_{α=1..t} Bᵅ1 / (1ᵀBᵅ1)`. Once the normalized iterate moves by
/// no more than a few ulps, the remaining terms are added in one step.
pub fn perron_running_average(b: &Matrix, terms: u64) -> Result<Vec<f64>> {
    check_positive(b)?;
    if terms == 0 {
        return Err(Error::Ranking("running average needs at least one term".into()));
    }
    let n = b.dim();
    let mut x = vec![1.0; n];
    let mut sum = vec![0.0; n];
    let mut alpha = 0u64;
    while alpha < terms {
        let y = b.mul_vec(&x);
        let total: f64 = y.iter().sum();
        let next: Vec<f64> = y.iter().map(|v| v / total).collect();
        alpha += 1;
        let settled = next.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 4.0 * f64::EPSILON);
        x = next;
        if settled {
            let rest = (terms - alpha + 1) as f64;
            sum.iter_mut().zip(&x).for_each(|(s, v)| *s += rest * v);
            alpha = terms;
            break;
        }
        sum.iter_mut().zip(&x).for_each(|(s, v)| *s += v);
    }
    Ok(sum.into_iter().map(|s| s / alpha as f64).collect())
}

/// Average ranks (1-based) of `values`, ascending.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation between two score or rank assignments, with tied
/// values given their average rank. Two constant inputs correlate
/// perfectly; a constant against a varying input gives 0.
pub fn srcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Ranking(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Ranking("need at least two items".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok(match (saa == 0.0, sbb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
    })
}

/// 1-based positions by descending score, ties broken by model order. The
/// second vector flags models whose score equals another model's.
pub fn ordinal_ranks(r: &[f64]) -> (Vec<usize>, Vec<bool>) {
    let mut idx: Vec<usize> = (0..r.len()).collect();
    idx.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; r.len()];
    for (pos, &i) in idx.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    let tied = (0..r.len())
        .map(|i| (0..r.len()).any(|j| j != i && r[j] == r[i]))
        .collect();
    (ranks, tied)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompetitionState {
    pub models: Vec<ModelId>,
    pub tallies: BTreeMap<Pair, CaseTally>,
    pub accuracy: Matrix,
    pub dominance: Matrix,
    pub ranking: PerronVector,
    pub settings: RankSettings,
}

impl CompetitionState {
    pub fn from_tallies(
        models: Vec<ModelId>,
        tallies: BTreeMap<Pair, CaseTally>,
        settings: RankSettings,
    ) -> Result<Self> {
        if models.len() < 2 {
            return Err(Error::TooFewModels(models.len()));
        }
        settings.validate()?;
        let accuracy = accuracy_matrix(models.len(), &tallies, settings.smoothing)?;
        let dominance = dominance_matrix(&accuracy);
        let ranking = perron_rank(&dominance, settings.tolerance, settings.max_iterations)?;
        Ok(Self {
            models,
            tallies,
            accuracy,
            dominance,
            ranking,
            settings,
        })
    }

    pub fn from_verdicts(
        models: Vec<ModelId>,
        verdicts: &BTreeMap<Pair, Vec<LabelVerdict>>,
        settings: RankSettings,
    ) -> Result<Self> {
        Self::from_tallies(models, tally_verdicts(verdicts, usize::MAX), settings)
    }

    /// Adds one model from its tallies against every existing model
    /// (`new_tallies[i]` is the pair `(i, m)`), growing A and B by one
    /// row and column and leaving the existing blocks untouched.
    pub fn add_model(&self, model: ModelId, new_tallies: &[CaseTally]) -> Result<Self> {
        let m = self.models.len();
        if new_tallies.len() != m {
            return Err(Error::Ranking(format!(
                "expected {m} new tallies, got {}",
                new_tallies.len()
            )));
        }
        if self.models.contains(&model) {
            return Err(Error::Ranking(format!("model `{model}` already ranked")));
        }
        let s = self.settings.smoothing;
        let mut accuracy = Matrix::filled(m + 1, f64::NAN);
        for i in 0..m {
            accuracy.data[i * (m + 1)..i * (m + 1) + m].copy_from_slice(self.accuracy.row(i));
        }
        let mut column = Vec::with_capacity(m);
        for (i, t) in new_tallies.iter().enumerate() {
            let n = t.judged();
            accuracy[(i, m)] = s.apply(t.correct_i(), n);
            accuracy[(m, i)] = s.apply(t.correct_j(), n);
            column.push(accuracy[(i, m)] / accuracy[(m, i)]);
        }
        let dominance = expand_dominance(&self.dominance, &column)?;
        let ranking = perron_rank(&dominance, self.settings.tolerance, self.settings.max_iterations)?;
        let mut tallies = self.tallies.clone();
        tallies.extend(new_tallies.iter().enumerate().map(|(i, t)| ((i, m), *t)));
        let mut models = self.models.clone();
        models.push(model);
        Ok(Self {
            models,
            tallies,
            accuracy,
            dominance,
            ranking,
            settings: self.settings,
        })
    }

    pub fn ordinal_ranks(&self) -> (Vec<usize>, Vec<bool>) {
        ordinal_ranks(&self.ranking.r)
    }

    /// Model ids from best to worst.
    pub fn ordering(&self) -> Vec<&ModelId> {
        let (ranks, _) = self.ordinal_ranks();
        let mut order: Vec<(usize, &ModelId)> = ranks.into_iter().zip(&self.models).collect();
        order.sort();
        order.into_iter().map(|(_, m)| m).collect()
    }
}

/// Tallies using at most the first `limit` judged verdicts of each pair.
pub fn tally_verdicts(verdicts: &BTreeMap<Pair, Vec<LabelVerdict>>, limit: usize) -> BTreeMap<Pair, CaseTally> {
    verdicts
        .iter()
        .map(|(&pair, vs)| {
            let mut t = CaseTally::default();
            for v in vs {
                if v.case != Case::Discarded && t.judged() == limit {
                    break;
                }
                t.add(v.case);
            }
            (pair, t)
        })
        .collect()
}

/// SRCC between the ranking from the first `k_reference` judged verdicts
/// of each pair and the ranking from the first `k′`, for every
/// `k′ < k_reference`. Pairs holding fewer verdicts contribute all they
/// have.
pub fn topk_stability(
    models: &[ModelId],
    verdicts: &BTreeMap<Pair, Vec<LabelVerdict>>,
    k_reference: usize,
    settings: RankSettings,
    exec: Exec,
) -> Result<Vec<(usize, f64)>> {
    let available = verdicts
        .values()
        .map(|vs| vs.iter().filter(|v| v.case != Case::Discarded).count())
        .max()
        .unwrap_or(0);
    if k_reference > available {
        return Err(Error::Ranking(format!(
            "k_reference {k_reference} exceeds the {available} verdicts available"
        )));
    }
    let rank_at = |k: usize| {
        CompetitionState::from_tallies(models.to_vec(), tally_verdicts(verdicts, k), settings).map(|s| s.ranking.r)
    };
    let reference = rank_at(k_reference)?;
    let ks: Vec<usize> = (1..k_reference).collect();
    exec.map(&ks, |&k| rank_at(k).and_then(|r| srcc(&reference, &r)).map(|s| (k, s)))
        .into_iter()
        .collect()
}

pub const STABILITY_HEADER: &str = "k,srcc";

pub fn format_stability(rows: &[(usize, f64)]) -> String {
    let mut out = format!("{STABILITY_HEADER}\n");
    for (k, s) in rows {
        let _ = writeln!(out, "{k},{}", sig(*s, 10));
    }
    out
}

fn float_list(xs: &[f64]) -> String {
    let items: Vec<String> = xs
        .iter()
        .map(|x| if x.is_nan() { "nan".to_string() } else { sig(*x, 10) })
        .collect();
    format!("[{}]", items.join(", "))
}

fn quoted(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn write_matrix(out: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(out, "\n[{name}]\nrows = [");
    for row in m.rows() {
        let _ = writeln!(out, "  {},", float_list(row));
    }
    out.push_str("]\n");
}

/// Ranking report as a TOML document, numbers at 10 significant digits.
/// `partial` marks snapshots taken before every verdict is in.
pub fn format_report(state: &CompetitionState, selection: &SelectionConfig, partial: bool) -> String {
    let mut out = String::new();
    let (ranks, tied) = state.ordinal_ranks();
    let _ = writeln!(out, "partial = {partial}");
    let _ = writeln!(out, "\n[config]");
    let _ = writeln!(out, "k = {}", selection.k);
    let _ = writeln!(out, "confidence_threshold = {}", sig(selection.threshold.as_f64(), 10));
    let _ = writeln!(out, "max_per_label = {}", selection.max_per_label);
    let _ = writeln!(out, "smoothing = {}", sig(state.settings.smoothing.alpha, 10));
    let _ = writeln!(out, "tolerance = {}", sig(state.settings.tolerance, 10));
    let _ = writeln!(out, "max_iterations = {}", state.settings.max_iterations);
    let models: Vec<String> = state.models.iter().map(|m| quoted(&m.0)).collect();
    let _ = writeln!(out, "\n[ranking]");
    let _ = writeln!(out, "models = [{}]", models.join(", "));
    let _ = writeln!(out, "r = {}", float_list(&state.ranking.r));
    let ranks: Vec<String> = ranks.iter().map(usize::to_string).collect();
    let _ = writeln!(out, "rank = [{}]", ranks.join(", "));
    let tied: Vec<String> = tied.iter().map(bool::to_string).collect();
    let _ = writeln!(out, "tied = [{}]", tied.join(", "));
    let _ = writeln!(out, "eigenvalue = {}", sig(state.ranking.eigenvalue, 10));
    let _ = writeln!(out, "iterations = {}", state.ranking.iterations);
    let _ = writeln!(out, "residual = {}", sig(state.ranking.residual, 10));
    write_matrix(&mut out, "accuracy", &state.accuracy);
    write_matrix(&mut out, "dominance", &state.dominance);
    for (&(i, j), t) in &state.tallies {
        let _ = writeln!(out, "\n[[pairs]]");
        let _ = writeln!(out, "i = {}", quoted(&state.models[i].0));
        let _ = writeln!(out, "j = {}", quoted(&state.models[j].0));
        let _ = writeln!(out, "case_i = {}", t.case_i);
        let _ = writeln!(out, "case_ii_i = {}", t.case_ii_i);
        let _ = writeln!(out, "case_ii_j = {}", t.case_ii_j);
        let _ = writeln!(out, "case_iii = {}", t.case_iii);
        let _ = writeln!(out, "discarded = {}", t.discarded);
    }
    out
}
