//! Cross-script cosine similarity and the statistical battery built on it.
//!
//! Every table is emitted as comma-separated text with a header row; the
//! column names of the similarity matrix, the per-model matrix and the test
//! summary are fixed by the constants below.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::ensemble::EmbeddingSet;
use crate::error::{Error, Result};
use crate::rng;

pub const STATS_HEADER: [&str; 12] = [
    "Comparison Script",
    "Model",
    "Test",
    "Mean 1",
    "Mean 2",
    "Difference",
    "T-statistic",
    "P-value",
    "Cohen's d",
    "Effect Size",
    "Significant",
    "Better Match",
];
pub const SUMMARY_HEADER: [&str; 5] = ["Script", "Mean Similarity", "Std Dev", "95% CI Lower", "95% CI Upper"];
pub const PAIRED_HEADER: [&str; 7] = ["Comparison Script", "Test", "Models", "Mean Difference", "T-statistic", "P-value", "Degenerate"];

/// Row-normalises a set, rejecting zero-norm rows by glyph id.
pub fn normalized_rows(set: &EmbeddingSet) -> Result<Array2<f64>> {
    let mut out = set.rows.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid(format!(
                "{}/{}: glyph `{}` has a zero-norm embedding",
                set.script, set.model_id, set.ids[i]
            )));
        }
        row /= n;
    }
    Ok(out)
}

/// All pairwise cosine similarities, `a.len() x b.len()`.
pub fn cosine_matrix(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<Array2<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("cosine similarity needs two nonempty sets"));
    }
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("embedding dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let (na, nb) = (normalized_rows(a)?, normalized_rows(b)?);
    let mut m = na.dot(&nb.t());
    m.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    if same_glyphs(a, b) {
        m.diag_mut().fill(1.0);
    }
    Ok(m)
}

fn same_glyphs(a: &EmbeddingSet, b: &EmbeddingSet) -> bool {
    a.script == b.script && a.ids == b.ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDistribution {
    pub script_a: String,
    pub script_b: String,
    pub model_id: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Cosine similarities between every glyph of `a` and every glyph of `b`.
/// When both sets hold the same glyphs the self-pairs are left out.
pub fn cross_script_similarity(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<SimilarityDistribution> {
    let m = cosine_matrix(a, b)?;
    let skip_diag = same_glyphs(a, b);
    let values: Vec<f64> = m
        .indexed_iter()
        .filter(|((i, j), _)| !(skip_diag && i == j))
        .map(|(_, &v)| v)
        .collect();
    let (mean, std) = mean_std(&values);
    Ok(SimilarityDistribution {
        script_a: a.script.clone(),
        script_b: b.script.clone(),
        model_id: a.model_id.clone(),
        n: values.len(),
        values,
        mean,
        std,
    })
}

/// Mean and sample (n - 1) standard deviation; the deviation is 0 below two
/// values.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Outcome of a t test. Degenerate cases (zero variance) are flagged rather
/// than returned as NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
    pub degenerate: bool,
}

fn two_sided_p(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.cdf(-t.abs())).min(1.0)
}

fn degenerate_t(diff: f64, df: f64) -> TTest {
    if diff == 0.0 {
        TTest { t: 0.0, p: 1.0, df, degenerate: true }
    } else {
        TTest { t: diff.signum() * f64::INFINITY, p: 0.0, df, degenerate: true }
    }
}

/// Welch's unequal-variance t test with Welch-Satterthwaite degrees of
/// freedom, two-sided.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("Welch's t needs at least two values per group"));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (m1, s1) = mean_std(a);
    let (m2, s2) = mean_std(b);
    let (v1, v2) = (s1 * s1 / n1, s2 * s2 / n2);
    let se2 = v1 + v2;
    if se2 == 0.0 {
        return Ok(degenerate_t(m1 - m2, n1 + n2 - 2.0));
    }
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / (v1 * v1 / (n1 - 1.0) + v2 * v2 / (n2 - 1.0));
    Ok(TTest { t, p: two_sided_p(t, df), df, degenerate: false })
}

/// Distributions longer than `threshold` are replaced by `size` values drawn
/// without replacement before testing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub threshold: usize,
    pub size: usize,
}

impl Default for Subsample {
    fn default() -> Self {
        Self { threshold: 1000, size: 32 }
    }
}

impl Subsample {
    pub fn apply(&self, values: &[f64], seed: u64) -> Vec<f64> {
        if values.len() <= self.threshold {
            return values.to_vec();
        }
        let mut r = rng::seeded(seed);
        let mut idx = sample(&mut r, values.len(), self.size.min(values.len())).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| values[i]).collect()
    }
}

pub fn welch_t_subsampled(a: &[f64], b: &[f64], cap: Subsample, seed: u64) -> Result<TTest> {
    welch_t(&cap.apply(a, rng::derive(seed, &[0])), &cap.apply(b, rng::derive(seed, &[1])))
}

/// Paired t test over per-model means, `N - 1` degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub test: TTest,
}

pub fn paired_model_t(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired test needs equal lengths ({} vs {})", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("paired test needs at least two models"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean_diff, sd_diff) = mean_std(&d);
    let n = d.len() as f64;
    let df = n - 1.0;
    let test = if sd_diff == 0.0 {
        degenerate_t(mean_diff, df)
    } else {
        let t = mean_diff / (sd_diff / n.sqrt());
        TTest { t, p: two_sided_p(t, df), df, degenerate: false }
    };
    Ok(PairedTest { mean_diff, sd_diff, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectLabel {
    Negligible,
    Small,
    Medium,
    Large,
}

impl EffectLabel {
    pub fn of(d: f64) -> Self {
        let a = d.abs();
        if a < 0.2 {
            Self::Negligible
        } else if a < 0.5 {
            Self::Small
        } else if a < 0.8 {
            Self::Medium
        } else {
            Self::Large
        }
    }
}

impl fmt::Display for EffectLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Negligible => "negligible",
            Self::Small => "small",
            Self::Medium => "medium",
            Self::Large => "large",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub d: f64,
    pub label: EffectLabel,
    pub degenerate: bool,
}

/// Cohen's d with the pooled standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<Effect> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("Cohen's d needs at least two values per group"));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (m1, s1) = mean_std(a);
    let (m2, s2) = mean_std(b);
    let pooled = (((n1 - 1.0) * s1 * s1 + (n2 - 1.0) * s2 * s2) / (n1 + n2 - 2.0)).sqrt();
    if pooled == 0.0 {
        let diff = m1 - m2;
        let d = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        return Ok(Effect { d, label: EffectLabel::of(d), degenerate: true });
    }
    let d = (m1 - m2) / pooled;
    Ok(Effect { d, label: EffectLabel::of(d), degenerate: false })
}

/// Bonferroni-corrected significance level. `n_tests` must be at least 1.
pub fn bonferroni(alpha: f64, n_tests: usize) -> f64 {
    assert!(n_tests >= 1, "Bonferroni correction needs at least one test");
    alpha / n_tests as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub comparison_script: String,
    pub model: String,
    pub test_name: String,
    pub mean1: f64,
    pub mean2: f64,
    pub difference: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub cohens_d: f64,
    pub effect_label: EffectLabel,
    pub significant: bool,
    pub better_match: String,
    pub degenerate: bool,
}

/// Outcome of dropping each model in turn and re-ranking the targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub top_all: String,
    /// Top target with each model left out, in model order.
    pub top_without: Vec<(String, String)>,
    /// Models whose own top target differs from the all-model top.
    pub dissenters: Vec<String>,
    pub stable: bool,
}

fn top_target(means: &BTreeMap<String, f64>) -> Option<String> {
    // Highest mean; ties broken by name.
    means
        .iter()
        .fold(None::<(&String, f64)>, |best, (k, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        })
        .map(|(k, _)| k.clone())
}

fn averaged(models: &[&(String, BTreeMap<String, f64>)]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (_, m) in models {
        for (t, &v) in m {
            let e = acc.entry(t.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Leave-one-out stability of the top-ranked target. Each entry is
/// `(model, target -> mean similarity)`.
pub fn leave_one_out_stability(per_model: &[(String, BTreeMap<String, f64>)]) -> Result<LooReport> {
    if per_model.len() < 2 {
        return Err(Error::invalid("leave-one-out needs at least two models"));
    }
    let all: Vec<_> = per_model.iter().collect();
    let top_all = top_target(&averaged(&all)).ok_or_else(|| Error::invalid("no targets to rank"))?;
    let mut top_without = Vec::new();
    for (i, (name, _)) in per_model.iter().enumerate() {
        let rest: Vec<_> = per_model.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, m)| m).collect();
        top_without.push((name.clone(), top_target(&averaged(&rest)).unwrap_or_default()));
    }
    let dissenters = per_model
        .iter()
        .filter(|(_, m)| top_target(m).as_deref() != Some(top_all.as_str()))
        .map(|(n, _)| n.clone())
        .collect();
    let stable = top_without.iter().all(|(_, t)| *t == top_all);
    Ok(LooReport { top_all, top_without, dissenters, stable })
}

/// Configuration of the statistical battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub alpha: f64,
    pub subsample: Subsample,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { alpha: 0.05, subsample: Subsample::default(), seed: 0 }
    }
}

/// Similarity distributions for every (comparison, target, model) cell.
/// `models` lists the member ids in order; the consensus is kept apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGrid {
    pub comparisons: Vec<String>,
    pub targets: Vec<String>,
    pub models: Vec<String>,
    pub cells: BTreeMap<(String, String, String), SimilarityDistribution>,
}

pub const CONSENSUS: &str = "consensus";

impl SimilarityGrid {
    /// Builds the grid from a lookup `(target, model, script) -> set`: the
    /// cell for comparison `c`, target `t` and model `m` compares
    /// `lookup(t, m, c)` with `lookup(t, m, t)`, i.e. both scripts embedded
    /// by the model that represents target `t`.
    pub fn build<'a, F>(comparisons: &[String], targets: &[String], models: &[String], lookup: F) -> Result<Self>
    where
        F: Fn(&str, &str, &str) -> Option<&'a EmbeddingSet> + Sync,
    {
        let mut keys = Vec::new();
        for c in comparisons {
            for t in targets {
                for m in models.iter().map(String::as_str).chain([CONSENSUS]) {
                    keys.push((c.clone(), t.clone(), m.to_string()));
                }
            }
        }
        let dists = crate::par::map_slice(&keys, |(c, t, m)| -> Result<Option<SimilarityDistribution>> {
            let (Some(a), Some(b)) = (lookup(t, m, c), lookup(t, m, t)) else {
                if m == CONSENSUS {
                    return Ok(None);
                }
                return Err(Error::invalid(format!("missing embeddings of `{c}` or `{t}` under {m} of `{t}`")));
            };
            cross_script_similarity(a, b).map(Some)
        });
        let mut cells = BTreeMap::new();
        for (k, d) in keys.into_iter().zip(dists) {
            if let Some(d) = d? {
                cells.insert(k, d);
            }
        }
        Ok(Self { comparisons: comparisons.to_vec(), targets: targets.to_vec(), models: models.to_vec(), cells })
    }

    pub fn get(&self, comparison: &str, target: &str, model: &str) -> Option<&SimilarityDistribution> {
        self.cells.get(&(comparison.to_string(), target.to_string(), model.to_string()))
    }

    fn mean(&self, c: &str, t: &str, m: &str) -> f64 {
        self.get(c, t, m).map_or(f64::NAN, |d| d.mean)
    }

    /// Mean similarity per target for one comparison script and model.
    pub fn target_means(&self, comparison: &str, model: &str) -> BTreeMap<String, f64> {
        self.targets.iter().map(|t| (t.clone(), self.mean(comparison, t, model))).collect()
    }

    /// Unordered target pairs in configuration order.
    pub fn target_pairs(&self) -> Vec<(String, String)> {
        let t = &self.targets;
        (0..t.len()).flat_map(|i| (i + 1..t.len()).map(move |j| (t[i].clone(), t[j].clone()))).collect()
    }
}

pub fn test_name(t1: &str, t2: &str) -> String {
    format!("{t1}_vs_{t2}")
}

/// Welch's t and Cohen's d for every comparison, model and target pair,
/// with significance judged at the Bonferroni level for the number of rows.
pub fn stat_tests(grid: &SimilarityGrid, models: &[String], cfg: &AnalysisConfig) -> Result<Vec<StatTestResult>> {
    let mut rows = Vec::new();
    for c in &grid.comparisons {
        for m in models {
            for (t1, t2) in grid.target_pairs() {
                let (Some(a), Some(b)) = (grid.get(c, &t1, m), grid.get(c, &t2, m)) else {
                    return Err(Error::invalid(format!("missing similarity cell for {c}/{m}")));
                };
                let name = test_name(&t1, &t2);
                let seed = rng::derive(cfg.seed, &[rng::label(c), rng::label(m), rng::label(&name)]);
                let tt = welch_t_subsampled(&a.values, &b.values, cfg.subsample, seed)?;
                let eff = cohens_d(&a.values, &b.values)?;
                rows.push(StatTestResult {
                    comparison_script: c.clone(),
                    model: m.clone(),
                    test_name: name,
                    mean1: a.mean,
                    mean2: b.mean,
                    difference: a.mean - b.mean,
                    t_stat: tt.t,
                    p_value: tt.p,
                    cohens_d: eff.d,
                    effect_label: eff.label,
                    significant: false,
                    better_match: if a.mean >= b.mean { t1 } else { t2 },
                    degenerate: tt.degenerate || eff.degenerate,
                });
            }
        }
    }
    if !rows.is_empty() {
        let alpha = bonferroni(cfg.alpha, rows.len());
        for r in &mut rows {
            r.significant = r.p_value < alpha;
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub comparison_script: String,
    pub test_name: String,
    pub models: usize,
    pub result: PairedTest,
}

/// Paired tests over per-member means for every comparison and target pair.
pub fn paired_tests(grid: &SimilarityGrid) -> Result<Vec<PairedRow>> {
    let mut out = Vec::new();
    if grid.models.len() < 2 {
        return Ok(out);
    }
    for c in &grid.comparisons {
        for (t1, t2) in grid.target_pairs() {
            let a: Vec<f64> = grid.models.iter().map(|m| grid.mean(c, &t1, m)).collect();
            let b: Vec<f64> = grid.models.iter().map(|m| grid.mean(c, &t2, m)).collect();
            out.push(PairedRow {
                comparison_script: c.clone(),
                test_name: test_name(&t1, &t2),
                models: a.len(),
                result: paired_model_t(&a, &b)?,
            });
        }
    }
    Ok(out)
}

/// Leave-one-out stability per comparison script over the member models.
pub fn loo_reports(grid: &SimilarityGrid) -> Result<Vec<(String, LooReport)>> {
    if grid.models.len() < 2 {
        return Ok(Vec::new());
    }
    grid.comparisons
        .iter()
        .map(|c| {
            let per: Vec<_> = grid.models.iter().map(|m| (m.clone(), grid.target_means(c, m))).collect();
            leave_one_out_stability(&per).map(|r| (c.clone(), r))
        })
        .collect()
}

/// Centroid of the L2-normalised rows of a set.
pub fn centroid(set: &EmbeddingSet) -> Result<Array1<f64>> {
    Ok(normalized_rows(set)?.mean_axis(Axis(0)).expect("nonempty"))
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let n = (a.dot(a) * b.dot(b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        (a.dot(b) / n).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub script: String,
    pub mean: f64,
    pub std: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// Centroid similarity of every script to `target` across ensemble members:
/// mean, sample deviation and a normal-approximation 95% interval, sorted
/// by decreasing mean.
pub fn centroid_summary(target: &str, per_member: &[BTreeMap<String, EmbeddingSet>]) -> Result<Vec<SummaryRow>> {
    if per_member.is_empty() {
        return Err(Error::invalid("centroid summary needs at least one member"));
    }
    let scripts: Vec<String> = per_member[0].keys().cloned().collect();
    let mut rows = Vec::new();
    for s in &scripts {
        let mut sims = Vec::new();
        for sets in per_member {
            let (Some(a), Some(b)) = (sets.get(target), sets.get(s)) else {
                return Err(Error::invalid(format!("missing embeddings of `{target}` or `{s}`")));
            };
            sims.push(cosine(&centroid(a)?, &centroid(b)?));
        }
        let (mean, std) = mean_std(&sims);
        let half = 1.96 * std / (sims.len() as f64).sqrt();
        rows.push(SummaryRow { script: s.clone(), mean, std, ci_lower: mean - half, ci_upper: mean + half });
    }
    rows.sort_by(|a, b| b.mean.total_cmp(&a.mean).then_with(|| a.script.cmp(&b.script)));
    Ok(rows)
}

/// A delimiter-separated table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Tab-aligned plain text for terminals and reports.
    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

fn fmt_p(p: f64) -> String {
    if p == 0.0 || p >= 1e-3 {
        format!("{p:.4}")
    } else {
        format!("{p:.3e}")
    }
}

/// Mean similarity per comparison script and target. With `model` set to
/// `None` each cell averages the member means; otherwise it is that model's
/// (e.g. the consensus) mean.
pub fn mean_similarity_table(grid: &SimilarityGrid, model: Option<&str>) -> Table {
    let mut header = vec!["Comparison Script".to_string()];
    header.extend(grid.targets.iter().cloned());
    let mut t = Table::new(&header);
    for c in &grid.comparisons {
        let mut row = vec![c.clone()];
        for tg in &grid.targets {
            let v = match model {
                Some(m) => grid.mean(c, tg, m),
                None => grid.models.iter().map(|m| grid.mean(c, tg, m)).sum::<f64>() / grid.models.len() as f64,
            };
            row.push(format!("{v:.3}"));
        }
        t.push(row);
    }
    t
}

/// Per-model similarity matrix, one row per comparison script and model.
pub fn model_matrix_table(grid: &SimilarityGrid) -> Table {
    let mut header = vec!["Comparison Script".to_string(), "Model".to_string()];
    header.extend(grid.targets.iter().cloned());
    let mut t = Table::new(&header);
    for c in &grid.comparisons {
        for m in grid.models.iter().map(String::as_str).chain([CONSENSUS]) {
            if m == CONSENSUS && grid.get(c, &grid.targets[0], m).is_none() {
                continue;
            }
            let mut row = vec![c.clone(), m.to_string()];
            row.extend(grid.targets.iter().map(|tg| format!("{:.6}", grid.mean(c, tg, m))));
            t.push(row);
        }
    }
    t
}

/// Mean Cohen's d over member models per comparison script and target
/// pair, formatted `d (label)`.
pub fn effect_size_table(grid: &SimilarityGrid, tests: &[StatTestResult]) -> Table {
    let pairs = grid.target_pairs();
    let mut header = vec!["Comparison Script".to_string()];
    header.extend(pairs.iter().map(|(a, b)| format!("{a} vs. {b}")));
    let mut t = Table::new(&header);
    for c in &grid.comparisons {
        let mut row = vec![c.clone()];
        for (a, b) in &pairs {
            let name = test_name(a, b);
            let ds: Vec<f64> = tests
                .iter()
                .filter(|r| &r.comparison_script == c && r.test_name == name && r.model != CONSENSUS)
                .map(|r| r.cohens_d)
                .collect();
            let d = ds.iter().sum::<f64>() / ds.len().max(1) as f64;
            row.push(format!("{d:.2} ({})", EffectLabel::of(d)));
        }
        t.push(row);
    }
    t
}

pub fn stats_table(tests: &[StatTestResult]) -> Table {
    let mut t = Table::new(&STATS_HEADER);
    for r in tests {
        t.push(vec![
            r.comparison_script.clone(),
            r.model.clone(),
            r.test_name.clone(),
            format!("{:.4}", r.mean1),
            format!("{:.4}", r.mean2),
            format!("{:.4}", r.difference),
            format!("{:.2}", r.t_stat),
            fmt_p(r.p_value),
            format!("{:.2}", r.cohens_d),
            r.effect_label.to_string(),
            if r.significant { "Yes" } else { "No" }.to_string(),
            r.better_match.clone(),
        ]);
    }
    t
}

pub fn paired_table(rows: &[PairedRow]) -> Table {
    let mut t = Table::new(&PAIRED_HEADER);
    for r in rows {
        t.push(vec![
            r.comparison_script.clone(),
            r.test_name.clone(),
            r.models.to_string(),
            format!("{:.6}", r.result.mean_diff),
            format!("{:.4}", r.result.test.t),
            fmt_p(r.result.test.p),
            if r.result.test.degenerate { "Yes" } else { "No" }.to_string(),
        ]);
    }
    t
}

pub fn summary_table(rows: &[SummaryRow]) -> Table {
    let mut t = Table::new(&SUMMARY_HEADER);
    for r in rows {
        t.push(vec![
            r.script.clone(),
            format!("{:.4}", r.mean),
            format!("{:.4}", r.std),
            format!("{:.4}", r.ci_lower),
            format!("{:.4}", r.ci_upper),
        ]);
    }
    t
}

pub fn loo_table(reports: &[(String, LooReport)]) -> Table {
    let mut t = Table::new(&["Comparison Script", "Top Target", "Stable", "Top Without", "Dissenting Models"]);
    for (c, r) in reports {
        let without = r.top_without.iter().map(|(m, t)| format!("{m}:{t}")).collect::<Vec<_>>().join(" ");
        t.push(vec![
            c.clone(),
            r.top_all.clone(),
            if r.stable { "Yes" } else { "No" }.to_string(),
            without,
            r.dissenters.join(" "),
        ]);
    }
    t
}
