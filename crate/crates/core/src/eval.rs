//! Verification (TAR@FAR) and identification (rank-k) metrics, plus the
//! ablation protocol that trains each mode and scores it under degradation.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{degrade_with_rng, DataError, DatasetManifest, DegradeSpec, Sample, Split};
use crate::model::{ModelError, ModelState};
use crate::seeds;

pub const FAR_TARGETS: [f64; 3] = [1e-2, 1e-1, 0.25];
pub const RANKS: [usize; 3] = [1, 5, 20];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("far {0} outside (0, 1]")]
    Far(f64),
    #[error("empty {0} score list")]
    EmptyScores(&'static str),
    #[error("empty gallery")]
    EmptyGallery,
    #[error("k must be ≥ 1")]
    ZeroK,
    #[error("need at least one seed")]
    NoSeeds,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Train(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarResult {
    pub far: f64,
    pub tar: f64,
    /// Accept iff score ≥ threshold.
    pub threshold: f64,
    pub realized_far: f64,
    /// Fewer than `1/far` impostors: the target cannot be resolved and the
    /// strictest threshold is used.
    pub unreachable: bool,
    /// Smallest non-zero FAR the impostor list can express.
    pub attainable_far: f64,
}

/// TAR at the loosest threshold whose impostor acceptance rate stays within
/// `far`. Ties resolve toward the stricter threshold.
pub fn tar_at_far(scores: &ScoreSet, far: f64) -> Result<TarResult, EvalError> {
    if !(far > 0.0 && far <= 1.0) {
        return Err(EvalError::Far(far));
    }
    if scores.impostor.is_empty() {
        return Err(EvalError::EmptyScores("impostor"));
    }
    if scores.genuine.is_empty() {
        return Err(EvalError::EmptyScores("genuine"));
    }
    let n = scores.impostor.len();
    let mut imp = scores.impostor.clone();
    imp.sort_by(|a, b| b.total_cmp(a));
    // Largest number of accepted impostors the target allows.
    let mut allowed = ((far * n as f64).floor() as usize).min(n);
    while allowed < n && (allowed + 1) as f64 / n as f64 <= far {
        allowed += 1;
    }
    while allowed > 0 && allowed as f64 / n as f64 > far {
        allowed -= 1;
    }
    let unreachable = (n as f64) * far < 1.0;
    let g = scores.genuine.len() as f64;
    let (tar, threshold, accepted) = if allowed >= n {
        let lowest = imp[n - 1].min(scores.genuine.iter().copied().fold(f64::INFINITY, f64::min));
        (1.0, lowest, n)
    } else {
        // Everything strictly above the (allowed+1)-th largest impostor.
        let cut = imp[allowed];
        let above = scores.genuine.iter().filter(|&&s| s > cut).count();
        let threshold = scores
            .genuine
            .iter()
            .chain(&scores.impostor)
            .copied()
            .filter(|&s| s > cut)
            .fold(f64::INFINITY, f64::min);
        let accepted = imp.iter().filter(|&&s| s >= threshold).count();
        (above as f64 / g, threshold, accepted)
    };
    Ok(TarResult {
        far,
        tar,
        threshold,
        realized_far: accepted as f64 / n as f64,
        unreachable,
        attainable_far: 1.0 / n as f64,
    })
}

/// Embedding vectors with their 1-based identity labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Embeddings {
    pub vectors: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Embeddings {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt().max(1e-12) * nb.sqrt().max(1e-12))
}

/// For each probe, the 0-based rank of its best same-label gallery entry in
/// the order (score descending, gallery index ascending), or `None` when the
/// gallery holds no such entry. With `same_set`, probe `i` skips gallery
/// entry `i`.
pub fn match_ranks(probe: &Embeddings, gallery: &Embeddings, same_set: bool) -> Result<Vec<Option<usize>>, EvalError> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    Ok((0..probe.len())
        .map(|i| {
            let scores: Vec<f64> = gallery.vectors.iter().map(|g| cosine(&probe.vectors[i], g)).collect();
            let skip = |j: usize| same_set && i == j;
            // Best-placed matching entry: highest score, lowest index on ties.
            let best = (0..gallery.len())
                .filter(|&j| !skip(j) && gallery.labels[j] == probe.labels[i])
                .min_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)))?;
            let ahead = (0..gallery.len())
                .filter(|&j| !skip(j))
                .filter(|&j| scores[j] > scores[best] || (scores[j] == scores[best] && j < best))
                .count();
            Some(ahead)
        })
        .collect())
}

pub fn accuracy_at(ranks: &[Option<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|r| matches!(r, Some(p) if *p < k)).count() as f64 / ranks.len() as f64
}

/// Fraction of probes whose identity appears among the top `k` gallery
/// entries by cosine.
pub fn rank_k(probe: &Embeddings, gallery: &Embeddings, k: usize, same_set: bool) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    Ok(accuracy_at(&match_ranks(probe, gallery, same_set)?, k))
}

/// Every same-label pair, plus as many distinct different-label pairs drawn
/// with `seed` (all of them when fewer exist).
pub fn verification_pairs(labels: &[usize], seed: u64) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let n = labels.len();
    let mut genuine = Vec::new();
    let mut n_impostor_total = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                genuine.push((i, j));
            } else {
                n_impostor_total += 1;
            }
        }
    }
    let want = genuine.len().max(1).min(n_impostor_total);
    let mut impostor = BTreeSet::new();
    if want == n_impostor_total {
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] != labels[j] {
                    impostor.insert((i, j));
                }
            }
        }
    } else {
        let mut rng = seeds::rng(seed, &[seeds::TAG_PAIRS]);
        while impostor.len() < want {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if labels[a] != labels[b] {
                impostor.insert((a.min(b), a.max(b)));
            }
        }
    }
    (genuine, impostor.into_iter().collect())
}

pub fn score_pairs(emb: &Embeddings, seed: u64) -> ScoreSet {
    let (genuine, impostor) = verification_pairs(&emb.labels, seed);
    let score = |&(i, j): &(usize, usize)| cosine(&emb.vectors[i], &emb.vectors[j]);
    ScoreSet {
        genuine: genuine.iter().map(score).collect(),
        impostor: impostor.iter().map(score).collect(),
    }
}

/// Degrade (when requested) and embed each sample, in input order.
pub fn embed_samples(
    model: &ModelState<f32>,
    samples: &[Sample],
    spec: &DegradeSpec,
    seed: u64,
) -> Result<Embeddings, EvalError> {
    let vectors = samples
        .par_iter()
        .enumerate()
        .map(|(k, s)| -> Result<Vec<f32>, EvalError> {
            let mut rng = seeds::rng(seed, &[seeds::TAG_DEGRADE, k as u64]);
            let img = degrade_with_rng(&s.image, spec, &mut rng)?;
            Ok(model.embed(&img)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Embeddings {
        vectors,
        labels: samples.iter().map(|s| s.identity).collect(),
    })
}

/// Embeddings of the manifest's test split.
pub fn embed_gallery(
    model: &ModelState<f32>,
    manifest: &DatasetManifest,
    spec: &DegradeSpec,
) -> Result<Embeddings, EvalError> {
    let test = manifest.load_split(Split::Test)?;
    embed_samples(model, &test, spec, manifest.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub degrade: String,
    pub tar_at_far: Vec<TarResult>,
    pub rank_k: Vec<RankEntry>,
    pub probes: usize,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    /// SHA-256 of the model parameters.
    pub model_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.rank_k.iter().find(|r| r.k == k).map(|r| r.accuracy)
    }

    pub fn tar(&self, far: f64) -> Option<f64> {
        self.tar_at_far.iter().find(|t| t.far == far).map(|t| t.tar)
    }

    /// `(metric, value)` rows such as `("rank1", 0.8)` and `("tar@far=0.1", 0.6)`.
    pub fn metric_rows(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self
            .rank_k
            .iter()
            .map(|r| (format!("rank{}", r.k), r.accuracy))
            .collect();
        rows.extend(self.tar_at_far.iter().map(|t| (format!("tar@far={}", t.far), t.tar)));
        rows
    }
}

/// Leave-one-out rank-k within `samples` and TAR@FAR over the pair protocol.
/// TAR is left out when the split yields no genuine or no impostor pairs.
pub fn evaluate_samples(
    model: &ModelState<f32>,
    samples: &[Sample],
    spec: &DegradeSpec,
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    let emb = embed_samples(model, samples, spec, seed)?;
    let ranks = match_ranks(&emb, &emb, true)?;
    let scores = score_pairs(&emb, seed);
    let tar_at_far = if scores.genuine.is_empty() || scores.impostor.is_empty() {
        log::warn!(
            "{} genuine / {} impostor pairs: TAR@FAR not reported",
            scores.genuine.len(),
            scores.impostor.len()
        );
        Vec::new()
    } else {
        FAR_TARGETS
            .iter()
            .map(|&f| tar_at_far(&scores, f))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(MetricsReport {
        degrade: spec.label(),
        tar_at_far,
        rank_k: RANKS
            .iter()
            .map(|&k| RankEntry {
                k,
                accuracy: accuracy_at(&ranks, k),
            })
            .collect(),
        probes: emb.len(),
        genuine_pairs: scores.genuine.len(),
        impostor_pairs: scores.impostor.len(),
        model_hash: model.hash(),
        seed,
    })
}

pub fn evaluate(
    model: &ModelState<f32>,
    manifest: &DatasetManifest,
    spec: &DegradeSpec,
) -> Result<MetricsReport, EvalError> {
    let test = manifest.load_split(Split::Test)?;
    evaluate_samples(model, &test, spec, manifest.seed)
}

/// One `(mode, seed, degrade, metric, value)` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub mode: String,
    pub seed: u64,
    pub degrade: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: String,
    pub degrade: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
    pub summary: Vec<SummaryRow>,
}

impl ComparisonTable {
    pub fn from_rows(rows: Vec<TableRow>) -> Self {
        let mut keys: Vec<(String, String, String)> = Vec::new();
        for r in &rows {
            let key = (r.mode.clone(), r.degrade.clone(), r.metric.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let summary = keys
            .into_iter()
            .map(|(mode, degrade, metric)| {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.mode == mode && r.degrade == degrade && r.metric == metric)
                    .map(|r| r.value)
                    .collect();
                let n = vals.len();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = if n > 1 {
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
                } else {
                    0.0
                };
                SummaryRow {
                    mode,
                    degrade,
                    metric,
                    mean,
                    std: var.sqrt(),
                    n,
                }
            })
            .collect();
        Self { rows, summary }
    }

    pub fn mean(&self, mode: &str, degrade: &str, metric: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.mode == mode && s.degrade == degrade && s.metric == metric)
            .map(|s| s.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,seed,degrade,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.mode, r.seed, r.degrade, r.metric, r.value
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("mode,degrade,metric,mean,std,n\n");
        for s in &self.summary {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.mode, s.degrade, s.metric, s.mean, s.std, s.n
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let files = [
            ("ablation.csv", self.to_csv()),
            ("ablation_summary.csv", self.summary_csv()),
            (
                "ablation.json",
                serde_json::to_string_pretty(self).expect("table serializes") + "\n",
            ),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| DataError::io(&p, e))?;
        }
        Ok(())
    }
}

/// Train every `(mode, seed)` with `train_fn` and evaluate at each level.
///
/// `train_fn` receives the mode label and seed and returns the trained model,
/// which keeps this protocol independent of the trainer's configuration.
pub fn ablation_run<F>(
    test: &[Sample],
    modes: &[String],
    seeds_list: &[u64],
    specs: &[DegradeSpec],
    eval_seed: u64,
    mut train_fn: F,
) -> Result<ComparisonTable, EvalError>
where
    F: FnMut(&str, u64) -> Result<ModelState<f32>, EvalError>,
{
    if seeds_list.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let mut rows = Vec::new();
    for mode in modes {
        for &seed in seeds_list {
            let model = train_fn(mode, seed)?;
            for spec in specs {
                let report = evaluate_samples(&model, test, spec, eval_seed)?;
                for (metric, value) in report.metric_rows() {
                    rows.push(TableRow {
                        mode: mode.clone(),
                        seed,
                        degrade: spec.label(),
                        metric,
                        value,
                    });
                }
            }
        }
    }
    Ok(ComparisonTable::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_unit;

    fn emb(vs: Vec<Vec<f32>>, labels: Vec<usize>) -> Embeddings {
        Embeddings { vectors: vs, labels }
    }

    #[test]
    fn tar_example() {
        let s = ScoreSet {
            genuine: vec![0.9, 0.8, 0.7, 0.2],
            impostor: vec![0.85, 0.5, 0.4, 0.1],
        };
        let r = tar_at_far(&s, 0.25).unwrap();
        assert_eq!(r.tar, 0.75);
        assert_eq!(r.realized_far, 0.25);
        assert!(!r.unreachable);
    }

    #[test]
    fn perfect_separation() {
        let s = ScoreSet {
            genuine: vec![0.9, 0.95],
            impostor: vec![0.1, 0.2, 0.3],
        };
        for far in [0.01, 0.34, 1.0] {
            assert_eq!(tar_at_far(&s, far).unwrap().tar, 1.0);
        }
    }

    #[test]
    fn identical_distributions() {
        let v: Vec<f64> = (0..20).map(|k| k as f64 / 20.0).collect();
        let s = ScoreSet {
            genuine: v.clone(),
            impostor: v,
        };
        for k in 1..=20 {
            let far = k as f64 / 20.0;
            assert_eq!(tar_at_far(&s, far).unwrap().tar, far);
        }
    }

    #[test]
    fn unreachable_far_flagged() {
        let s = ScoreSet {
            genuine: vec![0.5],
            impostor: vec![0.1, 0.6],
        };
        let r = tar_at_far(&s, 0.1).unwrap();
        assert!(r.unreachable);
        assert_eq!(r.attainable_far, 0.5);
        assert_eq!(r.realized_far, 0.0);
        assert!(tar_at_far(&s, 0.0).is_err());
        assert!(tar_at_far(&ScoreSet::default(), 0.1).is_err());
    }

    #[test]
    fn rank_examples() {
        let g = emb(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]], vec![1, 2, 3]);
        let p = emb(vec![vec![0.0, 1.0]], vec![2]);
        assert_eq!(rank_k(&p, &g, 1, false).unwrap(), 1.0);
        let far = emb(vec![vec![1.0, 0.0]], vec![3]);
        assert_eq!(rank_k(&far, &g, 1, false).unwrap(), 0.0);
        assert_eq!(rank_k(&far, &g, 2, false).unwrap(), 1.0);
        assert_eq!(rank_k(&far, &g, 3, false).unwrap(), 1.0);
        assert!(rank_k(&p, &Embeddings::default(), 1, false).is_err());
    }

    #[test]
    fn self_excluded_within_set() {
        let e = emb(vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]], vec![1, 2, 1]);
        // Without exclusion probe 0 matches itself.
        assert_eq!(rank_k(&e, &e, 1, false).unwrap(), 1.0);
        let ranks = match_ranks(&e, &e, true).unwrap();
        assert_eq!(ranks[0], Some(1));
        assert_eq!(ranks[1], None);
    }

    #[test]
    fn rank_monotone_in_k() {
        let mut rng = seeds::rng(4, &[]);
        let vs: Vec<Vec<f32>> = (0..30)
            .map(|_| random_unit(&mut rng, 8).into_iter().map(|v| v as f32).collect())
            .collect();
        let e = emb(vs, (0..30).map(|k| k % 6 + 1).collect());
        let mut last = 0.0;
        for k in 1..30 {
            let a = rank_k(&e, &e, k, true).unwrap();
            assert!(a >= last);
            last = a;
        }
    }

    #[test]
    fn pair_protocol_counts() {
        let labels = vec![1, 1, 2, 2, 3, 3, 3];
        let (g, i) = verification_pairs(&labels, 1);
        assert_eq!(g.len(), 1 + 1 + 3);
        assert_eq!(i.len(), g.len());
        assert!(i.iter().all(|&(a, b)| labels[a] != labels[b] && a < b));
        assert_eq!(verification_pairs(&labels, 1), (g, i));
    }

    #[test]
    fn table_summary_statistics() {
        let rows = vec![
            TableRow {
                mode: "darface".into(),
                seed: 1,
                degrade: "8".into(),
                metric: "rank1".into(),
                value: 0.5,
            },
            TableRow {
                mode: "darface".into(),
                seed: 2,
                degrade: "8".into(),
                metric: "rank1".into(),
                value: 0.7,
            },
        ];
        let t = ComparisonTable::from_rows(rows);
        assert_eq!(t.summary.len(), 1);
        assert!((t.mean("darface", "8", "rank1").unwrap() - 0.6).abs() < 1e-12);
        assert!((t.summary[0].std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(t.to_csv().starts_with("mode,seed,degrade,metric,value\n"));
    }
}
