//! Transfer-task evaluation: retrieval (mAP, P@k), clustering (centroid
//! linkage scored by AMI, ARI, V-measure) and NCM classification, run over
//! repeated random half splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, squared_distance, Matrix};
use crate::predict::{ncm_fit, ncm_predict};
use crate::{Error, Result};

pub const DEFAULT_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// Sorted sample indices.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub splits: Vec<Split>,
}

impl SplitPlan {
    /// `repeats` random halves of `0..n`. Repeat `r` shuffles with seed
    /// `seed + r`; train gets `n / 2` samples, test the rest.
    pub fn new(n: usize, repeats: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("need at least 2 samples to split"));
        }
        if repeats == 0 {
            return Err(Error::invalid("repeats must be positive"));
        }
        let splits = (0..repeats)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                let (a, b) = order.split_at(n / 2);
                let mut train = a.to_vec();
                let mut test = b.to_vec();
                train.sort_unstable();
                test.sort_unstable();
                Split { train, test }
            })
            .collect();
        Ok(SplitPlan { seed, splits })
    }
}

/// Gallery indices by descending dot product with `query`; ties keep
/// ascending index order.
pub fn rank_gallery(query: &[f64], gallery: &Matrix) -> Result<Vec<usize>> {
    if gallery.rows() == 0 {
        return Err(Error::invalid("empty gallery"));
    }
    if query.len() != gallery.cols() {
        return Err(Error::DimensionMismatch {
            expected: gallery.cols(),
            found: query.len(),
        });
    }
    let scores: Vec<f64> = gallery.iter_rows().map(|g| dot(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}

/// Mean of precision@k over the ranks k of relevant items. `None` when
/// nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Fraction of the first `k` items that are relevant (fewer if the list is
/// shorter).
pub fn precision_at(relevance: &[bool], k: usize) -> f64 {
    let k = k.min(relevance.len());
    if k == 0 {
        return 0.0;
    }
    relevance[..k].iter().filter(|&&r| r).count() as f64 / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub map: f64,
    pub p_at_1: f64,
    pub p_at_5: f64,
    /// Queries that had at least one relevant gallery item; only these enter
    /// the mAP.
    pub scored_queries: usize,
}

/// Every test row queries the train rows; same label means relevant.
/// P@k averages over all queries, mAP over queries with a relevant item.
pub fn retrieval_eval(test: &Matrix, test_labels: &[usize], train: &Matrix, train_labels: &[usize]) -> Result<RetrievalScores> {
    check_labels(test, test_labels)?;
    check_labels(train, train_labels)?;
    if test.rows() == 0 {
        return Err(Error::invalid("no queries"));
    }
    let per_query: Vec<(Option<f64>, f64, f64)> = (0..test.rows())
        .into_par_iter()
        .map(|q| {
            let order = rank_gallery(test.row(q), train)?;
            let rel: Vec<bool> = order.iter().map(|&g| train_labels[g] == test_labels[q]).collect();
            Ok((average_precision(&rel), precision_at(&rel, 1), precision_at(&rel, 5)))
        })
        .collect::<Result<_>>()?;
    let aps: Vec<f64> = per_query.iter().filter_map(|p| p.0).collect();
    let n = per_query.len() as f64;
    Ok(RetrievalScores {
        map: if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 },
        p_at_1: per_query.iter().map(|p| p.1).sum::<f64>() / n,
        p_at_5: per_query.iter().map(|p| p.2).sum::<f64>() / n,
        scored_queries: aps.len(),
    })
}

fn check_labels(features: &Matrix, labels: &[usize]) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            found: labels.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster ids `0..k`, numbered by first appearance.
    pub labels: Vec<usize>,
    /// Merges whose distance was below the previous merge distance.
    pub inversions: usize,
}

/// Agglomerative clustering with centroid linkage on squared Euclidean
/// distances, updated by the Lance–Williams recurrence. The closest pair
/// merges first; ties go to the lexicographically smallest (i, j), where a
/// merged cluster keeps the smaller id.
pub fn centroid_linkage_cluster(features: &Matrix, k: usize) -> Result<Clustering> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::invalid("cluster count must be positive"));
    }
    if k > n {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} samples")));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(features.row(i), features.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut owner: Vec<usize> = (0..n).collect();
    let mut inversions = 0;
    let mut last = f64::NEG_INFINITY;
    while active.len() > k {
        let mut best = (f64::INFINITY, 0, 0);
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                let d = dist[i * n + j];
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (dij, i, j) = best;
        if dij < last {
            inversions += 1;
        }
        last = dij;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        let s = ni + nj;
        for &m in &active {
            if m == i || m == j {
                continue;
            }
            let d = ni / s * dist[m * n + i] + nj / s * dist[m * n + j] - ni * nj / (s * s) * dij;
            dist[m * n + i] = d;
            dist[i * n + m] = d;
        }
        size[i] += size[j];
        active.retain(|&m| m != j);
        owner.iter_mut().filter(|o| **o == j).for_each(|o| *o = i);
    }
    let mut relabel = BTreeMap::new();
    let labels = owner
        .iter()
        .map(|o| {
            let next = relabel.len();
            *relabel.entry(*o).or_insert(next)
        })
        .collect();
    Ok(Clustering { labels, inversions })
}

/// Counts `n_ij` of samples with true class `i` and cluster `j`, with both
/// label sets mapped to dense indices in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub total: u64,
}

impl ContingencyTable {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                found: b.len(),
            });
        }
        if a.is_empty() {
            return Err(Error::invalid("empty labelings"));
        }
        let dense = |v: &[usize]| {
            let mut ids = v.to_vec();
            ids.sort_unstable();
            ids.dedup();
            let idx: Vec<usize> = v.iter().map(|x| ids.binary_search(x).unwrap()).collect();
            (ids.len(), idx)
        };
        let (ra, ia) = dense(a);
        let (rb, ib) = dense(b);
        let mut counts = vec![vec![0u64; rb]; ra];
        for (&x, &y) in ia.iter().zip(&ib) {
            counts[x][y] += 1;
        }
        Ok(Self::from_counts(counts))
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let row_sums: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
        let cols = counts.first().map_or(0, |r| r.len());
        let col_sums: Vec<u64> = (0..cols).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        let total = row_sums.iter().sum();
        ContingencyTable {
            counts,
            row_sums,
            col_sums,
            total,
        }
    }

    /// True when both labelings induce the same partition.
    pub fn is_identity(&self) -> bool {
        self.row_sums.len() == self.col_sums.len()
            && self.counts.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1)
            && (0..self.col_sums.len()).all(|j| self.counts.iter().filter(|r| r[j] > 0).count() == 1)
    }

    fn entropy(marginal: &[u64], n: u64) -> f64 {
        let n = n as f64;
        marginal
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }

    pub fn entropy_rows(&self) -> f64 {
        Self::entropy(&self.row_sums, self.total)
    }

    pub fn entropy_cols(&self) -> f64 {
        Self::entropy(&self.col_sums, self.total)
    }

    /// Mutual information in nats.
    pub fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let mut mi = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    let c = c as f64;
                    mi += c / n * (n * c / (self.row_sums[i] as f64 * self.col_sums[j] as f64)).ln();
                }
            }
        }
        mi
    }

    /// Expected mutual information under the hypergeometric model of random
    /// labelings with these marginals.
    pub fn expected_mutual_information(&self) -> f64 {
        let n = self.total as usize;
        let mut ln_fact = vec![0.0f64; n + 1];
        for k in 1..=n {
            ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
        }
        let nf = n as f64;
        let mut emi = 0.0;
        for &a in &self.row_sums {
            for &b in &self.col_sums {
                let (a, b) = (a as usize, b as usize);
                let lo = (a + b).saturating_sub(n).max(1);
                let hi = a.min(b);
                let fixed = ln_fact[a] + ln_fact[b] + ln_fact[n - a] + ln_fact[n - b] - ln_fact[n];
                for nij in lo..=hi {
                    let ln_p = fixed - ln_fact[nij] - ln_fact[a - nij] - ln_fact[b - nij] - ln_fact[n + nij - a - b];
                    let x = nij as f64;
                    emi += x / nf * (nf * x / (a as f64 * b as f64)).ln() * ln_p.exp();
                }
            }
        }
        emi
    }
}

/// Adjusted mutual information with the `max(H(a), H(b))` normalizer.
pub fn ami(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(a, b)?;
    if t.is_identity() {
        return Ok(1.0);
    }
    let emi = t.expected_mutual_information();
    let denom = t.entropy_rows().max(t.entropy_cols()) - emi;
    if denom.abs() < 1e-15 {
        return Ok(0.0);
    }
    Ok((t.mutual_information() - emi) / denom)
}

fn pairs(c: u64) -> f64 {
    let c = c as f64;
    c * (c - 1.0) / 2.0
}

/// Adjusted Rand index.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(a, b)?;
    if t.is_identity() {
        return Ok(1.0);
    }
    let index: f64 = t.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let sa: f64 = t.row_sums.iter().map(|&c| pairs(c)).sum();
    let sb: f64 = t.col_sums.iter().map(|&c| pairs(c)).sum();
    let expected = sa * sb / pairs(t.total);
    let max = (sa + sb) / 2.0;
    if (max - expected).abs() < 1e-15 {
        return Ok(0.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Harmonic mean of homogeneity and completeness, with `a` the true classes
/// and `b` the clusters.
pub fn v_measure(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(a, b)?;
    if t.is_identity() {
        return Ok(1.0);
    }
    let (ha, hb) = (t.entropy_rows(), t.entropy_cols());
    if ha <= 0.0 || hb <= 0.0 {
        return Ok(0.0);
    }
    let mi = t.mutual_information();
    // H(a|b) = H(a) − MI, so h = MI / H(a) and c = MI / H(b).
    let h = mi / ha;
    let c = mi / hb;
    if h + c <= 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * h * c / (h + c))
}

/// NCM accuracy: centroids from `train`, fraction of `test` rows assigned
/// their own label.
pub fn ncm_task_eval(train: &Matrix, train_labels: &[usize], test: &Matrix, test_labels: &[usize]) -> Result<f64> {
    check_labels(test, test_labels)?;
    if test.rows() == 0 {
        return Err(Error::invalid("empty test set"));
    }
    let model = ncm_fit(train, train_labels)?;
    let mut correct = 0usize;
    for (x, &y) in test.iter_rows().zip(test_labels) {
        correct += usize::from(ncm_predict(x, &model)? == y);
    }
    Ok(correct as f64 / test.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Retrieval,
    Cluster,
    Ncm,
}

impl Task {
    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "retrieval" => Some(Task::Retrieval),
            "cluster" => Some(Task::Cluster),
            "ncm" => Some(Task::Ncm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_inversions: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single split.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub splits: Vec<SplitResult>,
    pub summary: BTreeMap<String, MeanStd>,
}

/// Runs the selected tasks on every split of a fresh [`SplitPlan`]. Retrieval
/// queries the train half with the test half, clustering groups the test
/// half into as many clusters as it has classes, and NCM fits on train and
/// scores test.
pub fn run_protocol(features: &Matrix, labels: &[usize], tasks: &[Task], repeats: usize, seed: u64) -> Result<Report> {
    check_labels(features, labels)?;
    let plan = SplitPlan::new(features.rows(), repeats, seed)?;
    let splits = plan
        .splits
        .par_iter()
        .enumerate()
        .map(|(s, split)| run_split(s, split, features, labels, tasks))
        .collect::<Result<Vec<_>>>()?;
    let mut summary = BTreeMap::new();
    for name in splits[0].metrics.keys() {
        let values: Vec<f64> = splits.iter().map(|r| r.metrics[name]).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        summary.insert(name.clone(), MeanStd { mean, std });
    }
    Ok(Report { seed, splits, summary })
}

fn run_split(index: usize, split: &Split, features: &Matrix, labels: &[usize], tasks: &[Task]) -> Result<SplitResult> {
    let train = features.select_rows(&split.train);
    let test = features.select_rows(&split.test);
    let train_labels: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let test_labels: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();
    let mut metrics = BTreeMap::new();
    let mut cluster_inversions = None;
    let mut tasks = tasks.to_vec();
    tasks.sort();
    tasks.dedup();
    for task in tasks {
        match task {
            Task::Retrieval => {
                let r = retrieval_eval(&test, &test_labels, &train, &train_labels)?;
                metrics.insert("retrieval.map".into(), r.map);
                metrics.insert("retrieval.p@1".into(), r.p_at_1);
                metrics.insert("retrieval.p@5".into(), r.p_at_5);
            }
            Task::Cluster => {
                let mut classes = test_labels.clone();
                classes.sort_unstable();
                classes.dedup();
                let c = centroid_linkage_cluster(&test, classes.len())?;
                metrics.insert("cluster.ami".into(), ami(&test_labels, &c.labels)?);
                metrics.insert("cluster.ari".into(), ari(&test_labels, &c.labels)?);
                metrics.insert("cluster.v_measure".into(), v_measure(&test_labels, &c.labels)?);
                cluster_inversions = Some(c.inversions);
            }
            Task::Ncm => {
                let acc = ncm_task_eval(&train, &train_labels, &test, &test_labels)?;
                metrics.insert("ncm.accuracy".into(), acc);
            }
        }
    }
    Ok(SplitResult {
        split: index,
        metrics,
        cluster_inversions,
    })
}

impl Report {
    /// One JSON object per split, then one summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.splits {
            out.push_str(&serde_json::to_string(s).expect("report serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({ "seed": self.seed, "summary": self.summary });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Text table with one row per metric and one column per feature, cells as
/// `mean ± std` in percent.
pub fn format_table(columns: &[(&str, &Report)]) -> String {
    let mut metrics: Vec<&String> = columns.iter().flat_map(|(_, r)| r.summary.keys()).collect();
    metrics.sort();
    metrics.dedup();
    let width = metrics.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:width$}", "metric");
    for (name, _) in columns {
        let _ = write!(out, " | {name:>15}");
    }
    out.push('\n');
    for m in metrics {
        let _ = write!(out, "{m:width$}");
        for (_, r) in columns {
            match r.summary.get(m) {
                Some(v) => {
                    let cell = format!("{:.1} ± {:.1}", 100.0 * v.mean, 100.0 * v.std);
                    let _ = write!(out, " | {cell:>15}");
                }
                None => {
                    let _ = write!(out, " | {:>15}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
