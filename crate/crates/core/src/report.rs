//! Evaluation report over several labelings of one corpus: pairwise
//! bucket-level agreement, participant-level score agreement, bucket-count
//! and size-distribution summaries, and validity correlations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bucketer::BucketAssignment;
use crate::corpus::{ExternalMeasures, TaskCorpus};
use crate::distfit::{fit_powerlaw, PowerLawFit};
use crate::error::{Error, Result};
use crate::psychometrics::{
    align_labelings, clustering_agreement, mean_ci, pearson, score_agreement, spearman, ClusteringAgreement,
    Correlation, MeanCi, ScoreAgreement,
};
use crate::scoring::{score_dataset, Metric, ParticipantScore};

/// One labeling of every task in the corpus.
#[derive(Clone, Debug)]
pub struct NamedLabeling {
    pub name: String,
    pub assignments: Vec<BucketAssignment>,
}

/// Participant scores supplied directly rather than derived from a labeling.
#[derive(Clone, Debug)]
pub struct NamedScores {
    pub name: String,
    pub scores: Vec<ParticipantScore>,
}

#[derive(Clone, Debug)]
pub struct ReportOptions {
    /// Use fluency-normalized totals; raw sums otherwise.
    pub normalized: bool,
    /// Measures whose validity correlation is read as Spearman.
    pub spearman_measures: BTreeSet<String>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            normalized: true,
            spearman_measures: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: String,
    pub ideas: usize,
    pub bucket_count: usize,
    /// `(bucket size, number of buckets)` pairs, ascending by size.
    pub size_counts: Vec<(u64, usize)>,
    pub powerlaw: Option<PowerLawFit>,
    pub powerlaw_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelingSummary {
    pub name: String,
    pub tasks: Vec<TaskSummary>,
    pub bucket_count: MeanCi,
    /// Mean of per-task exponents, when at least one task could be fitted.
    pub alpha: Option<MeanCi>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSummary {
    pub ami: MeanCi,
    pub nmi: MeanCi,
    pub v_measure: MeanCi,
    pub homogeneity: MeanCi,
    pub completeness: MeanCi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringPair {
    pub a: String,
    pub b: String,
    pub tasks: Vec<(String, ClusteringAgreement)>,
    pub mean: ClusteringSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricAgreement {
    pub metric: Metric,
    pub agreement: Option<ScoreAgreement>,
    pub error: Option<String>,
    /// `(mean, difference)` per participant, for Bland–Altman plots.
    pub bland_altman_points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub a: String,
    pub b: String,
    pub participants: usize,
    pub metrics: Vec<MetricAgreement>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    Pearson,
    Spearman,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidityRow {
    pub scorer: String,
    pub metric: Metric,
    pub measure: String,
    pub n: usize,
    pub pearson: Option<Correlation>,
    pub spearman: Option<Correlation>,
    pub preferred: CorrelationKind,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub normalized_scores: bool,
    pub labelings: Vec<LabelingSummary>,
    pub clustering: Vec<ClusteringPair>,
    pub scores: Vec<ScorePair>,
    pub validity: Vec<ValidityRow>,
}

fn task_summary(a: &BucketAssignment) -> TaskSummary {
    let sizes = a.bucket_sizes();
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for s in &sizes {
        *counts.entry(*s).or_default() += 1;
    }
    let (powerlaw, powerlaw_error) = match fit_powerlaw(&sizes) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    TaskSummary {
        task_id: a.task_id.clone(),
        ideas: a.len(),
        bucket_count: a.bucket_count,
        size_counts: counts.into_iter().collect(),
        powerlaw,
        powerlaw_error,
    }
}

fn ordered<'a>(corpus: &[TaskCorpus], l: &'a NamedLabeling) -> Result<Vec<&'a BucketAssignment>> {
    let by_task: HashMap<&str, &BucketAssignment> = l.assignments.iter().map(|a| (a.task_id.as_str(), a)).collect();
    let missing: Vec<String> = corpus
        .iter()
        .filter(|t| !by_task.contains_key(t.task_id.as_str()))
        .map(|t| t.task_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage {
            message: format!("labeling {} lacks tasks", l.name),
            keys: missing,
        });
    }
    let out: Vec<&BucketAssignment> = corpus.iter().map(|t| by_task[t.task_id.as_str()]).collect();
    for (a, t) in out.iter().zip(corpus) {
        a.validate_against(t)?;
    }
    Ok(out)
}

fn summarize(values: impl Iterator<Item = f64>) -> Result<MeanCi> {
    mean_ci(&values.collect::<Vec<_>>())
}

fn clustering_pair(corpus: &[TaskCorpus], a: &NamedLabeling, b: &NamedLabeling) -> Result<ClusteringPair> {
    let (la, lb) = (ordered(corpus, a)?, ordered(corpus, b)?);
    let mut tasks = Vec::with_capacity(corpus.len());
    for (x, y) in la.iter().zip(&lb) {
        let (u, v) = align_labelings(x, y)?;
        tasks.push((x.task_id.clone(), clustering_agreement(&u, &v)?));
    }
    let col = |f: fn(&ClusteringAgreement) -> f64| summarize(tasks.iter().map(|(_, c)| f(c)));
    Ok(ClusteringPair {
        a: a.name.clone(),
        b: b.name.clone(),
        mean: ClusteringSummary {
            ami: col(|c| c.ami)?,
            nmi: col(|c| c.nmi)?,
            v_measure: col(|c| c.v_measure)?,
            homogeneity: col(|c| c.homogeneity)?,
            completeness: col(|c| c.completeness)?,
        },
        tasks,
    })
}

fn totals(scores: &[ParticipantScore], metric: Metric, normalized: bool) -> BTreeMap<&str, f64> {
    scores
        .iter()
        .map(|s| (s.participant_id.as_str(), s.total(metric, normalized)))
        .collect()
}

/// Participant-level agreement of two score sets over the same participants.
pub fn compare_scores(a: &NamedScores, b: &NamedScores, normalized: bool) -> Result<ScorePair> {
    let ids_a: BTreeSet<&str> = a.scores.iter().map(|s| s.participant_id.as_str()).collect();
    let ids_b: BTreeSet<&str> = b.scores.iter().map(|s| s.participant_id.as_str()).collect();
    if ids_a != ids_b {
        return Err(Error::Coverage {
            message: format!("scores {} and {} cover different participants", a.name, b.name),
            keys: ids_a.symmetric_difference(&ids_b).map(|s| s.to_string()).collect(),
        });
    }
    let metrics = Metric::ALL
        .iter()
        .map(|&metric| {
            let (ta, tb) = (
                totals(&a.scores, metric, normalized),
                totals(&b.scores, metric, normalized),
            );
            let x: Vec<f64> = ta.values().copied().collect();
            let y: Vec<f64> = tb.values().copied().collect();
            let points = x.iter().zip(&y).map(|(p, q)| (0.5 * (p + q), p - q)).collect();
            let (agreement, error) = match score_agreement(&x, &y) {
                Ok(s) => (Some(s), None),
                Err(e) => (None, Some(e.to_string())),
            };
            MetricAgreement {
                metric,
                agreement,
                error,
                bland_altman_points: points,
            }
        })
        .collect();
    Ok(ScorePair {
        a: a.name.clone(),
        b: b.name.clone(),
        participants: ids_a.len(),
        metrics,
    })
}

fn validity(scorer: &NamedScores, measure: &ExternalMeasures, options: &ReportOptions) -> Vec<ValidityRow> {
    let preferred = if options.spearman_measures.contains(&measure.measure_name) {
        CorrelationKind::Spearman
    } else {
        CorrelationKind::Pearson
    };
    Metric::ALL
        .iter()
        .map(|&metric| {
            let t = totals(&scorer.scores, metric, options.normalized);
            let (x, y): (Vec<f64>, Vec<f64>) = t
                .iter()
                .filter_map(|(p, s)| measure.values.get(*p).map(|m| (*s, *m)))
                .unzip();
            let p = pearson(&x, &y);
            let s = spearman(&x, &y);
            let error = p.as_ref().err().or(s.as_ref().err()).map(|e| e.to_string());
            ValidityRow {
                scorer: scorer.name.clone(),
                metric,
                measure: measure.measure_name.clone(),
                n: x.len(),
                pearson: p.ok(),
                spearman: s.ok(),
                preferred,
                error,
            }
        })
        .collect()
}

/// Computes every statistic across all pairs of labelings and score sets.
/// Labelings are also scored, so they join the score comparisons under
/// their own names.
pub fn build_report(
    corpus: &[TaskCorpus],
    labelings: &[NamedLabeling],
    extra_scores: &[NamedScores],
    measures: &[ExternalMeasures],
    options: &ReportOptions,
) -> Result<AgreementReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let mut summaries = Vec::new();
    let mut scorers: Vec<NamedScores> = Vec::new();
    for l in labelings {
        let assignments = ordered(corpus, l)?;
        let tasks: Vec<TaskSummary> = assignments.iter().map(|a| task_summary(a)).collect();
        let alphas: Vec<f64> = tasks.iter().filter_map(|t| t.powerlaw.map(|f| f.alpha)).collect();
        summaries.push(LabelingSummary {
            name: l.name.clone(),
            bucket_count: summarize(tasks.iter().map(|t| t.bucket_count as f64))?,
            alpha: if alphas.is_empty() {
                None
            } else {
                Some(mean_ci(&alphas)?)
            },
            tasks,
        });
        let owned: Vec<BucketAssignment> = assignments.into_iter().cloned().collect();
        scorers.push(NamedScores {
            name: l.name.clone(),
            scores: score_dataset(corpus, &owned)?,
        });
    }
    scorers.extend(extra_scores.iter().cloned());

    let mut clustering = Vec::new();
    for (i, a) in labelings.iter().enumerate() {
        for b in &labelings[i + 1..] {
            clustering.push(clustering_pair(corpus, a, b)?);
        }
    }
    let mut scores = Vec::new();
    for (i, a) in scorers.iter().enumerate() {
        for b in &scorers[i + 1..] {
            scores.push(compare_scores(a, b, options.normalized)?);
        }
    }
    let validity = scorers
        .iter()
        .flat_map(|s| measures.iter().flat_map(move |m| validity(s, m, options)))
        .collect();

    Ok(AgreementReport {
        config_hash: None,
        normalized_scores: options.normalized,
        labelings: summaries,
        clustering,
        scores,
        validity,
    })
}

fn fmt_ci(m: &MeanCi) -> String {
    match m.ci {
        Some((lo, hi)) => format!("{:.3} [{:.3}, {:.3}]", m.mean, lo, hi),
        None => format!("{:.3}", m.mean),
    }
}

fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

fn fmt_corr(c: &Option<Correlation>) -> String {
    match c {
        Some(c) => format!("{:.3} [{:.3}, {:.3}] p={}", c.r, c.ci_low, c.ci_high, fmt_p(c.p)),
        None => "n/a".into(),
    }
}

impl AgreementReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Agreement report\n");

        let _ = writeln!(out, "## Buckets per task\n");
        let _ = writeln!(
            out,
            "| labeling | buckets (mean, 95% CI) | power-law alpha (mean, 95% CI) |"
        );
        let _ = writeln!(out, "|---|---|---|");
        for l in &self.labelings {
            let alpha = l.alpha.as_ref().map_or("n/a".into(), fmt_ci);
            let _ = writeln!(out, "| {} | {} | {} |", l.name, fmt_ci(&l.bucket_count), alpha);
        }
        let _ = writeln!(
            out,
            "\n| labeling | task | ideas | buckets | alpha | xmin | LR vs lognormal | p |"
        );
        let _ = writeln!(out, "|---|---|---|---|---|---|---|---|");
        for l in &self.labelings {
            for t in &l.tasks {
                match &t.powerlaw {
                    Some(f) => {
                        let _ = writeln!(
                            out,
                            "| {} | {} | {} | {} | {:.3} | {} | {:.3} | {} |",
                            l.name,
                            t.task_id,
                            t.ideas,
                            t.bucket_count,
                            f.alpha,
                            f.xmin,
                            f.lr_vs_lognormal,
                            fmt_p(f.lr_p)
                        );
                    }
                    None => {
                        let _ = writeln!(
                            out,
                            "| {} | {} | {} | {} | n/a | | | |",
                            l.name, t.task_id, t.ideas, t.bucket_count
                        );
                    }
                }
            }
        }

        if !self.clustering.is_empty() {
            let _ = writeln!(out, "\n## Bucket-level agreement\n");
            let _ = writeln!(out, "| pair | AMI | NMI | V-measure | homogeneity | completeness |");
            let _ = writeln!(out, "|---|---|---|---|---|---|");
            for p in &self.clustering {
                let m = &p.mean;
                let _ = writeln!(
                    out,
                    "| {} vs {} | {} | {} | {} | {} | {} |",
                    p.a,
                    p.b,
                    fmt_ci(&m.ami),
                    fmt_ci(&m.nmi),
                    fmt_ci(&m.v_measure),
                    fmt_ci(&m.homogeneity),
                    fmt_ci(&m.completeness)
                );
            }
        }

        if !self.scores.is_empty() {
            let kind = if self.normalized_scores { "normalized" } else { "raw" };
            let _ = writeln!(out, "\n## Participant-level agreement ({kind} totals)\n");
            let _ = writeln!(
                out,
                "| pair | metric | Pearson r | Spearman rho | ICC(3,1) | ICC(3,k) | bias | LoA | within LoA |"
            );
            let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|");
            for p in &self.scores {
                for m in &p.metrics {
                    match &m.agreement {
                        Some(s) => {
                            let ba = &s.bland_altman;
                            let _ = writeln!(
                                out,
                                "| {} vs {} | {} | {} | {} | {:.3} [{:.3}, {:.3}] | {:.3} [{:.3}, {:.3}] | {:.3} | [{:.3}, {:.3}] | {:.1}% |",
                                p.a,
                                p.b,
                                m.metric,
                                fmt_corr(&Some(s.pearson)),
                                fmt_corr(&Some(s.spearman)),
                                s.icc.icc31,
                                s.icc.icc31_ci.0,
                                s.icc.icc31_ci.1,
                                s.icc.icc3k,
                                s.icc.icc3k_ci.0,
                                s.icc.icc3k_ci.1,
                                ba.bias,
                                ba.loa_low,
                                ba.loa_high,
                                ba.pct_within
                            );
                        }
                        None => {
                            let _ = writeln!(
                                out,
                                "| {} vs {} | {} | {} | | | | | | |",
                                p.a,
                                p.b,
                                m.metric,
                                m.error.as_deref().unwrap_or("n/a")
                            );
                        }
                    }
                }
            }
        }

        if !self.validity.is_empty() {
            let _ = writeln!(out, "\n## Validity correlations\n");
            let _ = writeln!(out, "Preferred coefficient in bold.\n");
            let _ = writeln!(out, "| scorer | metric | measure | n | Pearson | Spearman |");
            let _ = writeln!(out, "|---|---|---|---|---|---|");
            for v in &self.validity {
                let (mut p, mut s) = (fmt_corr(&v.pearson), fmt_corr(&v.spearman));
                match v.preferred {
                    CorrelationKind::Pearson => p = format!("**{p}**"),
                    CorrelationKind::Spearman => s = format!("**{s}**"),
                }
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} |",
                    v.scorer, v.metric, v.measure, v.n, p, s
                );
            }
        }
        out
    }

    /// Bland–Altman points as CSV: `a,b,metric,mean,diff`.
    pub fn bland_altman_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["a", "b", "metric", "mean", "diff"])?;
        for p in &self.scores {
            for m in &p.metrics {
                for (mean, diff) in &m.bland_altman_points {
                    w.write_record([&p.a, &p.b, m.metric.name(), &mean.to_string(), &diff.to_string()])?;
                }
            }
        }
        csv_string(w)
    }

    /// Bucket-size histograms as CSV: `labeling,task,size,count`.
    pub fn size_counts_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["labeling", "task", "size", "count"])?;
        for l in &self.labelings {
            for t in &l.tasks {
                for (size, count) in &t.size_counts {
                    w.write_record([&l.name, &t.task_id, &size.to_string(), &count.to_string()])?;
                }
            }
        }
        csv_string(w)
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::BucketId;
    use crate::corpus::IdeaRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(seed: u64) -> (Vec<TaskCorpus>, NamedLabeling, NamedLabeling) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut corpus = Vec::new();
        let (mut la, mut lb) = (Vec::new(), Vec::new());
        for t in 0..3 {
            let task = format!("t{t}");
            let ideas: Vec<IdeaRecord> = (0..80)
                .map(|i| IdeaRecord {
                    participant_id: format!("p{}", i % 20),
                    task_id: task.clone(),
                    idea_text: format!("idea {i}"),
                    source_order: i,
                })
                .collect();
            let c = TaskCorpus::new(task.clone(), ideas).unwrap();
            // heavy-tailed labels, and a noisy copy
            let labels: Vec<u32> = (0..80)
                .map(|_| (1.0 / rng.random::<f64>().max(1e-3)).min(40.0) as u32)
                .collect();
            let noisy: Vec<u32> = labels
                .iter()
                .map(|l| {
                    if rng.random::<f64>() < 0.2 {
                        rng.random_range(1..40)
                    } else {
                        *l
                    }
                })
                .collect();
            for (labels, out) in [(&labels, &mut la), (&noisy, &mut lb)] {
                let mut dense = HashMap::new();
                let pairs = c
                    .ideas
                    .iter()
                    .zip(labels.iter())
                    .map(|(idea, l)| {
                        let next = dense.len() as u32 + 1;
                        (idea.key(), BucketId::new(*dense.entry(*l).or_insert(next)).unwrap())
                    })
                    .collect();
                out.push(BucketAssignment::from_pairs(task.clone(), pairs).unwrap());
            }
            corpus.push(c);
        }
        (
            corpus,
            NamedLabeling {
                name: "A".into(),
                assignments: la,
            },
            NamedLabeling {
                name: "B".into(),
                assignments: lb,
            },
        )
    }

    #[test]
    fn identical_labelings_agree_perfectly() {
        let (corpus, a, _) = fixture(1);
        let mut twin = a.clone();
        twin.name = "A2".into();
        let opts = ReportOptions {
            normalized: true,
            ..Default::default()
        };
        let r = build_report(&corpus, &[a, twin], &[], &[], &opts).unwrap();
        let c = &r.clustering[0].mean;
        for m in [&c.ami, &c.nmi, &c.v_measure, &c.homogeneity, &c.completeness] {
            assert!((m.mean - 1.0).abs() < 1e-12);
        }
        for m in &r.scores[0].metrics {
            let s = m.agreement.as_ref().unwrap();
            assert!((s.pearson.r - 1.0).abs() < 1e-12);
            assert_eq!(s.icc.icc31, 1.0);
            assert_eq!(s.bland_altman.bias, 0.0);
        }
    }

    #[test]
    fn noisy_copy_and_validity() {
        let (corpus, a, b) = fixture(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let measure = ExternalMeasures {
            measure_name: "rating".into(),
            values: (0..20).map(|p| (format!("p{p}"), rng.random::<f64>())).collect(),
        };
        let opts = ReportOptions {
            normalized: true,
            spearman_measures: ["rating".to_string()].into(),
        };
        let r = build_report(&corpus, &[a, b], &[], &[measure], &opts).unwrap();
        let ami = r.clustering[0].mean.ami.mean;
        assert!(ami > 0.3 && ami < 1.0, "{ami}");
        assert_eq!(r.validity.len(), 8);
        assert!(r
            .validity
            .iter()
            .all(|v| v.preferred == CorrelationKind::Spearman && v.n == 20));
        let md = r.to_markdown();
        assert!(md.contains("| A vs B |"));
        assert!(r.size_counts_csv().unwrap().starts_with("labeling,task,size,count\n"));
        assert_eq!(r.bland_altman_csv().unwrap().lines().count(), 1 + 4 * 20);
    }

    #[test]
    fn regenerating_is_identical() {
        let (corpus, a, b) = fixture(3);
        let opts = ReportOptions::default();
        let one =
            serde_json::to_string(&build_report(&corpus, &[a.clone(), b.clone()], &[], &[], &opts).unwrap()).unwrap();
        let two = serde_json::to_string(&build_report(&corpus, &[a, b], &[], &[], &opts).unwrap()).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn missing_task_is_a_coverage_error() {
        let (corpus, a, mut b) = fixture(4);
        b.assignments.pop();
        let err = build_report(&corpus, &[a, b], &[], &[], &ReportOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Coverage { .. }));
    }
}
