//! Evaluation metrics and analyses: mean-field sample error, intermediate
//! inference accuracy, cross-fit novelty scores, subject mixes of novelty
//! groups, and course-to-state assignment.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::baselines::{nb_predict_timestep, NaiveBayesParams};
use crate::cmm::{
    em_fit_pm1, infer_intermediate_with, posteriors, student_loglik, CmmParams, EmConfig,
    LikelihoodMode, ObservationMask,
};
use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::gaussian::TailMode;
use crate::{par, seed};

/// Version stamped into every JSON report.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Fraction of the cohort in the bottom and top novelty groups.
pub const NOVELTY_GROUP_FRACTION: f64 = 0.1;

/// How per-course enrollment probabilities aggregate over timesteps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalScope {
    /// `p_j` = fraction of students taking course `j` at any timestep.
    #[default]
    AnyTimestep,
    /// `p_{t,j}` = fraction of students taking course `j` at timestep `t`.
    PerTimestep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalVector {
    pub scope: MarginalScope,
    /// `M` entries (any-timestep) or `T * M` entries, timestep-major.
    pub p: Vec<f64>,
}

pub fn empirical_marginals(c: &Cohort, scope: MarginalScope) -> MarginalVector {
    let (n, t_count, m) = (c.n_students(), c.timesteps(), c.n_courses());
    let len = match scope {
        MarginalScope::AnyTimestep => m,
        MarginalScope::PerTimestep => t_count * m,
    };
    let mut counts = vec![0usize; len];
    for i in 0..n {
        let x = c.student(i);
        match scope {
            MarginalScope::AnyTimestep => {
                for (j, cnt) in counts.iter_mut().enumerate() {
                    if (0..t_count).any(|t| x[t * m + j] == 1) {
                        *cnt += 1;
                    }
                }
            }
            MarginalScope::PerTimestep => {
                for (cnt, &v) in counts.iter_mut().zip(x) {
                    *cnt += v as usize;
                }
            }
        }
    }
    let denom = n.max(1) as f64;
    MarginalVector {
        scope,
        p: counts.into_iter().map(|v| v as f64 / denom).collect(),
    }
}

fn check_comparable(a: &Cohort, b: &Cohort) -> Result<()> {
    let (fa, fb) = (a.vocab().fingerprint(), b.vocab().fingerprint());
    if fa != fb {
        return Err(Error::Fingerprint {
            model: fa,
            data: fb,
        });
    }
    if a.timesteps() != b.timesteps() {
        return Err(Error::shape("cohorts have different timestep counts"));
    }
    Ok(())
}

/// `sum_j (p^holdout_j - p^samples_j)^2`.
pub fn mean_field_error(holdout: &Cohort, samples: &Cohort, scope: MarginalScope) -> Result<f64> {
    Ok(mean_field_report(holdout, samples, scope)?.error)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldReport {
    pub schema_version: u32,
    pub scope: MarginalScope,
    pub error: f64,
    pub n_holdout: usize,
    pub n_samples: usize,
    pub holdout_marginals: Vec<f64>,
    pub sample_marginals: Vec<f64>,
}

pub fn mean_field_report(
    holdout: &Cohort,
    samples: &Cohort,
    scope: MarginalScope,
) -> Result<MeanFieldReport> {
    check_comparable(holdout, samples)?;
    let a = empirical_marginals(holdout, scope);
    let b = empirical_marginals(samples, scope);
    let error = a.p.iter().zip(&b.p).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(MeanFieldReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scope,
        error,
        n_holdout: holdout.n_students(),
        n_samples: samples.n_students(),
        holdout_marginals: a.p,
        sample_marginals: b.p,
    })
}

/// One `(student, course)` prediction of the masked-timestep task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub student: String,
    pub course: String,
    pub probability: f64,
    pub std_error: f64,
    pub predicted: bool,
    pub actual: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CourseAccuracy {
    pub course: String,
    pub accuracy: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub schema_version: u32,
    pub model: String,
    pub query_t: usize,
    pub threshold: f64,
    pub n_students: usize,
    pub accuracy: f64,
    pub per_course: Vec<CourseAccuracy>,
    pub predictions: Vec<Prediction>,
}

fn check_query(c: &Cohort, query_t: usize, courses: &[usize], threshold: f64) -> Result<()> {
    if query_t >= c.timesteps() {
        return Err(Error::invalid(format!(
            "query timestep {query_t} out of range"
        )));
    }
    if courses.is_empty() {
        return Err(Error::invalid("no query courses"));
    }
    if let Some(&j) = courses.iter().find(|&&j| j >= c.n_courses()) {
        return Err(Error::invalid(format!("query course {j} out of range")));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold must lie in (0, 1)"));
    }
    if c.n_students() == 0 {
        return Err(Error::invalid("holdout cohort is empty"));
    }
    Ok(())
}

/// Scores per-student `(probability, std_error)` rows against the
/// holdout's actual enrollments at `query_t`.
pub fn accuracy_from_probabilities(
    model: &str,
    holdout: &Cohort,
    query_t: usize,
    courses: &[usize],
    threshold: f64,
    probs: &[Vec<(f64, f64)>],
) -> Result<AccuracyReport> {
    check_query(holdout, query_t, courses, threshold)?;
    if probs.len() != holdout.n_students() || probs.iter().any(|r| r.len() != courses.len()) {
        return Err(Error::shape("probability table does not match the query"));
    }
    let vocab = holdout.vocab().entries();
    let mut per_course: Vec<CourseAccuracy> = courses
        .iter()
        .map(|&j| CourseAccuracy {
            course: vocab[j].id.clone(),
            ..Default::default()
        })
        .collect();
    let mut predictions = Vec::with_capacity(probs.len() * courses.len());
    for (i, row) in probs.iter().enumerate() {
        for (q, (&j, &(prob, se))) in courses.iter().zip(row).enumerate() {
            let predicted = prob > threshold;
            let actual = holdout.get(i, query_t, j) == 1;
            let ca = &mut per_course[q];
            match (predicted, actual) {
                (true, true) => ca.true_positive += 1,
                (true, false) => ca.false_positive += 1,
                (false, false) => ca.true_negative += 1,
                (false, true) => ca.false_negative += 1,
            }
            predictions.push(Prediction {
                student: holdout.student_ids()[i].clone(),
                course: vocab[j].id.clone(),
                probability: prob,
                std_error: se,
                predicted,
                actual,
            });
        }
    }
    let n = holdout.n_students() as f64;
    let mut correct = 0usize;
    for ca in per_course.iter_mut() {
        let right = ca.true_positive + ca.true_negative;
        correct += right;
        ca.accuracy = right as f64 / n;
    }
    Ok(AccuracyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: model.to_string(),
        query_t,
        threshold,
        n_students: holdout.n_students(),
        accuracy: correct as f64 / (n * courses.len() as f64),
        per_course,
        predictions,
    })
}

/// Masked-timestep prediction accuracy of a contextual mixture model using
/// the unbiased nested orthant estimator for evidence.
pub fn inference_accuracy(
    p: &CmmParams,
    holdout: &Cohort,
    query_t: usize,
    courses: &[usize],
    threshold: f64,
    k_mc: usize,
    seed: u64,
) -> Result<AccuracyReport> {
    inference_accuracy_with(
        p,
        holdout,
        query_t,
        courses,
        threshold,
        k_mc,
        seed,
        TailMode::NestedMc,
    )
}

/// [`inference_accuracy`] with an explicit tail mode for the evidence
/// estimator. Each student is masked at `query_t` only and uses its own
/// derived seed.
#[allow(clippy::too_many_arguments)]
pub fn inference_accuracy_with(
    p: &CmmParams,
    holdout: &Cohort,
    query_t: usize,
    courses: &[usize],
    threshold: f64,
    k_mc: usize,
    seed: u64,
    tail: TailMode,
) -> Result<AccuracyReport> {
    check_query(holdout, query_t, courses, threshold)?;
    p.check_cohort(holdout)?;
    let m = p.n_courses;
    let observed: Vec<usize> = (0..p.timesteps).filter(|&t| t != query_t).collect();
    let probs = par::map_indexed(holdout.n_students(), |i| {
        let mask = ObservationMask::from_record(holdout.student(i), m, &observed);
        let s = seed::derive_indexed(seed, "accuracy-student", i as u64);
        infer_intermediate_with(p, &mask, query_t, courses, k_mc, s, tail)
            .map(|est| est.iter().map(|e| (e.value, e.std_error)).collect())
    })
    .into_iter()
    .collect::<Result<Vec<Vec<(f64, f64)>>>>()?;
    accuracy_from_probabilities("cmm", holdout, query_t, courses, threshold, &probs)
}

/// Masked-timestep prediction accuracy of a naive Bayes mixture (exact
/// marginalization of the masked timestep).
pub fn nb_inference_accuracy(
    p: &NaiveBayesParams,
    holdout: &Cohort,
    query_t: usize,
    courses: &[usize],
    threshold: f64,
) -> Result<AccuracyReport> {
    check_query(holdout, query_t, courses, threshold)?;
    if holdout.vocab().fingerprint() != p.vocab_fingerprint {
        return Err(Error::Fingerprint {
            model: p.vocab_fingerprint.clone(),
            data: holdout.vocab().fingerprint(),
        });
    }
    let probs = (0..holdout.n_students())
        .map(|i| {
            let all = nb_predict_timestep(p, holdout.student(i), query_t)?;
            Ok(courses.iter().map(|&j| (all[j], 0.0)).collect())
        })
        .collect::<Result<Vec<Vec<(f64, f64)>>>>()?;
    accuracy_from_probabilities("nb", holdout, query_t, courses, threshold, &probs)
}

/// Majority-class baseline: predicts, for every student, whether each
/// query course is taken by more than half of `reference` at `query_t`.
pub fn majority_accuracy(
    reference: &Cohort,
    holdout: &Cohort,
    query_t: usize,
    courses: &[usize],
) -> Result<AccuracyReport> {
    check_query(holdout, query_t, courses, 0.5)?;
    check_comparable(reference, holdout)?;
    if reference.n_students() == 0 {
        return Err(Error::invalid("reference cohort is empty"));
    }
    let freq: Vec<(f64, f64)> = courses
        .iter()
        .map(|&j| {
            let taken = (0..reference.n_students())
                .filter(|&i| reference.get(i, query_t, j) == 1)
                .count();
            (taken as f64 / reference.n_students() as f64, 0.0)
        })
        .collect();
    let probs = vec![freq; holdout.n_students()];
    accuracy_from_probabilities("majority", holdout, query_t, courses, 0.5, &probs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoveltyGroup {
    Low,
    High,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoveltyEntry {
    pub student: String,
    pub fold: usize,
    pub loglik: f64,
    pub group: Option<NoveltyGroup>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub schema_version: u32,
    pub k_states: usize,
    pub folds: usize,
    /// In cohort order.
    pub scores: Vec<NoveltyEntry>,
}

/// Cross-fit novelty scores: each student's `{-1,+1}` log-likelihood under
/// a model fit to the other folds.
///
/// Fold membership and each training set's row order depend only on the
/// student ids and the seed, so the report does not depend on the order of
/// students in `c`. Student ids must be unique.
pub fn novelty_scores(c: &Cohort, cfg: &EmConfig, folds: usize) -> Result<NoveltyReport> {
    let n = c.n_students();
    if folds < 2 {
        return Err(Error::invalid("need at least two folds"));
    }
    if folds > n {
        return Err(Error::invalid(format!("{folds} folds for {n} students")));
    }
    let ids = c.student_ids();
    let mut by_hash: Vec<usize> = (0..n).collect();
    by_hash.sort_by_key(|&i| {
        (
            seed::derive(cfg.seed, &format!("fold:{}", ids[i])),
            ids[i].clone(),
        )
    });
    let mut fold_of = vec![0usize; n];
    for (pos, &i) in by_hash.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    for f in 0..folds {
        let train = fold_of.iter().filter(|&&g| g != f).count();
        if train < cfg.k_states {
            return Err(Error::invalid(format!(
                "fold {f} leaves {train} training students for {} states",
                cfg.k_states
            )));
        }
    }

    let fold_scores = par::map_indexed(folds, |f| -> Result<Vec<(usize, f64)>> {
        let mut train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        train.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = seed::derive_indexed(cfg.seed, "novelty-fold", f as u64);
        let fit = em_fit_pm1(&c.subset(&train), &fold_cfg)?;
        (0..n)
            .filter(|&i| fold_of[i] == f)
            .map(|i| {
                let ll = student_loglik(&fit.params, c.student(i), LikelihoodMode::Pm1Exact, 0, 0)?;
                Ok((i, ll.value))
            })
            .collect()
    });
    let mut loglik = vec![0.0; n];
    for r in fold_scores {
        for (i, v) in r? {
            loglik[i] = v;
        }
    }

    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| {
        loglik[a]
            .total_cmp(&loglik[b])
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    let group_size = ((n as f64 * NOVELTY_GROUP_FRACTION) as usize).clamp(1, n / 2);
    let mut group = vec![None; n];
    for &i in &ranked[..group_size] {
        group[i] = Some(NoveltyGroup::Low);
    }
    for &i in &ranked[n - group_size..] {
        group[i] = Some(NoveltyGroup::High);
    }
    Ok(NoveltyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        k_states: cfg.k_states,
        folds,
        scores: (0..n)
            .map(|i| NoveltyEntry {
                student: ids[i].clone(),
                fold: fold_of[i],
                loglik: loglik[i],
                group: group[i],
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMix {
    pub group: NoveltyGroup,
    pub n_students: usize,
    /// Mean number of enrollments over all timesteps.
    pub mean_total: f64,
    /// Mean enrollments per subject; sums to `mean_total`.
    pub subjects: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMix {
    pub schema_version: u32,
    pub groups: Vec<GroupMix>,
}

/// Mean per-subject course counts of the low and high novelty groups.
pub fn subject_mix(c: &Cohort, report: &NoveltyReport) -> Result<SubjectMix> {
    if report.scores.len() != c.n_students()
        || report
            .scores
            .iter()
            .zip(c.student_ids())
            .any(|(e, id)| &e.student != id)
    {
        return Err(Error::shape(
            "novelty report is not aligned with the cohort",
        ));
    }
    let (t_count, m) = (c.timesteps(), c.n_courses());
    let subjects: Vec<&str> = c
        .vocab()
        .entries()
        .iter()
        .map(|e| e.subject.as_str())
        .collect();
    let groups = [NoveltyGroup::Low, NoveltyGroup::High]
        .into_iter()
        .map(|g| {
            let members: Vec<usize> = (0..c.n_students())
                .filter(|&i| report.scores[i].group == Some(g))
                .collect();
            let mut mix: BTreeMap<String, f64> =
                subjects.iter().map(|s| (s.to_string(), 0.0)).collect();
            for &i in &members {
                let x = c.student(i);
                for t in 0..t_count {
                    for j in 0..m {
                        if x[t * m + j] == 1 {
                            *mix.get_mut(subjects[j]).expect("subject present") += 1.0;
                        }
                    }
                }
            }
            let denom = members.len().max(1) as f64;
            mix.values_mut().for_each(|v| *v /= denom);
            GroupMix {
                group: g,
                n_students: members.len(),
                mean_total: mix.values().sum(),
                subjects: mix,
            }
        })
        .collect();
    Ok(SubjectMix {
        schema_version: REPORT_SCHEMA_VERSION,
        groups,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CourseState {
    pub course: String,
    /// `None` for courses nobody takes.
    pub state: Option<usize>,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentAssignment {
    pub schema_version: u32,
    pub courses: Vec<CourseState>,
}

/// Assigns each course the state with the largest responsibility mass
/// among its enrollments, `sum_{i,t} gamma_i[t,k] * x^t_{ij}`.
pub fn latent_assignment(p: &CmmParams, c: &Cohort) -> Result<LatentAssignment> {
    let posts = posteriors(p, c)?;
    let (t_count, m, k) = (p.timesteps, p.n_courses, p.k_states);
    let mut weight = vec![vec![0.0; k]; m];
    for (i, post) in posts.iter().enumerate() {
        let x = c.student(i);
        for t in 0..t_count {
            let g = post.gamma_row(t);
            for (j, w) in weight.iter_mut().enumerate() {
                if x[t * m + j] == 1 {
                    w.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    let courses = weight
        .iter()
        .zip(c.vocab().entries())
        .map(|(w, e)| {
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return CourseState {
                    course: e.id.clone(),
                    state: None,
                    confidence: 0.0,
                };
            }
            let mut best = 0;
            for kk in 1..k {
                if w[kk] > w[best] {
                    best = kk;
                }
            }
            CourseState {
                course: e.id.clone(),
                state: Some(best),
                confidence: w[best] / total,
            }
        })
        .collect();
    Ok(LatentAssignment {
        schema_version: REPORT_SCHEMA_VERSION,
        courses,
    })
}
