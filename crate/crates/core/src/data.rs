//! Enrollment cohorts: ingestion, validation, filtering, splitting,
//! relaxation to `{-1, +1}` and descriptive summaries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmm::CmmParams;
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_TIMESTEPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Course {
    pub id: String,
    pub name: String,
    pub subject: String,
}

/// Ordered course list; column `j` of every enrollment vector is
/// `entries[j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Course>", into = "Vec<Course>")]
pub struct CourseVocabulary {
    entries: Vec<Course>,
    index: HashMap<String, usize>,
}

impl CourseVocabulary {
    pub fn new(entries: Vec<Course>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (j, c) in entries.iter().enumerate() {
            if c.subject.is_empty() {
                return Err(Error::invalid(format!(
                    "course {:?} has an empty subject",
                    c.id
                )));
            }
            if index.insert(c.id.clone(), j).is_some() {
                return Err(Error::invalid(format!("duplicate course id {:?}", c.id)));
            }
        }
        Ok(Self { entries, index })
    }

    /// Vocabulary of `m` synthetic courses `c0..c{m-1}` in subject `SYN`.
    pub fn synthetic(m: usize) -> Self {
        let entries = (0..m)
            .map(|j| Course {
                id: format!("c{j}"),
                name: format!("c{j}"),
                subject: "SYN".into(),
            })
            .collect();
        Self::new(entries).expect("synthetic ids are unique")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Course] {
        &self.entries
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Stable 16-hex-digit digest of the ordered course ids.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.entries {
            h.update(c.id.as_bytes());
            h.update([0u8]);
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

impl TryFrom<Vec<Course>> for CourseVocabulary {
    type Error = Error;

    fn try_from(v: Vec<Course>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CourseVocabulary> for Vec<Course> {
    fn from(v: CourseVocabulary) -> Self {
        v.entries
    }
}

/// `N x T x M` binary enrollment tensor, student-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    vocab: CourseVocabulary,
    timesteps: usize,
    student_ids: Vec<String>,
    data: Vec<u8>,
}

impl Cohort {
    pub fn new(
        vocab: CourseVocabulary,
        timesteps: usize,
        student_ids: Vec<String>,
        data: Vec<u8>,
    ) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::invalid("timestep count must be positive"));
        }
        let expected = student_ids.len() * timesteps * vocab.len();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "data has {} entries, expected {expected}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("enrollment entry {v} is not 0/1")));
        }
        let mut seen = HashSet::with_capacity(student_ids.len());
        for id in &student_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate student id {id:?}")));
            }
        }
        Ok(Self {
            vocab,
            timesteps,
            student_ids,
            data,
        })
    }

    /// Cohort with generated ids `s0, s1, ...`.
    pub fn from_rows(vocab: CourseVocabulary, timesteps: usize, data: Vec<u8>) -> Result<Self> {
        let per = timesteps * vocab.len();
        let n = data.len().checked_div(per).unwrap_or(0);
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        Self::new(vocab, timesteps, ids, data)
    }

    pub fn vocab(&self) -> &CourseVocabulary {
        &self.vocab
    }

    pub fn n_students(&self) -> usize {
        self.student_ids.len()
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn n_courses(&self) -> usize {
        self.vocab.len()
    }

    pub fn student_ids(&self) -> &[String] {
        &self.student_ids
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    /// Flattened `T * M` record of student `i`.
    pub fn student(&self, i: usize) -> &[u8] {
        let per = self.timesteps * self.n_courses();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn row(&self, i: usize, t: usize) -> &[u8] {
        let m = self.n_courses();
        let start = (i * self.timesteps + t) * m;
        &self.data[start..start + m]
    }

    pub fn get(&self, i: usize, t: usize, j: usize) -> u8 {
        self.row(i, t)[j]
    }

    pub fn total_enrollments(&self, i: usize) -> usize {
        self.student(i).iter().map(|&v| v as usize).sum()
    }

    /// Students at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        let mut data = Vec::with_capacity(indices.len() * self.timesteps * self.n_courses());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.student(i));
            ids.push(self.student_ids[i].clone());
        }
        Cohort {
            vocab: self.vocab.clone(),
            timesteps: self.timesteps,
            student_ids: ids,
            data,
        }
    }

    /// Re-expresses the cohort over `vocab`: columns are reordered to match,
    /// courses of `vocab` absent here become all-zero columns, and any
    /// course taken here but missing from `vocab` is an error.
    pub fn align_to(&self, vocab: &CourseVocabulary) -> Result<Cohort> {
        let mut target = Vec::with_capacity(self.n_courses());
        for (j, c) in self.vocab.entries.iter().enumerate() {
            match vocab.position(&c.id) {
                Some(pos) => target.push(Some(pos)),
                None => {
                    let taken = (0..self.n_students())
                        .any(|i| (0..self.timesteps).any(|t| self.get(i, t, j) == 1));
                    if taken {
                        return Err(Error::invalid(format!(
                            "course {:?} is not in the target vocabulary",
                            c.id
                        )));
                    }
                    target.push(None);
                }
            }
        }
        let m = vocab.len();
        let mut data = vec![0u8; self.n_students() * self.timesteps * m];
        for i in 0..self.n_students() {
            for t in 0..self.timesteps {
                let out = &mut data[(i * self.timesteps + t) * m..][..m];
                for (&v, pos) in self.row(i, t).iter().zip(&target) {
                    if let Some(p) = pos {
                        out[*p] = v;
                    }
                }
            }
        }
        Cohort::new(
            vocab.clone(),
            self.timesteps,
            self.student_ids.clone(),
            data,
        )
    }

    pub fn same_layout(&self, other: &Cohort) -> bool {
        self.timesteps == other.timesteps && self.vocab == other.vocab
    }

    /// Writes the cohort back to the long transcript CSV format.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["student_id", "timestep", "course_id", "subject"])
            .map_err(csv_io)?;
        for i in 0..self.n_students() {
            for t in 0..self.timesteps {
                for (j, &v) in self.row(i, t).iter().enumerate() {
                    if v == 1 {
                        let c = &self.vocab.entries[j];
                        w.write_record([
                            self.student_ids[i].as_str(),
                            &t.to_string(),
                            &c.id,
                            &c.subject,
                        ])
                        .map_err(csv_io)?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Real-valued cohort produced by [`shift_to_pm1`].
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedCohort {
    pub n_students: usize,
    pub timesteps: usize,
    pub n_courses: usize,
    pub data: Vec<f64>,
}

impl RelaxedCohort {
    pub fn row(&self, i: usize, t: usize) -> &[f64] {
        let start = (i * self.timesteps + t) * self.n_courses;
        &self.data[start..start + self.n_courses]
    }

    /// Sign threshold at zero.
    pub fn to_binary(&self) -> Vec<u8> {
        self.data.iter().map(|&v| u8::from(v > 0.0)).collect()
    }
}

const HEADER: [&str; 4] = ["student_id", "timestep", "course_id", "subject"];

/// Reads a long-format transcript (`student_id,timestep,course_id,subject`).
///
/// Students and courses are indexed in first-appearance order; repeated
/// `(student, timestep, course)` rows collapse to a single enrollment.
pub fn load_transcripts_csv<R: Read>(source: R, timestep_count: usize) -> Result<Cohort> {
    if timestep_count == 0 {
        return Err(Error::invalid("timestep count must be positive"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let mut records = rdr.records();
    let header = match records.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
        Some(r) => r.map_err(|e| parse_err(&e, 1))?,
    };
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", HEADER.join(",")),
        });
    }

    let mut courses: Vec<Course> = Vec::new();
    let mut course_pos: HashMap<String, usize> = HashMap::new();
    let mut student_pos: HashMap<String, usize> = HashMap::new();
    let mut student_ids: Vec<String> = Vec::new();
    let mut cells: Vec<(usize, usize, usize)> = Vec::new();

    for rec in records {
        let rec = rec.map_err(|e| parse_err(&e, 0))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let (sid, ts, cid, subject) = (&rec[0], &rec[1], &rec[2], &rec[3]);
        if sid.is_empty() || cid.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty student or course id".into(),
            });
        }
        if subject.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty subject".into(),
            });
        }
        let t: usize = ts.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("timestep {ts:?} is not a non-negative integer"),
        })?;
        if t >= timestep_count {
            return Err(Error::Parse {
                line,
                msg: format!("timestep {t} outside 0..{timestep_count}"),
            });
        }
        let j = *course_pos.entry(cid.to_string()).or_insert_with(|| {
            courses.push(Course {
                id: cid.to_string(),
                name: cid.to_string(),
                subject: subject.to_string(),
            });
            courses.len() - 1
        });
        if courses[j].subject != subject {
            log::warn!(
                "line {line}: course {cid} listed under {subject}, keeping {}",
                courses[j].subject
            );
        }
        let i = *student_pos.entry(sid.to_string()).or_insert_with(|| {
            student_ids.push(sid.to_string());
            student_ids.len() - 1
        });
        cells.push((i, t, j));
    }
    if cells.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no enrollment rows".into(),
        });
    }

    let m = courses.len();
    let mut data = vec![0u8; student_ids.len() * timestep_count * m];
    for (i, t, j) in cells {
        data[(i * timestep_count + t) * m + j] = 1;
    }
    Cohort::new(
        CourseVocabulary::new(courses)?,
        timestep_count,
        student_ids,
        data,
    )
}

fn parse_err(e: &csv::Error, fallback_line: usize) -> Error {
    let line = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback_line);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Keeps students with at least `min_total_courses` enrollments overall and
/// at least `min_per_timestep` in every timestep.
pub fn filter_cohort(c: &Cohort, min_total_courses: usize, min_per_timestep: usize) -> Cohort {
    let keep: Vec<usize> = (0..c.n_students())
        .filter(|&i| {
            c.total_enrollments(i) >= min_total_courses
                && (0..c.timesteps()).all(|t| {
                    c.row(i, t).iter().map(|&v| v as usize).sum::<usize>() >= min_per_timestep
                })
        })
        .collect();
    c.subset(&keep)
}

/// Seeded partition into `(train, holdout)`.
///
/// The holdout holds `round(N * fraction)` students (half rounds away from
/// zero), clamped to `1..=N-1`. Both parts keep the source ordering.
pub fn split_cohort(c: &Cohort, holdout_fraction: f64, seed: u64) -> Result<(Cohort, Cohort)> {
    let n = c.n_students();
    if n < 2 {
        return Err(Error::invalid("split needs at least 2 students"));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "holdout fraction {holdout_fraction} outside (0, 1)"
        )));
    }
    let h = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed::derive(seed, "split")));
    let mut hold = perm[..h].to_vec();
    let mut train = perm[h..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    Ok((c.subset(&train), c.subset(&hold)))
}

/// Maps each entry `e` to `2e - 1`.
pub fn shift_to_pm1(c: &Cohort) -> RelaxedCohort {
    RelaxedCohort {
        n_students: c.n_students(),
        timesteps: c.timesteps(),
        n_courses: c.n_courses(),
        data: c.raw().iter().map(|&v| 2.0 * v as f64 - 1.0).collect(),
    }
}

/// Samples `n` students from a contextual mixture model. Same generator as
/// [`crate::cmm::sample_students`].
pub fn synth_generate(params: &CmmParams, n: usize, seed: u64) -> Result<Cohort> {
    crate::cmm::sample_students(params, n, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub total: usize,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalFit {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub schema_version: u32,
    /// `[t][subject] -> enrollments`.
    pub per_timestep_subject_counts: Vec<BTreeMap<String, usize>>,
    /// Unit-width bins over `min..=max` of per-student totals.
    pub totals_histogram: Vec<HistogramBin>,
    pub normal_fit: NormalFit,
}

impl CohortSummary {
    pub fn total_enrollments(&self) -> usize {
        self.per_timestep_subject_counts
            .iter()
            .flat_map(|m| m.values())
            .sum()
    }
}

pub fn summarize(c: &Cohort) -> CohortSummary {
    let subjects: Vec<&str> = c
        .vocab()
        .entries()
        .iter()
        .map(|e| e.subject.as_str())
        .collect();
    let mut per_t = vec![BTreeMap::new(); c.timesteps()];
    for i in 0..c.n_students() {
        for (t, counts) in per_t.iter_mut().enumerate() {
            for (j, &v) in c.row(i, t).iter().enumerate() {
                if v == 1 {
                    *counts.entry(subjects[j].to_string()).or_insert(0) += 1;
                }
            }
        }
    }

    let totals: Vec<usize> = (0..c.n_students())
        .map(|i| c.total_enrollments(i))
        .collect();
    let mut totals_histogram = Vec::new();
    if let (Some(&lo), Some(&hi)) = (totals.iter().min(), totals.iter().max()) {
        totals_histogram = (lo..=hi)
            .map(|total| HistogramBin { total, count: 0 })
            .collect();
        for &v in &totals {
            totals_histogram[v - lo].count += 1;
        }
    }

    let n = totals.len() as f64;
    let mean = if totals.is_empty() {
        0.0
    } else {
        totals.iter().sum::<usize>() as f64 / n
    };
    let sd = if totals.len() < 2 {
        0.0
    } else {
        (totals
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    };

    CohortSummary {
        schema_version: 1,
        per_timestep_subject_counts: per_t,
        totals_histogram,
        normal_fit: NormalFit { mean, sd },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(rows: &str) -> String {
        format!("student_id,timestep,course_id,subject\n{rows}")
    }

    #[test]
    fn two_courses_one_student() {
        let c = load_transcripts_csv(csv("s1,0,a,CS\ns1,0,b,MATH\n").as_bytes(), 2).unwrap();
        assert_eq!(c.n_students(), 1);
        assert_eq!(c.n_courses(), 2);
        assert_eq!(c.row(0, 0), &[1, 1]);
        assert_eq!(c.row(0, 1), &[0, 0]);
        assert_eq!(c.vocab().position("b"), Some(1));
    }

    #[test]
    fn duplicate_rows_collapse() {
        let once = load_transcripts_csv(csv("s1,0,a,SUBJ\n").as_bytes(), 4).unwrap();
        let twice = load_transcripts_csv(csv("s1,0,a,SUBJ\ns1,0,a,SUBJ\n").as_bytes(), 4).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn out_of_range_timestep_names_line() {
        let err = load_transcripts_csv(csv("s1,0,a,X\ns1,5,b,X\n").as_bytes(), 4).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_rows_are_rejected() {
        for bad in ["s1,0,a\n", "s1,x,a,X\n", "s1,-1,a,X\n", "s1,0,a,X,extra\n"] {
            let err = load_transcripts_csv(csv(bad).as_bytes(), 4).unwrap_err();
            assert!(matches!(err, Error::Parse { line: 2, .. }), "{bad}: {err}");
        }
        assert!(load_transcripts_csv("".as_bytes(), 4).is_err());
        assert!(load_transcripts_csv(csv("").as_bytes(), 4).is_err());
        assert!(load_transcripts_csv("a,b,c,d\ns1,0,a,X\n".as_bytes(), 4).is_err());
    }

    fn cohort_with_totals(totals: &[usize]) -> Cohort {
        let m = *totals.iter().max().unwrap();
        let mut data = Vec::new();
        for &k in totals {
            data.extend((0..m).map(|j| u8::from(j < k)));
        }
        Cohort::from_rows(CourseVocabulary::synthetic(m), 1, data).unwrap()
    }

    #[test]
    fn filter_thresholds() {
        let c = cohort_with_totals(&[2, 5, 9]);
        assert_eq!(filter_cohort(&c, 0, 0), c);
        assert_eq!(filter_cohort(&c, 5, 0).n_students(), 2);

        let v = CourseVocabulary::synthetic(2);
        let c = Cohort::from_rows(v, 2, vec![1, 0, 0, 0, 1, 1, 0, 1]).unwrap();
        let f = filter_cohort(&c, 0, 1);
        assert_eq!(f.student_ids(), &["s1".to_string()]);
        assert_eq!(filter_cohort(&c, 100, 0).n_students(), 0);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = cohort_with_totals(&[1; 10]);
        let (a, b) = split_cohort(&c, 0.2, 7).unwrap();
        assert_eq!((a.n_students(), b.n_students()), (8, 2));
        let mut all: Vec<_> = a
            .student_ids()
            .iter()
            .chain(b.student_ids())
            .cloned()
            .collect();
        all.sort();
        let mut orig = c.student_ids().to_vec();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(split_cohort(&c, 0.2, 7).unwrap(), (a, b));

        let c = cohort_with_totals(&[1; 101]);
        let (a, b) = split_cohort(&c, 0.5, 1).unwrap();
        assert_eq!((a.n_students(), b.n_students()), (50, 51));

        assert!(split_cohort(&cohort_with_totals(&[1]), 0.5, 1).is_err());
        assert!(split_cohort(&c, 1.0, 1).is_err());
    }

    #[test]
    fn shift_examples() {
        let v = CourseVocabulary::synthetic(3);
        let c = Cohort::from_rows(v.clone(), 1, vec![1, 0, 1]).unwrap();
        assert_eq!(shift_to_pm1(&c).data, vec![1.0, -1.0, 1.0]);
        let z = Cohort::from_rows(v, 1, vec![0, 0, 0]).unwrap();
        assert_eq!(shift_to_pm1(&z).data, vec![-1.0; 3]);
    }

    #[test]
    fn summary_counts_and_fit() {
        let c =
            load_transcripts_csv(csv("s1,0,a,CS\ns1,0,b,CS\ns1,0,c,CS\n").as_bytes(), 2).unwrap();
        let s = summarize(&c);
        assert_eq!(s.per_timestep_subject_counts[0]["CS"], 3);
        assert!(s.per_timestep_subject_counts[1].is_empty());

        let s = summarize(&cohort_with_totals(&[4, 6]));
        assert_eq!(s.normal_fit.mean, 5.0);
        assert!((s.normal_fit.sd - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.totals_histogram.first().unwrap().total, 4);
        assert_eq!(s.totals_histogram.last().unwrap().total, 6);
        assert_eq!(s.totals_histogram.iter().map(|b| b.count).sum::<usize>(), 2);

        let json = serde_json::to_value(&s).unwrap();
        for key in [
            "per_timestep_subject_counts",
            "totals_histogram",
            "normal_fit",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn vocabulary_invariants() {
        let c = |id: &str, s: &str| Course {
            id: id.into(),
            name: id.into(),
            subject: s.into(),
        };
        assert!(CourseVocabulary::new(vec![c("a", "X"), c("a", "Y")]).is_err());
        assert!(CourseVocabulary::new(vec![c("a", "")]).is_err());
        let v = CourseVocabulary::new(vec![c("a", "X"), c("b", "Y")]).unwrap();
        let back: CourseVocabulary =
            serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert_ne!(
            CourseVocabulary::synthetic(2).fingerprint(),
            v.fingerprint()
        );
    }

    #[test]
    fn csv_round_trip_and_alignment() {
        let vocab = CourseVocabulary::synthetic(3);
        let c =
            Cohort::from_rows(vocab.clone(), 2, vec![0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 1]).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = load_transcripts_csv(buf.as_slice(), 2).unwrap();
        // First-appearance order differs from the synthetic order.
        assert_eq!(back.vocab().position("c2"), Some(0));
        assert_eq!(back.align_to(&vocab).unwrap(), c);
        // Missing courses become empty columns; unknown taken courses fail.
        let wide = CourseVocabulary::synthetic(4);
        let aligned = c.align_to(&wide).unwrap();
        assert_eq!(aligned.row(0, 0), &[0, 0, 1, 0]);
        assert!(c.align_to(&CourseVocabulary::synthetic(2)).is_err());
    }
}
