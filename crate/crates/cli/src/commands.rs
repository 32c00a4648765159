use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use coursepath::baselines::{best_of_restarts, model_sample, nb_fit_em, tan_fit_em};
use coursepath::cmm::{
    em_fit_pm1, infer_intermediate_with, refine_policy_gradient, sample_students_with_vocab,
    transition_flows, CmmParams, EmConfig, ObservationMask, SankeyExport,
};
use coursepath::data::{filter_cohort, load_transcripts_csv, summarize, Cohort, CourseVocabulary};
use coursepath::eval::{
    inference_accuracy_with, latent_assignment, majority_accuracy, mean_field_report,
    nb_inference_accuracy, novelty_scores, subject_mix, MarginalScope, REPORT_SCHEMA_VERSION,
};
use coursepath::gaussian::TailMode;
use coursepath::model_file::{ModelFile, ModelParams, TrainingMetadata};
use coursepath::scenario::{
    recovery_errors, BenchmarkConfig, CoupledConfig, GeneratorConfig, RecoveryConfig,
};
use coursepath::{par, seed};

use crate::args::*;
use crate::{usage, CliResult};

pub(crate) fn dispatch(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Score(a) => score(a),
        Command::Sankey(a) => sankey(a),
        Command::Summarize(a) => summarize_cmd(a),
    }
}

// ---------------------------------------------------------------------------
// File helpers

fn load_csv(path: &Path, timesteps: usize) -> CliResult<Cohort> {
    let c = load_transcripts_csv(BufReader::new(File::open(path)?), timesteps)?;
    log::info!(
        "{}: {} students, {} courses, {} timesteps",
        path.display(),
        c.n_students(),
        c.n_courses(),
        c.timesteps()
    );
    Ok(c)
}

fn write_csv(path: &Path, c: &Cohort) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    c.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_model(path: &Path) -> CliResult<ModelFile> {
    let m = ModelFile::load(path)?;
    log::info!(
        "{}: {} model, {} courses",
        path.display(),
        m.kind(),
        m.vocabulary.len()
    );
    Ok(m)
}

fn model_timesteps(m: &ModelFile) -> usize {
    match &m.params {
        ModelParams::Nb(p) => p.timesteps,
        ModelParams::Tan(p) => p.timesteps,
        ModelParams::Cmm(p) => p.timesteps,
    }
}

fn cmm_params<'a>(m: &'a ModelFile, what: &str) -> CliResult<&'a CmmParams> {
    match &m.params {
        ModelParams::Cmm(p) => Ok(p),
        _ => Err(usage(format!("{what} needs a cmm model, got {}", m.kind()))),
    }
}

/// Loads a transcript expressed over the model's vocabulary and timesteps.
fn load_for_model(path: &Path, m: &ModelFile) -> CliResult<Cohort> {
    Ok(load_csv(path, model_timesteps(m))?.align_to(&m.vocabulary)?)
}

/// Courses of `a` followed by those only in `b`.
fn union_vocab(a: &CourseVocabulary, b: &CourseVocabulary) -> CliResult<CourseVocabulary> {
    let mut entries = a.entries().to_vec();
    entries.extend(
        b.entries()
            .iter()
            .filter(|c| a.position(&c.id).is_none())
            .cloned(),
    );
    Ok(CourseVocabulary::new(entries)?)
}

fn course_indices(vocab: &CourseVocabulary, ids: &[String]) -> CliResult<Vec<usize>> {
    ids.iter()
        .map(|id| {
            vocab
                .position(id)
                .ok_or_else(|| usage(format!("unknown course id {id:?}")))
        })
        .collect()
}

fn tail_mode(t: TailArg) -> TailMode {
    match t {
        TailArg::NestedMc => TailMode::NestedMc,
        TailArg::ProductCdf => TailMode::ProductCdf,
    }
}

fn require<'a, T>(v: &'a Option<T>, flag: &str, metric: &str) -> CliResult<&'a T> {
    v.as_ref()
        .ok_or_else(|| usage(format!("--{flag} is required for --metric {metric}")))
}

// ---------------------------------------------------------------------------
// synth

fn synth(a: &SynthArgs) -> CliResult<()> {
    let (truth, vocab, default_n) = match (a.scenario, &a.generator, &a.params) {
        (Some(s), None, None) => {
            let (g, n) = match s {
                Scenario::Benchmark => {
                    let c = BenchmarkConfig::default();
                    (c.generator, c.n_students)
                }
                Scenario::Coupled => {
                    let c = CoupledConfig::default();
                    (c.generator, c.n_students)
                }
                Scenario::Recovery => {
                    let c = RecoveryConfig::default();
                    (c.generator, c.n_students)
                }
            };
            let p = g.build()?;
            let v = CourseVocabulary::synthetic(p.n_courses);
            (p, v, Some(n))
        }
        (None, Some(path), None) => {
            let g: GeneratorConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let p = g.build()?;
            let v = CourseVocabulary::synthetic(p.n_courses);
            (p, v, None)
        }
        (None, None, Some(path)) => {
            let m = load_model(path)?;
            let p = cmm_params(&m, "synth --params")?.clone();
            (p, m.vocabulary, None)
        }
        _ => {
            return Err(usage(
                "give exactly one of --scenario, --generator or --params",
            ))
        }
    };
    let n =
        a.n.or(default_n)
            .ok_or_else(|| usage("--n is required unless a scenario is given"))?;
    let c = sample_students_with_vocab(&truth, &vocab, n, seed::derive(a.seed, "synth"))?;
    let empty = (0..c.n_students())
        .filter(|&i| c.total_enrollments(i) == 0)
        .count();
    if empty > 0 {
        log::warn!("{empty} generated students have no enrollments and do not appear in the CSV");
    }
    write_csv(&a.out, &c)?;
    log::info!("wrote {} students to {}", n - empty, a.out.display());
    if let Some(path) = &a.truth_out {
        let meta = TrainingMetadata {
            seed: a.seed,
            k_states: truth.k_states,
            iterations: 0,
            final_loglik: 0.0,
        };
        ModelFile::new(vocab, ModelParams::Cmm(truth), meta)?.save(path)?;
        log::info!("wrote generating model to {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

fn fit(a: &FitArgs) -> CliResult<()> {
    if a.model != ModelArg::Cmm && a.refine_steps > 0 {
        return Err(usage("--refine-steps applies to cmm models only"));
    }
    let mut c = load_csv(&a.input, a.load.timesteps)?;
    if let Some(path) = &a.vocab_from {
        c = c.align_to(&load_model(path)?.vocabulary)?;
    }
    let before = c.n_students();
    c = filter_cohort(&c, a.min_total, a.min_per_timestep);
    if c.n_students() < before {
        log::info!("filtering kept {} of {before} students", c.n_students());
    }
    let k = a.k;
    let (params, trace) = match a.model {
        ModelArg::Nb => {
            let f = best_of_restarts(a.restarts, |r| {
                nb_fit_em(
                    &c,
                    k,
                    a.max_iters,
                    a.tol,
                    seed::derive_indexed(a.seed, "nb-restart", r as u64),
                )
            })?;
            (ModelParams::Nb(f.params), f.trace)
        }
        ModelArg::Tan => {
            let f = best_of_restarts(a.restarts, |r| {
                tan_fit_em(
                    &c,
                    k,
                    a.max_iters,
                    a.tol,
                    seed::derive_indexed(a.seed, "tan-restart", r as u64),
                )
            })?;
            (ModelParams::Tan(f.params), f.trace)
        }
        ModelArg::Cmm => {
            let cfg = EmConfig {
                k_states: k,
                max_iters: a.max_iters,
                tol: a.tol,
                restarts: a.restarts,
                seed: seed::derive(a.seed, "cmm-fit"),
                regularization: a.regularization,
            };
            let f = em_fit_pm1(&c, &cfg)?;
            log::info!("best restart {} of {}", f.best_restart, cfg.restarts);
            let mut params = f.params;
            if a.refine_steps > 0 {
                let r = refine_policy_gradient(
                    &params,
                    &c,
                    a.refine_steps,
                    a.learning_rate,
                    a.refine_k_mc,
                    seed::derive(a.seed, "refine"),
                )?;
                if let Some(why) = &r.aborted {
                    log::warn!("refinement stopped early: {why}");
                }
                log::info!(
                    "refinement objective {:.6} -> {:.6}",
                    r.objective_trace.first().copied().unwrap_or(f64::NAN),
                    r.objective_trace.last().copied().unwrap_or(f64::NAN)
                );
                params = r.params;
            }
            (ModelParams::Cmm(params), f.trace)
        }
    };
    let meta = TrainingMetadata {
        seed: a.seed,
        k_states: k,
        iterations: trace.len(),
        final_loglik: *trace.last().expect("EM traces are never empty"),
    };
    log::info!(
        "final training log-likelihood {:.6} after {} iterations",
        meta.final_loglik,
        meta.iterations
    );
    ModelFile::new(c.vocab().clone(), params, meta)?.save(&a.out)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sample

fn sample(a: &SampleArgs) -> CliResult<()> {
    let m = load_model(&a.model)?;
    let s = seed::derive(a.seed, "sample");
    let c = match &m.params {
        ModelParams::Nb(p) => model_sample(p, &m.vocabulary, a.n, s)?,
        ModelParams::Tan(p) => model_sample(p, &m.vocabulary, a.n, s)?,
        ModelParams::Cmm(p) => sample_students_with_vocab(p, &m.vocabulary, a.n, s)?,
    };
    write_csv(&a.out, &c)?;
    log::info!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Serialize)]
struct RecoveryReport {
    schema_version: u32,
    theta: f64,
    transition: f64,
    emission_mean: f64,
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let model = a.model.as_deref().map(load_model).transpose()?;
    let timesteps = model
        .as_ref()
        .map(model_timesteps)
        .unwrap_or(a.load.timesteps);
    match a.metric {
        Metric::MeanField => {
            let h = load_csv(require(&a.holdout, "holdout", "mean-field")?, timesteps)?;
            let s = load_csv(require(&a.samples, "samples", "mean-field")?, timesteps)?;
            let vocab = match &model {
                Some(m) => m.vocabulary.clone(),
                None => union_vocab(h.vocab(), s.vocab())?,
            };
            let scope = match a.scope {
                ScopeArg::AnyTimestep => MarginalScope::AnyTimestep,
                ScopeArg::PerTimestep => MarginalScope::PerTimestep,
            };
            let r = mean_field_report(&h.align_to(&vocab)?, &s.align_to(&vocab)?, scope)?;
            log::info!("mean-field error {:.6e}", r.error);
            write_json(&a.out, &r)
        }
        Metric::Accuracy => {
            let m = require(&model, "model", "accuracy")?;
            let h = load_for_model(require(&a.holdout, "holdout", "accuracy")?, m)?;
            let courses = query_courses(&m.vocabulary, &a.courses)?;
            let r = match &m.params {
                ModelParams::Cmm(p) => inference_accuracy_with(
                    p,
                    &h,
                    a.query_t,
                    &courses,
                    a.threshold,
                    a.k_mc,
                    seed::derive(a.seed, "accuracy"),
                    tail_mode(a.tail),
                )?,
                ModelParams::Nb(p) => {
                    nb_inference_accuracy(p, &h, a.query_t, &courses, a.threshold)?
                }
                ModelParams::Tan(_) => {
                    return Err(usage("accuracy is available for cmm and nb models"))
                }
            };
            log::info!("accuracy {:.4}", r.accuracy);
            write_json(&a.out, &r)
        }
        Metric::Majority => {
            let r = load_csv(require(&a.reference, "reference", "majority")?, timesteps)?;
            let h = load_csv(require(&a.holdout, "holdout", "majority")?, timesteps)?;
            let vocab = union_vocab(r.vocab(), h.vocab())?;
            let courses = query_courses(&vocab, &a.courses)?;
            let rep = majority_accuracy(
                &r.align_to(&vocab)?,
                &h.align_to(&vocab)?,
                a.query_t,
                &courses,
            )?;
            log::info!("majority accuracy {:.4}", rep.accuracy);
            write_json(&a.out, &rep)
        }
        Metric::LatentAssignment => {
            let m = require(&model, "model", "latent-assignment")?;
            let p = cmm_params(m, "latent-assignment")?;
            let c = load_for_model(require(&a.input, "input", "latent-assignment")?, m)?;
            write_json(&a.out, &latent_assignment(p, &c)?)
        }
        Metric::Recovery => {
            let m = require(&model, "model", "recovery")?;
            let truth = load_model(require(&a.truth, "truth", "recovery")?)?;
            if m.vocabulary != truth.vocabulary {
                return Err(coursepath::Error::Fingerprint {
                    model: m.vocabulary.fingerprint(),
                    data: truth.vocabulary.fingerprint(),
                }
                .into());
            }
            let e = recovery_errors(cmm_params(m, "recovery")?, cmm_params(&truth, "recovery")?)?;
            log::info!(
                "max-abs errors: theta {:.4}, transition {:.4}, emission mean {:.4}",
                e.theta,
                e.transition,
                e.emission_mean
            );
            write_json(
                &a.out,
                &RecoveryReport {
                    schema_version: REPORT_SCHEMA_VERSION,
                    theta: e.theta,
                    transition: e.transition,
                    emission_mean: e.emission_mean,
                },
            )
        }
    }
}

fn query_courses(vocab: &CourseVocabulary, ids: &[String]) -> CliResult<Vec<usize>> {
    if ids.is_empty() {
        return Err(usage("--courses is required"));
    }
    course_indices(vocab, ids)
}

// ---------------------------------------------------------------------------
// infer

#[derive(Serialize)]
struct StudentPrediction {
    student: String,
    probability: Vec<f64>,
    std_error: Vec<f64>,
}

#[derive(Serialize)]
struct InferReport {
    schema_version: u32,
    query_t: usize,
    observed: Vec<usize>,
    courses: Vec<String>,
    students: Vec<StudentPrediction>,
}

fn infer(a: &InferArgs) -> CliResult<()> {
    let m = load_model(&a.model)?;
    let p = cmm_params(&m, "infer")?;
    let c = load_for_model(&a.input, &m)?;
    let courses = if a.courses.is_empty() {
        (0..p.n_courses).collect()
    } else {
        course_indices(&m.vocabulary, &a.courses)?
    };
    let observed: Vec<usize> = if a.observed.is_empty() {
        (0..p.timesteps).filter(|&t| t != a.query_t).collect()
    } else {
        a.observed.clone()
    };
    if let Some(&t) = observed
        .iter()
        .find(|&&t| t >= p.timesteps || t == a.query_t)
    {
        return Err(usage(format!(
            "observed timestep {t} is out of range or equals the query timestep"
        )));
    }
    let tail = tail_mode(a.tail);
    let students = par::map_indexed(c.n_students(), |i| {
        let mask = ObservationMask::from_record(c.student(i), p.n_courses, &observed);
        let s = seed::derive_indexed(a.seed, "infer-student", i as u64);
        infer_intermediate_with(p, &mask, a.query_t, &courses, a.k_mc, s, tail).map(|est| {
            StudentPrediction {
                student: c.student_ids()[i].clone(),
                probability: est.iter().map(|e| e.value).collect(),
                std_error: est.iter().map(|e| e.std_error).collect(),
            }
        })
    })
    .into_iter()
    .collect::<coursepath::Result<Vec<_>>>()?;
    let report = InferReport {
        schema_version: REPORT_SCHEMA_VERSION,
        query_t: a.query_t,
        observed,
        courses: courses
            .iter()
            .map(|&j| m.vocabulary.entries()[j].id.clone())
            .collect(),
        students,
    };
    write_json(&a.out, &report)
}

// ---------------------------------------------------------------------------
// score, sankey, summarize

fn score(a: &ScoreArgs) -> CliResult<()> {
    let c = load_csv(&a.input, a.load.timesteps)?;
    let cfg = EmConfig {
        k_states: a.k,
        max_iters: a.max_iters,
        tol: a.tol,
        restarts: a.restarts,
        seed: seed::derive(a.seed, "novelty"),
        regularization: a.regularization,
    };
    let report = novelty_scores(&c, &cfg, a.folds)?;
    write_json(&a.out, &report)?;
    if let Some(path) = &a.subject_mix_out {
        write_json(path, &subject_mix(&c, &report)?)?;
    }
    Ok(())
}

fn sankey(a: &SankeyArgs) -> CliResult<()> {
    let m = load_model(&a.model)?;
    let p = cmm_params(&m, "sankey")?;
    let c = load_for_model(&a.input, &m)?;
    let flows = transition_flows(p, &c)?;
    write_json(&a.out, &SankeyExport::from_flows(&flows, p.k_states))
}

fn summarize_cmd(a: &SummarizeArgs) -> CliResult<()> {
    let c = load_csv(&a.input, a.load.timesteps)?;
    let c = filter_cohort(&c, a.min_total, a.min_per_timestep);
    write_json(&a.out, &summarize(&c))
}
