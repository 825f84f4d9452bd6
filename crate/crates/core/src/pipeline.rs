//! End-to-end runs and solver benchmarks.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, ErrorKind, Result};
use crate::io;
use crate::numerics::{l2_normalize_rows, Matrix};
use crate::ot::{self, entropic_objective, pseudo_labels, Algorithm, ClassMarginal, SolverConfig};
use crate::proxy::{classify, learn, LearnConfig, StopReason};
use crate::retrieval::{
    build_text_proxies, description_mean_proxies, name_proxies, retrieve, KnowledgeBase, Provenance,
    RetrievalResult, TextProxies, DEFAULT_K,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Class-name embeddings as proxies.
    ClipBaseline,
    /// Mean of all descriptions per class.
    DescriptionBaseline,
    /// Mean of the retrieved top-k descriptions per class.
    KplText,
    /// Retrieved proxies refined by OT pseudo-labels and proxy learning.
    KplFull,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::ClipBaseline,
        Mode::DescriptionBaseline,
        Mode::KplText,
        Mode::KplFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::ClipBaseline => "clip_baseline",
            Mode::DescriptionBaseline => "description_baseline",
            Mode::KplText => "kpl_text",
            Mode::KplFull => "kpl_full",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::usage(format!(
                "unknown mode '{s}' (expected clip_baseline, description_baseline, kpl_text or kpl_full)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub k: usize,
    pub normalize_images: bool,
    pub solver: SolverConfig,
    pub learn: LearnConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::KplFull,
            k: DEFAULT_K,
            normalize_images: false,
            solver: SolverConfig::default(),
            learn: LearnConfig::default(),
        }
    }
}

/// Everything a run reads from disk plus its configuration.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub images: PathBuf,
    pub kb: PathBuf,
    pub labels: Option<PathBuf>,
    /// `None` means the uniform class marginal.
    pub marginal: Option<PathBuf>,
    pub config: RunConfig,
    /// Names of configuration values that were not given explicitly.
    pub defaults_applied: Vec<String>,
}

/// In-memory inputs of a run.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub images: Matrix,
    pub kb: KnowledgeBase,
    pub gold: Option<Vec<usize>>,
    pub marginal: Option<ClassMarginal>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub mode: Mode,
    pub k: usize,
    pub normalize_images: bool,
    pub marginal: String,
    pub solver: SolverConfig,
    pub learn: LearnConfig,
    pub defaults_applied: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputSummary {
    pub images: Option<String>,
    pub kb: Option<String>,
    pub labels: Option<String>,
    pub num_images: usize,
    pub num_classes: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedClass {
    pub name: String,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverDiagnostics {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub converged: bool,
    pub final_row_violation: f64,
    pub final_col_violation: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnSummary {
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAccuracy {
    pub name: String,
    pub support: usize,
    /// `None` when the class has no gold examples.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub overall: f64,
    pub per_class: Vec<ClassAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: ResolvedConfig,
    pub inputs: InputSummary,
    pub proxies: Provenance,
    pub retrieval: Option<Vec<RetrievedClass>>,
    pub solver: Option<SolverDiagnostics>,
    pub learning: Option<LearnSummary>,
    pub accuracy: Option<AccuracyReport>,
    pub class_names: Vec<String>,
    pub predictions: Vec<usize>,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub overall: f64,
    /// `(correct, support)` per gold class.
    pub per_class: Vec<(usize, usize)>,
}

/// Fraction of exact matches, overall and per gold class.
pub fn accuracy(pred: &[usize], gold: &[usize], num_classes: usize) -> Result<Accuracy> {
    if pred.len() != gold.len() {
        return Err(Error::data(format!(
            "{} predictions but {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::data("accuracy of an empty label set"));
    }
    let mut per_class = vec![(0usize, 0usize); num_classes];
    let mut correct = 0;
    for (&p, &g) in pred.iter().zip(gold) {
        let slot = per_class.get_mut(g).ok_or_else(|| {
            Error::data(format!("gold label {g} out of range for {num_classes} classes"))
        })?;
        slot.1 += 1;
        if p == g {
            slot.0 += 1;
            correct += 1;
        }
    }
    Ok(Accuracy {
        overall: correct as f64 / gold.len() as f64,
        per_class,
    })
}

/// Overall and per-class accuracy with class names from `kb`.
pub fn accuracy_report(pred: &[usize], gold: &[usize], kb: &KnowledgeBase) -> Result<AccuracyReport> {
    let acc = accuracy(pred, gold, kb.num_classes())?;
    Ok(AccuracyReport {
        overall: acc.overall,
        per_class: kb
            .classes()
            .iter()
            .zip(acc.per_class)
            .map(|(c, (correct, support))| ClassAccuracy {
                name: c.name.clone(),
                support,
                accuracy: (support > 0).then(|| correct as f64 / support as f64),
            })
            .collect(),
    })
}

/// Loads the files named by `spec` and runs it.
pub fn run(spec: &RunSpec) -> Result<RunReport> {
    let images = io::read_embeddings(&spec.images)?;
    let kb = io::read_knowledge_base(&spec.kb, &Default::default())?;
    if images.cols() != kb.dim() {
        return Err(Error::format(
            &spec.images,
            format!(
                "image embeddings have dimension {} but {} declares dimension {}",
                images.cols(),
                spec.kb.display(),
                kb.dim()
            ),
        ));
    }
    let gold = match &spec.labels {
        Some(path) => {
            let gold = io::read_labels(path, &kb.class_names())?;
            if gold.len() != images.rows() {
                return Err(Error::format(
                    path,
                    format!("{} labels for {} images", gold.len(), images.rows()),
                ));
            }
            Some(gold)
        }
        None => None,
    };
    let marginal = match &spec.marginal {
        Some(path) => {
            let q = io::read_marginal(path)?;
            if q.len() != kb.num_classes() {
                return Err(Error::format(
                    path,
                    format!("marginal has {} entries for {} classes", q.len(), kb.num_classes()),
                ));
            }
            Some(q)
        }
        None => None,
    };
    let inputs = RunInputs {
        images,
        kb,
        gold,
        marginal,
    };
    let mut report = run_inputs(&inputs, &spec.config, spec.defaults_applied.clone())?;
    report.inputs.images = Some(spec.images.display().to_string());
    report.inputs.kb = Some(spec.kb.display().to_string());
    report.inputs.labels = spec.labels.as_ref().map(|p| p.display().to_string());
    report.config.marginal = spec
        .marginal
        .as_ref()
        .map_or_else(|| "uniform".to_string(), |p| format!("file:{}", p.display()));
    Ok(report)
}

/// Proxies a mode classifies with before any learning.
pub fn text_proxies(images: &Matrix, kb: &KnowledgeBase, mode: Mode, k: usize) -> Result<(TextProxies, Option<RetrievalResult>)> {
    match mode {
        Mode::ClipBaseline => Ok((name_proxies(&kb.name_embeddings()?)?, None)),
        Mode::DescriptionBaseline => Ok((description_mean_proxies(kb)?, None)),
        Mode::KplText | Mode::KplFull => {
            let selection = retrieve(images, kb, k)?;
            Ok((build_text_proxies(kb, &selection)?, Some(selection)))
        }
    }
}

/// Runs a configuration on already loaded inputs.
pub fn run_inputs(inputs: &RunInputs, config: &RunConfig, defaults_applied: Vec<String>) -> Result<RunReport> {
    let start = Instant::now();
    let kb = &inputs.kb;
    config.solver.validate()?;
    config.learn.validate()?;
    if inputs.marginal.is_some() && config.mode != Mode::KplFull {
        return Err(Error::usage(format!(
            "a class marginal only applies to kpl_full, not {}",
            config.mode
        )));
    }
    if inputs.images.cols() != kb.dim() {
        return Err(Error::data(format!(
            "image embeddings have dimension {} but the knowledge base has {}",
            inputs.images.cols(),
            kb.dim()
        )));
    }
    let images = if config.normalize_images {
        l2_normalize_rows(&inputs.images)?
    } else {
        inputs.images.clone()
    };

    let (proxies, selection) = text_proxies(&images, kb, config.mode, config.k)?;
    let mut solver = None;
    let mut learning = None;
    let final_proxies = if config.mode == Mode::KplFull {
        let q = inputs
            .marginal
            .clone()
            .unwrap_or_else(|| ClassMarginal::uniform(kb.num_classes()));
        let similarity = images.mul_transpose(&proxies.w)?;
        let plan = ot::solve(&similarity, &config.solver, &q)?;
        solver = Some(SolverDiagnostics {
            algorithm: config.solver.algorithm,
            iterations: plan.iterations_used(),
            converged: plan.converged(),
            final_row_violation: plan.final_row_violation(),
            final_col_violation: plan.final_col_violation(),
            objective: entropic_objective(&plan, &similarity, config.solver.tau_ot)?,
        });
        let labels = pseudo_labels(&plan)?;
        let (weights, trace) = learn(&images, &labels, &proxies, &config.learn)?;
        learning = Some(LearnSummary {
            epochs_run: trace.epochs_run,
            stop_reason: trace.stop_reason,
            initial_loss: trace.losses[0],
            final_loss: *trace.losses.last().expect("initial loss recorded"),
        });
        weights.into_matrix()
    } else {
        proxies.w.clone()
    };
    let predictions = classify(&images, &final_proxies)?;
    let accuracy = match &inputs.gold {
        Some(gold) => Some(accuracy_report(&predictions, gold, kb)?),
        None => None,
    };

    Ok(RunReport {
        config: ResolvedConfig {
            mode: config.mode,
            k: config.k,
            normalize_images: config.normalize_images,
            marginal: if inputs.marginal.is_some() { "given" } else { "uniform" }.to_string(),
            solver: config.solver,
            learn: config.learn,
            defaults_applied,
        },
        inputs: InputSummary {
            images: None,
            kb: None,
            labels: None,
            num_images: images.rows(),
            num_classes: kb.num_classes(),
            dim: kb.dim(),
        },
        proxies: proxies.provenance,
        retrieval: selection.map(|s| {
            kb.classes()
                .iter()
                .zip(s.classes)
                .map(|(c, sel)| RetrievedClass {
                    name: c.name.clone(),
                    indices: sel.indices,
                    scores: sel.scores,
                })
                .collect()
        }),
        solver,
        learning,
        accuracy,
        class_names: kb.class_names().into_iter().map(String::from).collect(),
        predictions,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchStatus {
    Ok,
    NumericOverflow,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub algorithm: Algorithm,
    pub tau_ot: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub status: BenchStatus,
    pub error: Option<String>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub final_row_violation: Option<f64>,
    pub final_col_violation: Option<f64>,
    pub objective: Option<f64>,
    pub wall_time_seconds: f64,
}

/// Runs every configuration on `m`; solver failures become table rows, not errors.
pub fn bench_solvers(m: &Matrix, configs: &[SolverConfig], q: &ClassMarginal) -> Vec<BenchRow> {
    configs
        .iter()
        .map(|cfg| {
            let start = Instant::now();
            let outcome = ot::solve(m, cfg, q).and_then(|plan| {
                let objective = entropic_objective(&plan, m, cfg.tau_ot)?;
                Ok((plan, objective))
            });
            let wall_time_seconds = start.elapsed().as_secs_f64();
            let mut row = BenchRow {
                algorithm: cfg.algorithm,
                tau_ot: cfg.tau_ot,
                max_iterations: cfg.max_iterations,
                tolerance: cfg.tolerance,
                status: BenchStatus::Ok,
                error: None,
                iterations: None,
                converged: None,
                final_row_violation: None,
                final_col_violation: None,
                objective: None,
                wall_time_seconds,
            };
            match outcome {
                Ok((plan, objective)) => {
                    row.iterations = Some(plan.iterations_used());
                    row.converged = Some(plan.converged());
                    row.final_row_violation = Some(plan.final_row_violation());
                    row.final_col_violation = Some(plan.final_col_violation());
                    row.objective = Some(objective);
                }
                Err(e) => {
                    row.status = if e.kind() == ErrorKind::Numeric {
                        BenchStatus::NumericOverflow
                    } else {
                        BenchStatus::Failed
                    };
                    row.error = Some(e.to_string());
                }
            }
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{sign_instance, uniform_instance};

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap().overall, 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1], 2).unwrap().overall, 0.0);
        let a = accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0], 2).unwrap();
        assert_eq!(a.overall, 0.75);
        assert_eq!(a.per_class, vec![(2, 3), (1, 1)]);
        assert!(accuracy(&[0], &[0, 1], 2).is_err());
        assert!(accuracy(&[], &[], 2).is_err());
        assert!(accuracy(&[0], &[5], 2).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("kpl".parse::<Mode>().is_err());
    }

    #[test]
    fn bench_on_benign_instance() {
        let m = uniform_instance(5, 12, 4);
        let q = ClassMarginal::uniform(4);
        let configs: Vec<_> = [(Algorithm::SinkhornLinear, 100_000), (Algorithm::SinkhornLog, 100_000), (Algorithm::StableGreenkhorn, 1_000_000)]
            .into_iter()
            .map(|(algorithm, max_iterations)| SolverConfig {
                tau_ot: 0.1,
                max_iterations,
                tolerance: 1e-9,
                algorithm,
            })
            .collect();
        let rows = bench_solvers(&m, &configs, &q);
        assert_eq!(rows.len(), 3);
        let objectives: Vec<f64> = rows.iter().map(|r| r.objective.unwrap()).collect();
        for r in &rows {
            assert_eq!(r.status, BenchStatus::Ok);
            assert!(r.final_row_violation.unwrap() <= 1e-9 && r.final_col_violation.unwrap() <= 1e-9);
        }
        for o in &objectives {
            assert!((o - objectives[1]).abs() <= 1e-8, "{objectives:?}");
        }
        assert!(bench_solvers(&m, &[], &q).is_empty());
    }

    #[test]
    fn bench_reports_linear_overflow() {
        let m = sign_instance(3, 16, 4);
        let q = ClassMarginal::uniform(4);
        let configs: Vec<_> = Algorithm::ALL
            .into_iter()
            .map(|algorithm| SolverConfig {
                tau_ot: 1e-3,
                algorithm,
                ..SolverConfig::default()
            })
            .collect();
        let rows = bench_solvers(&m, &configs, &q);
        assert_eq!(rows[0].status, BenchStatus::NumericOverflow);
        assert!(rows[0].error.as_deref().unwrap().contains("overflow"));
        assert_eq!(rows[1].status, BenchStatus::Ok);
        assert_eq!(rows[2].status, BenchStatus::Ok);
    }

    fn gap_inputs() -> RunInputs {
        let fx = crate::fixtures::modality_gap(&crate::fixtures::GapSpec {
            images: 60,
            ..Default::default()
        })
        .unwrap();
        RunInputs {
            images: fx.images,
            kb: fx.kb,
            gold: Some(fx.labels),
            marginal: None,
        }
    }

    #[test]
    fn zero_learning_rate_reproduces_kpl_text() {
        let inputs = gap_inputs();
        let text = run_inputs(&inputs, &RunConfig { mode: Mode::KplText, ..RunConfig::default() }, vec![]).unwrap();
        let mut cfg = RunConfig::default();
        cfg.learn.learning_rate = 0.0;
        let full = run_inputs(&inputs, &cfg, vec![]).unwrap();
        assert_eq!(full.predictions, text.predictions);
        assert!(full.solver.is_some() && full.learning.is_some());
        assert!(text.solver.is_none() && text.learning.is_none());
    }

    #[test]
    fn baselines_are_equivariant_under_class_relabeling() {
        let inputs = gap_inputs();
        let k = inputs.kb.num_classes();
        let perm: Vec<usize> = (0..k).map(|j| (j + 2) % k).collect();
        let classes = perm.iter().map(|&j| inputs.kb.classes()[j].clone()).collect();
        let permuted = RunInputs {
            kb: KnowledgeBase::new(inputs.kb.dim(), classes).unwrap(),
            gold: None,
            ..inputs.clone()
        };
        for mode in [Mode::ClipBaseline, Mode::DescriptionBaseline] {
            let cfg = RunConfig { mode, ..RunConfig::default() };
            let a = run_inputs(&inputs, &cfg, vec![]).unwrap().predictions;
            let b = run_inputs(&permuted, &cfg, vec![]).unwrap().predictions;
            let relabeled: Vec<usize> = b.iter().map(|&p| perm[p]).collect();
            assert_eq!(a, relabeled, "{mode}");
        }
    }

    #[test]
    fn missing_gold_omits_accuracy() {
        let inputs = RunInputs { gold: None, ..gap_inputs() };
        let report = run_inputs(&inputs, &RunConfig { mode: Mode::KplText, ..RunConfig::default() }, vec![]).unwrap();
        assert!(report.accuracy.is_none());
        assert_eq!(report.predictions.len(), 60);
    }

    #[test]
    fn marginal_requires_kpl_full() {
        let inputs = RunInputs {
            marginal: Some(ClassMarginal::uniform(5)),
            ..gap_inputs()
        };
        let err = run_inputs(&inputs, &RunConfig { mode: Mode::KplText, ..RunConfig::default() }, vec![]).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Usage);
        assert!(run_inputs(&inputs, &RunConfig::default(), vec![]).is_ok());
    }
}
