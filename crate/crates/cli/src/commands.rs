use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use kpl_core::fixtures::{class_name, modality_gap, sign_instance, uniform_instance, GapSpec};
use kpl_core::io::{self, Dtype};
use kpl_core::numerics::{l2_normalize_rows, Matrix};
use kpl_core::ot::{self, Algorithm, ClassMarginal, PseudoLabels, SolverConfig};
use kpl_core::pipeline::{self, BenchRow, BenchStatus, Mode, RunConfig, RunSpec, SolverDiagnostics, AccuracyReport};
use kpl_core::proxy::{self, LearnConfig, ProxyWeights, StopReason};
use kpl_core::retrieval::{self, KnowledgeBase, Provenance, TextProxies, DEFAULT_K};
use kpl_core::{Error, Result};
use serde::Serialize;

use crate::args::*;

/// Collects the names of options that fell back to their defaults.
#[derive(Default)]
struct Defaults(Vec<String>);

impl Defaults {
    fn pick<T>(&mut self, value: Option<T>, name: &str, default: T) -> T {
        value.unwrap_or_else(|| {
            self.0.push(name.to_string());
            default
        })
    }
}

fn solver_config(o: &SolverOpts, d: &mut Defaults) -> Result<SolverConfig> {
    let base = SolverConfig::default();
    let cfg = SolverConfig {
        tau_ot: d.pick(o.tau_ot, "tau_ot", base.tau_ot),
        max_iterations: d.pick(o.max_iterations, "max_iterations", base.max_iterations),
        tolerance: d.pick(o.tolerance, "tolerance", base.tolerance),
        algorithm: d.pick(o.algorithm, "algorithm", base.algorithm),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn learn_config(o: &LearnOpts, d: &mut Defaults) -> Result<LearnConfig> {
    let base = LearnConfig::default();
    let cfg = LearnConfig {
        tau_learn: d.pick(o.tau_learn, "tau_learn", base.tau_learn),
        learning_rate: d.pick(o.lr, "learning_rate", base.learning_rate),
        momentum: d.pick(o.momentum, "momentum", base.momentum),
        max_epochs: d.pick(o.epochs, "max_epochs", base.max_epochs),
        loss_tolerance: d.pick(o.loss_tolerance, "loss_tolerance", base.loss_tolerance),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(path) => io::write_json(path, value),
        None => {
            let text = serde_json::to_string_pretty(value)
                .map_err(|e| Error::Internal(format!("serializing report: {e}")))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn read_images(path: &Path, normalize: bool) -> Result<Matrix> {
    let images = io::read_embeddings(path)?;
    if normalize {
        l2_normalize_rows(&images).map_err(|e| Error::format(path, e.to_string()))
    } else {
        Ok(images)
    }
}

fn read_kb(path: &Path) -> Result<KnowledgeBase> {
    io::read_knowledge_base(path, &BTreeMap::new())
}

fn check_width(m: &Matrix, path: &Path, expected: usize, what: &str) -> Result<()> {
    if m.cols() != expected {
        return Err(Error::format(
            path,
            format!("has {} columns, expected {expected} ({what})", m.cols()),
        ));
    }
    Ok(())
}

fn load_inputs(input: &InputArgs) -> Result<(Matrix, KnowledgeBase)> {
    let images = read_images(&input.images, input.normalize_images)?;
    let kb = read_kb(&input.kb)?;
    check_width(&images, &input.images, kb.dim(), "the knowledge-base dimension")?;
    Ok((images, kb))
}

fn marginal_label(path: Option<&PathBuf>) -> String {
    path.map_or_else(|| "uniform".to_string(), |p| format!("file:{}", p.display()))
}

fn read_marginal(path: Option<&PathBuf>, classes: usize, d: &mut Defaults) -> Result<ClassMarginal> {
    match path {
        Some(p) => {
            let q = io::read_marginal(p)?;
            if q.len() != classes {
                return Err(Error::format(
                    p,
                    format!("marginal has {} entries, expected {classes} (one per class)", q.len()),
                ));
            }
            Ok(q)
        }
        None => {
            d.0.push("marginal".to_string());
            Ok(ClassMarginal::uniform(classes))
        }
    }
}

#[derive(Serialize)]
struct RetrievedDescriptions {
    name: String,
    indices: Vec<usize>,
    scores: Vec<f64>,
    descriptions: Vec<String>,
}

#[derive(Serialize)]
struct RetrieveReport {
    k: usize,
    normalize_images: bool,
    defaults_applied: Vec<String>,
    classes: Vec<RetrievedDescriptions>,
}

pub fn retrieve(a: &RetrieveArgs) -> Result<()> {
    let mut d = Defaults::default();
    let k = d.pick(a.k, "k", DEFAULT_K);
    let (images, kb) = load_inputs(&a.input)?;
    let selection = retrieval::retrieve(&images, &kb, k)?;
    if let Some(path) = &a.proxies {
        let proxies = retrieval::build_text_proxies(&kb, &selection)?;
        io::write_embeddings(path, &proxies.w, Dtype::F64)?;
    }
    let classes = kb
        .classes()
        .iter()
        .zip(selection.classes)
        .map(|(c, s)| RetrievedDescriptions {
            name: c.name.clone(),
            descriptions: s.indices.iter().map(|&l| c.descriptions[l].clone()).collect(),
            indices: s.indices,
            scores: s.scores,
        })
        .collect();
    emit(
        a.out.as_deref(),
        &RetrieveReport {
            k,
            normalize_images: a.input.normalize_images,
            defaults_applied: d.0,
            classes,
        },
    )
}

#[derive(Serialize)]
struct PlanConfig {
    k: usize,
    normalize_images: bool,
    marginal: String,
    solver: SolverConfig,
    defaults_applied: Vec<String>,
}

#[derive(Serialize)]
struct PlanReport {
    config: PlanConfig,
    class_names: Vec<String>,
    solver: SolverDiagnostics,
}

pub fn plan(a: &PlanArgs) -> Result<()> {
    let mut d = Defaults::default();
    let k = d.pick(a.k, "k", DEFAULT_K);
    let cfg = solver_config(&a.solver, &mut d)?;
    let (images, kb) = load_inputs(&a.input)?;
    let q = read_marginal(a.marginal.as_ref(), kb.num_classes(), &mut d)?;
    let selection = retrieval::retrieve(&images, &kb, k)?;
    let proxies = retrieval::build_text_proxies(&kb, &selection)?;
    let m = images.mul_transpose(&proxies.w)?;
    let plan = ot::solve(&m, &cfg, &q)?;
    let diagnostics = SolverDiagnostics {
        algorithm: cfg.algorithm,
        iterations: plan.iterations_used(),
        converged: plan.converged(),
        final_row_violation: plan.final_row_violation(),
        final_col_violation: plan.final_col_violation(),
        objective: ot::entropic_objective(&plan, &m, cfg.tau_ot)?,
    };
    if !plan.converged() {
        eprintln!(
            "warning: {} stopped after {} iterations with marginal violations {:.3e} / {:.3e}",
            cfg.algorithm,
            plan.iterations_used(),
            plan.final_row_violation(),
            plan.final_col_violation()
        );
    }
    if let Some(path) = &a.pseudo_labels {
        io::write_embeddings(path, ot::pseudo_labels(&plan)?.matrix(), Dtype::F64)?;
    }
    emit(
        a.out.as_deref(),
        &PlanReport {
            config: PlanConfig {
                k,
                normalize_images: a.input.normalize_images,
                marginal: marginal_label(a.marginal.as_ref()),
                solver: cfg,
                defaults_applied: d.0,
            },
            class_names: kb.class_names().into_iter().map(String::from).collect(),
            solver: diagnostics,
        },
    )
}

#[derive(Serialize)]
struct LearnReportConfig {
    normalize_images: bool,
    learn: LearnConfig,
    defaults_applied: Vec<String>,
}

#[derive(Serialize)]
struct LearnReport {
    config: LearnReportConfig,
    epochs_run: usize,
    stop_reason: StopReason,
    losses: Vec<f64>,
}

pub fn learn(a: &LearnArgs) -> Result<()> {
    let mut d = Defaults::default();
    let cfg = learn_config(&a.learn, &mut d)?;
    let images = read_images(&a.images, a.normalize_images)?;
    let init = io::read_embeddings(&a.proxies)?;
    check_width(&init, &a.proxies, images.cols(), "the image dimension")?;
    let init = ProxyWeights::new(init)
        .map_err(|e| Error::format(&a.proxies, e.to_string()))?
        .into_matrix();
    let labels = io::read_embeddings(&a.pseudo_labels)?;
    if labels.rows() != images.rows() {
        return Err(Error::format(
            &a.pseudo_labels,
            format!("has {} rows, expected {} (one per image)", labels.rows(), images.rows()),
        ));
    }
    check_width(&labels, &a.pseudo_labels, init.rows(), "one column per proxy")?;
    let labels = PseudoLabels::new(labels).map_err(|e| Error::format(&a.pseudo_labels, e.to_string()))?;
    let init = TextProxies {
        w: init,
        provenance: Provenance::RetrievedMean,
    };
    let (weights, trace) = proxy::learn(&images, &labels, &init, &cfg)?;
    if let Some(path) = &a.weights {
        io::write_embeddings(path, weights.matrix(), Dtype::F64)?;
    }
    emit(
        a.out.as_deref(),
        &LearnReport {
            config: LearnReportConfig {
                normalize_images: a.normalize_images,
                learn: cfg,
                defaults_applied: d.0,
            },
            epochs_run: trace.epochs_run,
            stop_reason: trace.stop_reason,
            losses: trace.losses,
        },
    )
}

pub fn classify(a: &ClassifyArgs) -> Result<()> {
    let images = io::read_embeddings(&a.images)?;
    let proxies = io::read_embeddings(&a.proxies)?;
    let kb = read_kb(&a.kb)?;
    check_width(&proxies, &a.proxies, images.cols(), "the image dimension")?;
    if proxies.rows() != kb.num_classes() {
        return Err(Error::format(
            &a.proxies,
            format!("has {} rows, expected {} (one per class)", proxies.rows(), kb.num_classes()),
        ));
    }
    let predictions = proxy::classify(&images, &proxies)?;
    io::write_predictions(&a.out, &predictions, &kb.class_names())
}

#[derive(Serialize)]
struct EvalReport {
    num_predictions: usize,
    accuracy: AccuracyReport,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let kb = read_kb(&a.kb)?;
    let names = kb.class_names();
    let predictions = io::read_predictions(&a.predictions, &names)?;
    let gold = io::read_labels(&a.labels, &names)?;
    if gold.len() != predictions.len() {
        return Err(Error::format(
            &a.labels,
            format!("has {} labels, expected {} (one per prediction)", gold.len(), predictions.len()),
        ));
    }
    let accuracy = pipeline::accuracy_report(&predictions, &gold, &kb)?;
    emit(
        a.out.as_deref(),
        &EvalReport {
            num_predictions: predictions.len(),
            accuracy,
        },
    )
}

pub fn run_pipeline(a: &PipelineArgs) -> Result<()> {
    let mut d = Defaults::default();
    let mode = d.pick(a.mode, "mode", Mode::KplFull);
    let k = d.pick(a.k, "k", DEFAULT_K);
    let solver = solver_config(&a.solver, &mut d)?;
    let learn = learn_config(&a.learn, &mut d)?;
    if a.marginal.is_none() {
        d.0.push("marginal".to_string());
    }
    let predictions_path = a.predictions.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    if predictions_path == a.out {
        return Err(Error::usage("--predictions must differ from --out"));
    }
    let spec = RunSpec {
        images: a.input.images.clone(),
        kb: a.input.kb.clone(),
        labels: a.labels.clone(),
        marginal: a.marginal.clone(),
        config: RunConfig {
            mode,
            k,
            normalize_images: a.input.normalize_images,
            solver,
            learn,
        },
        defaults_applied: d.0,
    };
    let report = pipeline::run(&spec)?;
    if let Some(s) = &report.solver {
        if !s.converged {
            eprintln!(
                "warning: {} stopped after {} iterations with marginal violations {:.3e} / {:.3e}",
                s.algorithm, s.iterations, s.final_row_violation, s.final_col_violation
            );
        }
    }
    let names: Vec<&str> = report.class_names.iter().map(String::as_str).collect();
    io::write_predictions(&predictions_path, &report.predictions, &names)?;
    io::write_json(&a.out, &report)
}

#[derive(Serialize)]
struct BenchConfig {
    instance: String,
    rows: usize,
    cols: usize,
    seed: Option<u64>,
    marginal: String,
    defaults_applied: Vec<String>,
}

#[derive(Serialize)]
struct BenchReport {
    config: BenchConfig,
    results: Vec<BenchRow>,
}

pub fn bench_ot(a: &BenchArgs) -> Result<()> {
    let mut d = Defaults::default();
    let base = SolverConfig::default();
    let tau_ot = d.pick(a.solver.tau_ot, "tau_ot", base.tau_ot);
    let max_iterations = d.pick(a.solver.max_iterations, "max_iterations", base.max_iterations);
    let tolerance = d.pick(a.solver.tolerance, "tolerance", base.tolerance);
    let algorithms = match a.solver.algorithm {
        Some(alg) => vec![alg],
        None => {
            d.0.push("algorithm".to_string());
            Algorithm::ALL.to_vec()
        }
    };
    let configs: Vec<SolverConfig> = algorithms
        .into_iter()
        .map(|algorithm| SolverConfig {
            tau_ot,
            max_iterations,
            tolerance,
            algorithm,
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }

    let (m, instance, seed) = match &a.matrix {
        Some(path) => (io::read_embeddings(path)?, format!("file:{}", path.display()), None),
        None => {
            let kind = d.pick(a.instance, "instance", Instance::Uniform);
            let rows = d.pick(a.rows, "rows", 64);
            let cols = d.pick(a.cols, "cols", 8);
            let seed = d.pick(a.seed, "seed", 0);
            if rows == 0 || cols == 0 {
                return Err(Error::usage("--rows and --cols must be positive"));
            }
            let (m, name) = match kind {
                Instance::Uniform => (uniform_instance(seed, rows, cols), "uniform"),
                Instance::Stress => (sign_instance(seed, rows, cols), "stress"),
            };
            (m, name.to_string(), Some(seed))
        }
    };
    let q = read_marginal(a.marginal.as_ref(), m.cols(), &mut d)?;
    let results = pipeline::bench_solvers(&m, &configs, &q);
    let failures: Vec<String> = results
        .iter()
        .filter(|r| r.status != BenchStatus::Ok)
        .map(|r| r.error.clone().unwrap_or_else(|| format!("{} failed", r.algorithm)))
        .collect();
    emit(
        a.out.as_deref(),
        &BenchReport {
            config: BenchConfig {
                instance,
                rows: m.rows(),
                cols: m.cols(),
                seed,
                marginal: marginal_label(a.marginal.as_ref()),
                defaults_applied: d.0,
            },
            results,
        },
    )?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(failures.join("; ")))
    }
}

#[derive(Serialize)]
struct Manifest {
    spec: GapSpec,
    defaults_applied: Vec<String>,
    files: Vec<&'static str>,
    class_names: Vec<String>,
}

pub fn gen_fixture(a: &GenFixtureArgs) -> Result<()> {
    let mut d = Defaults::default();
    let base = GapSpec::default();
    let spec = GapSpec {
        seed: a.seed,
        images: d.pick(a.num_images, "num_images", base.images),
        classes: d.pick(a.classes, "classes", base.classes),
        dim: d.pick(a.dim, "dim", base.dim),
        separation: d.pick(a.separation, "separation", base.separation),
        spread: d.pick(a.spread, "spread", base.spread),
        angle_degrees: d.pick(a.angle, "angle", base.angle_degrees),
        offset: d.pick(a.offset, "offset", base.offset),
        noise: d.pick(a.noise, "noise", base.noise),
        descriptions_per_class: d.pick(a.descriptions, "descriptions", base.descriptions_per_class),
        name_noise_factor: d.pick(a.name_noise_factor, "name_noise_factor", base.name_noise_factor),
    };
    let fx = modality_gap(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    io::write_embeddings(a.out.join("images.emb"), &fx.images, Dtype::F64)?;
    io::write_knowledge_base(a.out.join("kb.json"), &fx.kb)?;
    io::write_labels(a.out.join("labels.txt"), &fx.labels, &fx.kb.class_names())?;
    io::write_json(
        a.out.join("manifest.json"),
        &Manifest {
            class_names: (0..spec.classes).map(class_name).collect(),
            spec,
            defaults_applied: d.0,
            files: vec!["images.emb", "kb.json", "labels.txt"],
        },
    )
}
