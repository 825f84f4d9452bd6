use kpl_core::numerics::{l2_normalize_rows, softmax_rows, Matrix};
use kpl_core::fixtures::{modality_gap, GapSpec};
use kpl_core::ot::{pseudo_labels, solve, ClassMarginal, PseudoLabels, SolverConfig};
use kpl_core::pipeline::{text_proxies, Mode};
use kpl_core::proxy::{classify, gradient, learn, loss, LearnConfig};
use kpl_core::retrieval::{Provenance, TextProxies, DEFAULT_K};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Random unit images, unit proxies and soft labels for an `n × k × d` problem.
fn instance(seed: u64, n: usize, k: usize, d: usize) -> (Matrix, Matrix, PseudoLabels) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = l2_normalize_rows(&gaussian(&mut rng, n, d)).unwrap();
    let w = l2_normalize_rows(&gaussian(&mut rng, k, d)).unwrap();
    let labels = PseudoLabels::new(softmax_rows(&gaussian(&mut rng, n, k), 1.0).unwrap()).unwrap();
    (images, w, labels)
}

fn central_difference(w: &Matrix, images: &Matrix, labels: &PseudoLabels, tau: f64, h: f64) -> Matrix {
    let mut fd = Matrix::zeros(w.rows(), w.cols());
    for j in 0..w.rows() {
        for c in 0..w.cols() {
            let mut plus = w.clone();
            plus[(j, c)] += h;
            let mut minus = w.clone();
            minus[(j, c)] -= h;
            let diff = loss(&plus, images, labels, tau).unwrap() - loss(&minus, images, labels, tau).unwrap();
            fd[(j, c)] = diff / (2.0 * h);
        }
    }
    fd
}

fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(b.data().iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(f64::MIN_POSITIVE)
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    for seed in 0..5 {
        for tau in [0.01, 0.1, 1.0] {
            let (images, w, labels) = instance(seed, 10, 4, 8);
            let g = gradient(&w, &images, &labels, tau).unwrap();
            let fd = central_difference(&w, &images, &labels, tau, 1e-4);
            let err = relative_error(&g, &fd);
            assert!(err <= 1e-4, "seed {seed} tau {tau}: {err}");
        }
    }
}

#[test]
fn loss_at_matching_labels_is_zero() {
    let (images, w, _) = instance(7, 10, 4, 8);
    let tau = 0.05;
    let matching = PseudoLabels::new(softmax_rows(&images.mul_transpose(&w).unwrap(), tau).unwrap()).unwrap();
    assert!(loss(&w, &images, &matching, tau).unwrap() <= 1e-12);
}

#[test]
fn separable_clusters_are_classified_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k, d, per_class) = (4, 16, 25);
    let centers = l2_normalize_rows(&gaussian(&mut rng, k, d)).unwrap();
    let mut rows = Vec::new();
    let mut gold = Vec::new();
    for i in 0..k * per_class {
        let j = i % k;
        let row: Vec<f64> = centers.row(j).iter().map(|c| c + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
        rows.push(row);
        gold.push(j);
    }
    let images = l2_normalize_rows(&Matrix::from_rows(&rows).unwrap()).unwrap();
    let hard: Vec<Vec<f64>> = gold.iter().map(|&j| (0..k).map(|c| if c == j { 1.0 } else { 0.0 }).collect()).collect();
    let labels = PseudoLabels::new(Matrix::from_rows(&hard).unwrap()).unwrap();
    // Start from centers pulled toward a neighbouring class.
    let init_rows: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let other = centers.row((j + 1) % k);
            centers.row(j).iter().zip(other).map(|(a, b)| a + 0.8 * b).collect()
        })
        .collect();
    let init = TextProxies {
        w: l2_normalize_rows(&Matrix::from_rows(&init_rows).unwrap()).unwrap(),
        provenance: Provenance::RetrievedMean,
    };
    let cfg = LearnConfig {
        tau_learn: 0.05,
        ..LearnConfig::default()
    };
    let (w, trace) = learn(&images, &labels, &init, &cfg).unwrap();
    assert!(trace.losses.last().unwrap() < &trace.losses[0]);
    assert_eq!(classify(&images, w.matrix()).unwrap(), gold);
}

#[test]
fn default_learning_is_monotone_on_gap_fixture() {
    let fx = modality_gap(&GapSpec::default()).unwrap();
    let (proxies, _) = text_proxies(&fx.images, &fx.kb, Mode::KplFull, DEFAULT_K).unwrap();
    let m = fx.images.mul_transpose(&proxies.w).unwrap();
    let plan = solve(&m, &SolverConfig::default(), &ClassMarginal::uniform(fx.kb.num_classes())).unwrap();
    let labels = pseudo_labels(&plan).unwrap();
    let cfg = LearnConfig {
        max_epochs: 50,
        loss_tolerance: 0.0,
        ..LearnConfig::default()
    };
    let (_, trace) = learn(&fx.images, &labels, &proxies, &cfg).unwrap();
    assert_eq!(trace.epochs_run, 50);
    for (e, w) in trace.losses.windows(2).enumerate() {
        assert!(w[1] <= w[0], "loss rose at epoch {}: {} -> {}", e + 1, w[0], w[1]);
    }
}
