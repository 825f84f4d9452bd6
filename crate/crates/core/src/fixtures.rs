//! Seeded synthetic data: OT instances and a modality-gap classification set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, norm, Matrix};
use crate::retrieval::{ClassRecord, KnowledgeBase};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows × cols` entries i.i.d. uniform in `[-1, 1]`.
pub fn uniform_instance(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = rng(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Matrix::new(rows, cols, data).expect("shape matches")
}

/// `rows × cols` entries drawn from `{-1, +1}`.
pub fn sign_instance(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = rng(seed);
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Matrix::new(rows, cols, data).expect("shape matches")
}

/// Parameters of the modality-gap fixture.
///
/// Image embeddings are unit-normalized Gaussian clusters. Text embeddings are
/// noisy copies of the cluster means, rotated by a fixed angle and shifted by a
/// constant offset, so that text proxies sit systematically apart from the
/// images they describe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapSpec {
    pub seed: u64,
    pub images: usize,
    pub classes: usize,
    pub dim: usize,
    /// Length of the class-specific component of each cluster mean; the shared
    /// component has unit length, so smaller values give closer clusters.
    pub separation: f64,
    /// Norm of the per-image noise relative to its unit cluster mean.
    pub spread: f64,
    pub angle_degrees: f64,
    pub offset: f64,
    /// Norm of the per-description noise.
    pub noise: f64,
    pub descriptions_per_class: usize,
    /// Class-name embeddings get `noise × name_noise_factor` noise.
    pub name_noise_factor: f64,
}

impl Default for GapSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            images: 300,
            classes: 5,
            dim: 32,
            separation: 0.6,
            spread: 0.2,
            angle_degrees: 25.0,
            offset: 0.3,
            noise: 0.05,
            descriptions_per_class: 20,
            name_noise_factor: 20.0,
        }
    }
}

impl GapSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::usage(msg));
        if self.images == 0 {
            return bad("fixture needs at least one image".into());
        }
        if self.classes < 2 {
            return bad(format!("fixture needs at least 2 classes, got {}", self.classes));
        }
        if self.dim < 2 {
            return bad(format!("fixture dimension must be >= 2, got {}", self.dim));
        }
        if self.descriptions_per_class == 0 {
            return bad("fixture needs at least one description per class".into());
        }
        for (name, v) in [
            ("separation", self.separation),
            ("spread", self.spread),
            ("offset", self.offset),
            ("noise", self.noise),
            ("name noise factor", self.name_noise_factor),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !self.angle_degrees.is_finite() || !(0.0..=180.0).contains(&self.angle_degrees) {
            return bad(format!("angle must be in [0, 180] degrees, got {}", self.angle_degrees));
        }
        if self.separation == 0.0 {
            return bad("separation must be > 0 or all classes coincide".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GapFixture {
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub kb: KnowledgeBase,
    pub cluster_means: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `base + scale · g` with `g` Gaussian of expected squared norm 1, normalized.
fn noisy_unit(rng: &mut ChaCha8Rng, base: &[f64], scale: f64) -> Vec<f64> {
    let dim = base.len();
    let g = gaussian(rng, dim);
    let s = scale / (dim as f64).sqrt();
    let v: Vec<f64> = base.iter().zip(&g).map(|(b, x)| b + s * x).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Random orthonormal basis, one vector per row (Gram–Schmidt on Gaussian draws).
fn random_basis(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = gaussian(rng, dim);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Rotation by `angle` inside each consecutive pair of basis vectors. For even
/// dimensions every vector is turned by exactly `angle`.
fn rotate(basis: &[Vec<f64>], angle: f64, v: &[f64]) -> Vec<f64> {
    let (sin, cos) = angle.sin_cos();
    let mut out = v.to_vec();
    for pair in basis.chunks_exact(2) {
        let (u, w) = (&pair[0], &pair[1]);
        let (a, b) = (dot(v, u), dot(v, w));
        let (ra, rb) = (cos * a - sin * b, sin * a + cos * b);
        for ((o, uu), ww) in out.iter_mut().zip(u).zip(w) {
            *o += (ra - a) * uu + (rb - b) * ww;
        }
    }
    out
}

pub fn class_name(j: usize) -> String {
    format!("class_{j}")
}

pub fn modality_gap(spec: &GapSpec) -> Result<GapFixture> {
    spec.validate()?;
    let mut rng = rng(spec.seed);
    let (k, d) = (spec.classes, spec.dim);

    let shared = unit_gaussian(&mut rng, d);
    let mut means = Matrix::zeros(k, d);
    for j in 0..k {
        let own = unit_gaussian(&mut rng, d);
        for (m, (s, o)) in means.row_mut(j).iter_mut().zip(shared.iter().zip(&own)) {
            *m = s + spec.separation * o;
        }
    }
    let means = l2_normalize_rows(&means)?;

    let labels: Vec<usize> = (0..spec.images).map(|i| i % k).collect();
    let mut images = Matrix::zeros(spec.images, d);
    for (i, &y) in labels.iter().enumerate() {
        let x = noisy_unit(&mut rng, means.row(y), spec.spread);
        images.row_mut(i).copy_from_slice(&x);
    }

    let basis = random_basis(&mut rng, d);
    let angle = spec.angle_degrees.to_radians();
    let offset: Vec<f64> = unit_gaussian(&mut rng, d)
        .into_iter()
        .map(|x| x * spec.offset)
        .collect();

    let mut classes = Vec::with_capacity(k);
    for j in 0..k {
        let center: Vec<f64> = rotate(&basis, angle, means.row(j))
            .iter()
            .zip(&offset)
            .map(|(a, b)| a + b)
            .collect();
        let mut embeddings = Matrix::zeros(spec.descriptions_per_class, d);
        for l in 0..spec.descriptions_per_class {
            let t = noisy_unit(&mut rng, &center, spec.noise);
            embeddings.row_mut(l).copy_from_slice(&t);
        }
        let name_embedding = noisy_unit(&mut rng, &center, spec.noise * spec.name_noise_factor);
        classes.push(ClassRecord {
            name: class_name(j),
            descriptions: (0..spec.descriptions_per_class)
                .map(|l| format!("visual feature {l} of {}", class_name(j)))
                .collect(),
            embeddings,
            name_embedding: Some(name_embedding),
        });
    }

    Ok(GapFixture {
        images,
        labels,
        kb: KnowledgeBase::new(d, classes)?,
        cluster_means: means,
    })
}
