//! Visual-based retrieval of class descriptions and text proxy construction.
//!
//! Each description in the knowledge base is scored by its cosine similarity
//! to the mean image embedding of the whole dataset; the top `k` per class are
//! averaged into that class's text proxy.

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{cosine, l2_normalize_rows, norm, Matrix};

/// Tolerance on the unit norm of stored embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub name: String,
    pub descriptions: Vec<String>,
    /// One unit row per description.
    pub embeddings: Matrix,
    /// Encoded class name, needed only by the name-proxy baseline.
    pub name_embedding: Option<Vec<f64>>,
}

/// Per-class pools of descriptions with their precomputed text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    dim: usize,
    classes: Vec<ClassRecord>,
}

impl KnowledgeBase {
    pub fn new(dim: usize, classes: Vec<ClassRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::data("knowledge base dimension must be >= 1"));
        }
        if classes.is_empty() {
            return Err(Error::data("knowledge base has no classes"));
        }
        let mut seen = HashSet::new();
        for class in &classes {
            let name = &class.name;
            if !seen.insert(name.as_str()) {
                return Err(Error::data(format!("duplicate class name '{name}'")));
            }
            let n = class.descriptions.len();
            if n == 0 {
                return Err(Error::data(format!("class '{name}' has no descriptions")));
            }
            if class.embeddings.rows() != n {
                return Err(Error::data(format!(
                    "class '{name}' has {n} descriptions but {} embedding rows",
                    class.embeddings.rows()
                )));
            }
            if class.embeddings.cols() != dim {
                return Err(Error::data(format!(
                    "class '{name}' embeddings have dimension {}, expected {dim}",
                    class.embeddings.cols()
                )));
            }
            for (l, row) in class.embeddings.row_iter().enumerate() {
                check_unit(row, || format!("class '{name}' description {l}"))?;
            }
            if let Some(e) = &class.name_embedding {
                if e.len() != dim {
                    return Err(Error::data(format!(
                        "class '{name}' name embedding has dimension {}, expected {dim}",
                        e.len()
                    )));
                }
                check_unit(e, || format!("class '{name}' name embedding"))?;
            }
        }
        Ok(Self { dim, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// `K × d` matrix of class-name embeddings.
    pub fn name_embeddings(&self) -> Result<Matrix> {
        let rows = self
            .classes
            .iter()
            .map(|c| {
                c.name_embedding.clone().ok_or_else(|| {
                    Error::data(format!(
                        "class '{}' has no name embedding; the class-name baseline needs one per class",
                        c.name
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }
}

fn check_unit(row: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    let n = norm(row);
    if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::data(format!("{} has norm {n}, expected unit norm", what())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSelection {
    /// Indices into the class's description list, best first.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub k: usize,
    pub classes: Vec<ClassSelection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ClassNames,
    DescriptionMean,
    RetrievedMean,
}

/// One unit-norm reference vector per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextProxies {
    pub w: Matrix,
    pub provenance: Provenance,
}

/// Arithmetic mean of the image rows, deliberately not re-normalized.
pub fn mean_image_feature(images: &Matrix) -> Result<Vec<f64>> {
    if images.rows() == 0 {
        return Err(Error::usage("cannot average an empty image set"));
    }
    let mut mean = vec![0.0; images.cols()];
    for row in images.row_iter() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let n = images.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

pub fn score_descriptions(mean_feat: &[f64], kb: &KnowledgeBase, class_index: usize) -> Result<Vec<f64>> {
    let class = kb.classes.get(class_index).ok_or_else(|| {
        Error::usage(format!(
            "class index {class_index} out of range for {} classes",
            kb.num_classes()
        ))
    })?;
    if norm(mean_feat) == 0.0 {
        return Err(Error::data(
            "mean image feature is the zero vector; description scores are undefined",
        ));
    }
    class.embeddings.row_iter().map(|e| cosine(mean_feat, e)).collect()
}

/// Indices of the `k` largest scores, best first; equal scores keep index order.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::usage(format!("top-k needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower indices first among ties
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    Ok(order)
}

/// Scores and selects the top `k` descriptions of every class.
pub fn retrieve(images: &Matrix, kb: &KnowledgeBase, k: usize) -> Result<RetrievalResult> {
    if images.cols() != kb.dim() {
        return Err(Error::data(format!(
            "image embeddings have dimension {} but the knowledge base has {}",
            images.cols(),
            kb.dim()
        )));
    }
    let mean = mean_image_feature(images)?;
    let classes = (0..kb.num_classes())
        .map(|j| {
            let scores = score_descriptions(&mean, kb, j)?;
            let indices = top_k(&scores, k).map_err(|_| {
                Error::usage(format!(
                    "k = {k} exceeds the {} descriptions of class '{}'",
                    scores.len(),
                    kb.classes[j].name
                ))
            })?;
            let scores = indices.iter().map(|&l| scores[l]).collect();
            Ok(ClassSelection { indices, scores })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalResult { k, classes })
}

/// Normalized mean of each class's selected description embeddings.
pub fn build_text_proxies(kb: &KnowledgeBase, selection: &RetrievalResult) -> Result<TextProxies> {
    if selection.classes.len() != kb.num_classes() {
        return Err(Error::usage(format!(
            "selection covers {} classes, knowledge base has {}",
            selection.classes.len(),
            kb.num_classes()
        )));
    }
    let mut w = Matrix::zeros(kb.num_classes(), kb.dim());
    for (j, (class, sel)) in kb.classes.iter().zip(&selection.classes).enumerate() {
        if sel.indices.is_empty() {
            return Err(Error::usage(format!("empty selection for class '{}'", class.name)));
        }
        if let Some(&bad) = sel.indices.iter().find(|&&l| l >= class.descriptions.len()) {
            return Err(Error::usage(format!(
                "selected description {bad} out of range for class '{}'",
                class.name
            )));
        }
        mean_into(w.row_mut(j), sel.indices.iter().map(|&l| class.embeddings.row(l)));
    }
    Ok(TextProxies {
        w: l2_normalize_rows(&w)?,
        provenance: Provenance::RetrievedMean,
    })
}

/// Proxies from the mean of every description of each class.
pub fn description_mean_proxies(kb: &KnowledgeBase) -> Result<TextProxies> {
    let mut w = Matrix::zeros(kb.num_classes(), kb.dim());
    for (j, class) in kb.classes.iter().enumerate() {
        mean_into(w.row_mut(j), class.embeddings.row_iter());
    }
    Ok(TextProxies {
        w: l2_normalize_rows(&w)?,
        provenance: Provenance::DescriptionMean,
    })
}

pub fn name_proxies(names_emb: &Matrix) -> Result<TextProxies> {
    if names_emb.rows() < 2 {
        return Err(Error::usage(format!(
            "class-name proxies need at least 2 classes, got {}",
            names_emb.rows()
        )));
    }
    for (j, row) in names_emb.row_iter().enumerate() {
        check_unit(row, || format!("class name embedding {j}"))?;
    }
    Ok(TextProxies {
        w: names_emb.clone(),
        provenance: Provenance::ClassNames,
    })
}

fn mean_into<'a>(out: &mut [f64], rows: impl Iterator<Item = &'a [f64]>) {
    let mut count = 0usize;
    for row in rows {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
        count += 1;
    }
    out.iter_mut().for_each(|o| *o /= count as f64);
}
