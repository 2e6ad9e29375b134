//! Geometry of the task-embedding space.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::taskgen::{TaskDataset, TaskEmbedding};

/// Where a set of embeddings came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    /// Norm-preserving directional corruption.
    Corrupted { sigma_c: f64 },
    /// Additive isotropic Gaussian noise.
    Noisy { sd: f64 },
    /// Feature-label correlation vectors reduced by PCA.
    Correlation,
    Expert,
}

/// Named rows of embeddings sharing one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    rows: Vec<TaskEmbedding>,
    d: usize,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingSetRecord {
    ids: Vec<String>,
    d: usize,
    provenance: Provenance,
    rows: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, rows: Vec<TaskEmbedding>, provenance: Provenance) -> Result<Self> {
        check_dim(ids.len(), rows.len())?;
        let d = rows.first().map(TaskEmbedding::dim).unwrap_or(0);
        for z in &rows {
            check_dim(d, z.dim())?;
            if !z.is_finite() {
                return Err(Error::Domain("embedding rows must be finite".into()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Domain(format!("duplicate embedding id {id}")));
            }
        }
        Ok(EmbeddingSet { ids, rows, d, provenance })
    }

    pub fn from_tasks(tasks: &[TaskDataset], rows: Vec<TaskEmbedding>, provenance: Provenance) -> Result<Self> {
        Self::new(tasks.iter().map(|t| t.task_id.clone()).collect(), rows, provenance)
    }

    pub fn oracle(tasks: &[TaskDataset]) -> Result<Self> {
        Self::from_tasks(tasks, tasks.iter().map(|t| t.embedding_true.clone()).collect(), Provenance::Oracle)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[TaskEmbedding] {
        &self.rows
    }

    pub fn get(&self, i: usize) -> &TaskEmbedding {
        &self.rows[i]
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.ids.iter().position(|x| x == id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn by_id(&self, id: &str) -> Result<&TaskEmbedding> {
        Ok(&self.rows[self.index_of(id)?])
    }

    /// Same ids with new rows, e.g. after corruption.
    pub fn with_rows(&self, rows: Vec<TaskEmbedding>, provenance: Provenance) -> Result<Self> {
        Self::new(self.ids.clone(), rows, provenance)
    }
}

impl Serialize for EmbeddingSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EmbeddingSetRecord {
            ids: self.ids.clone(),
            d: self.d,
            provenance: self.provenance.clone(),
            rows: self.rows.iter().map(|z| z.as_slice().to_vec()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EmbeddingSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = EmbeddingSetRecord::deserialize(d)?;
        let set = EmbeddingSet::new(rec.ids, rec.rows.into_iter().map(TaskEmbedding::new).collect(), rec.provenance)
            .map_err(D::Error::custom)?;
        if !set.is_empty() && set.d != rec.d {
            return Err(D::Error::custom(format!("declared d={} but rows have d={}", rec.d, set.d)));
        }
        Ok(EmbeddingSet { d: rec.d, ..set })
    }
}

/// Euclidean distance.
pub fn dist(a: &TaskEmbedding, b: &TaskEmbedding) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok((a.vector() - b.vector()).norm())
}

pub fn eps_similar(a: &TaskEmbedding, b: &TaskEmbedding, eps: f64) -> Result<bool> {
    Ok(dist(a, b)? <= eps)
}

/// Rotate `z` towards a random direction while keeping its norm:
/// `‖z‖ (z + σ_c‖z‖u) / ‖z + σ_c‖z‖u‖` with `u` uniform on the sphere.
///
/// The zero vector has no direction and is returned unchanged.
pub fn corrupt<R: Rng + ?Sized>(z: &TaskEmbedding, sigma_c: f64, rng: &mut R) -> Result<TaskEmbedding> {
    if !(sigma_c >= 0.0) {
        return Err(Error::Domain(format!("sigma_c must be >= 0, got {sigma_c}")));
    }
    let norm = z.norm();
    if norm == 0.0 {
        log::debug!("corrupt: zero embedding left unchanged");
        return Ok(z.clone());
    }
    let u = loop {
        let d = DVector::from_vec(rng::normal_vec(rng, z.dim()));
        let n = d.norm();
        if n > 0.0 {
            break d / n;
        }
    };
    let moved = z.vector() + u * (sigma_c * norm);
    let mn = moved.norm();
    if mn == 0.0 {
        // Only possible for sigma_c == 1 with u = -z/‖z‖ exactly.
        return Ok(z.clone());
    }
    Ok(TaskEmbedding(moved * (norm / mn)))
}

/// `z + N(0, sd² I)`.
pub fn add_noise<R: Rng + ?Sized>(z: &TaskEmbedding, sd: f64, rng: &mut R) -> TaskEmbedding {
    let noise = DVector::from_vec(rng::normal_vec(rng, z.dim()));
    TaskEmbedding(z.vector() + noise * sd)
}

pub fn mean_source_embedding(set: &EmbeddingSet) -> Result<TaskEmbedding> {
    if set.is_empty() {
        return Err(Error::Domain("mean of an empty embedding set".into()));
    }
    let mut mean = DVector::zeros(set.dim());
    for z in set.rows() {
        mean += z.vector();
    }
    Ok(TaskEmbedding(mean / set.len() as f64))
}

/// Per-feature Pearson correlation with the label. Columns with zero variance
/// get correlation 0 and are reported in the second return value.
pub fn correlation_vector(task: &TaskDataset) -> (DVector<f64>, Vec<usize>) {
    let n = task.len() as f64;
    let y: Vec<f64> = task.y.iter().map(|&v| v as f64).collect();
    let my = y.iter().sum::<f64>() / n;
    let vy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let p = task.x.ncols();
    let mut c = DVector::zeros(p);
    let mut flagged = Vec::new();
    for j in 0..p {
        let col = task.x.column(j);
        let mx = col.mean();
        let vx: f64 = col.iter().map(|v| (v - mx).powi(2)).sum();
        if vx <= 0.0 || vy <= 0.0 {
            flagged.push(j);
            continue;
        }
        let cov: f64 = col.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        c[j] = cov / (vx * vy).sqrt();
    }
    (c, flagged)
}

/// PCA of source-task correlation vectors; targets reuse the frozen loadings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationProjector {
    /// `feature_dim x d`, orthonormal columns.
    pub loadings: DMatrix<f64>,
    pub center: DVector<f64>,
}

impl CorrelationProjector {
    pub fn fit(sources: &[TaskDataset], d: usize) -> Result<Self> {
        if d == 0 || sources.len() < d {
            return Err(Error::Config(format!("need at least d={d} source tasks, got {}", sources.len())));
        }
        let vecs: Vec<DVector<f64>> = sources
            .iter()
            .map(|t| {
                let (c, flagged) = correlation_vector(t);
                if !flagged.is_empty() {
                    log::warn!("{}: zero-variance columns {flagged:?}, correlation set to 0", t.task_id);
                }
                c
            })
            .collect();
        let p = vecs[0].len();
        if d > p {
            return Err(Error::Config(format!("d={d} exceeds feature dimension {p}")));
        }
        let n = vecs.len() as f64;
        let center = vecs.iter().fold(DVector::zeros(p), |acc, v| acc + v) / n;
        let mut cov = DMatrix::zeros(p, p);
        for v in &vecs {
            let c = v - &center;
            cov += &c * c.transpose();
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut loadings = DMatrix::zeros(p, d);
        for (k, &col) in order.iter().take(d).enumerate() {
            let mut v = eig.eigenvectors.column(col).into_owned();
            // Sign convention: the largest-magnitude entry is positive.
            let imax = v.iamax();
            if v[imax] < 0.0 {
                v = -v;
            }
            loadings.set_column(k, &v);
        }
        Ok(CorrelationProjector { loadings, center })
    }

    pub fn project(&self, c: &DVector<f64>) -> Result<TaskEmbedding> {
        check_dim(self.center.len(), c.len())?;
        Ok(TaskEmbedding(self.loadings.transpose() * (c - &self.center)))
    }

    pub fn embed(&self, task: &TaskDataset) -> Result<TaskEmbedding> {
        let (c, flagged) = correlation_vector(task);
        if !flagged.is_empty() {
            log::warn!("{}: zero-variance columns {flagged:?}, correlation set to 0", task.task_id);
        }
        self.project(&c)
    }
}

pub fn fit_correlation_projector(sources: &[TaskDataset], d: usize) -> Result<CorrelationProjector> {
    CorrelationProjector::fit(sources, d)
}

pub fn embed_by_correlation(projector: &CorrelationProjector, task: &TaskDataset) -> Result<TaskEmbedding> {
    projector.embed(task)
}
