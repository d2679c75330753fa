//! Latent-environment discovery over a batch of representations.
//!
//! Pipeline per batch: `z_i = W_g h_i + b_g`, DBSCAN hard labels, cluster means as centers,
//! then a softmax over negative (scaled) Euclidean distances to every center. Noise points are
//! excluded from the centers but still receive a soft row.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{euclidean, median, softmax, Matrix};
use crate::rng;

/// Linear map `g(h) = W_g h + b_g` into a lower-dimensional clustering space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorParams {
    #[serde(rename = "W_g")]
    pub w_g: Matrix,
    pub b_g: Vec<f64>,
}

impl ExtractorParams {
    /// Gaussian entries with variance `1/d`, zero offset.
    pub fn init(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if output_dim < 1 || output_dim > input_dim {
            return Err(Error::InvalidConfig(format!(
                "extractor output dim must be in 1..={input_dim}, got {output_dim}"
            )));
        }
        let mut rng = rng::substream(seed, "extractor");
        let n = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("valid normal");
        Ok(Self {
            w_g: Matrix::from_fn(output_dim, input_dim, |_, _| n.sample(&mut rng)),
            b_g: vec![0.0; output_dim],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_g.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w_g.rows()
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("b_g", self.w_g.rows(), self.b_g.len())?;
        if self.output_dim() < 1 || self.output_dim() > self.input_dim() {
            return Err(Error::InvalidConfig("extractor must map to 1..=d dimensions".into()));
        }
        if !self.w_g.as_slice().iter().chain(&self.b_g).all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite extractor parameter".into()));
        }
        Ok(())
    }

    pub fn descend(&mut self, grad: &ExtractorGrad, lr: f64) {
        for (w, g) in self.w_g.as_mut_slice().iter_mut().zip(grad.w_g.as_slice()) {
            *w -= lr * g;
        }
        for (b, g) in self.b_g.iter_mut().zip(&grad.b_g) {
            *b -= lr * g;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorGrad {
    pub w_g: Matrix,
    pub b_g: Vec<f64>,
}

impl ExtractorGrad {
    pub fn zeros_like(g: &ExtractorParams) -> Self {
        Self {
            w_g: Matrix::zeros(g.w_g.rows(), g.w_g.cols()),
            b_g: vec![0.0; g.b_g.len()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.w_g.as_slice().to_vec();
        v.extend_from_slice(&self.b_g);
        v
    }
}

pub fn extract(g: &ExtractorParams, h: &[f64]) -> Result<Vec<f64>> {
    let mut z = g.w_g.matvec(h)?;
    for (zi, bi) in z.iter_mut().zip(&g.b_g) {
        *zi += bi;
    }
    Ok(z)
}

/// Backpropagate `dz = ∂L/∂z` for one input `h`: accumulates into `grad` and returns `∂L/∂h`.
pub fn extract_backward(
    g: &ExtractorParams,
    h: &[f64],
    dz: &[f64],
    grad: &mut ExtractorGrad,
) -> Result<Vec<f64>> {
    check_dim("extractor input", g.input_dim(), h.len())?;
    check_dim("extractor upstream", g.output_dim(), dz.len())?;
    for (r, &d) in dz.iter().enumerate() {
        grad.b_g[r] += d;
        for (w, &hi) in grad.w_g.row_mut(r).iter_mut().zip(h) {
            *w += d * hi;
        }
    }
    g.w_g.t_matvec(dz)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanConfig {
    pub eps: f64,
    pub min_pts: usize,
}

impl DbscanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) || self.min_pts < 1 {
            return Err(Error::InvalidConfig(format!(
                "dbscan needs eps > 0 and min_pts >= 1 (got {}, {})",
                self.eps, self.min_pts
            )));
        }
        Ok(())
    }
}

/// DBSCAN parameters as configured; unset fields are derived from each batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbscanSettings {
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub min_pts: Option<usize>,
}

/// Lower limit on a derived radius so coincident points still form a neighborhood.
const MIN_DERIVED_EPS: f64 = 1e-12;

impl DbscanSettings {
    pub fn validate(&self) -> Result<()> {
        DbscanConfig {
            eps: self.eps.unwrap_or(1.0),
            min_pts: self.min_pts.unwrap_or(1),
        }
        .validate()
    }

    /// `eps = 0.5 · median pairwise distance`, `min_pts = max(4, B / 20)` unless fixed.
    pub fn resolve(&self, points: &[Vec<f64>]) -> DbscanConfig {
        let eps = self.eps.unwrap_or_else(|| {
            let mut d = Vec::new();
            for i in 0..points.len() {
                for j in i + 1..points.len() {
                    d.push(euclidean(&points[i], &points[j]));
                }
            }
            (0.5 * median(&mut d).unwrap_or(0.0)).max(MIN_DERIVED_EPS)
        });
        let min_pts = self.min_pts.unwrap_or((points.len() / 20).max(4));
        DbscanConfig { eps, min_pts }
    }
}

/// Cluster id per point, `None` for noise. Points are scanned in input order and cluster ids
/// are assigned in order of discovery. A neighborhood includes the point itself.
pub fn dbscan(points: &[Vec<f64>], cfg: &DbscanConfig) -> Result<Vec<Option<usize>>> {
    cfg.validate()?;
    let n = points.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| euclidean(&points[i], &points[j]) <= cfg.eps).collect())
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= cfg.min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0usize;
    for i in 0..n {
        if visited[i] || !is_core[i] {
            continue;
        }
        let id = next;
        next += 1;
        visited[i] = true;
        labels[i] = Some(id);
        let mut frontier = vec![i];
        while let Some(p) = frontier.pop() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(id);
                }
                if is_core[q] && !visited[q] {
                    visited[q] = true;
                    frontier.push(q);
                }
            }
        }
    }
    Ok(labels)
}

/// Number of clusters in a label vector.
pub fn cluster_count(labels: &[Option<usize>]) -> usize {
    labels.iter().flatten().max().map_or(0, |m| m + 1)
}

/// Per-cluster mean of member points; noise excluded.
pub fn centers(points: &[Vec<f64>], labels: &[Option<usize>]) -> Result<Matrix> {
    check_dim("labels", points.len(), labels.len())?;
    let k = cluster_count(labels);
    if k == 0 {
        return Err(Error::NoClusters);
    }
    let dim = points[0].len();
    let mut sums = Matrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (p, l) in points.iter().zip(labels) {
        if let Some(c) = *l {
            check_dim("point", dim, p.len())?;
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(p) {
                *s += v;
            }
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        for s in sums.row_mut(c) {
            *s /= count as f64;
        }
    }
    Ok(sums)
}

/// Row-stochastic `B × K` membership matrix and the centers that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftAssignment {
    pub probs: Matrix,
    pub centers: Matrix,
    pub noise_mask: Vec<bool>,
    /// Multiplier applied to distances before the softmax.
    pub distance_scale: f64,
}

impl SoftAssignment {
    pub fn k(&self) -> usize {
        self.probs.cols()
    }

    pub fn batch_size(&self) -> usize {
        self.probs.rows()
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        (0..self.probs.rows())
            .map(|i| (self.probs.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `p_ik = softmax_k(−D_ik)` with `D_ik = ‖z_i − c_k‖`.
pub fn soft_assign(points: &[Vec<f64>], centers: &Matrix) -> Result<SoftAssignment> {
    soft_assign_scaled(points, centers, 1.0)
}

/// `p_ik = softmax_k(−scale · D_ik)`.
pub fn soft_assign_scaled(points: &[Vec<f64>], centers: &Matrix, scale: f64) -> Result<SoftAssignment> {
    if centers.rows() == 0 {
        return Err(Error::NoClusters);
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("distance scale must be positive, got {scale}")));
    }
    let mut probs = Matrix::zeros(points.len(), centers.rows());
    for (i, z) in points.iter().enumerate() {
        check_dim("point", centers.cols(), z.len())?;
        let logits: Vec<f64> = (0..centers.rows())
            .map(|k| -scale * euclidean(z, centers.row(k)))
            .collect();
        probs.row_mut(i).copy_from_slice(&softmax(&logits));
    }
    Ok(SoftAssignment {
        probs,
        centers: centers.clone(),
        noise_mask: vec![false; points.len()],
        distance_scale: scale,
    })
}

/// `∂L/∂z_i` given `∂L/∂p_ik`, with centers held constant. A point sitting exactly on a
/// center contributes the zero subgradient for that center.
pub fn soft_assign_backward(
    points: &[Vec<f64>],
    assignment: &SoftAssignment,
    d_probs: &Matrix,
) -> Result<Vec<Vec<f64>>> {
    check_dim("membership gradient rows", assignment.batch_size(), d_probs.rows())?;
    check_dim("membership gradient cols", assignment.k(), d_probs.cols())?;
    let s = assignment.distance_scale;
    let mut out = Vec::with_capacity(points.len());
    for (i, z) in points.iter().enumerate() {
        let p = assignment.probs.row(i);
        let g = d_probs.row(i);
        let mean: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let mut dz = vec![0.0; z.len()];
        for k in 0..assignment.k() {
            let c = assignment.centers.row(k);
            let d = euclidean(z, c);
            if d == 0.0 {
                continue;
            }
            // ∂L/∂logit_k · ∂logit_k/∂z with logit_k = −s·D_ik.
            let coeff = p[k] * (g[k] - mean) * (-s / d);
            for (o, (zi, ci)) in dz.iter_mut().zip(z.iter().zip(c)) {
                *o += coeff * (zi - ci);
            }
        }
        out.push(dz);
    }
    Ok(out)
}

/// `x̄^(k) = Σ_i p_ik x_i / Σ_i p_ik`.
pub fn aggregate(batch_vectors: &[Vec<f64>], assignment: &SoftAssignment, k: usize) -> Result<Vec<f64>> {
    check_dim("batch vectors", assignment.batch_size(), batch_vectors.len())?;
    if k >= assignment.k() {
        return Err(Error::InvalidConfig(format!(
            "cluster index {k} out of range for {} clusters",
            assignment.k()
        )));
    }
    let dim = batch_vectors.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; dim];
    let mut mass = 0.0;
    for (i, x) in batch_vectors.iter().enumerate() {
        check_dim("batch vector", dim, x.len())?;
        let w = assignment.probs.get(i, k);
        mass += w;
        for (a, v) in acc.iter_mut().zip(x) {
            *a += w * v;
        }
    }
    if mass <= 0.0 {
        return Err(Error::ZeroMass("cluster in aggregate"));
    }
    acc.iter_mut().for_each(|a| *a /= mass);
    Ok(acc)
}

/// Mini-batch estimate `p̂(E = k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvPrior {
    pub p_hat: Vec<f64>,
}

/// Column means of the membership matrix.
pub fn env_prior(assignment: &SoftAssignment) -> Result<EnvPrior> {
    let b = assignment.batch_size();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let p_hat = (0..assignment.k())
        .map(|k| (0..b).map(|i| assignment.probs.get(i, k)).sum::<f64>() / b as f64)
        .collect();
    Ok(EnvPrior { p_hat })
}

/// Outcome of environment discovery on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub labels: Vec<Option<usize>>,
    pub assignment: SoftAssignment,
    /// Clusters DBSCAN found; 0 when every point was noise.
    pub k_discovered: usize,
    pub dbscan: DbscanConfig,
}

/// Cluster `points` and soft-assign them. If every point is noise, the whole batch becomes one
/// environment centered at the batch mean.
pub fn discover(points: &[Vec<f64>], settings: &DbscanSettings, distance_scale: f64) -> Result<Discovery> {
    if points.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cfg = settings.resolve(points);
    let labels = dbscan(points, &cfg)?;
    let k_discovered = cluster_count(&labels);
    let mut assignment = if k_discovered == 0 {
        let all: Vec<Option<usize>> = vec![Some(0); points.len()];
        soft_assign_scaled(points, &centers(points, &all)?, distance_scale)?
    } else {
        soft_assign_scaled(points, &centers(points, &labels)?, distance_scale)?
    };
    assignment.noise_mask = labels.iter().map(Option::is_none).collect();
    Ok(Discovery {
        labels,
        assignment,
        k_discovered,
        dbscan: cfg,
    })
}

/// One line of the `--dump-envs` stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentSnapshot {
    pub step: u64,
    pub batch_index: usize,
    pub probs: Matrix,
    pub centers: Matrix,
    pub noise_mask: Vec<bool>,
}
