//! Simplices over images, Cayley-Menger volume, and barycentric sampling.
//!
//! A simplex stores M vertex images around one clean base image inside an
//! l-infinity budget. Volume works on the flattened vertex vectors; the
//! point-set cores are public so diagnostics can run on raw coordinates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::dirichlet_sample;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Slack added to the epsilon budget when checking feasibility.
pub const FEASIBILITY_SLACK: f64 = 1e-9;

/// Degeneracy floor in squared-volume units; below it the log-volume
/// regularizer is clamped and its gradient is unavailable.
pub const VOLUME_FLOOR: f64 = 1e-30;

/// M vertex images around `base_image`, all within the epsilon ball.
#[derive(Debug, Clone, PartialEq)]
pub struct Simplex {
    base_image: Tensor,
    vertices: Vec<Tensor>,
    epsilon: f64,
}

impl Simplex {
    /// Validates feasibility of every vertex: shape match, pixels in [0,1],
    /// and l-infinity distance to the base within `epsilon + 1e-9`.
    pub fn new(base_image: Tensor, vertices: Vec<Tensor>, epsilon: f64) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::parameter("simplex needs at least one vertex".to_string()));
        }
        if !(epsilon.is_finite() && (0.0..=1.0).contains(&epsilon)) {
            return Err(Error::parameter(format!(
                "epsilon must lie in [0,1], got {epsilon}"
            )));
        }
        for (i, v) in vertices.iter().enumerate() {
            if !v.same_shape(&base_image) {
                return Err(Error::shape(format!(
                    "vertex {i} shape {:?} != base shape {:?}",
                    v.shape(),
                    base_image.shape()
                )));
            }
            let dist = v.linf_distance(&base_image);
            if dist > epsilon + FEASIBILITY_SLACK {
                return Err(Error::parameter(format!(
                    "vertex {i} violates budget: linf {dist} > {epsilon} + slack"
                )));
            }
            if v.min() < 0.0 || v.max() > 1.0 {
                return Err(Error::parameter(format!(
                    "vertex {i} has pixels outside [0,1]"
                )));
            }
        }
        Ok(Simplex {
            base_image,
            vertices,
            epsilon,
        })
    }

    pub fn base_image(&self) -> &Tensor {
        &self.base_image
    }

    pub fn vertices(&self) -> &[Tensor] {
        &self.vertices
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Number of vertices M.
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }
}

/// N simplices sharing the base image shape and epsilon budget.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplicialComplex {
    simplices: Vec<Simplex>,
}

impl SimplicialComplex {
    pub fn new(simplices: Vec<Simplex>) -> Result<Self> {
        let first = simplices
            .first()
            .ok_or_else(|| Error::parameter("complex needs at least one simplex".to_string()))?;
        let shape = first.base_image.shape().to_vec();
        let eps = first.epsilon;
        for (i, s) in simplices.iter().enumerate().skip(1) {
            if s.base_image.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "simplex {i} base shape {:?} != {:?}",
                    s.base_image.shape(),
                    shape
                )));
            }
            if s.epsilon != eps {
                return Err(Error::parameter(format!(
                    "simplex {i} epsilon {} != {}",
                    s.epsilon, eps
                )));
            }
        }
        Ok(SimplicialComplex { simplices })
    }

    pub fn simplices(&self) -> &[Simplex] {
        &self.simplices
    }

    pub fn epsilon(&self) -> f64 {
        self.simplices[0].epsilon
    }

    pub fn base_image(&self) -> &Tensor {
        &self.simplices[0].base_image
    }
}

/// Volume report for one simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CmReport {
    /// Nonnegative simplex volume; tiny negative squares round to 0.
    pub volume: f64,
    /// Determinant of the bordered distance matrix.
    pub cm_determinant: f64,
    /// Simplex dimension M - 1.
    pub dimension: usize,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Bordered (M+1)x(M+1) matrix: zero corner, unit border, squared distances.
fn bordered_distance_matrix(points: &[&[f64]]) -> Matrix {
    let m = points.len();
    let mut b = Matrix::zeros(m + 1, m + 1);
    for j in 1..=m {
        b.set(0, j, 1.0);
        b.set(j, 0, 1.0);
    }
    for i in 0..m {
        for j in (i + 1)..m {
            let d2 = sq_dist(points[i], points[j]);
            b.set(i + 1, j + 1, d2);
            b.set(j + 1, i + 1, d2);
        }
    }
    b
}

fn check_points(points: &[&[f64]]) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::Dimension {
            needed: 3,
            got: points.len(),
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("vertex vectors differ in length".to_string()));
    }
    Ok(())
}

/// Cayley-Menger volume of the simplex spanned by raw point vectors.
///
/// V^2 = (-1)^M / (((M-1)!)^2 * 2^(M-1)) * det(B) for M points.
pub fn cm_volume_points(points: &[&[f64]]) -> Result<CmReport> {
    check_points(points)?;
    let m = points.len();
    let b = bordered_distance_matrix(points);
    let det = b.determinant()?;
    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
    let norm = factorial(m - 1).powi(2) * 2f64.powi(m as i32 - 1);
    let v2 = sign * det / norm;
    let volume = if v2 > 0.0 { v2.sqrt() } else { 0.0 };
    Ok(CmReport {
        volume,
        cm_determinant: det,
        dimension: m - 1,
    })
}

/// Gradient of log V with respect to the point at `free_index`.
///
/// Chain rule through the bordered matrix: d log|det B| = tr(B^-1 dB),
/// so d logV / d d2(f,j) = (B^-1)(f+1,j+1) and d d2(f,j) / d x_f = 2(x_f - x_j).
pub fn log_volume_grad_points(points: &[&[f64]], free_index: usize) -> Result<Vec<f64>> {
    check_points(points)?;
    let m = points.len();
    if free_index >= m {
        return Err(Error::parameter(format!(
            "free vertex index {free_index} out of range for {m} vertices"
        )));
    }
    let report = cm_volume_points(points)?;
    if report.volume * report.volume <= VOLUME_FLOOR {
        return Err(Error::DegenerateSimplex {
            volume: report.volume,
        });
    }
    let b = bordered_distance_matrix(points);
    let binv = b.inverse()?;
    let dim = points[0].len();
    let xf = points[free_index];
    let mut grad = vec![0.0; dim];
    for (j, xj) in points.iter().enumerate() {
        if j == free_index {
            continue;
        }
        let w = binv.get(free_index + 1, j + 1);
        for (g, (pf, pj)) in grad.iter_mut().zip(xf.iter().zip(xj.iter())) {
            *g += w * 2.0 * (pf - pj);
        }
    }
    Ok(grad)
}

/// Volume of a simplex's vertex images, flattened to vectors.
pub fn cm_volume(s: &Simplex) -> Result<CmReport> {
    let pts: Vec<&[f64]> = s.vertices.iter().map(|v| v.as_slice()).collect();
    cm_volume_points(&pts)
}

/// Gradient of log V with respect to vertex image `free_index`.
pub fn log_volume_grad(s: &Simplex, free_index: usize) -> Result<Tensor> {
    let pts: Vec<&[f64]> = s.vertices.iter().map(|v| v.as_slice()).collect();
    let grad = log_volume_grad_points(&pts, free_index)?;
    Tensor::new(s.vertices[free_index].shape().to_vec(), grad)
}

/// Elementwise mean of equally shaped tensors.
pub fn centroid(vertices: &[Tensor]) -> Result<Tensor> {
    crate::tensor::mean_tensor(vertices)
}

/// One barycentric draw: Dirichlet(1) weights over the vertices.
///
/// Outputs stay feasible by convexity; pixels are clamped to [0,1] to keep
/// the range invariant exact under floating rounding.
pub fn sample_point(s: &Simplex, rng: &mut RngState) -> Tensor {
    if s.vertices.len() == 1 {
        return s.vertices[0].clone();
    }
    let alpha = vec![1.0; s.vertices.len()];
    let w = dirichlet_sample(&alpha, rng).expect("unit-alpha dirichlet cannot fail");
    let mut out = vec![0.0; s.base_image.len()];
    for (weight, v) in w.iter().zip(&s.vertices) {
        for (o, p) in out.iter_mut().zip(v.as_slice()) {
            *o += weight * p;
        }
    }
    for o in &mut out {
        *o = o.clamp(0.0, 1.0);
    }
    Tensor::new(s.base_image.shape().to_vec(), out).expect("convex combination keeps shape")
}

/// `count` draws from the complex: uniform simplex choice, then one
/// barycentric draw inside it.
pub fn sample_complex(
    k: &SimplicialComplex,
    rng: &mut RngState,
    count: usize,
) -> Result<Vec<Tensor>> {
    if count == 0 {
        return Err(Error::parameter("sample count must be >= 1".to_string()));
    }
    let n = k.simplices.len();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let idx = if n == 1 { 0 } else { rng.below(n as u64) as usize };
        out.push(sample_point(&k.simplices[idx], rng));
    }
    Ok(out)
}
