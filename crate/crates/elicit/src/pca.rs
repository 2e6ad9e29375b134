//! Two-dimensional view of an embedding space for plotting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use metacausal::bayes::DiagGaussian;
use metacausal::embedding::EmbeddingSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// Unit principal axes in embedding coordinates.
    pub axes: [Vec<f64>; 2],
    /// Fraction of source variance along each axis.
    pub explained: [f64; 2],
    pub sources: Vec<Point>,
    pub posterior: Point,
    /// Posterior sd along each axis.
    pub posterior_sd: [f64; 2],
}

/// Projects the sources and a posterior onto the sources' top two principal
/// axes. Axis signs are fixed so the largest-magnitude coordinate is
/// positive; missing axes (fewer than two sources or dimensions) are zero.
pub fn project(sources: &EmbeddingSet, posterior: &DiagGaussian) -> Projection {
    let (n, d) = (sources.len(), sources.dim());
    let mut center = DVector::zeros(d);
    for z in sources.rows() {
        center += z.vector();
    }
    center /= n.max(1) as f64;
    let centered = DMatrix::from_fn(n, d, |i, j| sources.get(i).vector()[j] - center[j]);
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut axes = [DVector::zeros(d), DVector::zeros(d)];
    let mut explained = [0.0; 2];
    for (k, &r) in order.iter().take(2).enumerate() {
        let mut a: DVector<f64> = v_t.row(r).transpose();
        let lead = a.iter().copied().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            a = -a;
        }
        explained[k] = if total > 0.0 { svd.singular_values[r].powi(2) / total } else { 0.0 };
        axes[k] = a;
    }
    let at = |v: &DVector<f64>| (axes[0].dot(v), axes[1].dot(v));
    let points = sources
        .ids()
        .iter()
        .zip(sources.rows())
        .map(|(id, z)| {
            let (x, y) = at(&(z.vector() - &center));
            Point { id: id.clone(), x, y }
        })
        .collect();
    let (px, py) = at(&(&posterior.mean - &center));
    let var = posterior.std().map(|s| s * s);
    let sd = |a: &DVector<f64>| a.iter().zip(var.iter()).map(|(w, v)| w * w * v).sum::<f64>().sqrt();
    Projection {
        posterior_sd: [sd(&axes[0]), sd(&axes[1])],
        axes: [axes[0].iter().copied().collect(), axes[1].iter().copied().collect()],
        explained,
        sources: points,
        posterior: Point { id: "posterior".into(), x: px, y: py },
    }
}
