//! Local geometric relation descriptors and the geometry-transfer loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{norm, Matrix};
use crate::pointcloud::{AnchorSet, PointCloud};

/// How the per-anchor descriptor difference is reduced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeoNorm {
    /// Mean squared entry difference per anchor, averaged over anchors.
    #[default]
    Mse,
    /// Euclidean norm of the difference per anchor, averaged over anchors.
    L2,
}

/// One row per anchor: mean coordinate offset (3) ⊕ mean feature offset (D).
#[derive(Debug, Clone, PartialEq)]
pub struct RelationSet {
    pub descriptors: Matrix,
}

impl RelationSet {
    pub fn len(&self) -> usize {
        self.descriptors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.rows() == 0
    }
}

pub fn relation_descriptors(
    cloud: &PointCloud,
    embeddings: &Matrix,
    anchors: &AnchorSet,
) -> Result<RelationSet> {
    let n = cloud.len();
    if embeddings.rows() != n {
        return Err(Error::dim("relation_descriptors", format!("{n} points"), format!("{} embedding rows", embeddings.rows())));
    }
    if anchors.neighbors.len() != anchors.anchors.len() {
        return Err(Error::dim("relation_descriptors", anchors.anchors.len(), anchors.neighbors.len()));
    }
    let d = embeddings.cols();
    let mut out = Matrix::zeros(anchors.len(), 3 + d);
    for (a, (&anchor, nb)) in anchors.anchors.iter().zip(&anchors.neighbors).enumerate() {
        if nb.is_empty() {
            return Err(Error::Config(format!("anchor {anchor} has no neighbors")));
        }
        if anchor >= n || nb.iter().any(|&j| j >= n) {
            return Err(Error::Config(format!("anchor set refers past {n} points")));
        }
        let inv_k = 1.0 / nb.len() as f64;
        let pa = cloud.coords().row(anchor);
        let fa = embeddings.row(anchor);
        let row = out.row_mut(a);
        for &j in nb {
            let pj = cloud.coords().row(j);
            for c in 0..3 {
                row[c] += pj[c] - pa[c];
            }
            let fj = embeddings.row(j);
            for c in 0..d {
                row[3 + c] += fj[c] - fa[c];
            }
        }
        row.iter_mut().for_each(|v| *v *= inv_k);
    }
    Ok(RelationSet { descriptors: out })
}

/// Gradient of a loss with respect to the embeddings, given its gradient
/// with respect to the descriptors. Coordinate columns carry no parameters.
pub fn relation_backward(
    anchors: &AnchorSet,
    d_desc: &Matrix,
    n_points: usize,
) -> Result<Matrix> {
    let d = d_desc
        .cols()
        .checked_sub(3)
        .ok_or_else(|| Error::dim("relation_backward", "3 + D columns", d_desc.cols()))?;
    let mut out = Matrix::zeros(n_points, d);
    for (a, (&anchor, nb)) in anchors.anchors.iter().zip(&anchors.neighbors).enumerate() {
        let g = &d_desc.row(a)[3..];
        let inv_k = 1.0 / nb.len() as f64;
        for &j in nb {
            for (o, gv) in out.row_mut(j).iter_mut().zip(g) {
                *o += gv * inv_k;
            }
        }
        for (o, gv) in out.row_mut(anchor).iter_mut().zip(g) {
            *o -= gv;
        }
    }
    Ok(out)
}

/// Squared-error geometry-transfer loss.
pub fn geo_transfer_loss(student: &RelationSet, teacher: &RelationSet) -> Result<f64> {
    Ok(geo_transfer_loss_with_grad(student, teacher, GeoNorm::Mse)?.0)
}

/// Loss value and its gradient with respect to the student descriptors.
pub fn geo_transfer_loss_with_grad(
    student: &RelationSet,
    teacher: &RelationSet,
    mode: GeoNorm,
) -> Result<(f64, Matrix)> {
    let (s, t) = (&student.descriptors, &teacher.descriptors);
    if s.shape() != t.shape() {
        return Err(Error::dim("geo_transfer_loss", format!("{:?}", s.shape()), format!("{:?}", t.shape())));
    }
    let (z, cols) = s.shape();
    if z == 0 {
        return Ok((0.0, Matrix::zeros(0, cols)));
    }
    let mut grad = Matrix::zeros(z, cols);
    let mut total = 0.0;
    for a in 0..z {
        let diff: Vec<f64> = s.row(a).iter().zip(t.row(a)).map(|(x, y)| x - y).collect();
        match mode {
            GeoNorm::Mse => {
                let sq: f64 = diff.iter().map(|v| v * v).sum();
                total += sq / cols as f64;
                let scale = 2.0 / (cols as f64 * z as f64);
                for (g, dv) in grad.row_mut(a).iter_mut().zip(&diff) {
                    *g = scale * dv;
                }
            }
            GeoNorm::L2 => {
                let nrm = norm(&diff);
                total += nrm;
                if nrm > 0.0 {
                    for (g, dv) in grad.row_mut(a).iter_mut().zip(&diff) {
                        *g = dv / (nrm * z as f64);
                    }
                }
            }
        }
    }
    Ok((total / z as f64, grad))
}
