//! Point containers, farthest point sampling and brute-force neighbor queries.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::ndcore::Matrix;

/// `n` points in 3D with optional per-point label indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Matrix,
    labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(coords: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if coords.cols() != 3 {
            return Err(Error::dim("PointCloud", "n x 3", format!("{}x{}", coords.rows(), coords.cols())));
        }
        if coords.rows() == 0 {
            return Err(Error::Data("point cloud must contain at least one point".into()));
        }
        if !coords.is_finite() {
            return Err(Error::Numeric("point cloud coordinates".into()));
        }
        if let Some(l) = &labels {
            if l.len() != coords.rows() {
                return Err(Error::dim("PointCloud labels", coords.rows(), l.len()));
            }
        }
        Ok(PointCloud { coords, labels })
    }

    pub fn from_points(points: &[[f64; 3]], labels: Option<Vec<usize>>) -> Result<Self> {
        PointCloud::new(Matrix::from_rows(points)?, labels)
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.rows() == 0
    }

    pub fn coords(&self) -> &Matrix {
        &self.coords
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.coords.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or a data error when the cloud is unlabeled.
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| Error::Data("point cloud has no labels".into()))
    }

    /// Checks every label index against `classes`.
    pub fn validate_labels(&self, classes: usize) -> Result<()> {
        if let Some(l) = &self.labels {
            if let Some(&bad) = l.iter().find(|&&v| v >= classes) {
                return Err(Error::Label { index: bad, classes });
            }
        }
        Ok(())
    }

    /// New cloud made of the listed points, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            coords: self.coords.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn translated(&self, offset: [f64; 3]) -> PointCloud {
        let mut coords = self.coords.clone();
        for r in 0..coords.rows() {
            for (c, o) in coords.row_mut(r).iter_mut().zip(offset) {
                *c += o;
            }
        }
        PointCloud {
            coords,
            labels: self.labels.clone(),
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for r in 0..self.len() {
            for (acc, v) in c.iter_mut().zip(self.coords.row(r)) {
                *acc += v;
            }
        }
        c.map(|v| v / self.len() as f64)
    }
}

/// FPS anchors and the K nearest neighbors of each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    pub anchors: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn k(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Lexicographic (x, y, z) order, then index.
fn lex_then_index(cloud: &PointCloud, a: usize, b: usize) -> Ordering {
    let (pa, pb) = (cloud.coords.row(a), cloud.coords.row(b));
    for (x, y) in pa.iter().zip(pb) {
        match x.total_cmp(y) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    a.cmp(&b)
}

pub fn pairwise_sq_dist(cloud: &PointCloud) -> Matrix {
    let n = cloud.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(cloud.coords.row(i), cloud.coords.row(j));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

/// Number of anchors for ratio `r`: `floor(r * n)`.
pub fn anchor_count(n: usize, r: f64) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Config(format!("FPS ratio must lie in (0, 1], got {r}")));
    }
    let z = (r * n as f64).floor() as usize;
    if z < 1 {
        return Err(Error::Config(format!(
            "FPS ratio {r} selects no anchors from {n} points"
        )));
    }
    Ok(z)
}

/// Greedy farthest point sampling of `floor(r * n)` anchors.
pub fn fps(cloud: &PointCloud, r: f64) -> Result<Vec<usize>> {
    let z = anchor_count(cloud.len(), r)?;
    fps_count(cloud, z)
}

/// Greedy farthest point sampling of exactly `z` anchors.
///
/// Starts at the lexicographically smallest point and repeatedly picks the
/// point whose squared distance to the selected set is largest. Ties go to
/// the lexicographically smaller point, then the smaller index.
pub fn fps_count(cloud: &PointCloud, z: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if z < 1 || z > n {
        return Err(Error::Config(format!("cannot select {z} anchors from {n} points")));
    }
    let first = (0..n)
        .min_by(|&a, &b| lex_then_index(cloud, a, b))
        .expect("non-empty cloud");
    let mut selected = Vec::with_capacity(z);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = first;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == z {
            break;
        }
        let c = cloud.coords.row(current);
        for i in 0..n {
            let d = sq_dist(cloud.coords.row(i), c);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            best = match best {
                None => Some(i),
                Some(b) => match min_d[i].total_cmp(&min_d[b]) {
                    Ordering::Greater => Some(i),
                    Ordering::Less => Some(b),
                    Ordering::Equal => {
                        if lex_then_index(cloud, i, b) == Ordering::Less {
                            Some(i)
                        } else {
                            Some(b)
                        }
                    }
                },
            };
        }
        current = best.expect("fewer than n points selected");
    }
    Ok(selected)
}

/// K nearest neighbors of each anchor, excluding the anchor itself.
///
/// Order is by squared distance, then lexicographic coordinates, then index.
pub fn knn(cloud: &PointCloud, anchors: &[usize], k: usize) -> Result<AnchorSet> {
    let n = cloud.len();
    if k + 1 > n {
        return Err(Error::Config(format!(
            "k = {k} neighbors requested but the cloud has only n = {n} points"
        )));
    }
    let mut neighbors = Vec::with_capacity(anchors.len());
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &a in anchors {
        if a >= n {
            return Err(Error::Config(format!("anchor index {a} out of range for {n} points")));
        }
        let pa = cloud.coords.row(a);
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&i| i != a)
                .map(|i| (sq_dist(cloud.coords.row(i), pa), i)),
        );
        let order = |x: &(f64, usize), y: &(f64, usize)| {
            x.0.total_cmp(&y.0).then_with(|| lex_then_index(cloud, x.1, y.1))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k, order);
            cand.truncate(k);
        }
        cand.sort_by(order);
        neighbors.push(cand.iter().map(|&(_, i)| i).collect());
    }
    Ok(AnchorSet {
        anchors: anchors.to_vec(),
        neighbors,
    })
}

/// FPS anchors at ratio `r` with `k` neighbors each.
pub fn anchor_set(cloud: &PointCloud, r: f64, k: usize) -> Result<AnchorSet> {
    let anchors = fps(cloud, r)?;
    knn(cloud, &anchors, k)
}

/// `k` nearest neighbors of every point (point `i` excluded from its own list).
pub fn all_neighbors(cloud: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    let all: Vec<usize> = (0..cloud.len()).collect();
    Ok(knn(cloud, &all, k)?.neighbors)
}
