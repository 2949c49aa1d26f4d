//! Per-point feature encoder shared by the student and the frozen teacher.
//!
//! Architecture: a shared tanh MLP lifts each point's coordinates; each
//! point's last hidden features are concatenated with the element-wise max of
//! its `neighborhood_k` nearest neighbors' features; a shared linear head maps
//! the concatenation to `embed_dim`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Matrix, ParamSet};
use crate::pointcloud::{all_neighbors, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub neighborhood_k: usize,
    pub role: Role,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config(format!(
                "hidden widths must be non-empty and positive, got {:?}",
                self.hidden_widths
            )));
        }
        if self.neighborhood_k == 0 {
            return Err(Error::Config("neighborhood_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Teacher configuration for a student: same family, doubled widths.
    pub fn teacher_for(student: &EncoderConfig) -> EncoderConfig {
        EncoderConfig {
            embed_dim: student.embed_dim,
            hidden_widths: student.hidden_widths.iter().map(|w| 2 * w).collect(),
            neighborhood_k: student.neighborhood_k,
            role: Role::Teacher,
        }
    }

    fn last_width(&self) -> usize {
        *self.hidden_widths.last().expect("validated")
    }

    /// `(name, rows, cols)` of every tensor, in layer order.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut fan_in = 3;
        for (l, &w) in self.hidden_widths.iter().enumerate() {
            out.push((format!("layer{l}.weight"), fan_in, w));
            out.push((format!("layer{l}.bias"), 1, w));
            fan_in = w;
        }
        out.push(("head.weight".into(), 2 * fan_in, self.embed_dim));
        out.push(("head.bias".into(), 1, self.embed_dim));
        out
    }
}

/// Encoder parameters (names without any model prefix).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub params: ParamSet,
}

/// Glorot-uniform weights, zero biases; bit-identical for equal seeds.
pub fn init_weights(config: &EncoderConfig, seed: u64) -> Result<EncoderWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, rows, cols) in config.param_shapes() {
        let m = if name.ends_with("bias") {
            Matrix::zeros(rows, cols)
        } else {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..=limit))
        };
        params.insert(name, m)?;
    }
    Ok(EncoderWeights { params })
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// `activations[0]` is the input; `activations[l + 1]` is layer `l`'s output.
    activations: Vec<Matrix>,
    concat: Matrix,
    /// Per point and channel, the neighbor whose feature won the max.
    argmax: Vec<usize>,
    pub output: Matrix,
}

fn p<'a>(params: &'a ParamSet, prefix: &str, name: &str) -> Result<&'a Matrix> {
    params.param(&format!("{prefix}{name}"))
}

/// Forward pass with precomputed neighbor lists. Parameter names are looked
/// up as `prefix + name`.
pub fn forward(
    cloud: &PointCloud,
    neighbors: &[Vec<usize>],
    params: &ParamSet,
    prefix: &str,
    config: &EncoderConfig,
) -> Result<EncoderTrace> {
    config.validate()?;
    let n = cloud.len();
    if neighbors.len() != n {
        return Err(Error::dim("encode neighbors", n, neighbors.len()));
    }
    let mut activations = Vec::with_capacity(config.hidden_widths.len() + 1);
    activations.push(cloud.coords().clone());
    for l in 0..config.hidden_widths.len() {
        let w = p(params, prefix, &format!("layer{l}.weight"))?;
        let b = p(params, prefix, &format!("layer{l}.bias"))?;
        let mut z = activations[l].matmul(w)?;
        z.add_row_broadcast(b)?;
        let h = z.map(f64::tanh);
        if !h.is_finite() {
            return Err(Error::Numeric(format!("encoder layer{l}")));
        }
        activations.push(h);
    }
    let feats = activations.last().expect("at least one layer");
    let width = config.last_width();
    let mut concat = Matrix::zeros(n, 2 * width);
    let mut argmax = vec![0usize; n * width];
    for i in 0..n {
        let nb = &neighbors[i];
        if nb.is_empty() {
            return Err(Error::Config(format!("point {i} has an empty neighborhood")));
        }
        let row = concat.row_mut(i);
        row[..width].copy_from_slice(feats.row(i));
        for c in 0..width {
            let mut best = nb[0];
            let mut best_v = feats.get(nb[0], c);
            for &j in &nb[1..] {
                let v = feats.get(j, c);
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            row[width + c] = best_v;
            argmax[i * width + c] = best;
        }
    }
    let mut output = concat.matmul(p(params, prefix, "head.weight")?)?;
    output.add_row_broadcast(p(params, prefix, "head.bias")?)?;
    if !output.is_finite() {
        return Err(Error::Numeric("encoder head".into()));
    }
    Ok(EncoderTrace {
        activations,
        concat,
        argmax,
        output,
    })
}

/// Accumulates parameter gradients given `d_out = dL/d(output)`.
pub fn backward(
    trace: &EncoderTrace,
    params: &mut ParamSet,
    prefix: &str,
    config: &EncoderConfig,
    d_out: &Matrix,
) -> Result<()> {
    let n = trace.output.rows();
    if d_out.shape() != trace.output.shape() {
        return Err(Error::dim(
            "encoder backward",
            format!("{:?}", trace.output.shape()),
            format!("{:?}", d_out.shape()),
        ));
    }
    let head_w = p(params, prefix, "head.weight")?.clone();
    params.accumulate(&format!("{prefix}head.weight"), &trace.concat.matmul_tn(d_out)?)?;
    params.accumulate(&format!("{prefix}head.bias"), &d_out.col_sums())?;
    let d_concat = d_out.matmul_nt(&head_w)?;

    let width = config.last_width();
    let mut d_h = Matrix::zeros(n, width);
    for i in 0..n {
        let dc = d_concat.row(i);
        for c in 0..width {
            d_h.add_at(i, c, dc[c]);
            d_h.add_at(trace.argmax[i * width + c], c, dc[width + c]);
        }
    }

    for l in (0..config.hidden_widths.len()).rev() {
        let h = &trace.activations[l + 1];
        let d_z = d_h.zip_with("tanh backward", h, |g, y| g * (1.0 - y * y))?;
        let w_name = format!("{prefix}layer{l}.weight");
        params.accumulate(&w_name, &trace.activations[l].matmul_tn(&d_z)?)?;
        params.accumulate(&format!("{prefix}layer{l}.bias"), &d_z.col_sums())?;
        if l > 0 {
            d_h = d_z.matmul_nt(params.param(&w_name)?)?;
        }
    }
    Ok(())
}

/// Per-point embeddings (`n × embed_dim`), computing neighborhoods on the fly.
pub fn encode(cloud: &PointCloud, weights: &EncoderWeights, config: &EncoderConfig) -> Result<Matrix> {
    let neighbors = all_neighbors(cloud, config.neighborhood_k)?;
    Ok(forward(cloud, &neighbors, &weights.params, "", config)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::grad_check;

    fn config(k: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: 5,
            hidden_widths: vec![6, 4],
            neighborhood_k: k,
            role: Role::Student,
        }
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        PointCloud::from_points(&pts, None).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = EncoderConfig {
            embed_dim: 4,
            hidden_widths: vec![8],
            neighborhood_k: 2,
            role: Role::Student,
        };
        let a = init_weights(&cfg, 0).unwrap();
        assert_eq!(a, init_weights(&cfg, 0).unwrap());
        assert_ne!(a, init_weights(&cfg, 1).unwrap());
        let limit = (6.0f64 / 11.0).sqrt();
        let w = a.params.get("layer0.weight").unwrap();
        assert_eq!(w.shape(), (3, 8));
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(a.params.get("layer0.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_points_get_identical_rows() {
        let mut pts: Vec<[f64; 3]> = (0..6).map(|i| [i as f64 * 0.3, (i * i) as f64 * 0.1, -0.2]).collect();
        pts.push(pts[2]);
        let c = PointCloud::from_points(&pts, None).unwrap();
        let cfg = config(3);
        let w = init_weights(&cfg, 3).unwrap();
        let e = encode(&c, &w, &cfg).unwrap();
        assert_eq!(e.row(2), e.row(6));
    }

    #[test]
    fn output_shape_and_errors() {
        let cfg = config(3);
        let w = init_weights(&cfg, 1).unwrap();
        assert_eq!(encode(&cloud(10, 1), &w, &cfg).unwrap().shape(), (10, 5));
        assert!(encode(&cloud(3, 1), &w, &cfg).is_err());
        let bad = EncoderConfig { hidden_widths: vec![], ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn far_point_does_not_change_local_embedding() {
        let mut pts: Vec<[f64; 3]> = (0..8).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        pts.push([50.0, 50.0, 50.0]);
        let a = PointCloud::from_points(&pts, None).unwrap();
        pts[8] = [-40.0, 60.0, 10.0];
        let b = PointCloud::from_points(&pts, None).unwrap();
        let cfg = config(2);
        let w = init_weights(&cfg, 7).unwrap();
        let (ea, eb) = (encode(&a, &w, &cfg).unwrap(), encode(&b, &w, &cfg).unwrap());
        // point 0's neighbors are points 1 and 2; none of them pool over point 8
        assert_eq!(ea.row(0), eb.row(0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = cloud(12, 5);
        let cfg = config(3);
        let w = init_weights(&cfg, 2).unwrap();
        let neighbors = all_neighbors(&c, 3).unwrap();
        let target = Matrix::from_fn(12, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
        let loss = |ps: &mut ParamSet| -> Result<f64> {
            let tr = forward(&c, &neighbors, ps, "", &cfg)?;
            let diff = tr.output.sub(&target)?;
            backward(&tr, ps, "", &cfg, &diff)?;
            Ok(0.5 * diff.data().iter().map(|v| v * v).sum::<f64>())
        };
        let rep = grad_check(loss, &w.params, 1e-5, 1e-6).unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
