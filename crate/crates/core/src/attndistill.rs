//! Cross-attention projector, single-head self-attention and the
//! attention-transfer loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{mse, mse_grad, softmax_rows, softmax_rows_backward, Matrix, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// `d` in the `1/√d` logit scale.
    pub query_size: usize,
    /// Projector output width.
    pub head_dim: usize,
}

impl AttentionConfig {
    /// Uses `d = d_h`, the width the projections actually emit.
    pub fn with_head_dim(head_dim: usize) -> Self {
        AttentionConfig {
            query_size: head_dim,
            head_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_size == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!("invalid attention config {self:?}")));
        }
        Ok(())
    }
}

/// Which attention quantity the transfer loss compares.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillTarget {
    /// `softmax(QKᵀ/√d)·V`.
    #[default]
    Omega,
    /// `softmax(QKᵀ/√d)` alone.
    Weights,
}

pub const PROJECTOR_NAMES: [&str; 3] = ["w_q", "w_k", "w_v"];

/// `W_Q`, `W_K`, `W_V`, each `D × d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorWeights {
    pub params: ParamSet,
}

pub fn init_projector(embed_dim: usize, head_dim: usize, seed: u64) -> Result<ProjectorWeights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = (6.0 / (embed_dim + head_dim) as f64).sqrt();
    let mut params = ParamSet::new();
    for name in PROJECTOR_NAMES {
        params.insert(
            name,
            Matrix::from_fn(embed_dim, head_dim, |_, _| rng.gen_range(-limit..=limit)),
        )?;
    }
    Ok(ProjectorWeights { params })
}

/// `(Q, K, V) = (P·W_Q, P·W_K, P·W_V)`, with weights looked up as `prefix + w_*`.
pub fn qkv_project(
    embeddings: &Matrix,
    params: &ParamSet,
    prefix: &str,
) -> Result<(Matrix, Matrix, Matrix)> {
    let get = |n: &str| params.param(&format!("{prefix}{n}"));
    Ok((
        embeddings.matmul(get("w_q")?)?,
        embeddings.matmul(get("w_k")?)?,
        embeddings.matmul(get("w_v")?)?,
    ))
}

#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Row-softmax attention weights, `n × n`.
    pub weights: Matrix,
    /// Attention output `Ω`, `n × d_h`.
    pub omega: Matrix,
}

impl AttentionTrace {
    pub fn target(&self, which: DistillTarget) -> &Matrix {
        match which {
            DistillTarget::Omega => &self.omega,
            DistillTarget::Weights => &self.weights,
        }
    }
}

/// `Ω = softmax(QKᵀ/√d)·V`.
pub fn self_attention(q: &Matrix, k: &Matrix, v: &Matrix, config: &AttentionConfig) -> Result<Matrix> {
    Ok(attend(q.clone(), k.clone(), v.clone(), config)?.omega)
}

pub fn attend(q: Matrix, k: Matrix, v: Matrix, config: &AttentionConfig) -> Result<AttentionTrace> {
    config.validate()?;
    if k.rows() != v.rows() {
        return Err(Error::dim("self_attention", format!("K {:?}", k.shape()), format!("V {:?}", v.shape())));
    }
    let scale = 1.0 / (config.query_size as f64).sqrt();
    let logits = q.matmul_nt(&k)?.scale(scale);
    let weights = softmax_rows(&logits);
    let omega = weights.matmul(&v)?;
    Ok(AttentionTrace { q, k, v, weights, omega })
}

/// Projects embeddings and runs self-attention.
pub fn forward(
    embeddings: &Matrix,
    params: &ParamSet,
    prefix: &str,
    config: &AttentionConfig,
) -> Result<AttentionTrace> {
    let (q, k, v) = qkv_project(embeddings, params, prefix)?;
    attend(q, k, v, config)
}

/// Mean squared error between attention outputs.
pub fn attention_transfer_loss(student: &Matrix, teacher: &Matrix) -> Result<f64> {
    mse(teacher, student)
}

/// Loss, gradient w.r.t. the student's attention quantity.
pub fn attention_transfer_loss_with_grad(student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
    let l = attention_transfer_loss(student, teacher)?;
    Ok((l, mse_grad(student, teacher)?))
}

/// Backpropagates `d_target` (w.r.t. `Ω` or the weights, per `which`) into
/// the projector accumulators and returns the gradient w.r.t. the embeddings.
pub fn backward(
    embeddings: &Matrix,
    trace: &AttentionTrace,
    params: &mut ParamSet,
    prefix: &str,
    config: &AttentionConfig,
    which: DistillTarget,
    d_target: &Matrix,
) -> Result<Matrix> {
    let (d_weights, d_v) = match which {
        DistillTarget::Omega => (d_target.matmul_nt(&trace.v)?, trace.weights.matmul_tn(d_target)?),
        DistillTarget::Weights => (d_target.clone(), Matrix::zeros(trace.v.rows(), trace.v.cols())),
    };
    let scale = 1.0 / (config.query_size as f64).sqrt();
    let d_logits = softmax_rows_backward(&trace.weights, &d_weights).scale(scale);
    let d_q = d_logits.matmul(&trace.k)?;
    let d_k = d_logits.matmul_tn(&trace.q)?;

    let name = |n: &str| format!("{prefix}{n}");
    params.accumulate(&name("w_q"), &embeddings.matmul_tn(&d_q)?)?;
    params.accumulate(&name("w_k"), &embeddings.matmul_tn(&d_k)?)?;
    params.accumulate(&name("w_v"), &embeddings.matmul_tn(&d_v)?)?;

    let mut d_emb = d_q.matmul_nt(params.param(&name("w_q"))?)?;
    d_emb.add_assign(&d_k.matmul_nt(params.param(&name("w_k"))?)?)?;
    d_emb.add_assign(&d_v.matmul_nt(params.param(&name("w_v"))?)?)?;
    Ok(d_emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::grad_check;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn projection_examples() {
        let emb = rand_matrix(5, 3, 1);
        let mut id = ParamSet::new();
        for n in PROJECTOR_NAMES {
            id.insert(n, Matrix::identity(3)).unwrap();
        }
        let (q, k, v) = qkv_project(&emb, &id, "").unwrap();
        assert_eq!(q, emb);
        assert_eq!(k, emb);
        assert_eq!(v, emb);

        let mut zero = ParamSet::new();
        for n in PROJECTOR_NAMES {
            zero.insert(n, Matrix::zeros(3, 2)).unwrap();
        }
        let (q, _, _) = qkv_project(&emb, &zero, "").unwrap();
        assert_eq!(q, Matrix::zeros(5, 2));

        let proj = init_projector(3, 4, 2).unwrap();
        let (q, _, _) = qkv_project(&emb, &proj.params, "").unwrap();
        let w = proj.params.get("w_q").unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|c| emb.get(i, c) * w.get(c, j)).sum();
                assert!((q.get(i, j) - s).abs() < 1e-12);
            }
        }
        assert!(qkv_project(&rand_matrix(5, 4, 1), &proj.params, "").is_err());
    }

    #[test]
    fn attention_examples() {
        let cfg = AttentionConfig::with_head_dim(2);
        let v = Matrix::from_rows(&[[0.3, -0.7]]).unwrap();
        let out = self_attention(&rand_matrix(1, 2, 1), &rand_matrix(1, 2, 2), &v, &cfg).unwrap();
        assert_eq!(out, v);

        // all logits zero: uniform average of V rows
        let q = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0], [0.5, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[[0.0, 1.0], [0.0, -3.0], [0.0, 2.0]]).unwrap();
        let v = rand_matrix(3, 2, 3);
        let out = self_attention(&q, &k, &v, &cfg).unwrap();
        let mean = [
            (v.get(0, 0) + v.get(1, 0) + v.get(2, 0)) / 3.0,
            (v.get(0, 1) + v.get(1, 1) + v.get(2, 1)) / 3.0,
        ];
        for r in 0..3 {
            assert!((out.get(r, 0) - mean[0]).abs() < 1e-15);
            assert!((out.get(r, 1) - mean[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matches_row_loop() {
        let cfg = AttentionConfig::with_head_dim(3);
        let (q, k, v) = (rand_matrix(6, 3, 4), rand_matrix(6, 3, 5), rand_matrix(6, 3, 6));
        let out = self_attention(&q, &k, &v, &cfg).unwrap();
        for i in 0..6 {
            let logits: Vec<f64> = (0..6)
                .map(|j| (0..3).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / 3f64.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..3 {
                let s: f64 = (0..6).map(|j| e[j] / z * v.get(j, c)).sum();
                assert!((out.get(i, c) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_rows_sum_to_one_and_scale_consistency() {
        let cfg = AttentionConfig::with_head_dim(4);
        let tr = attend(rand_matrix(7, 4, 1), rand_matrix(7, 4, 2), rand_matrix(7, 4, 3), &cfg).unwrap();
        for r in 0..7 {
            assert!((tr.weights.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // scaling Q and K by √c while dividing logits by c√d leaves Ω unchanged
        let c = 2.5f64;
        let scaled = AttentionConfig { query_size: (4.0 * c * c) as usize, head_dim: 4 };
        let tr2 = attend(tr.q.scale(c.sqrt()), tr.k.scale(c.sqrt()), tr.v.clone(), &scaled).unwrap();
        assert!(tr.omega.max_abs_diff(&tr2.omega) < 1e-9);
    }

    #[test]
    fn transfer_loss_examples() {
        let a = rand_matrix(4, 3, 1);
        assert_eq!(attention_transfer_loss(&a, &a).unwrap(), 0.0);
        assert!((attention_transfer_loss(&a.map(|v| v + 1.0), &a).unwrap() - 1.0).abs() < 1e-12);
        let b = rand_matrix(4, 3, 2);
        assert_eq!(attention_transfer_loss(&a, &b).unwrap(), mse(&a, &b).unwrap());
        assert!(attention_transfer_loss(&a, &rand_matrix(3, 3, 1)).is_err());
    }

    #[test]
    fn gradients_for_both_targets() {
        let d = 4;
        let cfg = AttentionConfig::with_head_dim(3);
        let teacher = forward(&rand_matrix(8, d, 20), &init_projector(d, 3, 21).unwrap().params, "", &cfg).unwrap();
        let mut ps = init_projector(d, 3, 22).unwrap().params;
        ps.insert("emb", rand_matrix(8, d, 23)).unwrap();
        for which in [DistillTarget::Omega, DistillTarget::Weights] {
            let loss = |p: &mut ParamSet| -> Result<f64> {
                let emb = p.param("emb")?.clone();
                let tr = forward(&emb, p, "", &cfg)?;
                let (l, g) = attention_transfer_loss_with_grad(tr.target(which), teacher.target(which))?;
                let d_emb = backward(&emb, &tr, p, "", &cfg, which, &g)?;
                p.accumulate("emb", &d_emb)?;
                Ok(l)
            };
            let rep = grad_check(loss, &ps, 1e-5, 1e-5).unwrap();
            assert!(rep.passed, "{which:?}: {rep:?}");
        }
    }
}
