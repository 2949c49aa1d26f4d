//! Text-point correlation head: correlation weights, text attention
//! features, cosine relevance, temperature softmax, weighted NLL and argmax
//! prediction.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{push_f32_le, read_f32_le, read_file, read_json, to_json_bytes, write_file};
use crate::error::{Error, Result};
use crate::ndcore::{cosine_flagged, dot, norm, softmax_in_place, Matrix};

pub const TEXTBANK_VERSION: u32 = 1;
pub const TAU_MIN: f64 = 1e-3;
/// `ln(1/0.07)`.
pub const TAU_INIT: f64 = 2.659_260_036_932_778;

/// Ordered affordance labels with one embedding row each.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    labels: Vec<String>,
    embeddings: Matrix,
    normalized: bool,
}

impl TextBank {
    pub fn new(labels: Vec<String>, embeddings: Matrix, normalized: bool) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("text bank needs at least one label".into()));
        }
        if labels.len() != embeddings.rows() {
            return Err(Error::dim("TextBank", format!("{} labels", labels.len()), format!("{} rows", embeddings.rows())));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(Error::Data("text bank labels must be non-empty".into()));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::Data(format!("duplicate label `{l}` in text bank")));
            }
        }
        if !embeddings.is_finite() {
            return Err(Error::Numeric("text bank embeddings".into()));
        }
        if normalized {
            for (r, l) in labels.iter().enumerate() {
                let nrm = norm(embeddings.row(r));
                if (nrm - 1.0).abs() > 1e-6 {
                    return Err(Error::Data(format!("embedding of `{l}` has norm {nrm}, expected 1")));
                }
            }
        }
        Ok(TextBank { labels, embeddings, normalized })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Bank restricted to `labels`, in the given order.
    pub fn select(&self, labels: &[&str]) -> Result<TextBank> {
        let idx: Vec<usize> = labels
            .iter()
            .map(|l| {
                self.index_of(l)
                    .ok_or_else(|| Error::Data(format!("label `{l}` is not in the text bank")))
            })
            .collect::<Result<_>>()?;
        TextBank::new(
            idx.iter().map(|&i| self.labels[i].clone()).collect(),
            self.embeddings.select_rows(&idx),
            self.normalized,
        )
    }

    /// Same bank with label strings replaced (embeddings untouched).
    pub fn relabeled(&self, labels: Vec<String>) -> Result<TextBank> {
        TextBank::new(labels, self.embeddings.clone(), self.normalized)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TextBankHeader {
    format_version: u32,
    dim: usize,
    labels: Vec<String>,
    normalized: bool,
}

/// Writes `textbank.json` and `textbank.bin` into `dir`.
pub fn write_textbank(bank: &TextBank, dir: &Path) -> Result<()> {
    let header = TextBankHeader {
        format_version: TEXTBANK_VERSION,
        dim: bank.dim(),
        labels: bank.labels.clone(),
        normalized: bank.normalized,
    };
    write_file(&dir.join("textbank.json"), &to_json_bytes(&header)?)?;
    let mut bin = Vec::with_capacity(4 * bank.embeddings.data().len());
    push_f32_le(&mut bin, bank.embeddings.data());
    write_file(&dir.join("textbank.bin"), &bin)
}

/// Reads a text bank from `dir` (or from the directory of a `textbank.json` path).
pub fn read_textbank(path: &Path) -> Result<TextBank> {
    let dir = if path.is_file() { path.parent().unwrap_or(Path::new(".")) } else { path };
    let json = dir.join("textbank.json");
    let raw: serde_json::Value = read_json(&json)?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if version != TEXTBANK_VERSION as u64 {
        return Err(Error::Version { path: json, found: version as u32, expected: TEXTBANK_VERSION });
    }
    let header: TextBankHeader =
        serde_json::from_value(raw).map_err(|e| Error::corrupt(&json, e.to_string()))?;
    let bin_path = dir.join("textbank.bin");
    let bytes = read_file(&bin_path)?;
    let m = header.labels.len();
    if bytes.len() != 4 * m * header.dim {
        return Err(Error::corrupt(
            &bin_path,
            format!("expected {} bytes for {m}x{}, found {}", 4 * m * header.dim, header.dim, bytes.len()),
        ));
    }
    let emb = Matrix::new(m, header.dim, read_f32_le(&bytes))?;
    // binary32 storage perturbs unit norms by ~1e-7
    TextBank::new(header.labels, emb, header.normalized)
}

/// Learnable temperature, kept above [`TAU_MIN`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Temperature(tau.max(TAU_MIN)))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn clamp(tau: f64) -> f64 {
        tau.max(TAU_MIN)
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(TAU_INIT)
    }
}

/// Positive per-class loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config(format!("class weights must be positive: {weights:?}")));
        }
        Ok(ClassWeights(weights))
    }

    pub fn uniform(m: usize) -> Self {
        ClassWeights(vec![1.0; m])
    }

    /// `ω_c = N / (m · N_c)`; classes with no points get 1.
    pub fn from_counts(counts: &[u64]) -> Self {
        let m = counts.len();
        let total: u64 = counts.iter().sum();
        ClassWeights(
            counts
                .iter()
                .map(|&c| if c == 0 { 1.0 } else { total as f64 / (m as f64 * c as f64) })
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = self.apply(x);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// How the per-label text attention features are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThatMode {
    /// `Σ_j σ(w_ij · P_j) / Σ_j w_ij`, σ element-wise.
    #[default]
    Literal,
    /// `Σ_j w_ij · P_j / Σ_j w_ij`.
    WeightedMean,
    /// No correlation step: relevance is taken against the text embeddings.
    Direct,
}

/// `w_ij = σ(T_i · P_j)`, an `m × n` matrix.
pub fn correlation_weights(text: &TextBank, embeddings: &Matrix, activation: Activation) -> Result<Matrix> {
    Ok(text.embeddings.matmul_nt(embeddings)?.map(|u| activation.apply(u)))
}

/// Text attention features `T̂`, `m × D`, from literal element-wise reading.
pub fn text_attention_features(
    text: &TextBank,
    embeddings: &Matrix,
    weights: &Matrix,
    activation: Activation,
) -> Result<Matrix> {
    text_attention_features_with(text, embeddings, weights, activation, ThatMode::Literal)
}

pub fn text_attention_features_with(
    text: &TextBank,
    embeddings: &Matrix,
    weights: &Matrix,
    activation: Activation,
    mode: ThatMode,
) -> Result<Matrix> {
    let (m, n) = (text.len(), embeddings.rows());
    if weights.shape() != (m, n) {
        return Err(Error::dim("text_attention_features", format!("{m}x{n}"), format!("{:?}", weights.shape())));
    }
    if mode == ThatMode::Direct {
        return Ok(text.embeddings.clone());
    }
    let d = embeddings.cols();
    let mut out = Matrix::zeros(m, d);
    for i in 0..m {
        let wrow = weights.row(i);
        let wsum: f64 = wrow.iter().sum();
        if wsum == 0.0 {
            return Err(Error::DegenerateCorrelation(text.labels[i].clone()));
        }
        let orow = out.row_mut(i);
        for (j, &w) in wrow.iter().enumerate() {
            let p = embeddings.row(j);
            match mode {
                ThatMode::Literal => {
                    for (o, &pv) in orow.iter_mut().zip(p) {
                        *o += activation.apply(w * pv);
                    }
                }
                _ => {
                    for (o, &pv) in orow.iter_mut().zip(p) {
                        *o += w * pv;
                    }
                }
            }
        }
        orow.iter_mut().for_each(|v| *v /= wsum);
    }
    Ok(out)
}

/// Cosine relevance of every point to every label, `n × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Relevance {
    pub scores: Matrix,
    /// Entries where one operand had zero norm (scored 0).
    pub degenerate: usize,
}

pub fn relevance_matrix(embeddings: &Matrix, that: &Matrix) -> Result<Relevance> {
    if embeddings.cols() != that.cols() {
        return Err(Error::dim("relevance_matrix", embeddings.cols(), that.cols()));
    }
    let (n, m) = (embeddings.rows(), that.rows());
    let mut scores = Matrix::zeros(n, m);
    let mut degenerate = 0;
    for j in 0..n {
        for i in 0..m {
            let c = cosine_flagged(embeddings.row(j), that.row(i))?;
            degenerate += c.degenerate as usize;
            scores.set(j, i, c.value);
        }
    }
    if degenerate > 0 {
        log::warn!("{degenerate} relevance entries involved a zero-norm vector");
    }
    Ok(Relevance { scores, degenerate })
}

/// Per point, softmax over labels of `A / τ`.
pub fn pointwise_softmax(a: &Matrix, tau: Temperature) -> Matrix {
    let mut s = a.scale(1.0 / tau.value());
    for r in 0..s.rows() {
        softmax_in_place(s.row_mut(r));
    }
    s
}

/// `-Σ_j ω[y_j] · log S[j, y_j]`.
pub fn weighted_nll(s: &Matrix, ground_truth: &[usize], omega: &ClassWeights) -> Result<f64> {
    if ground_truth.len() != s.rows() {
        return Err(Error::dim("weighted_nll", s.rows(), ground_truth.len()));
    }
    if omega.len() != s.cols() {
        return Err(Error::dim("weighted_nll class weights", s.cols(), omega.len()));
    }
    let mut total = 0.0;
    for (j, &y) in ground_truth.iter().enumerate() {
        if y >= s.cols() {
            return Err(Error::Label { index: y, classes: s.cols() });
        }
        total -= omega.0[y] * s.get(j, y).max(1e-300).ln();
    }
    Ok(total)
}

/// Per-point argmax; ties go to the lowest label index.
pub fn predict(a: &Matrix) -> Vec<usize> {
    (0..a.rows())
        .map(|j| {
            let row = a.row(j);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub activation: Activation,
    pub that_mode: ThatMode,
}

/// Forward values of the correlation head kept for backpropagation.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pre: Matrix,
    weights: Matrix,
    wsum: Vec<f64>,
    pub that: Matrix,
    pub relevance: Matrix,
    pub probs: Matrix,
    tau: f64,
}

pub fn head_forward(
    embeddings: &Matrix,
    text: &TextBank,
    tau: Temperature,
    config: &HeadConfig,
) -> Result<HeadTrace> {
    if embeddings.cols() != text.dim() {
        return Err(Error::dim("text-point head", format!("D = {}", embeddings.cols()), format!("text D = {}", text.dim())));
    }
    let pre = text.embeddings.matmul_nt(embeddings)?;
    let weights = pre.map(|u| config.activation.apply(u));
    let that = text_attention_features_with(text, embeddings, &weights, config.activation, config.that_mode)?;
    let relevance = relevance_matrix(embeddings, &that)?.scores;
    let probs = pointwise_softmax(&relevance, tau);
    let wsum = (0..weights.rows()).map(|i| weights.row(i).iter().sum()).collect();
    Ok(HeadTrace { pre, weights, wsum, that, relevance, probs, tau: tau.value() })
}

/// Gradients of the weighted NLL w.r.t. embeddings and τ.
pub struct HeadGrads {
    pub loss: f64,
    pub d_embeddings: Matrix,
    pub d_tau: f64,
}

pub fn head_loss_backward(
    trace: &HeadTrace,
    embeddings: &Matrix,
    text: &TextBank,
    ground_truth: &[usize],
    omega: &ClassWeights,
    config: &HeadConfig,
) -> Result<HeadGrads> {
    let loss = weighted_nll(&trace.probs, ground_truth, omega)?;
    let (n, m) = trace.relevance.shape();
    let d = embeddings.cols();
    let tau = trace.tau;

    // d loss / d (A / τ)
    let mut d_logits = trace.probs.clone();
    for (j, &y) in ground_truth.iter().enumerate() {
        let w = omega.values()[y];
        for v in d_logits.row_mut(j).iter_mut() {
            *v *= w;
        }
        d_logits.add_at(j, y, -w);
    }
    let mut d_tau = 0.0;
    for (g, a) in d_logits.data().iter().zip(trace.relevance.data()) {
        d_tau -= g * a / (tau * tau);
    }
    let d_a = d_logits.scale(1.0 / tau);

    // cosine backward
    let mut d_emb = Matrix::zeros(n, d);
    let mut d_that = Matrix::zeros(m, d);
    let that_norms: Vec<f64> = (0..m).map(|i| norm(trace.that.row(i))).collect();
    for j in 0..n {
        let p = embeddings.row(j);
        let pn = norm(p);
        if pn == 0.0 {
            continue;
        }
        for i in 0..m {
            let tn = that_norms[i];
            if tn == 0.0 {
                continue;
            }
            let g = d_a.get(j, i);
            if g == 0.0 {
                continue;
            }
            let t = trace.that.row(i);
            let cos = dot(p, t) / (pn * tn);
            let inv = 1.0 / (pn * tn);
            for c in 0..d {
                d_emb.add_at(j, c, g * (t[c] * inv - cos * p[c] / (pn * pn)));
                d_that.add_at(i, c, g * (p[c] * inv - cos * t[c] / (tn * tn)));
            }
        }
    }

    if config.that_mode != ThatMode::Direct {
        let act = config.activation;
        let mut d_w = Matrix::zeros(m, n);
        for i in 0..m {
            let wsum = trace.wsum[i];
            let dt = d_that.row(i);
            let d_num: Vec<f64> = dt.iter().map(|v| v / wsum).collect();
            let d_sum = -dot(dt, trace.that.row(i)) / wsum;
            for j in 0..n {
                let w = trace.weights.get(i, j);
                let p = embeddings.row(j);
                let mut dw = d_sum;
                match config.that_mode {
                    ThatMode::Literal => {
                        for c in 0..d {
                            let sp = act.derivative(w * p[c]);
                            dw += d_num[c] * sp * p[c];
                            d_emb.add_at(j, c, d_num[c] * sp * w);
                        }
                    }
                    _ => {
                        for c in 0..d {
                            dw += d_num[c] * p[c];
                            d_emb.add_at(j, c, d_num[c] * w);
                        }
                    }
                }
                d_w.set(i, j, dw);
            }
        }
        // through w = σ(T · P)
        let d_pre = d_w.zip_with("activation backward", &trace.pre, |g, u| g * act.derivative(u))?;
        d_emb.add_assign(&d_pre.matmul_tn(text.embeddings())?)?;
    }
    Ok(HeadGrads { loss, d_embeddings: d_emb, d_tau })
}
