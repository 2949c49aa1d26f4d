//! Total loss composition, Adam with decoupled weight decay, and the
//! deterministic training loop.
//!
//! Trainable parameters live in one [`ParamSet`] with names prefixed
//! `encoder.`, `projector.` and the scalar `tau`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attndistill::{self, init_projector, AttentionConfig, DistillTarget};
use crate::checkpoint::ModelConfig;
use crate::datagen::{mix_seed, shuffled_indices, Dataset};
use crate::encoder::{self, init_weights, EncoderConfig, Role};
use crate::error::{Error, Result};
use crate::geodistill::{geo_transfer_loss_with_grad, relation_backward, relation_descriptors, GeoNorm, RelationSet};
use crate::ndcore::{Matrix, ParamSet};
use crate::pointcloud::{all_neighbors, anchor_set, AnchorSet, PointCloud};
use crate::textcorr::{
    head_forward, head_loss_backward, predict, Activation, ClassWeights, HeadConfig, Temperature, TextBank, ThatMode,
    TAU_INIT,
};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const PROJECTOR_PREFIX: &str = "projector.";
pub const TAU_NAME: &str = "tau";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

/// Model sizes and optimization settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_a: f64,
    pub lambda_t: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// FPS anchor ratio.
    pub r: f64,
    /// Neighbors per anchor for the relation descriptors.
    pub k: usize,
    pub activation: Activation,
    pub geo_norm: GeoNorm,
    pub distill_target: DistillTarget,
    pub that_mode: ThatMode,
    pub embed_dim: usize,
    pub hidden_widths: Vec<usize>,
    /// Neighborhood size of the encoder's max-pool.
    pub neighborhood_k: usize,
    pub head_dim: usize,
    pub tau_init: f64,
    pub class_balance: bool,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = TrainConfig {
            lambda_a: 0.9,
            lambda_t: 0.7,
            lr: 1e-2,
            weight_decay: 1e-4,
            epochs: 75,
            batch_size: 4,
            seed: 0,
            r: 0.25,
            k: 16,
            activation: Activation::Sigmoid,
            geo_norm: GeoNorm::Mse,
            distill_target: DistillTarget::Omega,
            that_mode: ThatMode::Literal,
            embed_dim: 32,
            hidden_widths: vec![32, 32],
            neighborhood_k: 16,
            head_dim: 16,
            tau_init: TAU_INIT,
            class_balance: true,
        };
        match preset {
            Preset::Desk => base,
            Preset::Paper => TrainConfig {
                lr: 1e-3,
                epochs: 200,
                batch_size: 16,
                embed_dim: 512,
                hidden_widths: vec![64, 128],
                head_dim: 64,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_a >= 0.0 && self.lambda_t >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight decay non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.tau_init > 0.0) {
            return Err(Error::Config("initial temperature must be positive".into()));
        }
        self.model_config().encoder.validate()?;
        AttentionConfig::with_head_dim(self.head_dim).validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            hidden_widths: self.hidden_widths.clone(),
            neighborhood_k: self.neighborhood_k,
            role: Role::Student,
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig { activation: self.activation, that_mode: self.that_mode }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig::with_head_dim(self.head_dim)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder_config(), head_dim: self.head_dim, head: self.head_config() }
    }
}

/// Freshly initialized student parameters (encoder, projector, τ).
pub fn init_student(config: &TrainConfig) -> Result<ParamSet> {
    let enc = init_weights(&config.encoder_config(), mix_seed(config.seed, 101))?;
    let proj = init_projector(config.embed_dim, config.head_dim, mix_seed(config.seed, 102))?;
    let mut params = ParamSet::new();
    params.extend_prefixed(ENCODER_PREFIX, &enc.params)?;
    params.extend_prefixed(PROJECTOR_PREFIX, &proj.params)?;
    params.insert(TAU_NAME, Matrix::filled(1, 1, Temperature::clamp(config.tau_init)))?;
    Ok(params)
}

/// A frozen teacher model.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub params: ParamSet,
    pub config: ModelConfig,
}

/// Per-cloud quantities that never change during training: neighborhoods,
/// anchors and the teacher's distillation targets.
#[derive(Debug, Clone)]
pub struct CloudContext {
    pub cloud: PointCloud,
    pub neighbors: Vec<Vec<usize>>,
    pub anchors: AnchorSet,
    pub teacher_relations: RelationSet,
    pub teacher_attention: Matrix,
}

impl CloudContext {
    pub fn new(cloud: &PointCloud, teacher: &Teacher, config: &TrainConfig) -> Result<Self> {
        let neighbors = all_neighbors(cloud, config.neighborhood_k)?;
        let anchors = anchor_set(cloud, config.r, config.k)?;
        let t_neighbors = if teacher.config.encoder.neighborhood_k == config.neighborhood_k {
            neighbors.clone()
        } else {
            all_neighbors(cloud, teacher.config.encoder.neighborhood_k)?
        };
        let t_emb = encoder::forward(cloud, &t_neighbors, &teacher.params, ENCODER_PREFIX, &teacher.config.encoder)?.output;
        let teacher_relations = relation_descriptors(cloud, &t_emb, &anchors)?;
        let t_attn = attndistill::forward(
            &t_emb,
            &teacher.params,
            PROJECTOR_PREFIX,
            &AttentionConfig::with_head_dim(teacher.config.head_dim),
        )?;
        Ok(CloudContext {
            cloud: cloud.clone(),
            neighbors,
            anchors,
            teacher_relations,
            teacher_attention: t_attn.target(config.distill_target).clone(),
        })
    }
}

/// The three loss terms and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub point_wise: f64,
    pub att_transfer: f64,
    pub geo_transfer: f64,
}

impl LossBreakdown {
    pub fn combine(point_wise: f64, att_transfer: f64, geo_transfer: f64, lambda_a: f64, lambda_t: f64) -> Self {
        LossBreakdown {
            total: point_wise + lambda_a * att_transfer + lambda_t * geo_transfer,
            point_wise,
            att_transfer,
            geo_transfer,
        }
    }
}

/// Result of one cloud's forward (and optional backward) pass.
#[derive(Debug, Clone)]
pub struct CloudOutcome {
    pub loss: LossBreakdown,
    pub correct: usize,
    pub points: usize,
}

/// Multipliers of the three loss terms in a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub point_wise: f64,
    pub att_transfer: f64,
    pub geo_transfer: f64,
}

impl TermWeights {
    pub fn total(config: &TrainConfig) -> Self {
        TermWeights { point_wise: 1.0, att_transfer: config.lambda_a, geo_transfer: config.lambda_t }
    }

    pub fn only(term: LossTerm) -> Self {
        let pick = |t| if term == t { 1.0 } else { 0.0 };
        TermWeights {
            point_wise: pick(LossTerm::PointWise),
            att_transfer: pick(LossTerm::AttTransfer),
            geo_transfer: pick(LossTerm::GeoTransfer),
        }
    }

    pub fn combine(&self, l: &LossBreakdown) -> f64 {
        self.point_wise * l.point_wise + self.att_transfer * l.att_transfer + self.geo_transfer * l.geo_transfer
    }
}

/// Forward pass for one cloud. With `grad_scale = Some(s)`, adds `s` times
/// the gradient of `L_total` to the parameter accumulators.
pub fn cloud_loss(
    ctx: &CloudContext,
    params: &mut ParamSet,
    text: &TextBank,
    omega: &ClassWeights,
    config: &TrainConfig,
    grad_scale: Option<f64>,
) -> Result<CloudOutcome> {
    cloud_loss_weighted(ctx, params, text, omega, config, TermWeights::total(config), grad_scale)
}

/// Like [`cloud_loss`], but backpropagates `weights`-combined terms.
pub fn cloud_loss_weighted(
    ctx: &CloudContext,
    params: &mut ParamSet,
    text: &TextBank,
    omega: &ClassWeights,
    config: &TrainConfig,
    weights: TermWeights,
    grad_scale: Option<f64>,
) -> Result<CloudOutcome> {
    let enc_cfg = config.encoder_config();
    let attn_cfg = config.attention_config();
    let head_cfg = config.head_config();
    let labels = ctx.cloud.require_labels()?;
    let n = ctx.cloud.len();

    let trace = encoder::forward(&ctx.cloud, &ctx.neighbors, params, ENCODER_PREFIX, &enc_cfg)?;
    let emb = &trace.output;

    let rel = relation_descriptors(&ctx.cloud, emb, &ctx.anchors)?;
    let (geo, d_rel) = geo_transfer_loss_with_grad(&rel, &ctx.teacher_relations, config.geo_norm)?;

    let attn = attndistill::forward(emb, params, PROJECTOR_PREFIX, &attn_cfg)?;
    let (att, d_att) = attndistill::attention_transfer_loss_with_grad(attn.target(config.distill_target), &ctx.teacher_attention)?;

    let tau = Temperature::new(params.param(TAU_NAME)?.get(0, 0))?;
    let head = head_forward(emb, text, tau, &head_cfg)?;
    let hg = head_loss_backward(&head, emb, text, labels, omega, &head_cfg)?;

    let loss = LossBreakdown::combine(hg.loss, att, geo, config.lambda_a, config.lambda_t);
    let pred = predict(&head.relevance);
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();

    if let Some(s) = grad_scale {
        let mut d_emb = hg.d_embeddings.scale(s * weights.point_wise);
        if weights.geo_transfer > 0.0 {
            d_emb.add_assign(&relation_backward(&ctx.anchors, &d_rel.scale(weights.geo_transfer * s), n)?)?;
        }
        if weights.att_transfer > 0.0 {
            let d = attndistill::backward(
                emb,
                &attn,
                params,
                PROJECTOR_PREFIX,
                &attn_cfg,
                config.distill_target,
                &d_att.scale(weights.att_transfer * s),
            )?;
            d_emb.add_assign(&d)?;
        }
        encoder::backward(&trace, params, ENCODER_PREFIX, &enc_cfg, &d_emb)?;
        params.accumulate(TAU_NAME, &Matrix::filled(1, 1, s * weights.point_wise * hg.d_tau))?;
    }
    Ok(CloudOutcome { loss, correct, points: n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    GeoTransfer,
    AttTransfer,
    PointWise,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::GeoTransfer, LossTerm::AttTransfer, LossTerm::PointWise, LossTerm::Total];
}

#[derive(Debug, Clone, Serialize)]
pub struct TermCheck {
    pub term: LossTerm,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
    pub passed: bool,
}

/// Finite-difference check of every loss term w.r.t. every trainable
/// parameter on one cloud. Each term is differenced relative to its value
/// at `params`, so small contributions are not lost to rounding against
/// the larger point-wise term.
pub fn gradient_suite(
    ctx: &CloudContext,
    params: &ParamSet,
    text: &TextBank,
    omega: &ClassWeights,
    config: &TrainConfig,
    h: f64,
    tol: f64,
) -> Result<Vec<TermCheck>> {
    let mut base = params.clone();
    let b = cloud_loss(ctx, &mut base, text, omega, config, None)?.loss;
    let mut out = Vec::new();
    for term in LossTerm::ALL {
        let w = match term {
            LossTerm::Total => TermWeights::total(config),
            t => TermWeights::only(t),
        };
        let f = |p: &mut ParamSet| {
            let l = cloud_loss_weighted(ctx, p, text, omega, config, w, Some(1.0))?.loss;
            Ok(w.point_wise * (l.point_wise - b.point_wise)
                + w.att_transfer * (l.att_transfer - b.att_transfer)
                + w.geo_transfer * (l.geo_transfer - b.geo_transfer))
        };
        let r = crate::ndcore::grad_check(f, params, h, tol)?;
        out.push(TermCheck {
            term,
            max_rel_error: r.max_rel_error,
            worst_param: r.worst_param,
            worst_index: r.worst_index,
            analytic: r.analytic,
            numeric: r.numeric,
            entries_checked: r.entries_checked,
            passed: r.passed,
        });
    }
    Ok(out)
}

/// Runs the full pipeline on one labeled cloud and returns `L_total` with
/// its components.
pub fn total_loss(
    cloud: &PointCloud,
    text: &TextBank,
    teacher: &Teacher,
    student: &ParamSet,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let ctx = CloudContext::new(cloud, teacher, config)?;
    let omega = ClassWeights::uniform(text.len());
    let mut params = student.clone();
    Ok(cloud_loss(&ctx, &mut params, text, &omega, config, None)?.loss)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |ps: &ParamSet| {
            ps.iter()
                .map(|(n, m)| (n.to_string(), Matrix::zeros(m.rows(), m.cols())))
                .collect::<BTreeMap<_, _>>()
        };
        AdamState { step: 0, first: zeros(params), second: zeros(params) }
    }
}

/// Weight decay applies to weight matrices only, not biases or τ.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with(".weight") || name.starts_with(PROJECTOR_PREFIX)
}

/// One Adam step with decoupled weight decay `θ ← θ − lr·γ·θ` applied
/// first, followed by the bias-corrected Adam update. τ is clamped after.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    for (name, _, g) in params.iter_with_grads_mut() {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p, g) in params.iter_with_grads_mut() {
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
        let decay = if is_decayed(name) { lr * weight_decay } else { 0.0 };
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            pd[i] -= decay * pd[i];
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    if let Some(tau) = params.get_mut(TAU_NAME) {
        let v = tau.get(0, 0);
        tau.set(0, 0, Temperature::clamp(v));
    }
    Ok(())
}

/// Inverse-frequency class weights over the dataset's points.
pub fn class_weights(dataset: &Dataset, m: usize) -> ClassWeights {
    let mut counts = vec![0u64; m];
    for c in &dataset.clouds {
        for &l in c.labels().unwrap_or(&[]) {
            if l < m {
                counts[l] += 1;
            }
        }
    }
    ClassWeights::from_counts(&counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_total: f64,
    pub l_point_wise: f64,
    pub l_att_transfer: f64,
    pub l_geo_transfer: f64,
    pub train_accuracy: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    /// Dataset losses at the initial and final parameters.
    pub initial: Option<DatasetLoss>,
    pub last: Option<DatasetLoss>,
}

impl TrainReport {
    /// One JSON object per line, one line per epoch.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Mean per-cloud losses and point accuracy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetLoss {
    pub loss: LossBreakdown,
    pub accuracy: f64,
}

/// Checks that the text bank lists the dataset's labels, in order, at the
/// model's embedding width.
pub fn check_bank_for_training(dataset: &Dataset, text: &TextBank, config: &TrainConfig) -> Result<()> {
    if text.dim() != config.embed_dim {
        return Err(Error::dim("text bank", format!("D = {}", config.embed_dim), format!("D = {}", text.dim())));
    }
    if text.labels() != dataset.labels() {
        return Err(Error::Data(format!(
            "text bank labels {:?} do not match dataset labels {:?}",
            text.labels(),
            dataset.labels()
        )));
    }
    Ok(())
}

fn check_teacher(teacher: &Teacher, config: &TrainConfig) -> Result<()> {
    if teacher.config.encoder.embed_dim != config.embed_dim {
        return Err(Error::Shape {
            name: "teacher embed_dim".into(),
            expected: (1, config.embed_dim),
            found: (1, teacher.config.encoder.embed_dim),
        });
    }
    if teacher.config.head_dim != config.head_dim {
        return Err(Error::Shape {
            name: "teacher head_dim".into(),
            expected: (1, config.head_dim),
            found: (1, teacher.config.head_dim),
        });
    }
    teacher.config.check_params(&teacher.params)
}

/// Precomputes every cloud's context.
pub fn prepare_contexts(dataset: &Dataset, teacher: &Teacher, config: &TrainConfig) -> Result<Vec<CloudContext>> {
    check_teacher(teacher, config)?;
    dataset.clouds.iter().map(|c| CloudContext::new(c, teacher, config)).collect()
}

/// Mean losses over all clouds at the given parameters (no gradients).
pub fn dataset_loss(
    contexts: &[CloudContext],
    params: &ParamSet,
    text: &TextBank,
    omega: &ClassWeights,
    config: &TrainConfig,
) -> Result<DatasetLoss> {
    let mut p = params.clone();
    let mut sum = LossBreakdown::default();
    let (mut correct, mut points) = (0, 0);
    for ctx in contexts {
        let o = cloud_loss(ctx, &mut p, text, omega, config, None)?;
        sum.total += o.loss.total;
        sum.point_wise += o.loss.point_wise;
        sum.att_transfer += o.loss.att_transfer;
        sum.geo_transfer += o.loss.geo_transfer;
        correct += o.correct;
        points += o.points;
    }
    let k = contexts.len().max(1) as f64;
    Ok(DatasetLoss {
        loss: LossBreakdown {
            total: sum.total / k,
            point_wise: sum.point_wise / k,
            att_transfer: sum.att_transfer / k,
            geo_transfer: sum.geo_transfer / k,
        },
        accuracy: correct as f64 / points.max(1) as f64,
    })
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub model: ModelConfig,
    pub report: TrainReport,
}

/// Trains the student encoder, projector and τ against a frozen teacher.
pub fn train(dataset: &Dataset, text: &TextBank, teacher: &Teacher, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    check_bank_for_training(dataset, text, config)?;
    let contexts = prepare_contexts(dataset, teacher, config)?;
    let omega = if config.class_balance {
        class_weights(dataset, text.len())
    } else {
        ClassWeights::uniform(text.len())
    };
    let mut params = init_student(config)?;
    let initial = dataset_loss(&contexts, &params, text, &omega, config)?;
    let mut report = train_loop(&contexts, &mut params, text, &omega, config)?;
    report.initial = Some(initial);
    report.last = Some(if config.epochs == 0 { initial } else { dataset_loss(&contexts, &params, text, &omega, config)? });
    Ok(TrainOutcome { params, model: config.model_config(), report })
}

/// The epoch/batch loop over prepared contexts; mutates `params` in place.
pub fn train_loop(
    contexts: &[CloudContext],
    params: &mut ParamSet,
    text: &TextBank,
    omega: &ClassWeights,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let mut state = AdamState::new(params);
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let order = shuffled_indices(contexts.len(), mix_seed(config.seed, 1_000 + epoch as u64));
        let mut sum = LossBreakdown::default();
        let (mut correct, mut points) = (0usize, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &ci in batch {
                let o = cloud_loss(&contexts[ci], params, text, omega, config, Some(scale))?;
                if !o.loss.total.is_finite() {
                    return Err(Error::Numeric(format!("loss at epoch {epoch}, batch {b}, cloud {ci}")));
                }
                sum.total += o.loss.total;
                sum.point_wise += o.loss.point_wise;
                sum.att_transfer += o.loss.att_transfer;
                sum.geo_transfer += o.loss.geo_transfer;
                correct += o.correct;
                points += o.points;
            }
            adam_step(params, &mut state, config.lr, config.weight_decay)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
        }
        let k = contexts.len() as f64;
        report.epochs.push(EpochRecord {
            epoch,
            l_total: sum.total / k,
            l_point_wise: sum.point_wise / k,
            l_att_transfer: sum.att_transfer / k,
            l_geo_transfer: sum.geo_transfer / k,
            train_accuracy: correct as f64 / points.max(1) as f64,
            tau: params.param(TAU_NAME)?.get(0, 0),
        });
        log::info!(
            "epoch {epoch}: L_total {:.4} acc {:.3} tau {:.4}",
            sum.total / k,
            correct as f64 / points.max(1) as f64,
            params.param(TAU_NAME)?.get(0, 0)
        );
    }
    report.steps = state.step;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_dataset, gen_teacher, gen_textbank, DatasetSpec, ShapeFamily};
    use crate::ndcore::grad_check;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            embed_dim: 8,
            hidden_widths: vec![6],
            neighborhood_k: 3,
            head_dim: 4,
            k: 4,
            r: 0.25,
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::preset(Preset::Desk)
        }
    }

    fn fixture(config: &TrainConfig) -> (Dataset, TextBank, Teacher) {
        let ds = gen_dataset(&DatasetSpec {
            families: vec![ShapeFamily::Mug, ShapeFamily::Knife],
            num_clouds: 3,
            points: 24,
            partial_view: false,
            seed: 3,
        })
        .unwrap();
        let bank = gen_textbank(ds.labels(), config.embed_dim, 5, &[]).unwrap();
        let (params, model) = gen_teacher(&config.encoder_config(), config.head_dim, config.head_config(), 9).unwrap();
        (ds, bank, Teacher { params, config: model })
    }

    #[test]
    fn combine_arithmetic() {
        assert!((LossBreakdown::combine(2.0, 1.0, 1.0, 0.9, 0.7).total - 3.6).abs() < 1e-15);
        assert_eq!(LossBreakdown::combine(1.25, 9.0, 4.0, 0.0, 0.0).total, 1.25);
    }

    #[test]
    fn student_equal_to_teacher_has_zero_transfer() {
        let cfg = tiny_config();
        let (ds, bank, _) = fixture(&cfg);
        let student = init_student(&cfg).unwrap();
        let mut teacher_params = student.subset(ENCODER_PREFIX);
        let mut t = ParamSet::new();
        t.extend_prefixed(ENCODER_PREFIX, &teacher_params).unwrap();
        t.extend_prefixed(PROJECTOR_PREFIX, &student.subset(PROJECTOR_PREFIX)).unwrap();
        teacher_params = t;
        let teacher = Teacher {
            params: teacher_params,
            config: ModelConfig { encoder: EncoderConfig { role: Role::Teacher, ..cfg.encoder_config() }, ..cfg.model_config() },
        };
        let l = total_loss(&ds.clouds[0], &bank, &teacher, &student, &cfg).unwrap();
        assert_eq!(l.att_transfer, 0.0);
        assert_eq!(l.geo_transfer, 0.0);
        assert_eq!(l.total, l.point_wise);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = ParamSet::new();
        p.insert("layer.weight", Matrix::from_rows(&[[0.5, -2.0, 3.0]]).unwrap()).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, 1e-3, 0.0).unwrap();
        assert_eq!(p, before);

        p.accumulate("layer.weight", &Matrix::filled(1, 3, 0.37)).unwrap();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, 1e-3, 0.0).unwrap();
        for (a, b) in p.get("layer.weight").unwrap().data().iter().zip(before.get("layer.weight").unwrap().data()) {
            assert!(((b - a) - 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_matches_hand_stepped_quadratic() {
        // f(θ) = θ², θ₀ = 1, lr = 0.1, three steps
        let mut p = ParamSet::new();
        p.insert("x", Matrix::filled(1, 1, 1.0)).unwrap();
        let mut st = AdamState::new(&p);
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            p.zero_grads();
            let x = p.get("x").unwrap().get(0, 0);
            p.accumulate("x", &Matrix::filled(1, 1, 2.0 * x)).unwrap();
            adam_step(&mut p, &mut st, 0.1, 0.0).unwrap();

            let g = 2.0 * theta;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p.get("x").unwrap().get(0, 0) - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_decay_skips_bias_and_tau_and_rejects_nan() {
        let mut p = ParamSet::new();
        p.insert("a.weight", Matrix::filled(1, 1, 1.0)).unwrap();
        p.insert("a.bias", Matrix::filled(1, 1, 1.0)).unwrap();
        p.insert("tau", Matrix::filled(1, 1, 1.0)).unwrap();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, 0.1, 0.5).unwrap();
        assert!((p.get("a.weight").unwrap().get(0, 0) - 0.95).abs() < 1e-15);
        assert_eq!(p.get("a.bias").unwrap().get(0, 0), 1.0);
        assert_eq!(p.get("tau").unwrap().get(0, 0), 1.0);

        p.accumulate("a.bias", &Matrix::filled(1, 1, f64::NAN)).unwrap();
        assert!(matches!(adam_step(&mut p, &mut st, 0.1, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn tau_is_clamped_after_step() {
        let mut p = ParamSet::new();
        p.insert("tau", Matrix::filled(1, 1, 0.0015)).unwrap();
        p.accumulate("tau", &Matrix::filled(1, 1, 5.0)).unwrap();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, 0.01, 0.0).unwrap();
        assert_eq!(p.get("tau").unwrap().get(0, 0), crate::textcorr::TAU_MIN);
    }

    #[test]
    fn class_weight_examples() {
        let cfg = tiny_config();
        let (ds, _, _) = fixture(&cfg);
        let w = class_weights(&ds, ds.labels().len() + 1);
        assert_eq!(*w.values().last().unwrap(), 1.0);
    }

    #[test]
    fn full_loss_gradient_passes_check() {
        let cfg = tiny_config();
        let (ds, bank, teacher) = fixture(&cfg);
        let ctx = CloudContext::new(&ds.clouds[0], &teacher, &cfg).unwrap();
        let omega = class_weights(&ds, bank.len());
        let params = init_student(&cfg).unwrap();
        let loss = |p: &mut ParamSet| cloud_loss(&ctx, p, &bank, &omega, &cfg, Some(1.0)).map(|o| o.loss.total);
        let rep = grad_check(loss, &params, 1e-5, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn every_term_passes_the_suite() {
        let cfg = tiny_config();
        let (ds, bank, teacher) = fixture(&cfg);
        let ctx = CloudContext::new(&ds.clouds[1], &teacher, &cfg).unwrap();
        let omega = class_weights(&ds, bank.len());
        let checks = gradient_suite(&ctx, &init_student(&cfg).unwrap(), &bank, &omega, &cfg, 1e-5, 1e-4).unwrap();
        assert_eq!(checks.len(), 4);
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
        let w = TermWeights::only(LossTerm::AttTransfer);
        assert_eq!(w.combine(&LossBreakdown::combine(5.0, 2.0, 3.0, 0.9, 0.7)), 2.0);
    }

    #[test]
    fn zero_epochs_returns_initial_student() {
        let cfg = TrainConfig { epochs: 0, ..tiny_config() };
        let (ds, bank, teacher) = fixture(&cfg);
        let out = train(&ds, &bank, &teacher, &cfg).unwrap();
        assert!(out.report.epochs.is_empty());
        assert_eq!(out.params, init_student(&cfg).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_reports_each_epoch() {
        let cfg = tiny_config();
        let (ds, bank, teacher) = fixture(&cfg);
        let a = train(&ds, &bank, &teacher, &cfg).unwrap();
        let b = train(&ds, &bank, &teacher, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.report.epochs.len(), 2);
        assert_eq!(a.report.steps, 4);
        assert_eq!(a.report.to_json_lines().unwrap().lines().count(), 2);
    }

    #[test]
    fn mismatched_bank_or_teacher_rejected() {
        let cfg = tiny_config();
        let (ds, bank, teacher) = fixture(&cfg);
        let wrong_dim = gen_textbank(ds.labels(), 6, 1, &[]).unwrap();
        assert!(train(&ds, &wrong_dim, &teacher, &cfg).is_err());
        let renamed = bank.relabeled(vec!["x".into(), "y".into(), "z".into()]).unwrap();
        assert!(train(&ds, &renamed, &teacher, &cfg).is_err());
        let other = TrainConfig { embed_dim: 10, ..cfg.clone() };
        let (tp, tc) = gen_teacher(&other.encoder_config(), cfg.head_dim, cfg.head_config(), 1).unwrap();
        let bad_teacher = Teacher { params: tp, config: tc };
        assert!(matches!(train(&ds, &bank, &bad_teacher, &cfg), Err(Error::Shape { .. })));
    }
}
