//! Confusion-matrix metrics (mIoU, Acc, mAcc) and the evaluation protocol.
//!
//! Labels are resolved by position in the evaluation text bank, so a bank
//! with different label strings than the training bank can be swapped in.

use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelConfig;
use crate::datagen::Dataset;
use crate::encoder;
use crate::error::{Error, Result};
use crate::ndcore::{Matrix, ParamSet};
use crate::pointcloud::{all_neighbors, PointCloud};
use crate::textcorr::{head_forward, predict, HeadConfig, Temperature, TextBank};
use crate::trainer::{train, Teacher, TrainConfig, ENCODER_PREFIX, TAU_NAME};

/// `counts[y][p]`: points with ground truth `y` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, ground_truth: &[usize], predictions: &[usize]) -> Result<()> {
        if ground_truth.len() != predictions.len() {
            return Err(Error::dim("accumulate", ground_truth.len(), predictions.len()));
        }
        let m = self.classes;
        if let Some(&bad) = ground_truth.iter().chain(predictions).find(|&&l| l >= m) {
            return Err(Error::Label { index: bad, classes: m });
        }
        for (&y, &p) in ground_truth.iter().zip(predictions) {
            self.counts[y * m + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("merge", self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|y| self.get(y, c)).sum()
    }

    /// IoU per class, `None` where the union is empty.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Accuracy per class, `None` where the class has no ground-truth points.
    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let support = self.row_sum(c);
                (support > 0).then(|| self.get(c, c) as f64 / support as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub acc: f64,
    pub macc: f64,
}

fn mean_defined(values: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

pub fn metrics(conf: &ConfusionMatrix) -> Result<Metrics> {
    let total = conf.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let trace: u64 = (0..conf.classes).map(|c| conf.get(c, c)).sum();
    Ok(Metrics {
        miou: mean_defined(&conf.class_iou()),
        acc: trace as f64 / total as f64,
        macc: mean_defined(&conf.class_accuracy()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: String,
    pub iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub per_class: Vec<ClassRow>,
    pub labels: Vec<String>,
    pub points: u64,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Human-readable table with percentages.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let width = self.labels.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>7}  {:>7}  {:>8}\n", "label", "IoU", "Acc", "points");
        for r in &self.per_class {
            out.push_str(&format!("{:<width$}  {:>7}  {:>7}  {:>8}\n", r.label, pct(r.iou), pct(r.accuracy), r.support));
        }
        out.push_str(&format!(
            "mIoU {:.2}  Acc {:.2}  mAcc {:.2}\n",
            100.0 * self.metrics.miou,
            100.0 * self.metrics.acc,
            100.0 * self.metrics.macc
        ));
        out
    }
}

/// Student embeddings for one cloud.
pub fn embed(cloud: &PointCloud, params: &ParamSet, model: &ModelConfig) -> Result<Matrix> {
    let neighbors = all_neighbors(cloud, model.encoder.neighborhood_k)?;
    Ok(encoder::forward(cloud, &neighbors, params, ENCODER_PREFIX, &model.encoder)?.output)
}

fn stored_tau(params: &ParamSet) -> Result<Temperature> {
    match params.get(TAU_NAME) {
        Some(t) => Temperature::new(t.get(0, 0)),
        None => Ok(Temperature::default()),
    }
}

/// Relevance matrix `A` (points × labels) for one cloud.
pub fn relevance(cloud: &PointCloud, text: &TextBank, params: &ParamSet, model: &ModelConfig) -> Result<Matrix> {
    let emb = embed(cloud, params, model)?;
    Ok(head_forward(&emb, text, stored_tau(params)?, &model.head)?.relevance)
}

/// Per-point label indices into `text`.
pub fn predict_cloud(cloud: &PointCloud, text: &TextBank, params: &ParamSet, model: &ModelConfig) -> Result<Vec<usize>> {
    Ok(predict(&relevance(cloud, text, params, model)?))
}

/// Confusion matrix over a labeled dataset.
pub fn confusion(dataset: &Dataset, text: &TextBank, params: &ParamSet, model: &ModelConfig) -> Result<ConfusionMatrix> {
    if text.dim() != model.encoder.embed_dim {
        return Err(Error::dim(
            "evaluation text bank",
            format!("D = {}", model.encoder.embed_dim),
            format!("D = {}", text.dim()),
        ));
    }
    let mut conf = ConfusionMatrix::new(text.len());
    for cloud in &dataset.clouds {
        let gt = cloud.require_labels()?;
        cloud.validate_labels(text.len())?;
        conf.accumulate(gt, &predict_cloud(cloud, text, params, model)?)?;
    }
    Ok(conf)
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    model: &'a ModelConfig,
    protocol: &'a crate::datagen::Protocol,
    clouds: usize,
    n_points: usize,
    dataset_seed: u64,
}

pub fn evaluate(dataset: &Dataset, text: &TextBank, params: &ParamSet, model: &ModelConfig) -> Result<EvalReport> {
    model.check_params(params)?;
    let conf = confusion(dataset, text, params, model)?;
    let m = metrics(&conf)?;
    let ious = conf.class_iou();
    let accs = conf.class_accuracy();
    let per_class = text
        .labels()
        .iter()
        .enumerate()
        .map(|(c, label)| ClassRow {
            label: label.clone(),
            iou: ious[c],
            accuracy: accs[c],
            support: (0..conf.classes()).map(|p| conf.get(c, p)).sum(),
        })
        .collect();
    let echo = ConfigEcho {
        model,
        protocol: &dataset.manifest.protocol,
        clouds: dataset.len(),
        n_points: dataset.manifest.n_points,
        dataset_seed: dataset.manifest.seed,
    };
    Ok(EvalReport {
        metrics: m,
        per_class,
        labels: text.labels().to_vec(),
        points: conf.total(),
        config: serde_json::to_value(echo).map_err(|e| Error::Data(e.to_string()))?,
    })
}

/// One row of the distillation / correlation-head ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub lambda_a: f64,
    pub lambda_t: f64,
    pub head: HeadConfig,
    pub final_loss: f64,
    pub metrics: Metrics,
}

/// Trains and evaluates the four combinations of {no distillation, default
/// distillation weights} × {configured head, relevance-only head}.
pub fn ablation(
    train_set: &Dataset,
    eval_set: &Dataset,
    text: &TextBank,
    teacher: &Teacher,
    base: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for kd in [false, true] {
        for direct in [false, true] {
            let mut cfg = base.clone();
            if !kd {
                cfg.lambda_a = 0.0;
                cfg.lambda_t = 0.0;
            }
            if direct {
                cfg.that_mode = crate::textcorr::ThatMode::Direct;
            }
            let out = train(train_set, text, teacher, &cfg)?;
            let report = evaluate(eval_set, text, &out.params, &out.model)?;
            rows.push(AblationRow {
                name: format!("{}{}", if kd { "KD" } else { "no-KD" }, if direct { " + relevance-only" } else { " + TPC" }),
                lambda_a: cfg.lambda_a,
                lambda_t: cfg.lambda_t,
                head: cfg.head_config(),
                final_loss: out.report.epochs.last().map_or(f64::NAN, |e| e.l_total),
                metrics: report.metrics,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<22}  {:>5}  {:>5}  {:>7}  {:>7}  {:>7}  {:>9}\n", "config", "λa", "λt", "mIoU", "Acc", "mAcc", "L_total");
    for r in rows {
        out.push_str(&format!(
            "{:<22}  {:>5.2}  {:>5.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>9.4}\n",
            r.name,
            r.lambda_a,
            r.lambda_t,
            100.0 * r.metrics.miou,
            100.0 * r.metrics.acc,
            100.0 * r.metrics.macc,
            r.final_loss
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn conf(m: usize, gt: &[usize], pred: &[usize]) -> ConfusionMatrix {
        let mut c = ConfusionMatrix::new(m);
        c.accumulate(gt, pred).unwrap();
        c
    }

    #[test]
    fn accumulate_examples() {
        let mut c = ConfusionMatrix::new(3);
        c.accumulate(&[], &[]).unwrap();
        assert_eq!(c, ConfusionMatrix::new(3));
        c.accumulate(&[0], &[1]).unwrap();
        assert_eq!(c.get(0, 1), 1);
        assert!(matches!(c.accumulate(&[3], &[0]), Err(Error::Label { index: 3, classes: 3 })));
        assert!(c.accumulate(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&conf(2, &[0, 0, 1, 1], &[0, 1, 1, 1])).unwrap();
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(m.acc, 0.75);
        assert_eq!(m.macc, 0.75);
        assert_eq!(metrics(&conf(3, &[0, 2, 2], &[0, 2, 2])).unwrap(), Metrics { miou: 1.0, acc: 1.0, macc: 1.0 });
        assert_eq!(metrics(&conf(2, &[0, 1], &[1, 0])).unwrap(), Metrics { miou: 0.0, acc: 0.0, macc: 0.0 });
        assert!(matches!(metrics(&ConfusionMatrix::new(2)), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn table_has_a_row_per_label() {
        let c = conf(2, &[0, 1], &[0, 0]);
        let report = EvalReport {
            metrics: metrics(&c).unwrap(),
            per_class: vec![
                ClassRow { label: "grasp".into(), iou: Some(0.5), accuracy: Some(1.0), support: 1 },
                ClassRow { label: "cut".into(), iou: None, accuracy: Some(0.0), support: 1 },
            ],
            labels: vec!["grasp".into(), "cut".into()],
            points: 2,
            config: serde_json::Value::Null,
        };
        let t = report.table();
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("50.00"));
    }

    fn instance() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (1usize..6).prop_flat_map(|m| (Just(m), prop::collection::vec((0..m, 0..m), 1..60)))
    }

    proptest! {
        #[test]
        fn additive((m, pairs) in instance(), split in 0usize..60) {
            let (gt, pred): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let s = split.min(gt.len());
            let mut a = conf(m, &gt[..s], &pred[..s]);
            a.accumulate(&gt[s..], &pred[s..]).unwrap();
            prop_assert_eq!(a, conf(m, &gt, &pred));
        }

        #[test]
        fn acc_is_support_weighted_class_accuracy((m, pairs) in instance()) {
            let (gt, pred): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let c = conf(m, &gt, &pred);
            let acc = metrics(&c).unwrap().acc;
            let weighted: f64 = c
                .class_accuracy()
                .iter()
                .enumerate()
                .filter_map(|(k, a)| a.map(|a| a * gt.iter().filter(|&&y| y == k).count() as f64))
                .sum::<f64>()
                / gt.len() as f64;
            prop_assert!((acc - weighted).abs() < 1e-12);
        }

        #[test]
        fn permutation_invariant((m, pairs) in instance(), seed in any::<u64>()) {
            let (gt, pred): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let perm = crate::datagen::shuffled_indices(m, seed);
            let pg: Vec<_> = gt.iter().map(|&y| perm[y]).collect();
            let pp: Vec<_> = pred.iter().map(|&y| perm[y]).collect();
            let a = metrics(&conf(m, &gt, &pred)).unwrap();
            let b = metrics(&conf(m, &pg, &pp)).unwrap();
            prop_assert!((a.miou - b.miou).abs() < 1e-12);
            prop_assert_eq!(a.acc, b.acc);
            prop_assert!((a.macc - b.macc).abs() < 1e-12);
        }

        #[test]
        fn metrics_in_unit_interval((m, pairs) in instance()) {
            let (gt, pred): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let r = metrics(&conf(m, &gt, &pred)).unwrap();
            for v in [r.miou, r.acc, r.macc] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
