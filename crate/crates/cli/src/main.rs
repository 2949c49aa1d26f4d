use std::path::{Path, PathBuf};
use std::process::ExitCode;

use affordkd::binio::{push_f32_le, push_u16_le, to_json_bytes, write_file};
use affordkd::checkpoint::{load_checkpoint, save_checkpoint};
use affordkd::datagen::{
    gen_dataset, gen_teacher, gen_textbank, mix_seed, read_dataset, write_dataset, DatasetSpec,
    ShapeFamily, DEFAULT_LABELS,
};
use affordkd::evalmetrics::{ablation, ablation_table, embed, evaluate, predict_cloud};
use affordkd::geodistill::GeoNorm;
use affordkd::attndistill::DistillTarget;
use affordkd::textcorr::{read_textbank, write_textbank, Activation, ClassWeights, TextBank, ThatMode};
use affordkd::trainer::{gradient_suite, init_student, train, CloudContext, Preset, Teacher, TrainConfig};
use affordkd::{Error, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "affordkd", version, about = "Open-vocabulary point-cloud affordance detection with distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled point-cloud dataset
    GenData(GenData),
    /// Generate a text bank of stand-in label embeddings
    GenTextbank(GenTextbank),
    /// Generate a frozen teacher checkpoint
    GenTeacher(GenTeacher),
    /// Train a student against a teacher and a text bank
    Train(Train),
    /// Evaluate a student checkpoint (mIoU, Acc, mAcc)
    Eval(Eval),
    /// Per-point label predictions from a text bank
    Predict(Predict),
    /// Finite-difference check of every loss gradient on small shapes
    Gradcheck(Gradcheck),
    /// Write per-point embeddings and labels for external visualization
    DumpEmbeddings(DumpEmbeddings),
    /// Train and evaluate the distillation / correlation-head ablation grid
    Ablate(Ablate),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Configuration preset
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    /// Output directory
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Number of clouds
    #[arg(long, default_value_t = 16)]
    num_clouds: usize,
    /// Points per cloud [default: desk 256, paper 2048]
    #[arg(long)]
    points: Option<usize>,
    /// Crop every cloud to a half-space partial view
    #[arg(long)]
    partial_view: bool,
    /// Comma-separated shape families (mug, table, bottle, knife)
    #[arg(long, value_delimiter = ',', default_value = "mug,table,bottle,knife")]
    families: Vec<String>,
}

#[derive(Args)]
struct GenTextbank {
    #[command(flatten)]
    common: Common,
    /// Output directory
    #[arg(long, default_value = "textbank")]
    out: PathBuf,
    /// Comma-separated labels [default: labels of --data, else the six default labels]
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    /// Take labels from this dataset directory
    #[arg(long, conflicts_with = "labels")]
    data: Option<PathBuf>,
    /// Embedding width [default: desk 32, paper 512]
    #[arg(long)]
    dim: Option<usize>,
    /// Comma-separated synonym group, e.g. grasp,hold; repeatable
    #[arg(long = "group")]
    groups: Vec<String>,
}

#[derive(Args)]
struct GenTeacher {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Output checkpoint file
    #[arg(long, default_value = "teacher.ckpt")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Point-text activation
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    /// Text attention feature form
    #[arg(long, value_enum)]
    that_mode: Option<ThatModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Sigmoid,
    Relu,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThatModeArg {
    Literal,
    WeightedMean,
    Direct,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeoNormArg {
    Mse,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Omega,
    Weights,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Attention-transfer weight [default: 0.9]
    #[arg(long)]
    lambda_a: Option<f64>,
    /// Geometric-relation weight [default: 0.7]
    #[arg(long)]
    lambda_t: Option<f64>,
    /// Adam step size [default: desk 1e-2, paper 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// Decoupled weight decay [default: 1e-4]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Epochs [default: desk 75, paper 200]
    #[arg(long)]
    epochs: Option<usize>,
    /// Clouds per batch [default: desk 4, paper 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// FPS anchor ratio [default: 0.25]
    #[arg(long)]
    r: Option<f64>,
    /// Neighbors per anchor [default: 16]
    #[arg(long)]
    k: Option<usize>,
    /// Relation loss norm
    #[arg(long, value_enum)]
    geo_norm: Option<GeoNormArg>,
    /// Distilled attention quantity
    #[arg(long, value_enum)]
    distill_target: Option<TargetArg>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    opts: TrainArgs,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Text bank directory or json file
    #[arg(long)]
    textbank: PathBuf,
    /// Teacher checkpoint
    #[arg(long)]
    teacher: PathBuf,
    /// Output directory for student.ckpt and train_report.jsonl
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Text bank directory or json file
    #[arg(long)]
    textbank: PathBuf,
    /// Student checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Also write eval.json into this directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Predict {
    #[command(flatten)]
    common: Common,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Text bank directory or json file
    #[arg(long)]
    textbank: PathBuf,
    /// Student checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated subset of text bank labels to choose from
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    /// Only this cloud index
    #[arg(long)]
    cloud: Option<usize>,
    /// Also write predictions.json into this directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    opts: TrainArgs,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Relative error tolerance
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct DumpEmbeddings {
    #[command(flatten)]
    common: Common,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint (student or teacher)
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory
    #[arg(long, default_value = "embeddings")]
    out: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    opts: TrainArgs,
    /// Training dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Evaluation dataset directory [default: the training set]
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Text bank directory or json file
    #[arg(long)]
    textbank: PathBuf,
    /// Teacher checkpoint
    #[arg(long)]
    teacher: PathBuf,
    /// Also write ablation.json into this directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn preset_table() -> String {
    let d = TrainConfig::preset(Preset::Desk);
    let p = TrainConfig::preset(Preset::Paper);
    let rows: Vec<(&str, String, String)> = vec![
        ("points", "256".into(), "2048".into()),
        ("embed dim D", d.embed_dim.to_string(), p.embed_dim.to_string()),
        ("hidden widths", format!("{:?}", d.hidden_widths), format!("{:?}", p.hidden_widths)),
        ("head dim d_h", d.head_dim.to_string(), p.head_dim.to_string()),
        ("neighborhood k", d.neighborhood_k.to_string(), p.neighborhood_k.to_string()),
        ("lambda-a", d.lambda_a.to_string(), p.lambda_a.to_string()),
        ("lambda-t", d.lambda_t.to_string(), p.lambda_t.to_string()),
        ("lr", format!("{:e}", d.lr), format!("{:e}", p.lr)),
        ("weight-decay", format!("{:e}", d.weight_decay), format!("{:e}", p.weight_decay)),
        ("epochs", d.epochs.to_string(), p.epochs.to_string()),
        ("batch-size", d.batch_size.to_string(), p.batch_size.to_string()),
        ("r", d.r.to_string(), p.r.to_string()),
        ("k", d.k.to_string(), p.k.to_string()),
        ("tau init", format!("{:.4}", d.tau_init), format!("{:.4}", p.tau_init)),
    ];
    let mut out = String::from("Preset defaults:\n");
    out.push_str(&format!("  {:<16} {:>12} {:>12}\n", "", "desk", "paper"));
    for (name, a, b) in rows {
        out.push_str(&format!("  {name:<16} {a:>12} {b:>12}\n"));
    }
    out
}

fn points_default(preset: Preset) -> usize {
    match preset {
        Preset::Desk => 256,
        Preset::Paper => 2048,
    }
}

fn resolve(common: &Common, opts: &TrainArgs) -> TrainConfig {
    let mut c = TrainConfig::preset(common.preset.into());
    c.seed = common.seed;
    apply_model(&mut c, &opts.model);
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = opts.$f { c.$f = v; } )* };
    }
    set!(lambda_a, lambda_t, lr, weight_decay, epochs, batch_size, r, k);
    if let Some(g) = opts.geo_norm {
        c.geo_norm = match g {
            GeoNormArg::Mse => GeoNorm::Mse,
            GeoNormArg::L2 => GeoNorm::L2,
        };
    }
    if let Some(t) = opts.distill_target {
        c.distill_target = match t {
            TargetArg::Omega => DistillTarget::Omega,
            TargetArg::Weights => DistillTarget::Weights,
        };
    }
    c
}

fn apply_model(c: &mut TrainConfig, m: &ModelArgs) {
    if let Some(a) = m.activation {
        c.activation = match a {
            ActivationArg::Sigmoid => Activation::Sigmoid,
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Identity => Activation::Identity,
        };
    }
    if let Some(t) = m.that_mode {
        c.that_mode = match t {
            ThatModeArg::Literal => ThatMode::Literal,
            ThatModeArg::WeightedMean => ThatMode::WeightedMean,
            ThatModeArg::Direct => ThatMode::Direct,
        };
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let bytes = to_json_bytes(v)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn load_teacher(path: &Path) -> Result<Teacher> {
    let (params, config) = load_checkpoint(path)?;
    Ok(Teacher { params, config })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => {
            let preset: Preset = a.common.preset.into();
            let families = a.families.iter().map(|f| ShapeFamily::parse(f)).collect::<Result<Vec<_>>>()?;
            let spec = DatasetSpec {
                families,
                num_clouds: a.num_clouds,
                points: a.points.unwrap_or(points_default(preset)),
                partial_view: a.partial_view,
                seed: a.common.seed,
            };
            let ds = gen_dataset(&spec)?;
            write_dataset(&ds, &a.out)?;
            eprintln!("wrote {} clouds of {} points to {}", ds.len(), spec.points, a.out.display());
            print_json(&json!({ "out": a.out, "spec": spec, "labels": ds.labels(), "label_counts": ds.label_counts() }))
        }
        Command::GenTextbank(a) => {
            let preset: Preset = a.common.preset.into();
            let labels = match (&a.labels, &a.data) {
                (Some(l), _) => l.clone(),
                (None, Some(dir)) => read_dataset(dir)?.labels().to_vec(),
                (None, None) => DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
            };
            let dim = a.dim.unwrap_or(TrainConfig::preset(preset).embed_dim);
            let groups: Vec<Vec<String>> =
                a.groups.iter().map(|g| g.split(',').map(|s| s.trim().to_string()).collect()).collect();
            let bank = gen_textbank(&labels, dim, a.common.seed, &groups)?;
            write_textbank(&bank, &a.out)?;
            eprintln!("wrote {} labels at D = {dim} to {}", bank.len(), a.out.display());
            print_json(&json!({ "out": a.out, "labels": bank.labels(), "dim": dim, "groups": groups, "seed": a.common.seed }))
        }
        Command::GenTeacher(a) => {
            let mut cfg = TrainConfig::preset(a.common.preset.into());
            apply_model(&mut cfg, &a.model);
            let (params, model) = gen_teacher(&cfg.encoder_config(), cfg.head_dim, cfg.head_config(), a.common.seed)?;
            save_checkpoint(&params, &model, &a.out)?;
            eprintln!("wrote teacher with {} parameters to {}", params.num_values(), a.out.display());
            print_json(&json!({ "out": a.out, "config": model, "seed": a.common.seed }))
        }
        Command::Train(a) => {
            let cfg = resolve(&a.common, &a.opts);
            let ds = read_dataset(&a.data)?;
            let bank = read_textbank(&a.textbank)?;
            let teacher = load_teacher(&a.teacher)?;
            let out = train(&ds, &bank, &teacher, &cfg)?;
            let ckpt = a.out.join("student.ckpt");
            save_checkpoint(&out.params, &out.model, &ckpt)?;
            write_file(&a.out.join("train_report.jsonl"), out.report.to_json_lines()?.as_bytes())?;
            eprintln!("{:>6}  {:>10}  {:>10}  {:>10}  {:>10}  {:>7}  {:>7}", "epoch", "L_total", "L_pw", "L_att", "L_geo", "acc", "tau");
            for e in &out.report.epochs {
                eprintln!(
                    "{:>6}  {:>10.4}  {:>10.4}  {:>10.6}  {:>10.6}  {:>6.2}%  {:>7.4}",
                    e.epoch,
                    e.l_total,
                    e.l_point_wise,
                    e.l_att_transfer,
                    e.l_geo_transfer,
                    100.0 * e.train_accuracy,
                    e.tau
                );
            }
            print_json(&json!({
                "checkpoint": ckpt,
                "config": cfg,
                "steps": out.report.steps,
                "initial": out.report.initial,
                "final": out.report.last,
            }))
        }
        Command::Eval(a) => {
            let ds = read_dataset(&a.data)?;
            let bank = read_textbank(&a.textbank)?;
            let (params, model) = load_checkpoint(&a.ckpt)?;
            let report = evaluate(&ds, &bank, &params, &model)?;
            eprint!("{}", report.table());
            let value = serde_json::to_value(&report).map_err(|e| Error::Data(e.to_string()))?;
            if let Some(dir) = &a.out {
                write_file(&dir.join("eval.json"), &to_json_bytes(&value)?)?;
            }
            print_json(&value)
        }
        Command::Predict(a) => {
            let ds = read_dataset(&a.data)?;
            let full = read_textbank(&a.textbank)?;
            let bank: TextBank = match &a.labels {
                Some(l) => full.select(&l.iter().map(String::as_str).collect::<Vec<_>>())?,
                None => full,
            };
            let (params, model) = load_checkpoint(&a.ckpt)?;
            let indices: Vec<usize> = match a.cloud {
                Some(i) if i >= ds.len() => {
                    return Err(Error::Data(format!("cloud {i} out of range for {} clouds", ds.len())))
                }
                Some(i) => vec![i],
                None => (0..ds.len()).collect(),
            };
            let mut clouds = Vec::new();
            for i in indices {
                let pred = predict_cloud(&ds.clouds[i], &bank, &params, &model)?;
                let names: Vec<&str> = pred.iter().map(|&p| bank.labels()[p].as_str()).collect();
                clouds.push(json!({ "cloud": i, "labels": names }));
            }
            let value = json!({ "label_set": bank.labels(), "clouds": clouds });
            if let Some(dir) = &a.out {
                write_file(&dir.join("predictions.json"), &to_json_bytes(&value)?)?;
            }
            print_json(&value)
        }
        Command::Gradcheck(a) => {
            let base = resolve(&a.common, &a.opts);
            let cfg = TrainConfig {
                embed_dim: 8,
                hidden_widths: vec![8, 8],
                neighborhood_k: 4,
                head_dim: 8,
                k: 4,
                ..base
            };
            let ds = gen_dataset(&DatasetSpec {
                families: vec![ShapeFamily::Mug, ShapeFamily::Bottle],
                num_clouds: 1,
                points: 32,
                partial_view: false,
                seed: a.common.seed,
            })?;
            let bank = gen_textbank(ds.labels(), cfg.embed_dim, mix_seed(a.common.seed, 1), &[])?;
            let (tp, tc) = gen_teacher(&cfg.encoder_config(), cfg.head_dim, cfg.head_config(), mix_seed(a.common.seed, 2))?;
            let ctx = CloudContext::new(&ds.clouds[0], &Teacher { params: tp, config: tc }, &cfg)?;
            let omega = ClassWeights::from_counts(&ds.label_counts());
            let params = init_student(&cfg)?;
            let checks = gradient_suite(&ctx, &params, &bank, &omega, &cfg, a.h, a.tol)?;
            let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            let passed = checks.iter().all(|c| c.passed);
            for c in &checks {
                eprintln!("{:<14} {:.3e}  ({} at {})", format!("{:?}", c.term), c.max_rel_error, c.worst_param, c.worst_index);
            }
            eprintln!("{} max relative error {worst:.3e} (tol {:e})", if passed { "PASS" } else { "FAIL" }, a.tol);
            print_json(&json!({
                "max_rel_error": worst,
                "tol": a.tol,
                "h": a.h,
                "passed": passed,
                "n": 32,
                "labels": ds.labels(),
                "config": cfg,
                "terms": checks,
            }))?;
            if passed {
                Ok(())
            } else {
                Err(Error::Data(format!("gradient check failed: max relative error {worst:.3e}")))
            }
        }
        Command::DumpEmbeddings(a) => {
            let ds = read_dataset(&a.data)?;
            let (params, model) = load_checkpoint(&a.ckpt)?;
            let mut emb_bytes = Vec::new();
            let mut label_bytes = Vec::new();
            let mut sizes = Vec::new();
            for cloud in &ds.clouds {
                let e = embed(cloud, &params, &model)?;
                push_f32_le(&mut emb_bytes, e.data());
                push_u16_le(&mut label_bytes, cloud.require_labels()?)?;
                sizes.push(cloud.len());
            }
            write_file(&a.out.join("embeddings.bin"), &emb_bytes)?;
            write_file(&a.out.join("labels.bin"), &label_bytes)?;
            let meta = json!({
                "dim": model.encoder.embed_dim,
                "rows": sizes.iter().sum::<usize>(),
                "cloud_sizes": sizes,
                "labels": ds.labels(),
                "embeddings": "embeddings.bin",
                "point_labels": "labels.bin",
            });
            write_file(&a.out.join("embeddings.json"), &to_json_bytes(&meta)?)?;
            eprintln!("wrote embeddings for {} clouds to {}", ds.len(), a.out.display());
            print_json(&meta)
        }
        Command::Ablate(a) => {
            let cfg = resolve(&a.common, &a.opts);
            let ds = read_dataset(&a.data)?;
            let eval = match &a.eval_data {
                Some(dir) => read_dataset(dir)?,
                None => ds.clone(),
            };
            let bank = read_textbank(&a.textbank)?;
            let teacher = load_teacher(&a.teacher)?;
            let rows = ablation(&ds, &eval, &bank, &teacher, &cfg)?;
            eprint!("{}", ablation_table(&rows));
            let value = json!({ "rows": rows, "config": cfg });
            if let Some(dir) = &a.out {
                write_file(&dir.join("ablation.json"), &to_json_bytes(&value)?)?;
            }
            print_json(&value)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let table = preset_table();
    let mut cmd = Cli::command().after_help(table.clone());
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for n in names {
        let t = table.clone();
        cmd = cmd.mut_subcommand(n, |s| s.after_help(t));
    }
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
