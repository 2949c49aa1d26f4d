#![allow(dead_code)]

use affordkd::datagen::{gen_dataset, gen_teacher, gen_textbank, Dataset, DatasetSpec, ShapeFamily};
use affordkd::textcorr::TextBank;
use affordkd::trainer::{Preset, Teacher, TrainConfig};

/// Each training label paired with an unseen synonym.
pub const SYNONYMS: [(&str, &str); 4] = [
    ("grasp", "hold"),
    ("pour", "decant"),
    ("contain", "enclose"),
    ("wrap-grasp", "clasp"),
];

pub struct Fixture {
    pub dataset: Dataset,
    pub bank: TextBank,
    pub synonym_bank: TextBank,
    pub teacher: Teacher,
    pub config: TrainConfig,
}

pub fn dataset(families: &[ShapeFamily], num_clouds: usize, points: usize, seed: u64) -> Dataset {
    gen_dataset(&DatasetSpec {
        families: families.to_vec(),
        num_clouds,
        points,
        partial_view: false,
        seed,
    })
    .unwrap()
}

/// Training and synonym banks drawn from the same synonym groups.
pub fn banks(labels: &[String], dim: usize, seed: u64) -> (TextBank, TextBank) {
    let synonyms: Vec<String> = labels
        .iter()
        .map(|l| SYNONYMS.iter().find(|(a, _)| a == l).expect("label has a synonym").1.to_string())
        .collect();
    let groups: Vec<Vec<String>> = labels.iter().cloned().zip(synonyms.iter().cloned()).map(|(a, b)| vec![a, b]).collect();
    let all: Vec<String> = labels.iter().chain(&synonyms).cloned().collect();
    let full = gen_textbank(&all, dim, seed, &groups).unwrap();
    let originals: Vec<&str> = labels.iter().map(String::as_str).collect();
    let syn: Vec<&str> = synonyms.iter().map(String::as_str).collect();
    (full.select(&originals).unwrap(), full.select(&syn).unwrap())
}

pub fn teacher(config: &TrainConfig, seed: u64) -> Teacher {
    let (params, config) = gen_teacher(&config.encoder_config(), config.head_dim, config.head_config(), seed).unwrap();
    Teacher { params, config }
}

/// 16 clouds, 4 labels, n = 256, D = 32, desk preset (300 Adam steps).
pub fn overfit() -> Fixture {
    let config = TrainConfig::preset(Preset::Desk);
    let dataset = dataset(&[ShapeFamily::Mug, ShapeFamily::Bottle], 16, 256, 0);
    let (bank, synonym_bank) = banks(dataset.labels(), config.embed_dim, 1);
    let teacher = teacher(&config, 2);
    Fixture { dataset, bank, synonym_bank, teacher, config }
}

/// Small shapes for gradient checks: n = 32, D = 8, d_h = 8, m = 4.
pub fn small() -> Fixture {
    let config = TrainConfig {
        embed_dim: 8,
        hidden_widths: vec![8, 8],
        neighborhood_k: 4,
        head_dim: 8,
        k: 4,
        r: 0.25,
        ..TrainConfig::preset(Preset::Desk)
    };
    let dataset = dataset(&[ShapeFamily::Mug, ShapeFamily::Bottle], 2, 32, 11);
    let (bank, synonym_bank) = banks(dataset.labels(), config.embed_dim, 12);
    let teacher = teacher(&config, 13);
    Fixture { dataset, bank, synonym_bank, teacher, config }
}
