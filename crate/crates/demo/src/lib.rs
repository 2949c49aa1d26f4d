//! Browser bindings. Every export takes and returns plain numbers, strings
//! and typed arrays so the page needs no glue beyond the generated module.

use affordkd::datagen::{gen_shape, ShapeFamily, ShapeSpec, DEFAULT_LABELS};
use affordkd::ndcore::{softmax_rows, Matrix};
use affordkd::pointcloud::{fps, PointCloud};
use wasm_bindgen::prelude::*;

fn js_err(e: affordkd::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Comma-separated label names, indexed by the label ids in `sample_shape`.
#[wasm_bindgen]
pub fn label_names() -> String {
    DEFAULT_LABELS.join(",")
}

/// Synthetic labeled cloud as `[x, y, z, label, x, y, z, label, ...]`.
#[wasm_bindgen]
pub fn sample_shape(family: &str, n: usize, seed: u32) -> Result<Vec<f32>, JsError> {
    let family = ShapeFamily::parse(family).map_err(js_err)?;
    let labels: Vec<String> = DEFAULT_LABELS.iter().map(|s| s.to_string()).collect();
    let cloud = gen_shape(&ShapeSpec::new(family, n), &labels, u64::from(seed)).map_err(js_err)?;
    let ids = cloud.require_labels().map_err(js_err)?;
    let mut out = Vec::with_capacity(4 * cloud.len());
    for (i, &l) in ids.iter().enumerate() {
        let p = cloud.point(i);
        out.extend([p[0] as f32, p[1] as f32, p[2] as f32, l as f32]);
    }
    Ok(out)
}

/// Farthest-point anchor indices for an `[x, y, z, ...]` buffer; a stride
/// of 4 accepts the output of `sample_shape` directly.
#[wasm_bindgen]
pub fn fps_anchors(coords: &[f32], stride: usize, r: f64) -> Result<Vec<u32>, JsError> {
    if stride < 3 || !coords.len().is_multiple_of(stride) {
        return Err(JsError::new("coordinate buffer length must be a multiple of a stride >= 3"));
    }
    let points: Vec<[f64; 3]> = coords
        .chunks_exact(stride)
        .map(|c| [f64::from(c[0]), f64::from(c[1]), f64::from(c[2])])
        .collect();
    let cloud = PointCloud::from_points(&points, None).map_err(js_err)?;
    Ok(fps(&cloud, r).map_err(js_err)?.into_iter().map(|i| i as u32).collect())
}

/// Softmax over label scores scaled by the temperature `tau`.
#[wasm_bindgen]
pub fn label_softmax(scores: &[f64], tau: f64) -> Result<Vec<f64>, JsError> {
    if scores.is_empty() {
        return Err(JsError::new("no scores"));
    }
    let logits = Matrix::new(1, scores.len(), scores.iter().map(|s| tau * s).collect()).map_err(js_err)?;
    Ok(softmax_rows(&logits).row(0).to_vec())
}
