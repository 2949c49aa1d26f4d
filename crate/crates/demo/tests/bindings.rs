use affordkd_demo::{fps_anchors, label_names, label_softmax, sample_shape};

#[test]
fn shape_buffer_layout() {
    let b = sample_shape("mug", 50, 3).unwrap();
    assert_eq!(b.len(), 200);
    let m = label_names().split(',').count() as f32;
    assert!(b.chunks(4).all(|c| c[3] >= 0.0 && c[3] < m && c[3].fract() == 0.0));
}

#[test]
fn anchors_are_distinct_and_in_range() {
    let b = sample_shape("table", 80, 1).unwrap();
    let a = fps_anchors(&b, 4, 0.25).unwrap();
    assert_eq!(a.len(), 20);
    let mut s = a.clone();
    s.sort();
    s.dedup();
    assert_eq!(s.len(), a.len());
    assert!(a.iter().all(|&i| i < 80));
}

#[test]
fn softmax_sums_to_one_and_sharpens() {
    let s = [0.1, 0.5, -0.2];
    let soft = label_softmax(&s, 1.0).unwrap();
    let sharp = label_softmax(&s, 50.0).unwrap();
    assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(sharp[1] > soft[1] && sharp[1] > 0.99);
}
