use miiad_wasm_demo::{auroc_from_text, group_attention_weights, make_sample, parse_defect, render};

#[test]
fn rendered_images_have_rgba_layout() {
    let s = make_sample("dome", 16, 3, "bump").unwrap();
    let v = render(&s);
    assert_eq!(v.size(), 16);
    for img in [v.rgb(), v.depth(), v.mask()] {
        assert_eq!(img.len(), 16 * 16 * 4);
        assert!(img.chunks(4).all(|p| p[3] == 255));
    }
    assert!(v.defect_pixels() > 0);
    assert_eq!(render(&make_sample("slab", 16, 3, "none").unwrap()).defect_pixels(), 0);
}

#[test]
fn bad_inputs_are_reported() {
    assert!(parse_defect("crack").is_err());
    assert!(make_sample("teapot", 16, 0, "none").is_err());
    assert!(group_attention_weights(true, false, 0, 1).is_err());
    assert!(auroc_from_text("0.1, 0.2", "1").is_err());
    assert!(auroc_from_text("0.1 0.2", "1 2").is_err());
}

#[test]
fn attention_stays_within_groups() {
    let t = 4;
    let a = group_attention_weights(false, true, t, 9).unwrap();
    let l = 2 * t;
    for i in 0..l {
        let row = &a[i * l..(i + 1) * l];
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (j, w) in row.iter().enumerate() {
            if (i < t) != (j < t) {
                assert_eq!(*w, 0.0);
            }
        }
    }
    // Complete samples form a single group.
    let full = group_attention_weights(true, true, t, 9).unwrap();
    assert!(full.iter().all(|w| *w > 0.0));
}

#[test]
fn auroc_text_matches_hand_count() {
    // Positives 0.9, 0.4; negatives 0.5, 0.1: 3 of 4 pairs ordered.
    let v = auroc_from_text("0.9 0.5 0.4 0.1", "1,0,1,0").unwrap();
    assert!((v - 0.75).abs() < 1e-12);
}
