use pinn_sim_web::{pattern_frame, pattern_set, run_simulation, transfer_for, SIDE};

#[test]
fn frame_counts_follow_modality() {
    assert_eq!(pattern_set("linear").unwrap().len(), 9);
    assert_eq!(pattern_set("nlsim").unwrap().len(), 25);
    assert_eq!(pattern_set("lpsim").unwrap().len(), 24);
    assert!(pattern_set("custom").is_err());
    assert!(pattern_set("bogus").unwrap_err().contains("linear"));
}

#[test]
fn pattern_image_and_rgba() {
    let img = pattern_frame("linear", 4).unwrap();
    assert_eq!((img.width(), img.height()), (SIDE, SIDE));
    let rgba = img.rgba();
    assert_eq!(rgba.len(), SIDE * SIDE * 4);
    assert!(rgba.chunks(4).all(|p| p[3] == 255));
    assert!(rgba.chunks(4).any(|p| p[0] == 255));
    assert!(pattern_frame("linear", 9).is_err());
}

#[test]
fn close_pair_is_blurred_in_widefield() {
    let close = run_simulation("linear", 0.55, 0.0, 3).unwrap();
    assert!(!close.widefield_resolved());
    assert_eq!(close.frames(), 9);
    assert_eq!(close.widefield().width(), SIDE / 2);
    let wide = run_simulation("linear", 2.0, 0.0, 3).unwrap();
    assert!(wide.widefield_resolved(), "dip {}", wide.widefield_dip());
    let fil = run_simulation("nlsim", 0.0, 20.0, 3).unwrap();
    assert!(fil.widefield_dip().is_nan());
    assert_eq!(fil.frames(), 25);
}

#[test]
fn otf_is_centred_and_band_limited() {
    let t = transfer_for(1.4, 525.0).unwrap();
    let img = t.image();
    let data = img.data();
    let c = SIDE / 2;
    assert!((data[c * SIDE + c] - 1.0).abs() < 1e-6);
    assert!((t.cutoff_px() - 2.0 * 1.4 / 525.0 * SIDE as f64 * 20.0).abs() < 1e-9);
    // a corner bin sits far outside the cutoff
    assert!(data[0] < 1e-6);
    assert!(transfer_for(-1.0, 525.0).is_err());
}
