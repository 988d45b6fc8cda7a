//! Shared helpers for unit tests.

pub fn assert_close(got: f64, want: f64, tol: f64, what: &str) {
    let scale = 1.0_f64.max(want.abs());
    assert!(
        (got - want).abs() <= tol * scale,
        "{what}: got {got}, want {want} (tol {tol})"
    );
}

pub fn assert_slice_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert_close(*g, *w, tol, &format!("{what}[{i}]"));
    }
}
