//! Flat `f64` vector primitives.
//!
//! Every reduction here runs in fixed left-to-right order so that logs and
//! checkpoints are bitwise reproducible for a given seed. Callers must not
//! replace these with reassociating equivalents.

/// Dot product, accumulated left to right.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Euclidean norm.
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a + c * b` as a new vector.
pub fn add_scaled(a: &[f64], c: f64, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + c * y).collect()
}

/// `a += c * b` in place.
pub fn axpy(a: &mut [f64], c: f64, b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for i in 0..a.len() {
        a[i] += c * b[i];
    }
}

/// Elementwise difference `a - b`.
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Multiply every entry by `c`, in place.
pub fn scale(a: &mut [f64], c: f64) {
    for x in a.iter_mut() {
        *x *= c;
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}
