//! Small numeric helpers shared across modules.

/// Pairwise summation with a fixed split order, so the result does not depend
/// on how the caller produced the slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Least-squares slope of `log(err)` against `log(h)`.
pub fn convergence_order(spacings: &[f64], errors: &[f64]) -> f64 {
    assert_eq!(spacings.len(), errors.len());
    let n = spacings.len() as f64;
    let xs: Vec<f64> = spacings.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Format a float with 17 significant digits (round-trips through parsing).
pub fn fmt17(x: f64) -> String {
    format!("{:.16e}", x)
}
