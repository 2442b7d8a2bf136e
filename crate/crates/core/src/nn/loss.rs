//! Scalar losses. The graph operations in [`super::graph`] call these so the
//! recorded forward values and the standalone functions agree exactly.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary focal loss `−y(1−p)^γ ln p − (1−y) p^γ ln(1−p)`.
///
/// At `γ = 0` this is binary cross-entropy.
pub fn focal_loss(p: f64, y: f64, gamma: f64) -> f64 {
    let p = clamp(p);
    let pos = if y != 0.0 {
        -y * (1.0 - p).powf(gamma) * p.ln()
    } else {
        0.0
    };
    let neg = if y != 1.0 {
        -(1.0 - y) * p.powf(gamma) * (1.0 - p).ln()
    } else {
        0.0
    };
    pos + neg
}

/// ∂focal_loss/∂p; zero where the clamp is active.
pub fn focal_loss_grad(p: f64, y: f64, gamma: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    let mut d = 0.0;
    if y != 0.0 {
        let q = 1.0 - p;
        let decay = if gamma == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * p.ln()
        };
        d += y * (decay - q.powf(gamma) / p);
    }
    if y != 1.0 {
        let grow = if gamma == 0.0 {
            0.0
        } else {
            gamma * p.powf(gamma - 1.0) * (1.0 - p).ln()
        };
        d += (1.0 - y) * (p.powf(gamma) / (1.0 - p) - grow);
    }
    d
}

pub fn binary_cross_entropy(p: f64, y: f64) -> f64 {
    let p = clamp(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `−ln p[y]` with the same clamp as the focal loss.
pub fn cross_entropy(p: &[f64], y: usize) -> Result<f64> {
    let py = p.get(y).ok_or_else(|| {
        Error::Invalid(format!("class {y} outside a {}-way distribution", p.len()))
    })?;
    Ok(-clamp(*py).ln())
}
