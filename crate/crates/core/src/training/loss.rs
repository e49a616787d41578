/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy on a logit. Returns `(loss, ∂loss/∂logit)`.
pub fn bce_loss(logit: f64, label: u8) -> (f64, f64) {
    let y = f64::from(label);
    // -y·log σ(z) - (1-y)·log(1-σ(z)) = softplus(z) - y·z
    (softplus(logit) - y * logit, logistic(logit) - y)
}
