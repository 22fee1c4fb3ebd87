use crate::error::{Error, Result};

/// Sinusoidal embedding of a flow time `t ∈ [0, 1]`.
///
/// Uses the transformer position convention with position `1000·t`:
/// `e[2i] = sin(p·fᵢ)`, `e[2i+1] = cos(p·fᵢ)`, `fᵢ = 10000^(-2i/dim)`.
pub fn sinusoidal_time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    if dim % 2 != 0 {
        return Err(Error::invalid(format!("time embedding dim must be even, got {dim}")));
    }
    let pos = 1000.0 * t;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        out.push((pos * freq).sin());
        out.push((pos * freq).cos());
    }
    Ok(out)
}
