//! Sinusoidal positional encoding of 3D points.

/// Frequencies per axis.
pub const PE_FREQS: usize = 32;
/// Output width: sin and cos per frequency per axis.
pub const PE_DIM: usize = 3 * 2 * PE_FREQS;

/// Longest encoded period in meters; period k is `BASE_PERIOD / 2^(k/4)`.
const BASE_PERIOD: f64 = 128.0;

/// `[sin(ω_k x), cos(ω_k x)]_k` for x, y then z, with geometrically spaced
/// frequencies covering periods from 128 m down to roughly half a meter.
pub fn positional_encoding(p: [f64; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(PE_DIM);
    for &v in &p {
        for k in 0..PE_FREQS {
            let w = 2.0 * std::f64::consts::PI / BASE_PERIOD * 2f64.powf(k as f64 / 4.0);
            let (s, c) = (w * v).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_and_origin() {
        let e = positional_encoding([0.0, 0.0, 0.0]);
        assert_eq!(e.len(), PE_DIM);
        assert!(e.chunks(2).all(|c| c[0] == 0.0 && c[1] == 1.0));
    }

    #[test]
    fn distinguishes_points() {
        let a = positional_encoding([10.0, -3.0, 1.0]);
        let b = positional_encoding([10.5, -3.0, 1.0]);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
    }
}
