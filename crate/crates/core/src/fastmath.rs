//! Branch-light exp/tanh for the hot elementwise paths.
//!
//! libm's exp/tanh dominate profiles of the forward pass (softmax rows, GELU
//! over every conv output). The core here is a division-free polynomial exp
//! with branchless clamping, so the softmax/GELU loops stay vectorizable,
//! and everything remains deterministic pure arithmetic.

/// Polynomial exp on a clamped domain.
///
/// Inputs are clamped to [-708, 709]; callers that need true IEEE behavior
/// for larger magnitudes use [`exp`]. Relative error < 4e-15 (degree-13
/// Taylor on |r| <= ln2/2 after power-of-two reduction).
#[inline]
pub fn exp_core(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const C1: f64 = 6.93145751953125e-1;
    const C2: f64 = 1.42860682030941723212e-6;
    let x = x.clamp(-708.0, 709.0);
    let n = (LOG2E * x + 0.5).floor();
    let r = x - n * C1 - n * C2;
    // exp(r) = sum r^i / i!, i = 0..=13, two Horner chains for ILP
    const INV: [f64; 14] = [
        1.0,
        1.0,
        0.5,
        1.6666666666666666e-1,
        4.1666666666666664e-2,
        8.333333333333333e-3,
        1.3888888888888889e-3,
        1.984126984126984e-4,
        2.48015873015873e-5,
        2.7557319223985893e-6,
        2.755731922398589e-7,
        2.505210838544172e-8,
        2.08767569878681e-9,
        1.6059043836821613e-10,
    ];
    let r2 = r * r;
    // even chain: c0 + c2 r^2 + c4 r^4 + ...
    let even = INV[0]
        + r2 * (INV[2] + r2 * (INV[4] + r2 * (INV[6] + r2 * (INV[8] + r2 * (INV[10] + r2 * INV[12])))));
    let odd = INV[1]
        + r2 * (INV[3] + r2 * (INV[5] + r2 * (INV[7] + r2 * (INV[9] + r2 * (INV[11] + r2 * INV[13])))));
    let e = even + r * odd;
    // scale by 2^n through the exponent bits; n is in [-1022, 1024) here
    let bits = e.to_bits();
    let exp_bits = (((bits >> 52) & 0x7ff) as i64 + n as i64) as u64;
    f64::from_bits((bits & !(0x7ff << 52)) | (exp_bits << 52))
}

/// exp with IEEE-style edge handling on top of the polynomial core.
#[inline]
pub fn exp(x: f64) -> f64 {
    if x > 709.0 {
        return f64::INFINITY;
    }
    if x < -708.0 {
        return if x.is_nan() { x } else { 0.0 };
    }
    exp_core(x)
}

/// tanh via the exp core: sign(x) * (1 - 2 / (exp(2|x|) + 1)).
///
/// For |x| below 1e-8 the direct form loses relative precision to
/// cancellation, so it falls back to x (exact there to 1e-16).
#[inline]
pub fn tanh(x: f64) -> f64 {
    let z = x.abs();
    if z < 1e-8 {
        return x;
    }
    let y = 1.0 - 2.0 / (exp_core(2.0 * z.min(20.0)) + 1.0);
    if x < 0.0 {
        -y
    } else {
        y
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let e = exp_core(-x.abs());
    let s = 1.0 / (1.0 + e);
    if x >= 0.0 {
        s
    } else {
        1.0 - s
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-form GELU, written as x * sigmoid(2u) so the whole map is a single
/// branch-free expression.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    x / (1.0 + exp_core(-2.0 * u))
}

#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = 1.0 - 2.0 / (exp_core(2.0 * u) + 1.0);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    #[test]
    fn exp_matches_libm() {
        let mut worst: f64 = 0.0;
        let mut x = -707.0;
        while x < 708.9 {
            let a = super::exp(x);
            let b = x.exp();
            let rel = if b == 0.0 { a.abs() } else { ((a - b) / b).abs() };
            worst = worst.max(rel);
            x += 0.37;
        }
        assert!(worst < 1e-14, "worst rel err {worst}");
        assert_eq!(super::exp(0.0), 1.0);
        assert_eq!(super::exp(f64::NEG_INFINITY), 0.0);
        assert_eq!(super::exp(-720.0), 0.0);
        assert_eq!(super::exp(f64::INFINITY), f64::INFINITY);
        assert_eq!(super::exp(800.0), f64::INFINITY);
        assert_eq!(super::exp(-800.0), 0.0);
    }

    #[test]
    fn tanh_matches_libm() {
        let mut worst: f64 = 0.0;
        let mut x = -25.0;
        while x < 25.0 {
            let a = super::tanh(x);
            let b = x.tanh();
            worst = worst.max((a - b).abs());
            x += 0.013;
        }
        assert!(worst < 1e-14, "worst abs err {worst}");
        assert_eq!(super::tanh(0.0), 0.0);
        assert!((super::tanh(1e-10) - 1e-10).abs() < 1e-24);
        assert_eq!(super::tanh(30.0), 1.0);
        assert_eq!(super::tanh(-30.0), -1.0);
    }

    #[test]
    fn sigmoid_bounds() {
        for x in [-40.0, -3.0, 0.0, 1e-9, 5.5, 40.0] {
            let s = super::sigmoid(x);
            assert!((0.0..=1.0).contains(&s));
            let libm = 1.0 / (1.0 + (-x as f64).exp());
            assert!((s - libm).abs() < 1e-14);
        }
    }

    #[test]
    fn gelu_consistent_with_reference_form() {
        for x in [-6.0, -1.3, -0.2, 0.0, 0.4, 2.7, 8.0] {
            let u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
            let want = 0.5 * x * (1.0 + (u as f64).tanh());
            assert!((super::gelu(x) - want).abs() < 1e-13, "x={x}");
        }
    }
}
