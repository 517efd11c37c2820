//! Scalar special functions and adaptive quadrature.
//!
//! Everything here is deterministic and pure; the rest of the crate builds
//! its probability computations on these primitives.

use crate::error::Error;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_74;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the complementary error function.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / SQRT_2)
}

/// log Φ(z), stable over the whole real line.
///
/// Uses `erfc` directly down to z = -20 and the asymptotic tail expansion
/// `Φ(z) ≈ φ(z)/|z| (1 - 1/z² + 3/z⁴ - 15/z⁶ + 105/z⁸)` below that, where
/// `erfc` itself would underflow long before the expansion loses accuracy.
pub fn log_norm_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z >= 6.0 {
        // ln(1 - Q) with Q = upper tail mass.
        let q = 0.5 * statrs::function::erf::erfc(z / SQRT_2);
        return (-q).ln_1p();
    }
    if z >= -20.0 {
        return (0.5 * statrs::function::erf::erfc(-z / SQRT_2)).ln();
    }
    let z2 = z * z;
    let correction = (-1.0 / z2 * (1.0 - 3.0 / z2 * (1.0 - 5.0 / z2 * (1.0 - 7.0 / z2)))).ln_1p();
    -0.5 * z2 - LN_SQRT_2PI - (-z).ln() + correction
}

/// Inverse standard normal CDF (Wichura's PPND16 rational approximation,
/// accurate to roughly double precision over the full open unit interval).
pub fn norm_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * horner(&PPND_A, r) / horner(&PPND_B, r);
    }
    let lesser = p.min(1.0 - p);
    let x = tail_quantile_from_log(lesser.ln());
    if q < 0.0 {
        x
    } else {
        -x
    }
}

/// Inverse standard normal CDF given log-probability.
///
/// Evaluates `Φ⁻¹(exp(log_p))` without forming `exp(log_p)` in the deep tail
/// and without losing the `1 - p` digits near zero log-probability, which is
/// what order-statistic sampling feeds in.
pub fn norm_quantile_from_log(log_p: f64) -> f64 {
    if log_p.is_nan() || log_p > 0.0 {
        return f64::NAN;
    }
    if log_p == 0.0 {
        return f64::INFINITY;
    }
    if log_p == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    const LN_HALF: f64 = -std::f64::consts::LN_2;
    if log_p > LN_HALF {
        // p > 1/2: reflect using the accurately computed upper tail 1 - p.
        let upper = -f64::exp_m1(log_p);
        return -norm_quantile(upper);
    }
    let p = log_p.exp();
    if p >= 0.075 {
        return norm_quantile(p);
    }
    tail_quantile_from_log(log_p)
}

/// Lower-tail branch of PPND16 parameterized by ln(p), p ≤ 0.075.
fn tail_quantile_from_log(log_p: f64) -> f64 {
    let r = (-log_p).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        horner(&PPND_C, r) / horner(&PPND_D, r)
    } else {
        let r = r - 5.0;
        horner(&PPND_E, r) / horner(&PPND_F, r)
    };
    -x
}

fn horner(coeffs: &[f64; 8], r: f64) -> f64 {
    let mut acc = coeffs[7];
    for c in coeffs[..7].iter().rev() {
        acc = acc * r + c;
    }
    acc
}

const PPND_A: [f64; 8] = [
    3.387_132_872_796_366_6,
    133.141_667_891_784_38,
    1_971.590_950_306_551_3,
    13_731.693_765_509_461,
    45_921.953_931_549_87,
    67_265.770_927_008_71,
    33_430.575_583_588_13,
    2_509.080_928_730_122_7,
];
const PPND_B: [f64; 8] = [
    1.0,
    42.313_330_701_600_91,
    687.187_007_492_057_9,
    5_394.196_021_424_751,
    21_213.794_301_586_597,
    39_307.895_800_092_71,
    28_729.085_735_721_942,
    5_226.495_278_852_545_5,
];
const PPND_C: [f64; 8] = [
    1.423_437_110_749_683_6,
    4.630_337_846_156_545,
    5.769_497_221_460_691,
    3.647_848_324_763_204_6,
    1.270_458_252_452_368_4,
    0.241_780_725_177_450_6,
    0.022_723_844_989_269_184,
    0.000_774_545_014_278_341_4,
];
const PPND_D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_8,
    1.676_384_830_183_803_8,
    0.689_767_334_985_1,
    0.148_103_976_427_480_07,
    0.015_198_666_563_616_457,
    0.000_547_593_808_499_534_5,
    1.050_750_071_644_416_9e-9,
];
const PPND_E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    0.296_560_571_828_504_9,
    0.026_532_189_526_576_124,
    0.001_242_660_947_388_078_4,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const PPND_F: [f64; 8] = [
    1.0,
    0.599_832_206_555_887_9,
    0.136_929_880_922_735_8,
    0.014_875_361_290_850_615,
    0.000_786_869_131_145_613_3,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];

/// ln(a! ) via the log-gamma function.
pub fn ln_factorial(n: usize) -> f64 {
    statrs::function::gamma::ln_gamma(n as f64 + 1.0)
}

/// Numerically stable log(Σ exp(x_i)). Empty input yields -inf.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    let sum: f64 = xs.iter().map(|x| (x - mx).exp()).sum();
    mx + sum.ln()
}

/// log(exp(a) + exp(b)).
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Result of an adaptive quadrature run.
#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub error_estimate: f64,
    pub segments: usize,
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

/// Globally adaptive Gauss–Kronrod (G7/K15) integration of `f` on `[a, b]`.
///
/// Splits the segment with the largest error estimate until the summed
/// estimate meets `max(abs_tol, rel_tol * |integral|)` or the segment budget
/// runs out, in which case the achieved estimate is reported in the error.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_segments: usize,
) -> Result<QuadResult, Error> {
    if !(a.is_finite() && b.is_finite()) || a >= b {
        return Err(Error::arg(format!("bad integration interval [{a}, {b}]")));
    }
    // Seed with a uniform split so narrow interior features are visible to
    // the refinement loop from the start.
    let seed_splits = 8.min(max_segments.max(1));
    let mut segments: Vec<Segment> = (0..seed_splits)
        .map(|i| {
            let lo = a + (b - a) * i as f64 / seed_splits as f64;
            let hi = a + (b - a) * (i + 1) as f64 / seed_splits as f64;
            gk15(&f, lo, hi)
        })
        .collect();

    loop {
        let total: f64 = segments.iter().map(|s| s.value).sum();
        let err: f64 = segments.iter().map(|s| s.error).sum();
        let tol = abs_tol.max(rel_tol * total.abs());
        if err <= tol {
            return Ok(QuadResult {
                value: total,
                error_estimate: err,
                segments: segments.len(),
            });
        }
        if segments.len() >= max_segments {
            return Err(Error::QuadratureNonConvergence {
                error_estimate: err,
                tolerance: tol,
                segments: segments.len(),
            });
        }
        let worst = segments
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .map(|(i, _)| i)
            .expect("non-empty segment list");
        let seg = segments.swap_remove(worst);
        let mid = 0.5 * (seg.a + seg.b);
        segments.push(gk15(&f, seg.a, mid));
        segments.push(gk15(&f, mid, seg.b));
    }
}

// 15-point Kronrod nodes/weights and the embedded 7-point Gauss weights.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_225,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_94,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let half = 0.5 * (b - a);
    let center = 0.5 * (a + b);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let x = half * XGK[j];
        let fsum = f(center - x) + f(center + x);
        kronrod += WGK[j] * fsum;
        if j % 2 == 1 {
            gauss += WG[j / 2] * fsum;
        }
    }
    let value = kronrod * half;
    let error = ((kronrod - gauss) * half).abs();
    Segment {
        a,
        b,
        value,
        error,
    }
}
