//! Branch-free `exp`, `expm1` and `ln` for f64, written as straight-line
//! arithmetic so loops over slices vectorize. Each is within a few ulp of the
//! std function on its stated domain.

const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const LOG2E: f64 = std::f64::consts::LOG2_E;
// 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

// Compiles `$generic` again with wider vector units enabled and picks the best
// at runtime. Rust never contracts a*b+c into an FMA, so every variant rounds
// identically.
macro_rules! dispatch {
    ($vis:vis fn $name:ident => $generic:ident ($($arg:ident: $ty:ty),*) $(-> $ret:ty)?) => {
        $vis fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f")]
                unsafe fn avx512($($arg: $ty),*) $(-> $ret)? {
                    $generic($($arg),*)
                }
                #[target_feature(enable = "avx2")]
                unsafe fn avx2($($arg: $ty),*) $(-> $ret)? {
                    $generic($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx512f") {
                    // SAFETY: the feature was detected on this CPU.
                    return unsafe { avx512($($arg),*) };
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected on this CPU.
                    return unsafe { avx2($($arg),*) };
                }
            }
            $generic($($arg),*)
        }
    };
}
pub(crate) use dispatch;

#[inline(always)]
fn select(cond: bool, a: f64, b: f64) -> f64 {
    if cond {
        a
    } else {
        b
    }
}

/// `e^x`. Results below the normal range flush to zero.
#[inline(always)]
pub(crate) fn exp(x: f64) -> f64 {
    let xc = x.clamp(-708.0, 709.0);
    let t = xc * LOG2E + ROUND_MAGIC;
    let n = t - ROUND_MAGIC;
    let ni = (t.to_bits() as i64).wrapping_sub(ROUND_MAGIC.to_bits() as i64);
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    // Taylor series to degree 13 on |r| <= ln2/2.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let scale = f64::from_bits((ni.wrapping_add(1023) as u64) << 52);
    let y = p * scale;
    select(x < -708.0, 0.0, select(x > 709.0, f64::INFINITY, y))
}

/// `e^x - 1`, accurate relative to the result for small `|x|`.
#[inline(always)]
pub(crate) fn expm1(x: f64) -> f64 {
    // Taylor series to degree 14 on |x| < 1/4.
    let mut p = 1.0 / 87_178_291_200.0;
    p = p * x + 1.0 / 6_227_020_800.0;
    p = p * x + 1.0 / 479_001_600.0;
    p = p * x + 1.0 / 39_916_800.0;
    p = p * x + 1.0 / 3_628_800.0;
    p = p * x + 1.0 / 362_880.0;
    p = p * x + 1.0 / 40_320.0;
    p = p * x + 1.0 / 5_040.0;
    p = p * x + 1.0 / 720.0;
    p = p * x + 1.0 / 120.0;
    p = p * x + 1.0 / 24.0;
    p = p * x + 1.0 / 6.0;
    p = p * x + 0.5;
    p = p * x + 1.0;
    let small = p * x;
    select(x.abs() < 0.25, small, exp(x) - 1.0)
}

/// Natural log for `0` (gives `-inf`) and positive normal numbers; negative
/// input gives NaN.
#[inline(always)]
pub(crate) fn ln(x: f64) -> f64 {
    let bits = x.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    let big = m > std::f64::consts::SQRT_2;
    let m = select(big, m * 0.5, m);
    let e = e + i64::from(big);
    let ef = f64::from_bits((ROUND_MAGIC.to_bits() as i64).wrapping_add(e) as u64) - ROUND_MAGIC;
    // ln(m) = 2 atanh(s), |s| <= 3 - 2 sqrt(2).
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    let mut p = 1.0 / 23.0;
    p = p * s2 + 1.0 / 21.0;
    p = p * s2 + 1.0 / 19.0;
    p = p * s2 + 1.0 / 17.0;
    p = p * s2 + 1.0 / 15.0;
    p = p * s2 + 1.0 / 13.0;
    p = p * s2 + 1.0 / 11.0;
    p = p * s2 + 1.0 / 9.0;
    p = p * s2 + 1.0 / 7.0;
    p = p * s2 + 1.0 / 5.0;
    p = p * s2 + 1.0 / 3.0;
    p = p * s2 + 1.0;
    let y = ef * LN2_HI + (2.0 * s * p + ef * LN2_LO);
    select(x > 0.0, select(x == f64::INFINITY, x, y), select(x == 0.0, f64::NEG_INFINITY, f64::NAN))
}
