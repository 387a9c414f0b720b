//! Moment-propagating softmax.
//!
//! Each logit `a_j ~ N(mu_j, s_j)` is exponentiated into a Log-Normal variable
//! `y_j` whose first two moments are known in closed form. The denominator
//! `sum_i y_i` is treated as a sum of independent variables, and each output
//! `t_j = y_j / sum_i y_i` is approximated by a Gaussian whose mean is the ratio
//! of means. Two variance formulas are provided, see [`RatioVariant`].
//!
//! All exponent arguments are shifted by their per-pixel maximum first. The
//! delta-method result does not depend on the shift; the as-printed one is
//! defined on the shifted quantities.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::head::LogitMoments;
use crate::fastmath::{self, dispatch};
use crate::Exec;

const PIXEL_CHUNK: usize = 1024;

/// Variance formula used for the ratio `y_j / sum_i y_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum RatioVariant {
    /// First-order Taylor expansion of the ratio:
    /// `(m_j / m_d)^2 * (v_j / m_j^2 + v_d / m_d^2)`.
    #[default]
    DeltaMethod,
    /// `(m_j / m_d)^2 * (v_j + v_d)`, evaluated on max-shifted moments.
    AsPrinted,
}

impl RatioVariant {
    pub fn name(self) -> &'static str {
        match self {
            RatioVariant::DeltaMethod => "delta",
            RatioVariant::AsPrinted => "printed",
        }
    }
}

impl fmt::Display for RatioVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RatioVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(RatioVariant::DeltaMethod),
            "printed" => Ok(RatioVariant::AsPrinted),
            other => Err(Error::Config(format!(
                "unknown ratio variant `{other}` (expected `delta` or `printed`)"
            ))),
        }
    }
}

/// Mean and variance of `exp(g)` for `g ~ N(mu, var)`.
///
/// The variance is assembled in the log domain as
/// `exp(ln(expm1(var)) + 2 mu + var)` so large `mu` does not overflow the
/// intermediate `exp(2 mu + var)` on its own.
pub fn lognormal_moments(mu: f64, var: f64) -> Result<(f64, f64)> {
    if var.is_nan() || var < 0.0 || !mu.is_finite() || !var.is_finite() {
        return Err(Error::Domain(format!(
            "log-normal moments need finite mu and var >= 0, got ({mu}, {var})"
        )));
    }
    let mean = (mu + 0.5 * var).exp();
    let variance = (var.exp_m1().ln() + 2.0 * mu + var).exp();
    Ok((mean, variance))
}

/// Gaussian moments of the softmax outputs (both H x W x K).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMoments {
    pub mean: Grid,
    pub var: Grid,
    pub variant: RatioVariant,
}

impl ProbMoments {
    pub fn zeros(height: usize, width: usize, classes: usize, variant: RatioVariant) -> Result<Self> {
        Ok(Self {
            mean: Grid::zeros(height, width, classes)?,
            var: Grid::zeros(height, width, classes)?,
            variant,
        })
    }

    pub fn classes(&self) -> usize {
        self.mean.channels()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !self.mean.same_shape(&self.var) {
            return Err(Error::Shape("probability mean and variance grids differ in shape".into()));
        }
        self.mean.check_finite("probability mean")?;
        self.var.check_finite("probability variance")?;
        if self.mean.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Domain("probability means must lie in [0, 1]".into()));
        }
        if self.var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("probability variances must be >= 0".into()));
        }
        Ok(())
    }
}

/// Moments for one pixel in f64. Returns `(mean, var)`, each of length K.
pub fn ep_softmax_pixel(mu: &[f64], var: &[f64], variant: RatioVariant) -> (Vec<f64>, Vec<f64>) {
    let k = mu.len();
    let shift = mu.iter().zip(var).fold(f64::NEG_INFINITY, |s, (&m, &v)| s.max(m + 0.5 * v));
    let ey: Vec<f64> = mu.iter().zip(var).map(|(&m, &v)| fastmath::exp(m + 0.5 * v - shift)).collect();
    let rel: Vec<f64> = var.iter().map(|&v| fastmath::expm1(v)).collect();
    let mut mean = vec![0.0; k];
    let mut out_var = vec![0.0; k];
    finish_pixel(&ey, &rel, variant, |j, m, v| {
        mean[j] = m;
        out_var[j] = v;
    });
    (mean, out_var)
}

/// `ey` holds `exp(mu + var/2 - shift)`, `rel` holds `expm1(var)`, which is
/// `Var[y] / E[y]^2` for a Log-Normal regardless of mu.
#[inline(always)]
fn finish_pixel(ey: &[f64], rel: &[f64], variant: RatioVariant, mut emit: impl FnMut(usize, f64, f64)) {
    let mut mean_d = 0.0;
    let mut var_d = 0.0;
    for (&m, &r) in ey.iter().zip(rel) {
        mean_d += m;
        var_d += r * m * m;
    }
    let inv_d = 1.0 / mean_d;
    let denom_rel = var_d * inv_d * inv_d;
    for (j, (&m, &r)) in ey.iter().zip(rel).enumerate() {
        let p = m * inv_d;
        let v = match variant {
            RatioVariant::DeltaMethod => p * p * (r + denom_rel),
            RatioVariant::AsPrinted => p * p * (r * m * m + var_d),
        };
        emit(j, p, v.max(0.0));
    }
}

dispatch!(fn chunk_kernel => chunk_kernel_generic(
    mu: &[f32], var: &[f32], k: usize, variant: RatioVariant, mean_out: &mut [f32], var_out: &mut [f32]
) -> bool);

// Works through blocks of PIXEL_CHUNK pixels so the exponentials run over
// long contiguous arrays.
#[inline(always)]
fn chunk_kernel_generic(
    mu: &[f32],
    var: &[f32],
    k: usize,
    variant: RatioVariant,
    mean_out: &mut [f32],
    var_out: &mut [f32],
) -> bool {
    let block = PIXEL_CHUNK * k;
    let mut ey = vec![0.0f64; block];
    let mut rel = vec![0.0f64; block];
    let mut finite = true;
    for (((m, v), mo), vo) in mu
        .chunks(block)
        .zip(var.chunks(block))
        .zip(mean_out.chunks_mut(block))
        .zip(var_out.chunks_mut(block))
    {
        let (ey, rel) = (&mut ey[..m.len()], &mut rel[..m.len()]);
        for ((e, &a), &b) in ey.iter_mut().zip(m).zip(v) {
            *e = f64::from(a) + 0.5 * f64::from(b);
        }
        for px in ey.chunks_exact_mut(k) {
            let shift = px.iter().fold(f64::NEG_INFINITY, |s, &x| s.max(x));
            px.iter_mut().for_each(|x| *x -= shift);
        }
        for e in ey.iter_mut() {
            *e = fastmath::exp(*e);
        }
        for (r, &b) in rel.iter_mut().zip(v) {
            *r = fastmath::expm1(f64::from(b));
        }
        for (((e, r), po), pv) in ey
            .chunks_exact(k)
            .zip(rel.chunks_exact(k))
            .zip(mo.chunks_exact_mut(k))
            .zip(vo.chunks_exact_mut(k))
        {
            finish_pixel(e, r, variant, |j, p, var| {
                po[j] = p as f32;
                pv[j] = var as f32;
            });
        }
        finite &= vo.iter().all(|x| x.is_finite());
    }
    finite
}

pub fn ep_softmax(logits: &LogitMoments, variant: RatioVariant) -> Result<ProbMoments> {
    ep_softmax_with(logits, variant, Exec::Serial)
}

pub fn ep_softmax_with(logits: &LogitMoments, variant: RatioVariant, exec: Exec) -> Result<ProbMoments> {
    let mut out = ProbMoments::zeros(logits.mean.height(), logits.mean.width(), logits.classes(), variant)?;
    ep_softmax_into(logits, variant, exec, &mut out)?;
    Ok(out)
}

/// Writes softmax moments into `out`, reusing its buffers when the shape fits.
pub fn ep_softmax_into(logits: &LogitMoments, variant: RatioVariant, exec: Exec, out: &mut ProbMoments) -> Result<()> {
    logits.validate()?;
    let (h, w, k) = (logits.mean.height(), logits.mean.width(), logits.classes());
    if !out.mean.same_shape(&logits.mean) || !out.var.same_shape(&logits.mean) {
        *out = ProbMoments::zeros(h, w, k, variant)?;
    }
    out.variant = variant;
    let (mu, var) = (logits.mean.data(), logits.var.data());
    let (mo, vo) = (out.mean.data_mut(), out.var.data_mut());
    let finite = match exec {
        Exec::Serial => chunk_kernel(mu, var, k, variant, mo, vo),
        Exec::Parallel => mu
            .par_chunks(PIXEL_CHUNK * k)
            .zip(var.par_chunks(PIXEL_CHUNK * k))
            .zip(mo.par_chunks_mut(PIXEL_CHUNK * k))
            .zip(vo.par_chunks_mut(PIXEL_CHUNK * k))
            .map(|(((m, v), a), b)| chunk_kernel(m, v, k, variant, a, b))
            .reduce(|| true, |a, b| a && b),
    };
    if !finite {
        return Err(Error::NonFinite("softmax output variance (logit variance too large)".into()));
    }
    Ok(())
}

/// Expected categorical `E[t]` per pixel, renormalized in f64 so every pixel
/// sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl Categorical {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.probs[index * self.classes..(index + 1) * self.classes]
    }

    pub fn to_grid(&self) -> Grid {
        let data = self.probs.iter().map(|&p| p as f32).collect();
        Grid::new(self.height, self.width, self.classes, data).expect("shape already validated")
    }
}

pub(crate) fn renormalize(mean: &[f32], out: &mut [f64]) {
    let sum: f64 = mean.iter().map(|&p| f64::from(p)).sum();
    for (o, &p) in out.iter_mut().zip(mean) {
        *o = f64::from(p) / sum;
    }
}

pub fn expected_categorical(probs: &ProbMoments) -> Result<Categorical> {
    probs.validate()?;
    let k = probs.classes();
    let mut out = vec![0.0f64; probs.mean.data().len()];
    for (m, o) in probs.mean.data().chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        renormalize(m, o);
    }
    Ok(Categorical {
        height: probs.mean.height(),
        width: probs.mean.width(),
        classes: k,
        probs: out,
    })
}

/// Plain max-shifted softmax of one pixel, f64 accumulation.
#[inline(always)]
pub fn softmax_into(logits: &[f32], out: &mut [f32]) {
    let shift = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0f64;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = fastmath::exp(f64::from(l - shift));
        *o = e as f32;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o = (f64::from(*o) * inv) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_pixel(mu: &[f32], var: &[f32]) -> LogitMoments {
        let k = mu.len();
        LogitMoments::new(
            Grid::new(1, 1, k, mu.to_vec()).unwrap(),
            Grid::new(1, 1, k, var.to_vec()).unwrap(),
        )
        .unwrap()
    }

    fn softmax64(x: &[f64]) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn lognormal_examples() {
        assert_eq!(lognormal_moments(0.0, 0.0).unwrap(), (1.0, 0.0));
        let (m, v) = lognormal_moments(0.0, 1.0).unwrap();
        assert!((m - 1.648721).abs() < 1e-6, "{m}");
        assert!((v - 4.670774).abs() < 1e-5, "{v}");
        // closed form without the log-domain rewrite
        assert!((v - (1f64.exp() - 1.0) * 1f64.exp()).abs() < 1e-12);
        let (m2, _) = lognormal_moments(0.75, 1.0).unwrap();
        assert!((m2 / m - 0.75f64.exp()).abs() < 1e-14);
        assert!(matches!(lognormal_moments(0.0, -1e-3), Err(Error::Domain(_))));
    }

    #[test]
    fn lognormal_variance_does_not_overflow_early() {
        // exp(2 * 400) overflows on its own; the log-domain form stays finite here.
        let (_, v) = lognormal_moments(-300.0, 0.5).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn symmetric_zero_variance() {
        let p = ep_softmax(&one_pixel(&[0.0, 0.0], &[0.0, 0.0]), RatioVariant::DeltaMethod).unwrap();
        assert_eq!(p.mean.data(), &[0.5, 0.5]);
        assert_eq!(p.var.data(), &[0.0, 0.0]);
    }

    #[test]
    fn degenerates_to_softmax() {
        for variant in [RatioVariant::DeltaMethod, RatioVariant::AsPrinted] {
            let p = ep_softmax(&one_pixel(&[1.0, 0.0], &[0.0, 0.0]), variant).unwrap();
            assert!((p.mean.data()[0] - 0.731059).abs() < 1e-6);
            assert!((p.mean.data()[1] - 0.268941).abs() < 1e-6);
            assert_eq!(p.var.data(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn mean_identity_on_three_classes() {
        let mu = [0.5, -0.2, 1.1];
        let var = [0.3, 0.05, 0.6];
        let (mean, v) = ep_softmax_pixel(&mu, &var, RatioVariant::DeltaMethod);
        let shifted: Vec<f64> = mu.iter().zip(&var).map(|(m, s)| m + s / 2.0).collect();
        for (a, b) in mean.iter().zip(softmax64(&shifted)) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(v.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn variance_shifts_expected_class_probability() {
        let p = ep_softmax(&one_pixel(&[0.0, 0.0], &[2.0, 0.0]), RatioVariant::DeltaMethod).unwrap();
        let c = expected_categorical(&p).unwrap();
        let e = 1f64.exp();
        assert!((c.probs()[0] - e / (e + 1.0)).abs() < 1e-7);
        assert!((c.probs()[1] - 1.0 / (e + 1.0)).abs() < 1e-7);
        assert!((c.probs()[0] - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn as_printed_differs_from_delta() {
        let mu = [0.5, -0.2, 1.1];
        let var = [0.3, 0.05, 0.6];
        let (m1, v1) = ep_softmax_pixel(&mu, &var, RatioVariant::DeltaMethod);
        let (m2, v2) = ep_softmax_pixel(&mu, &var, RatioVariant::AsPrinted);
        assert_eq!(m1, m2);
        assert_ne!(v1, v2);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [RatioVariant::DeltaMethod, RatioVariant::AsPrinted] {
            assert_eq!(v.name().parse::<RatioVariant>().unwrap(), v);
        }
        assert!("exact".parse::<RatioVariant>().is_err());
    }

    #[test]
    fn rejects_bad_logits() {
        assert!(matches!(
            ep_softmax(&one_pixel(&[f32::NAN, 0.0], &[0.0, 0.0]), RatioVariant::DeltaMethod),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            ep_softmax(&one_pixel(&[0.0, 0.0], &[-1.0, 0.0]), RatioVariant::DeltaMethod),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            ep_softmax(&one_pixel(&[0.0, 0.0], &[1000.0, 0.0]), RatioVariant::DeltaMethod),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let p = ep_softmax(&one_pixel(&[500.0, 480.0, -300.0], &[2.0, 1.0, 0.5]), RatioVariant::DeltaMethod).unwrap();
        let s: f32 = p.mean.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(p.var.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn categorical_sums_to_one_exactly() {
        let p = ep_softmax(&one_pixel(&[0.3, -1.0, 2.0, 0.1], &[0.2, 0.9, 0.1, 1.5]), RatioVariant::DeltaMethod).unwrap();
        let c = expected_categorical(&p).unwrap();
        let s: f64 = c.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    fn logit_pixel() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
        (2usize..12).prop_flat_map(|k| {
            (
                proptest::collection::vec(-8.0f32..8.0, k),
                proptest::collection::vec(0.0f32..4.0, k),
            )
        })
    }

    proptest! {
        #[test]
        fn mean_normalized_and_nonnegative_var((mu, var) in logit_pixel()) {
            for variant in [RatioVariant::DeltaMethod, RatioVariant::AsPrinted] {
                let p = ep_softmax(&one_pixel(&mu, &var), variant).unwrap();
                let s: f64 = p.mean.data().iter().map(|&x| f64::from(x)).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(p.mean.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
                prop_assert!(p.var.data().iter().all(|&x| x >= 0.0 && x.is_finite()));
            }
        }

        #[test]
        fn zero_variance_is_softmax(mu in proptest::collection::vec(-20.0f32..20.0, 2..19)) {
            let zeros = vec![0.0; mu.len()];
            let p = ep_softmax(&one_pixel(&mu, &zeros), RatioVariant::DeltaMethod).unwrap();
            let want = softmax64(&mu.iter().map(|&x| f64::from(x)).collect::<Vec<_>>());
            for (a, b) in p.mean.data().iter().zip(want) {
                prop_assert!((f64::from(*a) - b).abs() < 1e-7);
            }
            prop_assert!(p.var.data().iter().all(|&v| v == 0.0));
        }

        // Means on a 1/1024 grid and a dyadic shift keep the f32 addition exact.
        #[test]
        fn delta_is_shift_invariant(
            (mu, var) in (2usize..10).prop_flat_map(|k| (
                proptest::collection::vec(-4096i32..4096, k),
                proptest::collection::vec(0.0f32..2.0, k),
            )),
            shift in -64i32..64,
        ) {
            let mu: Vec<f32> = mu.iter().map(|&m| m as f32 / 1024.0).collect();
            let moved: Vec<f32> = mu.iter().map(|&m| m + shift as f32 * 0.5).collect();
            let a = ep_softmax(&one_pixel(&mu, &var), RatioVariant::DeltaMethod).unwrap();
            let b = ep_softmax(&one_pixel(&moved, &var), RatioVariant::DeltaMethod).unwrap();
            for (x, y) in a.mean.data().iter().zip(b.mean.data()).chain(a.var.data().iter().zip(b.var.data())) {
                prop_assert!((x - y).abs() <= 1e-7);
            }
        }

        #[test]
        fn own_variance_raises_expected_probability(
            (mu, var) in logit_pixel(),
            bump in 0.05f64..2.0,
            which in 0usize..12,
        ) {
            let mu: Vec<f64> = mu.iter().map(|&x| f64::from(x)).collect();
            let var: Vec<f64> = var.iter().map(|&x| f64::from(x)).collect();
            let j = which % mu.len();
            let (before, _) = ep_softmax_pixel(&mu, &var, RatioVariant::DeltaMethod);
            let mut more = var.clone();
            more[j] += bump;
            let (after, _) = ep_softmax_pixel(&mu, &more, RatioVariant::DeltaMethod);
            prop_assert!(after[j] >= before[j]);
            if before[j] > 1e-12 && before[j] < 1.0 - 1e-12 {
                prop_assert!(after[j] > before[j]);
            }
        }

        #[test]
        fn argmax_matches_shifted_logits((mu, var) in logit_pixel()) {
            let mu: Vec<f64> = mu.iter().map(|&x| f64::from(x)).collect();
            let var: Vec<f64> = var.iter().map(|&x| f64::from(x)).collect();
            let (mean, _) = ep_softmax_pixel(&mu, &var, RatioVariant::DeltaMethod);
            let score: Vec<f64> = mu.iter().zip(&var).map(|(m, v)| m + v / 2.0).collect();
            let am = |x: &[f64]| x.iter().enumerate().fold(0, |b, (i, v)| if *v > x[b] { i } else { b });
            prop_assert_eq!(am(&mean), am(&score));
        }
    }
}
