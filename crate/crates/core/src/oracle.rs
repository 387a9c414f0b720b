//! Monte-Carlo ground truth for the analytic moments.
//!
//! Draws come from ChaCha8 keyed by `(seed, stream)`. Samples are processed in
//! fixed-size chunks; chunk `c` seeks the generator to word offset
//! `c << CHUNK_WORD_SHIFT`, so results are identical for any thread count.
//! Moments are merged in f64 with the pairwise update of Pébay (2008), which
//! also yields the fourth central moment used for the variance standard error.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::epsoftmax::{ep_softmax_pixel, RatioVariant};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::head::{predict_moments, GaussianHead};

const CHUNK_SAMPLES: usize = 1 << 15;
const CHUNK_WORD_SHIFT: u32 = 40;

pub const MIN_LOGIT_SAMPLES: usize = 1_000;
pub const MIN_SOFTMAX_SAMPLES: usize = 10_000;

/// Generator for `(seed, stream)`; the pair fully determines the sequence.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn chunk_rng(seed: u64, stream: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = stream_rng(seed, stream);
    rng.set_word_pos((chunk as u128) << CHUNK_WORD_SHIFT);
    rng
}

/// Streaming central moments up to order four.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        let n1 = self.n;
        self.n += 1.0;
        let n = self.n;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0.0 {
            return *other;
        }
        if other.n == 0.0 {
            return *self;
        }
        let (na, nb) = (self.n, other.n);
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let d3 = d2 * delta;
        let d4 = d2 * d2;
        Moments {
            n,
            mean: self.mean + delta * nb / n,
            m2: self.m2 + other.m2 + d2 * na * nb / n,
            m3: self.m3 + other.m3 + d3 * na * nb * (na - nb) / (n * n)
                + 3.0 * delta * (na * other.m2 - nb * self.m2) / n,
            m4: self.m4
                + other.m4
                + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
                + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
                + 4.0 * delta * (na * other.m3 - nb * self.m3) / n,
        }
    }

    pub fn count(&self) -> f64 {
        self.n
    }

    pub fn estimate(&self, seed: u64) -> McEstimate {
        let n = self.n;
        let variance = if n > 1.0 { self.m2 / (n - 1.0) } else { 0.0 };
        let pop2 = self.m2 / n;
        let pop4 = self.m4 / n;
        McEstimate {
            mean: self.mean,
            variance,
            mean_se: (variance / n).sqrt(),
            variance_se: ((pop4 - pop2 * pop2).max(0.0) / n).sqrt(),
            samples: n as usize,
            seed,
        }
    }
}

/// Empirical mean and variance with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub mean_se: f64,
    /// From the fourth central moment: `sqrt((m4 - m2^2) / N)`.
    pub variance_se: f64,
    pub samples: usize,
    pub seed: u64,
}

impl McEstimate {
    /// `|value - mean|` in units of the mean's standard error.
    pub fn mean_z(&self, value: f64) -> f64 {
        z_score(value - self.mean, self.mean_se)
    }

    pub fn variance_z(&self, value: f64) -> f64 {
        z_score(value - self.variance, self.variance_se)
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff.abs() / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
    pub stream: u64,
}

impl McConfig {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            stream: 0,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }
}

/// Runs `sample` over chunked, independently seeked generators and merges the
/// per-class moments in chunk order.
fn run_chunks<F>(cfg: &McConfig, classes: usize, sample: F) -> Vec<Moments>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    let chunks = cfg.samples.div_ceil(CHUNK_SAMPLES);
    let partials: Vec<Vec<Moments>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(cfg.seed, cfg.stream, c);
            let count = CHUNK_SAMPLES.min(cfg.samples - c * CHUNK_SAMPLES);
            let mut acc = vec![Moments::default(); classes];
            let mut out = vec![0.0; classes];
            for _ in 0..count {
                sample(&mut rng, &mut out);
                for (m, &x) in acc.iter_mut().zip(&out) {
                    m.push(x);
                }
            }
            acc
        })
        .collect();
    partials.iter().fold(vec![Moments::default(); classes], |acc, p| {
        acc.iter().zip(p).map(|(a, b)| a.merge(b)).collect()
    })
}

/// Samples `w ~ N(mean, var)` for every weight and bias, plus observation
/// noise, and returns per-class logit moments for one pixel.
pub fn mc_logit_moments(pixel: &[f32], head: &GaussianHead, cfg: &McConfig) -> Result<Vec<McEstimate>> {
    if cfg.samples < MIN_LOGIT_SAMPLES {
        return Err(Error::Config(format!(
            "logit oracle needs at least {MIN_LOGIT_SAMPLES} samples, got {}",
            cfg.samples
        )));
    }
    let (k, d) = (head.classes(), head.features());
    if pixel.len() != d {
        return Err(Error::Shape(format!("pixel has {} features, head expects {d}", pixel.len())));
    }
    let x: Vec<f64> = pixel.iter().map(|&v| f64::from(v)).collect();
    let mw = head.mean_weight();
    let sb: Vec<f64> = head.var_bias().iter().map(|&v| f64::from(v).sqrt()).collect();
    let sn = f64::from(head.noise()).sqrt();
    // x . w with w = m + s z splits into the fixed x . m and the random sum of
    // (x s) z; only the latter is redrawn per sample.
    let centre: Vec<f64> = (0..k)
        .map(|j| f64::from(head.mean_bias()[j]) + (0..d).map(|t| x[t] * f64::from(mw[j * d + t])).sum::<f64>())
        .collect();
    let xs: Vec<f64> = head
        .var_weight()
        .iter()
        .enumerate()
        .map(|(i, &v)| x[i % d] * f64::from(v).sqrt())
        .collect();

    let moments = run_chunks(cfg, k, |rng, out| {
        let mut z = [0.0f64; 64];
        for j in 0..k {
            let zb: f64 = rng.sample(StandardNormal);
            let zn: f64 = rng.sample(StandardNormal);
            let mut a = centre[j] + sb[j] * zb + sn * zn;
            for row in xs[j * d..(j + 1) * d].chunks(z.len()) {
                for zt in &mut z[..row.len()] {
                    *zt = rng.sample(StandardNormal);
                }
                a += row.iter().zip(&z).map(|(r, zt)| r * zt).sum::<f64>();
            }
            out[j] = a;
        }
    });
    Ok(moments.iter().map(|m| m.estimate(cfg.seed)).collect())
}

/// Samples independent Gaussian logits, applies the exact softmax and returns
/// per-class moments of the outputs.
pub fn mc_softmax_moments(mean: &[f64], var: &[f64], cfg: &McConfig) -> Result<Vec<McEstimate>> {
    if cfg.samples < MIN_SOFTMAX_SAMPLES {
        return Err(Error::Config(format!(
            "softmax oracle needs at least {MIN_SOFTMAX_SAMPLES} samples, got {}",
            cfg.samples
        )));
    }
    if mean.len() != var.len() || mean.is_empty() {
        return Err(Error::Shape("softmax oracle needs equal-length, non-empty moments".into()));
    }
    if var.iter().any(|&v| v.is_nan() || v < 0.0) {
        return Err(Error::Domain("logit variances must be >= 0".into()));
    }
    let k = mean.len();
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let moments = run_chunks(cfg, k, |rng, out| {
        let mut top = f64::NEG_INFINITY;
        for j in 0..k {
            let z: f64 = rng.sample(StandardNormal);
            out[j] = mean[j] + sd[j] * z;
            top = top.max(out[j]);
        }
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - top).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    });
    Ok(moments.iter().map(|m| m.estimate(cfg.seed)).collect())
}

/// One analytic-vs-Monte-Carlo comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRow {
    pub case: String,
    pub class: usize,
    pub quantity: &'static str,
    pub analytic: f64,
    pub mc: f64,
    pub se: f64,
}

impl ValidationRow {
    pub fn delta(&self) -> f64 {
        self.analytic - self.mc
    }

    pub fn z(&self) -> f64 {
        z_score(self.delta(), self.se)
    }
}

fn push_rows(rows: &mut Vec<ValidationRow>, case: &str, analytic: &[(f64, f64)], mc: &[McEstimate]) {
    for (class, ((am, av), e)) in analytic.iter().zip(mc).enumerate() {
        rows.push(ValidationRow {
            case: case.to_string(),
            class,
            quantity: "mean",
            analytic: *am,
            mc: e.mean,
            se: e.mean_se,
        });
        rows.push(ValidationRow {
            case: case.to_string(),
            class,
            quantity: "var",
            analytic: *av,
            mc: e.variance,
            se: e.variance_se,
        });
    }
}

/// Fixed battery of analytic-vs-MC comparisons, determined by `seed`.
pub fn validation_report(seed: u64, samples: usize) -> Result<Vec<ValidationRow>> {
    let mut rows = Vec::new();
    let mut rng = stream_rng(seed, u64::MAX);

    for case in 0..3 {
        let (k, d) = (rng.random_range(2..8), rng.random_range(1..16));
        let mut draw = |n: usize, lo: f32, hi: f32| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>();
        let head = GaussianHead::new(
            k,
            d,
            draw(k * d, -1.0, 1.0),
            draw(k, -1.0, 1.0),
            draw(k * d, 0.0, 0.3),
            draw(k, 0.0, 0.3),
            0.05,
        )?;
        let x = draw(d, -2.0, 2.0);
        let analytic = predict_moments(&Grid::new(1, 1, d, x.clone())?, &head)?;
        let pairs: Vec<(f64, f64)> = analytic
            .mean
            .data()
            .iter()
            .zip(analytic.var.data())
            .map(|(&m, &v)| (f64::from(m), f64::from(v)))
            .collect();
        let mc = mc_logit_moments(&x, &head, &McConfig::new(samples, seed).with_stream(case))?;
        push_rows(&mut rows, &format!("logit_{case}"), &pairs, &mc);
    }

    let mut cases: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![0.5, -0.2, 1.1], vec![0.3, 0.05, 0.6])];
    for _ in 0..2 {
        let k = rng.random_range(2..6);
        let mu = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let var = (0..k).map(|_| rng.random_range(0.0f64..1.0).powi(2)).collect();
        cases.push((mu, var));
    }
    for (i, (mu, var)) in cases.iter().enumerate() {
        let (m, v) = ep_softmax_pixel(mu, var, RatioVariant::DeltaMethod);
        let pairs: Vec<(f64, f64)> = m.into_iter().zip(v).collect();
        let mc = mc_softmax_moments(mu, var, &McConfig::new(samples.max(MIN_SOFTMAX_SAMPLES), seed).with_stream(100 + i as u64))?;
        push_rows(&mut rows, &format!("softmax_{i}"), &pairs, &mc);
    }
    Ok(rows)
}

pub fn report_csv(rows: &[ValidationRow]) -> String {
    let mut s = String::from("case,class,quantity,analytic,mc,se,delta,z\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.9e},{:.9e},{:.3e},{:.3e},{:.2}",
            r.case,
            r.class,
            r.quantity,
            r.analytic,
            r.mc,
            r.se,
            r.delta(),
            r.z()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn known_answer_seed0_stream0() {
        let mut rng = stream_rng(0, 0);
        let got: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                0xb585f767a79a3b6c,
                0x7746a55fbad8c037,
                0xb2fb0d3281e2a6e6,
                0x0f6760a48f9b887c
            ]
        );
    }

    #[test]
    fn streams_differ() {
        let a: u64 = stream_rng(3, 0).next_u64();
        let b: u64 = stream_rng(3, 1).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn pebay_merge_matches_sequential() {
        let mut rng = stream_rng(1, 0);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..5.0)).collect();
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let (mut a, mut b) = (Moments::default(), Moments::default());
        xs[..370].iter().for_each(|&x| a.push(x));
        xs[370..].iter().for_each(|&x| b.push(x));
        let merged = a.merge(&b);
        for (u, v) in [(all.mean, merged.mean), (all.m2, merged.m2), (all.m3, merged.m3), (all.m4, merged.m4)] {
            assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0), "{u} vs {v}");
        }
        // two-pass reference for the central moments
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let c = |p: i32| xs.iter().map(|x| (x - mean).powi(p)).sum::<f64>();
        assert!((all.m2 - c(2)).abs() < 1e-8 * c(2));
        assert!((all.m3 - c(3)).abs() < 1e-8 * c(2).powf(1.5));
        assert!((all.m4 - c(4)).abs() < 1e-8 * c(4));
    }

    fn head() -> GaussianHead {
        GaussianHead::new(
            2,
            3,
            vec![0.5, -1.0, 0.25, 1.5, 0.0, -0.75],
            vec![0.1, -0.2],
            vec![0.04, 0.09, 0.01, 0.0, 0.16, 0.25],
            vec![0.01, 0.02],
            0.03,
        )
        .unwrap()
    }

    #[test]
    fn zero_variance_head_is_exact() {
        let h = head();
        let point = GaussianHead::point(2, 3, h.mean_weight().to_vec(), h.mean_bias().to_vec()).unwrap();
        let x = [0.3f32, -1.2, 2.0];
        let mc = mc_logit_moments(&x, &point, &McConfig::new(2000, 1)).unwrap();
        let logits = crate::head::point_logits(&Grid::new(1, 1, 3, x.to_vec()).unwrap(), &point).unwrap();
        for (e, &l) in mc.iter().zip(logits.data()) {
            assert_eq!(e.variance, 0.0);
            assert_eq!(e.mean as f32, l);
            assert_eq!(e.mean_se, 0.0);
        }
    }

    #[test]
    fn same_seed_is_reproducible() {
        let cfg = McConfig::new(50_000, 7);
        let a = mc_logit_moments(&[1.0, 0.5, -0.5], &head(), &cfg).unwrap();
        let b = mc_logit_moments(&[1.0, 0.5, -0.5], &head(), &cfg).unwrap();
        assert_eq!(a, b);
        let c = mc_logit_moments(&[1.0, 0.5, -0.5], &head(), &cfg.with_stream(1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn logit_oracle_agrees_with_closed_form() {
        let x = [1.0f32, 0.5, -0.5];
        let analytic = predict_moments(&Grid::new(1, 1, 3, x.to_vec()).unwrap(), &head()).unwrap();
        let mc = mc_logit_moments(&x, &head(), &McConfig::new(400_000, 11)).unwrap();
        for (j, e) in mc.iter().enumerate() {
            assert!(e.mean_z(f64::from(analytic.mean.data()[j])) < 4.0);
            assert!(e.variance_z(f64::from(analytic.var.data()[j])) < 4.0);
        }
    }

    #[test]
    fn standard_error_follows_root_n() {
        let x = [1.0f32, 0.5, -0.5];
        for seed in 0..3 {
            let small = mc_logit_moments(&x, &head(), &McConfig::new(40_000, seed)).unwrap();
            let double = mc_logit_moments(&x, &head(), &McConfig::new(80_000, seed + 10)).unwrap();
            let quad = mc_logit_moments(&x, &head(), &McConfig::new(160_000, seed + 20)).unwrap();
            for j in 0..2 {
                let r2 = double[j].mean_se / small[j].mean_se;
                let r4 = quad[j].mean_se / small[j].mean_se;
                assert!((r2 / std::f64::consts::FRAC_1_SQRT_2 - 1.0).abs() < 0.2, "{r2}");
                assert!((r4 / 0.5 - 1.0).abs() < 0.2, "{r4}");
            }
        }
    }

    #[test]
    fn softmax_oracle_degenerate_cases() {
        let mc = mc_softmax_moments(&[1.0, 0.0], &[0.0, 0.0], &McConfig::new(10_000, 2)).unwrap();
        let e = 1f64.exp();
        assert!((mc[0].mean - e / (e + 1.0)).abs() < 1e-12);
        assert!(mc[0].variance < 1e-25);
        let sym = mc_softmax_moments(&[0.3, 0.3], &[0.8, 0.8], &McConfig::new(100_000, 3)).unwrap();
        for s in &sym {
            assert!(s.mean_z(0.5) < 3.0);
        }
    }

    #[test]
    fn sample_floor_enforced() {
        assert!(mc_logit_moments(&[0.0; 3], &head(), &McConfig::new(999, 0)).is_err());
        assert!(mc_softmax_moments(&[0.0], &[0.0], &McConfig::new(9_999, 0)).is_err());
    }

    #[test]
    fn chunking_does_not_depend_on_threads() {
        let cfg = McConfig::new(3 * CHUNK_SAMPLES + 17, 5);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let one = pool.install(|| mc_softmax_moments(&[0.1, 0.2, 0.3], &[0.5, 0.1, 0.2], &cfg).unwrap());
        let many = mc_softmax_moments(&[0.1, 0.2, 0.3], &[0.5, 0.1, 0.2], &cfg).unwrap();
        assert_eq!(one, many);
        assert_eq!(one[0].samples, cfg.samples);
    }

    #[test]
    fn report_is_deterministic() {
        let a = report_csv(&validation_report(7, 20_000).unwrap());
        let b = report_csv(&validation_report(7, 20_000).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("case,class,quantity"));
    }
}
