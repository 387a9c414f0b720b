//! Uncertainty maps from logit and softmax moments.
//!
//! - epistemic: entropy of the per-pixel diagonal Gaussian, in logit or
//!   probability space
//! - aleatoric: entropy of the expected categorical (an upper bound on the
//!   aleatoric part)
//! - class-conditional: standard deviation of one softmax output
//!
//! All entropies are in nats.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::epsoftmax::{renormalize, ProbMoments, RatioVariant};
use crate::error::{Error, Result};
use crate::grid::map_tensor;
use crate::head::LogitMoments;
use crate::io::{Container, LabelMap, Tensor};
use crate::fastmath::{self, dispatch};
use crate::Exec;

/// Variances below this are floored inside [`gaussian_entropy`].
pub const VARIANCE_FLOOR: f64 = 1e-20;

const PIXEL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum EntropySpace {
    #[default]
    Logit,
    Prob,
}

impl EntropySpace {
    pub fn name(self) -> &'static str {
        match self {
            EntropySpace::Logit => "logit",
            EntropySpace::Prob => "prob",
        }
    }
}

impl fmt::Display for EntropySpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EntropySpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(EntropySpace::Logit),
            "prob" => Ok(EntropySpace::Prob),
            other => Err(Error::Config(format!(
                "unknown entropy space `{other}` (expected `logit` or `prob`)"
            ))),
        }
    }
}

fn gaussian_constant(k: usize) -> f64 {
    0.5 * k as f64 * (1.0 + (2.0 * PI).ln())
}

/// Entropy of a diagonal Gaussian with the given variances.
pub fn gaussian_entropy(var: &[f64]) -> f64 {
    let log_det: f64 = var.iter().map(|&v| fastmath::ln(v.max(VARIANCE_FLOOR))).sum();
    0.5 * log_det + gaussian_constant(var.len())
}

#[inline(always)]
fn plogp(x: f64) -> f64 {
    if x > 0.0 {
        x * fastmath::ln(x)
    } else {
        0.0
    }
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().map(|&x| plogp(x)).sum::<f64>()
}

/// Shannon entropy `-sum p log p` with `0 log 0 = 0`.
pub fn categorical_entropy(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::Domain("categorical probabilities must be finite and >= 0".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("categorical probabilities sum to {sum}, not 1")));
    }
    Ok(entropy_unchecked(p))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel uncertainty maps for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBundle {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub epistemic: Vec<f32>,
    /// Entropy of the expected categorical (aleatoric upper bound).
    pub aleatoric: Vec<f32>,
    pub label: Vec<u16>,
    pub class_std: Vec<(usize, Vec<f32>)>,
    pub space: EntropySpace,
    pub variant: RatioVariant,
}

impl UncertaintyBundle {
    fn empty(height: usize, width: usize, classes: usize, space: EntropySpace, variant: RatioVariant) -> Self {
        let p = height * width;
        Self {
            height,
            width,
            classes,
            epistemic: vec![0.0; p],
            aleatoric: vec![0.0; p],
            label: vec![0; p],
            class_std: Vec::new(),
            space,
            variant,
        }
    }

    pub fn epistemic_map(&self) -> Result<Tensor> {
        map_tensor("epistemic", self.height, self.width, self.epistemic.clone())
    }

    pub fn aleatoric_map(&self) -> Result<Tensor> {
        map_tensor("aleatoric", self.height, self.width, self.aleatoric.clone())
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        LabelMap::new(self.height, self.width, self.label.clone())
    }

    pub fn class_std_map(&self, class: usize) -> Option<Result<Tensor>> {
        self.class_std
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(c, m)| map_tensor(&format!("class_std_{c}"), self.height, self.width, m.clone()))
    }

    /// Smallest epistemic value the floor allows for this class count.
    pub fn epistemic_floor(&self) -> f64 {
        gaussian_entropy(&vec![0.0; self.classes])
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push(self.epistemic_map()?)?;
        c.push(self.aleatoric_map()?)?;
        c.push(self.label_map()?.to_entry("label")?)?;
        for (class, _) in &self.class_std {
            c.push(self.class_std_map(*class).expect("class present")?)?;
        }
        c.push_text("ratio_variant", self.variant.name())?;
        c.push_text("entropy_space", self.space.name())?;
        Ok(c)
    }
}

pub fn make_bundle(
    probs: &ProbMoments,
    logits: &LogitMoments,
    space: EntropySpace,
    classes: &[usize],
) -> Result<UncertaintyBundle> {
    let mut out = UncertaintyBundle::empty(1, 1, 1, space, probs.variant);
    make_bundle_into(probs, logits, space, classes, Exec::Serial, &mut out)?;
    Ok(out)
}

dispatch!(fn bundle_kernel => bundle_kernel_generic(
    k: usize,
    prob_mean: &[f32],
    entropy_var: &[f32],
    epistemic: &mut [f32],
    aleatoric: &mut [f32],
    label: &mut [u16]
));

// Blocks of PIXEL_CHUNK pixels; logarithms run over whole blocks.
#[inline(always)]
fn bundle_kernel_generic(
    k: usize,
    prob_mean: &[f32],
    entropy_var: &[f32],
    epistemic: &mut [f32],
    aleatoric: &mut [f32],
    label: &mut [u16],
) {
    let block = PIXEL_CHUNK * k;
    let mut logv = vec![0.0f64; block];
    let mut cat = vec![0.0f64; block];
    let mut plp = vec![0.0f64; block];
    let constant = gaussian_constant(k);
    let max_entropy = (k as f64).ln();
    for ((((pm, ev), epi), ale), lab) in prob_mean
        .chunks(block)
        .zip(entropy_var.chunks(block))
        .zip(epistemic.chunks_mut(PIXEL_CHUNK))
        .zip(aleatoric.chunks_mut(PIXEL_CHUNK))
        .zip(label.chunks_mut(PIXEL_CHUNK))
    {
        let n = pm.len();
        let (logv, cat, plp) = (&mut logv[..n], &mut cat[..n], &mut plp[..n]);
        for (l, &v) in logv.iter_mut().zip(ev) {
            *l = fastmath::ln(f64::from(v).max(VARIANCE_FLOOR));
        }
        for (c, m) in cat.chunks_exact_mut(k).zip(pm.chunks_exact(k)) {
            renormalize(m, c);
        }
        for (o, &c) in plp.iter_mut().zip(cat.iter()) {
            *o = plogp(c);
        }
        for (i, ((lv, c), t)) in logv.chunks_exact(k).zip(cat.chunks_exact(k)).zip(plp.chunks_exact(k)).enumerate() {
            epi[i] = (0.5 * lv.iter().sum::<f64>() + constant) as f32;
            ale[i] = (-t.iter().sum::<f64>()).clamp(0.0, max_entropy) as f32;
            lab[i] = argmax(c) as u16;
        }
    }
}

/// Writes the bundle into `out`, reusing its buffers when the shape fits.
pub fn make_bundle_into(
    probs: &ProbMoments,
    logits: &LogitMoments,
    space: EntropySpace,
    classes: &[usize],
    exec: Exec,
    out: &mut UncertaintyBundle,
) -> Result<()> {
    if !probs.mean.same_shape(&logits.mean) {
        return Err(Error::Shape("probability and logit moments differ in shape".into()));
    }
    probs.validate()?;
    logits.validate()?;
    let (h, w, k) = (probs.mean.height(), probs.mean.width(), probs.classes());
    if k > usize::from(u16::MAX) {
        return Err(Error::Shape(format!("{k} classes do not fit a u16 label map")));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::UnknownClass { class: bad, classes: k });
    }
    if out.height != h || out.width != w || out.epistemic.len() != h * w {
        *out = UncertaintyBundle::empty(h, w, k, space, probs.variant);
    }
    out.classes = k;
    out.space = space;
    out.variant = probs.variant;

    let entropy_var = match space {
        EntropySpace::Logit => logits.var.data(),
        EntropySpace::Prob => probs.var.data(),
    };
    let pm = probs.mean.data();
    match exec {
        Exec::Serial => bundle_kernel(k, pm, entropy_var, &mut out.epistemic, &mut out.aleatoric, &mut out.label),
        Exec::Parallel => pm
            .par_chunks(PIXEL_CHUNK * k)
            .zip(entropy_var.par_chunks(PIXEL_CHUNK * k))
            .zip(out.epistemic.par_chunks_mut(PIXEL_CHUNK))
            .zip(out.aleatoric.par_chunks_mut(PIXEL_CHUNK))
            .zip(out.label.par_chunks_mut(PIXEL_CHUNK))
            .for_each(|((((m, v), e), a), l)| bundle_kernel(k, m, v, e, a, l)),
    }

    // Keep existing class_std buffers when the requested classes are unchanged.
    let reuse = out.class_std.len() == classes.len()
        && out.class_std.iter().zip(classes).all(|((c, m), want)| c == want && m.len() == h * w);
    if !reuse {
        out.class_std = classes.iter().map(|&c| (c, vec![0.0; h * w])).collect();
    }
    let pv = probs.var.data();
    for (c, map) in out.class_std.iter_mut() {
        for (i, s) in map.iter_mut().enumerate() {
            *s = pv[i * k + *c].max(0.0).sqrt();
        }
    }
    Ok(())
}
