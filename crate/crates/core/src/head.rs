//! Probabilistic final layer.
//!
//! A [`GaussianHead`] holds a factorized Gaussian over the weights and biases of
//! a 1x1 convolution (equivalently a per-pixel linear map). For a pixel with
//! features `x` the logit of class `j` is Gaussian with
//!
//! ```text
//! mean_j = sum_d x_d * mean_weight[j, d] + mean_bias[j]
//! var_j  = noise + sum_d x_d^2 * var_weight[j, d] + var_bias[j]
//! ```
//!
//! Reductions run in f64 and are stored as f32.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{DesignMatrix, Grid};
use crate::io::{Container, Tensor};
use crate::fastmath::dispatch;
use crate::Exec;

/// Pixels handed to one worker at a time.
const PIXEL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    classes: usize,
    features: usize,
    mean_weight: Vec<f32>,
    mean_bias: Vec<f32>,
    var_weight: Vec<f32>,
    var_bias: Vec<f32>,
    noise: f32,
    // D x K transposed copies in f64, classes zero-padded to whole lanes, so
    // the pixel loop runs over fixed-width class blocks.
    mean_weight_t: Vec<Lanes>,
    var_weight_t: Vec<Lanes>,
}

const LANES: usize = 8;
type Lanes = [f64; LANES];

fn lane_blocks(classes: usize) -> usize {
    classes.div_ceil(LANES)
}

fn transpose(w: &[f32], classes: usize, features: usize) -> Vec<Lanes> {
    let blocks = lane_blocks(classes);
    let mut out = vec![[0.0; LANES]; features * blocks];
    for j in 0..classes {
        for d in 0..features {
            out[d * blocks + j / LANES][j % LANES] = f64::from(w[j * features + d]);
        }
    }
    out
}

fn bias_lanes(values: &[f32], offset: f64) -> Vec<Lanes> {
    let mut out = vec![[0.0; LANES]; lane_blocks(values.len())];
    for (j, &v) in values.iter().enumerate() {
        out[j / LANES][j % LANES] = offset + f64::from(v);
    }
    out
}

fn store_lanes(acc: &Lanes, out: &mut [f32]) {
    for (o, a) in out.iter_mut().zip(acc) {
        *o = *a as f32;
    }
}

impl GaussianHead {
    pub fn new(
        classes: usize,
        features: usize,
        mean_weight: Vec<f32>,
        mean_bias: Vec<f32>,
        var_weight: Vec<f32>,
        var_bias: Vec<f32>,
        noise: f32,
    ) -> Result<Self> {
        if classes == 0 || features == 0 {
            return Err(Error::Shape(format!(
                "head needs K >= 1 and D >= 1, got K={classes}, D={features}"
            )));
        }
        let kd = classes * features;
        for (name, len, want) in [
            ("mean_weight", mean_weight.len(), kd),
            ("var_weight", var_weight.len(), kd),
            ("mean_bias", mean_bias.len(), classes),
            ("var_bias", var_bias.len(), classes),
        ] {
            if len != want {
                return Err(Error::Shape(format!("{name} has {len} values, expected {want}")));
            }
        }
        for (name, values) in [
            ("mean_weight", &mean_weight),
            ("mean_bias", &mean_bias),
            ("var_weight", &var_weight),
            ("var_bias", &var_bias),
        ] {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("head {name}")));
            }
        }
        if var_weight.iter().chain(&var_bias).any(|&v| v < 0.0) {
            return Err(Error::Domain("head variances must be >= 0".into()));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Domain(format!("noise must be finite and >= 0, got {noise}")));
        }
        let mean_weight_t = transpose(&mean_weight, classes, features);
        let var_weight_t = transpose(&var_weight, classes, features);
        Ok(Self {
            classes,
            features,
            mean_weight,
            mean_bias,
            var_weight,
            var_bias,
            noise,
            mean_weight_t,
            var_weight_t,
        })
    }

    /// Deterministic head: all variances and the noise are zero.
    pub fn point(classes: usize, features: usize, mean_weight: Vec<f32>, mean_bias: Vec<f32>) -> Result<Self> {
        Self::new(
            classes,
            features,
            mean_weight,
            mean_bias,
            vec![0.0; classes * features],
            vec![0.0; classes],
            0.0,
        )
    }

    pub fn zeros(classes: usize, features: usize) -> Result<Self> {
        Self::point(classes, features, vec![0.0; classes * features], vec![0.0; classes])
    }

    /// Rebuilds a head from flattened means and variances in layout order
    /// (row-major K x D weights, then K biases).
    pub fn from_flat(classes: usize, features: usize, mean: &[f32], var: &[f32], noise: f32) -> Result<Self> {
        let kd = classes * features;
        if mean.len() != kd + classes || var.len() != kd + classes {
            return Err(Error::Shape(format!(
                "flat parameters need {} values, got mean {} / var {}",
                kd + classes,
                mean.len(),
                var.len()
            )));
        }
        Self::new(
            classes,
            features,
            mean[..kd].to_vec(),
            mean[kd..].to_vec(),
            var[..kd].to_vec(),
            var[kd..].to_vec(),
            noise,
        )
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn mean_weight(&self) -> &[f32] {
        &self.mean_weight
    }

    pub fn mean_bias(&self) -> &[f32] {
        &self.mean_bias
    }

    pub fn var_weight(&self) -> &[f32] {
        &self.var_weight
    }

    pub fn var_bias(&self) -> &[f32] {
        &self.var_bias
    }

    pub fn noise(&self) -> f32 {
        self.noise
    }

    pub fn with_noise(self, noise: f32) -> Result<Self> {
        Self::new(
            self.classes,
            self.features,
            self.mean_weight,
            self.mean_bias,
            self.var_weight,
            self.var_bias,
            noise,
        )
    }

    /// Mean parameters in layout order: K x D weights then K biases.
    pub fn flat_mean(&self) -> Vec<f32> {
        [self.mean_weight.as_slice(), &self.mean_bias].concat()
    }

    pub fn flat_var(&self) -> Vec<f32> {
        [self.var_weight.as_slice(), &self.var_bias].concat()
    }

    pub fn to_container(&self) -> Result<Container> {
        let (k, d) = (self.classes, self.features);
        let mut c = Container::new();
        c.push(Tensor::new("mean_weight", vec![k, d], self.mean_weight.clone())?)?;
        c.push(Tensor::new("mean_bias", vec![k], self.mean_bias.clone())?)?;
        c.push(Tensor::new("var_weight", vec![k, d], self.var_weight.clone())?)?;
        c.push(Tensor::new("var_bias", vec![k], self.var_bias.clone())?)?;
        c.push(Tensor::scalar("noise", self.noise)?)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mw = c.tensor("mean_weight")?;
        let (k, d) = match *mw.dims() {
            [k, d] => (k, d),
            _ => return Err(Error::Shape(format!("mean_weight must be K x D, has dims {:?}", mw.dims()))),
        };
        let noise = c.tensor("noise")?;
        if noise.data().len() != 1 {
            return Err(Error::Shape("noise must hold exactly one value".into()));
        }
        let vw = c.tensor("var_weight")?;
        if vw.dims() != mw.dims() {
            return Err(Error::Shape(format!(
                "var_weight dims {:?} differ from mean_weight dims {:?}",
                vw.dims(),
                mw.dims()
            )));
        }
        Self::new(
            k,
            d,
            mw.data().to_vec(),
            c.tensor("mean_bias")?.data().to_vec(),
            vw.data().to_vec(),
            c.tensor("var_bias")?.data().to_vec(),
            noise.data()[0],
        )
    }

    fn check_design(&self, design: &DesignMatrix) -> Result<()> {
        if design.channels() != self.features {
            return Err(Error::Shape(format!(
                "design has {} features per pixel, head expects {}",
                design.channels(),
                self.features
            )));
        }
        design.check_finite("design matrix")
    }
}

/// Per-pixel, per-class Gaussian logit moments (both H x W x K).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMoments {
    pub mean: Grid,
    pub var: Grid,
}

impl LogitMoments {
    pub fn new(mean: Grid, var: Grid) -> Result<Self> {
        if !mean.same_shape(&var) {
            return Err(Error::Shape("logit mean and variance grids differ in shape".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn zeros(height: usize, width: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            mean: Grid::zeros(height, width, classes)?,
            var: Grid::zeros(height, width, classes)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.mean.channels()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !self.mean.same_shape(&self.var) {
            return Err(Error::Shape("logit mean and variance grids differ in shape".into()));
        }
        self.mean.check_finite("logit mean")?;
        self.var.check_finite("logit variance")?;
        if self.var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("logit variances must be >= 0".into()));
        }
        Ok(())
    }

    fn reshape_for(&mut self, design: &DesignMatrix, classes: usize) -> Result<()> {
        let fits = self.mean.height() == design.height()
            && self.mean.width() == design.width()
            && self.mean.channels() == classes
            && self.mean.same_shape(&self.var);
        if !fits {
            *self = Self::zeros(design.height(), design.width(), classes)?;
        }
        Ok(())
    }
}

dispatch!(fn moments_kernel => moments_kernel_generic(
    head: &GaussianHead, features: &[f32], mean_out: &mut [f32], var_out: &mut [f32]
));
dispatch!(fn mean_kernel => mean_kernel_generic(head: &GaussianHead, features: &[f32], mean_out: &mut [f32]));

// Each class block is accumulated over all features in a local array so it
// stays in registers.
#[inline(always)]
fn moments_kernel_generic(head: &GaussianHead, features: &[f32], mean_out: &mut [f32], var_out: &mut [f32]) {
    let (k, d, blocks) = (head.classes, head.features, lane_blocks(head.classes));
    let bias_m = bias_lanes(&head.mean_bias, 0.0);
    let bias_v = bias_lanes(&head.var_bias, f64::from(head.noise));
    let mut xs = vec![0.0f64; d];
    let mut x2s = vec![0.0f64; d];
    for ((px, mo), vo) in features
        .chunks_exact(d)
        .zip(mean_out.chunks_exact_mut(k))
        .zip(var_out.chunks_exact_mut(k))
    {
        for ((x, x2), &f) in xs.iter_mut().zip(x2s.iter_mut()).zip(px) {
            *x = f64::from(f);
            *x2 = *x * *x;
        }
        for b in 0..blocks {
            let mut am = bias_m[b];
            let mut av = bias_v[b];
            for t in 0..d {
                let (wm, wv) = (&head.mean_weight_t[t * blocks + b], &head.var_weight_t[t * blocks + b]);
                let (x, x2) = (xs[t], x2s[t]);
                for l in 0..LANES {
                    am[l] += x * wm[l];
                    av[l] += x2 * wv[l];
                }
            }
            let end = (k - b * LANES).min(LANES);
            store_lanes(&am, &mut mo[b * LANES..b * LANES + end]);
            store_lanes(&av, &mut vo[b * LANES..b * LANES + end]);
        }
    }
}

#[inline(always)]
fn mean_kernel_generic(head: &GaussianHead, features: &[f32], mean_out: &mut [f32]) {
    let (k, d, blocks) = (head.classes, head.features, lane_blocks(head.classes));
    let bias = bias_lanes(&head.mean_bias, 0.0);
    let mut xs = vec![0.0f64; d];
    for (px, mo) in features.chunks_exact(d).zip(mean_out.chunks_exact_mut(k)) {
        for (x, &f) in xs.iter_mut().zip(px) {
            *x = f64::from(f);
        }
        for b in 0..blocks {
            let mut a = bias[b];
            for (w, &x) in head.mean_weight_t[b..].iter().step_by(blocks).zip(&xs) {
                for l in 0..LANES {
                    a[l] += x * w[l];
                }
            }
            let end = (k - b * LANES).min(LANES);
            store_lanes(&a, &mut mo[b * LANES..b * LANES + end]);
        }
    }
}

pub fn predict_moments(design: &DesignMatrix, head: &GaussianHead) -> Result<LogitMoments> {
    predict_moments_with(design, head, Exec::Serial)
}

pub fn predict_moments_with(design: &DesignMatrix, head: &GaussianHead, exec: Exec) -> Result<LogitMoments> {
    let mut out = LogitMoments::zeros(design.height(), design.width(), head.classes)?;
    predict_moments_into(design, head, exec, &mut out)?;
    Ok(out)
}

/// Writes logit moments into `out`, reusing its buffers when the shape fits.
pub fn predict_moments_into(
    design: &DesignMatrix,
    head: &GaussianHead,
    exec: Exec,
    out: &mut LogitMoments,
) -> Result<()> {
    head.check_design(design)?;
    out.reshape_for(design, head.classes)?;
    let (d, k) = (head.features, head.classes);
    let feats = design.data();
    let (mean, var) = (out.mean.data_mut(), out.var.data_mut());
    match exec {
        Exec::Serial => moments_kernel(head, feats, mean, var),
        Exec::Parallel => feats
            .par_chunks(PIXEL_CHUNK * d)
            .zip(mean.par_chunks_mut(PIXEL_CHUNK * k))
            .zip(var.par_chunks_mut(PIXEL_CHUNK * k))
            .for_each(|((f, m), v)| moments_kernel(head, f, m, v)),
    }
    Ok(())
}

/// Logits at the posterior mean; identical to `predict_moments(..).mean`.
pub fn point_logits(design: &DesignMatrix, head: &GaussianHead) -> Result<Grid> {
    let mut out = Grid::zeros(design.height(), design.width(), head.classes)?;
    point_logits_into(design, head, Exec::Serial, &mut out)?;
    Ok(out)
}

pub fn point_logits_into(design: &DesignMatrix, head: &GaussianHead, exec: Exec, out: &mut Grid) -> Result<()> {
    head.check_design(design)?;
    if out.height() != design.height() || out.width() != design.width() || out.channels() != head.classes {
        *out = Grid::zeros(design.height(), design.width(), head.classes)?;
    }
    let (d, k) = (head.features, head.classes);
    let feats = design.data();
    match exec {
        Exec::Serial => mean_kernel(head, feats, out.data_mut()),
        Exec::Parallel => feats
            .par_chunks(PIXEL_CHUNK * d)
            .zip(out.data_mut().par_chunks_mut(PIXEL_CHUNK * k))
            .for_each(|(f, m)| mean_kernel(head, f, m)),
    }
    Ok(())
}

/// Same moments evaluated as a 1x1 convolution: one output plane per class,
/// accumulated channel by channel over the whole grid.
pub fn conv1x1_moments(design: &DesignMatrix, head: &GaussianHead) -> Result<LogitMoments> {
    head.check_design(design)?;
    let (d, k, p) = (head.features, head.classes, design.pixels());
    let feats = design.data();
    let mut out = LogitMoments::zeros(design.height(), design.width(), k)?;
    let mut plane_m = vec![0.0f64; p];
    let mut plane_v = vec![0.0f64; p];
    for j in 0..k {
        plane_m.fill(f64::from(head.mean_bias[j]));
        plane_v.fill(f64::from(head.noise) + f64::from(head.var_bias[j]));
        for c in 0..d {
            let wm = f64::from(head.mean_weight[j * d + c]);
            let wv = f64::from(head.var_weight[j * d + c]);
            for (i, (pm, pv)) in plane_m.iter_mut().zip(plane_v.iter_mut()).enumerate() {
                let x = f64::from(feats[i * d + c]);
                *pm += x * wm;
                *pv += x * x * wv;
            }
        }
        for i in 0..p {
            out.mean.data_mut()[i * k + j] = plane_m[i] as f32;
            out.var.data_mut()[i * k + j] = plane_v[i] as f32;
        }
    }
    Ok(out)
}
