//! Diagonal SWAG posterior from SGD parameter snapshots.
//!
//! Snapshots are flattened head parameters: row-major K x D weights followed
//! by K biases. The accumulator keeps the running mean and the running sum of
//! squared deviations (Welford), from which the running mean of squares is
//! exact. The posterior mean is the supplied pretrained parameters; the
//! variance is the population variance of the snapshots.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::head::GaussianHead;
use crate::io::{Container, Entry, FormatError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeadLayout {
    pub classes: usize,
    pub features: usize,
}

impl HeadLayout {
    pub fn new(classes: usize, features: usize) -> Self {
        Self { classes, features }
    }

    pub fn of(head: &GaussianHead) -> Self {
        Self::new(head.classes(), head.features())
    }

    /// Number of flattened parameters, `K * D + K`.
    pub fn len(&self) -> usize {
        self.classes * self.features + self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(
            "layout",
            vec![2],
            vec![self.classes as f32, self.features as f32],
        )?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.data() {
            [k, d] if k >= 1.0 && d >= 1.0 && k.fract() == 0.0 && d.fract() == 0.0 => {
                Ok(Self::new(k as usize, d as usize))
            }
            _ => Err(Error::Shape(format!("layout entry must hold [K, D], got {:?}", t.data()))),
        }
    }
}

/// Point about which snapshot spread is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum VarianceCenter {
    /// Snapshot mean (standard diagonal SWAG).
    #[default]
    Swa,
    /// Pretrained parameters: `mean((w_i - w_pretrained)^2)`.
    Pretrained,
}

impl fmt::Display for VarianceCenter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarianceCenter::Swa => "swa",
            VarianceCenter::Pretrained => "pretrained",
        })
    }
}

impl FromStr for VarianceCenter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swa" => Ok(VarianceCenter::Swa),
            "pretrained" => Ok(VarianceCenter::Pretrained),
            other => Err(Error::Config(format!(
                "unknown variance center `{other}` (expected `swa` or `pretrained`)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwagConfig {
    /// Observation noise copied into the head.
    pub noise: f32,
    /// Lower bound applied to every variance at finalize.
    pub variance_floor: f64,
    pub center: VarianceCenter,
}

impl Default for SwagConfig {
    fn default() -> Self {
        Self {
            noise: 0.0,
            variance_floor: 0.0,
            center: VarianceCenter::Swa,
        }
    }
}

/// `max(mean_of_squares - mean^2, 0)`.
pub fn clamped_variance(mean_of_squares: f64, mean: f64) -> f64 {
    (mean_of_squares - mean * mean).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwagAccumulator {
    layout: HeadLayout,
    count: u64,
    mean: Vec<f64>,
    sq_dev: Vec<f64>,
}

impl SwagAccumulator {
    pub fn new(layout: HeadLayout) -> Self {
        Self {
            layout,
            count: 0,
            mean: vec![0.0; layout.len()],
            sq_dev: vec![0.0; layout.len()],
        }
    }

    /// Rebuilds an accumulator from stored first and second raw moments.
    pub fn from_moments(layout: HeadLayout, count: u64, mean: Vec<f64>, mean_of_squares: &[f64]) -> Result<Self> {
        if mean.len() != layout.len() || mean_of_squares.len() != layout.len() {
            return Err(Error::Shape(format!(
                "moments need {} values, got {} / {}",
                layout.len(),
                mean.len(),
                mean_of_squares.len()
            )));
        }
        let sq_dev = mean
            .iter()
            .zip(mean_of_squares)
            .map(|(&m, &s)| clamped_variance(s, m) * count as f64)
            .collect();
        Ok(Self {
            layout,
            count,
            mean,
            sq_dev,
        })
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Running snapshot mean `w_SWA`.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn mean_of_squares(&self) -> Vec<f64> {
        let t = self.count.max(1) as f64;
        self.mean.iter().zip(&self.sq_dev).map(|(m, s)| s / t + m * m).collect()
    }

    /// Population variance of the snapshots seen so far.
    pub fn variance(&self) -> Vec<f64> {
        let t = self.count.max(1) as f64;
        self.sq_dev.iter().map(|s| (s / t).max(0.0)).collect()
    }

    pub fn observe(&mut self, snapshot: &[f32]) -> Result<()> {
        if snapshot.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "snapshot has {} parameters, layout expects {}",
                snapshot.len(),
                self.layout.len()
            )));
        }
        if snapshot.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("snapshot {}", self.count)));
        }
        self.count += 1;
        let t = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.sq_dev.iter_mut()).zip(snapshot) {
            let x = f64::from(x);
            let delta = x - *m;
            *m += delta / t;
            *s += delta * (x - *m);
        }
        Ok(())
    }

    pub fn observe_stream(&mut self, stream: &SnapshotStream) -> Result<()> {
        if stream.layout != self.layout {
            return Err(Error::Shape(format!(
                "stream layout {:?} differs from accumulator layout {:?}",
                stream.layout, self.layout
            )));
        }
        stream.snapshots.iter().try_for_each(|s| self.observe(s))
    }

    /// Produces the Gaussian head: mean = `pretrained_mean`, diagonal variance
    /// from the snapshots.
    pub fn finalize(&self, pretrained_mean: &[f32], cfg: &SwagConfig) -> Result<GaussianHead> {
        if self.count < 2 {
            return Err(Error::InsufficientSnapshots(self.count));
        }
        if pretrained_mean.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "pretrained parameters have {} values, layout expects {}",
                pretrained_mean.len(),
                self.layout.len()
            )));
        }
        if cfg.variance_floor.is_nan() || cfg.variance_floor < 0.0 {
            return Err(Error::Config(format!("variance floor must be >= 0, got {}", cfg.variance_floor)));
        }
        let t = self.count as f64;
        let var: Vec<f32> = self
            .mean
            .iter()
            .zip(&self.sq_dev)
            .zip(pretrained_mean)
            .map(|((&m, &s), &p)| {
                let spread = (s / t).max(0.0);
                let v = match cfg.center {
                    VarianceCenter::Swa => spread,
                    VarianceCenter::Pretrained => spread + (m - f64::from(p)).powi(2),
                };
                v.max(cfg.variance_floor) as f32
            })
            .collect();
        GaussianHead::from_flat(self.layout.classes, self.layout.features, pretrained_mean, &var, cfg.noise)
    }
}

/// Ordered flattened parameter snapshots recorded during SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotStream {
    pub layout: HeadLayout,
    pub snapshots: Vec<Vec<f32>>,
}

pub fn snapshot_name(index: usize) -> String {
    format!("snap_{index:05}")
}

impl SnapshotStream {
    pub fn new(layout: HeadLayout) -> Self {
        Self {
            layout,
            snapshots: Vec::new(),
        }
    }

    pub fn push(&mut self, snapshot: Vec<f32>) -> Result<()> {
        if snapshot.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "snapshot has {} parameters, layout expects {}",
                snapshot.len(),
                self.layout.len()
            )));
        }
        self.snapshots.push(snapshot);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push(self.layout.to_tensor()?)?;
        for (i, s) in self.snapshots.iter().enumerate() {
            c.push(Tensor::new(snapshot_name(i), vec![s.len()], s.clone())?)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let layout = HeadLayout::from_tensor(c.tensor("layout")?)?;
        let mut stream = Self::new(layout);
        for entry in c.entries() {
            let name = entry.name();
            if !name.starts_with("snap_") {
                continue;
            }
            if name != snapshot_name(stream.len()) {
                return Err(Error::Format(FormatError::InvalidName(format!(
                    "expected `{}` next in the snapshot stream, found `{name}`",
                    snapshot_name(stream.len())
                ))));
            }
            match entry {
                Entry::F32(t) => stream.push(t.data().to_vec())?,
                Entry::U16(_) => {
                    return Err(FormatError::WrongType {
                        entry: name.to_string(),
                        expected: "f32",
                    }
                    .into())
                }
            }
        }
        Ok(stream)
    }
}
