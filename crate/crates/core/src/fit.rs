//! Final-layer trainer: SGD with linear warmup, OHEM cross-entropy and weight
//! decay, recording parameter snapshots for SWAG after warmup.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{DesignMatrix, Grid};
use crate::head::GaussianHead;
use crate::io::{read_container, write_container, Container, LabelMap, DEFAULT_IGNORE_VALUE};
use crate::swag::{HeadLayout, SnapshotStream};
use crate::uncertainty::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub base_lr: f64,
    /// Multiplies the parameters in the update, `w <- w - lr * (grad + wd * w)`.
    pub weight_decay: f64,
    pub momentum: f64,
    pub snapshot_every: usize,
    /// Pixels whose true-class probability is below this are "hard".
    pub ohem_threshold: f64,
    /// Minimum retained pixels per batch; `None` means batch pixels / 16.
    pub ohem_min_kept: Option<usize>,
    /// Images per iteration.
    pub batch_size: usize,
    pub seed: u64,
    pub ignore_value: u16,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            total_iters: 5000,
            warmup_iters: 1000,
            base_lr: 0.01,
            weight_decay: 1e-4,
            momentum: 0.0,
            snapshot_every: 50,
            ohem_threshold: 0.7,
            ohem_min_kept: None,
            batch_size: 1,
            seed: 0,
            ignore_value: DEFAULT_IGNORE_VALUE,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.total_iters == 0 {
            return bad("total_iters must be >= 1".into());
        }
        if self.warmup_iters > self.total_iters {
            return bad(format!(
                "warmup_iters ({}) exceeds total_iters ({})",
                self.warmup_iters, self.total_iters
            ));
        }
        if self.snapshot_every == 0 {
            return bad("snapshot_every must be >= 1".into());
        }
        if !(self.ohem_threshold > 0.0 && self.ohem_threshold <= 1.0) {
            return bad(format!("ohem_threshold must lie in (0, 1], got {}", self.ohem_threshold));
        }
        if self.ohem_min_kept == Some(0) {
            return bad("ohem_min_kept must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    /// Expected number of recorded snapshots.
    pub fn snapshot_count(&self) -> usize {
        (self.total_iters - self.warmup_iters) / self.snapshot_every
    }

    pub fn ohem(&self) -> OhemParams {
        OhemParams {
            threshold: self.ohem_threshold,
            min_kept: self.ohem_min_kept,
        }
    }

    /// Flat `key = value` rendering, one field per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let min_kept = self
            .ohem_min_kept
            .map_or_else(|| "auto".to_string(), |v| v.to_string());
        let _ = writeln!(s, "total_iters = {}", self.total_iters);
        let _ = writeln!(s, "warmup_iters = {}", self.warmup_iters);
        let _ = writeln!(s, "base_lr = {}", self.base_lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "snapshot_every = {}", self.snapshot_every);
        let _ = writeln!(s, "ohem_threshold = {}", self.ohem_threshold);
        let _ = writeln!(s, "ohem_min_kept = {min_kept}");
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "ignore_value = {}", self.ignore_value);
        s
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
        }
        match key {
            "total_iters" => self.total_iters = parse(key, value)?,
            "warmup_iters" => self.warmup_iters = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "snapshot_every" => self.snapshot_every = parse(key, value)?,
            "ohem_threshold" => self.ohem_threshold = parse(key, value)?,
            "ohem_min_kept" => {
                self.ohem_min_kept = if value == "auto" { None } else { Some(parse(key, value)?) }
            }
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "ignore_value" => self.ignore_value = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

/// Learning rate for 0-based iteration `iter`.
pub fn lr_at(iter: usize, cfg: &FitConfig) -> f64 {
    if iter < cfg.warmup_iters {
        cfg.base_lr * (iter + 1) as f64 / cfg.warmup_iters as f64
    } else {
        cfg.base_lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhemParams {
    pub threshold: f64,
    pub min_kept: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OhemLoss {
    pub loss: f64,
    /// d loss / d logits, pixels x K.
    pub grad: Vec<f64>,
    pub kept: usize,
}

/// OHEM cross-entropy over `labels.len()` pixels with `classes` logits each.
pub fn ohem_ce(logits: &[f64], classes: usize, labels: &LabelMap, params: OhemParams) -> Result<OhemLoss> {
    let n = labels.data().len();
    if classes == 0 || logits.len() != n * classes {
        return Err(Error::Shape(format!(
            "logits hold {} values, expected {} pixels x {classes} classes",
            logits.len(),
            n
        )));
    }
    labels.validate_classes(classes)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training logits".into()));
    }

    let mut grad = vec![0.0; n * classes];
    // (loss, pixel) for every labelled pixel; grad temporarily holds softmax.
    let mut losses = Vec::with_capacity(n);
    for (i, (&y, row)) in labels.data().iter().zip(logits.chunks_exact(classes)).enumerate() {
        if labels.is_ignored(y) {
            continue;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&l| (l - m).exp()).sum();
        let lse = m + sum.ln();
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gj, &l) in g.iter_mut().zip(row) {
            *gj = (l - lse).exp();
        }
        losses.push((lse - row[y as usize], i));
    }
    if losses.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let min_kept = params.min_kept.unwrap_or(n / 16).max(1).min(losses.len());
    // p < threshold  <=>  loss > -ln(threshold)
    let cut = -params.threshold.ln();
    let hard = losses.iter().filter(|(l, _)| *l > cut).count();
    let keep = hard.max(min_kept);
    losses.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut retained = vec![false; n];
    for &(_, i) in &losses[..keep] {
        retained[i] = true;
    }
    let loss = losses[..keep].iter().map(|(l, _)| l).sum::<f64>() / keep as f64;
    let scale = 1.0 / keep as f64;
    for (i, g) in grad.chunks_exact_mut(classes).enumerate() {
        if retained[i] {
            let y = labels.data()[i] as usize;
            g[y] -= 1.0;
            g.iter_mut().for_each(|v| *v *= scale);
        } else {
            g.fill(0.0);
        }
    }
    Ok(OhemLoss { loss, grad, kept: keep })
}

/// One training example: per-pixel features and their labels.
pub type Example = (DesignMatrix, LabelMap);

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Final parameters as a point head (zero variances).
    pub head: GaussianHead,
    pub snapshots: SnapshotStream,
    /// OHEM loss per iteration.
    pub losses: Vec<f64>,
}

fn check_dataset(dataset: &[Example], features: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let ignore = dataset[0].1.ignore_value();
    for (i, (x, y)) in dataset.iter().enumerate() {
        if x.channels() != features {
            return Err(Error::Shape(format!(
                "example {i} has {} features, head expects {features}",
                x.channels()
            )));
        }
        if x.height() != y.height() || x.width() != y.width() {
            return Err(Error::Shape(format!(
                "example {i}: features {}x{} vs labels {}x{}",
                x.height(),
                x.width(),
                y.height(),
                y.width()
            )));
        }
        if y.ignore_value() != ignore {
            return Err(Error::Config("all label maps must share one ignore value".into()));
        }
        x.check_finite(&format!("example {i} features"))?;
    }
    Ok(())
}

/// Runs SGD on the head means only, recording a snapshot every
/// `snapshot_every` iterations once warmup has finished.
pub fn sgd_fit(dataset: &[Example], init: &GaussianHead, cfg: &FitConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    let (k, d) = (init.classes(), init.features());
    check_dataset(dataset, d)?;
    for (_, y) in dataset {
        y.validate_classes(k)?;
    }

    let layout = HeadLayout::new(k, d);
    let mut params: Vec<f64> = init.flat_mean().iter().map(|&v| f64::from(v)).collect();
    let mut velocity = vec![0.0f64; params.len()];
    let mut grad_params = vec![0.0f64; params.len()];
    let mut snapshots = SnapshotStream::new(layout);
    let mut losses = Vec::with_capacity(cfg.total_iters);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let ignore = dataset[0].1.ignore_value();
    let kd = k * d;

    for iter in 0..cfg.total_iters {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let pixels: usize = batch.iter().map(|&b| dataset[b].0.pixels()).sum();
        let mut logits = Vec::with_capacity(pixels * k);
        let mut labels = Vec::with_capacity(pixels);
        for &b in &batch {
            let (x, y) = &dataset[b];
            for p in 0..x.pixels() {
                let f = x.pixel(p);
                for j in 0..k {
                    let w = &params[j * d..(j + 1) * d];
                    let dot: f64 = f.iter().zip(w).map(|(&a, &b)| f64::from(a) * b).sum();
                    logits.push(dot + params[kd + j]);
                }
            }
            labels.extend_from_slice(y.data());
        }
        let labels = LabelMap::new(pixels, 1, labels)?.with_ignore_value(ignore);
        let out = ohem_ce(&logits, k, &labels, cfg.ohem())?;
        losses.push(out.loss);

        grad_params.fill(0.0);
        let mut offset = 0;
        for &b in &batch {
            let x = &dataset[b].0;
            for p in 0..x.pixels() {
                let g = &out.grad[(offset + p) * k..(offset + p + 1) * k];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let f = x.pixel(p);
                for j in 0..k {
                    let gw = &mut grad_params[j * d..(j + 1) * d];
                    for (acc, &xv) in gw.iter_mut().zip(f) {
                        *acc += g[j] * f64::from(xv);
                    }
                    grad_params[kd + j] += g[j];
                }
            }
            offset += x.pixels();
        }

        let lr = lr_at(iter, cfg);
        for ((w, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad_params) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= lr * *v;
        }
        if params.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!("parameters diverged at iteration {iter}")));
        }

        if iter >= cfg.warmup_iters && (iter + 1 - cfg.warmup_iters).is_multiple_of(cfg.snapshot_every) {
            snapshots.push(params.iter().map(|&w| w as f32).collect())?;
        }
    }

    let flat: Vec<f32> = params.iter().map(|&w| w as f32).collect();
    let head = GaussianHead::point(k, d, flat[..kd].to_vec(), flat[kd..].to_vec())?;
    Ok(FitOutcome {
        head,
        snapshots,
        losses,
    })
}

/// Fraction of labelled pixels whose argmax of `head`'s point logits matches.
pub fn pixel_accuracy(dataset: &[Example], head: &GaussianHead) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (x, y) in dataset {
        let logits = crate::head::point_logits(x, head)?;
        for (row, &label) in logits.data().chunks_exact(head.classes()).zip(y.data()) {
            if y.is_ignored(label) {
                continue;
            }
            total += 1;
            correct += usize::from(argmax(row) == label as usize);
        }
    }
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(correct as f64 / total as f64)
}

pub fn features_file(index: usize) -> String {
    format!("features_{index:04}.eusg")
}

pub fn labels_file(index: usize) -> String {
    format!("labels_{index:04}.eusg")
}

/// Loads the first f32 entry of a features container as a design matrix.
pub fn load_features(path: impl AsRef<Path>) -> Result<DesignMatrix> {
    let path = path.as_ref();
    let c = read_container(path)?;
    let t = match c.tensor("features") {
        Ok(t) => t,
        Err(_) => c
            .entries()
            .iter()
            .find_map(|e| match e {
                crate::io::Entry::F32(t) => Some(t),
                _ => None,
            })
            .ok_or_else(|| Error::Shape(format!("{} holds no f32 entry", path.display())))?,
    };
    Grid::from_tensor(t)
}

pub fn load_labels(path: impl AsRef<Path>, ignore_value: u16) -> Result<LabelMap> {
    let c = read_container(path)?;
    Ok(LabelMap::from_entry(c.u16_tensor("labels")?)?.with_ignore_value(ignore_value))
}

/// Reads `features_XXXX.eusg` / `labels_XXXX.eusg` pairs, numbered from 0.
pub fn load_dataset(dir: impl AsRef<Path>, ignore_value: u16) -> Result<Vec<Example>> {
    load_split_dataset(dir.as_ref(), dir.as_ref(), ignore_value)
}

/// As [`load_dataset`], with features and labels in separate directories.
pub fn load_split_dataset(
    features_dir: impl AsRef<Path>,
    labels_dir: impl AsRef<Path>,
    ignore_value: u16,
) -> Result<Vec<Example>> {
    let (fdir, ldir) = (features_dir.as_ref(), labels_dir.as_ref());
    for dir in [fdir, ldir] {
        if !dir.is_dir() {
            return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
        }
    }
    let mut out = Vec::new();
    loop {
        let f = fdir.join(features_file(out.len()));
        if !f.exists() {
            break;
        }
        let l = ldir.join(labels_file(out.len()));
        out.push((load_features(&f)?, load_labels(&l, ignore_value)?));
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no {} in {}", features_file(0), fdir.display())));
    }
    Ok(out)
}

pub fn save_dataset(dir: impl AsRef<Path>, dataset: &[Example]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (x, y)) in dataset.iter().enumerate() {
        let mut fc = Container::new();
        fc.push(x.to_tensor("features")?)?;
        write_container(dir.join(features_file(i)), &fc)?;
        let mut lc = Container::new();
        lc.push(y.to_entry("labels")?)?;
        write_container(dir.join(labels_file(i)), &lc)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg_ohem(threshold: f64, min_kept: usize) -> OhemParams {
        OhemParams {
            threshold,
            min_kept: Some(min_kept),
        }
    }

    #[test]
    fn warmup_schedule() {
        let cfg = FitConfig::default();
        assert!((lr_at(499, &cfg) - 0.005).abs() < 1e-15);
        assert_eq!(lr_at(999, &cfg), 0.01);
        assert_eq!(lr_at(3000, &cfg), 0.01);
        assert_eq!(lr_at(0, &cfg), 0.01 / 1000.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = FitConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.warmup_iters = 6000;
        assert!(cfg.validate().is_err());
        let cfg = FitConfig {
            ohem_threshold: 0.0,
            ..FitConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = FitConfig {
            snapshot_every: 0,
            ..FitConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = FitConfig {
            base_lr: 0.05,
            ohem_min_kept: Some(12),
            seed: 9,
            ..FitConfig::default()
        };
        let mut back = FitConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.apply_kv("nonsense = 1").is_err());
        assert!(back.apply_kv("seed 4").is_err());
    }

    #[test]
    fn confident_pixels_keep_min_kept() {
        // logits strongly favour the true class: p ~ 1 everywhere
        let logits = vec![40.0, 0.0, 0.0, 40.0, 40.0, 0.0];
        let labels = LabelMap::new(3, 1, vec![0, 1, 0]).unwrap();
        let out = ohem_ce(&logits, 2, &labels, cfg_ohem(0.7, 1)).unwrap();
        assert_eq!(out.kept, 1);
        assert!(out.loss < 1e-15);
    }

    #[test]
    fn hard_pixels_retained() {
        // two classes, true class 0; logit gap chosen so CE = target loss
        let targets = [0.1f64, 0.2, 0.9, 1.3];
        let gap = |l: f64| -l.exp_m1().ln();
        let logits: Vec<f64> = targets.iter().flat_map(|&l| [gap(l), 0.0]).collect();
        let labels = LabelMap::new(2, 2, vec![0; 4]).unwrap();
        let out = ohem_ce(&logits, 2, &labels, cfg_ohem(0.7, 1)).unwrap();
        // brute force: keep pixels with p = exp(-loss) < 0.7
        let kept: Vec<f64> = targets.iter().cloned().filter(|l| (-l).exp() < 0.7).collect();
        let brute = kept.iter().sum::<f64>() / kept.len() as f64;
        assert_eq!(out.kept, 2);
        assert!((out.loss - brute).abs() < 1e-12);
        assert!((out.loss - 1.1).abs() < 1e-12);
        // min_kept above the hard count pulls in the next-largest loss
        let out = ohem_ce(&logits, 2, &labels, cfg_ohem(0.7, 3)).unwrap();
        assert_eq!(out.kept, 3);
        assert!((out.loss - (0.2 + 0.9 + 1.3) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_never_kept() {
        let logits = vec![0.0, 5.0, 0.0, 5.0];
        let labels = LabelMap::new(1, 2, vec![255, 0]).unwrap();
        let out = ohem_ce(&logits, 2, &labels, cfg_ohem(1.0, 2)).unwrap();
        assert_eq!(out.kept, 1);
        assert_eq!(&out.grad[..2], &[0.0, 0.0]);
        let all_ignored = LabelMap::new(1, 2, vec![255, 255]).unwrap();
        assert!(matches!(
            ohem_ce(&logits, 2, &all_ignored, cfg_ohem(0.7, 1)),
            Err(Error::EmptyBatch)
        ));
        let bad = LabelMap::new(1, 2, vec![2, 0]).unwrap();
        assert!(matches!(ohem_ce(&logits, 2, &bad, cfg_ohem(0.7, 1)), Err(Error::UnknownClass { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let labels = LabelMap::new(2, 2, (0..4).map(|_| rng.random_range(0..3)).collect()).unwrap();
            let p = cfg_ohem(0.7, 2);
            let out = ohem_ce(&logits, 3, &labels, p).unwrap();
            let h = 1e-6;
            for i in 0..logits.len() {
                let mut up = logits.clone();
                let mut dn = logits.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (ohem_ce(&up, 3, &labels, p).unwrap().loss - ohem_ce(&dn, 3, &labels, p).unwrap().loss) / (2.0 * h);
                let g = out.grad[i];
                assert!((fd - g).abs() <= 1e-4 * g.abs().max(fd.abs()).max(1e-6), "{fd} vs {g}");
            }
        }
    }

    fn tiny_dataset() -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..3)
            .map(|_| {
                let labels: Vec<u16> = (0..16).map(|_| rng.random_range(0..2)).collect();
                let feats: Vec<f32> = labels
                    .iter()
                    .flat_map(|&l| {
                        let c = if l == 0 { -1.0 } else { 1.0 };
                        [c + rng.random_range(-0.3..0.3), c + rng.random_range(-0.3..0.3)]
                    })
                    .collect();
                (Grid::new(4, 4, 2, feats).unwrap(), LabelMap::new(4, 4, labels).unwrap())
            })
            .collect()
    }

    #[test]
    fn snapshot_count_and_determinism() {
        let data = tiny_dataset();
        let cfg = FitConfig {
            total_iters: 530,
            warmup_iters: 100,
            snapshot_every: 50,
            base_lr: 0.1,
            ..FitConfig::default()
        };
        let init = GaussianHead::zeros(2, 2).unwrap();
        let a = sgd_fit(&data, &init, &cfg).unwrap();
        let b = sgd_fit(&data, &init, &cfg).unwrap();
        assert_eq!(a.snapshots.len(), (530 - 100) / 50);
        assert_eq!(a.snapshots.len(), cfg.snapshot_count());
        assert_eq!(a.snapshots, b.snapshots);
        assert_eq!(a.losses.len(), 530);
        assert!(pixel_accuracy(&data, &a.head).unwrap() > 0.95);
    }

    #[test]
    fn heavy_decay_shrinks_weights() {
        let data = tiny_dataset();
        let init = GaussianHead::point(2, 2, vec![1.0, -2.0, 0.5, 3.0], vec![0.5, -0.5]).unwrap();
        let cfg = FitConfig {
            total_iters: 200,
            warmup_iters: 10,
            weight_decay: 1e3,
            base_lr: 1e-4,
            ..FitConfig::default()
        };
        let out = sgd_fit(&data, &init, &cfg).unwrap();
        let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(norm(&out.head.flat_mean()) < norm(&init.flat_mean()));
    }

    #[test]
    fn dataset_files_round_trip() {
        let data = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path(), DEFAULT_IGNORE_VALUE).unwrap();
        assert_eq!(back, data);
        assert!(load_dataset(dir.path().join("missing"), 255).is_err());
    }
}
