//! Small generated datasets for tests, benchmarks and the CLI `synth` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::fit::Example;
use crate::grid::{DesignMatrix, Grid};
use crate::head::GaussianHead;
use crate::io::LabelMap;

/// Two-class Gaussian blobs in two feature dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub height: usize,
    pub width: usize,
    /// Class 0 is centred at `-center` in both coordinates, class 1 at `+center`.
    pub center: f32,
    pub std: f32,
    /// Added to every feature vector; non-zero gives an out-of-distribution set.
    pub shift: [f32; 2],
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            center: 1.5,
            std: 0.5,
            shift: [0.0, 0.0],
        }
    }
}

impl BlobSpec {
    pub fn shifted(mut self, shift: [f32; 2]) -> Self {
        self.shift = shift;
        self
    }
}

/// `images` feature/label pairs drawn from `spec`; labels are i.i.d. fair coins.
pub fn blobs(spec: &BlobSpec, images: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = spec.height * spec.width;
    (0..images)
        .map(|_| {
            let mut feats = Vec::with_capacity(pixels * 2);
            let mut labels = Vec::with_capacity(pixels);
            for _ in 0..pixels {
                let class = rng.random_range(0..2u16);
                let c = if class == 0 { -spec.center } else { spec.center };
                for s in spec.shift {
                    let z: f32 = rng.sample(StandardNormal);
                    feats.push(c + spec.std * z + s);
                }
                labels.push(class);
            }
            let design = Grid::new(spec.height, spec.width, 2, feats).expect("blob shape");
            let label = LabelMap::new(spec.height, spec.width, labels).expect("blob labels");
            (design, label)
        })
        .collect()
}

/// Random design matrix and head with bounded entries, for timing and
/// property tests.
pub fn random_problem(
    height: usize,
    width: usize,
    features: usize,
    classes: usize,
    seed: u64,
) -> (DesignMatrix, GaussianHead) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, lo: f32, hi: f32| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>();
    let design = Grid::new(height, width, features, draw(height * width * features, -1.0, 1.0)).expect("shape");
    let head = GaussianHead::new(
        classes,
        features,
        draw(classes * features, -1.0, 1.0),
        draw(classes, -0.5, 0.5),
        draw(classes * features, 0.0, 0.05),
        draw(classes, 0.0, 0.05),
        0.0,
    )
    .expect("valid head");
    (design, head)
}
