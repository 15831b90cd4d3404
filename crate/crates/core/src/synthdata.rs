//! Seeded synthetic two-group populations.
//!
//! Both generators split each side into a privileged group (label 0) and an
//! underprivileged group (label 1). Labels are balanced; for odd counts the
//! extra point goes to label 0, and label-0 points come first.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{GroupLabels, LabeledDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Two-component Gaussian mixtures; group 0 of X sits next to group 0 of Y.
    Gaussians,
    /// Group 0 is a centered Gaussian blob, group 1 a noisy ring.
    Circles,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussians" => Ok(Self::Gaussians),
            "circles" => Ok(Self::Circles),
            other => Err(Error::invalid(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub dataset: DatasetKind,
    pub n_x: usize,
    pub n_y: usize,
    pub seed: u64,
    /// Per-coordinate variance of the Gaussians clusters.
    pub cluster_variance: f64,
    /// Per-coordinate variance of the Circles blob.
    pub blob_variance: f64,
    pub radius: f64,
    /// Standard deviation of the radial noise, truncated at three deviations.
    pub radial_noise: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self::gaussians(250, 25, 0)
    }
}

/// X-side component means, then Y-side, for the Gaussians law.
const GAUSSIAN_MEANS: [[[f64; 2]; 2]; 2] = [[[-2.0, 0.0], [2.0, 0.0]], [[-2.0, 0.5], [2.0, 0.5]]];

impl GenSpec {
    pub fn gaussians(n_x: usize, n_y: usize, seed: u64) -> Self {
        Self {
            dataset: DatasetKind::Gaussians,
            n_x,
            n_y,
            seed,
            cluster_variance: 0.25,
            blob_variance: 0.3,
            radius: 2.0,
            radial_noise: 0.05,
        }
    }

    pub fn circles(n_x: usize, n_y: usize, seed: u64) -> Self {
        Self {
            dataset: DatasetKind::Circles,
            ..Self::gaussians(n_x, n_y, seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn with_sizes(&self, n_x: usize, n_y: usize) -> Self {
        Self {
            n_x,
            n_y,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x < 2 || self.n_y < 2 {
            return Err(Error::invalid(format!(
                "sample counts must be >= 2, got n_x={} n_y={}",
                self.n_x, self.n_y
            )));
        }
        let positive = [self.cluster_variance, self.blob_variance, self.radius];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("variances and radius must be positive"));
        }
        if !(self.radial_noise.is_finite() && self.radial_noise >= 0.0) {
            return Err(Error::invalid("radial noise must be >= 0"));
        }
        Ok(())
    }

    /// Generates both sides according to `dataset`.
    pub fn generate(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self.dataset {
            DatasetKind::Gaussians => gen_gaussians(self),
            DatasetKind::Circles => gen_circles(self),
        }
    }
}

/// Independent seed for sub-stream `stream` of `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

fn side_rng(seed: u64, side: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(side);
    rng
}

fn balanced_labels(n: usize) -> Result<GroupLabels> {
    let first = n.div_ceil(2);
    GroupLabels::new((0..n).map(|i| usize::from(i >= first)).collect(), 2)
}

fn build(rows: Vec<[f64; 2]>, labels: GroupLabels) -> Result<LabeledDataset> {
    let points = DMatrix::from_fn(rows.len(), 2, |i, k| rows[i][k]);
    LabeledDataset::new(points, labels)
}

pub fn gen_gaussians(spec: &GenSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let std = spec.cluster_variance.sqrt();
    let side = |n: usize, index: usize| -> Result<LabeledDataset> {
        let mut rng = side_rng(spec.seed, index as u64);
        let labels = balanced_labels(n)?;
        let rows = labels
            .labels()
            .iter()
            .map(|&l| {
                let [mx, my] = GAUSSIAN_MEANS[index][l];
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                [mx + std * dx, my + std * dy]
            })
            .collect();
        build(rows, labels)
    };
    Ok((side(spec.n_x, 0)?, side(spec.n_y, 1)?))
}

pub fn gen_circles(spec: &GenSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let std = spec.blob_variance.sqrt();
    let noise = Normal::new(0.0, spec.radial_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let side = |n: usize, index: u64| -> Result<LabeledDataset> {
        let mut rng = side_rng(spec.seed, index);
        let labels = balanced_labels(n)?;
        let rows = labels
            .labels()
            .iter()
            .map(|&l| {
                if l == 0 {
                    let dx: f64 = rng.sample(StandardNormal);
                    let dy: f64 = rng.sample(StandardNormal);
                    [std * dx, std * dy]
                } else {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = loop {
                        let e = noise.sample(&mut rng);
                        if e.abs() <= 3.0 * spec.radial_noise {
                            break spec.radius + e;
                        }
                    };
                    [r * angle.cos(), r * angle.sin()]
                }
            })
            .collect();
        build(rows, labels)
    };
    Ok((side(spec.n_x, 0)?, side(spec.n_y, 1)?))
}

/// Fresh draw from the law of `spec` for trial `trial`; trials use
/// independent seed streams of `spec.seed`.
pub fn resample(spec: &GenSpec, trial: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.with_seed(derive_seed(spec.seed, trial)).generate()
}
