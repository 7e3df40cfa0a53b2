//! Seeded partial-overlap problems with normal-direction noise and
//! uniform outliers.
//!
//! Every random quantity comes from ChaCha8 seeded with `spec.seed`, one
//! stream per purpose (see [`streams`]), so enabling outliers never changes
//! the noise and vice versa.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::RigidTransform;
use crate::spatial::{mean_neighbor_median, PointCloud, SPACING_NEIGHBORS};

pub mod streams {
    pub const GROUND_TRUTH: u64 = 0;
    pub const SOURCE_NOISE: u64 = 1;
    pub const TARGET_NOISE: u64 = 2;
    pub const OUTLIERS: u64 = 3;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    None,
    /// Gaussian along the normal, sigma = mean over points of the median
    /// distance to their six nearest neighbors.
    NeighborMedian,
}

impl NoiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::None => "none",
            NoiseMode::NeighborMedian => "neighbor-median",
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseMode::None),
            "neighbor-median" => Ok(NoiseMode::NeighborMedian),
            other => Err(Error::InvalidParameter(format!("unknown noise mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroundTruth {
    /// Rotation about a uniform random axis by an angle uniform in
    /// `[0, max_angle]` (radians), translation uniform in the cube
    /// `[-max_translation, max_translation]^3`.
    Random { max_angle: f64, max_translation: f64 },
    Given(RigidTransform),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub overlap_front_fraction: f64,
    pub overlap_back_fraction: f64,
    pub noise_sigma_mode: NoiseMode,
    /// Outliers added to the source, as a fraction of its point count.
    pub outlier_fraction: f64,
    pub seed: u64,
    pub ground_truth: GroundTruth,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            overlap_front_fraction: 0.6,
            overlap_back_fraction: 0.47,
            noise_sigma_mode: NoiseMode::None,
            outlier_fraction: 0.0,
            seed: 0,
            ground_truth: GroundTruth::Random {
                max_angle: 15f64.to_radians(),
                max_translation: 0.05,
            },
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("front", self.overlap_front_fraction),
            ("back", self.overlap_back_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidParameter(format!("{name} fraction must lie in (0, 1], got {f}")));
            }
        }
        if !(self.outlier_fraction >= 0.0) || !self.outlier_fraction.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "outlier fraction must be non-negative, got {}",
                self.outlier_fraction
            )));
        }
        if let GroundTruth::Random { max_angle, max_translation } = self.ground_truth {
            if !(max_angle >= 0.0) || !(max_translation >= 0.0) {
                return Err(Error::InvalidParameter("random ground-truth bounds must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn resolve_ground_truth(&self) -> RigidTransform {
        match self.ground_truth {
            GroundTruth::Given(t) => t,
            GroundTruth::Random { max_angle, max_translation } => {
                random_transform(&mut stream_rng(self.seed, streams::GROUND_TRUTH), max_angle, max_translation)
            }
        }
    }
}

pub fn random_transform(rng: &mut impl Rng, max_angle: f64, max_translation: f64) -> RigidTransform {
    let axis = loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-6 {
            break v / n;
        }
    };
    let angle = rng.random::<f64>() * max_angle;
    let t = Vector3::from_fn(|_, _| (2.0 * rng.random::<f64>() - 1.0) * max_translation);
    RigidTransform::from_axis_angle(&axis, angle, t)
}

fn fraction_count(n: usize, f: f64, which: &str) -> Result<usize> {
    let k = (f * n as f64).round() as usize;
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "{which} fraction {f} of {n} points selects {k} points"
        )));
    }
    Ok(k)
}

/// Source = leading fraction of `cloud`; target = trailing fraction mapped
/// by the ground truth.
pub fn make_partial_overlap(cloud: &PointCloud, spec: &SyntheticSpec) -> Result<(PointCloud, PointCloud, RigidTransform)> {
    spec.validate()?;
    cloud.ensure_non_empty()?;
    let n = cloud.len();
    let front = fraction_count(n, spec.overlap_front_fraction, "front")?;
    let back = fraction_count(n, spec.overlap_back_fraction, "back")?;
    let truth = spec.resolve_ground_truth();
    Ok((cloud.slice(0, front), cloud.slice(n - back, n).transformed(&truth), truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudRole {
    Source,
    Target,
}

/// The neighbor-median noise scale of `cloud`.
pub fn noise_sigma(cloud: &PointCloud) -> Result<f64> {
    mean_neighbor_median(cloud, SPACING_NEIGHBORS)
}

/// Noise on either role; outliers only on the source. Outliers are uniform
/// in the bounding box of the (noisy) cloud and have no normals, so the
/// result drops normals whenever outliers are added.
pub fn add_noise_and_outliers(cloud: &PointCloud, spec: &SyntheticSpec, role: CloudRole) -> Result<PointCloud> {
    spec.validate()?;
    let mut out = cloud.clone();
    if spec.noise_sigma_mode == NoiseMode::NeighborMedian {
        let normals = cloud.require_normals()?;
        let sigma = noise_sigma(cloud)?;
        let stream = match role {
            CloudRole::Source => streams::SOURCE_NOISE,
            CloudRole::Target => streams::TARGET_NOISE,
        };
        let mut rng = stream_rng(spec.seed, stream);
        let dist = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let points: Vec<Vector3<f64>> = cloud
            .points()
            .iter()
            .zip(normals)
            .map(|(p, n)| p + n * dist.sample(&mut rng))
            .collect();
        out = PointCloud::with_normals(points, normals.to_vec())?;
    }
    if role == CloudRole::Source && spec.outlier_fraction > 0.0 {
        let count = (spec.outlier_fraction * out.len() as f64).round() as usize;
        if count > 0 {
            out.ensure_non_empty()?;
            let (lo, hi) = out.bounding_box().unwrap();
            let mut rng = stream_rng(spec.seed, streams::OUTLIERS);
            let (mut points, _) = out.into_parts();
            for _ in 0..count {
                points.push(Vector3::from_fn(|k, _| lo[k] + rng.random::<f64>() * (hi[k] - lo[k])));
            }
            out = PointCloud::new(points);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    pub source: PointCloud,
    pub target: PointCloud,
    pub truth: RigidTransform,
}

/// Partial overlap, then noise on both clouds and outliers on the source.
pub fn generate(cloud: &PointCloud, spec: &SyntheticSpec) -> Result<SyntheticProblem> {
    let (src, tgt, truth) = make_partial_overlap(cloud, spec)?;
    Ok(SyntheticProblem {
        source: add_noise_and_outliers(&src, spec, CloudRole::Source)?,
        target: add_noise_and_outliers(&tgt, spec, CloudRole::Target)?,
        truth,
    })
}
