//! Benchmark plumbing: reports, file formats, normalization, synthetic
//! problems, metrics and the command-line front end.

pub mod cli;
pub mod io;
pub mod metrics;
pub mod normalize;
pub mod report;
pub mod shapes;
pub mod synth;

use crate::error::Result;
use crate::lie::RigidTransform;
use crate::p2plane::{icp_plane_classic, icp_robust_plane, P2PlaneConfig};
use crate::p2point::{icp_classic, icp_fast, icp_robust, NuSetting, P2PointConfig};
use crate::spatial::PointCloud;
use report::{Method, RegistrationReport};

/// Settings shared by every method.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub initial_transform: RigidTransform,
    pub nu_max: NuSetting,
    pub nu_min: NuSetting,
    /// Overrides the method's default stopping threshold.
    pub trans_eps: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            initial_transform: RigidTransform::identity(),
            nu_max: NuSetting::Auto,
            nu_min: NuSetting::Auto,
            trans_eps: None,
        }
    }
}

/// Runs `method` with default parameters apart from `opts`.
pub fn run_method(method: Method, src: &PointCloud, tgt: &PointCloud, opts: &RunOptions) -> Result<RegistrationReport> {
    if method.needs_normals() {
        let mut cfg = P2PlaneConfig {
            nu_max: opts.nu_max,
            nu_min: opts.nu_min,
            initial_transform: opts.initial_transform,
            ..Default::default()
        };
        if let Some(eps) = opts.trans_eps {
            cfg.trans_eps = eps;
        }
        return match method {
            Method::IcpPl => icp_plane_classic(src, tgt, &cfg),
            _ => icp_robust_plane(src, tgt, &cfg),
        };
    }
    let mut cfg = P2PointConfig {
        nu_max: opts.nu_max,
        nu_min: opts.nu_min,
        initial_transform: opts.initial_transform,
        ..Default::default()
    };
    if let Some(eps) = opts.trans_eps {
        cfg.trans_eps = eps;
    }
    match method {
        Method::Icp => icp_classic(src, tgt, &cfg),
        Method::FastIcp => icp_fast(src, tgt, &cfg),
        _ => icp_robust(src, tgt, &cfg),
    }
}
