//! Point containers, exact nearest-neighbor search and neighborhood statistics.

mod cloud;
mod kdtree;
mod stats;

pub use cloud::{PointCloud, NORMAL_TOL};
pub use kdtree::{Neighbor, NnIndex};
pub use stats::{
    estimate_normals, lower_median, mean_neighbor_median, median_neighbor_distance,
    median_plane_distance, NORMAL_NEIGHBORS, SPACING_NEIGHBORS,
};
