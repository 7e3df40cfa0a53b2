//! Neighborhood statistics over a single cloud: PCA normals and the
//! neighbor-spacing medians used to pick the robust-kernel scale.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spatial::{NnIndex, PointCloud};

/// Neighborhood size for normal estimation.
pub const NORMAL_NEIGHBORS: usize = 30;
/// Neighborhood size for the spacing statistics.
pub const SPACING_NEIGHBORS: usize = 6;

/// Lower median: for an even count, the smaller of the two middle values.
/// Returns `None` on empty input.
pub fn lower_median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mid = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    Some(*m)
}

fn require_points(cloud: &PointCloud, needed: usize) -> Result<()> {
    if cloud.len() < needed {
        return Err(Error::TooFewPoints {
            needed,
            got: cloud.len(),
        });
    }
    Ok(())
}

/// PCA normals from the `k` nearest neighbors (the point itself included).
/// Each normal is oriented to point away from the cloud centroid.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    if k < 3 {
        return Err(Error::InvalidParameter(format!(
            "normal estimation needs k >= 3, got {k}"
        )));
    }
    require_points(cloud, k + 1)?;
    let index = NnIndex::build(cloud)?;
    let centroid = cloud.centroid().unwrap();
    let normals: Vec<Vector3<f64>> = cloud
        .points()
        .par_iter()
        .map(|p| {
            let nbrs = index.k_nearest(p, k, None);
            let mean: Vector3<f64> =
                nbrs.iter().map(|n| n.point).sum::<Vector3<f64>>() / nbrs.len() as f64;
            let cov = nbrs.iter().fold(Matrix3::zeros(), |acc, n| {
                let d = n.point - mean;
                acc + d * d.transpose()
            });
            let eig = SymmetricEigen::new(cov);
            let imin = eig.eigenvalues.imin();
            let mut normal: Vector3<f64> = eig.eigenvectors.column(imin).into_owned();
            normal.normalize_mut();
            if normal.dot(&(p - centroid)) < 0.0 {
                normal = -normal;
            }
            normal
        })
        .collect();
    PointCloud::with_normals(cloud.points().to_vec(), normals)
}

/// Median over points of the median distance to their `k` nearest
/// neighbors (self excluded).
pub fn median_neighbor_distance(cloud: &PointCloud, k: usize) -> Result<f64> {
    require_points(cloud, k + 1)?;
    let index = NnIndex::build(cloud)?;
    let mut per_point: Vec<f64> = cloud
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = index
                .k_nearest(p, k, Some(i))
                .iter()
                .map(|n| n.distance)
                .collect();
            lower_median(&mut d).unwrap_or(0.0)
        })
        .collect();
    Ok(lower_median(&mut per_point).unwrap_or(0.0))
}

/// Median over points `q` of the median distance from its `k` nearest
/// neighbors to the tangent plane at `q`.
pub fn median_plane_distance(cloud: &PointCloud, k: usize) -> Result<f64> {
    let normals = cloud.require_normals()?;
    require_points(cloud, k + 1)?;
    let index = NnIndex::build(cloud)?;
    let mut per_point: Vec<f64> = cloud
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let n = normals[i];
            let mut d: Vec<f64> = index
                .k_nearest(q, k, Some(i))
                .iter()
                .map(|s| (s.point - q).dot(&n).abs())
                .collect();
            lower_median(&mut d).unwrap_or(0.0)
        })
        .collect();
    Ok(lower_median(&mut per_point).unwrap_or(0.0))
}

/// Mean over points of the median distance to their `k` nearest neighbors.
pub fn mean_neighbor_median(cloud: &PointCloud, k: usize) -> Result<f64> {
    require_points(cloud, k + 1)?;
    let index = NnIndex::build(cloud)?;
    let per_point: Vec<f64> = cloud
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = index
                .k_nearest(p, k, Some(i))
                .iter()
                .map(|n| n.distance)
                .collect();
            lower_median(&mut d).unwrap_or(0.0)
        })
        .collect();
    Ok(per_point.iter().sum::<f64>() / per_point.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive k-NN distances (self excluded) sorted by (distance, index).
    fn brute_knn(points: &[Vector3<f64>], i: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, p)| ((p - points[i]).norm_squared(), j))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|x| x.1).collect()
    }

    fn brute_median(v: &mut Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[(v.len() - 1) / 2]
    }

    fn brute_spacing(points: &[Vector3<f64>], k: usize) -> f64 {
        let mut per: Vec<f64> = (0..points.len())
            .map(|i| {
                let mut d: Vec<f64> = brute_knn(points, i, k)
                    .into_iter()
                    .map(|j| (points[j] - points[i]).norm())
                    .collect();
                brute_median(&mut d)
            })
            .collect();
        brute_median(&mut per)
    }

    fn brute_plane(points: &[Vector3<f64>], normals: &[Vector3<f64>], k: usize) -> f64 {
        let mut per: Vec<f64> = (0..points.len())
            .map(|i| {
                let mut d: Vec<f64> = brute_knn(points, i, k)
                    .into_iter()
                    .map(|j| (points[j] - points[i]).dot(&normals[i]).abs())
                    .collect();
                brute_median(&mut d)
            })
            .collect();
        brute_median(&mut per)
    }

    #[test]
    fn lower_median_even_count() {
        assert_eq!(lower_median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert_eq!(lower_median(&mut [5.0]), Some(5.0));
        assert_eq!(lower_median(&mut []), None);
    }

    #[test]
    fn plane_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<Vector3<f64>> = (0..400)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0))
            .collect();
        let cloud = PointCloud::new(pts);
        for k in [3, 10, 30] {
            let with = estimate_normals(&cloud, k).unwrap();
            for n in with.normals().unwrap() {
                assert!((n.z.abs() - 1.0).abs() < 1e-6, "{n:?}");
            }
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        // Fibonacci sphere.
        let n = 2000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Vector3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect();
        let with = estimate_normals(&PointCloud::new(pts.clone()), 30).unwrap();
        for (p, nrm) in pts.iter().zip(with.normals().unwrap()) {
            let angle = p.normalize().dot(nrm).clamp(-1.0, 1.0).acos();
            assert!(angle < 5f64.to_radians(), "angle {angle}");
        }
    }

    #[test]
    fn too_few_points_for_normals() {
        let cloud = PointCloud::new(vec![Vector3::zeros(); 10]);
        assert!(matches!(
            estimate_normals(&cloud, 30),
            Err(Error::TooFewPoints { needed: 31, got: 10 })
        ));
    }

    #[test]
    fn spacing_on_lattice() {
        let h = 0.25;
        let pts: Vec<Vector3<f64>> = (0..50).map(|i| Vector3::new(i as f64 * h, 0.0, 0.0)).collect();
        let got = median_neighbor_distance(&PointCloud::new(pts.clone()), 6).unwrap();
        let want = brute_spacing(&pts, 6);
        assert_eq!(got, want);
        assert!(got >= h && got <= 3.0 * h);
        // Interior points see {h,h,2h,2h,3h,3h}: lower median is 2h.
        assert!((got - 2.0 * h).abs() < 1e-12);
    }

    #[test]
    fn spacing_of_coincident_points_is_zero() {
        let cloud = PointCloud::new(vec![Vector3::new(1.0, 1.0, 1.0); 7]);
        assert_eq!(median_neighbor_distance(&cloud, 6).unwrap(), 0.0);
    }

    #[test]
    fn spacing_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let pts: Vec<Vector3<f64>> = (0..100)
            .map(|_| Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
            .collect();
        let got = median_neighbor_distance(&PointCloud::new(pts.clone()), 6).unwrap();
        assert_eq!(got, brute_spacing(&pts, 6));

        // Permutation invariance.
        let mut shuffled = pts.clone();
        shuffled.reverse();
        assert_eq!(median_neighbor_distance(&PointCloud::new(shuffled), 6).unwrap(), got);
    }

    #[test]
    fn plane_distance_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let flat: Vec<Vector3<f64>> = (0..200)
            .map(|_| Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0.0))
            .collect();
        let up = vec![Vector3::z(); flat.len()];
        let cloud = PointCloud::with_normals(flat.clone(), up.clone()).unwrap();
        assert_eq!(median_plane_distance(&cloud, 6).unwrap(), 0.0);

        let eps = 1e-3;
        let jitter: Vec<Vector3<f64>> = flat
            .iter()
            .map(|p| p + Vector3::new(0.0, 0.0, rng.random_range(-eps / 2.0..eps / 2.0)))
            .collect();
        let cloud = PointCloud::with_normals(jitter.clone(), up.clone()).unwrap();
        let got = median_plane_distance(&cloud, 6).unwrap();
        assert!(got > 0.0 && got <= eps);
        assert_eq!(got, brute_plane(&jitter, &up, 6));

        let rnd: Vec<Vector3<f64>> = (0..120)
            .map(|_| Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
            .collect();
        let nrm: Vec<Vector3<f64>> = (0..120)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize())
            .collect();
        let cloud = PointCloud::with_normals(rnd.clone(), nrm.clone()).unwrap();
        assert_eq!(median_plane_distance(&cloud, 6).unwrap(), brute_plane(&rnd, &nrm, 6));
    }

    #[test]
    fn plane_distance_requires_normals() {
        let cloud = PointCloud::new(vec![Vector3::zeros(); 10]);
        assert!(matches!(median_plane_distance(&cloud, 6), Err(Error::MissingNormals)));
    }
}
