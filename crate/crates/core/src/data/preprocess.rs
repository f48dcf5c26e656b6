use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index::sample as sample_indices;

use super::{GroundTruth, PointGrid, RgbImage, Sample};
use crate::error::{Error, Result};
use crate::seed;

/// Inlier distance for background plane removal, in scene units.
pub const RANSAC_THRESHOLD: f64 = 0.005;
pub const RANSAC_ITERATIONS: usize = 256;

/// Replaces every absent modality with an all-ones tensor of the sample's
/// resolution. The modality mask is left untouched.
pub fn fill_pseudo(s: &Sample) -> Sample {
    let (h, w) = (s.height(), s.width());
    let mut out = s.clone();
    if out.rgb.is_none() {
        out.rgb = Some(RgbImage::filled(h, w, 1.0));
    }
    if out.pc.is_none() {
        out.pc = Some(PointGrid::filled(h, w, 1.0));
    }
    out
}

/// Plane `n·p + d = 0` with unit normal.
#[derive(Clone, Copy, Debug)]
struct Plane {
    normal: Vector3<f64>,
    offset: f64,
}

impl Plane {
    fn through(a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>) -> Option<Plane> {
        let n = (b - a).cross(&(c - a));
        let norm = n.norm();
        if norm < 1e-12 {
            return None;
        }
        let normal = n / norm;
        Some(Plane {
            normal,
            offset: -normal.dot(&a),
        })
    }

    /// Total least squares fit: the normal is the direction of least variance.
    fn fit(points: &[Vector3<f64>]) -> Option<Plane> {
        if points.len() < 3 {
            return None;
        }
        let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len() as f64;
        let mut cov = Matrix3::zeros();
        for p in points {
            let d = p - centroid;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let (k, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))?;
        let normal = eig.eigenvectors.column(k).into_owned();
        Some(Plane {
            normal,
            offset: -normal.dot(&centroid),
        })
    }

    fn distance(&self, p: &Vector3<f64>) -> f64 {
        (self.normal.dot(p) + self.offset).abs()
    }
}

/// Estimates the dominant plane with RANSAC, refits it on its inliers and
/// marks every point within `threshold` of it invalid. Coordinates are not
/// modified.
pub fn remove_background_plane(
    pc: &PointGrid,
    threshold: f64,
    iterations: usize,
    seed: u64,
) -> Result<PointGrid> {
    if threshold <= 0.0 || !threshold.is_finite() {
        return Err(Error::invalid("plane threshold must be positive"));
    }
    let valid: Vec<usize> = (0..pc.validity.len()).filter(|&i| pc.validity[i]).collect();
    if valid.len() < 3 {
        return Err(Error::invalid(format!(
            "plane removal needs at least 3 valid points, found {}",
            valid.len()
        )));
    }
    let pts: Vec<Vector3<f64>> = valid
        .iter()
        .map(|&i| Vector3::new(pc.coords[i * 3], pc.coords[i * 3 + 1], pc.coords[i * 3 + 2]))
        .collect();

    let mut rng = seed::rng(seed, &[seed::tag("ransac")]);
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..iterations.max(1) {
        let pick = sample_indices(&mut rng, pts.len(), 3);
        let Some(plane) = Plane::through(pts[pick.index(0)], pts[pick.index(1)], pts[pick.index(2)])
        else {
            continue;
        };
        let inliers = pts.iter().filter(|p| plane.distance(p) <= threshold).count();
        if best.is_none_or(|(n, _)| inliers > n) {
            best = Some((inliers, plane));
        }
    }

    let mut out = pc.clone();
    let Some((_, plane)) = best else {
        // Every sample was collinear: there is no plane to remove.
        return Ok(out);
    };
    let inliers: Vec<Vector3<f64>> =
        pts.iter().filter(|p| plane.distance(p) <= threshold).copied().collect();
    let plane = Plane::fit(&inliers).unwrap_or(plane);
    for (k, &i) in valid.iter().enumerate() {
        if plane.distance(&pts[k]) <= threshold {
            out.validity[i] = false;
        }
    }
    Ok(out)
}

/// Half-pixel-centre source coordinate, clamped to the input grid.
#[inline]
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    let s = (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    s.clamp(0.0, (in_len - 1) as f64)
}

#[inline]
fn nearest_coord(dst: usize, in_len: usize, out_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    s.min(in_len - 1)
}

fn bilinear(src: &[f64], h: usize, w: usize, ch: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size * ch];
    for r in 0..size {
        let sr = source_coord(r, h, size);
        let (r0, fr) = (sr.floor() as usize, sr - sr.floor());
        let r1 = (r0 + 1).min(h - 1);
        for c in 0..size {
            let sc = source_coord(c, w, size);
            let (c0, fc) = (sc.floor() as usize, sc - sc.floor());
            let c1 = (c0 + 1).min(w - 1);
            for k in 0..ch {
                let at = |rr: usize, cc: usize| src[(rr * w + cc) * ch + k];
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                out[(r * size + c) * ch + k] = top * (1.0 - fr) + bottom * fr;
            }
        }
    }
    out
}

fn nearest<T: Copy>(src: &[T], h: usize, w: usize, size: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let sr = nearest_coord(r, h, size);
        for c in 0..size {
            out.push(src[sr * w + nearest_coord(c, w, size)]);
        }
    }
    out
}

/// Bilinear resampling of one channel-interleaved `h × w × ch` array.
pub(crate) fn resize_bilinear(src: &[f64], h: usize, w: usize, ch: usize, size: usize) -> Vec<f64> {
    if h == size && w == size {
        return src.to_vec();
    }
    bilinear(src, h, w, ch, size)
}

/// Resizes every per-pixel field to `size × size`: bilinear for colors and
/// coordinates, nearest for validity bits and the anomaly mask.
pub fn resize_to_grid(s: &Sample, size: usize) -> Result<Sample> {
    if size < 8 {
        return Err(Error::invalid(format!("grid size {size} is below the minimum of 8")));
    }
    let (h, w) = (s.height(), s.width());
    let mut out = s.clone();
    out.rgb = s.rgb.as_ref().map(|img| RgbImage {
        height: size,
        width: size,
        pixels: resize_bilinear(&img.pixels, h, w, 3, size),
    });
    out.pc = s.pc.as_ref().map(|pc| PointGrid {
        height: size,
        width: size,
        coords: resize_bilinear(&pc.coords, h, w, 3, size),
        validity: nearest(&pc.validity, h, w, size),
    });
    out.gt = GroundTruth {
        height: size,
        width: size,
        anomaly_mask: nearest(&s.gt.anomaly_mask, h, w, size),
        label: s.gt.label,
    };
    Ok(out)
}
