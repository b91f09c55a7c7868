//! Point-set utilities: Chamfer distance, voxel downsampling, Morton-order
//! serialization. Deterministic by construction; ties break on fixed keys.

use thiserror::Error;

use crate::geometry::Vec3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PointSetError {
    #[error("chamfer distance of an empty set")]
    EmptySet,
}

/// Symmetric mean nearest-neighbor distance between two point sets,
/// `0.5 (mean_a min_b |a-b| + mean_b min_a |a-b|)`.
pub fn chamfer_sets(a: &[Vec3], b: &[Vec3]) -> Result<f64, PointSetError> {
    if a.is_empty() || b.is_empty() {
        return Err(PointSetError::EmptySet);
    }
    let one_way = |from: &[Vec3], to: &[Vec3]| -> f64 {
        let total: f64 = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| p.dist(*q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / from.len() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)))
}

/// Chamfer distance computed per frame and averaged over frames.
/// `frames_a[n]` and `frames_b[n]` hold frame n's points.
pub fn chamfer_frames(frames_a: &[Vec<Vec3>], frames_b: &[Vec<Vec3>]) -> Result<f64, PointSetError> {
    assert_eq!(frames_a.len(), frames_b.len(), "frame counts must match");
    if frames_a.is_empty() {
        return Err(PointSetError::EmptySet);
    }
    let mut total = 0.0;
    for (a, b) in frames_a.iter().zip(frames_b.iter()) {
        total += chamfer_sets(a, b)?;
    }
    Ok(total / frames_a.len() as f64)
}

/// Interleave the low 21 bits of three coordinates into a 63-bit Morton code.
pub fn morton3(x: u64, y: u64, z: u64) -> u64 {
    fn spread(v: u64) -> u64 {
        let mut v = v & 0x1F_FFFF; // 21 bits
        v = (v | (v << 32)) & 0x1F00000000FFFF;
        v = (v | (v << 16)) & 0x1F0000FF0000FF;
        v = (v | (v << 8)) & 0x100F00F00F00F00F;
        v = (v | (v << 4)) & 0x10C30C30C30C30C3;
        v = (v | (v << 2)) & 0x1249249249249249;
        v
    }
    spread(x) | (spread(y) << 1) | (spread(z) << 2)
}

const MORTON_BITS: u32 = 16;

fn quantize(points: &[Vec3]) -> Vec<u64> {
    let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let cells = ((1u64 << MORTON_BITS) - 1) as f64;
    let axis = |v: f64, lo: f64, hi: f64| -> u64 {
        if hi - lo < 1e-12 {
            0
        } else {
            (((v - lo) / (hi - lo) * cells).round() as u64).min(cells as u64)
        }
    };
    points
        .iter()
        .map(|p| morton3(axis(p.x, lo.x, hi.x), axis(p.y, lo.y, hi.y), axis(p.z, lo.z, hi.z)))
        .collect()
}

/// Morton-order serialization over a quantized grid: returns input indices
/// stable-sorted by code (ties keep input order).
pub fn serialize(points: &[Vec3]) -> Vec<usize> {
    let codes = quantize(points);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| codes[i]);
    order
}

/// One centroid per occupied voxel; when more than `cap` voxels are occupied,
/// the `cap` most populated voxels are kept (ties by Morton order of the
/// voxel coordinates). Output is sorted by voxel Morton code.
pub fn voxel_downsample(points: &[Vec3], voxel: f64, cap: usize) -> Vec<Vec3> {
    assert!(cap >= 1, "cap must be at least 1");
    assert!(voxel > 0.0, "voxel size must be positive");
    if points.is_empty() {
        return Vec::new();
    }
    let key = |p: &Vec3| -> (i64, i64, i64) {
        (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        )
    };
    let mut cells: std::collections::BTreeMap<(i64, i64, i64), (Vec3, usize)> =
        std::collections::BTreeMap::new();
    for p in points {
        let e = cells.entry(key(p)).or_insert((Vec3::ZERO, 0));
        e.0 = e.0 + *p;
        e.1 += 1;
    }
    let min_coord = cells
        .keys()
        .fold((i64::MAX, i64::MAX, i64::MAX), |m, k| (m.0.min(k.0), m.1.min(k.1), m.2.min(k.2)));
    // (lexicographic voxel key, morton code, member count, centroid)
    let mut entries: Vec<((i64, i64, i64), u64, usize, Vec3)> = cells
        .iter()
        .map(|(k, (sum, n))| {
            let code = morton3(
                (k.0 - min_coord.0) as u64,
                (k.1 - min_coord.1) as u64,
                (k.2 - min_coord.2) as u64,
            );
            (*k, code, *n, *sum * (1.0 / *n as f64))
        })
        .collect();
    if entries.len() > cap {
        // Most populated first, Morton order breaking ties.
        entries.sort_by(|a, b| b.2.cmp(&a.2).then(a.1.cmp(&b.1)));
        entries.truncate(cap);
    }
    // Output order is lexicographic in the voxel key: translation of the
    // whole cloud by whole voxels cannot reorder it, which keeps the
    // operation idempotent.
    entries.sort_by_key(|e| e.0);
    entries.into_iter().map(|e| e.3).collect()
}
