use super::volume::VoxelVolume;

/// Fills each hole that has filled voxels within `max_radius` mm with the
/// inverse-distance-weighted mean of those voxels. Only voxels that were
/// filled on input contribute; filled voxels are left untouched and holes
/// with no filled voxel in range stay holes.
pub fn hole_fill(v: &VoxelVolume, max_radius: f64) -> VoxelVolume {
    let g = v.geometry;
    let mut out = v.clone();
    if !(max_radius > 0.0) {
        return out;
    }
    let reach = (max_radius / g.spacing).floor() as i64;
    let mut offsets = Vec::new();
    for dz in -reach..=reach {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let d = g.spacing * ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                if d <= max_radius + 1e-9 {
                    offsets.push(([dx, dy, dz], 1.0 / d));
                }
            }
        }
    }

    for idx in 0..g.len() {
        if !v.is_hole(idx) {
            continue;
        }
        let [i, j, k] = g.coords(idx);
        let (mut acc, mut wsum) = (0.0f64, 0.0f64);
        for (o, w) in &offsets {
            let n = [i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]];
            if !g.contains_index(n) {
                continue;
            }
            let nidx = g.index(n[0] as usize, n[1] as usize, n[2] as usize);
            if !v.is_hole(nidx) {
                acc += w * v.scalars[nidx] as f64;
                wsum += w;
            }
        }
        if wsum > 0.0 {
            out.scalars[idx] = (acc / wsum) as f32;
            out.weight[idx] = 1;
        }
    }
    out
}
