use super::{distance_field, DistanceField, LabelKind, LabelMask, SegmentError};

/// Resection margins offered by default, in mm.
pub const MARGIN_PRESETS_MM: [f64; 3] = [5.0, 7.0, 10.0];

#[derive(Debug, Clone, PartialEq)]
pub struct MarginMask {
    pub mask: LabelMask,
    /// The margin reaches past the grid and was cut off at its faces.
    pub clipped: bool,
}

/// All voxels whose signed distance to the mask is at most `margin_mm`.
pub fn expand_margin(m: &LabelMask, margin_mm: f64) -> Result<MarginMask, SegmentError> {
    let df = distance_field(m)?;
    expand_margin_with(m, &df, margin_mm)
}

/// As [`expand_margin`], reusing a distance field computed from `m`.
pub fn expand_margin_with(m: &LabelMask, df: &DistanceField, margin_mm: f64) -> Result<MarginMask, SegmentError> {
    if !(margin_mm.is_finite() && margin_mm > 0.0) {
        return Err(SegmentError::InvalidMargin(margin_mm));
    }
    if df.geometry != m.geometry {
        return Err(SegmentError::GridMismatch);
    }
    let g = m.geometry;
    let data = df.values.iter().map(|&d| (d <= margin_mm) as u8).collect();
    let clipped = m.indices().any(|idx| {
        let c = g.coords(idx);
        (0..3).any(|a| ((c[a] + 1).min(g.dims[a] - c[a])) as f64 * g.spacing <= margin_mm)
    });
    if clipped {
        log::warn!("margin of {margin_mm} mm is clipped by the grid boundary");
    }
    Ok(MarginMask { mask: LabelMask { geometry: g, data, kind: LabelKind::Margin }, clipped })
}
