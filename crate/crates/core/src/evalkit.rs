//! Accuracy evaluation: clip-to-tumor distances measured on a resected
//! specimen, matched against the distances recorded during navigation.
//!
//! Quartiles use linear interpolation between order statistics: for sorted
//! values `x[0..n]` the `p`-quantile is `x[⌊h⌋] + (h − ⌊h⌋)(x[⌈h⌉] − x[⌊h⌋])`
//! with `h = (n − 1)p`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::navengine::ClipRecord;
use crate::segment::{distance_field, LabelKind, LabelMask, SegmentError};
use crate::usrecon::{VolumeFileError, VoxelVolume};

/// Physical length of a surgical clip.
pub const CLIP_LENGTH_MM: f64 = 3.8;
/// Plausible clip component volume, mm³. A clip is a thin 3.8 mm rod, so
/// anything larger than a cube of that side or smaller than 1 mm³ is flagged.
pub const CLIP_VOLUME_RANGE_MM3: (f64, f64) = (1.0, CLIP_LENGTH_MM * CLIP_LENGTH_MM * CLIP_LENGTH_MM);

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("NO_CLIPS: clip mask is empty")]
    NoClips,
    #[error("EMPTY_COHORT: no patients to evaluate")]
    EmptyCohort,
    #[error("tumor mask is empty")]
    EmptyTumor,
    #[error("patient {patient}: {source}")]
    Patient { patient: String, source: Box<EvalError> },
    #[error("specimen grids differ")]
    GridMismatch,
    #[error("missing input file {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Volume(#[from] VolumeFileError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Post-operative imaging of a resected specimen.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecimenStudy {
    pub patient_id: String,
    pub volume: VoxelVolume,
    pub tumor: LabelMask,
    pub clips: LabelMask,
}

pub const SPECIMEN_VOLUME_FILE: &str = "specimen.vol";
pub const SPECIMEN_TUMOR_FILE: &str = "specimen_tumor.vol";
pub const SPECIMEN_CLIPS_FILE: &str = "specimen_clips.vol";
pub const INTRAOP_CLIPS_FILE: &str = "intraop_clips.json";

impl SpecimenStudy {
    pub fn new(patient_id: impl Into<String>, volume: VoxelVolume, tumor: LabelMask, clips: LabelMask) -> Result<Self, EvalError> {
        if tumor.geometry != volume.geometry || clips.geometry != volume.geometry {
            return Err(EvalError::GridMismatch);
        }
        Ok(SpecimenStudy { patient_id: patient_id.into(), volume, tumor, clips })
    }

    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        self.volume.save(&dir.join(SPECIMEN_VOLUME_FILE))?;
        self.tumor.save(&dir.join(SPECIMEN_TUMOR_FILE))?;
        self.clips.save(&dir.join(SPECIMEN_CLIPS_FILE))?;
        Ok(())
    }

    /// Loads a study from a patient directory; the directory name is the
    /// patient id.
    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let need = |name: &str| {
            let p = dir.join(name);
            if p.is_file() { Ok(p) } else { Err(EvalError::Missing(p)) }
        };
        let volume = VoxelVolume::load(&need(SPECIMEN_VOLUME_FILE)?)?;
        let tumor = LabelMask::load(&need(SPECIMEN_TUMOR_FILE)?, LabelKind::Tumor)?;
        let clips = LabelMask::load(&need(SPECIMEN_CLIPS_FILE)?, LabelKind::Clip)?;
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        SpecimenStudy::new(id, volume, tumor, clips)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedClip {
    pub center: [f64; 3],
    pub volume_mm3: f64,
    /// Component volume lies outside [`CLIP_VOLUME_RANGE_MM3`].
    pub implausible: bool,
}

/// Clip centers from the 26-connected components of `clips`, in order of
/// each component's first voxel.
pub fn detect_clips(clips: &LabelMask) -> Result<Vec<DetectedClip>, EvalError> {
    if clips.is_empty() {
        return Err(EvalError::NoClips);
    }
    let g = clips.geometry;
    Ok(clips
        .components26()
        .into_iter()
        .map(|comp| {
            let sum = comp.iter().fold(Vec3::zeros(), |acc, &i| acc + g.center_of(i));
            let c = sum / comp.len() as f64;
            let volume_mm3 = comp.len() as f64 * g.voxel_volume();
            let (lo, hi) = CLIP_VOLUME_RANGE_MM3;
            DetectedClip { center: [c.x, c.y, c.z], volume_mm3, implausible: !(lo..=hi).contains(&volume_mm3) }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostopClip {
    pub clip: DetectedClip,
    /// Unsigned distance from the clip center to the tumor boundary, mm.
    pub distance_mm: f64,
}

/// Unsigned distance from each detected clip center to the tumor boundary.
///
/// The distance field is center-to-center, so the boundary sits half a voxel
/// beyond the last tumor center and `|d| − s/2` is reported.
pub fn clip_to_tumor_distances(study: &SpecimenStudy) -> Result<Vec<PostopClip>, EvalError> {
    if study.tumor.is_empty() {
        return Err(EvalError::EmptyTumor);
    }
    let clips = detect_clips(&study.clips)?;
    let field = distance_field(&study.tumor)?;
    let g = study.tumor.geometry;
    let half = g.spacing / 2.0;
    Ok(clips
        .into_iter()
        .map(|clip| {
            let c = Vec3::from(clip.center);
            let d = field.sample(&c).unwrap_or_else(|| {
                study.tumor.indices().map(|i| (g.center_of(i) - c).norm()).fold(f64::INFINITY, f64::min)
            });
            PostopClip { distance_mm: (d.abs() - half).max(0.0), clip }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipMatching {
    /// `(intraop index, postop index)` pairs, sorted by intraop index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_intraop: Vec<usize>,
    pub unmatched_postop: Vec<usize>,
}

/// Minimum-cost assignment on an `n × m` cost matrix with `n ≤ m`; returns
/// the column assigned to each row.
fn hungarian(cost: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row matched to column j (1-based, 0 = free)
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Pairs intraoperative clips with specimen clips by minimizing
/// `Σ |intraop − postop|` over distance values. The specimen is deformed and
/// not registered to the patient, so positions are not used.
pub fn match_clips(intraop: &[f64], postop: &[f64]) -> ClipMatching {
    let (n, m) = (intraop.len(), postop.len());
    if n == 0 || m == 0 {
        return ClipMatching { pairs: vec![], unmatched_intraop: (0..n).collect(), unmatched_postop: (0..m).collect() };
    }
    let mut pairs: Vec<(usize, usize)> = if n <= m {
        let cost: Vec<Vec<f64>> = intraop.iter().map(|a| postop.iter().map(|b| (a - b).abs()).collect()).collect();
        hungarian(&cost, m).into_iter().enumerate().collect()
    } else {
        let cost: Vec<Vec<f64>> = postop.iter().map(|b| intraop.iter().map(|a| (a - b).abs()).collect()).collect();
        hungarian(&cost, n).into_iter().enumerate().map(|(j, i)| (i, j)).collect()
    };
    pairs.sort_unstable();
    let unmatched_intraop = (0..n).filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
    let unmatched_postop = (0..m).filter(|j| !pairs.iter().any(|p| p.1 == *j)).collect();
    ClipMatching { pairs, unmatched_intraop, unmatched_postop }
}

/// Quantile by linear interpolation between order statistics of `sorted`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

/// Box plot with whiskers at the most extreme values within 1.5·IQR of the
/// box; values beyond are outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotData {
    pub summary: Summary,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
    pub points: Vec<f64>,
}

impl BoxplotData {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside = || sorted.iter().copied().filter(|x| (lo..=hi).contains(x));
        Some(BoxplotData {
            summary: Summary { n: sorted.len(), median, q1, q3, iqr },
            whisker_low: inside().fold(f64::INFINITY, f64::min),
            whisker_high: inside().fold(f64::NEG_INFINITY, f64::max),
            outliers: sorted.iter().copied().filter(|x| !(lo..=hi).contains(x)).collect(),
            points: sorted,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRow {
    pub patient_id: String,
    pub clip_id: u32,
    pub intraop_mm: f64,
    pub postop_mm: f64,
    pub abs_delta_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub matched: usize,
    /// Mean per-clip |Δ|; absent when no clip was matched.
    pub mean_abs_delta_mm: Option<f64>,
    /// Intraoperative clips with no specimen counterpart (detached).
    pub unmatched_intraop: Vec<u32>,
    pub unmatched_postop: usize,
    pub implausible_postop: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub rows: Vec<ClipRow>,
    pub patients: Vec<PatientSummary>,
    pub per_clip: Option<BoxplotData>,
    pub per_patient: Option<BoxplotData>,
    pub detached: usize,
    pub unmatched_postop: usize,
}

/// One patient's evaluation inputs.
#[derive(Debug, Clone)]
pub struct PatientInput {
    pub intraop: Vec<ClipRecord>,
    pub study: SpecimenStudy,
}

/// Matched per-clip distances for one patient, before cohort statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientResult {
    pub rows: Vec<ClipRow>,
    pub summary: PatientSummary,
}

/// Measures the specimen, matches clips and builds the patient's rows.
/// Intraoperative distances are compared by magnitude because specimen
/// distances are unsigned.
pub fn evaluate_patient(p: &PatientInput) -> Result<PatientResult, EvalError> {
    let id = &p.study.patient_id;
    let wrap = |e: EvalError| EvalError::Patient { patient: id.clone(), source: Box::new(e) };
    let postop = clip_to_tumor_distances(&p.study).map_err(wrap)?;
    let intra: Vec<f64> = p.intraop.iter().map(|c| c.intraop_distance_mm.abs()).collect();
    let post: Vec<f64> = postop.iter().map(|c| c.distance_mm).collect();
    let m = match_clips(&intra, &post);
    let rows: Vec<ClipRow> = m
        .pairs
        .iter()
        .map(|&(i, j)| ClipRow {
            patient_id: id.clone(),
            clip_id: p.intraop[i].id,
            intraop_mm: intra[i],
            postop_mm: post[j],
            abs_delta_mm: (intra[i] - post[j]).abs(),
        })
        .collect();
    let mean = (!rows.is_empty()).then(|| rows.iter().map(|r| r.abs_delta_mm).sum::<f64>() / rows.len() as f64);
    let summary = PatientSummary {
        patient_id: id.clone(),
        matched: rows.len(),
        mean_abs_delta_mm: mean,
        unmatched_intraop: m.unmatched_intraop.iter().map(|&i| p.intraop[i].id).collect(),
        unmatched_postop: m.unmatched_postop.len(),
        implausible_postop: postop.iter().filter(|c| c.clip.implausible).count(),
    };
    Ok(PatientResult { rows, summary })
}

/// Cohort statistics over already matched patients.
pub fn summarize(patients: Vec<PatientResult>) -> Result<AccuracyReport, EvalError> {
    if patients.is_empty() {
        return Err(EvalError::EmptyCohort);
    }
    let rows: Vec<ClipRow> = patients.iter().flat_map(|p| p.rows.iter().cloned()).collect();
    let summaries: Vec<PatientSummary> = patients.into_iter().map(|p| p.summary).collect();
    let clip_values: Vec<f64> = rows.iter().map(|r| r.abs_delta_mm).collect();
    let patient_values: Vec<f64> = summaries.iter().filter_map(|s| s.mean_abs_delta_mm).collect();
    Ok(AccuracyReport {
        per_clip: BoxplotData::from_values(&clip_values),
        per_patient: BoxplotData::from_values(&patient_values),
        detached: summaries.iter().map(|s| s.unmatched_intraop.len()).sum(),
        unmatched_postop: summaries.iter().map(|s| s.unmatched_postop).sum(),
        rows,
        patients: summaries,
    })
}

pub fn accuracy_report(cohort: &[PatientInput]) -> Result<AccuracyReport, EvalError> {
    if cohort.is_empty() {
        return Err(EvalError::EmptyCohort);
    }
    summarize(cohort.iter().map(evaluate_patient).collect::<Result<_, _>>()?)
}

pub fn load_intraop_clips(path: &Path) -> Result<Vec<ClipRecord>, EvalError> {
    if !path.is_file() {
        return Err(EvalError::Missing(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn save_intraop_clips(path: &Path, clips: &[ClipRecord]) -> Result<(), EvalError> {
    fs::write(path, serde_json::to_string_pretty(clips)? + "\n")?;
    Ok(())
}

/// Loads every patient directory under `cohort`, sorted by name. Each holds
/// `intraop_clips.json` and the three specimen volumes.
pub fn load_cohort(cohort: &Path) -> Result<Vec<PatientInput>, EvalError> {
    if !cohort.is_dir() {
        return Err(EvalError::Missing(cohort.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(cohort)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|d| Ok(PatientInput { intraop: load_intraop_clips(&d.join(INTRAOP_CLIPS_FILE))?, study: SpecimenStudy::load(d)? }))
        .collect()
}

pub const REPORT_ROWS_FILE: &str = "clips.csv";
pub const REPORT_SUMMARY_FILE: &str = "summary.json";
pub const REPORT_BOXPLOT_FILE: &str = "boxplot.csv";

impl AccuracyReport {
    /// Writes `clips.csv`, `summary.json` and `boxplot.csv` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(REPORT_ROWS_FILE))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        fs::write(dir.join(REPORT_SUMMARY_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        let mut w = csv::Writer::from_path(dir.join(REPORT_BOXPLOT_FILE))?;
        w.write_record(["level", "kind", "value"])?;
        for (level, b) in [("clip", &self.per_clip), ("patient", &self.per_patient)] {
            let Some(b) = b else { continue };
            let s = &b.summary;
            for (kind, v) in [
                ("median", s.median),
                ("q1", s.q1),
                ("q3", s.q3),
                ("whisker_low", b.whisker_low),
                ("whisker_high", b.whisker_high),
            ] {
                w.write_record([level, kind, &v.to_string()])?;
            }
            for v in &b.outliers {
                w.write_record([level, "outlier", &v.to_string()])?;
            }
            for v in &b.points {
                w.write_record([level, "point", &v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Rasterizes a clip as a capsule of length [`CLIP_LENGTH_MM`] centered at
/// `center` along `axis`.
pub fn paint_clip(mask: &mut LabelMask, center: Vec3, axis: Vec3, radius: f64) {
    let half = axis.normalize() * (CLIP_LENGTH_MM / 2.0 - radius).max(0.0);
    let (a, b) = (center - half, center + half);
    let g = mask.geometry;
    let reach = CLIP_LENGTH_MM / 2.0 + g.spacing;
    let lo = g.to_voxel(&(center - Vec3::repeat(reach)));
    let hi = g.to_voxel(&(center + Vec3::repeat(reach)));
    let range = |a: usize| {
        let l = lo[a].floor().max(0.0) as usize;
        let h = (hi[a].ceil().max(0.0) as usize).min(g.dims[a].saturating_sub(1));
        l..=h
    };
    for k in range(2) {
        for j in range(1) {
            for i in range(0) {
                let p = g.center([i, j, k]);
                let ab = b - a;
                let t = if ab.norm_squared() > 0.0 { ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0) } else { 0.0 };
                if (p - (a + ab * t)).norm() <= radius {
                    mask.set(g.index(i, j, k), true);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::usrecon::GridGeometry;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(half: f64) -> GridGeometry {
        GridGeometry::covering(Vec3::repeat(-half), Vec3::repeat(half), 0.5)
    }

    fn sphere_study(r: f64, clips: &[Vec3]) -> SpecimenStudy {
        let g = grid(r + 12.0);
        let tumor = LabelMask::from_fn(g, LabelKind::Tumor, |p| p.norm() <= r);
        let mut mask = LabelMask::empty(g, LabelKind::Clip);
        for c in clips {
            paint_clip(&mut mask, *c, Vec3::new(0.0, 0.0, 1.0), 0.6);
        }
        let vol = VoxelVolume::filled(g, vec![0.0; g.len()]);
        SpecimenStudy::new("p", vol, tumor, mask).unwrap()
    }

    #[test]
    fn single_clip_center() {
        let c = Vec3::new(1.3, -2.1, 0.4);
        let s = sphere_study(2.0, &[c + Vec3::new(8.0, 0.0, 0.0)]);
        let found = detect_clips(&s.clips).unwrap();
        assert_eq!(found.len(), 1);
        assert!((Vec3::from(found[0].center) - c - Vec3::new(8.0, 0.0, 0.0)).norm() <= 0.25);
        assert!(!found[0].implausible, "{}", found[0].volume_mm3);
        let two = sphere_study(2.0, &[Vec3::new(8.0, 0.0, 0.0), Vec3::new(-8.0, 0.0, 0.0)]);
        assert_eq!(detect_clips(&two.clips).unwrap().len(), 2);
        assert!(matches!(detect_clips(&LabelMask::empty(grid(2.0), LabelKind::Clip)), Err(EvalError::NoClips)));
    }

    #[test]
    fn oversized_component_is_flagged() {
        let g = grid(6.0);
        let blob = LabelMask::from_fn(g, LabelKind::Clip, |p| p.norm() <= 4.0);
        assert!(detect_clips(&blob).unwrap()[0].implausible);
    }

    #[test]
    fn analytic_clip_distances() {
        let s = sphere_study(10.0, &[Vec3::new(15.0, 0.0, 0.0), Vec3::new(0.0, -10.0, 0.0)]);
        let d = clip_to_tumor_distances(&s).unwrap();
        assert!((d[0].distance_mm - 0.0).abs() <= 0.5, "{}", d[0].distance_mm);
        assert!((d[1].distance_mm - 5.0).abs() <= 0.5, "{}", d[1].distance_mm);
    }

    #[test]
    fn distances_match_boundary_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centers: Vec<Vec3> = (0..20)
            .map(|k| {
                let dir = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5).normalize();
                dir * (8.5 + 1.2 * (k % 7) as f64)
            })
            .collect();
        for c in &centers {
            let s = sphere_study(8.0, &[*c]);
            let measured = clip_to_tumor_distances(&s).unwrap();
            let g = s.tumor.geometry;
            // oracle: faces between tumor voxels and their outside neighbors
            let mut best = f64::INFINITY;
            let center = Vec3::from(measured[0].clip.center);
            for i in s.tumor.indices() {
                for n in g.neighbors6(i) {
                    if !s.tumor.contains(n) {
                        let face = (g.center_of(i) + g.center_of(n)) / 2.0;
                        best = best.min((face - center).norm());
                    }
                }
            }
            assert!((measured[0].distance_mm - best).abs() <= 0.5, "{} vs {best}", measured[0].distance_mm);
        }
    }

    fn exhaustive(a: &[f64], b: &[f64]) -> f64 {
        fn go(a: &[f64], b: &[f64], used: &mut Vec<bool>, k: usize) -> f64 {
            if k == a.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..b.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min((a[k] - b[j]).abs() + go(a, b, used, k + 1));
                    used[j] = false;
                }
            }
            best
        }
        if a.len() <= b.len() { go(a, b, &mut vec![false; b.len()], 0) } else { go(b, a, &mut vec![false; a.len()], 0) }
    }

    fn cost(a: &[f64], b: &[f64], m: &ClipMatching) -> f64 {
        m.pairs.iter().map(|&(i, j)| (a[i] - b[j]).abs()).sum()
    }

    #[test]
    fn matching_examples() {
        let m = match_clips(&[2.0, 5.0, 9.0], &[5.1, 2.2, 8.8]);
        assert_eq!(m.pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(match_clips(&[3.0], &[7.0]).pairs, vec![(0, 0)]);
        let m = match_clips(&[1.0, 2.0, 3.0, 4.0, 20.0], &[1.1, 2.1, 3.1, 4.1]);
        assert_eq!(m.unmatched_intraop, vec![4]);
        assert!(m.unmatched_postop.is_empty());
    }

    proptest! {
        #[test]
        fn matching_is_optimal(a in prop::collection::vec(0.0f64..20.0, 1..7), b in prop::collection::vec(0.0f64..20.0, 1..7)) {
            let m = match_clips(&a, &b);
            prop_assert_eq!(m.pairs.len(), a.len().min(b.len()));
            prop_assert!((cost(&a, &b, &m) - exhaustive(&a, &b)).abs() < 1e-9);
        }
    }

    fn oracle_quantile(values: &[f64], p: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = p * (v.len() as f64 - 1.0);
        let below = v[pos as usize];
        let above = v[(pos as usize + 1).min(v.len() - 1)];
        below + (pos - (pos as usize) as f64) * (above - below)
    }

    fn result(id: &str, deltas: &[f64]) -> PatientResult {
        let rows: Vec<ClipRow> = deltas
            .iter()
            .enumerate()
            .map(|(k, d)| ClipRow { patient_id: id.into(), clip_id: k as u32 + 1, intraop_mm: 5.0 + d, postop_mm: 5.0, abs_delta_mm: *d })
            .collect();
        let mean = (!rows.is_empty()).then(|| deltas.iter().sum::<f64>() / deltas.len() as f64);
        PatientResult {
            summary: PatientSummary {
                patient_id: id.into(),
                matched: rows.len(),
                mean_abs_delta_mm: mean,
                unmatched_intraop: vec![],
                unmatched_postop: 0,
                implausible_postop: 0,
            },
            rows,
        }
    }

    #[test]
    fn trivial_reports() {
        let r = summarize(vec![result("a", &[0.0, 0.0]), result("b", &[0.0])]).unwrap();
        let s = r.per_clip.unwrap().summary;
        assert_eq!((s.median, s.iqr), (0.0, 0.0));
        let r = summarize(vec![result("a", &[2.0, 4.0])]).unwrap();
        assert_eq!(r.patients[0].mean_abs_delta_mm, Some(3.0));
        assert!(matches!(summarize(vec![]), Err(EvalError::EmptyCohort)));
        assert!(matches!(accuracy_report(&[]), Err(EvalError::EmptyCohort)));
    }

    #[test]
    fn cohort_statistics_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let sizes: Vec<usize> = (0..16).map(|p| if p < 14 { 5 } else { 4 }).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 78);
        let cohort: Vec<PatientResult> = sizes
            .iter()
            .enumerate()
            .map(|(p, &n)| result(&format!("p{p:02}"), &(0..n).map(|_| rng.random::<f64>() * 8.0).collect::<Vec<_>>()))
            .collect();
        let clip_values: Vec<f64> = cohort.iter().flat_map(|p| p.rows.iter().map(|r| r.abs_delta_mm)).collect();
        let patient_values: Vec<f64> = cohort.iter().map(|p| p.summary.mean_abs_delta_mm.unwrap()).collect();
        let report = summarize(cohort.clone()).unwrap();
        for (b, values) in [(report.per_clip.as_ref().unwrap(), &clip_values), (report.per_patient.as_ref().unwrap(), &patient_values)] {
            assert!((b.summary.median - oracle_quantile(values, 0.5)).abs() < 1e-9);
            assert!((b.summary.q1 - oracle_quantile(values, 0.25)).abs() < 1e-9);
            assert!((b.summary.q3 - oracle_quantile(values, 0.75)).abs() < 1e-9);
        }
        for p in &report.patients {
            let rows: Vec<f64> = report.rows.iter().filter(|r| r.patient_id == p.patient_id).map(|r| r.abs_delta_mm).collect();
            assert!((p.mean_abs_delta_mm.unwrap() - rows.iter().sum::<f64>() / rows.len() as f64).abs() < 1e-12);
        }
        let mut shuffled = cohort;
        shuffled.shuffle(&mut rng);
        for p in &mut shuffled {
            p.rows.shuffle(&mut rng);
        }
        let again = summarize(shuffled).unwrap();
        assert_eq!(again.per_clip.unwrap().summary, report.per_clip.unwrap().summary);
        assert_eq!(again.per_patient.unwrap().summary, report.per_patient.unwrap().summary);
    }

    #[test]
    fn boxplot_whiskers_exclude_outliers() {
        let b = BoxplotData::from_values(&[1.0, 2.0, 3.0, 4.0, 5.0, 100.0]).unwrap();
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!((b.whisker_low, b.whisker_high), (1.0, 5.0));
    }

    #[test]
    fn detached_clips_are_reported() {
        let s = sphere_study(6.0, &[Vec3::new(9.0, 0.0, 0.0), Vec3::new(0.0, 0.0, -12.0)]);
        let postop = clip_to_tumor_distances(&s).unwrap();
        let mk = |id, d| ClipRecord { id, position: [0.0; 3], intraop_distance_mm: d, t: 0.0 };
        let intraop = vec![mk(1, postop[0].distance_mm + 0.1), mk(2, 30.0), mk(3, postop[1].distance_mm - 0.2)];
        let report = accuracy_report(&[PatientInput { intraop, study: s }]).unwrap();
        assert_eq!(report.detached, 1);
        assert_eq!(report.patients[0].unmatched_intraop, vec![2]);
        assert_eq!(report.rows.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        report.export(dir.path()).unwrap();
        let csv_text = fs::read_to_string(dir.path().join(REPORT_ROWS_FILE)).unwrap();
        assert_eq!(csv_text.lines().count(), 3);
        let back: AccuracyReport = serde_json::from_str(&fs::read_to_string(dir.path().join(REPORT_SUMMARY_FILE)).unwrap()).unwrap();
        assert_eq!(back, report);
        assert!(fs::read_to_string(dir.path().join(REPORT_BOXPLOT_FILE)).unwrap().contains("clip,median,"));
    }

    #[test]
    fn cohort_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = sphere_study(4.0, &[Vec3::new(7.0, 0.0, 0.0)]);
        let pdir = dir.path().join("patient01");
        s.save(&pdir).unwrap();
        let clips = vec![ClipRecord { id: 1, position: [7.0, 0.0, 0.0], intraop_distance_mm: 3.0, t: 1.5 }];
        save_intraop_clips(&pdir.join(INTRAOP_CLIPS_FILE), &clips).unwrap();
        let cohort = load_cohort(dir.path()).unwrap();
        assert_eq!(cohort[0].study.patient_id, "patient01");
        assert_eq!(cohort[0].study.tumor, s.tumor);
        assert_eq!(cohort[0].intraop, clips);
        fs::remove_file(pdir.join(SPECIMEN_CLIPS_FILE)).unwrap();
        match load_cohort(dir.path()) {
            Err(EvalError::Missing(p)) => assert!(p.ends_with(SPECIMEN_CLIPS_FILE)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
