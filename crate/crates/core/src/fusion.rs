//! Multi-view fusion of 2D detections into 3D node candidates.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::description::NodeDescription;
use crate::detection::{Detection2D, NodeKind};
use crate::eval::embedding::{cosine, EmbeddingBackend, EmbeddingError};
use crate::geometry::{Aabb, Box2, GeometryError};
use crate::scene::{unproject, Frame, SceneSequence};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no masked pixel has valid depth (frame {frame}, {label:?})")]
    EmptyLift { frame: u32, label: String },
    #[error("detection references frame {0}, which the scene does not contain")]
    MissingFrame(u32),
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub frame_index: u32,
    #[serde(rename = "box")]
    pub box2d: Box2,
    pub mask_ref: String,
    pub score: f64,
    pub contributed_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVote {
    pub label: String,
    pub score: f64,
}

/// A fused 3D instance. The point cloud is stored separately (PLY) and is
/// not part of the JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCandidate {
    pub id: String,
    pub kind: NodeKind,
    pub label_votes: Vec<LabelVote>,
    #[serde(skip)]
    pub points: Vec<Point3<f64>>,
    pub num_points: usize,
    pub bbox3d: Aabb,
    pub views: Vec<ViewRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<NodeDescription>,
}

impl NodeCandidate {
    /// Score-weighted plurality label; ties go to the lexicographically
    /// smallest label.
    pub fn label(&self) -> String {
        top_label(&self.label_votes)
    }

    pub fn distinct_frames(&self) -> usize {
        self.views.iter().map(|v| v.frame_index).collect::<BTreeSet<_>>().len()
    }

    pub fn set_points(&mut self, points: Vec<Point3<f64>>) -> Result<(), GeometryError> {
        self.bbox3d = aabb(&points)?;
        self.num_points = points.len();
        self.points = points;
        Ok(())
    }
}

pub fn top_label(votes: &[LabelVote]) -> String {
    let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
    for v in votes {
        *totals.entry(v.label.as_str()).or_default() += v.score;
    }
    let mut best: Option<(&str, f64)> = None;
    for (label, total) in totals {
        if best.is_none_or(|(_, b)| total > b) {
            best = Some((label, total));
        }
    }
    best.map(|(l, _)| l.to_owned()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub voxel_size: f64,
    pub assoc_geo_threshold: f64,
    pub assoc_sem_threshold: f64,
    pub nn_radius: f64,
    /// Multiplies `nn_radius` for the element pool.
    pub element_radius_factor: f64,
    pub min_views: usize,
    pub outlier_nn_count: usize,
    pub outlier_std_ratio: f64,
    pub outlier_removal: bool,
    pub voxel_downsample: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            voxel_size: 0.02,
            assoc_geo_threshold: 0.4,
            assoc_sem_threshold: 0.6,
            nn_radius: 0.025,
            element_radius_factor: 0.5,
            min_views: 9,
            outlier_nn_count: 10,
            outlier_std_ratio: 2.0,
            outlier_removal: true,
            voxel_downsample: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::InvalidConfig(m.into()));
        if !(self.voxel_size > 0.0) {
            return bad("voxel_size must be > 0");
        }
        if self.min_views < 1 {
            return bad("min_views must be >= 1");
        }
        if !(self.nn_radius > 0.0) || !(self.element_radius_factor > 0.0) {
            return bad("nn_radius and element_radius_factor must be > 0");
        }
        for t in [self.assoc_geo_threshold, self.assoc_sem_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return bad("association thresholds must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn radius_for(&self, kind: NodeKind) -> f64 {
        match kind {
            NodeKind::Object => self.nn_radius,
            NodeKind::Element => self.nn_radius * self.element_radius_factor,
        }
    }
}

pub fn aabb(points: &[Point3<f64>]) -> Result<Aabb, GeometryError> {
    Aabb::from_points(points)
}

/// Unprojects every masked pixel that has valid depth, row-major.
pub fn lift_pixels(det: &Detection2D, frame: &Frame) -> Vec<Point3<f64>> {
    det.mask
        .pixels()
        .into_iter()
        .filter(|&(u, v)| u < frame.depth.width() && v < frame.depth.height() && frame.depth.is_valid(u, v))
        .filter_map(|(u, v)| unproject(&frame.camera, &frame.pose, (u, v), frame.depth.get(u, v)).ok())
        .collect()
}

pub fn lift_detection(det: &Detection2D, frame: &Frame, cfg: &FusionConfig) -> Result<Vec<Point3<f64>>, FusionError> {
    let mut points = lift_pixels(det, frame);
    if points.is_empty() {
        return Err(FusionError::EmptyLift {
            frame: frame.index,
            label: det.label.clone(),
        });
    }
    if cfg.outlier_removal {
        points = remove_statistical_outliers(&points, cfg.outlier_nn_count, cfg.outlier_std_ratio);
    }
    if cfg.voxel_downsample {
        points = voxel_downsample(&points, cfg.voxel_size);
    }
    Ok(points)
}

fn as_array(p: &Point3<f64>) -> [f64; 3] {
    [p.x, p.y, p.z]
}

pub struct PointIndex {
    tree: Option<ImmutableKdTree<f64, 3>>,
    len: usize,
}

impl PointIndex {
    pub fn new(points: &[Point3<f64>]) -> Self {
        let coords: Vec<[f64; 3]> = points.iter().map(as_array).collect();
        PointIndex {
            tree: (!coords.is_empty()).then(|| ImmutableKdTree::new_from_slice(&coords)),
            len: coords.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Squared distance to the nearest indexed point.
    pub fn nearest_sq(&self, p: &Point3<f64>) -> Option<f64> {
        self.tree
            .as_ref()
            .map(|t| t.nearest_one::<SquaredEuclidean>(&as_array(p)).distance)
    }

    /// Squared distances to the `k` nearest indexed points, ascending.
    pub fn nearest_n_sq(&self, p: &Point3<f64>, k: usize) -> Vec<f64> {
        match (&self.tree, NonZero::new(k.min(self.len))) {
            (Some(t), Some(k)) => t
                .nearest_n::<SquaredEuclidean>(&as_array(p), k)
                .into_iter()
                .map(|n| n.distance)
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Drops points whose mean distance to their `k` nearest neighbours exceeds
/// the population mean of that statistic by more than `std_ratio` standard
/// deviations. Input order is preserved.
pub fn remove_statistical_outliers(points: &[Point3<f64>], k: usize, std_ratio: f64) -> Vec<Point3<f64>> {
    let k = k.min(points.len().saturating_sub(1));
    if k == 0 {
        return points.to_vec();
    }
    let index = PointIndex::new(points);
    let means: Vec<f64> = points
        .par_iter()
        .map(|p| {
            // The query point itself is among the k + 1 nearest at distance 0.
            let d = index.nearest_n_sq(p, k + 1);
            d.iter().map(|s| s.sqrt()).sum::<f64>() / k as f64
        })
        .collect();
    let n = means.len() as f64;
    let mu = means.iter().sum::<f64>() / n;
    let sigma = (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n).sqrt();
    let limit = mu + std_ratio * sigma;
    points
        .iter()
        .zip(&means)
        .filter(|(_, &m)| m <= limit)
        .map(|(p, _)| *p)
        .collect()
}

/// One centroid per occupied voxel, in ascending voxel-key order.
pub fn voxel_downsample(points: &[Point3<f64>], voxel: f64) -> Vec<Point3<f64>> {
    let mut cells: BTreeMap<[i64; 3], ([f64; 3], usize)> = BTreeMap::new();
    for p in points {
        let key = [
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        ];
        let cell = cells.entry(key).or_insert(([0.0; 3], 0));
        cell.0[0] += p.x;
        cell.0[1] += p.y;
        cell.0[2] += p.z;
        cell.1 += 1;
    }
    cells
        .into_values()
        .map(|(s, n)| {
            let n = n as f64;
            Point3::new(s[0] / n, s[1] / n, s[2] / n)
        })
        .collect()
}

/// Fraction of `lifted` having an indexed point within `radius`.
pub fn geometric_overlap(index: &PointIndex, lifted: &[Point3<f64>], radius: f64) -> f64 {
    if lifted.is_empty() || index.is_empty() {
        return 0.0;
    }
    let r2 = radius * radius;
    let hits = lifted
        .iter()
        .filter(|p| index.nearest_sq(p).is_some_and(|d| d <= r2))
        .count();
    hits as f64 / lifted.len() as f64
}

/// Memoizing wrapper so each label is embedded once per fusion run.
struct LabelEmbeddings<'a> {
    backend: &'a dyn EmbeddingBackend,
    cache: HashMap<String, Vec<f64>>,
}

impl LabelEmbeddings<'_> {
    fn similarity(&mut self, a: &str, b: &str) -> Result<f64, EmbeddingError> {
        if a == b {
            return Ok(1.0);
        }
        for label in [a, b] {
            if !self.cache.contains_key(label) {
                let v = self.backend.embed(label)?;
                self.cache.insert(label.to_owned(), v);
            }
        }
        Ok(cosine(&self.cache[a], &self.cache[b]).clamp(0.0, 1.0))
    }
}

/// `(geo, sem)` of a lifted detection against a candidate.
pub fn association_score(
    candidate: &NodeCandidate,
    lifted: &[Point3<f64>],
    label: &str,
    radius: f64,
    embeddings: &dyn EmbeddingBackend,
) -> Result<(f64, f64), EmbeddingError> {
    let index = PointIndex::new(&candidate.points);
    let geo = geometric_overlap(&index, lifted, radius);
    let mut memo = LabelEmbeddings {
        backend: embeddings,
        cache: HashMap::new(),
    };
    let sem = memo.similarity(label, &candidate.label())?;
    Ok((geo, sem))
}

struct Working {
    candidate: NodeCandidate,
    index: PointIndex,
}

/// A lifted detection ready for association.
struct Lifted<'a> {
    det: &'a Detection2D,
    mask_ref: String,
    points: Vec<Point3<f64>>,
}

fn fuse_pool(
    kind: NodeKind,
    lifted: Vec<Lifted<'_>>,
    cfg: &FusionConfig,
    embeddings: &mut LabelEmbeddings<'_>,
) -> Result<Vec<NodeCandidate>, FusionError> {
    let radius = cfg.radius_for(kind);
    let mut pool: Vec<Working> = Vec::new();
    for item in lifted {
        let mut best: Option<(usize, f64)> = None;
        for (i, w) in pool.iter().enumerate() {
            let geo = geometric_overlap(&w.index, &item.points, radius);
            if geo < cfg.assoc_geo_threshold {
                continue;
            }
            let sem = embeddings.similarity(&item.det.label, &w.candidate.label())?;
            if sem < cfg.assoc_sem_threshold {
                continue;
            }
            if best.is_none_or(|(_, s)| geo + sem > s) {
                best = Some((i, geo + sem));
            }
        }
        let view = ViewRecord {
            frame_index: item.det.frame_index,
            box2d: item.det.box2d,
            mask_ref: item.mask_ref,
            score: item.det.score,
            contributed_points: item.points.len(),
            crop_ref: None,
        };
        let vote = LabelVote {
            label: item.det.label.clone(),
            score: item.det.score,
        };
        match best {
            Some((i, _)) => {
                let w = &mut pool[i];
                let mut merged = std::mem::take(&mut w.candidate.points);
                merged.extend(item.points);
                if cfg.voxel_downsample {
                    merged = voxel_downsample(&merged, cfg.voxel_size);
                }
                w.index = PointIndex::new(&merged);
                w.candidate.set_points(merged)?;
                w.candidate.views.push(view);
                w.candidate.label_votes.push(vote);
            }
            None => {
                let index = PointIndex::new(&item.points);
                let mut candidate = NodeCandidate {
                    id: String::new(),
                    kind,
                    label_votes: vec![vote],
                    points: Vec::new(),
                    num_points: 0,
                    bbox3d: aabb(&item.points)?,
                    views: vec![view],
                    description: None,
                };
                candidate.set_points(item.points)?;
                pool.push(Working { candidate, index });
            }
        }
    }
    Ok(pool.into_iter().map(|w| w.candidate).collect())
}

pub fn candidate_id(kind: NodeKind, n: usize) -> String {
    match kind {
        NodeKind::Object => format!("obj-{n:03}"),
        NodeKind::Element => format!("el-{n:03}"),
    }
}

/// Greedy frame-order fusion. Objects and elements are fused in separate
/// pools; candidates seen in fewer than `min_views` distinct frames are
/// discarded. Ids are assigned after the discard, objects first.
///
/// `mask_refs[i]` names where detection `i`'s mask is stored.
pub fn fuse_scene(
    detections: &[Detection2D],
    mask_refs: &[String],
    scene: &SceneSequence,
    cfg: &FusionConfig,
    embeddings: &dyn EmbeddingBackend,
) -> Result<Vec<NodeCandidate>, FusionError> {
    cfg.validate()?;
    assert_eq!(detections.len(), mask_refs.len(), "one mask ref per detection");

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by_key(|&i| (detections[i].frame_index, i));

    let lifted: Vec<Option<Lifted<'_>>> = order
        .par_iter()
        .map(|&i| {
            let det = &detections[i];
            let frame = scene
                .frame(det.frame_index)
                .ok_or(FusionError::MissingFrame(det.frame_index))?;
            match lift_detection(det, frame, cfg) {
                Ok(points) if !points.is_empty() => Ok(Some(Lifted {
                    det,
                    mask_ref: mask_refs[i].clone(),
                    points,
                })),
                Ok(_) | Err(FusionError::EmptyLift { .. }) => {
                    tracing::debug!(frame = det.frame_index, label = %det.label, "detection has no valid depth, skipped");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, FusionError>>()?;

    let mut embeddings = LabelEmbeddings {
        backend: embeddings,
        cache: HashMap::new(),
    };
    let mut out = Vec::new();
    for kind in [NodeKind::Object, NodeKind::Element] {
        let items: Vec<Lifted<'_>> = lifted
            .iter()
            .flatten()
            .filter(|l| l.det.kind == kind)
            .map(|l| Lifted {
                det: l.det,
                mask_ref: l.mask_ref.clone(),
                points: l.points.clone(),
            })
            .collect();
        let fused = fuse_pool(kind, items, cfg, &mut embeddings)?;
        let before = fused.len();
        let kept: Vec<NodeCandidate> = fused
            .into_iter()
            .filter(|c| c.distinct_frames() >= cfg.min_views)
            .collect();
        tracing::info!(kind = kind.as_str(), fused = before, kept = kept.len(), "fusion pool done");
        for (n, mut c) in kept.into_iter().enumerate() {
            c.id = candidate_id(kind, n);
            out.push(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::RleMask;
    use crate::eval::embedding::ToyEmbedding;
    use crate::scene::{CameraModel, DepthMap, Pose};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(frame: u32, kind: NodeKind, label: &str, b: Box2, w: u32, h: u32) -> Detection2D {
        Detection2D {
            frame_index: frame,
            kind,
            label: label.into(),
            box2d: b,
            mask: RleMask::from_box(w, h, &b),
            score: 0.9,
            source_prompt: label.into(),
        }
    }

    fn flat_frame(index: u32, w: u32, h: u32, depth: f64, pose: Pose) -> Frame {
        Frame {
            index,
            color: image::RgbImage::new(w, h),
            depth: DepthMap::new(w, h, vec![depth; (w * h) as usize]),
            camera: CameraModel::new(1.0, 1.0, 0.0, 0.0, w, h).unwrap(),
            pose,
        }
    }

    #[test]
    fn lift_two_by_two() {
        let f = flat_frame(0, 4, 4, 1.0, Pose::identity());
        let d = det(0, NodeKind::Object, "x", Box2::new(0.0, 0.0, 2.0, 2.0), 4, 4);
        let cfg = FusionConfig {
            outlier_removal: false,
            voxel_downsample: false,
            ..Default::default()
        };
        let pts = lift_detection(&d, &f, &cfg).unwrap();
        let expected: Vec<Point3<f64>> = [(0, 0), (1, 0), (0, 1), (1, 1)]
            .iter()
            .map(|&(u, v)| Point3::new(u as f64, v as f64, 1.0))
            .collect();
        assert_eq!(pts, expected);
    }

    #[test]
    fn lift_without_depth_fails() {
        let f = flat_frame(0, 4, 4, 0.0, Pose::identity());
        let d = det(0, NodeKind::Object, "x", Box2::new(0.0, 0.0, 2.0, 2.0), 4, 4);
        assert!(matches!(
            lift_detection(&d, &f, &FusionConfig::default()),
            Err(FusionError::EmptyLift { .. })
        ));
    }

    #[test]
    fn statistical_outlier_removed() {
        let mut pts: Vec<Point3<f64>> = (0..100)
            .map(|i| Point3::new((i % 10) as f64 * 0.01, (i / 10) as f64 * 0.01, 1.0))
            .collect();
        pts.push(Point3::new(0.0, 0.0, 6.0));
        let kept = remove_statistical_outliers(&pts, 10, 2.0);
        assert_eq!(kept.len(), 100);
        assert!(kept.iter().all(|p| p.z == 1.0));
    }

    #[test]
    fn outlier_filter_tolerates_duplicates() {
        let pts = vec![Point3::new(1.0, 1.0, 1.0); 50];
        assert_eq!(remove_statistical_outliers(&pts, 10, 2.0).len(), 50);
    }

    #[test]
    fn voxel_centroids_sorted() {
        let pts = vec![
            Point3::new(0.05, 0.0, 0.0),
            Point3::new(0.001, 0.001, 0.001),
            Point3::new(0.003, 0.003, 0.003),
        ];
        let out = voxel_downsample(&pts, 0.02);
        assert_eq!(out.len(), 2);
        assert!((out[0] - Point3::new(0.002, 0.002, 0.002)).norm() < 1e-12);
        assert_eq!(out[1], Point3::new(0.05, 0.0, 0.0));
    }

    fn candidate(points: Vec<Point3<f64>>, label: &str) -> NodeCandidate {
        let mut c = NodeCandidate {
            id: "c".into(),
            kind: NodeKind::Object,
            label_votes: vec![LabelVote {
                label: label.into(),
                score: 1.0,
            }],
            points: vec![],
            num_points: 0,
            bbox3d: Aabb::new(Point3::origin(), Point3::origin()).unwrap(),
            views: vec![],
            description: None,
        };
        c.set_points(points).unwrap();
        c
    }

    #[test]
    fn association_examples() {
        let pts: Vec<Point3<f64>> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let c = candidate(pts.clone(), "door");
        let (geo, sem) = association_score(&c, &pts, "door", 0.05, &ToyEmbedding).unwrap();
        assert_eq!((geo, sem), (1.0, 1.0));
        let far: Vec<Point3<f64>> = pts.iter().map(|p| p + Vector3::new(0.0, 1.0, 0.0)).collect();
        assert_eq!(association_score(&c, &far, "door", 0.05, &ToyEmbedding).unwrap().0, 0.0);
        let mixed: Vec<Point3<f64>> = (0..10)
            .map(|i| Point3::new(i as f64, if i < 7 { 0.01 } else { 0.5 }, 0.0))
            .collect();
        let (geo, _) = association_score(&c, &mixed, "door", 0.05, &ToyEmbedding).unwrap();
        assert!((geo - 0.7).abs() < 1e-12);
    }

    #[test]
    fn geometric_overlap_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a: Vec<Point3<f64>> = (0..rng.random_range(1..60))
                .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            let b: Vec<Point3<f64>> = (0..rng.random_range(1..60))
                .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            let r = rng.random_range(0.01..0.3);
            let brute = b.iter().filter(|p| a.iter().any(|q| (*p - q).norm() <= r)).count() as f64 / b.len() as f64;
            let fast = geometric_overlap(&PointIndex::new(&a), &b, r);
            assert!((brute - fast).abs() < 1e-12);
        }
    }

    /// A fronto-parallel patch seen from `n` camera positions.
    fn patch_scene(n: u32, offsets: &[f64]) -> (SceneSequence, Vec<Detection2D>) {
        let (w, h) = (64u32, 48u32);
        let mut frames = Vec::new();
        let mut dets = Vec::new();
        for i in 0..n {
            let tx = 0.002 * i as f64;
            let pose = Pose::from_translation(Vector3::new(tx, 0.0, 0.0));
            let frame = Frame {
                index: i,
                color: image::RgbImage::new(w, h),
                depth: DepthMap::new(w, h, vec![2.0; (w * h) as usize]),
                camera: CameraModel::new(50.0, 50.0, 32.0, 24.0, w, h).unwrap(),
                pose,
            };
            for (k, off) in offsets.iter().enumerate() {
                let u0 = 20.0 + off;
                dets.push(det(i, NodeKind::Object, "cabinet", Box2::new(u0, 10.0, u0 + 8.0, 18.0), w, h));
                let _ = k;
            }
            frames.push(frame);
        }
        let scene = SceneSequence {
            scene_id: "synthetic".into(),
            frames,
            metadata: Default::default(),
        };
        (scene, dets)
    }

    fn refs(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn nine_views_kept_eight_dropped() {
        let (scene, dets) = patch_scene(9, &[0.0]);
        let out = fuse_scene(&dets, &refs(dets.len()), &scene, &FusionConfig::default(), &ToyEmbedding).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].views.len(), 9);
        assert_eq!(out[0].id, "obj-000");

        let (scene, dets) = patch_scene(8, &[0.0]);
        let out = fuse_scene(&dets, &refs(dets.len()), &scene, &FusionConfig::default(), &ToyEmbedding).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn distant_boxes_never_merge() {
        // 25 px at depth 2 with f = 50 is 1 m
        let (scene, dets) = patch_scene(9, &[-15.0, 10.0]);
        let cfg = FusionConfig {
            nn_radius: 0.05,
            ..Default::default()
        };
        let out = fuse_scene(&dets, &refs(dets.len()), &scene, &cfg, &ToyEmbedding).unwrap();
        assert_eq!(out.len(), 2);
        for c in &out {
            assert_eq!(c.views.len(), 9);
        }
    }

    #[test]
    fn kinds_fused_separately() {
        let (scene, mut dets) = patch_scene(3, &[0.0]);
        let elems: Vec<Detection2D> = dets
            .iter()
            .map(|d| Detection2D {
                kind: NodeKind::Element,
                ..d.clone()
            })
            .collect();
        dets.extend(elems);
        let cfg = FusionConfig {
            min_views: 3,
            ..Default::default()
        };
        let out = fuse_scene(&dets, &refs(dets.len()), &scene, &cfg, &ToyEmbedding).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].kind, NodeKind::Object);
        assert_eq!(out[1].kind, NodeKind::Element);
        assert_eq!(out[1].id, "el-000");
    }

    #[test]
    fn forward_and_reverse_agree_on_count() {
        let (scene, dets) = patch_scene(9, &[0.0]);
        let fwd = fuse_scene(&dets, &refs(dets.len()), &scene, &FusionConfig::default(), &ToyEmbedding).unwrap();
        let mut rev_scene = scene.clone();
        let n = rev_scene.frames.len() as u32;
        for f in &mut rev_scene.frames {
            f.index = n - 1 - f.index;
        }
        rev_scene.frames.reverse();
        let rev_dets: Vec<Detection2D> = dets
            .iter()
            .map(|d| Detection2D {
                frame_index: n - 1 - d.frame_index,
                ..d.clone()
            })
            .collect();
        let rev = fuse_scene(&rev_dets, &refs(rev_dets.len()), &rev_scene, &FusionConfig::default(), &ToyEmbedding).unwrap();
        assert_eq!(fwd.len(), rev.len());
    }

    #[test]
    fn plurality_label_tie_is_lexicographic() {
        let votes = vec![
            LabelVote { label: "lamp".into(), score: 0.5 },
            LabelVote { label: "desk lamp".into(), score: 0.5 },
        ];
        assert_eq!(top_label(&votes), "desk lamp");
        let votes = vec![
            LabelVote { label: "lamp".into(), score: 0.5 },
            LabelVote { label: "lamp".into(), score: 0.3 },
            LabelVote { label: "desk lamp".into(), score: 0.7 },
        ];
        assert_eq!(top_label(&votes), "lamp");
    }

    #[test]
    fn aabb_examples() {
        let b = aabb(&[Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(b.min, Point3::origin());
        assert_eq!(b.max, Point3::new(1.0, 2.0, 3.0));
        let p = Point3::new(0.5, -1.0, 2.0);
        let d = aabb(&[p]).unwrap();
        assert_eq!((d.min, d.max), (p, p));
        assert!(aabb(&[]).is_err());
    }

    proptest! {
        #[test]
        fn aabb_is_brute_force_min_max(
            pts in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 1..1000)
        ) {
            let pts: Vec<Point3<f64>> = pts.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect();
            let b = aabb(&pts).unwrap();
            for axis in 0..3 {
                let lo = pts.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
                let hi = pts.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(b.min[axis], lo);
                prop_assert_eq!(b.max[axis], hi);
            }
            prop_assert!(pts.iter().all(|p| b.contains(p)));
        }

        #[test]
        fn raising_min_views_never_adds(n in 1u32..7, extra in 0usize..4) {
            let (scene, dets) = patch_scene(n, &[0.0, 14.0]);
            let count = |m: usize| {
                let cfg = FusionConfig { min_views: m, ..Default::default() };
                fuse_scene(&dets, &refs(dets.len()), &scene, &cfg, &ToyEmbedding).unwrap().len()
            };
            let base = 1 + extra;
            prop_assert!(count(base + 1) <= count(base));
        }
    }
}
