//! Natural-language node descriptions from ranked, multi-scale view crops.

use std::io::Cursor;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ImagePayload, ModelClient, ModelRequest};
use crate::detection::NodeKind;
use crate::fusion::{NodeCandidate, ViewRecord};
use crate::geometry::Box2;
use crate::prompts::{self, PromptSet};
use crate::scene::SceneSequence;

#[derive(Debug, Error)]
pub enum DescriptionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("candidate {0} has no views")]
    NoViews(String),
    #[error("view references frame {0}, which the scene does not contain")]
    MissingFrame(u32),
    #[error("invalid description config: {0}")]
    InvalidConfig(String),
    #[error("image encoding failed: {0}")]
    Image(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub frame_index: u32,
    pub scale: f64,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub vlm: String,
    pub llm: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDescription {
    pub summary: String,
    pub per_view_captions: Vec<Caption>,
    pub views_used: Vec<u32>,
    pub model_meta: ModelMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub frame_index: u32,
    #[serde(rename = "box")]
    pub box2d: Box2,
    pub scale: f64,
    pub highlight: Option<Box2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescriptionConfig {
    /// Top views captioned per candidate (N_v).
    pub n_views: usize,
    pub element_scales: Vec<f64>,
    pub outline_px: u32,
    pub caption_max_tokens: u32,
    pub summary_max_tokens: u32,
}

impl Default for DescriptionConfig {
    fn default() -> Self {
        DescriptionConfig {
            n_views: 9,
            element_scales: vec![1.0, 2.0, 4.0],
            outline_px: 3,
            caption_max_tokens: 128,
            summary_max_tokens: 160,
        }
    }
}

impl DescriptionConfig {
    pub fn validate(&self) -> Result<(), DescriptionError> {
        if self.n_views == 0 {
            return Err(DescriptionError::InvalidConfig("n_views must be >= 1".into()));
        }
        if self.element_scales.is_empty() || self.element_scales.iter().any(|s| !(*s >= 1.0)) {
            return Err(DescriptionError::InvalidConfig("element scales must be nonempty and >= 1".into()));
        }
        Ok(())
    }
}

/// Score × share of the fused cloud contributed by the view.
pub fn view_rank_key(view: &ViewRecord, n_points: usize) -> f64 {
    view.score * view.contributed_points as f64 / n_points.max(1) as f64
}

/// Views by descending rank key, ties by ascending frame index, truncated
/// to the top `n_views`.
pub fn rank_views(views: &[ViewRecord], n_points: usize, n_views: usize) -> Vec<ViewRecord> {
    let mut keyed: Vec<(f64, &ViewRecord)> = views.iter().map(|v| (view_rank_key(v, n_points), v)).collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.frame_index.cmp(&b.1.frame_index)));
    keyed.into_iter().take(n_views).map(|(_, v)| v.clone()).collect()
}

pub fn rank_candidate_views(candidate: &NodeCandidate, n_views: usize) -> Vec<ViewRecord> {
    rank_views(&candidate.views, candidate.num_points, n_views)
}

pub fn make_crops(view: &ViewRecord, kind: NodeKind, scales: &[f64], image_size: (u32, u32)) -> Vec<CropSpec> {
    let (w, h) = image_size;
    match kind {
        NodeKind::Object => vec![CropSpec {
            frame_index: view.frame_index,
            box2d: view.box2d.clamp_to(w, h),
            scale: 1.0,
            highlight: None,
        }],
        NodeKind::Element => scales
            .iter()
            .map(|&s| CropSpec {
                frame_index: view.frame_index,
                box2d: view.box2d.scaled(s).clamp_to(w, h),
                scale: s,
                highlight: Some(view.box2d),
            })
            .collect(),
    }
}

/// Cuts the crop out of `image` and draws the highlight box, if any, as a
/// pure red stroke `outline_px` wide on the inside of the box.
pub fn render_crop(image: &RgbImage, crop: &CropSpec, outline_px: u32) -> RgbImage {
    let (cols, rows) = crop.box2d.clamp_to(image.width(), image.height()).pixel_ranges();
    let (cw, ch) = (cols.len().max(1) as u32, rows.len().max(1) as u32);
    let mut out = RgbImage::new(cw, ch);
    for (y, v) in rows.clone().enumerate() {
        for (x, u) in cols.clone().enumerate() {
            out.put_pixel(x as u32, y as u32, *image.get_pixel(u, v));
        }
    }
    if let Some(hl) = crop.highlight {
        let (hc, hr) = hl.clamp_to(image.width(), image.height()).pixel_ranges();
        for v in hr.clone() {
            for u in hc.clone() {
                let on_border = u - hc.start < outline_px
                    || hc.end - 1 - u < outline_px
                    || v - hr.start < outline_px
                    || hr.end - 1 - v < outline_px;
                if on_border && cols.contains(&u) && rows.contains(&v) {
                    out.put_pixel(u - cols.start, v - rows.start, Rgb([255, 0, 0]));
                }
            }
        }
    }
    out
}

pub fn encode_png(image: &RgbImage) -> Result<ImagePayload, DescriptionError> {
    let mut bytes = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| DescriptionError::Image(e.to_string()))?;
    Ok(ImagePayload::png(bytes))
}

fn crop_payload(scene: &SceneSequence, crop: &CropSpec, cfg: &DescriptionConfig) -> Result<ImagePayload, DescriptionError> {
    let frame = scene
        .frame(crop.frame_index)
        .ok_or(DescriptionError::MissingFrame(crop.frame_index))?;
    encode_png(&render_crop(&frame.color, crop, cfg.outline_px))
}

/// Crop of the best-ranked view: the widest configured scale for elements
/// (with the outline), scale 1 for objects.
pub fn top_view_image(
    candidate: &NodeCandidate,
    scene: &SceneSequence,
    cfg: &DescriptionConfig,
) -> Result<ImagePayload, DescriptionError> {
    let view = rank_candidate_views(candidate, 1)
        .into_iter()
        .next()
        .ok_or_else(|| DescriptionError::NoViews(candidate.id.clone()))?;
    let frame = scene
        .frame(view.frame_index)
        .ok_or(DescriptionError::MissingFrame(view.frame_index))?;
    let crops = make_crops(&view, candidate.kind, &cfg.element_scales, frame.color.dimensions());
    let crop = crops
        .iter()
        .max_by(|a, b| a.scale.total_cmp(&b.scale))
        .expect("at least one crop");
    crop_payload(scene, crop, cfg)
}

fn caption_request(kind: NodeKind, label: &str, prompts: &PromptSet, image: ImagePayload, cfg: &DescriptionConfig) -> ModelRequest {
    let template = match kind {
        NodeKind::Object => &prompts.describe_object,
        NodeKind::Element => &prompts.describe_element,
    };
    ModelRequest::vlm()
        .system(prompts.system.trim_end())
        .user(prompts::render(template, &[("label", label)]))
        .image(image)
        .max_tokens(cfg.caption_max_tokens)
}

pub fn describe_candidate(
    candidate: &NodeCandidate,
    scene: &SceneSequence,
    client: &ModelClient,
    prompts: &PromptSet,
    cfg: &DescriptionConfig,
) -> Result<NodeDescription, DescriptionError> {
    cfg.validate()?;
    if candidate.views.is_empty() {
        return Err(DescriptionError::NoViews(candidate.id.clone()));
    }
    let label = candidate.label();
    let views = rank_candidate_views(candidate, cfg.n_views);

    let mut crops = Vec::new();
    for view in &views {
        let frame = scene
            .frame(view.frame_index)
            .ok_or(DescriptionError::MissingFrame(view.frame_index))?;
        crops.extend(make_crops(view, candidate.kind, &cfg.element_scales, frame.color.dimensions()));
    }

    let captions: Vec<Caption> = crops
        .par_iter()
        .map(|crop| {
            let image = crop_payload(scene, crop, cfg)?;
            let reply = client.complete(&caption_request(candidate.kind, &label, prompts, image, cfg))?;
            Ok(Caption {
                frame_index: crop.frame_index,
                scale: crop.scale,
                caption: reply.text.trim().to_owned(),
            })
        })
        .collect::<Result<_, DescriptionError>>()?;

    let usable: Vec<&Caption> = captions.iter().filter(|c| !c.caption.is_empty()).collect();
    let summary = if usable.is_empty() {
        tracing::warn!(candidate = %candidate.id, "all captions empty, falling back to label");
        label.clone()
    } else {
        let listing = usable
            .iter()
            .map(|c| format!("- (frame {}, scale {}) {}", c.frame_index, c.scale, c.caption))
            .collect::<Vec<_>>()
            .join("\n");
        let request = ModelRequest::llm()
            .system(prompts.system.trim_end())
            .user(prompts::render(
                &prompts.summarize,
                &[("kind", candidate.kind.as_str()), ("label", &label), ("captions", &listing)],
            ))
            .max_tokens(cfg.summary_max_tokens);
        let text = client.complete(&request)?.text.trim().to_owned();
        if text.is_empty() {
            label.clone()
        } else {
            text
        }
    };

    let backend = client.backend_id();
    Ok(NodeDescription {
        summary,
        per_view_captions: captions,
        views_used: views.iter().map(|v| v.frame_index).collect(),
        model_meta: ModelMeta {
            vlm: backend.clone(),
            llm: backend,
        },
    })
}

/// Describes every candidate, in parallel, keeping input order.
pub fn describe_all(
    candidates: &[NodeCandidate],
    scene: &SceneSequence,
    client: &ModelClient,
    prompts: &PromptSet,
    cfg: &DescriptionConfig,
) -> Result<Vec<NodeDescription>, DescriptionError> {
    candidates
        .par_iter()
        .map(|c| describe_candidate(c, scene, client, prompts, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CallbackBackend, ModelHint};
    use crate::fusion::LabelVote;
    use crate::geometry::Aabb;
    use crate::scene::{CameraModel, DepthMap, Frame, Pose};
    use nalgebra::Point3;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn view(frame: u32, score: f64, n: usize) -> ViewRecord {
        ViewRecord {
            frame_index: frame,
            box2d: Box2::new(40.0, 40.0, 60.0, 60.0),
            mask_ref: String::new(),
            score,
            contributed_points: n,
            crop_ref: None,
        }
    }

    #[test]
    fn ranking_examples() {
        let r = rank_views(&[view(0, 0.6, 100), view(1, 0.8, 100)], 200, 9);
        assert_eq!(r.iter().map(|v| v.frame_index).collect::<Vec<_>>(), vec![1, 0]);
        let r = rank_views(&[view(4, 0.5, 180), view(2, 0.9, 100)], 200, 9);
        assert_eq!(view_rank_key(&r[0], 200), view_rank_key(&r[1], 200));
        assert_eq!(r.iter().map(|v| v.frame_index).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(rank_views(&[view(7, 0.1, 1)], 1, 9).len(), 1);
        let many: Vec<ViewRecord> = (0..12).map(|i| view(i, 0.5, 10)).collect();
        assert_eq!(rank_views(&many, 100, 9).len(), 9);
    }

    #[test]
    fn crop_examples() {
        let mut v = view(0, 1.0, 1);
        v.box2d = Box2::new(45.0, 45.0, 55.0, 55.0);
        let obj = make_crops(&v, NodeKind::Object, &[1.0, 2.0, 4.0], (200, 200));
        assert_eq!(obj.len(), 1);
        assert_eq!((obj[0].scale, obj[0].highlight), (1.0, None));

        let el = make_crops(&v, NodeKind::Element, &[1.0, 2.0, 4.0], (200, 200));
        let sizes: Vec<f64> = el.iter().map(|c| c.box2d.width()).collect();
        assert_eq!(sizes, vec![10.0, 20.0, 40.0]);
        for c in &el {
            assert_eq!(c.box2d.center(), (50.0, 50.0));
            assert_eq!(c.highlight, Some(v.box2d));
        }

        v.box2d = Box2::new(0.0, 0.0, 10.0, 10.0);
        let corner = make_crops(&v, NodeKind::Element, &[4.0], (200, 200));
        assert_eq!(corner[0].box2d, Box2::new(0.0, 0.0, 25.0, 25.0));
        assert_eq!(corner[0].highlight, Some(v.box2d));
    }

    #[test]
    fn outline_is_three_red_pixels_inside_box() {
        let img = RgbImage::from_pixel(40, 40, Rgb([0, 0, 255]));
        let crop = CropSpec {
            frame_index: 0,
            box2d: Box2::new(0.0, 0.0, 40.0, 40.0),
            scale: 4.0,
            highlight: Some(Box2::new(10.0, 10.0, 20.0, 20.0)),
        };
        let out = render_crop(&img, &crop, 3);
        let red = Rgb([255, 0, 0]);
        assert_eq!(*out.get_pixel(10, 10), red);
        assert_eq!(*out.get_pixel(12, 15), red);
        assert_eq!(*out.get_pixel(19, 19), red);
        assert_ne!(*out.get_pixel(13, 13), red);
        assert_ne!(*out.get_pixel(9, 10), red);
        assert_ne!(*out.get_pixel(20, 15), red);
        let reds = out.pixels().filter(|p| **p == red).count();
        assert_eq!(reds, 100 - 16);
    }

    fn scene(n: u32) -> SceneSequence {
        let frames = (0..n)
            .map(|i| Frame {
                index: i,
                color: RgbImage::new(200, 200),
                depth: DepthMap::new(200, 200, vec![1.0; 40000]),
                camera: CameraModel::new(100.0, 100.0, 100.0, 100.0, 200, 200).unwrap(),
                pose: Pose::identity(),
            })
            .collect();
        SceneSequence {
            scene_id: "s".into(),
            frames,
            metadata: Default::default(),
        }
    }

    fn candidate(kind: NodeKind, n_views: u32) -> NodeCandidate {
        NodeCandidate {
            id: "c".into(),
            kind,
            label_votes: vec![LabelVote {
                label: "fridge".into(),
                score: 0.9,
            }],
            points: vec![Point3::origin()],
            num_points: 100,
            bbox3d: Aabb::new(Point3::origin(), Point3::origin()).unwrap(),
            views: (0..n_views).map(|i| view(i, 0.5 + i as f64 * 0.01, 50)).collect(),
            description: None,
        }
    }

    struct Counts {
        vlm: AtomicUsize,
        llm: AtomicUsize,
    }

    fn counting_client(counts: Arc<Counts>, caption: &'static str) -> ModelClient {
        ModelClient::new(Arc::new(CallbackBackend::new("count", move |r: &ModelRequest| {
            match r.model_hint {
                ModelHint::Vlm => {
                    counts.vlm.fetch_add(1, Ordering::SeqCst);
                    Ok(caption.to_owned())
                }
                ModelHint::Llm => {
                    counts.llm.fetch_add(1, Ordering::SeqCst);
                    Ok("a tall white fridge".into())
                }
            }
        })))
        .without_cache()
    }

    #[test]
    fn element_call_accounting() {
        let counts = Arc::new(Counts {
            vlm: AtomicUsize::new(0),
            llm: AtomicUsize::new(0),
        });
        let client = counting_client(counts.clone(), "a handle");
        let d = describe_candidate(
            &candidate(NodeKind::Element, 2),
            &scene(2),
            &client,
            &PromptSet::default(),
            &DescriptionConfig::default(),
        )
        .unwrap();
        assert_eq!(counts.vlm.load(Ordering::SeqCst), 6);
        assert_eq!(counts.llm.load(Ordering::SeqCst), 1);
        assert_eq!(d.summary, "a tall white fridge");
        assert_eq!(d.per_view_captions.len(), 6);
    }

    #[test]
    fn only_top_nine_views_captioned() {
        let counts = Arc::new(Counts {
            vlm: AtomicUsize::new(0),
            llm: AtomicUsize::new(0),
        });
        let client = counting_client(counts.clone(), "a fridge");
        let d = describe_candidate(
            &candidate(NodeKind::Object, 12),
            &scene(12),
            &client,
            &PromptSet::default(),
            &DescriptionConfig::default(),
        )
        .unwrap();
        assert_eq!(counts.vlm.load(Ordering::SeqCst), 9);
        assert_eq!(d.views_used, vec![11, 10, 9, 8, 7, 6, 5, 4, 3]);
    }

    #[test]
    fn empty_captions_fall_back_to_label() {
        let counts = Arc::new(Counts {
            vlm: AtomicUsize::new(0),
            llm: AtomicUsize::new(0),
        });
        let client = counting_client(counts.clone(), "   ");
        let d = describe_candidate(
            &candidate(NodeKind::Object, 2),
            &scene(2),
            &client,
            &PromptSet::default(),
            &DescriptionConfig::default(),
        )
        .unwrap();
        assert_eq!(d.summary, "fridge");
        assert_eq!(counts.llm.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn fixture_trace_summary() {
        let client = ModelClient::new(Arc::new(CallbackBackend::new("trace", |r: &ModelRequest| {
            Ok(match r.model_hint {
                ModelHint::Vlm => {
                    if r.images[0].bytes.len().is_multiple_of(2) { "a white fridge" } else { "a tall fridge" }.to_owned()
                }
                ModelHint::Llm => {
                    assert!(r.messages.last().unwrap().text.contains("fridge"));
                    "a tall white fridge".to_owned()
                }
            })
        })));
        let d = describe_candidate(
            &candidate(NodeKind::Object, 2),
            &scene(2),
            &client,
            &PromptSet::default(),
            &DescriptionConfig::default(),
        )
        .unwrap();
        assert_eq!(d.summary, "a tall white fridge");
    }
}
