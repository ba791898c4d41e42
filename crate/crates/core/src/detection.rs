//! Per-frame 2D detection of objects and interactive elements.
//!
//! Objects are found by tagging a frame and prompting the detector with each
//! tag. Elements are found progressively: an LLM proposes element types for
//! each interactable object tag, and the detector is prompted with the
//! composed `"<object>. <element>"` phrase, keeping only detections grounded
//! to the element tag.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{self, BackendError, ModelClient, ModelRequest};
use crate::canonical;
use crate::geometry::Box2;
use crate::prompts::{self, PromptSet};
use crate::scene::Frame;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("detector unreachable: {0}")]
    BackendUnreachable(String),
    #[error("no detector fixture for frame {frame}, {what}")]
    FixtureMiss { frame: u32, what: String },
    #[error("invalid detector payload: {0}")]
    InvalidPayload(String),
    #[error("unparsable model output for {context}: {reason}")]
    UnparsableModelOutput { context: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Object,
    Element,
}

impl NodeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NodeKind::Object => "object",
            NodeKind::Element => "element",
        }
    }
}

/// Lowercase, trim, collapse internal whitespace.
pub fn normalize_tag(tag: &str) -> String {
    tag.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn normalize_dedup<I, S>(tags: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for t in tags {
        let n = normalize_tag(t.as_ref());
        if !n.is_empty() && seen.insert(n.clone()) {
            out.push(n);
        }
    }
    out
}

/// Binary mask over the whole image, run-length encoded in row-major order.
/// Runs alternate background/foreground starting with background (the first
/// run may be 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn width(&self) -> u32 {
        self.size[1]
    }

    pub fn height(&self) -> u32 {
        self.size[0]
    }

    pub fn from_bitmap(width: u32, height: u32, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), (width as usize) * (height as usize));
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        RleMask {
            size: [height, width],
            counts,
        }
    }

    /// Mask covering exactly the pixels of `b`.
    pub fn from_box(width: u32, height: u32, b: &Box2) -> Self {
        let mut bits = vec![false; (width as usize) * (height as usize)];
        let (cols, rows) = b.clamp_to(width, height).pixel_ranges();
        for v in rows {
            for u in cols.clone() {
                bits[(v * width + u) as usize] = true;
            }
        }
        RleMask::from_bitmap(width, height, &bits)
    }

    pub fn validate(&self) -> Result<(), String> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        let expected = self.width() as u64 * self.height() as u64;
        if total != expected {
            return Err(format!("run lengths sum to {total}, expected {expected}"));
        }
        Ok(())
    }

    pub fn to_bitmap(&self) -> Vec<bool> {
        let mut bits = Vec::with_capacity((self.width() as usize) * (self.height() as usize));
        for (i, &c) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        bits
    }

    /// Foreground pixels `(u, v)` in row-major order.
    pub fn pixels(&self) -> Vec<(u32, u32)> {
        let w = self.width() as u64;
        let mut out = Vec::new();
        let mut pos = 0u64;
        for (i, &c) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for p in pos..pos + c as u64 {
                    out.push(((p % w) as u32, (p / w) as u32));
                }
            }
            pos += c as u64;
        }
        out
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    pub fn intersect_box(&self, b: &Box2) -> RleMask {
        let bits = self.to_bitmap();
        let w = self.width();
        let out: Vec<bool> = bits
            .iter()
            .enumerate()
            .map(|(i, &on)| on && b.contains_pixel(i as u32 % w, i as u32 / w))
            .collect();
        RleMask::from_bitmap(w, self.height(), &out)
    }

    pub fn within_box(&self, b: &Box2) -> bool {
        self.pixels().iter().all(|&(u, v)| b.contains_pixel(u, v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    pub frame_index: u32,
    pub object_tags: Vec<String>,
    pub valid_tags: Vec<String>,
    pub element_prompt_pairs: Vec<(String, String)>,
}

impl TagSet {
    pub fn empty(frame_index: u32) -> Self {
        TagSet {
            frame_index,
            object_tags: Vec::new(),
            valid_tags: Vec::new(),
            element_prompt_pairs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub frame_index: u32,
    pub kind: NodeKind,
    pub label: String,
    #[serde(rename = "box")]
    pub box2d: Box2,
    #[serde(rename = "mask_rle")]
    pub mask: RleMask,
    pub score: f64,
    pub source_prompt: String,
}

/// A detector hit as returned by a backend, before filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub label: String,
    #[serde(rename = "box")]
    pub box2d: Box2,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<RleMask>,
    pub score: f64,
}

/// `detections/<frame>/<prompt-digest>.json` payload and HTTP `/detect` reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionPayload {
    pub prompt: String,
    pub detections: Vec<RawDetection>,
}

/// `tags/<frame>.json` payload and HTTP `/tag` reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagPayload {
    pub tags: Vec<String>,
}

/// Open-set tagger plus text-prompted grounding detector.
pub trait Detector: Send + Sync {
    fn id(&self) -> String;

    fn tags(&self, scene_id: &str, frame: &Frame) -> Result<Vec<String>, DetectionError>;

    fn detect(&self, scene_id: &str, frame: &Frame, prompt: &str) -> Result<Vec<RawDetection>, DetectionError>;
}

pub fn prompt_digest(prompt: &str) -> String {
    canonical::sha256_hex(prompt.as_bytes())
}

/// Reads detector output from `<root>/<scene>/tags/<frame>.json` and
/// `<root>/<scene>/detections/<frame>/<sha256(prompt)>.json`.
#[derive(Debug, Clone)]
pub struct FixtureDetector {
    root: PathBuf,
}

impl FixtureDetector {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FixtureDetector { root: root.into() }
    }

    pub fn tags_path(root: &Path, scene_id: &str, frame: u32) -> PathBuf {
        root.join(scene_id).join("tags").join(format!("{frame}.json"))
    }

    pub fn detections_path(root: &Path, scene_id: &str, frame: u32, prompt: &str) -> PathBuf {
        root.join(scene_id)
            .join("detections")
            .join(frame.to_string())
            .join(format!("{}.json", prompt_digest(prompt)))
    }
}

fn read_fixture<T: serde::de::DeserializeOwned>(path: &Path, frame: u32, what: String) -> Result<T, DetectionError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map_err(|e| DetectionError::InvalidPayload(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(DetectionError::FixtureMiss { frame, what }),
        Err(e) => Err(e.into()),
    }
}

impl Detector for FixtureDetector {
    fn id(&self) -> String {
        "fixture-detector".into()
    }

    fn tags(&self, scene_id: &str, frame: &Frame) -> Result<Vec<String>, DetectionError> {
        let path = Self::tags_path(&self.root, scene_id, frame.index);
        let payload: TagPayload = read_fixture(&path, frame.index, "tags".into())?;
        Ok(payload.tags)
    }

    fn detect(&self, scene_id: &str, frame: &Frame, prompt: &str) -> Result<Vec<RawDetection>, DetectionError> {
        let path = Self::detections_path(&self.root, scene_id, frame.index, prompt);
        let payload: DetectionPayload = read_fixture(&path, frame.index, format!("prompt {prompt:?}"))?;
        if payload.prompt != prompt {
            return Err(DetectionError::InvalidPayload(format!(
                "{} holds prompt {:?}, expected {:?}",
                path.display(),
                payload.prompt,
                prompt
            )));
        }
        Ok(payload.detections)
    }
}

/// Out-of-process detector service: `POST /tag` and `POST /detect` with
/// `{image_ref, image_b64[, prompt]}`, replying with the fixture payloads.
pub struct HttpDetector {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpDetector {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpDetector {
            base_url: base_url.into(),
            agent,
        }
    }

    fn post<T: serde::de::DeserializeOwned>(&self, path: &str, body: serde_json::Value) -> Result<T, DetectionError> {
        let url = format!("{}/{path}", self.base_url.trim_end_matches('/'));
        let mut resp = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| DetectionError::BackendUnreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| DetectionError::BackendUnreachable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(DetectionError::BackendUnreachable(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| DetectionError::InvalidPayload(e.to_string()))
    }

    fn image_fields(scene_id: &str, frame: &Frame) -> Result<(String, String), DetectionError> {
        let mut png = Vec::new();
        frame
            .color
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| DetectionError::InvalidPayload(e.to_string()))?;
        Ok((
            format!("{scene_id}/{}", frame.index),
            base64::engine::general_purpose::STANDARD.encode(png),
        ))
    }
}

impl Detector for HttpDetector {
    fn id(&self) -> String {
        "http-detector".into()
    }

    fn tags(&self, scene_id: &str, frame: &Frame) -> Result<Vec<String>, DetectionError> {
        let (image_ref, image_b64) = Self::image_fields(scene_id, frame)?;
        let payload: TagPayload = self.post("tag", serde_json::json!({"image_ref": image_ref, "image_b64": image_b64}))?;
        Ok(payload.tags)
    }

    fn detect(&self, scene_id: &str, frame: &Frame, prompt: &str) -> Result<Vec<RawDetection>, DetectionError> {
        let (image_ref, image_b64) = Self::image_fields(scene_id, frame)?;
        let payload: DetectionPayload = self.post(
            "detect",
            serde_json::json!({"image_ref": image_ref, "image_b64": image_b64, "prompt": prompt}),
        )?;
        Ok(payload.detections)
    }
}

/// Wraps a live detector and writes every reply in fixture layout, so a
/// recorded run can later be replayed with [`FixtureDetector`].
pub struct RecordingDetector<D> {
    inner: D,
    root: PathBuf,
}

impl<D: Detector> RecordingDetector<D> {
    pub fn new(inner: D, root: impl Into<PathBuf>) -> Self {
        RecordingDetector {
            inner,
            root: root.into(),
        }
    }
}

impl<D: Detector> Detector for RecordingDetector<D> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn tags(&self, scene_id: &str, frame: &Frame) -> Result<Vec<String>, DetectionError> {
        let tags = self.inner.tags(scene_id, frame)?;
        let path = FixtureDetector::tags_path(&self.root, scene_id, frame.index);
        canonical::write_canonical(&path, &TagPayload { tags: tags.clone() })?;
        Ok(tags)
    }

    fn detect(&self, scene_id: &str, frame: &Frame, prompt: &str) -> Result<Vec<RawDetection>, DetectionError> {
        let detections = self.inner.detect(scene_id, frame, prompt)?;
        let path = FixtureDetector::detections_path(&self.root, scene_id, frame.index, prompt);
        canonical::write_canonical(
            &path,
            &DetectionPayload {
                prompt: prompt.to_owned(),
                detections: detections.clone(),
            },
        )?;
        Ok(detections)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub score_threshold: f64,
    /// Compose `"<object>. <element>"` prompts; off sends bare element tags.
    pub element_prompting: bool,
    /// Same-label detections in one frame overlapping above this 2D IoU are
    /// collapsed to the highest-scoring one.
    pub duplicate_iou: f64,
    pub max_tokens: u32,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            score_threshold: 0.25,
            element_prompting: true,
            duplicate_iou: 0.5,
            max_tokens: 256,
        }
    }
}

pub fn tag_frame(scene_id: &str, frame: &Frame, tagger: &dyn Detector) -> Result<Vec<String>, DetectionError> {
    Ok(normalize_dedup(tagger.tags(scene_id, frame)?))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct ElementReply {
    interactable: bool,
    #[serde(default)]
    elements: Vec<String>,
}

fn parse_element_reply(text: &str) -> Result<ElementReply, String> {
    let v = backend::extract_json(text).ok_or_else(|| "no JSON object in reply".to_owned())?;
    serde_json::from_value(v).map_err(|e| e.to_string())
}

pub fn element_tag_request(prompts: &PromptSet, tag: &str, max_tokens: u32) -> ModelRequest {
    ModelRequest::llm()
        .system(prompts.system.trim_end())
        .user(prompts::render(&prompts.element_tags, &[("tag", tag)]))
        .max_tokens(max_tokens)
}

/// Asks the LLM which element types operate each object tag. Tags judged
/// not interactable are dropped from `valid_tags` and yield no pairs.
pub fn generate_element_prompts(
    frame_index: u32,
    object_tags: &[String],
    llm: &ModelClient,
    prompts: &PromptSet,
    cfg: &DetectionConfig,
) -> Result<TagSet, DetectionError> {
    let object_tags = normalize_dedup(object_tags);
    let mut set = TagSet::empty(frame_index);
    for tag in &object_tags {
        let request = element_tag_request(prompts, tag, cfg.max_tokens);
        let reply = backend::complete_structured(llm, &request, parse_element_reply)?.map_err(|reason| {
            DetectionError::UnparsableModelOutput {
                context: format!("element tags for {tag:?}"),
                reason,
            }
        })?;
        let elements = normalize_dedup(&reply.elements);
        if !reply.interactable || elements.is_empty() {
            continue;
        }
        set.valid_tags.push(tag.clone());
        set.element_prompt_pairs
            .extend(elements.into_iter().map(|e| (tag.clone(), e)));
    }
    set.object_tags = object_tags;
    Ok(set)
}

/// `"<object_tag>. <element_tag>"`. Both tags must be nonempty.
pub fn compose_prompt(pair: (&str, &str)) -> String {
    debug_assert!(!pair.0.is_empty() && !pair.1.is_empty());
    format!("{}. {}", pair.0, pair.1)
}

/// What to send to the detector and what to keep from its reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionPrompt {
    pub text: String,
    pub kind: NodeKind,
    /// Keep only detections grounded to this label; `None` keeps all.
    pub target_label: Option<String>,
}

impl DetectionPrompt {
    pub fn object(tag: &str) -> Self {
        DetectionPrompt {
            text: tag.to_owned(),
            kind: NodeKind::Object,
            target_label: None,
        }
    }

    pub fn element_pair(object_tag: &str, element_tag: &str) -> Self {
        DetectionPrompt {
            text: compose_prompt((object_tag, element_tag)),
            kind: NodeKind::Element,
            target_label: Some(element_tag.to_owned()),
        }
    }

    pub fn element_only(element_tag: &str) -> Self {
        DetectionPrompt {
            text: element_tag.to_owned(),
            kind: NodeKind::Element,
            target_label: Some(element_tag.to_owned()),
        }
    }
}

/// Runs one detector prompt and post-processes the reply: label filter,
/// score threshold, box clamping, and mask-in-box intersection.
pub fn detect(
    scene_id: &str,
    frame: &Frame,
    prompt: &DetectionPrompt,
    detector: &dyn Detector,
    cfg: &DetectionConfig,
) -> Result<Vec<Detection2D>, DetectionError> {
    let (w, h) = frame.color.dimensions();
    let mut out = Vec::new();
    for raw in detector.detect(scene_id, frame, &prompt.text)? {
        let label = normalize_tag(&raw.label);
        if let Some(target) = &prompt.target_label {
            if &label != target {
                continue;
            }
        }
        if label.is_empty() || !raw.score.is_finite() || raw.score < cfg.score_threshold {
            continue;
        }
        if raw.score > 1.0 {
            tracing::warn!(score = raw.score, %label, "detector score above 1, clamping");
        }
        let score = raw.score.clamp(0.0, 1.0);
        let box2d = raw.box2d.clamp_to(w, h);
        if box2d.area() <= 0.0 {
            continue;
        }
        let mask = match raw.mask_rle {
            Some(m) => {
                m.validate().map_err(DetectionError::InvalidPayload)?;
                if (m.width(), m.height()) != (w, h) {
                    return Err(DetectionError::InvalidPayload(format!(
                        "mask is {}x{}, frame is {w}x{h}",
                        m.width(),
                        m.height()
                    )));
                }
                m.intersect_box(&box2d)
            }
            None => RleMask::from_box(w, h, &box2d),
        };
        if mask.area() == 0 {
            tracing::debug!(%label, frame = frame.index, "mask empty after clamping, dropped");
            continue;
        }
        out.push(Detection2D {
            frame_index: frame.index,
            kind: prompt.kind,
            label,
            box2d,
            mask,
            score,
            source_prompt: prompt.text.clone(),
        });
    }
    Ok(out)
}

/// Greedy same-label suppression, highest score first. Ties keep the
/// earlier detection, so the result is deterministic.
pub fn suppress_duplicates(mut dets: Vec<Detection2D>, iou_threshold: f64) -> Vec<Detection2D> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep = vec![false; dets.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let dup = kept.iter().any(|&k| {
            dets[k].kind == dets[i].kind
                && dets[k].label == dets[i].label
                && dets[k].box2d.iou(&dets[i].box2d) > iou_threshold
        });
        if !dup {
            keep[i] = true;
            kept.push(i);
        }
    }
    let mut i = 0;
    dets.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
    dets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_index: u32,
    pub tag_set: TagSet,
    pub detections: Vec<Detection2D>,
}

/// Full progressive detection for one frame.
pub fn detect_frame(
    scene_id: &str,
    frame: &Frame,
    detector: &dyn Detector,
    llm: &ModelClient,
    prompts: &PromptSet,
    cfg: &DetectionConfig,
) -> Result<FrameDetections, DetectionError> {
    let tags = tag_frame(scene_id, frame, detector)?;
    let tag_set = generate_element_prompts(frame.index, &tags, llm, prompts, cfg)?;

    let mut requests: Vec<DetectionPrompt> = tags.iter().map(|t| DetectionPrompt::object(t)).collect();
    if cfg.element_prompting {
        requests.extend(
            tag_set
                .element_prompt_pairs
                .iter()
                .map(|(o, e)| DetectionPrompt::element_pair(o, e)),
        );
    } else {
        let elements: Vec<&String> = tag_set.element_prompt_pairs.iter().map(|(_, e)| e).collect();
        requests.extend(normalize_dedup(elements).iter().map(|e| DetectionPrompt::element_only(e)));
    }

    let mut detections = Vec::new();
    for p in &requests {
        detections.extend(detect(scene_id, frame, p, detector, cfg)?);
    }
    Ok(FrameDetections {
        frame_index: frame.index,
        tag_set,
        detections: suppress_duplicates(detections, cfg.duplicate_iou),
    })
}
