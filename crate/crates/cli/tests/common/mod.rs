//! Synthetic fixture scene, scripted model and canned detector shared by the
//! integration tests and the fixture generator.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use funcgraph_cli::config::PipelineConfig;
use funcgraph_cli::pipeline::{Pipeline, RunTarget};
use funcgraph_core::backend::{BackendError, CallbackBackend, ModelClient, ModelRequest, Role};
use funcgraph_core::detection::{DetectionError, Detector, RawDetection, RecordingDetector, RleMask};
use funcgraph_core::geometry::Box2;
use funcgraph_core::scene::{write_pose_file, Frame, Pose};
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::Vector3;

pub const SCENE_ID: &str = "scene-a";
pub const WIDTH: u32 = 160;
pub const HEIGHT: u32 = 120;
pub const FX: f64 = 100.0;
pub const CX: f64 = 80.0;
pub const CY: f64 = 60.0;
pub const WALL_DEPTH: f64 = 3.0;
pub const QUESTION: &str = "How do I turn on the ceiling light?";

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// A slanted rectangular surface `z = z0 + slope * (x - x[0])` over
/// `x[0]..=x[1]`, `y[0]..=y[1]` in world coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Patch {
    pub label: &'static str,
    pub element: bool,
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z0: f64,
    pub slope: f64,
    pub color: [u8; 3],
}

impl Patch {
    pub fn z_range(&self) -> [f64; 2] {
        [self.z0, self.z0 + self.slope * (self.x[1] - self.x[0])]
    }

    /// Depth along the camera axis where the pixel ray meets the surface.
    fn hit(&self, t: &Vector3<f64>, u: u32, v: u32) -> Option<f64> {
        let a = (u as f64 - CX) / FX;
        let b = (v as f64 - CY) / FX;
        let d = (self.z0 + self.slope * (t.x - self.x[0]) - t.z) / (1.0 - self.slope * a);
        if !(d > 0.0) {
            return None;
        }
        let (xw, yw) = (t.x + d * a, t.y + d * b);
        (xw >= self.x[0] && xw <= self.x[1] && yw >= self.y[0] && yw <= self.y[1]).then_some(d)
    }
}

pub const PATCHES: [Patch; 5] = [
    Patch {
        label: "door",
        element: false,
        x: [-0.7, -0.2],
        y: [-0.5, 0.5],
        z0: 2.0,
        slope: 0.2,
        color: [120, 80, 40],
    },
    Patch {
        label: "handle",
        element: true,
        x: [-0.34, -0.22],
        y: [-0.05, 0.05],
        z0: 1.96,
        slope: 0.2,
        color: [200, 200, 210],
    },
    Patch {
        label: "switch",
        element: true,
        x: [0.3, 0.46],
        y: [-0.1, 0.06],
        z0: 2.9,
        slope: 0.2,
        color: [245, 245, 245],
    },
    Patch {
        label: "ceiling light",
        element: false,
        x: [-0.2, 0.4],
        y: [-0.6, -0.5],
        z0: 2.5,
        slope: 0.2,
        color: [250, 230, 120],
    },
    Patch {
        label: "lamp",
        element: false,
        x: [0.6, 0.9],
        y: [0.0, 0.4],
        z0: 2.4,
        slope: 0.2,
        color: [230, 140, 40],
    },
];

pub fn patch(label: &str) -> &'static Patch {
    PATCHES.iter().find(|p| p.label == label).expect("known patch")
}

pub fn camera_positions() -> Vec<Vector3<f64>> {
    vec![
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(0.003, 0.001, 0.0),
        Vector3::new(0.006, 0.002, 0.0),
    ]
}

/// Depth in meters and front-most patch index per pixel.
pub struct Rendered {
    pub depth: Vec<f64>,
    pub owner: Vec<Option<usize>>,
}

pub fn render(t: &Vector3<f64>) -> Rendered {
    let n = (WIDTH * HEIGHT) as usize;
    let mut depth = vec![WALL_DEPTH; n];
    let mut owner = vec![None; n];
    for v in 0..HEIGHT {
        for u in 0..WIDTH {
            let i = (v * WIDTH + u) as usize;
            for (k, p) in PATCHES.iter().enumerate() {
                if let Some(d) = p.hit(t, u, v) {
                    if d < depth[i] {
                        depth[i] = d;
                        owner[i] = Some(k);
                    }
                }
            }
        }
    }
    Rendered { depth, owner }
}

pub fn write_scene(dir: &Path) {
    for sub in ["color", "depth", "pose"] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
    }
    let intr = serde_json::json!({
        "fx": FX, "fy": FX, "cx": CX, "cy": CY, "width": WIDTH, "height": HEIGHT
    });
    std::fs::write(dir.join("intrinsics.json"), serde_json::to_string_pretty(&intr).unwrap() + "\n").unwrap();
    for (i, t) in camera_positions().iter().enumerate() {
        let r = render(t);
        let mut color = RgbImage::new(WIDTH, HEIGHT);
        let mut depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(WIDTH, HEIGHT);
        for v in 0..HEIGHT {
            for u in 0..WIDTH {
                let k = (v * WIDTH + u) as usize;
                let c = match r.owner[k] {
                    Some(p) => PATCHES[p].color,
                    None => {
                        let g = 150 + ((u / 8 + v / 8) % 2) as u8 * 20;
                        [g, g, g]
                    }
                };
                color.put_pixel(u, v, Rgb(c));
                depth.put_pixel(u, v, Luma([(r.depth[k] * 1000.0).round() as u16]));
            }
        }
        color.save(dir.join("color").join(format!("{i}.png"))).unwrap();
        depth.save(dir.join("depth").join(format!("{i}.png"))).unwrap();
        write_pose_file(&dir.join("pose").join(format!("{i}.txt")), &Pose::from_translation(*t)).unwrap();
    }
}

/// Answers tagging and grounding requests from the rendered ownership maps.
pub struct CannedDetector {
    frames: Vec<Rendered>,
}

impl Default for CannedDetector {
    fn default() -> Self {
        CannedDetector {
            frames: camera_positions().iter().map(render).collect(),
        }
    }
}

impl CannedDetector {
    fn hit(&self, frame: u32, label: &str, score: f64) -> Option<RawDetection> {
        let r = &self.frames[frame as usize];
        let k = PATCHES.iter().position(|p| p.label == label)?;
        let bits: Vec<bool> = r.owner.iter().map(|o| *o == Some(k)).collect();
        let (mut u0, mut v0, mut u1, mut v1) = (u32::MAX, u32::MAX, 0, 0);
        for (i, &on) in bits.iter().enumerate() {
            if on {
                let (u, v) = (i as u32 % WIDTH, i as u32 / WIDTH);
                u0 = u0.min(u);
                v0 = v0.min(v);
                u1 = u1.max(u);
                v1 = v1.max(v);
            }
        }
        (u0 != u32::MAX).then(|| RawDetection {
            label: label.to_owned(),
            box2d: Box2::new(u0 as f64, v0 as f64, (u1 + 1) as f64, (v1 + 1) as f64),
            mask_rle: Some(RleMask::from_bitmap(WIDTH, HEIGHT, &bits)),
            score,
        })
    }
}

impl Detector for CannedDetector {
    fn id(&self) -> String {
        "fixture-detector".into()
    }

    fn tags(&self, _: &str, _: &Frame) -> Result<Vec<String>, DetectionError> {
        Ok(vec!["door".into(), "ceiling light".into(), "lamp".into(), "wall".into()])
    }

    fn detect(&self, _: &str, frame: &Frame, prompt: &str) -> Result<Vec<RawDetection>, DetectionError> {
        let f = frame.index;
        let out = match prompt {
            "door" => vec![self.hit(f, "door", 0.82)],
            "ceiling light" => vec![self.hit(f, "ceiling light", 0.74)],
            "lamp" => {
                let mut weak = self.hit(f, "lamp", 0.12);
                if let Some(w) = &mut weak {
                    w.mask_rle = None;
                }
                vec![self.hit(f, "lamp", 0.69), weak]
            }
            "door. handle" => vec![self.hit(f, "door", 0.55), self.hit(f, "handle", 0.61)],
            "wall. switch" => vec![self.hit(f, "switch", 0.58)],
            _ => vec![],
        };
        Ok(out.into_iter().flatten().collect())
    }
}

fn last_user(req: &ModelRequest) -> &str {
    req.messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.text.as_str())
        .unwrap_or("")
}

/// Text between the first `open` after `after` and the next `close`.
fn between<'a>(text: &'a str, after: &str, open: &str, close: &str) -> Option<&'a str> {
    let rest = &text[text.find(after)? + after.len()..];
    let rest = &rest[rest.find(open)? + open.len()..];
    Some(&rest[..rest.find(close)?])
}

/// `(id, label)` for every `- id: "label".` listing line.
fn listing(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| {
            let l = l.strip_prefix("- ")?;
            let (id, rest) = l.split_once(": \"")?;
            let (label, _) = rest.split_once('"')?;
            Some((id.to_owned(), label.to_owned()))
        })
        .collect()
}

fn caption(label: &str) -> &'static str {
    match label {
        "door" => "A brown wooden door with a flat panel.",
        "handle" => "A metal lever handle on a wooden door.",
        "switch" => "A white wall-mounted light switch.",
        "ceiling light" => "A rectangular ceiling light fixture.",
        "lamp" => "An orange table lamp with a shade.",
        _ => "An indoor object.",
    }
}

fn summary(label: &str) -> &'static str {
    match label {
        "door" => "A brown wooden door that opens into the next room.",
        "handle" => "A metal lever handle used to open the door.",
        "switch" => "A white wall light switch that turns on a light.",
        "ceiling light" => "A rectangular ceiling light that lights the room.",
        "lamp" => "An orange table lamp with its own cord.",
        _ => "An indoor object.",
    }
}

fn remote_score(label_of_line: &str) -> (f64, &'static str) {
    if label_of_line.contains("ceiling light") {
        (0.8, "turns on")
    } else if label_of_line.contains("lamp") {
        (0.3, "switches on")
    } else {
        (0.05, "unrelated")
    }
}

/// Deterministic stand-in for the LLM and VLM, keyed on prompt shape.
pub fn script(req: &ModelRequest) -> Result<String, BackendError> {
    let text = last_user(req);
    let reply = if let Some(tag) = between(text, "Object tag:", "\"", "\"") {
        match tag {
            "door" => r#"{"interactable": true, "elements": ["handle"]}"#.to_owned(),
            "wall" => r#"{"interactable": true, "elements": ["switch"]}"#.to_owned(),
            "ceiling light" | "lamp" => r#"{"interactable": true, "elements": ["switch"]}"#.to_owned(),
            _ => r#"{"interactable": false, "elements": []}"#.to_owned(),
        }
    } else if text.starts_with("The image shows") {
        let label = between(text, "labeled", "\"", "\"").unwrap_or("");
        caption(label).to_owned()
    } else if text.starts_with("The following captions") {
        let label = between(text, "labeled", "\"", "\"").unwrap_or("");
        summary(label).to_owned()
    } else if text.starts_with("Object obj-") {
        let object = between(text, "Object ", "\"", "\"").unwrap_or("");
        let element = between(text, "Interactive element ", "\"", "\"").unwrap_or("");
        if object == "door" && element == "handle" {
            r#"{"feasible": true, "relation": "opens"}"#.to_owned()
        } else {
            r#"{"feasible": false, "relation": ""}"#.to_owned()
        }
    } else if text.contains("Which of the listed objects") {
        let objects = listing(between(text, "Objects in the scene:", "\n", "\n\n").unwrap_or(""));
        let targets: Vec<&String> = objects
            .iter()
            .filter(|(_, l)| l.contains("light") || l.contains("lamp"))
            .map(|(id, _)| id)
            .collect();
        serde_json::json!({ "targets": targets }).to_string()
    } else if text.starts_with("The first image shows") {
        let element = between(text, "interactive element", "\"", "\"").unwrap_or("");
        let object = between(text, "The second image shows", "\"", "\"").unwrap_or("");
        format!("The {element} is mounted on the wall and a cable runs from it toward the {object}.")
    } else if text.contains("Candidate objects it may control") {
        let scores: Vec<serde_json::Value> = text
            .lines()
            .filter_map(|l| l.strip_prefix("- ").and_then(|l| l.split_once(": ")))
            .filter(|(id, _)| id.starts_with("obj-"))
            .map(|(id, rest)| {
                let (c, r) = remote_score(rest);
                serde_json::json!({"object_id": id, "confidence": c, "relation": r})
            })
            .collect();
        serde_json::json!({ "scores": scores }).to_string()
    } else if text.starts_with("Unassigned interactive elements") {
        let mut scores = Vec::new();
        let mut current = String::new();
        for l in text.lines() {
            if let Some(rest) = l.strip_prefix("Element ") {
                current = rest.split_whitespace().next().unwrap_or("").to_owned();
            } else if let Some((id, rest)) = l.strip_prefix("- ").and_then(|l| l.split_once(": ")) {
                let (c, r) = remote_score(rest);
                scores.push(serde_json::json!({"element_id": current, "object_id": id, "confidence": c, "relation": r}));
            }
        }
        serde_json::json!({ "scores": scores }).to_string()
    } else if text.starts_with("Objects in the scene:") {
        let objects: BTreeMap<String, String> =
            listing(between(text, "Objects in the scene:", "\n", "\n\n").unwrap_or("")).into_iter().map(|(i, l)| (l, i)).collect();
        let elements: BTreeMap<String, String> = listing(text.split("Interactive elements in the scene:").nth(1).unwrap_or(""))
            .into_iter()
            .map(|(i, l)| (l, i))
            .collect();
        let mut edges = Vec::new();
        if let (Some(e), Some(o)) = (elements.get("handle"), objects.get("door")) {
            edges.push(serde_json::json!({"element_id": e, "object_id": o, "kind": "local", "relation": "opens", "confidence": 1.0}));
        }
        if let Some(e) = elements.get("switch") {
            if let Some(o) = objects.get("lamp") {
                edges.push(serde_json::json!({"element_id": e, "object_id": o, "kind": "remote", "relation": "turns on", "confidence": 0.6}));
            }
            if let Some(o) = objects.get("ceiling light") {
                edges.push(serde_json::json!({"element_id": e, "object_id": o, "kind": "remote", "relation": "turns on", "confidence": 0.5}));
            }
        }
        serde_json::json!({ "edges": edges }).to_string()
    } else if text.starts_with("Here is a functional 3D scene graph") {
        "Press the wall switch next to the lamp; it turns on the ceiling light.".to_owned()
    } else {
        return Err(BackendError::InvalidResponse(format!("unscripted request: {text}")));
    };
    Ok(reply)
}

pub fn scripted_client() -> ModelClient {
    ModelClient::new(Arc::new(CallbackBackend::new("replay", script)))
}

pub const CONFIG: &str = r#"{
  "scenes": ["scene-a"],
  "output_dir": "out",
  "gt_dir": "gt",
  "backends": {
    "detector": {"kind": "fixture", "dir": "detector"},
    "model": {"kind": "replay", "dir": "model"},
    "embeddings": {"kind": "toy"}
  },
  "fusion": {"min_views": 3}
}
"#;

fn gt_node(id: &str, p: &Patch) -> serde_json::Value {
    let z = p.z_range();
    serde_json::json!({
        "id": id,
        "kind": if p.element { "element" } else { "object" },
        "label": p.label,
        "bbox3d": [[p.x[0], p.y[0], z[0]], [p.x[1], p.y[1], z[1]]],
    })
}

pub fn ground_truth() -> serde_json::Value {
    serde_json::json!({
        "scene_id": SCENE_ID,
        "nodes": [
            gt_node("door", patch("door")),
            gt_node("door-handle", patch("handle")),
            gt_node("wall-switch", patch("switch")),
            gt_node("ceiling-light", patch("ceiling light")),
            gt_node("table-lamp", patch("lamp")),
        ],
        "triplets": [
            {"object_id": "door", "element_id": "door-handle", "relation_text": "opens"},
            {"object_id": "ceiling-light", "element_id": "wall-switch", "relation_text": "turns on"},
        ],
    })
}

/// Config over a fixture tree at `root`, writing into `out` and `gt`.
pub fn config_at(root: &Path, out: &Path, gt: Option<&Path>) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&root.join("funcgraph.json")).unwrap();
    cfg.output_dir = out.to_path_buf();
    if let Some(gt) = gt {
        cfg.gt_dir = Some(gt.to_path_buf());
    }
    cfg
}

/// Writes the scene, runs the scripted backends over it while recording
/// replay fixtures, and stores the resulting golden graph.
pub fn generate(root: &Path) {
    for sub in ["detector", "model"] {
        std::fs::create_dir_all(root.join(sub)).unwrap();
    }
    std::fs::write(root.join("funcgraph.json"), CONFIG).unwrap();
    write_scene(&root.join(SCENE_ID));
    let gt = serde_json::to_string_pretty(&ground_truth()).unwrap() + "\n";
    std::fs::create_dir_all(root.join("gt")).unwrap();
    std::fs::write(root.join("gt").join(format!("{SCENE_ID}.json")), gt).unwrap();

    let work = tempfile::tempdir().unwrap();
    let record = |cfg: PipelineConfig| {
        let detector = Box::new(RecordingDetector::new(CannedDetector::default(), root.join("detector")));
        let client = ModelClient::new(Arc::new(CallbackBackend::new("replay", script))).with_cache_dir(root.join("model"));
        let p = Pipeline::with_backends(cfg, detector, client).unwrap();
        p.run(RunTarget::All, None).unwrap();
        p
    };

    let base = config_at(root, &work.path().join("base"), None);
    let p = record(base.clone());
    p.qa(SCENE_ID, QUESTION).unwrap();
    let golden = root.join("golden");
    std::fs::create_dir_all(&golden).unwrap();
    std::fs::copy(
        work.path().join("base").join(SCENE_ID).join("graph.json"),
        golden.join("graph.json"),
    )
    .unwrap();

    let mut direct = config_at(root, &work.path().join("direct"), None);
    direct.reasoning.sequential = false;
    record(direct);
    let mut scene_ctx = config_at(root, &work.path().join("scene-context"), None);
    scene_ctx.reasoning.remote_context = funcgraph_core::reasoning::RemoteContext::Scene;
    record(scene_ctx);
}
