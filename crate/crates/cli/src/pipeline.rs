//! Stage driver. Each stage of each scene writes its artifacts under
//! `<output_dir>/<scene>/` plus a checkpoint recording the digest of its
//! inputs and of every file it produced.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use funcgraph_core::backend::ModelClient;
use funcgraph_core::canonical::{self, sha256_hex};
use funcgraph_core::description::{self, NodeDescription};
use funcgraph_core::detection::{self, Detection2D, Detector, FrameDetections};
use funcgraph_core::eval::embedding::EmbeddingBackend;
use funcgraph_core::eval::{self, EvalReport, GroundTruthGraph};
use funcgraph_core::fusion::{self, NodeCandidate};
use funcgraph_core::graph::{self, FunctionalSceneGraph, Provenance, QaAnswer};
use funcgraph_core::ply;
use funcgraph_core::prompts::PromptSet;
use funcgraph_core::reasoning::{self, FunctionalEdge, RemoteProposal, SceneViews};
use funcgraph_core::scene::{self, SceneSequence};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing checkpoint for stage {0:?}")]
    MissingCheckpoint(String),
    #[error("output directory {path} is locked by process {pid}")]
    Locked { path: PathBuf, pid: u32 },
    #[error("stage {stage} failed for scene {scene}: {source}")]
    Stage {
        stage: &'static str,
        scene: String,
        source: BoxError,
    },
    #[error("unknown scene {0}")]
    UnknownScene(String),
    #[error("{0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl PipelineError {
    /// Process exit status: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Detect,
    Fuse,
    Describe,
    Reason,
    Graph,
}

pub const STAGES: [Stage; 5] = [Stage::Detect, Stage::Fuse, Stage::Describe, Stage::Reason, Stage::Graph];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Detect => "detect",
            Stage::Fuse => "fuse",
            Stage::Describe => "describe",
            Stage::Reason => "reason",
            Stage::Graph => "graph",
        }
    }

    pub fn previous(self) -> Option<Stage> {
        let i = STAGES.iter().position(|&s| s == self).expect("listed stage");
        i.checked_sub(1).map(|j| STAGES[j])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    pub stage: Stage,
    pub config_digest: String,
    pub input_digest: String,
    /// Artifact path relative to the scene directory, mapped to its SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Seconds since the Unix epoch.
    pub completed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageOutcome {
    pub scene: String,
    pub stage: Stage,
    pub ran: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsArtifact {
    pub scene_id: String,
    pub frames: Vec<FrameDetections>,
}

impl DetectionsArtifact {
    /// All detections in frame order with a JSON-pointer reference to each mask.
    pub fn flatten(&self) -> (Vec<Detection2D>, Vec<String>) {
        let mut dets = Vec::new();
        let mut refs = Vec::new();
        for (fi, f) in self.frames.iter().enumerate() {
            for (di, d) in f.detections.iter().enumerate() {
                dets.push(d.clone());
                refs.push(format!("{DETECTIONS}#/frames/{fi}/detections/{di}/mask_rle"));
            }
        }
        (dets, refs)
    }
}

pub const DETECTIONS: &str = "detections.json";
pub const CANDIDATES: &str = "candidates.json";
pub const CANDIDATE_CLOUDS: &str = "candidates";
pub const DESCRIPTIONS: &str = "descriptions.json";
pub const EDGES_LOCAL: &str = "edges_local.json";
pub const PROPOSALS_REMOTE: &str = "proposals_remote.json";
pub const EDGES: &str = "edges.json";
pub const GRAPH: &str = "graph.json";
pub const REPORT: &str = "report.json";

pub fn scene_dir(cfg: &PipelineConfig, scene_id: &str) -> PathBuf {
    cfg.output_dir.join(scene_id)
}

pub fn checkpoint_path(scene_dir: &Path, stage: Stage) -> PathBuf {
    scene_dir.join("checkpoints").join(format!("{}.json", stage.name()))
}

pub fn read_checkpoint(scene_dir: &Path, stage: Stage) -> Option<StageCheckpoint> {
    let bytes = fs::read(checkpoint_path(scene_dir, stage)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn outputs_intact(scene_dir: &Path, cp: &StageCheckpoint) -> bool {
    cp.outputs.iter().all(|(rel, digest)| {
        fs::read(scene_dir.join(rel))
            .map(|b| &sha256_hex(&b) == digest)
            .unwrap_or(false)
    })
}

/// A checkpoint whose recorded outputs are all present and unmodified.
pub fn valid_checkpoint(scene_dir: &Path, stage: Stage) -> Option<StageCheckpoint> {
    read_checkpoint(scene_dir, stage).filter(|cp| outputs_intact(scene_dir, cp))
}

/// Digest over every file of a scene directory, by relative path.
pub fn scene_digest(path: &Path) -> io::Result<String> {
    let mut files = BTreeMap::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(io::Error::other)?;
        if entry.file_type().is_file() {
            let rel = entry
                .path()
                .strip_prefix(path)
                .expect("walk stays under root")
                .to_string_lossy()
                .replace('\\', "/");
            files.insert(rel, sha256_hex(&fs::read(entry.path())?));
        }
    }
    Ok(canonical::digest_of(&files))
}

/// Exclusive ownership of an output directory for the duration of a run.
/// A lock left by a process that no longer exists is taken over.
pub struct OutputLock {
    path: PathBuf,
}

fn process_alive(pid: u32) -> bool {
    let proc_root = Path::new("/proc");
    !proc_root.is_dir() || proc_root.join(pid.to_string()).exists()
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        let me = std::process::id();
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    io::Write::write_all(&mut f, me.to_string().as_bytes())?;
                    return Ok(OutputLock { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if process_alive(pid) => {
                            return Err(PipelineError::Locked { path, pid });
                        }
                        _ => {
                            tracing::warn!(path = %path.display(), "removing stale lock");
                            match fs::remove_file(&path) {
                                Ok(()) => {}
                                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                                Err(e) => return Err(e.into()),
                            }
                        }
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    prompts: PromptSet,
    detector: Box<dyn Detector>,
    client: ModelClient,
    embeddings: Box<dyn EmbeddingBackend>,
    config_digest: String,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))
}

/// Reads `candidates.json` and attaches each candidate's point cloud.
pub fn load_candidates(scene_dir: &Path) -> Result<Vec<NodeCandidate>, PipelineError> {
    let mut candidates: Vec<NodeCandidate> = read_json(&scene_dir.join(CANDIDATES))?;
    for c in &mut candidates {
        let path = scene_dir.join(CANDIDATE_CLOUDS).join(format!("{}.ply", c.id));
        let bytes = fs::read(&path).map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))?;
        let points = ply::read_ply(&bytes).map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))?;
        c.set_points(points)
            .map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))?;
    }
    Ok(candidates)
}

/// Candidates with their stored descriptions attached.
pub fn load_described(scene_dir: &Path) -> Result<Vec<NodeCandidate>, PipelineError> {
    let mut candidates = load_candidates(scene_dir)?;
    let mut descriptions: BTreeMap<String, NodeDescription> = read_json(&scene_dir.join(DESCRIPTIONS))?;
    for c in &mut candidates {
        c.description = descriptions.remove(&c.id);
    }
    Ok(candidates)
}

struct SceneRun<'a> {
    pipeline: &'a Pipeline,
    id: String,
    source: PathBuf,
    dir: PathBuf,
    scene: Option<SceneSequence>,
    source_digest: Option<String>,
}

impl SceneRun<'_> {
    fn fail<E: Into<BoxError>>(&self, stage: Stage) -> impl Fn(E) -> PipelineError + '_ {
        move |e| PipelineError::Stage {
            stage: stage.name(),
            scene: self.id.clone(),
            source: e.into(),
        }
    }

    fn scene(&mut self, stage: Stage) -> Result<&SceneSequence, PipelineError> {
        if self.scene.is_none() {
            let loaded = scene::load_scene(&self.source).map_err(self.fail(stage))?;
            self.scene = Some(loaded);
        }
        Ok(self.scene.as_ref().expect("loaded"))
    }

    fn source_digest(&mut self) -> Result<String, PipelineError> {
        if self.source_digest.is_none() {
            self.source_digest = Some(scene_digest(&self.source)?);
        }
        Ok(self.source_digest.clone().expect("computed"))
    }

    fn upstream(&self, stage: Stage) -> Result<BTreeMap<String, String>, PipelineError> {
        valid_checkpoint(&self.dir, stage)
            .map(|cp| cp.outputs)
            .ok_or_else(|| PipelineError::MissingCheckpoint(stage.name().into()))
    }

    fn input_digest(&mut self, stage: Stage) -> Result<String, PipelineError> {
        let p = self.pipeline;
        let cfg = &p.cfg;
        let ids = cfg.backend_ids();
        let prompts = p.prompts.digest();
        let inputs = match stage {
            Stage::Detect => json!({
                "detection": cfg.detection,
                "detector": ids["detector"],
                "model": ids["model"],
                "prompts": prompts,
                "scene": self.source_digest()?,
            }),
            Stage::Fuse => json!({
                "fusion": cfg.fusion,
                "embeddings": ids["embeddings"],
                "detect": self.upstream(Stage::Detect)?,
                "scene": self.source_digest()?,
            }),
            Stage::Describe => json!({
                "description": cfg.description,
                "model": ids["model"],
                "prompts": prompts,
                "fuse": self.upstream(Stage::Fuse)?,
                "scene": self.source_digest()?,
            }),
            Stage::Reason => json!({
                "reasoning": cfg.reasoning,
                "description": cfg.description,
                "model": ids["model"],
                "prompts": prompts,
                "fuse": self.upstream(Stage::Fuse)?,
                "describe": self.upstream(Stage::Describe)?,
                "scene": self.source_digest()?,
            }),
            Stage::Graph => json!({
                "config": p.config_digest,
                "backends": ids,
                "fuse": self.upstream(Stage::Fuse)?,
                "describe": self.upstream(Stage::Describe)?,
                "reason": self.upstream(Stage::Reason)?,
            }),
        };
        Ok(canonical::digest_of(&json!({"stage": stage.name(), "inputs": inputs})))
    }

    fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome, PipelineError> {
        if let Some(prev) = stage.previous() {
            self.upstream(prev)?;
        }
        let input_digest = self.input_digest(stage)?;
        if let Some(cp) = valid_checkpoint(&self.dir, stage) {
            if cp.input_digest == input_digest {
                tracing::info!(scene = %self.id, stage = stage.name(), "up to date");
                return Ok(StageOutcome {
                    scene: self.id.clone(),
                    stage,
                    ran: false,
                });
            }
        }
        tracing::info!(scene = %self.id, stage = stage.name(), "running");
        let _ = fs::remove_file(checkpoint_path(&self.dir, stage));
        let files = match stage {
            Stage::Detect => self.detect()?,
            Stage::Fuse => self.fuse()?,
            Stage::Describe => self.describe()?,
            Stage::Reason => self.reason()?,
            Stage::Graph => self.graph()?,
        };
        let mut outputs = BTreeMap::new();
        for rel in files {
            let digest = sha256_hex(&fs::read(self.dir.join(&rel))?);
            outputs.insert(rel, digest);
        }
        let cp = StageCheckpoint {
            stage,
            config_digest: self.pipeline.config_digest.clone(),
            input_digest,
            outputs,
            completed_at: unix_now(),
        };
        canonical::write_canonical(&checkpoint_path(&self.dir, stage), &cp)?;
        Ok(StageOutcome {
            scene: self.id.clone(),
            stage,
            ran: true,
        })
    }

    fn write(&self, rel: &str, value: &impl Serialize) -> Result<String, PipelineError> {
        canonical::write_canonical(&self.dir.join(rel), value)?;
        Ok(rel.to_owned())
    }

    fn detect(&mut self) -> Result<Vec<String>, PipelineError> {
        let fail = Stage::Detect;
        let p = self.pipeline;
        let id = self.id.clone();
        let scene = self.scene(fail)?;
        let frames = scene
            .frames
            .par_iter()
            .map(|f| detection::detect_frame(&id, f, p.detector.as_ref(), &p.client, &p.prompts, &p.cfg.detection))
            .collect::<Result<Vec<_>, _>>();
        let frames = frames.map_err(self.fail(fail))?;
        let artifact = DetectionsArtifact {
            scene_id: self.id.clone(),
            frames,
        };
        Ok(vec![self.write(DETECTIONS, &artifact)?])
    }

    fn fuse(&mut self) -> Result<Vec<String>, PipelineError> {
        let artifact: DetectionsArtifact = read_json(&self.dir.join(DETECTIONS))?;
        let (dets, refs) = artifact.flatten();
        let p = self.pipeline;
        let scene = self.scene(Stage::Fuse)?;
        let candidates = fusion::fuse_scene(&dets, &refs, scene, &p.cfg.fusion, p.embeddings.as_ref());
        let candidates = candidates.map_err(self.fail(Stage::Fuse))?;

        let clouds = self.dir.join(CANDIDATE_CLOUDS);
        match fs::remove_dir_all(&clouds) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        let mut files = vec![self.write(CANDIDATES, &candidates)?];
        for c in &candidates {
            let rel = format!("{CANDIDATE_CLOUDS}/{}.ply", c.id);
            canonical::write_atomic(&self.dir.join(&rel), &ply::write_ply(&c.points))?;
            files.push(rel);
        }
        Ok(files)
    }

    fn describe(&mut self) -> Result<Vec<String>, PipelineError> {
        let candidates = load_candidates(&self.dir)?;
        let p = self.pipeline;
        let scene = self.scene(Stage::Describe)?;
        let descriptions = description::describe_all(&candidates, scene, &p.client, &p.prompts, &p.cfg.description);
        let descriptions = descriptions.map_err(self.fail(Stage::Describe))?;
        let keyed: BTreeMap<&str, &NodeDescription> =
            candidates.iter().map(|c| c.id.as_str()).zip(descriptions.iter()).collect();
        Ok(vec![self.write(DESCRIPTIONS, &keyed)?])
    }

    fn reason(&mut self) -> Result<Vec<String>, PipelineError> {
        let candidates = load_described(&self.dir)?;
        let p = self.pipeline;
        let scene = self.scene(Stage::Reason)?;
        let views = SceneViews {
            scene,
            cfg: &p.cfg.description,
        };
        let out = reasoning::reason(&candidates, &views, &p.client, &p.prompts, &p.cfg.reasoning);
        let out = out.map_err(self.fail(Stage::Reason))?;
        Ok(vec![
            self.write(EDGES_LOCAL, &out.local_edges)?,
            self.write(PROPOSALS_REMOTE, &out.remote_proposals)?,
            self.write(EDGES, &out.edges)?,
        ])
    }

    fn graph(&mut self) -> Result<Vec<String>, PipelineError> {
        let candidates = load_described(&self.dir)?;
        let local: Vec<FunctionalEdge> = read_json(&self.dir.join(EDGES_LOCAL))?;
        let _: Vec<RemoteProposal> = read_json(&self.dir.join(PROPOSALS_REMOTE))?;
        let edges: Vec<FunctionalEdge> = read_json(&self.dir.join(EDGES))?;
        let provenance = self.pipeline.provenance();
        let graph = graph::assemble(&self.id, &candidates, &local, &edges, provenance).map_err(self.fail(Stage::Graph))?;
        canonical::write_atomic(&self.dir.join(GRAPH), graph.to_json().as_bytes())?;
        Ok(vec![GRAPH.to_owned()])
    }
}

/// What `run` should execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunTarget {
    All,
    Stage(Stage),
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        let detector = cfg.detector();
        let client = cfg.model_client();
        Self::with_backends(cfg, detector, client)
    }

    /// Uses the given detector and model client instead of the configured ones.
    pub fn with_backends(cfg: PipelineConfig, detector: Box<dyn Detector>, client: ModelClient) -> Result<Self, PipelineError> {
        let prompts = cfg.prompts()?;
        let embeddings = cfg.label_embeddings();
        let config_digest = cfg.digest()?;
        Ok(Pipeline {
            cfg,
            prompts,
            detector,
            client,
            embeddings,
            config_digest,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_digest: self.config_digest.clone(),
            backends: self
                .cfg
                .backend_ids()
                .into_iter()
                .map(|(k, v)| (k.to_owned(), v))
                .collect(),
            extra: BTreeMap::new(),
        }
    }

    fn scene_run(&self, id: &str) -> Result<SceneRun<'_>, PipelineError> {
        let source = self
            .cfg
            .scene_path(id)
            .ok_or_else(|| PipelineError::UnknownScene(id.to_owned()))?
            .to_path_buf();
        Ok(SceneRun {
            pipeline: self,
            id: id.to_owned(),
            source,
            dir: scene_dir(&self.cfg, id),
            scene: None,
            source_digest: None,
        })
    }

    /// Runs `target` for the given scenes (all configured scenes when `None`).
    pub fn run(&self, target: RunTarget, only: Option<&[String]>) -> Result<Vec<StageOutcome>, PipelineError> {
        self.cfg.check_inputs()?;
        let _lock = OutputLock::acquire(&self.cfg.output_dir)?;
        let ids: Vec<String> = match only {
            Some(list) => list.to_vec(),
            None => self.cfg.scene_ids(),
        };
        let stages: Vec<Stage> = match target {
            RunTarget::All => STAGES.to_vec(),
            RunTarget::Stage(s) => vec![s],
        };
        let mut outcomes = Vec::new();
        for id in &ids {
            let mut run = self.scene_run(id)?;
            for &stage in &stages {
                outcomes.push(run.run_stage(stage)?);
            }
        }
        Ok(outcomes)
    }

    pub fn load_graph(&self, scene_id: &str) -> Result<FunctionalSceneGraph, PipelineError> {
        let path = scene_dir(&self.cfg, scene_id).join(GRAPH);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(PipelineError::MissingCheckpoint(Stage::Graph.name().into()))
            }
            Err(e) => return Err(e.into()),
        };
        FunctionalSceneGraph::from_json(&text).map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))
    }

    /// Scores every scene that has a ground-truth file and writes `report.json`.
    pub fn evaluate(&self) -> Result<EvalReport, PipelineError> {
        let gt_dir = self.cfg.gt_dir();
        let mut pairs = Vec::new();
        for id in self.cfg.scene_ids() {
            let gt_path = gt_dir.join(format!("{id}.json"));
            let text = match fs::read_to_string(&gt_path) {
                Ok(t) => t,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    tracing::warn!(scene = %id, "no ground truth, skipped");
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let gt = GroundTruthGraph::from_json(&text)
                .map_err(|e| PipelineError::Artifact(format!("{}: {e}", gt_path.display())))?;
            pairs.push((self.load_graph(&id)?, gt));
        }
        if pairs.is_empty() {
            return Err(PipelineError::Artifact(format!(
                "no ground-truth graphs found in {}",
                gt_dir.display()
            )));
        }
        let labels = self.cfg.label_embeddings();
        let relations = self.cfg.relation_embeddings();
        let report = eval::evaluate(&pairs, &self.cfg.eval, labels.as_ref(), relations.as_ref()).map_err(|e| {
            PipelineError::Stage {
                stage: "eval",
                scene: pairs.iter().map(|(g, _)| g.scene_id.as_str()).collect::<Vec<_>>().join(","),
                source: e.into(),
            }
        })?;
        canonical::write_canonical(&self.cfg.output_dir.join(REPORT), &report)?;
        Ok(report)
    }

    pub fn qa(&self, scene_id: &str, question: &str) -> Result<QaAnswer, PipelineError> {
        let graph = self.load_graph(scene_id)?;
        graph::qa_query(&graph, question, &self.client, &self.prompts).map_err(|e| PipelineError::Stage {
            stage: "qa",
            scene: scene_id.to_owned(),
            source: e.into(),
        })
    }
}
