//! Functional edge inference: local (part-of) relationships first, then
//! confidence-scored remote relationships for the elements left over.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{self, BackendError, ImagePayload, ModelClient, ModelRequest};
use crate::description::{self, DescriptionConfig, DescriptionError};
use crate::detection::NodeKind;
use crate::fusion::NodeCandidate;
use crate::geometry::Aabb;
use crate::prompts::{self, PromptSet};
use crate::scene::SceneSequence;

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("unparsable model output for {context}: {reason}")]
    UnparsableModelOutput { context: String, reason: String },
    #[error(transparent)]
    Description(#[from] DescriptionError),
    #[error("{id} is not a known {kind} candidate")]
    UnknownNode { id: String, kind: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalEdge {
    pub element_id: String,
    pub object_id: String,
    pub kind: EdgeKind,
    pub relation: String,
    pub confidence: f64,
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteProposal {
    pub element_id: String,
    pub object_id: String,
    pub feasibility_text: String,
    pub confidence: f64,
    pub relation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    #[default]
    Best,
    All,
}

/// How much context a remote scoring call sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RemoteContext {
    #[default]
    PerElement,
    Scene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasoningConfig {
    pub local_overlap_threshold: f64,
    pub local_margin: f64,
    /// Two-stage local then remote reasoning; off asks for all edges at once.
    pub sequential: bool,
    pub select_mode: SelectMode,
    pub remote_context: RemoteContext,
    pub max_tokens: u32,
    pub feasibility_max_tokens: u32,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        ReasoningConfig {
            local_overlap_threshold: 0.5,
            local_margin: 0.05,
            sequential: true,
            select_mode: SelectMode::Best,
            remote_context: RemoteContext::PerElement,
            max_tokens: 384,
            feasibility_max_tokens: 160,
        }
    }
}

pub const DEFAULT_RELATION: &str = "operates";

/// Fraction of the element's points inside the object's box grown by
/// `margin` on every side.
pub fn spatial_overlap(object: &NodeCandidate, element: &NodeCandidate, margin: f64) -> f64 {
    if element.points.is_empty() {
        return 0.0;
    }
    let region = object.bbox3d.expanded(margin);
    let inside = element.points.iter().filter(|p| region.contains(p)).count();
    inside as f64 / element.points.len() as f64
}

/// Source of top-view crops shown to the VLM during feasibility checks.
pub trait ViewImages: Sync {
    fn top_view(&self, candidate: &NodeCandidate) -> Result<ImagePayload, ReasoningError>;
}

pub struct SceneViews<'a> {
    pub scene: &'a SceneSequence,
    pub cfg: &'a DescriptionConfig,
}

impl ViewImages for SceneViews<'_> {
    fn top_view(&self, candidate: &NodeCandidate) -> Result<ImagePayload, ReasoningError> {
        Ok(description::top_view_image(candidate, self.scene, self.cfg)?)
    }
}

fn describe(c: &NodeCandidate) -> String {
    c.description
        .as_ref()
        .map(|d| d.summary.clone())
        .unwrap_or_else(|| c.label())
}

fn fmt_box(b: &Aabb) -> String {
    format!(
        "[[{:.3}, {:.3}, {:.3}], [{:.3}, {:.3}, {:.3}]]",
        b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z
    )
}

fn node_listing(nodes: &[&NodeCandidate]) -> String {
    nodes
        .iter()
        .map(|n| format!("- {}: \"{}\". {} Box: {}", n.id, n.label(), describe(n), fmt_box(&n.bbox3d)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn unparsable(context: String) -> impl FnOnce(String) -> ReasoningError {
    move |reason| ReasoningError::UnparsableModelOutput { context, reason }
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, String> {
    let v = backend::extract_json(text).ok_or_else(|| "no JSON object in reply".to_owned())?;
    serde_json::from_value(v).map_err(|e| e.to_string())
}

fn clean_relation(r: &str) -> String {
    let r = r.split_whitespace().collect::<Vec<_>>().join(" ");
    if r.is_empty() {
        DEFAULT_RELATION.to_owned()
    } else {
        r
    }
}

fn clamp_confidence(c: f64, context: &str) -> Result<f64, String> {
    if !c.is_finite() {
        return Err(format!("confidence {c} is not a number"));
    }
    if !(0.0..=1.0).contains(&c) {
        tracing::warn!(confidence = c, context, "confidence outside [0, 1], clamping");
    }
    Ok(c.clamp(0.0, 1.0))
}

#[derive(Deserialize)]
struct LocalReply {
    feasible: bool,
    #[serde(default)]
    relation: String,
}

pub fn local_request(object: &NodeCandidate, element: &NodeCandidate, prompts: &PromptSet, cfg: &ReasoningConfig) -> ModelRequest {
    let object_label = object.label();
    let element_label = element.label();
    let text = prompts::render(
        &prompts.reason_local,
        &[
            ("object_id", &object.id),
            ("object_label", &object_label),
            ("object_description", &describe(object)),
            ("object_bbox", &fmt_box(&object.bbox3d)),
            ("element_id", &element.id),
            ("element_label", &element_label),
            ("element_description", &describe(element)),
            ("element_bbox", &fmt_box(&element.bbox3d)),
        ],
    );
    ModelRequest::llm()
        .system(prompts.system.trim_end())
        .user(text)
        .max_tokens(cfg.max_tokens)
}

/// Local edges plus the ids of the elements they claim.
pub fn infer_local_edges(
    objects: &[NodeCandidate],
    elements: &[NodeCandidate],
    client: &ModelClient,
    prompts: &PromptSet,
    cfg: &ReasoningConfig,
) -> Result<(Vec<FunctionalEdge>, BTreeSet<String>), ReasoningError> {
    let per_element: Vec<Option<FunctionalEdge>> = elements
        .par_iter()
        .map(|element| {
            // (overlap, volume, object id, relation)
            let mut feasible: Vec<(f64, f64, &str, String)> = Vec::new();
            for object in objects {
                let overlap = spatial_overlap(object, element, cfg.local_margin);
                if overlap < cfg.local_overlap_threshold {
                    continue;
                }
                let request = local_request(object, element, prompts, cfg);
                let reply: LocalReply = backend::complete_structured(client, &request, parse_json)?
                    .map_err(unparsable(format!("local pair {} -> {}", element.id, object.id)))?;
                if reply.feasible {
                    feasible.push((overlap, object.bbox3d.volume(), &object.id, clean_relation(&reply.relation)));
                }
            }
            let best = feasible.into_iter().min_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(a.1.total_cmp(&b.1))
                    .then(a.2.cmp(b.2))
            });
            Ok(best.map(|(_, _, object_id, relation)| FunctionalEdge {
                element_id: element.id.clone(),
                object_id: object_id.to_owned(),
                kind: EdgeKind::Local,
                relation,
                confidence: 1.0,
                evidence: Vec::new(),
            }))
        })
        .collect::<Result<_, ReasoningError>>()?;
    let edges: Vec<FunctionalEdge> = per_element.into_iter().flatten().collect();
    let assigned = edges.iter().map(|e| e.element_id.clone()).collect();
    Ok((sorted(edges), assigned))
}

#[derive(Deserialize)]
struct TargetsReply {
    targets: Vec<serde_json::Value>,
}

/// `(element_id, object_id)` pairs proposed by the LLM, restricted to known
/// object ids, in reply order without repeats.
pub fn propose_remote_targets(
    elements: &[&NodeCandidate],
    objects: &[NodeCandidate],
    client: &ModelClient,
    prompts: &PromptSet,
    cfg: &ReasoningConfig,
) -> Result<Vec<(String, String)>, ReasoningError> {
    let known: BTreeSet<&str> = objects.iter().map(|o| o.id.as_str()).collect();
    let object_refs: Vec<&NodeCandidate> = objects.iter().collect();
    let listing = node_listing(&object_refs);
    let per_element: Vec<Vec<(String, String)>> = elements
        .par_iter()
        .map(|element| {
            let label = element.label();
            let text = prompts::render(
                &prompts.reason_remote_targets,
                &[
                    ("element_id", &element.id),
                    ("element_label", &label),
                    ("element_description", &describe(element)),
                    ("element_bbox", &fmt_box(&element.bbox3d)),
                    ("objects", &listing),
                ],
            );
            let request = ModelRequest::llm()
                .system(prompts.system.trim_end())
                .user(text)
                .max_tokens(cfg.max_tokens);
            let reply: TargetsReply = backend::complete_structured(client, &request, parse_json)?
                .map_err(unparsable(format!("remote targets for {}", element.id)))?;
            let mut seen = BTreeSet::new();
            let mut pairs = Vec::new();
            for t in reply.targets {
                let id = match t {
                    serde_json::Value::String(s) => s.trim().to_owned(),
                    other => other.to_string(),
                };
                if !known.contains(id.as_str()) {
                    tracing::warn!(element = %element.id, target = %id, "proposed target is not a known object, dropped");
                    continue;
                }
                if seen.insert(id.clone()) {
                    pairs.push((element.id.clone(), id));
                }
            }
            Ok(pairs)
        })
        .collect::<Result<_, ReasoningError>>()?;
    Ok(per_element.into_iter().flatten().collect())
}

pub fn feasibility_request(
    element: &NodeCandidate,
    object: &NodeCandidate,
    element_image: ImagePayload,
    object_image: ImagePayload,
    prompts: &PromptSet,
    cfg: &ReasoningConfig,
) -> ModelRequest {
    let element_label = element.label();
    let object_label = object.label();
    let text = prompts::render(
        &prompts.reason_feasibility,
        &[
            ("element_id", &element.id),
            ("element_label", &element_label),
            ("element_description", &describe(element)),
            ("object_id", &object.id),
            ("object_label", &object_label),
            ("object_description", &describe(object)),
        ],
    );
    ModelRequest::vlm()
        .system(prompts.system.trim_end())
        .user(text)
        .image(element_image)
        .image(object_image)
        .max_tokens(cfg.feasibility_max_tokens)
}

/// Free-text VLM assessment of whether `element` can operate `object`.
pub fn assess_feasibility(
    element: &NodeCandidate,
    object: &NodeCandidate,
    images: &dyn ViewImages,
    client: &ModelClient,
    prompts: &PromptSet,
    cfg: &ReasoningConfig,
) -> Result<String, ReasoningError> {
    let request = feasibility_request(
        element,
        object,
        images.top_view(element)?,
        images.top_view(object)?,
        prompts,
        cfg,
    );
    Ok(client.complete(&request)?.text.trim().to_owned())
}

/// A proposed pair with its feasibility assessment, awaiting a score.
#[derive(Debug, Clone, PartialEq)]
pub struct AssessedPair {
    pub element_id: String,
    pub object_id: String,
    pub feasibility_text: String,
}

#[derive(Deserialize)]
struct ScoreEntry {
    #[serde(default)]
    element_id: Option<String>,
    object_id: String,
    confidence: f64,
    #[serde(default)]
    relation: String,
}

#[derive(Deserialize)]
struct ScoresReply {
    scores: Vec<ScoreEntry>,
}

fn apply_scores(
    pairs: &[&AssessedPair],
    entries: Vec<ScoreEntry>,
    context: &str,
) -> Result<Vec<RemoteProposal>, String> {
    let mut by_pair: BTreeMap<(String, String), (f64, String)> = BTreeMap::new();
    for e in entries {
        let object_id = e.object_id.trim().to_owned();
        let element_id = match e.element_id {
            Some(id) => id.trim().to_owned(),
            None => match pairs.first() {
                Some(p) => p.element_id.clone(),
                None => continue,
            },
        };
        let confidence = clamp_confidence(e.confidence, context)?;
        by_pair.entry((element_id, object_id)).or_insert((confidence, e.relation));
    }
    let mut out = Vec::new();
    for p in pairs {
        match by_pair.remove(&(p.element_id.clone(), p.object_id.clone())) {
            Some((confidence, relation)) => out.push(RemoteProposal {
                element_id: p.element_id.clone(),
                object_id: p.object_id.clone(),
                feasibility_text: p.feasibility_text.clone(),
                confidence,
                relation: clean_relation(&relation),
            }),
            None => tracing::warn!(element = %p.element_id, object = %p.object_id, "reply has no score for pair, dropped"),
        }
    }
    for (element_id, object_id) in by_pair.keys() {
        tracing::warn!(%element_id, %object_id, "score for a pair that was not proposed, ignored");
    }
    Ok(out)
}

/// Scores every assessed pair. Confidences are clamped to [0, 1] and kept
/// as the model expressed them.
pub fn score_remote_edges(
    pairs: &[AssessedPair],
    elements: &[NodeCandidate],
    client: &ModelClient,
    prompts: &PromptSet,
    cfg: &ReasoningConfig,
) -> Result<Vec<RemoteProposal>, ReasoningError> {
    let mut grouped: BTreeMap<&str, Vec<&AssessedPair>> = BTreeMap::new();
    for p in pairs {
        grouped.entry(&p.element_id).or_default().push(p);
    }
    let element = |id: &str| -> Result<&NodeCandidate, ReasoningError> {
        elements.iter().find(|e| e.id == id).ok_or_else(|| ReasoningError::UnknownNode {
            id: id.to_owned(),
            kind: "element",
        })
    };
    let pair_lines = |ps: &[&AssessedPair]| -> String {
        ps.iter()
            .map(|p| format!("- {}: {}", p.object_id, p.feasibility_text))
            .collect::<Vec<_>>()
            .join("\n")
    };

    match cfg.remote_context {
        RemoteContext::PerElement => {
            let groups: Vec<(&str, Vec<&AssessedPair>)> = grouped.into_iter().collect();
            let scored: Vec<Vec<RemoteProposal>> = groups
                .par_iter()
                .map(|(element_id, ps)| {
                    let el = element(element_id)?;
                    let label = el.label();
                    let text = prompts::render(
                        &prompts.reason_remote_score,
                        &[
                            ("element_id", &el.id),
                            ("element_label", &label),
                            ("element_description", &describe(el)),
                            ("pairs", &pair_lines(ps)),
                        ],
                    );
                    let request = ModelRequest::llm()
                        .system(prompts.system.trim_end())
                        .user(text)
                        .max_tokens(cfg.max_tokens);
                    let context = format!("remote scores for {element_id}");
                    let parse = |t: &str| -> Result<Vec<RemoteProposal>, String> {
                        let reply: ScoresReply = parse_json(t)?;
                        let entries = reply
                            .scores
                            .into_iter()
                            .map(|e| ScoreEntry {
                                element_id: Some(el.id.clone()),
                                ..e
                            })
                            .collect();
                        apply_scores(ps, entries, &context)
                    };
                    backend::complete_structured(client, &request, parse)?.map_err(unparsable(context.clone()))
                })
                .collect::<Result<_, ReasoningError>>()?;
            Ok(scored.into_iter().flatten().collect())
        }
        RemoteContext::Scene => {
            if grouped.is_empty() {
                return Ok(Vec::new());
            }
            let mut blocks = Vec::new();
            for (element_id, ps) in &grouped {
                let el = element(element_id)?;
                blocks.push(format!(
                    "Element {} (\"{}\"). {}\n{}",
                    el.id,
                    el.label(),
                    describe(el),
                    pair_lines(ps)
                ));
            }
            let text = prompts::render(&prompts.reason_remote_scene, &[("elements", &blocks.join("\n\n"))]);
            let request = ModelRequest::llm()
                .system(prompts.system.trim_end())
                .user(text)
                .max_tokens(cfg.max_tokens);
            let all: Vec<&AssessedPair> = grouped.values().flatten().copied().collect();
            let context = "scene-wide remote scores".to_owned();
            let parse = |t: &str| -> Result<Vec<RemoteProposal>, String> {
                let reply: ScoresReply = parse_json(t)?;
                if reply.scores.iter().any(|e| e.element_id.is_none()) {
                    return Err("every score needs an element_id".into());
                }
                apply_scores(&all, reply.scores, &context)
            };
            Ok(backend::complete_structured(client, &request, parse)?.map_err(unparsable(context.clone()))?)
        }
    }
}

fn sorted(mut edges: Vec<FunctionalEdge>) -> Vec<FunctionalEdge> {
    edges.sort_by(|a, b| (&a.element_id, &a.object_id).cmp(&(&b.element_id, &b.object_id)));
    edges
}

/// Best keeps each element's highest-confidence edge (ties to the smaller
/// object id); all keeps every edge.
fn select<T>(items: Vec<T>, mode: SelectMode, key: impl Fn(&T) -> (&str, &str, f64)) -> Vec<T> {
    if mode == SelectMode::All {
        return items;
    }
    let mut best: BTreeMap<String, T> = BTreeMap::new();
    for item in items {
        let (element_id, object_id, confidence) = key(&item);
        let replace = match best.get(element_id) {
            None => true,
            Some(cur) => {
                let (_, cur_obj, cur_conf) = key(cur);
                confidence > cur_conf || (confidence == cur_conf && object_id < cur_obj)
            }
        };
        if replace {
            best.insert(element_id.to_owned(), item);
        }
    }
    best.into_values().collect()
}

pub fn select_remote_edges(proposals: &[RemoteProposal], mode: SelectMode) -> Vec<FunctionalEdge> {
    let chosen = select(proposals.to_vec(), mode, |p| (&p.element_id, &p.object_id, p.confidence));
    sorted(
        chosen
            .into_iter()
            .map(|p| FunctionalEdge {
                element_id: p.element_id,
                object_id: p.object_id,
                kind: EdgeKind::Remote,
                relation: p.relation,
                confidence: p.confidence,
                evidence: vec![p.feasibility_text],
            })
            .collect(),
    )
}

#[derive(Deserialize)]
struct DirectEntry {
    element_id: String,
    object_id: String,
    #[serde(default)]
    kind: Option<EdgeKind>,
    #[serde(default)]
    relation: String,
    #[serde(default = "one")]
    confidence: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Deserialize)]
struct DirectReply {
    edges: Vec<DirectEntry>,
}

/// Single-call reasoning over all objects and elements.
pub fn infer_direct_edges(
    objects: &[NodeCandidate],
    elements: &[NodeCandidate],
    client: &ModelClient,
    prompts: &PromptSet,
    cfg: &ReasoningConfig,
) -> Result<Vec<FunctionalEdge>, ReasoningError> {
    if objects.is_empty() || elements.is_empty() {
        return Ok(Vec::new());
    }
    let object_ids: BTreeSet<&str> = objects.iter().map(|o| o.id.as_str()).collect();
    let element_ids: BTreeSet<&str> = elements.iter().map(|e| e.id.as_str()).collect();
    let text = prompts::render(
        &prompts.reason_direct,
        &[
            ("objects", &node_listing(&objects.iter().collect::<Vec<_>>())),
            ("elements", &node_listing(&elements.iter().collect::<Vec<_>>())),
        ],
    );
    let request = ModelRequest::llm()
        .system(prompts.system.trim_end())
        .user(text)
        .max_tokens(cfg.max_tokens);
    let context = "direct edges".to_owned();
    let parse = |t: &str| -> Result<Vec<FunctionalEdge>, String> {
        let reply: DirectReply = parse_json(t)?;
        let mut seen = BTreeSet::new();
        let mut edges = Vec::new();
        for e in reply.edges {
            let (el, ob) = (e.element_id.trim().to_owned(), e.object_id.trim().to_owned());
            if !element_ids.contains(el.as_str()) || !object_ids.contains(ob.as_str()) {
                tracing::warn!(element = %el, object = %ob, "direct edge does not join a known element to a known object, dropped");
                continue;
            }
            if !seen.insert((el.clone(), ob.clone())) {
                continue;
            }
            let kind = e.kind.unwrap_or(EdgeKind::Remote);
            let confidence = match kind {
                EdgeKind::Local => 1.0,
                EdgeKind::Remote => clamp_confidence(e.confidence, &context)?,
            };
            edges.push(FunctionalEdge {
                element_id: el,
                object_id: ob,
                kind,
                relation: clean_relation(&e.relation),
                confidence,
                evidence: Vec::new(),
            });
        }
        Ok(edges)
    };
    let edges = backend::complete_structured(client, &request, parse)?.map_err(unparsable(context.clone()))?;
    Ok(sorted(select(edges, cfg.select_mode, |e| {
        (&e.element_id, &e.object_id, e.confidence)
    })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningOutput {
    pub local_edges: Vec<FunctionalEdge>,
    pub remote_proposals: Vec<RemoteProposal>,
    pub edges: Vec<FunctionalEdge>,
}

/// Full edge inference over described candidates.
pub fn reason(
    candidates: &[NodeCandidate],
    images: &dyn ViewImages,
    client: &ModelClient,
    prompts: &PromptSet,
    cfg: &ReasoningConfig,
) -> Result<ReasoningOutput, ReasoningError> {
    let mut objects: Vec<NodeCandidate> = candidates.iter().filter(|c| c.kind == NodeKind::Object).cloned().collect();
    let mut elements: Vec<NodeCandidate> = candidates.iter().filter(|c| c.kind == NodeKind::Element).cloned().collect();
    objects.sort_by(|a, b| a.id.cmp(&b.id));
    elements.sort_by(|a, b| a.id.cmp(&b.id));

    if !cfg.sequential {
        let edges = infer_direct_edges(&objects, &elements, client, prompts, cfg)?;
        return Ok(ReasoningOutput {
            local_edges: Vec::new(),
            remote_proposals: Vec::new(),
            edges,
        });
    }

    let (local_edges, assigned) = infer_local_edges(&objects, &elements, client, prompts, cfg)?;
    let unassigned: Vec<&NodeCandidate> = elements.iter().filter(|e| !assigned.contains(&e.id)).collect();
    let targets = if objects.is_empty() {
        Vec::new()
    } else {
        propose_remote_targets(&unassigned, &objects, client, prompts, cfg)?
    };

    let find = |id: &str, pool: &[NodeCandidate]| pool.iter().position(|c| c.id == id).expect("validated id");
    let assessed: Vec<AssessedPair> = targets
        .par_iter()
        .map(|(el, ob)| {
            let element = &elements[find(el, &elements)];
            let object = &objects[find(ob, &objects)];
            Ok(AssessedPair {
                element_id: el.clone(),
                object_id: ob.clone(),
                feasibility_text: assess_feasibility(element, object, images, client, prompts, cfg)?,
            })
        })
        .collect::<Result<_, ReasoningError>>()?;

    let remote_proposals = score_remote_edges(&assessed, &elements, client, prompts, cfg)?;
    let remote_edges = select_remote_edges(&remote_proposals, cfg.select_mode);
    let mut edges = local_edges.clone();
    edges.extend(remote_edges);
    Ok(ReasoningOutput {
        local_edges,
        remote_proposals,
        edges: sorted(edges),
    })
}
