//! The functional scene graph: node inventory, element→object edges, and
//! its canonical JSON form.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendError, ModelClient, ModelRequest};
use crate::canonical;
use crate::detection::NodeKind;
use crate::fusion::NodeCandidate;
use crate::geometry::Aabb;
use crate::prompts::{self, PromptSet};
use crate::reasoning::{EdgeKind, FunctionalEdge};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge {element} -> {object} references missing node {missing}")]
    DanglingEdge { element: String, object: String, missing: String },
    #[error("edge {element} -> {object} must run from an element to an object")]
    WrongDirection { element: String, object: String },
    #[error("duplicate node id {0}")]
    DuplicateNode(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub label: String,
    pub description: String,
    /// Box centroid.
    pub position: Point3<f64>,
    pub bbox: Aabb,
    pub num_views: usize,
}

impl GraphNode {
    pub fn from_candidate(c: &NodeCandidate) -> Self {
        let label = c.label();
        let description = c
            .description
            .as_ref()
            .map(|d| d.summary.clone())
            .filter(|s| !s.trim().is_empty())
            .unwrap_or_else(|| label.clone());
        GraphNode {
            id: c.id.clone(),
            kind: c.kind,
            label,
            description,
            position: c.bbox3d.center(),
            bbox: c.bbox3d,
            num_views: c.distinct_frames(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub config_digest: String,
    #[serde(default)]
    pub backends: BTreeMap<String, String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSceneGraph {
    pub scene_id: String,
    pub objects: Vec<GraphNode>,
    pub elements: Vec<GraphNode>,
    pub edges: Vec<FunctionalEdge>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeJson {
    id: String,
    kind: NodeKind,
    label: String,
    description: String,
    position: [f64; 3],
    bbox: [[f64; 3]; 2],
    num_views: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeJson {
    source: String,
    target: String,
    kind: EdgeKind,
    relation: String,
    confidence: f64,
    evidence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphJson {
    scene_id: String,
    nodes: Vec<NodeJson>,
    edges: Vec<EdgeJson>,
    provenance: Provenance,
}

fn sort_edges(edges: &mut [FunctionalEdge]) {
    edges.sort_by(|a, b| (&a.element_id, &a.object_id).cmp(&(&b.element_id, &b.object_id)));
}

impl FunctionalSceneGraph {
    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.objects.iter().chain(self.elements.iter())
    }

    pub fn node(&self, id: &str) -> Option<&GraphNode> {
        self.nodes().find(|n| n.id == id)
    }

    /// Checks id uniqueness, edge endpoints, and edge direction.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut kinds: BTreeMap<&str, NodeKind> = BTreeMap::new();
        for (n, expected) in self
            .objects
            .iter()
            .map(|n| (n, NodeKind::Object))
            .chain(self.elements.iter().map(|n| (n, NodeKind::Element)))
        {
            if n.kind != expected {
                return Err(GraphError::SchemaViolation(format!("node {} is listed as {:?}", n.id, expected)));
            }
            if kinds.insert(&n.id, n.kind).is_some() {
                return Err(GraphError::DuplicateNode(n.id.clone()));
            }
        }
        for e in &self.edges {
            for id in [&e.element_id, &e.object_id] {
                if !kinds.contains_key(id.as_str()) {
                    return Err(GraphError::DanglingEdge {
                        element: e.element_id.clone(),
                        object: e.object_id.clone(),
                        missing: id.clone(),
                    });
                }
            }
            if kinds[e.element_id.as_str()] != NodeKind::Element || kinds[e.object_id.as_str()] != NodeKind::Object {
                return Err(GraphError::WrongDirection {
                    element: e.element_id.clone(),
                    object: e.object_id.clone(),
                });
            }
            if !(0.0..=1.0).contains(&e.confidence) {
                return Err(GraphError::SchemaViolation(format!(
                    "edge {} -> {} has confidence {}",
                    e.element_id, e.object_id, e.confidence
                )));
            }
        }
        Ok(())
    }

    fn to_json_value(&self) -> GraphJson {
        let nodes = self
            .nodes()
            .map(|n| {
                let p = n.position;
                NodeJson {
                    id: n.id.clone(),
                    kind: n.kind,
                    label: n.label.clone(),
                    description: n.description.clone(),
                    position: [p.x, p.y, p.z],
                    bbox: n.bbox.into(),
                    num_views: n.num_views,
                }
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|e| EdgeJson {
                source: e.element_id.clone(),
                target: e.object_id.clone(),
                kind: e.kind,
                relation: e.relation.clone(),
                confidence: e.confidence,
                evidence: e.evidence.clone(),
            })
            .collect();
        GraphJson {
            scene_id: self.scene_id.clone(),
            nodes,
            edges,
            provenance: self.provenance.clone(),
        }
    }

    /// Canonical GraphJSON text.
    pub fn to_json(&self) -> String {
        canonical::to_canonical_string(&self.to_json_value()).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let doc: GraphJson = serde_json::from_str(text).map_err(|e| GraphError::SchemaViolation(e.to_string()))?;
        let mut objects = Vec::new();
        let mut elements = Vec::new();
        for n in doc.nodes {
            if n.id.trim().is_empty() || n.label.trim().is_empty() {
                return Err(GraphError::SchemaViolation("node ids and labels must be nonempty".into()));
            }
            let bbox = Aabb::try_from(n.bbox).map_err(|e| GraphError::SchemaViolation(format!("node {}: {e}", n.id)))?;
            let c = bbox.center();
            let tol = 1e-6 * (1.0 + c.coords.amax());
            if (0..3).any(|i| (c[i] - n.position[i]).abs() > tol) {
                return Err(GraphError::SchemaViolation(format!("node {} position is not its box centroid", n.id)));
            }
            let node = GraphNode {
                id: n.id,
                kind: n.kind,
                label: n.label,
                description: n.description,
                position: Point3::from(n.position),
                bbox,
                num_views: n.num_views,
            };
            match node.kind {
                NodeKind::Object => objects.push(node),
                NodeKind::Element => elements.push(node),
            }
        }
        let edges = doc
            .edges
            .into_iter()
            .map(|e| FunctionalEdge {
                element_id: e.source,
                object_id: e.target,
                kind: e.kind,
                relation: e.relation,
                confidence: e.confidence,
                evidence: e.evidence,
            })
            .collect();
        let graph = FunctionalSceneGraph {
            scene_id: doc.scene_id,
            objects,
            elements,
            edges,
            provenance: doc.provenance,
        };
        graph.validate().map_err(|e| match e {
            GraphError::SchemaViolation(_) => e,
            other => GraphError::SchemaViolation(other.to_string()),
        })?;
        Ok(graph)
    }
}

/// Unions local and remote edges over all candidates. Isolated nodes are
/// kept; an endpoint pair present in both sets keeps the local edge.
pub fn assemble(
    scene_id: &str,
    candidates: &[NodeCandidate],
    local: &[FunctionalEdge],
    remote: &[FunctionalEdge],
    provenance: Provenance,
) -> Result<FunctionalSceneGraph, GraphError> {
    let mut objects: Vec<GraphNode> = Vec::new();
    let mut elements: Vec<GraphNode> = Vec::new();
    for c in candidates {
        let n = GraphNode::from_candidate(c);
        match n.kind {
            NodeKind::Object => objects.push(n),
            NodeKind::Element => elements.push(n),
        }
    }
    objects.sort_by(|a, b| a.id.cmp(&b.id));
    elements.sort_by(|a, b| a.id.cmp(&b.id));

    let mut seen = BTreeSet::new();
    let mut edges = Vec::new();
    for e in local.iter().chain(remote) {
        if seen.insert((e.element_id.clone(), e.object_id.clone())) {
            edges.push(e.clone());
        }
    }
    sort_edges(&mut edges);
    let graph = FunctionalSceneGraph {
        scene_id: scene_id.to_owned(),
        objects,
        elements,
        edges,
        provenance,
    };
    graph.validate()?;
    Ok(graph)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaAnswer {
    pub question: String,
    pub prompt: String,
    pub answer: String,
}

pub fn qa_query(
    graph: &FunctionalSceneGraph,
    question: &str,
    client: &ModelClient,
    prompts: &PromptSet,
) -> Result<QaAnswer, GraphError> {
    let prompt = prompts::render(&prompts.qa, &[("graph", graph.to_json().trim_end()), ("question", question.trim())]);
    let request = ModelRequest::llm()
        .system(prompts.system.trim_end())
        .user(prompt.clone())
        .max_tokens(512);
    let answer = client.complete(&request)?.text.trim().to_owned();
    Ok(QaAnswer {
        question: question.to_owned(),
        prompt,
        answer,
    })
}
