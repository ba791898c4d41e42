//! Open-vocabulary recall metrics for predicted functional scene graphs.
//!
//! A ground-truth node is retrieved at K when some predicted node of the same
//! kind overlaps it in 3D and the predicted label, embedded and ranked
//! against the ground-truth label vocabulary, puts the true label in the top
//! K. Triplets additionally require a predicted edge between such nodes whose
//! relation text retrieves the true relation in the top K.

pub mod embedding;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::NodeKind;
use crate::geometry::{Aabb, GeometryError};
use crate::graph::{FunctionalSceneGraph, GraphNode};
use embedding::{cosine, EmbeddingBackend, EmbeddingError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth has no {0}")]
    EmptyGroundTruth(&'static str),
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub fn bbox_iou(a: &Aabb, b: &Aabb) -> Result<f64, GeometryError> {
    a.iou(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtNode {
    pub id: String,
    pub kind: NodeKind,
    pub label: String,
    pub bbox3d: Aabb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtTriplet {
    pub object_id: String,
    pub element_id: String,
    pub relation_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthGraph {
    #[serde(default)]
    pub scene_id: String,
    pub nodes: Vec<GtNode>,
    pub triplets: Vec<GtTriplet>,
}

impl GroundTruthGraph {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidGroundTruth(m));
        let mut kinds = BTreeMap::new();
        for n in &self.nodes {
            if n.id.trim().is_empty() {
                return bad("node ids must be nonempty".into());
            }
            if n.label.trim().is_empty() {
                return bad(format!("node {} has an empty label", n.id));
            }
            if let Err(e) = n.bbox3d.validate() {
                return bad(format!("node {}: {e}", n.id));
            }
            if kinds.insert(n.id.as_str(), n.kind).is_some() {
                return bad(format!("duplicate node id {}", n.id));
            }
        }
        let mut pairs = BTreeSet::new();
        for t in &self.triplets {
            match kinds.get(t.element_id.as_str()) {
                None => return bad(format!("triplet references missing element {}", t.element_id)),
                Some(NodeKind::Object) => return bad(format!("triplet source {} is not an element", t.element_id)),
                _ => {}
            }
            match kinds.get(t.object_id.as_str()) {
                None => return bad(format!("triplet references missing object {}", t.object_id)),
                Some(NodeKind::Element) => return bad(format!("triplet target {} is not an object", t.object_id)),
                _ => {}
            }
            if t.relation_text.trim().is_empty() {
                return bad(format!("triplet {} -> {} has empty relation text", t.element_id, t.object_id));
            }
            if !pairs.insert((&t.element_id, &t.object_id)) {
                return bad(format!("duplicate triplet {} -> {}", t.element_id, t.object_id));
            }
        }
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&GtNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let g: GroundTruthGraph = serde_json::from_str(text).map_err(|e| EvalError::InvalidGroundTruth(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }
}

/// Ranks a fixed vocabulary against query texts by embedding cosine
/// similarity, ties broken by ascending vocabulary text.
pub struct Retriever<'a> {
    backend: &'a dyn EmbeddingBackend,
    vocab: Vec<(String, Vec<f64>)>,
    memo: Mutex<HashMap<String, Vec<String>>>,
}

impl<'a> Retriever<'a> {
    pub fn new<I, S>(backend: &'a dyn EmbeddingBackend, vocab: I) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let unique: BTreeSet<String> = vocab.into_iter().map(|s| s.as_ref().to_owned()).collect();
        let vocab = unique
            .into_iter()
            .map(|s| {
                let v = backend.embed(&s)?;
                Ok((s, v))
            })
            .collect::<Result<_, EvalError>>()?;
        Ok(Retriever {
            backend,
            vocab,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().map(|(s, _)| s.as_str())
    }

    pub fn ranking(&self, query: &str) -> Result<Vec<String>, EvalError> {
        if let Some(r) = self.memo.lock().expect("memo lock").get(query) {
            return Ok(r.clone());
        }
        let q = self.backend.embed(query)?;
        let mut scored: Vec<(f64, &str)> = self.vocab.iter().map(|(s, v)| (cosine(&q, v), s.as_str())).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let ranking: Vec<String> = scored.into_iter().map(|(_, s)| s.to_owned()).collect();
        self.memo.lock().expect("memo lock").insert(query.to_owned(), ranking.clone());
        Ok(ranking)
    }

    /// 1-based rank of `target` for `query`, `None` if outside the vocabulary.
    pub fn rank(&self, query: &str, target: &str) -> Result<Option<usize>, EvalError> {
        Ok(self.ranking(query)?.iter().position(|s| s == target).map(|i| i + 1))
    }
}

/// `hits / total`, with 0/0 reported as 0 and flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub value: f64,
    pub hits: usize,
    pub total: usize,
    pub undefined: bool,
}

impl Recall {
    pub fn new(hits: usize, total: usize) -> Self {
        debug_assert!(hits <= total);
        Recall {
            value: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
            hits,
            total,
            undefined: total == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub r_o: Recall,
    pub r_ie: Recall,
    pub r_no: Recall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletMetrics {
    pub r_tr: Recall,
    pub r_na: Recall,
    pub r_ep: Recall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMatch {
    pub scene_id: String,
    pub gt_id: String,
    pub kind: NodeKind,
    pub pred_id: Option<String>,
    pub iou: f64,
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletMatch {
    pub scene_id: String,
    pub element_id: String,
    pub object_id: String,
    /// `(source, target)` of the predicted edge that satisfied the triplet.
    pub pred_edge: Option<(String, String)>,
    pub node_associated: bool,
    pub retrieved: bool,
    pub relation_rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NodeCounts {
    pub n_o: usize,
    pub n_ie: usize,
    pub re_o: usize,
    pub re_ie: usize,
}

impl NodeCounts {
    pub fn metrics(&self) -> NodeMetrics {
        NodeMetrics {
            r_o: Recall::new(self.re_o, self.n_o),
            r_ie: Recall::new(self.re_ie, self.n_ie),
            r_no: Recall::new(self.re_o + self.re_ie, self.n_o + self.n_ie),
        }
    }

    fn add(&mut self, o: &NodeCounts) {
        self.n_o += o.n_o;
        self.n_ie += o.n_ie;
        self.re_o += o.re_o;
        self.re_ie += o.re_ie;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TripletCounts {
    pub n_tr: usize,
    pub n_na: usize,
    pub n_re: usize,
}

impl TripletCounts {
    pub fn metrics(&self) -> TripletMetrics {
        TripletMetrics {
            r_tr: Recall::new(self.n_re, self.n_tr),
            r_na: Recall::new(self.n_na, self.n_tr),
            r_ep: Recall::new(self.n_re, self.n_na),
        }
    }

    fn add(&mut self, o: &TripletCounts) {
        self.n_tr += o.n_tr;
        self.n_na += o.n_na;
        self.n_re += o.n_re;
    }
}

/// Whether `pred` satisfies `gt` at K under the node rule; returns IoU and
/// rank when it does.
fn node_hit(pred: &GraphNode, gt: &GtNode, k: usize, labels: &Retriever<'_>) -> Result<Option<(f64, usize)>, EvalError> {
    if pred.kind != gt.kind {
        return Ok(None);
    }
    let iou = bbox_iou(&gt.bbox3d, &pred.bbox)?;
    if !(iou > 0.0) {
        return Ok(None);
    }
    Ok(labels
        .rank(&pred.label, &gt.label)?
        .filter(|&r| r <= k)
        .map(|r| (iou, r)))
}

/// Maximum bipartite matching (augmenting paths). `adj[g]` lists the
/// predictions that may serve ground-truth node `g`.
fn max_matching(adj: &[Vec<usize>], n_pred: usize) -> Vec<Option<usize>> {
    fn augment(g: usize, adj: &[Vec<usize>], seen: &mut [bool], pred_owner: &mut [Option<usize>]) -> bool {
        for &p in &adj[g] {
            if seen[p] {
                continue;
            }
            seen[p] = true;
            if pred_owner[p].is_none_or(|other| augment(other, adj, seen, pred_owner)) {
                pred_owner[p] = Some(g);
                return true;
            }
        }
        false
    }
    let mut pred_owner = vec![None; n_pred];
    for g in 0..adj.len() {
        let mut seen = vec![false; n_pred];
        augment(g, adj, &mut seen, &mut pred_owner);
    }
    let mut assignment = vec![None; adj.len()];
    for (p, owner) in pred_owner.iter().enumerate() {
        if let Some(g) = owner {
            assignment[*g] = Some(p);
        }
    }
    assignment
}

pub fn node_recall(
    pred: &FunctionalSceneGraph,
    gt: &GroundTruthGraph,
    k: usize,
    labels: &Retriever<'_>,
    one_to_one: bool,
) -> Result<(NodeCounts, Vec<NodeMatch>), EvalError> {
    if gt.nodes.is_empty() {
        return Err(EvalError::EmptyGroundTruth("nodes"));
    }
    let preds: Vec<&GraphNode> = pred.nodes().collect();
    // candidate (pred index, iou, rank) per GT node, best first
    let mut options: Vec<Vec<(usize, f64, usize)>> = Vec::with_capacity(gt.nodes.len());
    for g in &gt.nodes {
        let mut hits = Vec::new();
        for (i, p) in preds.iter().enumerate() {
            if let Some((iou, rank)) = node_hit(p, g, k, labels)? {
                hits.push((i, iou, rank));
            }
        }
        hits.sort_by(|a, b| {
            a.2.cmp(&b.2)
                .then(b.1.total_cmp(&a.1))
                .then(preds[a.0].id.cmp(&preds[b.0].id))
        });
        options.push(hits);
    }

    let chosen: Vec<Option<(usize, f64, usize)>> = if one_to_one {
        let adj: Vec<Vec<usize>> = options.iter().map(|o| o.iter().map(|h| h.0).collect()).collect();
        let assignment = max_matching(&adj, preds.len());
        assignment
            .iter()
            .zip(&options)
            .map(|(a, o)| a.and_then(|p| o.iter().find(|h| h.0 == p).copied()))
            .collect()
    } else {
        options.iter().map(|o| o.first().copied()).collect()
    };

    let mut counts = NodeCounts::default();
    let mut records = Vec::new();
    for (g, c) in gt.nodes.iter().zip(chosen) {
        let hit = c.is_some();
        match g.kind {
            NodeKind::Object => {
                counts.n_o += 1;
                counts.re_o += hit as usize;
            }
            NodeKind::Element => {
                counts.n_ie += 1;
                counts.re_ie += hit as usize;
            }
        }
        records.push(NodeMatch {
            scene_id: gt.scene_id.clone(),
            gt_id: g.id.clone(),
            kind: g.kind,
            pred_id: c.map(|(i, _, _)| preds[i].id.clone()),
            iou: c.map_or(0.0, |(_, iou, _)| iou),
            rank: c.map(|(_, _, r)| r),
        });
    }
    Ok((counts, records))
}

pub fn triplet_recall(
    pred: &FunctionalSceneGraph,
    gt: &GroundTruthGraph,
    k: usize,
    labels: &Retriever<'_>,
    relations: &Retriever<'_>,
) -> Result<(TripletCounts, Vec<TripletMatch>), EvalError> {
    if gt.triplets.is_empty() {
        return Err(EvalError::EmptyGroundTruth("triplets"));
    }
    let mut counts = TripletCounts::default();
    let mut records = Vec::new();
    for t in &gt.triplets {
        let (ge, go) = match (gt.node(&t.element_id), gt.node(&t.object_id)) {
            (Some(e), Some(o)) => (e, o),
            _ => return Err(EvalError::InvalidGroundTruth(format!("dangling triplet {} -> {}", t.element_id, t.object_id))),
        };
        let mut associated: Option<(String, String)> = None;
        let mut retrieved: Option<((String, String), usize)> = None;
        for e in &pred.edges {
            let (Some(ps), Some(pt)) = (pred.node(&e.element_id), pred.node(&e.object_id)) else {
                continue;
            };
            if node_hit(ps, ge, k, labels)?.is_none() || node_hit(pt, go, k, labels)?.is_none() {
                continue;
            }
            let pair = (e.element_id.clone(), e.object_id.clone());
            if associated.is_none() {
                associated = Some(pair.clone());
            }
            if let Some(r) = relations.rank(&e.relation, &t.relation_text)?.filter(|&r| r <= k) {
                if retrieved.as_ref().is_none_or(|(_, best)| r < *best) {
                    retrieved = Some((pair, r));
                }
            }
        }
        counts.n_tr += 1;
        counts.n_na += associated.is_some() as usize;
        counts.n_re += retrieved.is_some() as usize;
        records.push(TripletMatch {
            scene_id: gt.scene_id.clone(),
            element_id: t.element_id.clone(),
            object_id: t.object_id.clone(),
            pred_edge: retrieved.as_ref().map(|(p, _)| p.clone()).or(associated.clone()),
            node_associated: associated.is_some(),
            retrieved: retrieved.is_some(),
            relation_rank: retrieved.map(|(_, r)| r),
        });
    }
    Ok((counts, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub node_ks: Vec<usize>,
    pub triplet_ks: Vec<usize>,
    /// Each prediction may satisfy at most one ground-truth node.
    pub one_to_one: bool,
    /// Retrieve against each scene's own vocabulary instead of the split's.
    pub per_scene_vocabulary: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            node_ks: vec![3, 10],
            triplet_ks: vec![5, 10],
            one_to_one: false,
            per_scene_vocabulary: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: Vec<String>,
    pub n_o: usize,
    pub n_ie: usize,
    pub n_no: usize,
    pub n_tr: usize,
    pub nodes: BTreeMap<usize, NodeMetrics>,
    pub triplets: BTreeMap<usize, TripletMetrics>,
    pub node_matches: BTreeMap<usize, Vec<NodeMatch>>,
    pub triplet_matches: BTreeMap<usize, Vec<TripletMatch>>,
}

/// Scores each `(prediction, ground truth)` pair and pools the counts.
pub fn evaluate(
    scenes: &[(FunctionalSceneGraph, GroundTruthGraph)],
    cfg: &EvalConfig,
    label_space: &dyn EmbeddingBackend,
    relation_space: &dyn EmbeddingBackend,
) -> Result<EvalReport, EvalError> {
    for (_, gt) in scenes {
        gt.validate()?;
    }
    if scenes.iter().all(|(_, gt)| gt.nodes.is_empty()) {
        return Err(EvalError::EmptyGroundTruth("nodes"));
    }
    let split_labels = || scenes.iter().flat_map(|(_, g)| g.nodes.iter().map(|n| n.label.clone()));
    let split_relations = || scenes.iter().flat_map(|(_, g)| g.triplets.iter().map(|t| t.relation_text.clone()));
    let shared = if cfg.per_scene_vocabulary {
        None
    } else {
        Some((
            Retriever::new(label_space, split_labels())?,
            Retriever::new(relation_space, split_relations())?,
        ))
    };

    let mut node_counts: BTreeMap<usize, NodeCounts> = cfg.node_ks.iter().map(|&k| (k, NodeCounts::default())).collect();
    let mut trip_counts: BTreeMap<usize, TripletCounts> =
        cfg.triplet_ks.iter().map(|&k| (k, TripletCounts::default())).collect();
    let mut node_matches: BTreeMap<usize, Vec<NodeMatch>> = BTreeMap::new();
    let mut triplet_matches: BTreeMap<usize, Vec<TripletMatch>> = BTreeMap::new();
    let (mut n_o, mut n_ie, mut n_tr) = (0, 0, 0);

    for (pred, gt) in scenes {
        let own;
        let (labels, relations) = match &shared {
            Some((l, r)) => (l, r),
            None => {
                own = (
                    Retriever::new(label_space, gt.nodes.iter().map(|n| n.label.as_str()))?,
                    Retriever::new(relation_space, gt.triplets.iter().map(|t| t.relation_text.as_str()))?,
                );
                (&own.0, &own.1)
            }
        };
        n_o += gt.nodes.iter().filter(|n| n.kind == NodeKind::Object).count();
        n_ie += gt.nodes.iter().filter(|n| n.kind == NodeKind::Element).count();
        n_tr += gt.triplets.len();
        if !gt.nodes.is_empty() {
            for &k in &cfg.node_ks {
                let (c, recs) = node_recall(pred, gt, k, labels, cfg.one_to_one)?;
                node_counts.get_mut(&k).expect("k registered").add(&c);
                node_matches.entry(k).or_default().extend(recs);
            }
        }
        if !gt.triplets.is_empty() {
            for &k in &cfg.triplet_ks {
                let (c, recs) = triplet_recall(pred, gt, k, labels, relations)?;
                trip_counts.get_mut(&k).expect("k registered").add(&c);
                triplet_matches.entry(k).or_default().extend(recs);
            }
        }
    }

    Ok(EvalReport {
        scenes: scenes.iter().map(|(p, g)| if g.scene_id.is_empty() { p.scene_id.clone() } else { g.scene_id.clone() }).collect(),
        n_o,
        n_ie,
        n_no: n_o + n_ie,
        n_tr,
        nodes: node_counts.iter().map(|(k, c)| (*k, c.metrics())).collect(),
        triplets: trip_counts.iter().map(|(k, c)| (*k, c.metrics())).collect(),
        node_matches,
        triplet_matches,
    })
}

fn cell(r: &Recall) -> String {
    if r.undefined {
        "   n/a".into()
    } else {
        format!("{:>6.2}", 100.0 * r.value)
    }
}

/// Human-readable summary, recalls in percent.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenes: {}  (n_o={}, n_ie={}, n_tr={})",
        report.scenes.len(),
        report.n_o,
        report.n_ie,
        report.n_tr
    );
    let _ = writeln!(out, "{:<6} {:>6} {:>6} {:>6}", "K", "R_o", "R_ie", "R_no");
    for (k, m) in &report.nodes {
        let _ = writeln!(out, "{:<6} {} {} {}", format!("@{k}"), cell(&m.r_o), cell(&m.r_ie), cell(&m.r_no));
    }
    let _ = writeln!(out, "{:<6} {:>6} {:>6} {:>6}", "K", "R_tr", "R_na", "R_ep");
    for (k, m) in &report.triplets {
        let _ = writeln!(out, "{:<6} {} {} {}", format!("@{k}"), cell(&m.r_tr), cell(&m.r_na), cell(&m.r_ep));
    }
    out
}
