use std::collections::BTreeMap;

use funcgraph_core::description::{make_crops, rank_views};
use funcgraph_core::detection::NodeKind;
use funcgraph_core::eval::embedding::ToyEmbedding;
use funcgraph_core::eval::{evaluate, EvalConfig, GroundTruthGraph, GtNode, GtTriplet};
use funcgraph_core::fusion::{candidate_id, LabelVote, NodeCandidate, ViewRecord};
use funcgraph_core::geometry::{Aabb, Box2};
use funcgraph_core::graph::{assemble, FunctionalSceneGraph, Provenance};
use funcgraph_core::reasoning::{select_remote_edges, EdgeKind, FunctionalEdge, RemoteProposal, SelectMode};
use funcgraph_core::scene::{project, unproject, CameraModel, Pose};
use nalgebra::{Point3, Rotation3, Vector3};
use proptest::prelude::*;

fn pose_from(axis: [f64; 3], t: [f64; 3]) -> Pose {
    let r = Rotation3::from_scaled_axis(Vector3::from(axis));
    Pose::new(*r.matrix(), Vector3::from(t)).unwrap()
}

fn view(frame: u32, score: f64, points: usize) -> ViewRecord {
    ViewRecord {
        frame_index: frame,
        box2d: Box2::new(0.0, 0.0, 4.0, 4.0),
        mask_ref: String::new(),
        score,
        contributed_points: points,
        crop_ref: None,
    }
}

fn candidate(kind: NodeKind, n: usize, label: &str, lo: [f64; 3]) -> NodeCandidate {
    let mut c = NodeCandidate {
        id: candidate_id(kind, n),
        kind,
        label_votes: vec![LabelVote {
            label: label.into(),
            score: 1.0,
        }],
        points: Vec::new(),
        num_points: 0,
        bbox3d: Aabb::new(Point3::origin(), Point3::origin()).unwrap(),
        views: vec![view(0, 1.0, 2)],
        description: None,
    };
    let hi = [lo[0] + 0.5, lo[1] + 0.5, lo[2] + 0.5];
    c.set_points(vec![Point3::from(lo), Point3::from(hi)]).unwrap();
    c
}

fn edge(element: usize, object: usize, kind: EdgeKind, confidence: f64) -> FunctionalEdge {
    FunctionalEdge {
        element_id: candidate_id(NodeKind::Element, element),
        object_id: candidate_id(NodeKind::Object, object),
        kind,
        relation: "operates".into(),
        confidence,
        evidence: Vec::new(),
    }
}

fn axis() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-3.0f64..3.0)
}

fn translation() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-10.0f64..10.0)
}

proptest! {
    #[test]
    fn pixel_round_trip(
        fx in 50.0f64..1000.0,
        size in (16u32..640, 16u32..480),
        at in (0.0f64..1.0, 0.0f64..1.0),
        depth in 0.05f64..20.0,
        r in axis(),
        t in translation(),
    ) {
        let (w, h) = size;
        let cam = CameraModel::new(fx, fx, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
        let pose = pose_from(r, t);
        let (u, v) = (((w - 1) as f64 * at.0) as u32, ((h - 1) as f64 * at.1) as u32);
        let p = unproject(&cam, &pose, (u, v), depth).unwrap();
        let back = project(&cam, &pose, &p).unwrap();
        let again = unproject(&cam, &pose, (u, v), back.depth).unwrap();
        prop_assert!((back.u - u as f64).abs() < 1e-6);
        prop_assert!((back.v - v as f64).abs() < 1e-6);
        prop_assert!((again - p).norm() < 1e-6);
    }

    #[test]
    fn pose_composition(
        at in (0u32..64, 0u32..48),
        depth in 0.05f64..20.0,
        r in axis(),
        t in translation(),
    ) {
        let cam = CameraModel::new(60.0, 62.0, 31.5, 23.0, 64, 48).unwrap();
        let pose = pose_from(r, t);
        let world = unproject(&cam, &pose, at, depth).unwrap();
        let local = unproject(&cam, &Pose::identity(), at, depth).unwrap();
        prop_assert!((pose.inverse_transform_point(&world) - local).norm() < 1e-9);
    }

    #[test]
    fn ranking_ignores_point_scale(
        views in prop::collection::vec((1u32..=16, 0usize..60), 1..12),
        n_points in 1usize..300,
        scale in 2usize..500,
        top in 1usize..12,
    ) {
        let make = |s: usize| -> Vec<ViewRecord> {
            views.iter().enumerate().map(|(i, &(k, c))| view(i as u32 * 3, k as f64 / 16.0, c * s)).collect()
        };
        let frames = |vs: Vec<ViewRecord>| -> Vec<u32> { vs.iter().map(|v| v.frame_index).collect() };
        let base = frames(rank_views(&make(1), n_points, top));
        prop_assert_eq!(&base, &frames(rank_views(&make(scale), n_points, top)));
        prop_assert_eq!(&base, &frames(rank_views(&make(scale), n_points * scale, top)));
    }

    #[test]
    fn element_crops_grow_with_scale(
        corner in (0.0f64..600.0, 0.0f64..440.0),
        extent in (1.0f64..80.0, 1.0f64..80.0),
        mut scales in prop::collection::vec(1.0f64..8.0, 1..5),
    ) {
        scales.sort_by(f64::total_cmp);
        let b = Box2::new(corner.0, corner.1, (corner.0 + extent.0).min(640.0), (corner.1 + extent.1).min(480.0));
        let mut v = view(0, 1.0, 1);
        v.box2d = b;
        let crops = make_crops(&v, NodeKind::Element, &scales, (640, 480));
        for pair in crops.windows(2) {
            prop_assert!(pair[0].box2d.area() <= pair[1].box2d.area() + 1e-9);
        }
        for c in &crops {
            prop_assert!(c.box2d.within(640, 480));
            prop_assert!(c.scale >= 1.0);
        }
    }

    #[test]
    fn best_selection_is_scale_free(
        scored in prop::collection::vec((0usize..4, 0usize..5, 0u32..=16), 0..16),
        factors in prop::array::uniform4(0.01f64..1.0),
    ) {
        let mut seen = BTreeMap::new();
        for &(e, o, k) in &scored {
            seen.entry((e, o)).or_insert(k);
        }
        let proposals = |scale: bool| -> Vec<RemoteProposal> {
            seen.iter()
                .map(|(&(e, o), &k)| RemoteProposal {
                    element_id: candidate_id(NodeKind::Element, e),
                    object_id: candidate_id(NodeKind::Object, o),
                    feasibility_text: String::new(),
                    confidence: (k as f64 / 16.0 * if scale { factors[e] } else { 1.0 }).clamp(0.0, 1.0),
                    relation: "operates".into(),
                })
                .collect()
        };
        let pairs = |edges: Vec<FunctionalEdge>| -> Vec<(String, String)> {
            edges.into_iter().map(|e| (e.element_id, e.object_id)).collect()
        };
        let chosen = pairs(select_remote_edges(&proposals(false), SelectMode::Best));
        prop_assert_eq!(&chosen, &pairs(select_remote_edges(&proposals(true), SelectMode::Best)));
        let mut sources: Vec<&String> = chosen.iter().map(|(e, _)| e).collect();
        sources.dedup();
        prop_assert_eq!(sources.len(), chosen.len());
    }

    #[test]
    fn assembled_graphs_are_stable_and_directed(
        n_objects in 1usize..5,
        n_elements in 1usize..5,
        links in prop::collection::vec((0usize..5, 0usize..5, any::<bool>(), 0u32..=8), 0..8),
    ) {
        let mut candidates = Vec::new();
        for i in 0..n_objects {
            candidates.push(candidate(NodeKind::Object, i, "cabinet", [i as f64, 0.0, 0.0]));
        }
        for i in 0..n_elements {
            candidates.push(candidate(NodeKind::Element, i, "knob", [i as f64, 1.0, 0.0]));
        }
        let (mut local, mut remote) = (Vec::new(), Vec::new());
        for &(e, o, is_local, k) in &links {
            let (e, o) = (e % n_elements, o % n_objects);
            if is_local {
                local.push(edge(e, o, EdgeKind::Local, 1.0));
            } else {
                remote.push(edge(e, o, EdgeKind::Remote, k as f64 / 8.0));
            }
        }
        let build = || assemble("s", &candidates, &local, &remote, Provenance::default()).unwrap();
        let g = build();
        let text = g.to_json();
        prop_assert_eq!(&text, &build().to_json());
        prop_assert_eq!(g.objects.len() + g.elements.len(), candidates.len());
        prop_assert_eq!(&FunctionalSceneGraph::from_json(&text).unwrap(), &g);

        if let Some(first) = g.edges.first().cloned() {
            let mut flipped = g.clone();
            flipped.edges[0].element_id = first.object_id;
            flipped.edges[0].object_id = first.element_id;
            prop_assert!(FunctionalSceneGraph::from_json(&flipped.to_json()).is_err());
        }
    }

    #[test]
    fn disjoint_predictions_score_nothing(
        boxes in prop::collection::vec((prop::array::uniform3(0.0f64..5.0), any::<bool>()), 2..6),
        shift in 20.0f64..100.0,
    ) {
        let labels = ["door", "handle", "lamp", "switch", "drawer", "knob"];
        let nodes: Vec<GtNode> = boxes
            .iter()
            .enumerate()
            .map(|(i, (lo, is_object))| GtNode {
                id: format!("g{i}"),
                kind: if *is_object { NodeKind::Object } else { NodeKind::Element },
                label: labels[i].into(),
                bbox3d: Aabb::new(Point3::from(*lo), Point3::from(lo.map(|x| x + 1.0))).unwrap(),
            })
            .collect();
        let objects: Vec<&GtNode> = nodes.iter().filter(|n| n.kind == NodeKind::Object).collect();
        let elements: Vec<&GtNode> = nodes.iter().filter(|n| n.kind == NodeKind::Element).collect();
        let triplets: Vec<GtTriplet> = match (elements.first(), objects.first()) {
            (Some(e), Some(o)) => vec![GtTriplet {
                object_id: o.id.clone(),
                element_id: e.id.clone(),
                relation_text: "opens".into(),
            }],
            _ => Vec::new(),
        };
        let gt = GroundTruthGraph { scene_id: "s".into(), nodes, triplets };

        let mut pred = FunctionalSceneGraph {
            scene_id: "s".into(),
            objects: Vec::new(),
            elements: Vec::new(),
            edges: gt
                .triplets
                .iter()
                .map(|t| FunctionalEdge {
                    element_id: t.element_id.clone(),
                    object_id: t.object_id.clone(),
                    kind: EdgeKind::Remote,
                    relation: t.relation_text.clone(),
                    confidence: 1.0,
                    evidence: Vec::new(),
                })
                .collect(),
            provenance: Provenance::default(),
        };
        for n in &gt.nodes {
            let moved = Aabb::new(n.bbox3d.min + Vector3::repeat(shift), n.bbox3d.max + Vector3::repeat(shift)).unwrap();
            let node = funcgraph_core::graph::GraphNode {
                id: n.id.clone(),
                kind: n.kind,
                label: n.label.clone(),
                description: n.label.clone(),
                position: moved.center(),
                bbox: moved,
                num_views: 1,
            };
            match n.kind {
                NodeKind::Object => pred.objects.push(node),
                NodeKind::Element => pred.elements.push(node),
            }
        }
        let cfg = EvalConfig { node_ks: vec![1, 10], triplet_ks: vec![1, 10], ..EvalConfig::default() };
        let report = evaluate(&[(pred, gt)], &cfg, &ToyEmbedding, &ToyEmbedding).unwrap();
        for m in report.nodes.values() {
            prop_assert_eq!((m.r_o.hits, m.r_ie.hits), (0, 0));
        }
        for m in report.triplets.values() {
            prop_assert_eq!((m.r_tr.hits, m.r_na.hits), (0, 0));
        }
    }
}
