//! Assertions over the toy fixture, shared by its test target and the
//! acceptance harness.

use std::collections::{BTreeMap, BTreeSet};

use super::{eps, toy_fixture, toy_manifest};
use pathwayforge_core::pathway::{
    build_pathway_graph, compare_membership, count_red_neurons, neuron_importance, Membership, PathwayOptions,
    SetValues,
};
use pathwayforge_core::store::{export_graph_json, import_graph_json, NodeAssets};
use pathwayforge_core::{Context, NeuronId, PathwayGraph};

const TOL: f64 = 1e-6;

fn n(layer: usize, channel: usize) -> NeuronId {
    NeuronId::new(layer, channel)
}

fn build(options: &PathwayOptions) -> PathwayGraph {
    let f = toy_fixture();
    build_pathway_graph(&f.model, &f.original, &f.target, &f.attacked, options).unwrap()
}

fn graph() -> PathwayGraph {
    build(&toy_fixture().options)
}

fn assert_values(what: &str, got: &SetValues, o: f64, t: f64, a: &[(f64, f64)]) {
    assert!((got.original - o).abs() < TOL, "{what} original {} vs {o}", got.original);
    assert!((got.target - t).abs() < TOL, "{what} target {} vs {t}", got.target);
    let want: BTreeMap<_, _> = a.iter().map(|&(e, v)| (eps(e), v)).collect();
    assert_eq!(got.attacked.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>(), "{what}");
    for (e, v) in &want {
        assert!((got.attacked[e] - v).abs() < TOL, "{what} at {e}: {} vs {v}", got.attacked[e]);
    }
}

pub fn nodes_match_hand_derivation() {
    let g = graph();
    let all: BTreeSet<_> = [0.1, 0.2, 0.3].map(eps).into_iter().collect();
    let only = |e: f64| BTreeSet::from([eps(e)]);
    #[rustfmt::skip]
    let expected = [
        (n(0, 0), Context::Both, all.clone(), (3.0, 1.5, [0.5, 1.5]), [-2.5, -1.5]),
        (n(0, 1), Context::Attacked, only(0.1), (1.0, 0.75, [3.0, 0.5]), [2.0, -0.5]),
        (n(1, 0), Context::Original, all.clone(), (1.0, 0.5, [2.0, 0.5]), [1.0, -0.5]),
        (n(1, 1), Context::Target, all.clone(), (0.5, 2.0, [1.0, 1.5]), [0.5, 1.0]),
        (n(2, 0), Context::Attacked, only(0.2), (0.5, 0.5, [1.0, 2.5]), [0.5, 2.0]),
        (n(2, 1), Context::Both, all.clone(), (2.0, 1.5, [2.0, 0.75]), [0.0, -1.25]),
    ];
    assert_eq!(g.nodes.len(), expected.len());
    for (node, (id, ctx, members, (o, t, a), ex)) in g.nodes.iter().zip(expected) {
        assert_eq!(node.id, id);
        assert_eq!(node.context, ctx, "{id}");
        assert_eq!(node.member_of, members, "{id}");
        assert_values(&format!("{id} importance"), &node.importance, o, t, &[(0.1, a[0]), (0.2, a[1])]);
        assert_eq!(node.excitation.len(), 2, "{id}");
        assert!((node.excitation[&eps(0.1)] - ex[0]).abs() < TOL, "{id}");
        assert!((node.excitation[&eps(0.2)] - ex[1]).abs() < TOL, "{id}");
    }
}

pub fn edges_match_hand_derivation() {
    let g = graph();
    #[rustfmt::skip]
    let expected = [
        (n(0, 0), n(1, 0), 6.0, 3.0, [1.0, 3.0]),
        (n(0, 0), n(1, 1), 3.0, 1.5, [0.5, 1.5]),
        (n(0, 1), n(1, 0), 0.0, 0.0, [0.0, 0.0]),
        (n(0, 1), n(1, 1), 0.5, 0.375, [1.5, 0.25]),
        (n(1, 0), n(2, 0), 0.5, 0.25, [1.0, 0.25]),
        (n(1, 0), n(2, 1), 1.0, 0.5, [2.0, 0.5]),
        (n(1, 1), n(2, 0), 0.0, 0.0, [-0.25, 0.0]),
        (n(1, 1), n(2, 1), 0.125, 0.5, [0.625, 0.375]),
    ];
    assert_eq!(g.edges.len(), expected.len());
    for (e, (s, d, o, t, a)) in g.edges.iter().zip(expected) {
        assert_eq!((e.source, e.dest), (s, d));
        assert_values(&format!("{s}->{d}"), &e.influence, o, t, &[(0.1, a[0]), (0.2, a[1])]);
    }
}

/// Attacked-context nodes per layer never exceed `attacked_k · |ε|`, for
/// every attacked k from 1 to the layer width.
pub fn attacked_nodes_within_bound() {
    let base = toy_fixture().options;
    for attacked_k in 1..=2 {
        let g = build(&PathwayOptions { attacked_k, ..base.clone() });
        for l in 0..3 {
            let red = g.layer_nodes(l).filter(|n| n.context == Context::Attacked).count();
            assert!(red <= attacked_k * g.epsilons.len(), "layer {l}: {red} attacked nodes");
            assert!(g.layer_nodes(l).count() <= 2 * base.benign_k + attacked_k * g.epsilons.len());
        }
    }
}

pub fn membership_comparison() {
    let g = graph();
    let c = compare_membership(&g, eps(0.1), eps(0.2)).unwrap();
    for (id, m) in &c {
        let want = match (id.layer, id.channel) {
            (0, 1) => (true, false),
            (2, 0) => (false, true),
            _ => (true, true),
        };
        assert_eq!((m.in_weak, m.in_strong), want, "{id}");
    }
    let c = compare_membership(&g, eps(0.2), eps(0.3)).unwrap();
    assert_eq!(c[&n(0, 1)], Membership { in_weak: false, in_strong: false });
    assert_eq!(c[&n(2, 0)], Membership { in_weak: true, in_strong: false });
    assert_eq!(c[&n(1, 1)], Membership { in_weak: true, in_strong: true });
    assert!(compare_membership(&g, eps(0.2), eps(0.1)).is_err());
    assert!(compare_membership(&g, eps(0.1), eps(0.4)).is_err());
}

pub fn red_neuron_counts() {
    let g = graph();
    for (e, p, want) in [(0.1, 30.0, 1), (0.1, 100.0, 1), (0.2, 30.0, 1), (0.2, 100.0, 1), (0.3, 30.0, 0), (0.3, 100.0, 0)] {
        assert_eq!(count_red_neurons(&g, eps(e), p).unwrap(), want, "eps {e} at {p}%");
    }
    let mut options = toy_fixture().options;
    options.attacked_k = 2;
    let g = build(&options);
    let red: Vec<_> = g.nodes_with_context(Context::Attacked).map(|n| n.id).collect();
    assert_eq!(red, vec![n(0, 1), n(2, 0)]);
    for id in &red {
        assert_eq!(g.node(*id).unwrap().member_of, BTreeSet::from([eps(0.1), eps(0.2)]));
    }
    for (e, p, want) in [(0.1, 30.0, 1), (0.1, 100.0, 2), (0.2, 30.0, 1), (0.2, 100.0, 2), (0.3, 100.0, 0)] {
        assert_eq!(count_red_neurons(&g, eps(e), p).unwrap(), want, "eps {e} at {p}%");
    }
}

pub fn contexts_follow_top_k_sets() {
    let f = toy_fixture();
    let g = graph();
    let attacked = f
        .attacked
        .iter()
        .filter(|(_, t)| !t.is_empty())
        .map(|(e, t)| (*e, neuron_importance(t).unwrap()))
        .collect();
    g.verify_contexts(
        &neuron_importance(&f.original).unwrap(),
        &neuron_importance(&f.target).unwrap(),
        &attacked,
    )
    .unwrap();
}

pub fn json_round_trip_is_byte_identical() {
    let g = graph();
    let manifest = toy_manifest();
    let bytes = export_graph_json(&g, &BTreeMap::<NeuronId, NodeAssets>::new(), &manifest).unwrap();
    let (back, assets, m) = import_graph_json(&bytes).unwrap();
    assert_eq!(back, g);
    assert!(assets.is_empty());
    assert_eq!(m, manifest);
    assert_eq!(export_graph_json(&back, &assets, &m).unwrap(), bytes);
}
