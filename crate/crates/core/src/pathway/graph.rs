use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    aggregate_influence, by_importance, edge_influence, excitation, neuron_importance, top_k_neurons, NeuronId,
    PathwayError, Result, SetImportance,
};
use crate::attack::Epsilon;
use crate::model::{ActivationTrace, MiniInception, MIXED_LAYERS};

/// Which neuron sets a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    /// Top-k for benign original images only.
    Original,
    /// Top-k for benign target images only.
    Target,
    /// Top-k for both benign sets.
    Both,
    /// Top-k for some attacked set but neither benign set.
    Attacked,
}

impl Context {
    pub fn is_benign(self) -> bool {
        self != Context::Attacked
    }
}

/// Reference set that excitation is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    #[default]
    Original,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayOptions {
    pub benign_k: usize,
    pub attacked_k: usize,
    pub baseline: Baseline,
}

impl Default for PathwayOptions {
    fn default() -> Self {
        Self {
            benign_k: 10,
            attacked_k: 5,
            baseline: Baseline::Original,
        }
    }
}

/// One value per image set. Attacked strengths with no successful image are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetValues {
    pub original: f64,
    pub target: f64,
    #[serde(with = "crate::attack::eps_map")]
    pub attacked: BTreeMap<Epsilon, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathwayNode {
    pub id: NeuronId,
    pub context: Context,
    pub importance: SetValues,
    pub excitation: BTreeMap<Epsilon, f64>,
    pub member_of: BTreeSet<Epsilon>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathwayEdge {
    pub source: NeuronId,
    pub dest: NeuronId,
    pub influence: SetValues,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathwayGraph {
    /// Mixed-layer names, bottom-up.
    pub layers: Vec<String>,
    /// Channel count of each layer.
    pub layer_widths: Vec<usize>,
    pub epsilons: Vec<Epsilon>,
    pub options: PathwayOptions,
    /// Sorted by `(layer, channel)`.
    pub nodes: Vec<PathwayNode>,
    /// Sorted by `(source, dest)`.
    pub edges: Vec<PathwayEdge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    pub in_weak: bool,
    pub in_strong: bool,
}

struct SetTraces<'a> {
    original: &'a [ActivationTrace],
    target: &'a [ActivationTrace],
    attacked: Vec<(Epsilon, &'a [ActivationTrace])>,
}

/// Assembles the pathway graph of one (original, target) pair.
///
/// `attacked` must hold an entry for every strength of the sweep; an empty
/// list records a strength with no successful attack.
pub fn build_pathway_graph(
    model: &MiniInception,
    original: &[ActivationTrace],
    target: &[ActivationTrace],
    attacked: &BTreeMap<Epsilon, Vec<ActivationTrace>>,
    options: &PathwayOptions,
) -> Result<PathwayGraph> {
    if options.benign_k == 0 || options.attacked_k == 0 {
        return Err(PathwayError::InvalidK);
    }
    if original.is_empty() {
        return Err(PathwayError::Empty("original-class trace set"));
    }
    if target.is_empty() {
        return Err(PathwayError::Empty("target-class trace set"));
    }
    let imp_original = neuron_importance(original)?;
    let imp_target = neuron_importance(target)?;
    let imp_attacked: BTreeMap<Epsilon, SetImportance> = attacked
        .iter()
        .filter(|(_, t)| !t.is_empty())
        .map(|(&e, t)| Ok((e, neuron_importance(t)?)))
        .collect::<Result<_>>()?;
    let widths = imp_original.layer_widths();
    let expected: Vec<usize> = model.spec().blocks.iter().map(|b| b.channels()).collect();
    for imp in [&imp_target].into_iter().chain(imp_attacked.values()).chain([&imp_original]) {
        if imp.layer_widths() != expected {
            return Err(PathwayError::InconsistentTraces(format!(
                "trace widths {:?} do not match the model's {:?}",
                imp.layer_widths(),
                expected
            )));
        }
    }
    let epsilons: Vec<Epsilon> = attacked.keys().copied().collect();

    let mut nodes = Vec::new();
    for layer in 0..widths.len() {
        let top_o: BTreeSet<NeuronId> = top_k_neurons(&imp_original, options.benign_k, layer)?.into_iter().collect();
        let top_t: BTreeSet<NeuronId> = top_k_neurons(&imp_target, options.benign_k, layer)?.into_iter().collect();
        let mut top_a: BTreeMap<NeuronId, BTreeSet<Epsilon>> = BTreeMap::new();
        for (&e, imp) in &imp_attacked {
            for id in top_k_neurons(imp, options.attacked_k, layer)? {
                top_a.entry(id).or_default().insert(e);
            }
        }
        let ids: BTreeSet<NeuronId> = top_o.iter().chain(&top_t).chain(top_a.keys()).copied().collect();
        for id in ids {
            let context = match (top_o.contains(&id), top_t.contains(&id)) {
                (true, true) => Context::Both,
                (true, false) => Context::Original,
                (false, true) => Context::Target,
                (false, false) => Context::Attacked,
            };
            let member_of = if context.is_benign() {
                epsilons.iter().copied().collect()
            } else {
                top_a[&id].clone()
            };
            let importance = SetValues {
                original: imp_original.median(id).expect("in range"),
                target: imp_target.median(id).expect("in range"),
                attacked: imp_attacked
                    .iter()
                    .map(|(&e, imp)| (e, imp.median(id).expect("in range")))
                    .collect(),
            };
            let base = match options.baseline {
                Baseline::Original => importance.original,
                Baseline::Target => importance.target,
            };
            let excitation = importance.attacked.iter().map(|(&e, &a)| (e, excitation(a, base))).collect();
            nodes.push(PathwayNode {
                id,
                context,
                importance,
                excitation,
                member_of,
            });
        }
    }

    let sets = SetTraces {
        original,
        target,
        attacked: attacked
            .iter()
            .filter(|(_, t)| !t.is_empty())
            .map(|(&e, t)| (e, t.as_slice()))
            .collect(),
    };
    let pairs: Vec<(NeuronId, NeuronId)> = nodes
        .iter()
        .flat_map(|s| {
            nodes
                .iter()
                .filter(move |d| d.id.layer == s.id.layer + 1)
                .map(move |d| (s.id, d.id))
        })
        .collect();
    let edges = pairs
        .par_iter()
        .map(|&(source, dest)| {
            let median_over = |traces: &[ActivationTrace]| -> Result<f64> {
                let values = traces
                    .iter()
                    .map(|t| Ok(f64::from(edge_influence(t, source, dest, model)?)))
                    .collect::<Result<Vec<f64>>>()?;
                aggregate_influence(&values)
            };
            Ok(PathwayEdge {
                source,
                dest,
                influence: SetValues {
                    original: median_over(sets.original)?,
                    target: median_over(sets.target)?,
                    attacked: sets
                        .attacked
                        .iter()
                        .map(|&(e, t)| Ok((e, median_over(t)?)))
                        .collect::<Result<_>>()?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let graph = PathwayGraph {
        layers: MIXED_LAYERS.iter().map(|s| s.to_string()).collect(),
        layer_widths: widths,
        epsilons,
        options: options.clone(),
        nodes,
        edges,
    };
    graph.validate()?;
    Ok(graph)
}

fn invalid(msg: impl Into<String>) -> PathwayError {
    PathwayError::InvalidGraph(msg.into())
}

/// Excitation may be re-derived from 6-decimal rounded values.
const EXCITATION_TOLERANCE: f64 = 1e-5;

impl PathwayGraph {
    pub fn node(&self, id: NeuronId) -> Option<&PathwayNode> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok().map(|i| &self.nodes[i])
    }

    pub fn layer_nodes(&self, layer: usize) -> impl Iterator<Item = &PathwayNode> {
        self.nodes.iter().filter(move |n| n.id.layer == layer)
    }

    pub fn nodes_with_context(&self, context: Context) -> impl Iterator<Item = &PathwayNode> {
        self.nodes.iter().filter(move |n| n.context == context)
    }

    /// Checks every structural invariant of a graph.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != MIXED_LAYERS.len() || self.layers.iter().zip(MIXED_LAYERS).any(|(a, b)| a != b) {
            return Err(invalid(format!("layers must be {MIXED_LAYERS:?}, got {:?}", self.layers)));
        }
        if self.layer_widths.len() != self.layers.len() {
            return Err(invalid("one width per layer required"));
        }
        if self.epsilons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("strengths must be strictly ascending"));
        }
        if self.options.benign_k == 0 || self.options.attacked_k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        let known: BTreeSet<Epsilon> = self.epsilons.iter().copied().collect();
        if self.nodes.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(invalid("nodes must be sorted and unique"));
        }
        let check_values = |what: &str, v: &SetValues, nonneg: bool| -> Result<()> {
            let all = [v.original, v.target].into_iter().chain(v.attacked.values().copied());
            for x in all {
                if !x.is_finite() || (nonneg && x < 0.0) {
                    return Err(invalid(format!("{what}: value {x} out of range")));
                }
            }
            if let Some(e) = v.attacked.keys().find(|e| !known.contains(e)) {
                return Err(invalid(format!("{what}: unknown strength {e}")));
            }
            Ok(())
        };
        for n in &self.nodes {
            let name = n.id.to_string();
            if n.id.layer >= self.layers.len() || n.id.channel >= self.layer_widths[n.id.layer] {
                return Err(invalid(format!("node {name} out of range")));
            }
            check_values(&format!("importance of {name}"), &n.importance, true)?;
            if n.excitation.keys().ne(n.importance.attacked.keys()) {
                return Err(invalid(format!("node {name}: excitation and attacked importance strengths differ")));
            }
            let base = match self.options.baseline {
                Baseline::Original => n.importance.original,
                Baseline::Target => n.importance.target,
            };
            for (e, &x) in &n.excitation {
                if (x - excitation(n.importance.attacked[e], base)).abs() > EXCITATION_TOLERANCE {
                    return Err(invalid(format!("node {name}: excitation at {e} disagrees with importances")));
                }
            }
            if !n.member_of.is_subset(&known) {
                return Err(invalid(format!("node {name}: membership names an unknown strength")));
            }
            if n.context.is_benign() {
                if n.member_of != known {
                    return Err(invalid(format!("benign node {name} must belong to every strength")));
                }
            } else {
                if n.member_of.is_empty() {
                    return Err(invalid(format!("attacked node {name} belongs to no strength")));
                }
                if let Some(e) = n.member_of.iter().find(|e| !n.importance.attacked.contains_key(e)) {
                    return Err(invalid(format!("attacked node {name} lacks importance at {e}")));
                }
            }
        }
        for layer in 0..self.layers.len() {
            let count = |pred: &dyn Fn(&PathwayNode) -> bool| self.layer_nodes(layer).filter(|n| pred(n)).count();
            let k = self.options.benign_k;
            if count(&|n| matches!(n.context, Context::Original | Context::Both)) > k {
                return Err(invalid(format!("layer {layer}: more than {k} original-set nodes")));
            }
            if count(&|n| matches!(n.context, Context::Target | Context::Both)) > k {
                return Err(invalid(format!("layer {layer}: more than {k} target-set nodes")));
            }
            for e in &self.epsilons {
                if count(&|n| n.context == Context::Attacked && n.member_of.contains(e)) > self.options.attacked_k {
                    return Err(invalid(format!("layer {layer}: too many attacked nodes at {e}")));
                }
            }
        }
        if self.edges.windows(2).any(|w| (w[0].source, w[0].dest) >= (w[1].source, w[1].dest)) {
            return Err(invalid("edges must be sorted and unique"));
        }
        for e in &self.edges {
            let name = format!("{} -> {}", e.source, e.dest);
            if self.node(e.source).is_none() || self.node(e.dest).is_none() {
                return Err(invalid(format!("edge {name} has a missing endpoint")));
            }
            if e.dest.layer != e.source.layer + 1 {
                return Err(invalid(format!("edge {name} skips a layer")));
            }
            check_values(&format!("influence of {name}"), &e.influence, false)?;
        }
        Ok(())
    }

    /// Checks that every node's context is what the top-k sets of the given
    /// importances prescribe, and that no top-k neuron is missing.
    pub fn verify_contexts(
        &self,
        original: &SetImportance,
        target: &SetImportance,
        attacked: &BTreeMap<Epsilon, SetImportance>,
    ) -> Result<()> {
        let opts = &self.options;
        let mut expected: BTreeMap<NeuronId, (bool, bool, BTreeSet<Epsilon>)> = BTreeMap::new();
        for layer in 0..self.layers.len() {
            for id in top_k_neurons(original, opts.benign_k, layer)? {
                expected.entry(id).or_default().0 = true;
            }
            for id in top_k_neurons(target, opts.benign_k, layer)? {
                expected.entry(id).or_default().1 = true;
            }
            for (&e, imp) in attacked {
                for id in top_k_neurons(imp, opts.attacked_k, layer)? {
                    expected.entry(id).or_default().2.insert(e);
                }
            }
        }
        let got: Vec<NeuronId> = self.nodes.iter().map(|n| n.id).collect();
        let want: Vec<NeuronId> = expected.keys().copied().collect();
        if got != want {
            return Err(invalid(format!("node set {got:?} differs from top-k union {want:?}")));
        }
        for n in &self.nodes {
            let (o, t, ref a) = expected[&n.id];
            let context = match (o, t) {
                (true, true) => Context::Both,
                (true, false) => Context::Original,
                (false, true) => Context::Target,
                (false, false) => Context::Attacked,
            };
            if n.context != context {
                return Err(invalid(format!("node {} has context {:?}, expected {context:?}", n.id, n.context)));
            }
            if !n.context.is_benign() && &n.member_of != a {
                return Err(invalid(format!("node {} has wrong membership", n.id)));
            }
        }
        Ok(())
    }
}

/// Membership of every node in the pathways of a weaker and a stronger attack.
pub fn compare_membership(
    graph: &PathwayGraph,
    weak: Epsilon,
    strong: Epsilon,
) -> Result<BTreeMap<NeuronId, Membership>> {
    for e in [weak, strong] {
        if !graph.epsilons.contains(&e) {
            return Err(PathwayError::UnknownEpsilon(e));
        }
    }
    if weak >= strong {
        return Err(PathwayError::NotOrdered { weak, strong });
    }
    Ok(graph
        .nodes
        .iter()
        .map(|n| {
            (
                n.id,
                Membership {
                    in_weak: n.member_of.contains(&weak),
                    in_strong: n.member_of.contains(&strong),
                },
            )
        })
        .collect())
}

/// Number of nodes kept by a per-layer top-`percent` filter out of `n`.
pub fn percent_keep(n: usize, percent: f64) -> usize {
    // Guard against 0.3 * 10 landing just above an integer.
    ((n as f64 * percent / 100.0) - 1e-9).ceil().max(0.0) as usize
}

/// Attacked-context members of `epsilon` that survive a per-layer filter
/// keeping the top `percent` of each layer's nodes by attacked importance.
pub fn count_red_neurons(graph: &PathwayGraph, epsilon: Epsilon, percent: f64) -> Result<usize> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(PathwayError::InvalidPercent(percent));
    }
    if !graph.epsilons.contains(&epsilon) {
        return Err(PathwayError::UnknownEpsilon(epsilon));
    }
    let mut total = 0;
    for layer in 0..graph.layers.len() {
        let mut ranked: Vec<(usize, f64, &PathwayNode)> = graph
            .layer_nodes(layer)
            .filter_map(|n| n.importance.attacked.get(&epsilon).map(|&v| (n.id.channel, v, n)))
            .collect();
        ranked.sort_by(|a, b| by_importance((a.0, a.1), (b.0, b.1)));
        let keep = percent_keep(ranked.len(), percent);
        total += ranked
            .iter()
            .take(keep)
            .filter(|(_, _, n)| n.context == Context::Attacked && n.member_of.contains(&epsilon))
            .count();
    }
    Ok(total)
}
