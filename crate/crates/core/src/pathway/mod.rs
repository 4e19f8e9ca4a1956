//! Neuron importance, connection influence and pathway-graph assembly.
//!
//! A neuron is one channel of a mixed layer. Its importance for an image set
//! is the median over images of the channel's spatial maximum. The influence
//! of a connection is the spatial maximum of one kernel slice convolved over
//! the source channel, again median-aggregated per image set.

mod graph;

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::Epsilon;
use crate::model::{ActivationTrace, MiniInception, MIXED_LAYERS};
use crate::ops;
use crate::tensor::{Padding, Tensor, TensorError};

pub use graph::{
    build_pathway_graph, percent_keep, compare_membership, count_red_neurons, Baseline, Context, Membership, PathwayEdge,
    PathwayGraph, PathwayNode, PathwayOptions, SetValues,
};

#[derive(Debug, Error)]
pub enum PathwayError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("neuron {neuron} out of range: {reason}")]
    NeuronOutOfRange { neuron: NeuronId, reason: String },
    #[error("{source_id} -> {dest} is not a connection between adjacent mixed layers")]
    NotAdjacent { source_id: NeuronId, dest: NeuronId },
    #[error("traces disagree in shape: {0}")]
    InconsistentTraces(String),
    #[error("strength {0} is not part of the graph")]
    UnknownEpsilon(Epsilon),
    #[error("weak strength {weak} must be below strong strength {strong}")]
    NotOrdered { weak: Epsilon, strong: Epsilon },
    #[error("percent filter must lie in (0, 100], got {0}")]
    InvalidPercent(f64),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = PathwayError> = std::result::Result<T, E>;

/// Channel `channel` of mixed layer `layer` (0-based, bottom-up).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct NeuronId {
    pub layer: usize,
    pub channel: usize,
}

impl NeuronId {
    pub const fn new(layer: usize, channel: usize) -> Self {
        Self { layer, channel }
    }

    pub fn layer_name(&self) -> &'static str {
        MIXED_LAYERS.get(self.layer).copied().unwrap_or("?")
    }

    pub fn layer_index(name: &str) -> Option<usize> {
        MIXED_LAYERS.iter().position(|&l| l == name)
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer_name(), self.channel)
    }
}

#[derive(Serialize, Deserialize)]
struct NeuronIdRepr {
    layer: String,
    channel: usize,
}

impl Serialize for NeuronId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NeuronIdRepr {
            layer: self.layer_name().to_string(),
            channel: self.channel,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for NeuronId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = NeuronIdRepr::deserialize(d)?;
        let layer = NeuronId::layer_index(&r.layer)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown layer {:?}", r.layer)))?;
        Ok(NeuronId::new(layer, r.channel))
    }
}

/// Spatial maximum of a `[H, W]` channel map.
pub fn max_activation(channel: &Tensor) -> Result<f32> {
    if channel.rank() != 2 {
        return Err(TensorError::InvalidShape {
            shape: channel.shape().to_vec(),
            reason: "channel maps are [H, W]",
        }
        .into());
    }
    if channel.is_empty() {
        return Err(PathwayError::Empty("channel"));
    }
    Ok(channel.max())
}

/// Median with the midpoint convention for even counts; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Per-image maxima of one neuron and their median.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronStats {
    pub median: f64,
    pub maxima: Vec<f32>,
}

/// Importance of every mixed-layer neuron for one image set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetImportance {
    /// `[layer][channel]`.
    pub layers: Vec<Vec<NeuronStats>>,
}

impl SetImportance {
    pub fn get(&self, id: NeuronId) -> Option<&NeuronStats> {
        self.layers.get(id.layer)?.get(id.channel)
    }

    pub fn median(&self, id: NeuronId) -> Option<f64> {
        self.get(id).map(|s| s.median)
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn num_images(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, |s| s.maxima.len())
    }
}

fn trace_widths(trace: &ActivationTrace) -> Vec<usize> {
    trace.mixed.iter().map(|t| t.shape().last().copied().unwrap_or(0)).collect()
}

/// Per-channel spatial maxima of a `[H, W, C]` map.
fn channel_maxima(map: &Tensor) -> Result<Vec<f32>> {
    let (_, _, c) = map.hwc("channel maxima")?;
    let mut out = vec![f32::NEG_INFINITY; c];
    for px in map.data().chunks_exact(c) {
        for (m, &v) in out.iter_mut().zip(px) {
            *m = m.max(v);
        }
    }
    Ok(out)
}

/// Median over images of each neuron's spatial maximum, for every mixed layer.
pub fn neuron_importance(traces: &[ActivationTrace]) -> Result<SetImportance> {
    let first = traces.first().ok_or(PathwayError::Empty("trace list"))?;
    let widths = trace_widths(first);
    let mut maxima: Vec<Vec<Vec<f32>>> = widths.iter().map(|&w| vec![Vec::with_capacity(traces.len()); w]).collect();
    for (i, trace) in traces.iter().enumerate() {
        if trace_widths(trace) != widths
            || trace.mixed.iter().zip(&first.mixed).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(PathwayError::InconsistentTraces(format!("trace {i} differs from trace 0")));
        }
        for (layer, map) in trace.mixed.iter().enumerate() {
            for (d, m) in channel_maxima(map)?.into_iter().enumerate() {
                maxima[layer][d].push(m);
            }
        }
    }
    let layers = maxima
        .into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .map(|m| {
                    let wide: Vec<f64> = m.iter().map(|&v| f64::from(v)).collect();
                    NeuronStats {
                        median: median(&wide).expect("nonempty"),
                        maxima: m,
                    }
                })
                .collect()
        })
        .collect();
    Ok(SetImportance { layers })
}

/// Descending-importance ordering with ascending channel as the tie rule.
fn by_importance(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `min(k, D)` most important neurons of `layer`, most important first.
pub fn top_k_neurons(importance: &SetImportance, k: usize, layer: usize) -> Result<Vec<NeuronId>> {
    if k == 0 {
        return Err(PathwayError::InvalidK);
    }
    let stats = importance.layers.get(layer).ok_or_else(|| PathwayError::NeuronOutOfRange {
        neuron: NeuronId::new(layer, 0),
        reason: format!("only {} layers", importance.layers.len()),
    })?;
    let mut ranked: Vec<(usize, f64)> = stats.iter().map(|s| s.median).enumerate().collect();
    ranked.sort_by(|&a, &b| by_importance(a, b));
    Ok(ranked.into_iter().take(k).map(|(d, _)| NeuronId::new(layer, d)).collect())
}

fn check_neuron(model: &MiniInception, id: NeuronId) -> Result<()> {
    if id.layer >= MIXED_LAYERS.len() {
        return Err(PathwayError::NeuronOutOfRange {
            neuron: id,
            reason: "no such layer".into(),
        });
    }
    let width = model.spec().blocks[id.layer].channels();
    if id.channel >= width {
        return Err(PathwayError::NeuronOutOfRange {
            neuron: id,
            reason: format!("layer has {width} channels"),
        });
    }
    Ok(())
}

/// The single-channel map `dest`'s branch convolves to measure `source`'s
/// contribution, together with the matching kernel slice `[kh, kw, 1, 1]`.
fn influence_operands(
    trace: &ActivationTrace,
    source: NeuronId,
    dest: NeuronId,
    model: &MiniInception,
) -> Result<(Tensor, Tensor)> {
    check_neuron(model, source)?;
    check_neuron(model, dest)?;
    if dest.layer != source.layer + 1 {
        return Err(PathwayError::NotAdjacent { source_id: source, dest });
    }
    let map = trace
        .mixed
        .get(source.layer)
        .ok_or_else(|| PathwayError::InconsistentTraces(format!("trace lacks layer {}", source.layer)))?;
    let (h, w, _) = map.hwc("edge_influence")?;
    let src = ops::channel(map, source.channel)?.reshape(&[h, w, 1])?;
    let (branch, local) = model.block(dest.layer).locate(dest.channel).expect("channel checked");
    let src = match branch.kind.pre_pool() {
        Some(window) => ops::maxpool(&src, window, 1, Padding::Same)?,
        None => src,
    };
    let k = &branch.conv.kernel;
    let (kh, kw, cin, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let slice = (0..kh * kw)
        .map(|tap| k.data()[(tap * cin + source.channel) * cout + local])
        .collect();
    Ok((src, Tensor::new(&[kh, kw, 1, 1], slice)?))
}

/// Spatial maximum of the source channel convolved with the kernel slice
/// linking it to `dest`, using `dest`'s branch padding. May be negative.
pub fn edge_influence(trace: &ActivationTrace, source: NeuronId, dest: NeuronId, model: &MiniInception) -> Result<f32> {
    let (src, slice) = influence_operands(trace, source, dest, model)?;
    let out = ops::conv2d(&src, &slice, 1, Padding::Same)?;
    Ok(out.max())
}

/// Median of per-image influence values.
pub fn aggregate_influence(values: &[f64]) -> Result<f64> {
    median(values).ok_or(PathwayError::Empty("influence list"))
}

/// Signed change of importance under attack: positive is excited, negative inhibited.
pub fn excitation(attacked: f64, benign: f64) -> f64 {
    attacked - benign
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchSpec, BlockSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace_from(maps: Vec<Tensor>) -> ActivationTrace {
        ActivationTrace {
            mixed: maps,
            logits: Tensor::zeros(&[2]).unwrap(),
            predicted: 0,
        }
    }

    fn ch(rows: &[&[f32]]) -> Tensor {
        let h = rows.len();
        let w = rows[0].len();
        Tensor::new(&[h, w], rows.concat()).unwrap()
    }

    #[test]
    fn max_activation_examples() {
        assert_eq!(max_activation(&ch(&[&[0.0, 0.0], &[0.0, 0.0]])).unwrap(), 0.0);
        assert_eq!(max_activation(&ch(&[&[1.0, 5.0], &[3.0, 2.0]])).unwrap(), 5.0);
        assert!(max_activation(&Tensor::zeros(&[2, 2, 1]).unwrap()).is_err());
    }

    #[test]
    fn max_activation_random_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..13 * 7).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut best = f32::NEG_INFINITY;
        for y in 0..13 {
            for x in 0..7 {
                if data[y * 7 + x] > best {
                    best = data[y * 7 + x];
                }
            }
        }
        assert_eq!(max_activation(&Tensor::new(&[13, 7], data).unwrap()).unwrap(), best);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[1.0, 3.0, 100.0]), Some(3.0));
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), Some(2.5));
        assert_eq!(median(&[5.0]), Some(5.0));
        assert_eq!(median(&[]), None);
        assert_eq!(aggregate_influence(&[-1.0, 0.0, 9.0]).unwrap(), 0.0);
        assert!(aggregate_influence(&[]).is_err());
    }

    #[test]
    fn excitation_sign() {
        assert_eq!(excitation(3.0, 3.0), 0.0);
        assert_eq!(excitation(7.0, 3.0), 4.0);
        assert_eq!(excitation(1.0, 6.0), -5.0);
    }

    #[test]
    fn importance_single_and_multiple_images() {
        let t = |v: f32| trace_from(vec![Tensor::new(&[1, 2, 1], vec![v, 0.5]).unwrap()]);
        let one = neuron_importance(&[t(2.0)]).unwrap();
        assert_eq!(one.median(NeuronId::new(0, 0)), Some(2.0));
        let many = neuron_importance(&[t(1.0), t(100.0), t(3.0)]).unwrap();
        assert_eq!(many.median(NeuronId::new(0, 0)), Some(3.0));
        assert_eq!(many.get(NeuronId::new(0, 0)).unwrap().maxima, vec![1.0, 100.0, 3.0]);
        assert_eq!(many.num_images(), 3);
        assert!(neuron_importance(&[]).is_err());
        let other = trace_from(vec![Tensor::zeros(&[1, 2, 2]).unwrap()]);
        assert!(matches!(
            neuron_importance(&[t(1.0), other]),
            Err(PathwayError::InconsistentTraces(_))
        ));
    }

    fn importance_of(values: &[f64]) -> SetImportance {
        SetImportance {
            layers: vec![values
                .iter()
                .map(|&m| NeuronStats {
                    median: m,
                    maxima: vec![m as f32],
                })
                .collect()],
        }
    }

    #[test]
    fn top_k_ties_and_bounds() {
        let flat = importance_of(&[1.0; 6]);
        let ids: Vec<usize> = top_k_neurons(&flat, 3, 0).unwrap().iter().map(|n| n.channel).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        let all = top_k_neurons(&importance_of(&[0.3, 0.9, 0.1]), 10, 0).unwrap();
        assert_eq!(all.iter().map(|n| n.channel).collect::<Vec<_>>(), vec![1, 0, 2]);
        assert!(top_k_neurons(&flat, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn top_k_matches_sort_oracle(values in prop::collection::vec(0u8..6, 1..20), k in 1usize..25) {
            let vals: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
            let got: Vec<usize> = top_k_neurons(&importance_of(&vals), k, 0).unwrap().iter().map(|n| n.channel).collect();
            let mut oracle: Vec<usize> = (0..vals.len()).collect();
            // Stable sort keeps ascending channel among equal values.
            oracle.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
            oracle.truncate(k);
            prop_assert_eq!(got, oracle);
        }

        #[test]
        fn median_is_permutation_invariant(mut v in prop::collection::vec(-100i32..100, 1..30), seed in 0u64..100) {
            let vals: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
            let m = median(&vals).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            v.shuffle(&mut rng);
            let shuffled: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
            prop_assert_eq!(median(&shuffled).unwrap(), m);
            // Sorting oracle.
            let mut s = vals.clone();
            s.sort_by(f64::total_cmp);
            let n = s.len();
            let oracle = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
            prop_assert_eq!(m, oracle);
            if n % 2 == 1 && n > 1 {
                let imax = vals.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                let mut bigger = vals.clone();
                bigger[imax] += 1000.0;
                prop_assert_eq!(median(&bigger).unwrap(), m);
            }
        }
    }

    /// A small model whose mixed layers have every branch kind.
    fn small_model(seed: u64) -> MiniInception {
        let spec = ArchSpec {
            input_size: 16,
            input_channels: 3,
            stem_channels: 4,
            blocks: [BlockSpec { widths: [1, 2, 1, 1] }; 3],
            num_classes: 2,
        };
        MiniInception::new(spec, seed).unwrap()
    }

    fn random_trace(model: &MiniInception, seed: u64) -> ActivationTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::new(&[16, 16, 3], (0..16 * 16 * 3).map(|_| rng.random()).collect()).unwrap();
        model.forward_with_trace(&img).unwrap()
    }

    /// Loop oracle: same-padded single-channel cross-correlation, then max.
    fn influence_oracle(map: &[f32], h: usize, w: usize, k: &[f32], kh: usize, kw: usize) -> f64 {
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut best = f64::NEG_INFINITY;
        for y in 0..h {
            for x in 0..w {
                let mut s = 0f64;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (iy, ix) = (y as isize + ky as isize - pt as isize, x as isize + kx as isize - pl as isize);
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            s += f64::from(map[iy as usize * w + ix as usize]) * f64::from(k[ky * kw + kx]);
                        }
                    }
                }
                best = best.max(s);
            }
        }
        best
    }

    #[test]
    fn influence_matches_loop_oracle_for_every_branch() {
        let model = small_model(5);
        let trace = random_trace(&model, 6);
        let (h, w, c) = trace.mixed[0].hwc("t").unwrap();
        for dest in 0..5 {
            for source in 0..c {
                let (s, d) = (NeuronId::new(0, source), NeuronId::new(1, dest));
                let got = edge_influence(&trace, s, d, &model).unwrap();
                let (branch, local) = model.block(1).locate(dest).unwrap();
                let mut map: Vec<f32> = trace.mixed[0].data().iter().skip(source).step_by(c).copied().collect();
                if branch.kind.pre_pool().is_some() {
                    let src = map.clone();
                    for y in 0..h {
                        for x in 0..w {
                            let mut m = f32::NEG_INFINITY;
                            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                                    m = m.max(src[yy * w + xx]);
                                }
                            }
                            map[y * w + x] = m;
                        }
                    }
                }
                let k = &branch.conv.kernel;
                let (kh, kw, cin, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
                let slice: Vec<f32> = (0..kh * kw).map(|t| k.data()[(t * cin + source) * cout + local]).collect();
                let oracle = influence_oracle(&map, h, w, &slice, kh, kw);
                assert!((f64::from(got) - oracle).abs() < 1e-5, "{s}->{d}: {got} vs {oracle}");
            }
        }
    }

    #[test]
    fn one_by_one_influence_factorizes() {
        let model = small_model(2);
        let trace = random_trace(&model, 3);
        let (branch, local) = model.block(2).locate(0).unwrap();
        assert_eq!(branch.kind.kernel_size(), 1);
        for source in 0..5 {
            let wgt = branch.conv.kernel.data()[source * branch.width() + local];
            let got = edge_influence(&trace, NeuronId::new(1, source), NeuronId::new(2, 0), &model).unwrap();
            let cmax = max_activation(&ops::channel(&trace.mixed[1], source).unwrap()).unwrap();
            if wgt >= 0.0 {
                assert_eq!(got, wgt * cmax);
            } else {
                // A negative weight turns the maximum into the scaled minimum.
                let cmin = ops::channel(&trace.mixed[1], source)
                    .unwrap()
                    .data()
                    .iter()
                    .copied()
                    .fold(f32::INFINITY, f32::min);
                assert_eq!(got, wgt * cmin);
            }
        }
    }

    #[test]
    fn influence_rejects_bad_ids() {
        let model = small_model(2);
        let trace = random_trace(&model, 3);
        let e = edge_influence(&trace, NeuronId::new(0, 9), NeuronId::new(1, 0), &model);
        assert!(matches!(e, Err(PathwayError::NeuronOutOfRange { .. })));
        let e = edge_influence(&trace, NeuronId::new(0, 0), NeuronId::new(2, 0), &model);
        assert!(matches!(e, Err(PathwayError::NotAdjacent { .. })));
        let e = edge_influence(&trace, NeuronId::new(1, 0), NeuronId::new(0, 0), &model);
        assert!(matches!(e, Err(PathwayError::NotAdjacent { .. })));
    }

    #[test]
    fn zero_kernel_slice_gives_zero_influence() {
        let mut model = small_model(4);
        for p in model.parameters_mut() {
            if p.rank() == 4 {
                *p = Tensor::zeros(p.shape()).unwrap();
            }
        }
        let trace = random_trace(&small_model(4), 1);
        assert_eq!(edge_influence(&trace, NeuronId::new(0, 1), NeuronId::new(1, 2), &model).unwrap(), 0.0);
    }

    #[test]
    fn neuron_id_json_uses_layer_names() {
        let id = NeuronId::new(2, 7);
        let s = serde_json::to_string(&id).unwrap();
        assert_eq!(s, r#"{"layer":"mixed2","channel":7}"#);
        assert_eq!(serde_json::from_str::<NeuronId>(&s).unwrap(), id);
        assert!(serde_json::from_str::<NeuronId>(r#"{"layer":"stem","channel":0}"#).is_err());
    }
}
