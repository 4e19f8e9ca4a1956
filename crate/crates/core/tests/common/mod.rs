//! A hand-built model and trace sets small enough to derive every pathway
//! quantity by hand. Maps are 2×2 with two channels per mixed layer:
//! channel 0 is a 1x1 branch, channel 1 a 3x3 branch.
#![allow(dead_code)]

pub mod checks;
pub mod fixture_checks;
pub mod oracle;

use std::collections::BTreeMap;

use pathwayforge_core::model::{ActivationTrace, MiniInception};
use pathwayforge_core::pathway::{Baseline, PathwayOptions};
use pathwayforge_core::store::{AttackParams, DatasetInfo, RunManifest};
use pathwayforge_core::{Epsilon, Tensor};

pub fn eps(v: f64) -> Epsilon {
    Epsilon::new(v).unwrap()
}

fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

/// 3x3 kernel with two input channels and one output, from (ky, kx, src, w) taps.
fn k3(taps: &[(usize, usize, usize, f32)]) -> Tensor {
    let mut data = vec![0.0; 18];
    for &(ky, kx, src, w) in taps {
        data[(ky * 3 + kx) * 2 + src] = w;
    }
    t(&[3, 3, 2, 1], data)
}

pub fn toy_model() -> MiniInception {
    let zero_bias = || t(&[1], vec![0.0]);
    let params = vec![
        ("stem.kernel".to_string(), t(&[3, 3, 3, 2], vec![0.0; 54])),
        ("stem.bias".to_string(), t(&[2], vec![0.0; 2])),
        ("mixed0.conv1x1.kernel".to_string(), t(&[1, 1, 2, 1], vec![1.0, 1.0])),
        ("mixed0.conv1x1.bias".to_string(), zero_bias()),
        ("mixed0.conv3x3.kernel".to_string(), k3(&[(1, 1, 0, 1.0), (1, 1, 1, 1.0)])),
        ("mixed0.conv3x3.bias".to_string(), zero_bias()),
        ("mixed1.conv1x1.kernel".to_string(), t(&[1, 1, 2, 1], vec![2.0, -1.0])),
        ("mixed1.conv1x1.bias".to_string(), zero_bias()),
        (
            "mixed1.conv3x3.kernel".to_string(),
            k3(&[(1, 1, 0, 1.0), (1, 2, 0, 0.5), (0, 0, 1, -1.0), (1, 1, 1, 0.5)]),
        ),
        ("mixed1.conv3x3.bias".to_string(), zero_bias()),
        ("mixed2.conv1x1.kernel".to_string(), t(&[1, 1, 2, 1], vec![0.5, -0.5])),
        ("mixed2.conv1x1.bias".to_string(), zero_bias()),
        (
            "mixed2.conv3x3.kernel".to_string(),
            k3(&[
                (1, 1, 0, 1.0),
                (2, 1, 0, 1.0),
                (0, 0, 1, 0.25),
                (0, 1, 1, 0.25),
                (0, 2, 1, 0.25),
                (1, 0, 1, 0.25),
                (1, 1, 1, 0.25),
                (1, 2, 1, 0.25),
                (2, 0, 1, 0.25),
                (2, 1, 1, 0.25),
                (2, 2, 1, 0.25),
            ]),
        ),
        ("mixed2.conv3x3.bias".to_string(), zero_bias()),
        ("head.weights".to_string(), t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])),
        ("head.bias".to_string(), t(&[2], vec![0.0; 2])),
    ];
    MiniInception::from_parameters(params, 4).unwrap()
}

type Map = [f32; 4];

/// Builds a trace from per-layer `[channel0, channel1]` maps given as
/// `[(0,0), (0,1), (1,0), (1,1)]`.
fn trace(layers: [[Map; 2]; 3]) -> ActivationTrace {
    let mixed = layers
        .iter()
        .map(|[c0, c1]| {
            let data = (0..4).flat_map(|p| [c0[p], c1[p]]).collect();
            t(&[2, 2, 2], data)
        })
        .collect();
    ActivationTrace {
        mixed,
        logits: t(&[2], vec![0.0, 0.0]),
        predicted: 0,
    }
}

pub struct Fixture {
    pub model: MiniInception,
    pub original: Vec<ActivationTrace>,
    pub target: Vec<ActivationTrace>,
    pub attacked: BTreeMap<Epsilon, Vec<ActivationTrace>>,
    pub options: PathwayOptions,
}

pub fn toy_fixture() -> Fixture {
    let o1 = trace([
        [[1., 2., 0., 0.], [0., 1., 0., 0.]],
        [[1., 0., 0., 0.], [0., 0., 0., 0.5]],
        [[0., 0., 0., 0.], [0., 1., 0., 0.]],
    ]);
    let o2 = trace([
        [[3., 0., 0., 1.], [0., 0., 0.5, 0.]],
        [[0., 2., 0., 0.], [0., 0., 1., 0.]],
        [[1., 0., 0., 0.], [0., 0., 2., 0.]],
    ]);
    let o3 = trace([
        [[0., 0., 4., 0.], [2., 0., 0., 0.]],
        [[0., 0., 0., 1.], [0.25, 0., 0., 0.]],
        [[0., 0., 0., 0.5], [0., 0., 0., 3.]],
    ]);
    let t1 = trace([
        [[0., 2., 0., 0.], [1., 0., 0., 0.]],
        [[0., 0., 0., 0.], [0., 3., 0., 0.]],
        [[0., 0., 0., 0.], [2., 0., 0., 0.]],
    ]);
    let t2 = trace([
        [[0., 0., 0., 1.], [0., 0., 0.5, 0.]],
        [[1., 0., 0., 0.], [0., 0., 1., 0.]],
        [[0., 1., 0., 0.], [0., 0., 0., 1.]],
    ]);
    let a1 = trace([
        [[0.5, 0., 0., 0.], [0., 0., 0., 3.]],
        [[0., 0., 2., 0.], [1., 0.5, 0.5, 0.5]],
        [[0., 0., 1., 0.], [0., 2., 0., 0.]],
    ]);
    let b1 = trace([
        [[2., 0., 0., 0.], [0., 1., 0., 0.]],
        [[0., 1., 0., 0.], [0., 0., 0., 2.]],
        [[3., 0., 0., 0.], [0., 0., 1., 0.]],
    ]);
    let b2 = trace([
        [[0., 0., 1., 0.], [0., 0., 0., 0.]],
        [[0., 0., 0., 0.], [1., 0., 0., 0.]],
        [[0., 0., 0., 2.], [0., 0.5, 0., 0.]],
    ]);
    let mut attacked = BTreeMap::new();
    attacked.insert(eps(0.1), vec![a1]);
    attacked.insert(eps(0.2), vec![b1, b2]);
    attacked.insert(eps(0.3), vec![]);
    Fixture {
        model: toy_model(),
        original: vec![o1, o2, o3],
        target: vec![t1, t2],
        attacked,
        options: PathwayOptions {
            benign_k: 1,
            attacked_k: 1,
            baseline: Baseline::Original,
        },
    }
}

pub fn toy_manifest() -> RunManifest {
    RunManifest {
        weights_sha256: "0".repeat(64),
        dataset: DatasetInfo {
            seed: 7,
            num_classes: 2,
            per_class: 5,
        },
        original: 0,
        target: 1,
        epsilons: vec![eps(0.1), eps(0.2), eps(0.3)],
        attack: AttackParams {
            steps: 40,
            step_factor: 2.5,
            random_start: None,
            max_images: 3,
        },
        attacked_images: vec![0, 1, 2],
        success_counts: [(eps(0.1), 1), (eps(0.2), 2), (eps(0.3), 0)].into_iter().collect(),
        created_at: 1_700_000_000,
    }
}
