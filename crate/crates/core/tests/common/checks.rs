//! Randomized comparisons against the loop references in [`super::oracle`].
//! Each check returns a one-line summary or the first disagreement.

use pathwayforge_core::autodiff::Tape;
use pathwayforge_core::model::{ArchSpec, BlockSpec, BranchKind, MiniInception};
use pathwayforge_core::ops;
use pathwayforge_core::pathway::{edge_influence, NeuronId};
use pathwayforge_core::{Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, Map};

pub type Check = Result<String, String>;

const KERNEL_TOL: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn worst(got: &Tensor, want: &[f64]) -> f64 {
    got.data()
        .iter()
        .zip(want)
        .map(|(&g, &w)| (f64::from(g) - w).abs())
        .fold(0.0, f64::max)
}

pub fn conv2d_cases(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_err: f64 = 0.0;
    for case in 0..cases {
        let k = [1, 3, 5][rng.random_range(0..3)];
        let same = rng.random_bool(0.5);
        let lo = if same { 1 } else { k };
        let (h, w) = (rng.random_range(lo..=9), rng.random_range(lo..=9));
        let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=12));
        let stride = rng.random_range(1..=2);
        let x = random_tensor(&mut rng, &[h, w, cin], -1.0, 1.0);
        let kernel = random_tensor(&mut rng, &[k, k, cin, cout], -1.0, 1.0);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let got = ops::conv2d(&x, &kernel, stride, padding).map_err(|e| format!("case {case}: {e}"))?;
        let kd: Vec<f64> = kernel.data().iter().map(|&v| f64::from(v)).collect();
        let want = oracle::conv(&Map::from_tensor(&x), &kd, k, cout, stride, same);
        if got.shape() != [want.h, want.w, want.c] {
            return Err(format!("conv2d case {case}: shape {:?} vs {:?}", got.shape(), [want.h, want.w, want.c]));
        }
        let err = worst(&got, &want.data);
        if err > KERNEL_TOL {
            return Err(format!("conv2d case {case} ({h}x{w}x{cin}, k{k}, cout {cout}, s{stride}): error {err:e}"));
        }
        worst_err = worst_err.max(err);
    }
    Ok(format!("conv2d {cases} cases, max abs error {worst_err:.1e}"))
}

pub fn maxpool_cases(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let window = rng.random_range(1..=3);
        let (h, w, c) = (rng.random_range(window..=9), rng.random_range(window..=9), rng.random_range(1..=5));
        let stride = rng.random_range(1..=3);
        let same = rng.random_bool(0.5);
        let x = random_tensor(&mut rng, &[h, w, c], -2.0, 1.0);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let got = ops::maxpool(&x, window, stride, padding).map_err(|e| format!("case {case}: {e}"))?;
        let want = oracle::maxpool(&Map::from_tensor(&x), window, stride, same);
        if got.shape() != [want.h, want.w, want.c] || worst(&got, &want.data) > KERNEL_TOL {
            return Err(format!("maxpool case {case} ({h}x{w}x{c}, window {window}, s{stride}, same {same})"));
        }
    }
    Ok(format!("maxpool {cases} cases exact"))
}

pub fn dense_cases(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_err: f64 = 0.0;
    for case in 0..cases {
        let (n, m) = (rng.random_range(1..=64), rng.random_range(1..=8));
        let x = random_tensor(&mut rng, &[n], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[n, m], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[m], -1.0, 1.0);
        let got = ops::dense(&x, &w, &b).map_err(|e| format!("case {case}: {e}"))?;
        let f = |t: &Tensor| t.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
        let err = worst(&got, &oracle::dense(&f(&x), &f(&w), &f(&b)));
        if err > KERNEL_TOL {
            return Err(format!("dense case {case} ({n}x{m}): error {err:e}"));
        }
        worst_err = worst_err.max(err);
    }
    Ok(format!("dense {cases} cases, max abs error {worst_err:.1e}"))
}

fn random_spec(rng: &mut ChaCha8Rng) -> ArchSpec {
    let block = |rng: &mut ChaCha8Rng| loop {
        let widths = [0; 4].map(|_| rng.random_range(0..=2));
        if widths.iter().sum::<usize>() > 0 {
            break BlockSpec { widths };
        }
    };
    ArchSpec {
        input_size: [6, 8, 10][rng.random_range(0..3)],
        input_channels: 3,
        stem_channels: rng.random_range(1..=3),
        blocks: [block(rng), block(rng), block(rng)],
        num_classes: 2,
    }
}

/// Reference influence: the source channel (max-pooled first for a pool
/// branch) convolved with the one-channel kernel slice, maximized over space.
pub fn influence_oracle(model: &MiniInception, maps: &[Tensor], source: NeuronId, dest: NeuronId) -> f64 {
    let (branch, local) = model.block(dest.layer).locate(dest.channel).expect("dest exists");
    let mut src = Map::from_tensor(&maps[source.layer]).channel(source.channel);
    if branch.kind == BranchKind::PoolProj {
        src = oracle::maxpool(&src, 3, 1, true);
    }
    let kernel = &branch.conv.kernel;
    let (k, cin, cout) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let slice: Vec<f64> = (0..k * k)
        .map(|tap| f64::from(kernel.data()[(tap * cin + source.channel) * cout + local]))
        .collect();
    let out = oracle::conv(&src, &slice, k, 1, 1, true);
    out.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub fn influence_cases(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds = [0usize; 4];
    for case in 0..cases {
        let spec = random_spec(&mut rng);
        let model = MiniInception::new(spec.clone(), rng.random()).unwrap();
        let maps: Vec<Tensor> = (0..3)
            .map(|q| random_tensor(&mut rng, &spec.mixed_shape(q), -0.5, 2.0))
            .collect();
        let trace = pathwayforge_core::model::ActivationTrace {
            mixed: maps.clone(),
            logits: Tensor::zeros(&[2]).unwrap(),
            predicted: 0,
        };
        let layer = rng.random_range(0..2);
        let source = NeuronId::new(layer, rng.random_range(0..spec.blocks[layer].channels()));
        let dest = NeuronId::new(layer + 1, rng.random_range(0..spec.blocks[layer + 1].channels()));
        let kind = model.block(dest.layer).locate(dest.channel).unwrap().0.kind;
        kinds[BranchKind::ALL.iter().position(|&k| k == kind).unwrap()] += 1;
        let got = edge_influence(&trace, source, dest, &model).map_err(|e| format!("case {case}: {e}"))?;
        let want = influence_oracle(&model, &maps, source, dest);
        if (f64::from(got) - want).abs() > KERNEL_TOL {
            return Err(format!("edge_influence case {case} {source}->{dest} ({kind:?}): {got} vs {want}"));
        }
    }
    if kinds.contains(&0) {
        return Err(format!("edge_influence cases missed a branch kind: {kinds:?}"));
    }
    Ok(format!("edge_influence {cases} cases, branch mix {kinds:?}"))
}

fn close(analytic: f64, numeric: f64) -> bool {
    let abs = (analytic - numeric).abs();
    abs < 1e-4 || abs / analytic.abs().max(numeric.abs()) < 1e-2
}

/// Taped gradients of the cross-entropy of the reference architecture
/// against central differences of the f64 reference forward pass.
pub fn autodiff_cases(samples_per_tensor: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MiniInception::new(ArchSpec::reference(4), seed).unwrap();
    for (i, t) in model.parameters_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            *t = random_tensor(&mut rng, t.shape(), -0.1, 0.1);
        }
    }
    let shape = model.spec().input_shape();
    let images: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut rng, &shape, 0.0, 1.0)).collect();
    let targets: Vec<usize> = (0..2).map(|_| rng.random_range(0..4)).collect();

    let mut analytic = Vec::new();
    for (img, &target) in images.iter().zip(&targets) {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let x = tape.param(img.clone());
        let f = model.forward_on_tape(&mut tape, x, &params).unwrap();
        let loss = tape.softmax_cross_entropy(f.logits, target).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut per_tensor: Vec<Vec<f32>> = params.vars.iter().map(|&v| grads.get(v).unwrap().data().to_vec()).collect();
        per_tensor.push(grads.get(x).unwrap().data().to_vec());
        analytic.push(per_tensor);
    }

    let base = oracle::params_f64(&model);
    let maps: Vec<Map> = images.iter().map(Map::from_tensor).collect();
    let loss = |params: &[Vec<f64>], image: &Map, target: usize| {
        oracle::cross_entropy(&oracle::forward(&model, params, image).1, target)
    };
    let h = 1e-6;
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let mut checked = 0;
    let (mut worst_abs, mut worst_rel): (f64, f64) = (0.0, 0.0);
    for t in 0..=base.len() {
        let len = if t < base.len() { base[t].len() } else { maps[0].data.len() };
        let mut coords: Vec<usize> = (0..len).collect();
        if len > samples_per_tensor {
            for i in 0..samples_per_tensor {
                let j = rng.random_range(i..len);
                coords.swap(i, j);
            }
        }
        for s in 0..samples_per_tensor {
            let coord = coords[s % len.min(samples_per_tensor)];
            let img = s % images.len();
            let (plus, minus) = if t < base.len() {
                let mut p = base.clone();
                p[t][coord] += h;
                let lp = loss(&p, &maps[img], targets[img]);
                p[t][coord] -= 2.0 * h;
                (lp, loss(&p, &maps[img], targets[img]))
            } else {
                let mut m = maps[img].clone();
                m.data[coord] += h;
                let lp = loss(&base, &m, targets[img]);
                m.data[coord] -= 2.0 * h;
                (lp, loss(&base, &m, targets[img]))
            };
            let numeric = (plus - minus) / (2.0 * h);
            let a = f64::from(analytic[img][t][coord]);
            let name = names.get(t).map_or("input", String::as_str);
            if !close(a, numeric) {
                return Err(format!("{name}[{coord}] image {img}: taped {a:e} vs numeric {numeric:e}"));
            }
            let err = (a - numeric).abs();
            worst_abs = worst_abs.max(err);
            if err > 0.0 {
                worst_rel = worst_rel.max(err / a.abs().max(numeric.abs()));
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} coordinates over {} parameter tensors and the input, max abs error {worst_abs:.1e}, max rel error {worst_rel:.1e}",
        base.len()
    ))
}
