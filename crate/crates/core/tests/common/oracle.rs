//! Plain f64 loop implementations used as references for the optimized
//! kernels and the taped forward pass.

use pathwayforge_core::model::{BranchKind, MiniInception, STEM_KERNEL, STEM_POOL};
use pathwayforge_core::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn from_tensor(t: &Tensor) -> Map {
        let s = t.shape();
        Map {
            h: s[0],
            w: s[1],
            c: s[2],
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn channel(&self, ch: usize) -> Map {
        Map {
            h: self.h,
            w: self.w,
            c: 1,
            data: (0..self.h * self.w).map(|p| self.data[p * self.c + ch]).collect(),
        }
    }
}

/// Output extent and low-side padding. Same keeps `ceil(n / stride)` outputs
/// with any odd padding pixel on the high side.
pub fn extent(n: usize, k: usize, stride: usize, same: bool) -> (usize, usize) {
    if same {
        let out = n.div_ceil(stride);
        let total = ((out - 1) * stride + k).saturating_sub(n);
        (out, total / 2)
    } else {
        ((n - k) / stride + 1, 0)
    }
}

/// `kernel` is `[k, k, x.c, cout]` row-major.
pub fn conv(x: &Map, kernel: &[f64], k: usize, cout: usize, stride: usize, same: bool) -> Map {
    let (oh, pt) = extent(x.h, k, stride, same);
    let (ow, pl) = extent(x.w, k, stride, same);
    let mut data = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                            continue;
                        }
                        for ci in 0..x.c {
                            acc += x.at(iy as usize, ix as usize, ci) * kernel[((ky * k + kx) * x.c + ci) * cout + co];
                        }
                    }
                }
                data[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    Map { h: oh, w: ow, c: cout, data }
}

/// Window maximum over in-bounds positions only.
pub fn maxpool(x: &Map, window: usize, stride: usize, same: bool) -> Map {
    let (oh, pt) = extent(x.h, window, stride, same);
    let (ow, pl) = extent(x.w, window, stride, same);
    let mut data = vec![f64::NEG_INFINITY; oh * ow * x.c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..x.c {
                let out = &mut data[(oy * ow + ox) * x.c + ch];
                for ky in 0..window {
                    for kx in 0..window {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                            *out = out.max(x.at(iy as usize, ix as usize, ch));
                        }
                    }
                }
            }
        }
    }
    Map { h: oh, w: ow, c: x.c, data }
}

pub fn bias_relu(mut x: Map, bias: &[f64]) -> Map {
    for (i, v) in x.data.iter_mut().enumerate() {
        *v = (*v + bias[i % x.c]).max(0.0);
    }
    x
}

pub fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let m = b.len();
    (0..m)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i * m + j]).sum::<f64>())
        .collect()
}

pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Mixed-layer maps and logits of `model`'s architecture evaluated in f64
/// with `params` given in the model's canonical parameter order.
pub fn forward(model: &MiniInception, params: &[Vec<f64>], image: &Map) -> (Vec<Map>, Vec<f64>) {
    let stem_cout = model.spec().stem_channels;
    let x = conv(image, &params[0], STEM_KERNEL, stem_cout, 1, true);
    let x = bias_relu(x, &params[1]);
    let mut x = maxpool(&x, STEM_POOL, STEM_POOL, false);
    let mut p = 2;
    let mut mixed = Vec::new();
    for q in 0..3 {
        let mut outs = Vec::new();
        for branch in &model.block(q).branches {
            let k = branch.kind.kernel_size();
            let src = if branch.kind == BranchKind::PoolProj {
                maxpool(&x, 3, 1, true)
            } else {
                x.clone()
            };
            let y = conv(&src, &params[p], k, branch.width(), 1, true);
            outs.push(bias_relu(y, &params[p + 1]));
            p += 2;
        }
        let c: usize = outs.iter().map(|o| o.c).sum();
        let mut data = Vec::with_capacity(x.h * x.w * c);
        for pos in 0..x.h * x.w {
            for o in &outs {
                data.extend_from_slice(&o.data[pos * o.c..(pos + 1) * o.c]);
            }
        }
        x = Map { h: x.h, w: x.w, c, data };
        mixed.push(x.clone());
    }
    let pooled: Vec<f64> = (0..x.c)
        .map(|ch| (0..x.h * x.w).map(|pos| x.data[pos * x.c + ch]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let logits = dense(&pooled, &params[p], &params[p + 1]);
    (mixed, logits)
}

pub fn params_f64(model: &MiniInception) -> Vec<Vec<f64>> {
    model
        .parameters()
        .into_iter()
        .map(|(_, t)| t.data().iter().map(|&v| f64::from(v)).collect())
        .collect()
}
