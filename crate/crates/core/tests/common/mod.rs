//! Test-only oracles shared by the integration suites. Nothing here calls the
//! code paths it is used to check.
#![allow(dead_code)]

use mbseg::autodiff::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds the scalar probe `sum(w * op(inputs))` with fixed random weights.
pub fn probe_loss<F>(inputs: &[Tensor<f64>], weights: &Tensor<f64>, build: &F) -> f64
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &ids);
    let loss = g.weighted_sum(out, weights.clone()).unwrap();
    g.value(loss).data()[0]
}

/// Largest norm-wise relative error between analytic and central-difference
/// gradients over all inputs: `|a - n| / max(|a| + |n|, 1e-12)`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], build: F, seed: u64) -> f64
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let h = 1e-5;
    let mut r = rng(seed);
    let analytic: Vec<Tensor<f64>>;
    let weights;
    {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &ids);
        weights = random_tensor(g.value(out).shape(), &mut r);
        let loss = g.weighted_sum(out, weights.clone()).unwrap();
        g.backward(loss).unwrap();
        analytic = ids.iter().map(|&id| g.grad(id).unwrap().clone()).collect();
    }
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            numeric[i] =
                (probe_loss(&plus, &weights, &build) - probe_loss(&minus, &weights, &build)) / (2.0 * h);
        }
        let a = analytic[k].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(diff / (na + nn).max(1e-12));
    }
    worst
}

/// Direct nested-loop cross-correlation. `x: [n,c,h,w]`, `w: [o,c,k,k]`.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, k, _) = w.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = b[oc];
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (i * stride + ki) as isize - pad as isize;
                                let jj = (j * stride + kj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii as usize >= h || jj as usize >= wd {
                                    continue;
                                }
                                s += x.data()[((bi * c + ic) * h + ii as usize) * wd + jj as usize]
                                    * w.data()[((oc * c + ic) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Transposed convolution as the transpose of the explicit dense matrix of
/// the matching strided convolution. `w: [cin, cout, k, k]`.
pub fn matrix_conv_transpose2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (_, cout, k, _) = w.dims4().unwrap();
    let oh = (h - 1) * stride + k;
    let ow = (wd - 1) * stride + k;
    // Forward conv maps [cout, oh, ow] -> [cin, h, wd]; build that matrix M.
    let rows = cin * h * wd;
    let cols = cout * oh * ow;
    let mut m = vec![0.0; rows * cols];
    for ic in 0..cin {
        for i in 0..h {
            for j in 0..wd {
                let r = (ic * h + i) * wd + j;
                for oc in 0..cout {
                    for ki in 0..k {
                        for kj in 0..k {
                            let col = (oc * oh + i * stride + ki) * ow + j * stride + kj;
                            m[r * cols + col] += w.data()[((ic * cout + oc) * k + ki) * k + kj];
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; n * cols];
    for bi in 0..n {
        for r in 0..rows {
            let xv = x.data()[bi * rows + r];
            for col in 0..cols {
                out[bi * cols + col] += m[r * cols + col] * xv;
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

/// 3D flood fill labelling; returns one label per voxel (0 = background).
pub fn flood_fill_labels(mask: &[u8], dims: (usize, usize, usize), connectivity: usize) -> (Vec<usize>, usize) {
    let (nx, ny, nz) = dims;
    let mut labels = vec![0usize; mask.len()];
    let mut next = 0;
    let mut offsets = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                let ok = match connectivity {
                    6 => manhattan == 1,
                    18 => manhattan == 1 || manhattan == 2,
                    _ => manhattan >= 1,
                };
                if ok {
                    offsets.push((dx, dy, dz));
                }
            }
        }
    }
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        let mut stack = vec![start];
        labels[start] = next;
        while let Some(v) = stack.pop() {
            let (x, y, z) = ((v % nx) as i64, ((v / nx) % ny) as i64, (v / (nx * ny)) as i64);
            for &(dx, dy, dz) in &offsets {
                let (a, b, c) = (x + dx, y + dy, z + dz);
                if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                    continue;
                }
                let u = a as usize + nx * (b as usize + ny * c as usize);
                if mask[u] == 1 && labels[u] == 0 {
                    labels[u] = next;
                    stack.push(u);
                }
            }
        }
    }
    (labels, next)
}

/// Foreground voxels with a background (or off-grid) 6-neighbour.
pub fn brute_surface(mask: &[u8], dims: (usize, usize, usize)) -> Vec<(usize, usize, usize)> {
    let (nx, ny, nz) = dims;
    let at = |x: i64, y: i64, z: i64| -> u8 {
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            0
        } else {
            mask[x as usize + nx * (y as usize + ny * z as usize)]
        }
    };
    let mut out = Vec::new();
    for z in 0..nz as i64 {
        for y in 0..ny as i64 {
            for x in 0..nx as i64 {
                if at(x, y, z) == 0 {
                    continue;
                }
                let nb = [
                    at(x - 1, y, z),
                    at(x + 1, y, z),
                    at(x, y - 1, z),
                    at(x, y + 1, z),
                    at(x, y, z - 1),
                    at(x, y, z + 1),
                ];
                if nb.contains(&0) {
                    out.push((x as usize, y as usize, z as usize));
                }
            }
        }
    }
    out
}

/// All-pairs directed distances: for each point of `a`, the min distance to `b`.
pub fn brute_directed(
    a: &[(usize, usize, usize)],
    b: &[(usize, usize, usize)],
    spacing: (f64, f64, f64),
) -> Vec<f64> {
    a.iter()
        .map(|&(x, y, z)| {
            b.iter()
                .map(|&(u, v, w)| {
                    let dx = (x as f64 - u as f64) * spacing.0;
                    let dy = (y as f64 - v as f64) * spacing.1;
                    let dz = (z as f64 - w as f64) * spacing.2;
                    (dx * dx + dy * dy + dz * dz).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn brute_assd_hd(seg: &[u8], reference: &[u8], dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> (f64, f64) {
    let s = brute_surface(seg, dims);
    let r = brute_surface(reference, dims);
    let ds = brute_directed(&s, &r, spacing);
    let dr = brute_directed(&r, &s, spacing);
    let assd = (ds.iter().sum::<f64>() + dr.iter().sum::<f64>()) / (ds.len() + dr.len()) as f64;
    let hd = ds.iter().chain(&dr).fold(0.0f64, |m, &v| m.max(v));
    (assd, hd)
}

/// Random truth mask (foreground fraction `prior`) and rater masks that flip
/// its voxels independently with the given sensitivity/specificity.
pub fn simulated_raters(
    dims: (usize, usize, usize),
    prior: f64,
    rates: &[(f64, f64)],
    seed: u64,
) -> (Vec<u8>, Vec<Vec<u8>>) {
    let mut r = rng(seed);
    let n = dims.0 * dims.1 * dims.2;
    let truth: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(prior))).collect();
    let raters = rates
        .iter()
        .map(|&(p, q)| {
            truth
                .iter()
                .map(|&t| if t == 1 { u8::from(r.random_bool(p)) } else { u8::from(!r.random_bool(q)) })
                .collect()
        })
        .collect();
    (truth, raters)
}
