//! Independent oracles shared by the integration tests and the acceptance
//! binary. Nothing here calls into the code path it checks.

#![allow(dead_code)]

use fear_core::losses::{focal_grad, focal_loss, iou_loss, iou_loss_grad, triplet_grad, triplet_loss};
use fear_core::model::layers::Module;
use fear_core::{ModelConfig, Network};
use ndarray::{Array1, Array2, Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-6;

/// Explicit loops over cells and channels.
pub fn naive_correlation(t: &Array2<f64>, s: &Array2<f64>) -> Array2<f64> {
    let (c, wh) = t.dim();
    let big = s.ncols();
    let mut out = Array2::zeros((wh, big));
    for i in 0..wh {
        for j in 0..big {
            let mut acc = 0.0;
            for k in 0..c {
                acc += t[[k, i]] * s[[k, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Scalar focal loss from the textbook formula.
pub fn focal_scalar(p: f64, positive: bool, gamma: f64) -> f64 {
    let pt = if positive { p } else { 1.0 - p };
    -(1.0 - pt).powf(gamma) * pt.ln()
}

/// IoU of two xyxy boxes computed from explicit overlap intervals.
pub fn iou_scalar(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ox = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let oy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ox * oy;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    inter / union
}

/// `‖a - n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn central<F: FnMut(&[f64]) -> f64>(x: &[f64], mut f: F) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|k| {
            buf[k] = x[k] + FD_STEP;
            let up = f(&buf);
            buf[k] = x[k] - FD_STEP;
            let down = f(&buf);
            buf[k] = x[k];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Worst relative error of the triplet gradient over `trials` draws with an
/// active hinge.
pub fn triplet_gradcheck(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < trials {
        let x = normal_vec(&mut rng, 3 * dim);
        let margin = rng.random_range(0.5..3.0);
        let split = |v: &[f64]| {
            (
                Array1::from(v[..dim].to_vec()),
                Array1::from(v[dim..2 * dim].to_vec()),
                Array1::from(v[2 * dim..].to_vec()),
            )
        };
        let (t, s, n) = split(&x);
        let value = triplet_loss(t.view(), s.view(), n.view(), margin);
        if value < 0.1 {
            continue;
        }
        let (gt, gs, gn) = triplet_grad(t.view(), s.view(), n.view(), margin);
        let analytic: Vec<f64> = gt.iter().chain(gs.iter()).chain(gn.iter()).copied().collect();
        let numeric = central(&x, |v| {
            let (t, s, n) = split(v);
            triplet_loss(t.view(), s.view(), n.view(), margin)
        });
        worst = worst.max(rel_error(&analytic, &numeric));
        done += 1;
    }
    worst
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let x = rng.random_range(0.0..100.0);
    let y = rng.random_range(0.0..100.0);
    [x, y, x + rng.random_range(5.0..60.0), y + rng.random_range(5.0..60.0)]
}

/// Worst relative error of the IoU-loss gradient over batches of overlapping
/// boxes with distinct edges.
pub fn iou_gradcheck(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 6;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut pred = Array2::zeros((rows, 4));
        let mut target = Array2::zeros((rows, 4));
        for r in 0..rows {
            let t = random_box(&mut rng);
            // perturb each edge by a non-zero amount so min/max never tie
            let p: Vec<f64> = t
                .iter()
                .map(|v| {
                    let d: f64 = rng.random_range(1.0..6.0);
                    v + if rng.random::<bool>() { d } else { -d }
                })
                .collect();
            let p = [p[0], p[1], p[2].max(p[0] + 2.0), p[3].max(p[1] + 2.0)];
            for k in 0..4 {
                pred[[r, k]] = p[k];
                target[[r, k]] = t[k];
            }
        }
        let mask: Vec<bool> = (0..rows).map(|r| r != 2).collect();
        let analytic = iou_loss_grad(&pred, &target, &mask);
        let x: Vec<f64> = pred.iter().copied().collect();
        let numeric = central(&x, |v| {
            let p = Array2::from_shape_vec((rows, 4), v.to_vec()).unwrap();
            iou_loss(&p, &target, &mask).value
        });
        worst = worst.max(rel_error(analytic.as_slice().unwrap(), &numeric));
    }
    worst
}

pub fn focal_gradcheck(seed: u64, trials: usize, gamma: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 5;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let logits = Array2::from_shape_fn((side, side), |_| rng.random_range(-4.0..4.0));
        let labels = Array2::from_shape_fn((side, side), |_| if rng.random::<bool>() { 1i8 } else { -1 });
        let analytic = focal_grad(logits.view(), labels.view(), gamma);
        let x: Vec<f64> = logits.iter().copied().collect();
        let numeric = central(&x, |v| {
            let l = Array2::from_shape_vec((side, side), v.to_vec()).unwrap();
            focal_loss(l.view(), labels.view(), gamma)
        });
        worst = worst.max(rel_error(analytic.as_slice().unwrap(), &numeric));
    }
    worst
}

fn random4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Sum of `y * proj` after the training-mode fusion forward.
fn fusion_objective(net: &mut Network<f64>, search: &Array4<f64>, template: &Array4<f64>, proj: &Array4<f64>) -> f64 {
    let (y, _) = net.forward_fusion(search, template).unwrap();
    Zip::from(&y).and(proj).fold(0.0, |acc, &a, &b| acc + a * b)
}

fn get_param(net: &mut Network<f64>, name: &str, idx: usize) -> (f64, f64) {
    let mut out = (0.0, 0.0);
    net.visit("", &mut |slot| {
        if slot.name == name {
            out = (slot.value[idx], slot.grad.map(|g| g[idx]).unwrap_or(0.0));
        }
    });
    out
}

fn set_param(net: &mut Network<f64>, name: &str, idx: usize, v: f64) {
    net.visit("", &mut |slot| {
        if slot.name == name {
            slot.value[idx] = v;
        }
    });
}

/// Learnable fusion tensors as `(name, len)`.
fn fusion_params(net: &mut Network<f64>) -> Vec<(String, usize)> {
    let mut names = Vec::new();
    net.visit("", &mut |slot| {
        if slot.name.starts_with("fusion.") && slot.grad.is_some() {
            names.push((slot.name.clone(), slot.value.len()));
        }
    });
    names
}

/// Worst relative error of the fusion block's gradients with respect to both
/// inputs and a sample of its parameters.
pub fn fusion_gradcheck(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::miniature()
    };
    let c = cfg.adjusted_channels;
    let side = cfg.map_side();
    let n = cfg.corr_side();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut net = Network::<f64>::new(cfg.clone()).unwrap();
        let search = random4(&mut rng, (2, c, side, side));
        let template = random4(&mut rng, (2, c, n, n));
        let proj = random4(&mut rng, (2, c, side, side));
        net.zero_grad();
        let (_, cache) = net.forward_fusion(&search, &template).unwrap();
        let (d_search, d_template) = net.backward_fusion(cache, &proj);

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..12 {
            let idx = (
                rng.random_range(0..2),
                rng.random_range(0..c),
                rng.random_range(0..side),
                rng.random_range(0..side),
            );
            let mut s = search.clone();
            s[idx] += FD_STEP;
            let up = fusion_objective(&mut net, &s, &template, &proj);
            s[idx] -= 2.0 * FD_STEP;
            let down = fusion_objective(&mut net, &s, &template, &proj);
            analytic.push(d_search[idx]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        for _ in 0..12 {
            let idx = (
                rng.random_range(0..2),
                rng.random_range(0..c),
                rng.random_range(0..n),
                rng.random_range(0..n),
            );
            let mut t = template.clone();
            t[idx] += FD_STEP;
            let up = fusion_objective(&mut net, &search, &t, &proj);
            t[idx] -= 2.0 * FD_STEP;
            let down = fusion_objective(&mut net, &search, &t, &proj);
            analytic.push(d_template[idx]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        for (name, len) in fusion_params(&mut net) {
            for _ in 0..3 {
                let k = rng.random_range(0..len);
                let (v, g) = get_param(&mut net, &name, k);
                set_param(&mut net, &name, k, v + FD_STEP);
                let up = fusion_objective(&mut net, &search, &template, &proj);
                set_param(&mut net, &name, k, v - FD_STEP);
                let down = fusion_objective(&mut net, &search, &template, &proj);
                set_param(&mut net, &name, k, v);
                analytic.push(g);
                numeric.push((up - down) / (2.0 * FD_STEP));
            }
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}
