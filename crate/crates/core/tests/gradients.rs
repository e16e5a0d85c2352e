mod common;

use common::*;

const TOL: f64 = 1e-4;

#[test]
fn triplet_gradient_matches_finite_differences() {
    let e = triplet_gradcheck(11, 20);
    assert!(e <= TOL, "relative error {e:e}");
}

#[test]
fn iou_gradient_matches_finite_differences() {
    let e = iou_gradcheck(12, 20);
    assert!(e <= TOL, "relative error {e:e}");
}

#[test]
fn focal_gradient_matches_finite_differences() {
    for gamma in [0.0, 2.0] {
        let e = focal_gradcheck(13, 20, gamma);
        assert!(e <= TOL, "gamma {gamma}: relative error {e:e}");
    }
}

#[test]
fn fusion_gradient_matches_finite_differences() {
    let e = fusion_gradcheck(14, 20);
    assert!(e <= TOL, "relative error {e:e}");
}

mod whole_network {
    use super::common::{rel_error, FD_STEP};
    use fear_core::datapipe::{generate_synthetic, sample_pair, DriftProfile, SamplerConfig, TrainingSample};
    use fear_core::losses::LossConfig;
    use fear_core::model::layers::Module;
    use fear_core::trainer::forward_backward;
    use fear_core::{ModelConfig, Network};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples() -> Vec<TrainingSample> {
        let cfg = SamplerConfig {
            template_size: 32,
            search_size: 64,
            ..SamplerConfig::default()
        };
        let videos: Vec<_> = (0..2)
            .map(|k| generate_synthetic(40 + k, 12, (96, 80), DriftProfile::mild()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..2)
            .map(|i| sample_pair(&videos[i], Some(&videos[1 - i]), 1, &mut rng, &cfg).unwrap().sample)
            .collect()
    }

    fn set(net: &mut Network<f64>, name: &str, k: usize, v: f64) {
        net.visit("", &mut |slot| {
            if slot.name == name {
                slot.value[k] = v;
            }
        });
    }

    // The triplet term pools search features with detached score weights, so
    // only the IoU and focal terms are differentiated end to end.
    #[test]
    fn backprop_through_every_layer_matches_finite_differences() {
        let samples = samples();
        let batch: Vec<&TrainingSample> = samples.iter().collect();
        let loss = LossConfig {
            lambda1: 0.0,
            ..LossConfig::default()
        };
        let mut net = Network::<f64>::new(ModelConfig {
            init_raw_mix: 0.3,
            ..ModelConfig::miniature()
        })
        .unwrap();
        forward_backward(&mut net, &batch, &loss).unwrap();
        let mut picks = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        net.visit("", &mut |slot| {
            if let Some(g) = slot.grad {
                for _ in 0..2 {
                    let k = rng.random_range(0..slot.value.len());
                    picks.push((slot.name.clone(), k, slot.value[k], g[k]));
                }
            }
        });
        assert!(picks.iter().any(|p| p.0 == "dual_template.raw_mix"));
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (name, k, v, g) in picks {
            set(&mut net, &name, k, v + FD_STEP);
            let up = forward_backward(&mut net, &batch, &loss).unwrap().0.total;
            set(&mut net, &name, k, v - FD_STEP);
            let down = forward_backward(&mut net, &batch, &loss).unwrap().0.total;
            set(&mut net, &name, k, v);
            analytic.push(g);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let e = rel_error(&analytic, &numeric);
        assert!(e <= 1e-4, "relative error {e:e}");
    }
}
