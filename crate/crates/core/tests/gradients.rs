//! Finite-difference checks for every differentiable op, five seeds each,
//! plus a straight-line attention reference and a small end-to-end check
//! through the fusion forward pass.

mod common;

use common::{msa_build, msa_inputs};
use skylos::tensor::{Tape, TensorId};

const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

#[test]
fn fd_elementwise_ops() {
    for &seed in &SEEDS {
        common::fd_suite_elementwise(seed);
    }
}

#[test]
fn fd_linear_algebra_ops() {
    for &seed in &SEEDS {
        common::fd_suite_linear_algebra(seed);
    }
}

#[test]
fn fd_normalization_ops() {
    for &seed in &SEEDS {
        common::fd_suite_normalization(seed);
    }
}

#[test]
fn fd_conv_and_structure_ops() {
    for &seed in &SEEDS {
        common::fd_suite_conv_structure(seed);
    }
}

#[test]
fn fd_attention_and_ffn() {
    for &seed in &SEEDS {
        common::fd_suite_attention_ffn(seed);
    }
}

/// Attention output against a straight-line reference with explicit Q, K, V.
#[test]
fn msa_matches_straight_line_reference() {
    let (n, d, heads) = (3, 8, 2);
    let dh = d / heads;
    let inputs = msa_inputs(d, n, 99);
    let mut tape: Tape<f64> = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|(s, v)| tape.param(s, v.clone())).collect();
    let out = msa_build(&mut tape, &ids, heads);
    let got = tape.value(out).to_vec();

    let z = &inputs[0].1;
    let matvec = |w: &[f64], b: &[f64], row: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| b[i] + (0..d).map(|j| w[i * d + j] * row[j]).sum::<f64>())
            .collect()
    };
    let q: Vec<Vec<f64>> = (0..n).map(|i| matvec(&inputs[1].1, &inputs[2].1, &z[i * d..(i + 1) * d])).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|i| matvec(&inputs[3].1, &inputs[4].1, &z[i * d..(i + 1) * d])).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|i| matvec(&inputs[5].1, &inputs[6].1, &z[i * d..(i + 1) * d])).collect();
    let mut concat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[i][h * dh + c] * k[j][h * dh + c];
                }
                scores[j] = dot / (dh as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += exps[j] / sum * v[j][h * dh + c];
                }
                concat[i][h * dh + c] = acc;
            }
        }
    }
    for i in 0..n {
        let expect = matvec(&inputs[7].1, &inputs[8].1, &concat[i]);
        for c in 0..d {
            let diff = (got[i * d + c] - expect[c]).abs();
            assert!(diff < 1e-10, "token {i} dim {c}: {} vs {}", got[i * d + c], expect[c]);
        }
    }
}

/// End-to-end gradcheck through a small fusion model, via the model surface.
#[test]
fn fd_small_fusion_end_to_end() {
    use rand::Rng;
    use rand::SeedableRng;
    use skylos::model::{sample_loss_and_grads, sample_loss_shifted, ModelConfig, ModelKind, ModelParams};

    let cfg = ModelConfig {
        image_side: 16,
        patch: 8,
        embed_dim: 16,
        depth: 1,
        heads: 2,
        branch_channels: 4,
        grid: 5,
        fusion_depth: 2,
        classifier_depth: 3,
        paper_scale: false,
    };
    let ds = tiny_fusion_dataset();
    let sample = &ds.samples[0];
    for seed in [1u64, 2, 3] {
        let params = ModelParams::init(ModelKind::Fusion, &cfg, seed).unwrap();
        let (_, grads) = sample_loss_and_grads::<f64>(&params, sample).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        for _ in 0..6 {
            let ti = rng.gen_range(0..params.tensors.len());
            let ci = rng.gen_range(0..params.tensors[ti].data.len());
            let lp = sample_loss_shifted(&params, sample, ti, ci, common::FD_STEP).unwrap();
            let lm = sample_loss_shifted(&params, sample, ti, ci, -common::FD_STEP).unwrap();
            let fd = (lp - lm) / (2.0 * common::FD_STEP);
            let ana = grads[ti][ci];
            assert!(
                common::fd_agrees(ana, fd),
                "fusion {}[{ci}]: analytic {ana:.9e} vs fd {fd:.9e}",
                params.tensors[ti].name
            );
        }
    }
}

fn tiny_fusion_dataset() -> skylos::dataset::Dataset {
    use skylos::channel::ChannelConfig;
    use skylos::dataset::{generate_dataset, normalize_cir, split_by_route};
    use skylos::scene::{build_scenario, GridSpec, RouteSpec, ScenarioSpec};
    use skylos::sensing::CameraSpec;

    let mut spec = ScenarioSpec::crossroad(31);
    spec.building_count = Some(10);
    spec.grid = GridSpec { side: 100.0, g: 5 };
    spec.routes = vec![
        RouteSpec {
            waypoints: vec![[-30.0, 5.0, 63.3], [30.0, 5.0, 63.3]],
            snapshots: 2,
        },
        RouteSpec {
            waypoints: vec![[5.0, -30.0, 63.3], [5.0, 30.0, 63.3]],
            snapshots: 2,
        },
    ];
    let scenario = build_scenario(&spec).unwrap();
    let cam = CameraSpec {
        footprint_side: 100.0,
        resolution: 32,
    };
    let ds = generate_dataset(&scenario, 63.3, &cam, &ChannelConfig::default()).unwrap();
    let split = split_by_route(&ds, 2).unwrap();
    normalize_cir(ds, &split)
}
