//! Shared oracles for the integration suites: central finite differences for
//! gradient checks, plus dataset builders for the experiment pipelines.
#![allow(dead_code)] // each test binary uses a different subset

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use skylos::channel::ChannelConfig;
use skylos::dataset::{generate_dataset, Dataset};
use skylos::scene::{build_scenario, GridSpec, ScenarioSpec};
use skylos::sensing::CameraSpec;
use skylos::tensor::{Tape, TensorId};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

/// True when the analytic and finite-difference values agree to the suite
/// tolerance (relative, with an absolute floor for near-zero gradients).
pub fn fd_agrees(analytic: f64, fd: f64) -> bool {
    let diff = (analytic - fd).abs();
    diff <= FD_REL_TOL * analytic.abs().max(fd.abs()) || diff <= FD_ABS_FLOOR
}

/// Checks d(loss)/d(input) for every differentiable input of an op against
/// central finite differences, where `loss = sum(r * op(inputs))` for a fixed
/// random projection `r`. The builder runs on a fresh tape per evaluation, so
/// it must be deterministic given the leaf values.
pub fn fd_check_op(
    name: &str,
    inputs: &[(Vec<usize>, Vec<f64>)],
    seed: u64,
    build: impl Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
) {
    let eval = |data: &[(Vec<usize>, Vec<f64>)], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape: Tape<f64> = Tape::new();
        let ids: Vec<TensorId> = data.iter().map(|(shape, d)| tape.param(shape, d.clone())).collect();
        let out = build(&mut tape, &ids);
        let out_len = tape.value(out).len();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xABCD_EF01);
        let proj: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shape = tape.shape(out).to_vec();
        let r = tape.constant(&shape, proj);
        let weighted = tape.mul(out, r).expect("projection shapes agree");
        let loss = tape.sum_all(weighted);
        let loss_val = tape.value(loss)[0];
        let grads = if want_grads {
            tape.backward(loss).expect("backward");
            ids.iter()
                .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
                .collect()
        } else {
            Vec::new()
        };
        (loss_val, grads)
    };

    let (_, grads) = eval(inputs, true);
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5EED);
    for (i, (shape, base)) in inputs.iter().enumerate() {
        let len: usize = shape.iter().product();
        let coords: Vec<usize> = if len <= 24 {
            (0..len).collect()
        } else {
            (0..24).map(|_| rng.gen_range(0..len)).collect()
        };
        for c in coords {
            let mut plus = inputs.to_vec();
            plus[i].1[c] = base[c] + FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].1[c] = base[c] - FD_STEP;
            let (lp, _) = eval(&plus, false);
            let (lm, _) = eval(&minus, false);
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let ana = grads[i][c];
            assert!(
                fd_agrees(ana, fd),
                "{name}: input {i} coord {c}: analytic {ana:.9e} vs fd {fd:.9e} (seed {seed})"
            );
        }
    }
}

/// Uniform random data in a range, seeded.
pub fn rand_data(len: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Random data bounded away from zero, for kinked ops like ReLU.
pub fn rand_data_off_zero(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

// --- per-op finite-difference suites (shared by gradients and acceptance) ---

use skylos::tensor::AttentionParams;

pub fn fd_suite_elementwise(seed: u64) {
    let x = (vec![3, 4], rand_data(12, -1.0, 1.0, seed));
    let y = (vec![3, 4], rand_data(12, -1.0, 1.0, seed + 1));
    fd_check_op("add", &[x.clone(), y.clone()], seed, |t, ids| t.add(ids[0], ids[1]).unwrap());
    fd_check_op("mul", &[x.clone(), y.clone()], seed, |t, ids| t.mul(ids[0], ids[1]).unwrap());
    fd_check_op("scale", &[x.clone()], seed, |t, ids| t.scale(ids[0], -1.7));
    let off = (vec![3, 4], rand_data_off_zero(12, seed));
    fd_check_op("relu", &[off], seed, |t, ids| t.relu(ids[0]));
    fd_check_op("gelu", &[x.clone()], seed, |t, ids| t.gelu(ids[0]));
    fd_check_op("sigmoid", &[x], seed, |t, ids| t.sigmoid(ids[0]));
}

pub fn fd_suite_linear_algebra(seed: u64) {
    let a = (vec![3, 5], rand_data(15, -1.0, 1.0, seed));
    let b = (vec![5, 4], rand_data(20, -1.0, 1.0, seed + 1));
    fd_check_op("matmul", &[a.clone(), b], seed, |t, ids| t.matmul(ids[0], ids[1]).unwrap());
    let bt = (vec![4, 5], rand_data(20, -1.0, 1.0, seed + 2));
    fd_check_op("matmul_nt", &[a, bt], seed, |t, ids| t.matmul_nt(ids[0], ids[1]).unwrap());
    let x = (vec![5], rand_data(5, -1.0, 1.0, seed + 3));
    let w = (vec![3, 5], rand_data(15, -1.0, 1.0, seed + 4));
    let bias = (vec![3], rand_data(3, -1.0, 1.0, seed + 5));
    fd_check_op("linear", &[x, w, bias.clone()], seed, |t, ids| {
        t.linear(ids[0], ids[1], ids[2]).unwrap()
    });
    let rows = (vec![4, 3], rand_data(12, -1.0, 1.0, seed + 6));
    fd_check_op("bias_rows", &[rows, bias], seed, |t, ids| t.bias_rows(ids[0], ids[1]).unwrap());
}

pub fn fd_suite_normalization(seed: u64) {
    let x = (vec![3, 6], rand_data(18, -2.0, 2.0, seed));
    fd_check_op("softmax_rows", &[x.clone()], seed, |t, ids| t.softmax_rows(ids[0]).unwrap());
    let gain = (vec![6], rand_data(6, 0.5, 1.5, seed + 1));
    let shift = (vec![6], rand_data(6, -0.5, 0.5, seed + 2));
    fd_check_op("layer_norm", &[x, gain, shift], seed, |t, ids| {
        t.layer_norm(ids[0], ids[1], ids[2]).unwrap()
    });
    let p = (vec![2, 4], rand_data(8, 0.1, 0.9, seed + 3));
    let labels: Vec<f64> = rand_data(8, 0.0, 1.0, seed + 4).into_iter().map(f64::round).collect();
    fd_check_op("bce_sum", &[p], seed, move |t, ids| {
        let y = t.constant(&[2, 4], labels.clone());
        t.bce_sum(ids[0], y).unwrap()
    });
}

pub fn fd_suite_conv_structure(seed: u64) {
    let x = (vec![2, 5, 5], rand_data(50, -1.0, 1.0, seed));
    let w = (vec![3, 2, 3, 3], rand_data(54, -0.5, 0.5, seed + 1));
    let b = (vec![3], rand_data(3, -0.5, 0.5, seed + 2));
    fd_check_op("conv2d_same", &[x.clone(), w, b], seed, |t, ids| {
        t.conv2d_same(ids[0], ids[1], ids[2]).unwrap()
    });
    fd_check_op("adaptive_max_pool", &[x.clone()], seed, |t, ids| {
        t.adaptive_max_pool(ids[0], 2, 3).unwrap()
    });
    let img = (vec![2, 4, 4], rand_data(32, -1.0, 1.0, seed + 3));
    fd_check_op("patchify", &[img], seed, |t, ids| t.patchify(ids[0], 2).unwrap());
    fd_check_op("reshape", &[x.clone()], seed, |t, ids| t.reshape(ids[0], &[5, 10]).unwrap());
    let other = (vec![1, 5, 5], rand_data(25, -1.0, 1.0, seed + 4));
    fd_check_op("concat_channels", &[x, other], seed, |t, ids| {
        t.concat_channels(ids[0], ids[1]).unwrap()
    });
    let m = (vec![3, 6], rand_data(18, -1.0, 1.0, seed + 5));
    fd_check_op("col_slice", &[m.clone()], seed, |t, ids| t.col_slice(ids[0], 1, 3).unwrap());
    let m2 = (vec![3, 2], rand_data(6, -1.0, 1.0, seed + 6));
    fd_check_op("col_concat", &[m.clone(), m2], seed, |t, ids| {
        t.col_concat(&[ids[0], ids[1]]).unwrap()
    });
    fd_check_op("mean_rows", &[m], seed, |t, ids| t.mean_rows(ids[0]).unwrap());
    let s = (vec![7], rand_data(7, -1.0, 1.0, seed + 7));
    fd_check_op("sum_all", &[s], seed, |t, ids| t.sum_all(ids[0]));
}

pub fn msa_inputs(d: usize, n: usize, seed: u64) -> Vec<(Vec<usize>, Vec<f64>)> {
    let mut inputs = vec![(vec![n, d], rand_data(n * d, -1.0, 1.0, seed))];
    for k in 0..4 {
        inputs.push((vec![d, d], rand_data(d * d, -0.5, 0.5, seed + 10 + k)));
        inputs.push((vec![d], rand_data(d, -0.2, 0.2, seed + 20 + k)));
    }
    inputs
}

pub fn msa_build(t: &mut Tape<f64>, ids: &[TensorId], heads: usize) -> TensorId {
    let p = AttentionParams {
        wq: ids[1],
        bq: ids[2],
        wk: ids[3],
        bk: ids[4],
        wv: ids[5],
        bv: ids[6],
        wo: ids[7],
        bo: ids[8],
    };
    t.multi_head_self_attention(ids[0], &p, heads).unwrap()
}

pub fn fd_suite_attention_ffn(seed: u64) {
    let inputs = msa_inputs(8, 3, seed);
    fd_check_op("multi_head_self_attention", &inputs, seed, |t, ids| msa_build(t, ids, 2));
    let z = (vec![3, 6], rand_data(18, -1.0, 1.0, seed));
    let w1 = (vec![12, 6], rand_data(72, -0.4, 0.4, seed + 1));
    let b1 = (vec![12], rand_data(12, -0.2, 0.2, seed + 2));
    let w2 = (vec![6, 12], rand_data(72, -0.4, 0.4, seed + 3));
    let b2 = (vec![6], rand_data(6, -0.2, 0.2, seed + 4));
    fd_check_op("feed_forward", &[z, w1, b1, w2, b2], seed, |t, ids| {
        t.feed_forward(ids[0], ids[1], ids[2], ids[3], ids[4]).unwrap()
    });
}

/// The whole per-op suite over a seed list.
pub fn fd_suite_all(seeds: &[u64]) {
    for &seed in seeds {
        fd_suite_elementwise(seed);
        fd_suite_linear_algebra(seed);
        fd_suite_normalization(seed);
        fd_suite_conv_structure(seed);
        fd_suite_attention_ffn(seed);
    }
}

/// The standard desk-scale crossroad dataset used by the experiment suites:
/// seven routes, route 2 held out, 63.3 m altitude, 30 x 30 grid.
pub fn standard_crossroad(snapshots_per_route: u32, seed: u64) -> Dataset {
    let mut spec = ScenarioSpec::crossroad(seed);
    spec.snapshots_per_route = snapshots_per_route;
    spec.grid = GridSpec { side: 150.0, g: 30 };
    let scenario = build_scenario(&spec).expect("crossroad template");
    generate_dataset(&scenario, 63.3, &CameraSpec::default(), &ChannelConfig::default()).expect("dataset")
}

/// Wide-lane source dataset for the cross-scenario runs (route 9 held out).
pub fn standard_wide_lane(snapshots_per_route: u32, seed: u64) -> Dataset {
    let mut spec = ScenarioSpec::wide_lane(seed);
    spec.snapshots_per_route = snapshots_per_route;
    spec.grid = GridSpec { side: 150.0, g: 30 };
    let scenario = build_scenario(&spec).expect("wide-lane template");
    generate_dataset(&scenario, 200.0, &CameraSpec::default(), &ChannelConfig::default()).expect("dataset")
}
