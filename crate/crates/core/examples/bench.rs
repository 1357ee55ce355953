use skylos::channel::ChannelConfig;
use skylos::dataset::{few_shot_subset, generate_dataset, normalize_cir, split_by_route};
use skylos::model::{evaluate, fine_tune, train, ModelConfig, ModelKind, TrainConfig};
use skylos::scene::{build_scenario, GridSpec, ScenarioSpec};
use skylos::sensing::CameraSpec;
use std::time::Instant;

fn main() {
    let mk = |spec: ScenarioSpec, altitude: f64| {
        let scenario = build_scenario(&spec).unwrap();
        generate_dataset(&scenario, altitude, &CameraSpec::default(), &ChannelConfig::default()).unwrap()
    };
    let mut wspec = ScenarioSpec::wide_lane(313);
    wspec.snapshots_per_route = 10;
    wspec.grid = GridSpec { side: 150.0, g: 30 };
    let wide = mk(wspec, 200.0);
    let wsplit = split_by_route(&wide, 9).unwrap();
    let wide = normalize_cir(wide, &wsplit);

    let mut cspec = ScenarioSpec::crossroad(20260810);
    cspec.snapshots_per_route = 20;
    cspec.grid = GridSpec { side: 150.0, g: 30 };
    let cross = mk(cspec, 63.3);
    let csplit = split_by_route(&cross, 2).unwrap();
    let cross = normalize_cir(cross, &csplit);

    let cfg = ModelConfig::default();
    let tcfg = TrainConfig { epochs: 10, seed: 0, ..TrainConfig::default() };
    let t = Instant::now();
    let (src, hist) = train(ModelKind::Fusion, &cfg, &wide, &wsplit, &tcfg).unwrap();
    println!("wide source: {:?}, final wide test acc {:.4}", t.elapsed(), hist.last().unwrap().test_accuracy);
    let zero = evaluate(&src, &cross, &csplit.test_ids).unwrap().accuracy;
    println!("zero-shot on crossroad test: {zero:.4}");
    for (epochs, lr) in [(30usize, 1e-4f64), (10, 3e-4)] {
        for k in [50usize, 100] {
            let ids = few_shot_subset(&csplit, k, 777).unwrap();
            let t = Instant::now();
            let ft = TrainConfig { epochs, lr, seed: 0, ..TrainConfig::default() };
            let tuned = fine_tune(&src, &cross, &ids, &ft).unwrap();
            let acc = evaluate(&tuned, &cross, &csplit.test_ids).unwrap().accuracy;
            println!("fine-tune k={k} epochs={epochs} lr={lr}: acc {acc:.4} ({:?})", t.elapsed());
        }
    }
}
