use solar::backbone::{BackboneSpec, DescriptorModel};
use solar::eval::{evaluate_retrieval, extract_descriptors};
use solar::loss::LossConfig;
use solar::synth::generate_synthetic_benchmark;
use solar::train::{train, TrainConfig};
use std::time::Instant;

fn map_of(model: &DescriptorModel, bench: &solar::synth::SyntheticBenchmark) -> (f64, f64) {
    let queries = extract_descriptors(model, &bench.cropped_queries().unwrap(), &[1.0]).unwrap();
    let database = extract_descriptors(model, &bench.database_items(), &[1.0]).unwrap();
    let [_, med, hard] = evaluate_retrieval(&queries, &database, &bench.ground_truth).unwrap();
    (med.value, hard.value)
}

fn main() {
    let warm_epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let tune_epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let mut means = [0.0f64; 4];
    let t0 = Instant::now();
    for seed in [101u64, 202, 303] {
        let bench = generate_synthetic_benchmark(8, 20, 64, seed).unwrap();
        // warm start: plain GeM baseline, triplet loss only
        let spec = BackboneSpec::toy_fcn(1, &[]).unwrap();
        let init = DescriptorModel::init(spec, seed).unwrap();
        let mut warm_cfg = TrainConfig::desk_profile(seed);
        warm_cfg.epochs = warm_epochs;
        warm_cfg.loss = LossConfig { margin: 1.25, lambda: 0.0 };
        let warm = train(init, &bench.train, &warm_cfg, None).unwrap().model;
        let (wm, wh) = map_of(&warm, &bench);
        println!("seed {seed} warm : med {wm:.4} hard {wh:.4} p={:.3}", warm.gem.value());

        for (idx, (name, insertions, lambda)) in [
            ("base ", vec![], 0.0),
            ("+sos ", vec![], 10.0),
            ("+soa ", vec![4usize, 5], 0.0),
            ("solar", vec![4, 5], 10.0),
        ]
        .into_iter()
        .enumerate()
        {
            let mut model = warm.clone();
            for (k, ins) in insertions.iter().enumerate() {
                model.insert_fresh_soa(*ins, seed ^ (0xA5A5 + k as u64)).unwrap();
            }
            let mut cfg = TrainConfig::desk_profile(seed ^ 0x51);
            cfg.epochs = tune_epochs;
            cfg.loss = LossConfig { margin: 1.25, lambda };
            let out = train(model, &bench.train, &cfg, None).unwrap();
            let (m1, h1) = map_of(&out.model, &bench);
            means[idx] += m1 / 3.0;
            println!("seed {seed} {name}: med {m1:.4} hard {h1:.4} p={:.3}", out.model.gem.value());
        }
    }
    println!("mean medium: base {:.4} +sos {:.4} +soa {:.4} solar {:.4}", means[0], means[1], means[2], means[3]);
    println!("orderings: solar>=soa {} soa>=base {} sos>=base {}", means[3] >= means[2], means[2] >= means[0], means[1] >= means[0]);
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}
