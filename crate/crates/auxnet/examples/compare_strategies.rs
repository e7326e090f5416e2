//! Trains the same spiral task with several strategies and seeds, then
//! prints final-head errors, per-head errors, and supervision ratios.
//!
//! Usage: compare_strategies [seeds] [epochs] [samples] [noise] [depth-variant]
//! where depth-variant is `desk` (20, heads 13/17/20), `shallow` (20, heads
//! 2/20), `deeponly` (20, heads 20) or `nusweep:<nu>` (20, heads 10/15/20).

use std::time::Instant;

use auxnet::data::{gen_synthetic, DataSplit, Generator, SyntheticSpec};
use auxnet::model::{build_model, ActivationOrdering, Model, ModelConfig};
use auxnet::predict::evaluate_heads;
use auxnet::ratio::supervision_ratio;
use auxnet::train::{train, Strategy, TrainConfig};

fn desk_model_config(heads: Vec<usize>, nu: f64, seed: u64) -> ModelConfig {
    ModelConfig {
        depth: 20,
        stage_channels: vec![4, 8],
        stage_blocks: None,
        lambda: 1.0,
        head_positions: heads,
        nu,
        num_classes: 2,
        in_channels: 1,
        activation_ordering: ActivationOrdering::Post,
        identity_activation: false,
        min_head_position: 1,
        seed,
    }
}

fn desk_data(samples: usize, noise: f64, seed: u64) -> DataSplit<f32> {
    gen_synthetic(&SyntheticSpec {
        generator: Generator::Spiral,
        samples,
        classes: 2,
        noise,
        seed,
        grid: 8,
        train_fraction: 0.8,
    })
    .unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let samples: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let noise: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.18);
    let variant = args.get(5).cloned().unwrap_or_else(|| "desk".into());

    let (heads, nu) = if variant == "shallow" {
        (vec![2, 20], 1.0)
    } else if variant == "deeponly" {
        (vec![20], 1.0)
    } else if let Some(nu) = variant.strip_prefix("nusweep:") {
        (vec![10, 15, 20], nu.parse().unwrap())
    } else {
        (vec![13, 17, 20], 2.0)
    };
    println!("variant {variant}: heads {heads:?}, nu {nu}, {samples} samples, noise {noise}, {epochs} epochs");

    let strategies = if variant == "desk" {
        vec![Strategy::Plain, Strategy::Joint, Strategy::Multipath]
    } else {
        vec![Strategy::Multipath]
    };

    for seed in 0..seeds {
        let data = desk_data(samples, noise, 1000 + seed);
        for &strategy in &strategies {
            let started = Instant::now();
            let config = desk_model_config(heads.clone(), nu, seed);
            let mut model: Model<f32> = build_model(&config).unwrap();
            let mut tc = TrainConfig::new(strategy, epochs, seed);
            tc.batch_size = 128;
            let report = train(&mut model, &data, &tc).unwrap();
            let last = report.rows.last().unwrap();
            let eval = evaluate_heads(&model, &data.test, 256).unwrap();
            println!(
                "seed {seed} {strategy:>9}: final-head err {:5.2}%  per-head {:?}  safe {:5.2}%  ratio {:?}  [{:.1}s]",
                last.test_err.last().unwrap(),
                last.test_err.iter().map(|e| format!("{e:.2}")).collect::<Vec<_>>(),
                eval.safe_err,
                eval.prediction_ratio.iter().map(|r| format!("{r:.0}")).collect::<Vec<_>>(),
                started.elapsed().as_secs_f64(),
            );
            if seed == 0 && variant == "desk" {
                let take = 128.min(data.test.len());
                let (mb, ml) = data.test.slice(0, take);
                let trace = supervision_ratio(&model, &mb, &ml, strategy, epochs).unwrap();
                let ratios: Vec<String> = trace
                    .entries
                    .iter()
                    .map(|(l, r)| format!("{l}:{r:.2e}"))
                    .collect();
                println!("    ratios: {}", ratios.join(" "));
            }
        }
    }
}
