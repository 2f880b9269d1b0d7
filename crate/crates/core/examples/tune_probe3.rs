// scratch tuning probe, removed before final
use strata::eval::evaluate;
use strata::nn::{AttentionKind, InputFeeding, ModelConfig};
use strata::synth::{generate_dataset, SynthConfig};
use strata::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = args[1].as_str();
    let d: usize = args[2].parse().unwrap();
    let epochs: usize = args[3].parse().unwrap();
    let lr: f64 = args[4].parse().unwrap();
    let noise: f64 = args[5].parse().unwrap();
    let soft: f64 = args[6].parse().unwrap();

    let mut synth = SynthConfig::default();
    synth.noise_sigma = noise;
    synth.transition_softness = soft;
    let train_set = generate_dataset(&synth, 200, 0xA11CE).unwrap();
    let held = generate_dataset(&synth, 50, 0xB0B).unwrap();
    let cfg = match kind {
        "global" => ModelConfig { attention: AttentionKind::Global, ..ModelConfig::default() },
        "toeplitz" => ModelConfig { attention: AttentionKind::Toeplitz, d, ..ModelConfig::default() },
        "baseline" => ModelConfig {
            attention: AttentionKind::Toeplitz,
            d: 0,
            input_feeding: InputFeeding::Off,
            slice_context_only: true,
            ..ModelConfig::default()
        },
        _ => panic!("unknown kind"),
    };
    let t0 = std::time::Instant::now();
    let mut agg = 0usize;
    let mut per_seed = Vec::new();
    let mut acc_sum = 0.0;
    for seed in [11u64, 22, 33, 44, 55] {
        let tc = TrainConfig { epochs, lr, seed, ..TrainConfig::default() };
        let (ckpt, _) = train(&cfg, &tc, &train_set).unwrap();
        let (rep, _) = evaluate(&ckpt.model().unwrap(), &held).unwrap();
        per_seed.push(rep.total_impossible);
        agg += rep.total_impossible;
        acc_sum += rep.accuracy;
    }
    println!(
        "{kind} d={d} epochs={epochs} lr={lr} noise={noise} soft={soft} per_seed={per_seed:?} aggregate={agg} mean_acc={:.4} time={:.0}s",
        acc_sum / 5.0, t0.elapsed().as_secs_f64()
    );
}
