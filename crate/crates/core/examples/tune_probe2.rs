// scratch tuning probe, removed before final
use strata::eval::evaluate;
use strata::nn::{AttentionKind, InputFeeding, ModelConfig};
use strata::synth::{generate_dataset, SynthConfig};
use strata::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = args[1].as_str(); // global | toeplitz | baseline
    let epochs: usize = args[2].parse().unwrap();
    let lr: f64 = args[3].parse().unwrap();
    let noise: f64 = args[4].parse().unwrap();
    let soft: f64 = args[5].parse().unwrap();
    let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(7);

    let mut synth = SynthConfig::default();
    synth.noise_sigma = noise;
    synth.transition_softness = soft;
    let train_set = generate_dataset(&synth, 200, 0xA11CE).unwrap();
    let held = generate_dataset(&synth, 50, 0xB0B).unwrap();
    let cfg = match kind {
        "global" => ModelConfig { attention: AttentionKind::Global, ..ModelConfig::default() },
        "toeplitz" => ModelConfig { attention: AttentionKind::Toeplitz, d: 1, ..ModelConfig::default() },
        "baseline" => ModelConfig {
            attention: AttentionKind::Toeplitz,
            d: 0,
            input_feeding: InputFeeding::Off,
            slice_context_only: true,
            ..ModelConfig::default()
        },
        _ => panic!("unknown kind"),
    };
    let tc = TrainConfig { epochs, lr, seed, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let (ckpt, hist) = train(&cfg, &tc, &train_set).unwrap();
    let (rep, _) = evaluate(&ckpt.model().unwrap(), &held).unwrap();
    let tail: Vec<String> = hist.val_accuracy.iter().enumerate().rev().take(5)
        .map(|(i, v)| format!("{}:{:.3}", i + 1, v.unwrap())).collect();
    println!(
        "{kind} epochs={epochs} lr={lr} noise={noise} soft={soft} seed={seed} heldout={:.4} impossible={} time={:.0}s tail={:?}",
        rep.accuracy, rep.total_impossible, t0.elapsed().as_secs_f64(), tail
    );
}
