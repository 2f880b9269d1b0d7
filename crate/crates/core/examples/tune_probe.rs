// scratch tuning probe, removed before final
use strata::nn::{AttentionKind, ModelConfig};
use strata::synth::{generate_dataset, SynthConfig};
use strata::train::{train, TrainConfig};
use strata::eval::evaluate;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let h_dec: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(16);
    let h_enc: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(16);
    let clip: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(7);

    let synth = SynthConfig::default();
    let train_set = generate_dataset(&synth, 200, 0xA11CE).unwrap();
    let held = generate_dataset(&synth, 50, 0xB0B).unwrap();
    let cfg = ModelConfig { attention: AttentionKind::Global, d: 1, h_dec, h_enc, ..ModelConfig::default() };
    let tc = TrainConfig { epochs, lr, seed, grad_clip: if clip > 0.0 { Some(clip) } else { None }, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let (ckpt, hist) = train(&cfg, &tc, &train_set).unwrap();
    let (rep, _) = evaluate(&ckpt.model().unwrap(), &held).unwrap();
    print!("epochs={epochs} lr={lr} h_dec={h_dec} h_enc={h_enc} clip={clip} seed={seed} heldout={:.4} time={:.0}s val_curve=[", rep.accuracy, t0.elapsed().as_secs_f64());
    for (i, v) in hist.val_accuracy.iter().enumerate() {
        if i % 10 == 9 || i == epochs - 1 {
            print!("{}:{:.3} ", i + 1, v.unwrap());
        }
    }
    println!("] impossible={}", rep.total_impossible);
}
