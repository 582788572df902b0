//! Toy training run on synthetic translations.
//!
//! `cargo run --release -p ssmflow --example toy_train -- [steps] [seed] [key=value ...]`

use std::time::Instant;

use ssmflow::pipeline::{train_toy, FlowModel, ModelConfig, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let overrides = args.iter().skip(2).filter(|a| !a.starts_with("lr=")).cloned().collect::<Vec<_>>().join("\n");
    let mut text = ModelConfig::tiny().to_text();
    text.push_str(&overrides);
    let mc = ModelConfig::parse(&text).expect("config");
    let samples = std::env::var("SAMPLES").ok().and_then(|s| s.parse().ok()).unwrap_or(320);
    let mut tc =
        TrainConfig { steps, seed, samples, eval_every: 0, ..TrainConfig::new(mc.image_height, mc.image_width) };
    for kv in args.iter().skip(2) {
        if let Some(v) = kv.strip_prefix("lr=") {
            tc.lr = v.parse().unwrap();
        }
    }
    let (store, model) = FlowModel::new::<f32>(mc, seed).expect("model");
    println!("params {}", store.num_elements());
    let t0 = Instant::now();
    let out = train_toy(&model, store, &tc, |r| {
        println!(
            "step {:5} loss {:.4} epe {:.4} f1 {:.2} ({:.0}s)",
            r.step,
            r.loss,
            r.epe,
            r.f1_all,
            t0.elapsed().as_secs_f64()
        )
    })
    .expect("training");
    println!("initial {:?}", out.initial);
    println!("final   {:?}", out.last);
}
