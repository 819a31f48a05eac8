use tokenmix::model::{Model, ModelConfig};
use tokenmix::train::{train, LogEvent, TrainConfig};

fn main() {
    let cfg = ModelConfig::preset("desk").unwrap();
    let mut model = Model::<f32>::build(cfg, 0).unwrap();
    let tcfg = TrainConfig {
        max_steps: 12,
        warmup_steps: 4,
        eval_every: 0,
        corpus_path: "crates/core/assets/corpus.txt".into(),
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    train(&mut model, &tcfg, |e| {
        if let LogEvent::Step(r) = e {
            println!("step {} loss {:.4} ({:.3}s)", r.step, r.loss, r.elapsed_s);
        }
    })
    .unwrap();
    println!("total {:.2}s -> {:.3}s/step", t0.elapsed().as_secs_f64(), t0.elapsed().as_secs_f64() / 12.0);
}
