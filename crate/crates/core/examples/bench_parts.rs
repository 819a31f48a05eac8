use tokenmix::attention::Capture;
use tokenmix::model::{Model, ModelConfig};
use tokenmix::train::{ingest_corpus, TrainConfig};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::preset("desk").unwrap();
    let model = Model::<f32>::build(cfg, 0).unwrap();
    let tcfg = TrainConfig::default();
    let stream = ingest_corpus("crates/core/assets/corpus.txt").unwrap();
    let (inputs, _targets) = stream.window(0, tcfg.seq_len);

    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = model.forward(inputs).unwrap();
    }
    println!("forward only: {:.1} ms/seq", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = model.forward_captured(inputs, Capture::all()).unwrap();
    }
    println!("forward captured: {:.1} ms/seq", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
