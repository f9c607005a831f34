use std::time::Instant;

use rescbam::data::{generate_synthetic_dataset, SynthConfig};
use rescbam::train::{evaluate_model, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = TrainConfig::desk();
    cfg.num_classes = 2;
    cfg.batch_size = 16;
    cfg.eval_every = 25;
    for pair in args.chunks(2) {
        cfg.set(&pair[0], &pair[1]).unwrap();
    }
    let data = generate_synthetic_dataset(&SynthConfig::new(20, 2, 7)).unwrap();
    let t = Instant::now();
    let out = train(&cfg, &data, &data, |e| println!("{}", e.line())).unwrap();
    let r = evaluate_model(&out.last, &data, cfg.ap_method).unwrap();
    println!(
        "last map50 {:.4} map5095 {:.4} f1 {:.4}; best {:?} @ {} ; {:.1}s",
        r.report.map50,
        r.report.map5095,
        r.report.f1,
        out.best_map50,
        out.best_epoch,
        t.elapsed().as_secs_f64()
    );
}
