// scratch pilot for learning-curve shape (deleted before release)
use relmem::rmc::GateStyle;
use relmem::trainer::{ModelKind, TaskKind, TrainConfig, Trainer};

fn main() {
    let variant = std::env::args().nth(1).unwrap_or_default();
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let mut cfg = TrainConfig { model: ModelKind::Rmc, task: TaskKind::NthFarthest, ..TrainConfig::default() };
    match variant.as_str() {
        "noclip" => { cfg.clip = 1e6; }
        "memgate" => { cfg.rmc.gate_style = GateStyle::Memory; }
        "noclip-memgate" => { cfg.clip = 1e6; cfg.rmc.gate_style = GateStyle::Memory; }
        "smallhead" => { cfg.head.hidden_layers = 2; }
        "noclip-smallhead" => { cfg.clip = 1e6; cfg.head.hidden_layers = 2; }
        "key16" => { cfg.rmc.key_size = Some(16); }
        "outgate" => { cfg.clip = 1e6; cfg.rmc.use_output_gate = true; }
        "fb0" => { cfg.clip = 1e6; cfg.rmc.forget_bias = 0.0; }
        "randinit" => { cfg.clip = 1e6; cfg.rmc.init_mode = relmem::rmc::InitMode::RandomNormal; }
        "seed7" => { cfg.clip = 1e6; cfg.seed = 7; }
        "noclip-long" => { cfg.clip = 1e6; }
        "lr3" => { cfg.clip = 1e6; cfg.lr = 1e-3; }
        "combo" => {
            cfg.rmc.gate_style = GateStyle::Memory;
            cfg.rmc.key_size = Some(64);
            cfg.head.hidden_layers = 1;
        }
        "exact-seed1" => { cfg.seed = 1; }
        "h1-256" => { cfg.head.hidden_layers = 1; }
        "h1-64" => { cfg.head.hidden_layers = 1; cfg.head.hidden_units = 64; }
        "h1-256-key64" => { cfg.head.hidden_layers = 1; cfg.rmc.key_size = Some(64); }
        "h1-256-mem" => { cfg.head.hidden_layers = 1; cfg.rmc.gate_style = GateStyle::Memory; }
        "lr3-n8" => { cfg.clip = 1e6; cfg.lr = 1e-3; cfg.task_params.seq_len = 8; cfg.task_params.dim = 4; }
        _ => {}
    }
    println!("variant={variant} clip={} gate={:?} head={}x{}", cfg.clip, cfg.rmc.gate_style, cfg.head.hidden_layers, cfg.head.hidden_units);
    let mut t = Trainer::new(cfg).unwrap();
    let start = std::time::Instant::now();
    for chunk in 0..(steps / 250) {
        t.run(250).unwrap();
        let m = t.metrics().last().unwrap();
        println!(
            "step {:>5}  loss {:.4}  acc {:.3}  best {:.3}  ({:.0}s)",
            (chunk + 1) * 250, m.loss, m.batch_accuracy, m.best_batch_accuracy,
            start.elapsed().as_secs_f64()
        );
    }
}
