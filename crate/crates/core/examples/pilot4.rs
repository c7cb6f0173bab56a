// scratch: RMC on simplified nth-farthest variants
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relmem::nn::{adam_step, mlp_apply, AdamState, Mlp, ParamMap, ParamSet};
use relmem::baseline::{lstm_step_on_tape, LstmConfig, LstmParams, LstmState};
use relmem::rmc::{init_state, step_on_tape, InitMode, RmcConfig, RmcParams};
use relmem::tasks::{encode_nth_farthest, gen_nth_farthest, nth_farthest_oracle, NthFarthestEpisode};
use relmem::tensor::{Tape, Tensor, Var};

enum Core { Rmc(RmcParams<Tensor>, RmcConfig), Lstm(LstmParams<Tensor>, LstmConfig) }
struct Full { core: Core, head: Mlp<Tensor> }
impl ParamSet for Full {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match &self.core {
            Core::Rmc(p, _) => p.visit_at("model", f),
            Core::Lstm(p, _) => p.visit_at("model", f),
        }
        self.head.visit_at("head", f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match &mut self.core {
            Core::Rmc(p, _) => p.visit_at_mut("model", f),
            Core::Lstm(p, _) => p.visit_at_mut("model", f),
        }
        self.head.visit_at_mut("head", f);
    }
}

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let mode = std::env::args().nth(3).unwrap_or_else(|| "bind".into());
    let (dim, seq_len, batch) = (4usize, 4usize, 64usize);
    let width = dim + 3 * seq_len;
    let model = std::env::args().nth(4).unwrap_or_else(|| "rmc".into());
    let mut init = ChaCha8Rng::seed_from_u64(42);
    let core = if model == "lstm" {
        let cfg = LstmConfig::new(128, width);
        Core::Lstm(LstmParams::init(&cfg, &mut init), cfg)
    } else {
        let cfg = RmcConfig::new(4, 64, 2, width);
        Core::Rmc(RmcParams::init(&cfg, &mut init), cfg)
    };
    let out_size = match &core { Core::Rmc(_, c) => c.output_size(), Core::Lstm(_, c) => c.output_size() };
    let mut head = Mlp::xavier(&mut init, &[out_size, 256, seq_len], false);
    if let Some(last) = head.layers.last_mut() { for v in last.weight.data_mut() { *v *= 0.05; } }
    let mut full = Full { core, head };
    println!("model={model}");
    let mut data = ChaCha8Rng::seed_from_u64(42);
    let mut adam = AdamState::new(lr);
    let mut best = 0.0f64;
    println!("RMC mode={mode} lr={lr}");
    let start = std::time::Instant::now();
    for step in 1..=steps {
        let mut eps = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut ep = gen_nth_farthest(&mut data, dim, seq_len);
            match mode.as_str() {
                "geom" => { ep = NthFarthestEpisode { labels: vec![1,2,3,4], n: 1, m: 1, target: 0, ..ep };
                            ep.target = nth_farthest_oracle(&ep.vectors, &ep.labels, ep.n, ep.m).unwrap(); }
                "bind" => { ep.n = 1; ep.m = 1;
                            ep.target = nth_farthest_oracle(&ep.vectors, &ep.labels, ep.n, ep.m).unwrap(); }
                // capability ladder
                "recall-last" => { ep.target = ep.labels[seq_len - 1]; }
                "recall-first" => { ep.target = ep.labels[0]; }
                "argmax-norm" => {
                    let norms: Vec<f64> = ep.vectors.iter()
                        .map(|v| v.iter().map(|x| x * x).sum::<f64>()).collect();
                    let mut best_i = 0;
                    for i in 1..seq_len { if norms[i] > norms[best_i] { best_i = i; } }
                    ep.target = ep.labels[best_i];
                }
                _ => {}
            }
            eps.push(encode_nth_farthest(&ep));
        }
        let mut tape = Tape::new();
        let mut vars: Vec<(String, Var)> = Vec::new();
        enum B { R(RmcParams<Var>, RmcConfig), L(LstmParams<Var>, LstmConfig) }
        let bound = match &full.core {
            Core::Rmc(p, c) => { let b = p.bind(&mut tape); b.visit_at("model", &mut |n: &str, v: &Var| vars.push((n.into(), *v))); B::R(b, c.clone()) }
            Core::Lstm(p, c) => { let b = p.bind(&mut tape); b.visit_at("model", &mut |n: &str, v: &Var| vars.push((n.into(), *v))); B::L(b, c.clone()) }
        };
        let bh = full.head.bind(&mut tape);
        bh.visit_at("head", &mut |n: &str, v: &Var| vars.push((n.into(), *v)));
        let mut finals = Vec::new();
        let mut classes = Vec::new();
        for (enc, class) in &eps {
            let out = match &bound {
                B::R(b, c) => {
                    let state0 = init_state(c, InitMode::IdentityPadded, 0);
                    let mut m = tape.leaf(state0.memory.clone());
                    let mut h = tape.leaf(state0.hidden.clone());
                    let mut out = None;
                    for t in 0..enc.rows() {
                        let x = tape.leaf(Tensor::row(enc.row_slice(t)));
                        let s = step_on_tape(&mut tape, b, c, m, h, x).unwrap();
                        m = s.memory; h = s.hidden; out = Some(s.output);
                    }
                    out.unwrap()
                }
                B::L(b, c) => {
                    let z = LstmState::zeros(c);
                    let mut hh = tape.leaf(z.h.clone());
                    let mut cc = tape.leaf(z.c.clone());
                    let mut out = None;
                    for t in 0..enc.rows() {
                        let x = tape.leaf(Tensor::row(enc.row_slice(t)));
                        let (h2, c2, o) = lstm_step_on_tape(&mut tape, b, c, hh, cc, x).unwrap();
                        hh = h2; cc = c2; out = Some(o);
                    }
                    out.unwrap()
                }
            };
            finals.push(out);
            classes.push(*class);
        }
        let stacked = tape.concat_rows(&finals).unwrap();
        let logits = mlp_apply(&mut tape, &bh, stacked).unwrap();
        let loss = tape.softmax_xent(logits, &classes).unwrap();
        let lvals = tape.value(logits);
        let correct = (0..batch).filter(|&r| {
            let row = lvals.row_slice(r);
            let am = row.iter().enumerate().max_by(|a,b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            am == classes[r]
        }).count();
        best = best.max(correct as f64 / batch as f64);
        let grads_t = tape.backward(loss).unwrap();
        let mut grads = ParamMap::new();
        for (name, var) in vars { grads.insert(name, grads_t.get(var)); }
        adam_step(&mut full, &grads, &mut adam).unwrap();
        if step % 500 == 0 {
            println!("step {:>5} loss {:.4} best {:.3} ({:.0}s)", step, tape.value(loss).get(0,0), best, start.elapsed().as_secs_f64());
        }
    }
}
