// scratch: flat-MLP on geometry-only variant (fixed labels, fixed question)
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relmem::nn::{adam_step, mlp_apply, AdamState, Mlp, ParamSet};
use relmem::tasks::{encode_nth_farthest, gen_nth_farthest, nth_farthest_oracle, NthFarthestEpisode};
use relmem::tensor::{Tape, Tensor};

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let mode = std::env::args().nth(3).unwrap_or_else(|| "geom".into());
    let (dim, seq_len, batch) = (4usize, 4usize, 64usize);
    let width = dim + 3 * seq_len;
    let mut init = ChaCha8Rng::seed_from_u64(42);
    let mut head = Mlp::xavier(&mut init, &[width * seq_len, 256, 256, seq_len], false);
    let mut data = ChaCha8Rng::seed_from_u64(42);
    let mut adam = AdamState::new(lr);
    let mut best = 0.0f64;
    println!("mode={mode} lr={lr}");
    for step in 1..=steps {
        let mut rows = Vec::with_capacity(batch);
        let mut classes = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut ep = gen_nth_farthest(&mut data, dim, seq_len);
            match mode.as_str() {
                "geom" => {
                    // fixed labels and question: purely geometric
                    ep = NthFarthestEpisode { labels: vec![1,2,3,4], n: 1, m: 1,
                        target: 0, ..ep };
                    ep.target = nth_farthest_oracle(&ep.vectors, &ep.labels, ep.n, ep.m).unwrap();
                }
                "bind" => {
                    // fixed question, random labels: binding needed, geometry needed
                    ep.n = 1; ep.m = 1;
                    ep.target = nth_farthest_oracle(&ep.vectors, &ep.labels, ep.n, ep.m).unwrap();
                }
                _ => {}
            }
            let (enc, class) = encode_nth_farthest(&ep);
            rows.push(enc.data().to_vec());
            classes.push(class);
        }
        let flat = Tensor::from_rows(&rows);
        let mut tape = Tape::new();
        let bound = head.bind(&mut tape);
        let x = tape.leaf(flat);
        let logits = mlp_apply(&mut tape, &bound, x).unwrap();
        let loss = tape.softmax_xent(logits, &classes).unwrap();
        let lvals = tape.value(logits);
        let correct = (0..batch).filter(|&r| {
            let row = lvals.row_slice(r);
            let am = row.iter().enumerate().max_by(|a,b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            am == classes[r]
        }).count();
        let acc = correct as f64 / batch as f64;
        best = best.max(acc);
        let grads_t = tape.backward(loss).unwrap();
        let mut grads = relmem::nn::ParamMap::new();
        let mut vars = Vec::new();
        bound.visit_at("mlp", &mut |name: &str, v: &relmem::tensor::Var| vars.push((name.to_string(), *v)));
        for (name, var) in vars { grads.insert(name, grads_t.get(var)); }
        adam_step(&mut head, &grads, &mut adam).unwrap();
        if step % 500 == 0 {
            println!("step {:>5} loss {:.4} acc {:.3} best {:.3}", step, tape.value(loss).get(0,0), acc, best);
        }
    }
}
