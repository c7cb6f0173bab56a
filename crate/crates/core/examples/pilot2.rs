// scratch: direct-fit control — flat MLP on the concatenated episode
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relmem::nn::{adam_step, mlp_apply, AdamState, Mlp, ParamSet};
use relmem::tasks::{encode_nth_farthest, gen_nth_farthest};
use relmem::tensor::{Tape, Tensor};

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let (dim, seq_len, batch) = (4usize, 4usize, 64usize);
    let width = dim + 3 * seq_len;
    let mut init = ChaCha8Rng::seed_from_u64(42);
    let mut head = Mlp::xavier(&mut init, &[width * seq_len, 256, 256, 256, 256, seq_len], false);
    let he = std::env::args().nth(3).as_deref() == Some("he");
    if he {
        let n = head.layers.len();
        for l in head.layers[..n - 1].iter_mut() {
            let (fi, fo) = (l.weight.rows() as f64, l.weight.cols() as f64);
            let scale = ((fi + fo) / fi).sqrt();
            for v in l.weight.data_mut() { *v *= scale; }
        }
    }
    if let Some(last) = head.layers.last_mut() {
        for v in last.weight.data_mut() { *v *= 0.05; }
    }
    println!("he={he}");
    let mut data = ChaCha8Rng::seed_from_u64(42);
    let mut adam = AdamState::new(lr);
    let mut best = 0.0f64;
    for step in 1..=steps {
        let mut rows = Vec::with_capacity(batch);
        let mut classes = Vec::with_capacity(batch);
        for _ in 0..batch {
            let ep = gen_nth_farthest(&mut data, dim, seq_len);
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
        if step % 250 == 0 {
            println!("step {:>5} loss {:.4} acc {:.3} best {:.3}", step, tape.value(loss).get(0,0), acc, best);
        }
    }
}
