//! Rough per-op timing at training shapes (dev tool).

use std::time::Instant;

use affectlab::tape::Tape;
use affectlab::tensor::Tensor;

fn t32(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                ((state >> 32) as f32 / u32::MAX as f32) - 0.5
            })
            .collect(),
    )
}

fn time_op(name: &str, iters: usize, mut f: impl FnMut()) {
    f();
    let t = Instant::now();
    for _ in 0..iters {
        f();
    }
    println!("{name:28} {:8.2?}/iter", t.elapsed() / iters as u32);
}

fn main() {
    let b = 32usize;
    let tkn = 197usize;
    let rows = b * tkn; // 6304
    let d = 192usize;

    let x = t32(&[rows, d], 1);
    let w_qkv = t32(&[3 * d, d], 2);
    let w_fc1 = t32(&[768, d], 3);
    let big = t32(&[rows, 768], 4);
    let gamma = t32(&[d], 5);
    let beta = t32(&[d], 6);
    let q = t32(&[rows, d], 7);
    let k = t32(&[rows, d], 8);
    let v = t32(&[rows, d], 9);

    time_op("matmul qkv 6304x192x576", 10, || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.constant(w_qkv.clone());
        let _ = tape.matmul(xv, false, wv, true);
    });
    time_op("matmul fc1 6304x192x768", 10, || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.constant(w_fc1.clone());
        let _ = tape.matmul(xv, false, wv, true);
    });
    time_op("gelu 6304x768", 10, || {
        let mut tape = Tape::new();
        let xv = tape.leaf(big.clone());
        let _ = tape.gelu(xv);
    });
    time_op("layernorm 6304x192", 10, || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let g = tape.leaf(gamma.clone());
        let bb = tape.leaf(beta.clone());
        let _ = tape.layernorm(xv, g, bb, 1e-6);
    });
    time_op("add 6304x192", 20, || {
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let bb = tape.leaf(q.clone());
        let _ = tape.add(a, bb);
    });
    time_op("select_cols x3 from qkv", 10, || {
        let mut tape = Tape::new();
        let a = tape.leaf(t32(&[rows, 3 * d], 10));
        let _ = tape.select_cols(a, 0, d);
        let _ = tape.select_cols(a, d, 2 * d);
        let _ = tape.select_cols(a, 2 * d, 3 * d);
    });
    time_op("attention b32 h3 t197", 5, || {
        let mut tape = Tape::new();
        let qv = tape.leaf(q.clone());
        let kv = tape.leaf(k.clone());
        let vv = tape.leaf(v.clone());
        let _ = tape.attention(qv, kv, vv, b, 3);
    });
    time_op("attention fwd+bwd", 5, || {
        let mut tape = Tape::new();
        let qv = tape.leaf(q.clone());
        let kv = tape.leaf(k.clone());
        let vv = tape.leaf(v.clone());
        let o = tape.attention(qv, kv, vv, b, 3);
        let s = tape.square(o);
        let m = tape.mean_all(s);
        let _ = tape.backward(m);
    });
    time_op("gelu fwd+bwd 6304x768", 5, || {
        let mut tape = Tape::new();
        let xv = tape.leaf(big.clone());
        let g = tape.gelu(xv);
        let s = tape.square(g);
        let m = tape.mean_all(s);
        let _ = tape.backward(m);
    });
    encbench::run();
}
// appended: full encoder fwd/bwd timing
mod encbench {
    use super::*;
    use affectlab::backbone::{BatchTokens, EncoderConfig, VitEncoder};
    use affectlab::data::{augment, patchify, synth_dataset, AugmentMode, Task};
    use affectlab::nn::{derive_rng, ParamSet};

    pub fn run() {
        let data = synth_dataset(32, Task::Mtl, 1);
        let mut rng = derive_rng(2, &[1]);
        let images: Vec<_> = data
            .iter()
            .map(|s| augment(&s.image, AugmentMode::Eval, &mut rng).unwrap())
            .collect();
        let cfg = EncoderConfig::tiny();
        let mut params = ParamSet::<f32>::new();
        let enc = VitEncoder::new(&mut params, "", cfg, &mut rng);
        for batch in [16usize, 32] {
            let seqs: Vec<_> = images[..batch]
                .iter()
                .map(|img| patchify(img, 16).unwrap())
                .collect();
            let refs: Vec<_> = seqs.iter().collect();
            let tokens = BatchTokens::from_sequences(&refs).unwrap();
            let t1 = Instant::now();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let out = enc.forward(&mut tape, &bound, &tokens, None);
            let t_fwd = t1.elapsed();
            let t2 = Instant::now();
            let p2 = tape.square(out.pooled);
            let loss = tape.mean_all(p2);
            let _ = tape.backward(loss);
            let t_bwd = t2.elapsed();
            println!(
                "encoder batch {batch:2}: fwd {:6.1?} bwd {:6.1?} per-sample {:5.1?}",
                t_fwd,
                t_bwd,
                (t_fwd + t_bwd) / batch as u32
            );
        }
    }
}
