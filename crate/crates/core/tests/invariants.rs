//! Structural properties of the network kernels and layers.

use musdiff_core::model::scan::{scan_chunked, scan_reference, ScanDims, DEFAULT_CHUNK};
use musdiff_core::model::{
    layers, sinusoidal_table, BlockOrder, BoundParams, MfaConfig, Model, ParamStore, Positional,
};
use musdiff_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn chunked_scan_matches_reference_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    for case in 0..100 {
        // a few long cases, the rest small enough to keep the sweep quick
        let dims = if case % 25 == 0 {
            ScanDims {
                len: 512,
                channels: 64,
                state: 16,
            }
        } else {
            ScanDims {
                len: rng.random_range(1..=160),
                channels: rng.random_range(1..=16),
                state: rng.random_range(1..=16),
            }
        };
        let (l, e, n) = (dims.len, dims.channels, dims.state);
        let x = rand_vec(&mut rng, l * e, -1.0, 1.0);
        let delta = rand_vec(&mut rng, l * e, 1e-3, 1.0);
        let a = rand_vec(&mut rng, e * n, -8.0, -0.05);
        let b = rand_vec(&mut rng, l * n, -1.0, 1.0);
        let c = rand_vec(&mut rng, l * n, -1.0, 1.0);
        let reference = scan_reference(dims, &x, &delta, &a, &b, &c);
        let chunk = if case % 2 == 0 {
            DEFAULT_CHUNK
        } else {
            rng.random_range(1..=70)
        };
        let (y, _) = scan_chunked(dims, &x, &delta, &a, &b, &c, chunk);
        for (r, v) in reference.iter().zip(&y) {
            let err = (r - v).abs() / r.abs().max(1.0);
            worst = worst.max(err);
            assert!(
                err <= 1e-10,
                "case {case} {dims:?} chunk {chunk}: {r} vs {v}"
            );
        }
    }
    println!("worst relative scan error {worst:.2e}");
}

#[test]
fn conv_and_transposed_conv_are_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for (len, k, s, din, dout) in [(16, 4, 4, 3, 5), (11, 3, 2, 2, 2), (20, 5, 3, 4, 1)] {
        let lc = (len - k) / s + 1;
        let x = rand_tensor(&mut rng, &[len, din]);
        let y = rand_tensor(&mut rng, &[lc, dout]);
        let w = rand_tensor(&mut rng, &[k, din, dout]);
        // <conv(x), y> must equal <x, convT(y)> under the same kernel
        let mut tape = Tape::new();
        let (vx, vy, vw) = (
            tape.constant(x.clone()).unwrap(),
            tape.constant(y.clone()).unwrap(),
            tape.constant(w).unwrap(),
        );
        let cx = tape.conv1d(vx, vw, s).unwrap();
        let lhs = tape.value(cx).dot(&y);
        let tyc = tape.conv1d_transposed(vy, vw, s, len).unwrap();
        let rhs = tape.value(tyc).dot(&x);
        assert!(
            (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0),
            "len {len} k {k} s {s}: {lhs} vs {rhs}"
        );
    }
}

fn cfg() -> MfaConfig {
    MfaConfig {
        vocab_size: 12,
        d_model: 8,
        d_state: 4,
        d_expand: 16,
        n_heads: 2,
        n_blocks: 2,
        n_mamba_per_block: 2,
        down_kernel: 4,
        down_stride: 4,
        conv_kernel: 4,
        diffusion_steps: 8,
        order: BlockOrder::Mfa,
        pad_token: Some(10),
        positional: Positional::None,
    }
}

#[test]
fn mamba_layer_is_causal() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut store = ParamStore::new();
    layers::init_mamba(&mut store, "m", &c, &mut rng);
    store.insert("m.delta_bias", Tensor::full(&[c.d_expand], 0.5));
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let vars = store
            .tensors()
            .map(|t| tape.constant(t.clone()).unwrap())
            .collect();
        let p = BoundParams::from_vars(&store, vars);
        let vx = tape.constant(x.clone()).unwrap();
        let y = layers::mamba_layer(&mut tape, &p, "m", vx).unwrap();
        tape.value(y).clone()
    };
    let (l, d) = (24, c.d_model);
    let x = rand_tensor(&mut rng, &[l, d]);
    let base = run(&x);
    for cut in [0, 5, 17, 23] {
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[(cut + 1) * d..] {
            *v += 3.0;
        }
        let y2 = run(&x2);
        assert_eq!(
            &base.data()[..(cut + 1) * d],
            &y2.data()[..(cut + 1) * d],
            "cut {cut}"
        );
        if cut + 1 < l {
            assert_ne!(&base.data()[(cut + 1) * d..], &y2.data()[(cut + 1) * d..]);
        }
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut store = ParamStore::new();
    layers::init_attention(&mut store, "a", &c, &mut rng);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let vars = store
            .tensors()
            .map(|t| tape.constant(t.clone()).unwrap())
            .collect();
        let p = BoundParams::from_vars(&store, vars);
        let vx = tape.constant(x.clone()).unwrap();
        let y = layers::self_attention(&mut tape, &p, "a", vx, c.n_heads, None).unwrap();
        tape.value(y).clone()
    };
    let (l, d) = (7, c.d_model);
    let x = rand_tensor(&mut rng, &[l, d]);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let px = Tensor::from_fn(&[l, d], |i| x.data()[perm[i / d] * d + i % d]);
    let y = run(&x);
    let py = run(&px);
    for i in 0..l {
        for j in 0..d {
            let a = py.data()[i * d + j];
            let b = y.data()[perm[i] * d + j];
            assert!((a - b).abs() < 1e-12, "row {i}: {a} vs {b}");
        }
    }
}

#[test]
fn pad_suffix_does_not_change_real_position_logits() {
    for order in BlockOrder::ALL {
        let model = Model::new(cfg().with_order(order), 5).unwrap();
        let tokens = [3, 11, 0, 5, 11, 7, 1, 2];
        let base = model.forward(&tokens, 3).unwrap();
        let mut padded = tokens.to_vec();
        padded.extend([10; 8]);
        let longer = model.forward(&padded, 3).unwrap();
        let v = base.last_dim();
        for (i, (a, b)) in base
            .data()
            .iter()
            .zip(&longer.data()[..tokens.len() * v])
            .enumerate()
        {
            assert!((a - b).abs() < 1e-9, "{order} logit {i}: {a} vs {b}");
        }
    }
}

#[test]
fn forward_is_deterministic_per_seed() {
    let a = Model::new(cfg(), 9).unwrap();
    let b = Model::new(cfg(), 9).unwrap();
    let c = Model::new(cfg(), 10).unwrap();
    let t = [1, 2, 3, 4, 11, 11];
    assert_eq!(a.forward(&t, 2).unwrap(), b.forward(&t, 2).unwrap());
    assert_ne!(a.forward(&t, 2).unwrap(), c.forward(&t, 2).unwrap());
}

fn run_layer(
    store: &ParamStore,
    x: &Tensor,
    f: impl Fn(&mut Tape, &BoundParams<'_>, Var) -> Var,
) -> Tensor {
    let mut tape = Tape::new();
    let vars = store
        .tensors()
        .map(|t| tape.constant(t.clone()).unwrap())
        .collect();
    let p = BoundParams::from_vars(store, vars);
    let vx = tape.constant(x.clone()).unwrap();
    let y = f(&mut tape, &p, vx);
    tape.value(y).clone()
}

/// Row-wise `(r − mean) / √(var + 1e-5) · gain + bias`.
fn layernorm_oracle(rows: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    rows.chunks(d)
        .flat_map(|r| {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(move |(j, v)| (v - mean) * inv * gain[j] + bias[j])
                .collect::<Vec<_>>()
        })
        .collect()
}

fn random_norm(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let gain = rand_vec(rng, d, 0.5, 1.5);
    let bias = rand_vec(rng, d, -0.5, 0.5);
    store.insert(
        format!("{prefix}.ln.gain"),
        Tensor::new(vec![d], gain.clone()).unwrap(),
    );
    store.insert(
        format!("{prefix}.ln.bias"),
        Tensor::new(vec![d], bias.clone()).unwrap(),
    );
    (gain, bias)
}

#[test]
fn zero_out_projection_leaves_layernorm_of_input() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut store = ParamStore::new();
    layers::init_mamba(&mut store, "m", &c, &mut rng);
    store.insert("m.out", Tensor::zeros(&[c.d_expand, c.d_model]));
    let (gain, bias) = random_norm(&mut store, "m", c.d_model, &mut rng);
    for l in [1, 9] {
        let x = rand_tensor(&mut rng, &[l, c.d_model]);
        let y = run_layer(&store, &x, |t, p, v| {
            layers::mamba_layer(t, p, "m", v).unwrap()
        });
        let want = layernorm_oracle(x.data(), c.d_model, &gain, &bias);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "L={l}: {a} vs {b}");
        }
    }
}

#[test]
fn attention_over_one_position_is_value_then_output_projection() {
    let c = cfg();
    let d = c.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut store = ParamStore::new();
    layers::init_attention(&mut store, "a", &c, &mut rng);
    let (gain, bias) = random_norm(&mut store, "a", d, &mut rng);
    let x = rand_tensor(&mut rng, &[1, d]);
    let y = run_layer(&store, &x, |t, p, v| {
        layers::self_attention(t, p, "a", v, c.n_heads, None).unwrap()
    });
    // softmax over a single key is 1, so every head returns its slice of x·W_V
    let (wv, wo) = (
        store.get("a.wv").unwrap().data(),
        store.get("a.wo").unwrap().data(),
    );
    let xv: Vec<f64> = (0..d)
        .map(|j| (0..d).map(|k| x.data()[k] * wv[k * d + j]).sum())
        .collect();
    let pre: Vec<f64> = (0..d)
        .map(|j| x.data()[j] + (0..d).map(|k| xv[k] * wo[k * d + j]).sum::<f64>())
        .collect();
    let want = layernorm_oracle(&pre, d, &gain, &bias);
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn sinusoidal_positions_shift_only_the_embedding() {
    let t = sinusoidal_table(3, 4);
    let at = |p: f64| [p.sin(), p.cos(), (p / 100.0).sin(), (p / 100.0).cos()];
    let want: Vec<f64> = (0..3).flat_map(|p| at(p as f64)).collect();
    for (a, b) in t.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
    // same weights, different position signal: logits change, parameter count does not
    let plain = Model::new(cfg(), 6).unwrap();
    let mut c = cfg();
    c.positional = Positional::Sinusoidal;
    let sin = Model::new(c, 6).unwrap();
    assert_eq!(plain.num_params(), sin.num_params());
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
    assert_ne!(
        plain.forward(&tokens, 2).unwrap(),
        sin.forward(&tokens, 2).unwrap()
    );
}
