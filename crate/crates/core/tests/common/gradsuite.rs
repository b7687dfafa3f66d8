//! Finite-difference checks for every tape primitive, every composite layer
//! and whole models. Each check returns its report; callers decide how to
//! assert.

use musdiff_core::model::{
    layers, BlockOrder, BoundParams, MfaConfig, Model, ModelError, ParamStore, Positional,
};
use musdiff_core::tensor::{
    grad_check, GradCheckOptions, GradCheckReport, NumericError, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
/// Central differences at h = 1e-5 carry O(h²) truncation error around 1e-10,
/// so derivatives smaller than this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-5;

pub type Check = (String, GradCheckReport);
type TapeResult = musdiff_core::tensor::Result<Var>;

pub fn opts() -> GradCheckOptions {
    GradCheckOptions {
        abs_floor: ABS_FLOOR,
        ..Default::default()
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contracts the output with a fixed random weight so every output entry matters.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> TapeResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.shape(y));
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn numeric(e: ModelError) -> NumericError {
    match e {
        ModelError::Numeric(n) => n,
        other => panic!("{other}"),
    }
}

fn run(
    out: &mut Vec<Check>,
    name: &str,
    params: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> TapeResult,
) {
    let r = grad_check(f, &params, &opts()).unwrap();
    out.push((name.to_string(), r));
}

pub fn primitives() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    run(
        &mut out,
        "matmul batched",
        vec![
            rand_tensor(&mut rng, &[2, 3, 4]),
            rand_tensor(&mut rng, &[2, 4, 5]),
        ],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 7)
        },
    );
    run(
        &mut out,
        "matmul broadcast",
        vec![
            rand_tensor(&mut rng, &[2, 3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
        ],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 8)
        },
    );
    run(
        &mut out,
        "matmul_nt",
        vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[5, 4]),
        ],
        |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            project(t, y, 9)
        },
    );

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 5]);
    type Unary = fn(&mut Tape, Var) -> TapeResult;
    let ops: [(&str, Unary); 5] = [
        ("silu", |t, v| t.silu(v)),
        ("softplus", |t, v| t.softplus(v)),
        ("exp", |t, v| t.exp(v)),
        ("sigmoid", |t, v| t.sigmoid(v)),
        ("scale", |t, v| t.scale(v, -2.5)),
    ];
    for (name, op) in ops {
        run(&mut out, name, vec![x.clone()], move |t, v| {
            let y = op(t, v[0])?;
            project(t, y, 11)
        });
    }
    for axis in 0..2 {
        run(
            &mut out,
            &format!("softmax axis {axis}"),
            vec![x.clone()],
            move |t, v| {
                let y = t.softmax(v[0], axis)?;
                project(t, y, 12)
            },
        );
    }
    let y = rand_tensor(&mut rng, &[3, 5]);
    run(&mut out, "mul/add/sub", vec![x.clone(), y], |t, v| {
        let m = t.mul(v[0], v[1])?;
        let a = t.add(m, v[0])?;
        let s = t.sub(a, v[1])?;
        project(t, s, 13)
    });
    let gain = rand_tensor(&mut rng, &[5]);
    let bias = rand_tensor(&mut rng, &[5]);
    run(
        &mut out,
        "layernorm",
        vec![x.clone(), gain, bias.clone()],
        |t, v| {
            let y = t.layernorm(v[0], v[1], v[2])?;
            project(t, y, 14)
        },
    );
    run(&mut out, "add_bias", vec![x, bias], |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        project(t, y, 15)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = rand_tensor(&mut rng, &[6, 3]);
    run(&mut out, "gather", vec![table], |t, v| {
        let y = t.gather(v[0], &[1, 4, 1, 0])?;
        project(t, y, 21)
    });
    let x = rand_tensor(&mut rng, &[4, 6]);
    run(&mut out, "narrow/concat", vec![x.clone()], |t, v| {
        let a = t.narrow(v[0], 1, 2)?;
        let b = t.narrow(v[0], 4, 2)?;
        let c = t.concat(&[b, a, b])?;
        project(t, c, 22)
    });
    run(&mut out, "slice_rows/reshape", vec![x], |t, v| {
        let s = t.slice_rows(v[0], 1, 2)?;
        let r = t.reshape(s, &[3, 4])?;
        project(t, r, 23)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (len, k, stride) in [(9, 3, 2), (16, 4, 4), (7, 1, 1)] {
        let x = rand_tensor(&mut rng, &[2, len, 3]);
        let w = rand_tensor(&mut rng, &[k, 3, 4]);
        run(
            &mut out,
            &format!("conv1d k{k} s{stride}"),
            vec![x, w.clone()],
            move |t, v| {
                let y = t.conv1d(v[0], v[1], stride)?;
                project(t, y, 31)
            },
        );
        let lc = (len - k) / stride + 1;
        let y = rand_tensor(&mut rng, &[2, lc, 4]);
        run(
            &mut out,
            &format!("conv1d_transposed k{k} s{stride}"),
            vec![y, w],
            move |t, v| {
                let o = t.conv1d_transposed(v[0], v[1], stride, len)?;
                project(t, o, 32)
            },
        );
    }
    let x = rand_tensor(&mut rng, &[6, 5]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    run(&mut out, "causal_depthwise_conv", vec![x, w], |t, v| {
        let y = t.causal_depthwise_conv(v[0], v[1])?;
        project(t, y, 33)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (l, e, n) = (7, 3, 4);
    let x = rand_tensor(&mut rng, &[l, e]);
    let dpre = rand_tensor(&mut rng, &[l, e]);
    let alog = rand_tensor(&mut rng, &[e, n]);
    let b = rand_tensor(&mut rng, &[l, n]);
    let c = rand_tensor(&mut rng, &[l, n]);
    run(
        &mut out,
        "selective_scan",
        vec![x, dpre, alog, b, c],
        |t, v| {
            let delta = t.softplus(v[1])?;
            let ea = t.exp(v[2])?;
            let a = t.scale(ea, -1.0)?;
            let y = t.selective_scan(v[0], delta, a, v[3], v[4])?;
            project(t, y, 41)
        },
    );
    let logits = rand_tensor(&mut rng, &[5, 6]);
    run(&mut out, "weighted_nll", vec![logits], |t, v| {
        t.weighted_nll(v[0], &[0, 5, 2, 3, 1], &[0.5, 0.0, 1.0, 2.0, 0.25])
    });
    out
}

pub fn layer_cfg() -> MfaConfig {
    MfaConfig {
        vocab_size: 12,
        d_model: 8,
        d_state: 4,
        d_expand: 16,
        n_heads: 2,
        n_blocks: 1,
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

fn run_layer(
    out: &mut Vec<Check>,
    name: &str,
    store: ParamStore,
    input: Tensor,
    f: impl Fn(&mut Tape, &BoundParams<'_>, Var) -> musdiff_core::model::Result<Var>,
) {
    let mut params: Vec<Tensor> = store.tensors().cloned().collect();
    params.push(input);
    run(out, name, params, |t, v| {
        let bound = BoundParams::from_vars(&store, v[..v.len() - 1].to_vec());
        let y = f(t, &bound, v[v.len() - 1]).map_err(numeric)?;
        project(t, y, 51)
    });
}

pub fn layers() -> Vec<Check> {
    let mut out = Vec::new();
    let cfg = layer_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    layers::init_mamba(&mut store, "m", &cfg, &mut rng);
    // larger steps than the default init so the recurrence carries signal
    store.insert("m.delta_bias", Tensor::full(&[cfg.d_expand], 0.3));
    let x = rand_tensor(&mut rng, &[8, 8]);
    run_layer(&mut out, "mamba layer", store, x, |t, p, x| {
        Ok(layers::mamba_layer(t, p, "m", x)?)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    layers::init_ffn(&mut store, "f", &cfg, &mut rng);
    run_layer(
        &mut out,
        "ffn",
        store,
        rand_tensor(&mut rng, &[6, 8]),
        |t, p, x| Ok(layers::ffn(t, p, "f", x)?),
    );
    let mut store = ParamStore::new();
    layers::init_attention(&mut store, "a", &cfg, &mut rng);
    run_layer(
        &mut out,
        "attention",
        store.clone(),
        rand_tensor(&mut rng, &[6, 8]),
        |t, p, x| Ok(layers::self_attention(t, p, "a", x, 2, None)?),
    );
    run_layer(
        &mut out,
        "attention with key mask",
        store,
        rand_tensor(&mut rng, &[6, 8]),
        |t, p, x| {
            let mask = layers::key_padding_mask(&[false, false, true, false, true, true]).unwrap();
            let m = t.constant(mask)?;
            Ok(layers::self_attention(t, p, "a", x, 2, Some(m))?)
        },
    );
    out
}

/// Whole-model check of the masked-token loss with `coords` sampled
/// coordinates per parameter tensor.
pub fn model(model: &Model, tokens: &[usize], step: usize, coords: usize) -> GradCheckReport {
    let mask = model.config().mask_token();
    let classes = model.config().num_classes();
    let params: Vec<Tensor> = model.params().tensors().cloned().collect();
    let opts = GradCheckOptions {
        max_coords_per_param: Some(coords),
        ..opts()
    };
    let targets: Vec<usize> = (0..tokens.len()).map(|i| (i * 7) % classes).collect();
    let weights: Vec<f64> = tokens
        .iter()
        .map(|&t| if t == mask { 0.2 } else { 0.0 })
        .collect();
    grad_check(
        |t, v| {
            let bound = BoundParams::from_vars(model.params(), v.to_vec());
            let logits = model
                .forward_bound(t, &bound, tokens, step)
                .map_err(numeric)?;
            t.weighted_nll(logits, &targets, &weights)
        },
        &params,
        &opts,
    )
    .unwrap()
}

/// Every block order of the small layer config.
pub fn small_models() -> Vec<Check> {
    let tokens = [3, 11, 11, 0, 5, 11, 7, 7, 1, 11, 2, 9, 11, 4, 10, 10];
    BlockOrder::ALL
        .iter()
        .map(|&order| {
            let m = Model::new(layer_cfg().with_order(order), 11).unwrap();
            (format!("model {order}"), model(&m, &tokens, 5, 6))
        })
        .collect()
}

/// The desk-scale model (D=64, N=8, two blocks, T=64) on a 32-token input
/// with PAD at the end.
pub fn desk_model() -> Check {
    let cfg = MfaConfig::desk(275, 64);
    let m = Model::new(cfg.clone(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pad = cfg.pad_token.unwrap();
    let tokens: Vec<usize> = (0..32)
        .map(|i| match i {
            28.. => pad,
            _ if rng.random_bool(0.4) => cfg.mask_token(),
            _ => rng.random_range(0..pad),
        })
        .collect();
    ("desk model".into(), model(&m, &tokens, 40, 3))
}
