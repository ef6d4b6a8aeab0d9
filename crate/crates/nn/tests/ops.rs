use vexel_nn::{
    grad_check, grad_check_with, Fault, FeedForward, GradCheckOptions, LayerNorm, Linear,
    MultiHeadAttention, NnError, OpKind, ParamId, ParamStore, Rng, Tape, Tensor, Var,
};

const TOL: f64 = 1e-4;

fn random_param(store: &mut ParamStore, rng: &mut Rng, name: &str, r: usize, c: usize) -> ParamId {
    store.add(name, Tensor::new(vec![r, c], rng.normals(r * c)).unwrap())
}

/// Contracts an output with a fixed random matrix so every output
/// coordinate contributes a distinct weight to the scalar loss.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, NnError> {
    let (r, c) = tape.dims(y);
    let w = tape.constant(r, c, Rng::new(seed, 99).normals(r * c))?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(store: &ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Result<Var, NnError>) -> f64 {
    let r = grad_check(f, store, 1e-5).unwrap();
    assert!(r.checked > 0);
    r.max_rel_error
}

#[test]
fn elementwise_ops_pass_gradcheck() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(1, 0);
    let a = random_param(&mut store, &mut rng, "a", 3, 4);
    let b = random_param(&mut store, &mut rng, "b", 3, 4);
    let row = random_param(&mut store, &mut rng, "row", 1, 4);
    let err = check(&store, |t, s| {
        let (a, b, row) = (t.param(s, a), t.param(s, b), t.param(s, row));
        let x = t.add(a, b)?;
        let x = t.sub(x, b)?;
        let x = t.mul(x, b)?;
        let x = t.add_row(x, row)?;
        let x = t.mul_row(x, row)?;
        let x = t.scale(x, 0.7);
        let x = t.add_scalar(x, 0.3);
        let g = t.gelu(x);
        let s1 = t.silu(x);
        let e = t.scale(x, 0.2);
        let e = t.exp(e);
        let c = t.clamp(a, -0.5, 0.5);
        let y = t.add(g, s1)?;
        let y = t.add(y, e)?;
        let y = t.add(y, c)?;
        probe(t, y, 2)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn matmul_and_slices_pass_gradcheck() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(2, 0);
    let a = random_param(&mut store, &mut rng, "a", 3, 5);
    let b = random_param(&mut store, &mut rng, "b", 5, 6);
    let err = check(&store, |t, s| {
        let (a, b) = (t.param(s, a), t.param(s, b));
        let y = t.matmul(a, b)?;
        let left = t.slice_cols(y, 1, 3)?;
        let right = t.slice_cols(y, 3, 3)?;
        let z = t.mul(left, right)?;
        let m = t.mean(z);
        let p = probe(t, y, 3)?;
        let out = t.add(m, p)?;
        Ok(out)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn normalization_and_softmax_pass_gradcheck() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(3, 0);
    let x = random_param(&mut store, &mut rng, "x", 4, 6);
    let ln = LayerNorm::new(&mut store, "ln", 6);
    store
        .set(ln.gamma, Tensor::new(vec![6], rng.normals(6)).unwrap())
        .unwrap();
    store
        .set(ln.beta, Tensor::new(vec![6], rng.normals(6)).unwrap())
        .unwrap();
    let err = check(&store, |t, s| {
        let x = t.param(s, x);
        let y = ln.forward(t, s, x)?;
        let z = t.softmax(y);
        let plain = t.layer_norm(x, None, None, 1e-5)?;
        let w = t.add(z, plain)?;
        probe(t, w, 4)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_with_rope_passes_gradcheck() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(4, 0);
    let x = random_param(&mut store, &mut rng, "x", 5, 8);
    let ctx = random_param(&mut store, &mut rng, "ctx", 3, 6);
    let sa = MultiHeadAttention::new(&mut store, "sa", 8, 8, 2, true, &mut rng).unwrap();
    let ca = MultiHeadAttention::new(&mut store, "ca", 8, 6, 2, false, &mut rng).unwrap();
    let err = check(&store, |t, s| {
        let (x, ctx) = (t.param(s, x), t.param(s, ctx));
        let h = sa.forward(t, s, x, x)?;
        let h = ca.forward(t, s, h, ctx)?;
        probe(t, h, 5)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn losses_pass_gradcheck() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(5, 0);
    let p = random_param(&mut store, &mut rng, "p", 4, 3);
    let lv = random_param(&mut store, &mut rng, "lv", 4, 3);
    let target = rng.normals(12);
    let mask = [true, false, true, true];
    let err = check(&store, |t, s| {
        let (p, lv) = (t.param(s, p), t.param(s, lv));
        let a = t.masked_mse(p, &target, Some(&mask))?;
        let b = t.kl_standard_normal(p, lv, Some(&mask))?;
        t.add(a, b)
    });
    assert!(err < TOL, "{err}");
}

fn tiny_block(store: &mut ParamStore, rng: &mut Rng) -> Vec<Block> {
    (0..2)
        .map(|i| {
            (
                LayerNorm::new(store, &format!("b{i}.ln1"), 8),
                MultiHeadAttention::new(store, &format!("b{i}.attn"), 8, 8, 2, true, rng).unwrap(),
                LayerNorm::new(store, &format!("b{i}.ln2"), 8),
                FeedForward::new(store, &format!("b{i}.ff"), 8, 16, rng),
            )
        })
        .collect()
}

type Block = (LayerNorm, MultiHeadAttention, LayerNorm, FeedForward);

fn block_loss<'a>(
    blocks: &'a [Block],
    x: ParamId,
    target: &'a [f64],
) -> impl Fn(&mut Tape, &ParamStore) -> Result<Var, NnError> + 'a {
    move |t, s| {
        let mut h = t.param(s, x);
        for (ln1, attn, ln2, ff) in blocks {
            let n = ln1.forward(t, s, h)?;
            let a = attn.forward(t, s, n, n)?;
            h = t.add(h, a)?;
            let n = ln2.forward(t, s, h)?;
            let f = ff.forward(t, s, n)?;
            h = t.add(h, f)?;
        }
        t.masked_mse(h, target, None)
    }
}

#[test]
fn two_layer_attention_block_passes_and_mutants_fail() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(6, 0);
    let x = random_param(&mut store, &mut rng, "x", 4, 8);
    let blocks = tiny_block(&mut store, &mut rng);
    let target = rng.normals(32);
    let f = block_loss(&blocks, x, &target);
    let clean = grad_check(&f, &store, 1e-5).unwrap();
    assert!(clean.max_rel_error < TOL, "{clean:?}");
    for op in [
        OpKind::Attention,
        OpKind::LayerNorm,
        OpKind::MatMul,
        OpKind::Gelu,
        OpKind::Rope,
    ] {
        let opts = GradCheckOptions {
            fault: Some(Fault { op, factor: 1.5 }),
            ..GradCheckOptions::default()
        };
        let bad = grad_check_with(&f, &store, &opts).unwrap();
        assert!(bad.max_rel_error > 1e-2, "{op:?}: {bad:?}");
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut t = Tape::new();
    let x = t.constant(1, 5, vec![2.5; 5]).unwrap();
    let y = t.softmax(x);
    assert!(t.value(y).iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let mut rng = Rng::new(7, 0);
    let x = t
        .constant(6, 9, rng.normals(54).iter().map(|v| v * 30.0).collect())
        .unwrap();
    let y = t.softmax(x);
    for row in t.value(y).chunks(9) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut t = Tape::new();
    let mut rng = Rng::new(8, 0);
    let x = t
        .constant(
            5,
            16,
            rng.normals(80).iter().map(|v| 3.0 * v + 1.0).collect(),
        )
        .unwrap();
    let y = t.layer_norm(x, None, None, 0.0).unwrap();
    for row in t.value(y).chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
    }
}

#[test]
fn rope_is_identity_at_position_zero() {
    let mut t = Tape::new();
    let data = Rng::new(9, 0).normals(8);
    let x = t.constant(1, 8, data.clone()).unwrap();
    let y = t.rope(x, 2).unwrap();
    assert_eq!(t.value(y), data.as_slice());
}

#[test]
fn rope_logits_depend_only_on_offset() {
    let (heads, d, n) = (2, 8, 12);
    let mut rng = Rng::new(10, 0);
    let (qrow, krow) = (rng.normals(d), rng.normals(d));
    let mut t = Tape::new();
    let q = t.constant(n, d, qrow.repeat(n)).unwrap();
    let k = t.constant(n, d, krow.repeat(n)).unwrap();
    let (q, k) = (t.rope(q, heads).unwrap(), t.rope(k, heads).unwrap());
    let (qv, kv) = (t.value(q).to_vec(), t.value(k).to_vec());
    let logit = |m: usize, j: usize| -> f64 { (0..d).map(|c| qv[m * d + c] * kv[j * d + c]).sum() };
    for base in [0usize, 3, 7] {
        for off_m in 0..3 {
            for off_n in 0..3 {
                let (m, j) = (base + off_m, base + off_n);
                let (m0, j0) = (off_m, off_n);
                assert!((logit(m, j) - logit(m0, j0)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn shape_errors_are_reported() {
    let mut t = Tape::new();
    let a = t.constant(2, 3, vec![0.0; 6]).unwrap();
    let b = t.constant(2, 3, vec![0.0; 6]).unwrap();
    assert!(matches!(t.matmul(a, b), Err(NnError::ShapeMismatch { .. })));
    let c = t.constant(3, 2, vec![0.0; 6]).unwrap();
    assert!(t.add(a, c).is_err());
    assert!(t.attention(a, a, a, 2).is_err());
    assert!(t.masked_mse(a, &[0.0; 5], None).is_err());
}

#[test]
fn training_step_is_a_pure_function() {
    use vexel_nn::{clip_grad_norm, AdamW, OptimizerState};
    let run = || {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(11, 0);
        let x = random_param(&mut store, &mut rng, "x", 4, 8);
        let blocks = tiny_block(&mut store, &mut rng);
        let target = rng.normals(32);
        let f = block_loss(&blocks, x, &target);
        let mut state = OptimizerState::new(&store);
        let mut losses = Vec::new();
        for _ in 0..5 {
            let mut t = Tape::new();
            let l = f(&mut t, &store).unwrap();
            losses.push(t.scalar(l));
            let mut g = t.backward(l, &store);
            clip_grad_norm(&mut g, 2.0);
            AdamW::default()
                .step(&mut store, &g, &mut state, 1e-2)
                .unwrap();
        }
        (losses, store, state)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert!(a.0.last() < a.0.first());
}

#[test]
fn linear_rejects_wrong_width() {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "l", 3, 2, true, &mut Rng::new(0, 0));
    let mut t = Tape::new();
    let x = t.constant(1, 4, vec![0.0; 4]).unwrap();
    assert!(lin.forward(&mut t, &store, x).is_err());
}
