//! Finite-difference checks for every differentiable op, in double precision.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use tapegrad::conv::{conv2d_reference, conv_transpose2d_reference, ConvSpec};
use tapegrad::fd::{fd_grad_tensor, max_rel_err};
use tapegrad::{Graph, Var};

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..shape.iter().product::<usize>()).map(|_| dist.sample(&mut rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Checks d(scalar out)/d(every input) against central differences.
fn check_op(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, inputs: &[ArrayD<f64>]) {
    // analytic
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let probe = randn(g.shape(out), 999); // project output to a scalar
    let pv = g.constant(probe.clone());
    let prod = g.mul(out, pv);
    let loss = g.mean_all(prod);
    let mut grads = g.backward(loss);

    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.take(vars[i]).expect("input should receive a gradient");
        let mut eval = |xi: &ArrayD<f64>| -> f64 {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, orig)| g.leaf(if j == i { xi.clone() } else { orig.clone() }, false))
                .collect();
            let out = build(&mut g, &vars);
            let pv = g.constant(probe.clone());
            let prod = g.mul(out, pv);
            let loss = g.mean_all(prod);
            g.value(loss).iter().next().copied().unwrap()
        };
        let fd = fd_grad_tensor(&mut eval, x, H);
        let err = max_rel_err(&analytic, &fd);
        assert!(err < TOL, "input {i}: rel err {err}");
    }
}

#[test]
fn add_sub_mul_scale() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    check_op(|g, v| g.add(v[0], v[1]), &[a.clone(), b.clone()]);
    check_op(|g, v| g.sub(v[0], v[1]), &[a.clone(), b.clone()]);
    check_op(|g, v| g.mul(v[0], v[1]), &[a.clone(), b.clone()]);
    check_op(|g, v| g.scale(v[0], -1.7), &[a]);
}

#[test]
fn add_bcast_suffix() {
    let x = randn(&[2, 5, 3], 3);
    let b = randn(&[5, 3], 4);
    check_op(|g, v| g.add_bcast(v[0], v[1]), &[x, b]);
    let x = randn(&[4, 6], 5);
    let b = randn(&[6], 6);
    check_op(|g, v| g.add_bcast(v[0], v[1]), &[x, b]);
}

#[test]
fn matmul_and_linear() {
    let a = randn(&[4, 3], 7);
    let b = randn(&[3, 5], 8);
    check_op(|g, v| g.matmul(v[0], v[1]), &[a, b]);

    let x = randn(&[2, 4, 3], 9);
    let w = randn(&[3, 6], 10);
    let bias = randn(&[6], 11);
    check_op(|g, v| g.linear(v[0], v[1], Some(v[2])), &[x, w, bias]);
}

#[test]
fn activations() {
    let x = randn(&[3, 7], 12);
    check_op(|g, v| g.sigmoid(v[0]), &[x.clone()]);
    check_op(|g, v| g.gelu(v[0]), &[x]);
    let x4 = randn(&[2, 3, 4, 4], 13);
    let alpha = randn(&[3], 14).mapv(f64::abs);
    check_op(|g, v| g.prelu(v[0], v[1]), &[x4, alpha]);
}

#[test]
fn softmax_and_layer_norm() {
    let x = randn(&[2, 3, 5], 15);
    check_op(|g, v| g.softmax_last(v[0]), &[x.clone()]);
    let gamma = randn(&[5], 16);
    let beta = randn(&[5], 17);
    check_op(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), &[x, gamma, beta]);
}

#[test]
fn attention_pipeline() {
    let q = randn(&[2, 2, 4, 3], 18);
    let k = randn(&[2, 2, 4, 3], 19);
    let v = randn(&[2, 2, 4, 3], 20);
    check_op(|g, vars| g.attn_scores(vars[0], vars[1], 0.7), &[q.clone(), k.clone()]);
    let p = {
        let mut g = Graph::<f64>::new();
        let qv = g.leaf(q.clone(), false);
        let kv = g.leaf(k.clone(), false);
        let s = g.attn_scores(qv, kv, 0.7);
        let p = g.softmax_last(s);
        g.value(p).clone()
    };
    check_op(|g, vars| g.attn_context(vars[0], vars[1]), &[p, v.clone()]);

    // full block: scores -> softmax -> context
    check_op(
        |g, vars| {
            let s = g.attn_scores(vars[0], vars[1], 0.58);
            let p = g.softmax_last(s);
            g.attn_context(p, vars[2])
        },
        &[q, k, v],
    );
}

#[test]
fn heads_and_patches_roundtrip() {
    let x = randn(&[2, 4, 6], 21);
    check_op(|g, v| g.split_heads(v[0], 3), &[x.clone()]);
    check_op(
        |g, v| {
            let h = g.split_heads(v[0], 2);
            g.merge_heads(h)
        },
        &[x.clone()],
    );
    // merge(split(x)) == x
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone(), false);
    let h = g.split_heads(xv, 2);
    let m = g.merge_heads(h);
    assert_eq!(g.value(m), &x);

    let img = randn(&[2, 3, 8, 8], 22);
    check_op(|g, v| g.patchify(v[0], 2), &[img.clone()]);
    let mut g = Graph::<f64>::new();
    let iv = g.leaf(img.clone(), false);
    let t = g.patchify(iv, 2);
    let back = g.unpatchify(t, 2, 3, 8, 8);
    assert_eq!(g.value(back), &img);
    let tokens = randn(&[2, 16, 12], 23);
    check_op(|g, v| g.unpatchify(v[0], 2, 3, 8, 8), &[tokens]);
}

#[test]
fn reductions() {
    let a = randn(&[3, 4], 24);
    let b = randn(&[3, 4], 25);
    check_op(|g, v| g.mean_sq_diff(v[0], v[1]), &[a.clone(), b]);
    check_op(|g, v| g.mean_all(v[0]), &[a.clone()]);
    check_op(|g, v| g.reshape(v[0], &[2, 6]), &[a.clone()]);

    let c = randn(&[3, 4], 26);
    check_op(
        |g, v| {
            let l1 = g.mean_all(v[0]);
            let l2 = g.mean_sq_diff(v[0], v[1]);
            g.weighted_sum(&[l1, l2], &[0.81, 1.0])
        },
        &[a, c],
    );
}

#[test]
fn conv2d_matches_reference_and_fd() {
    let spec = ConvSpec { kernel: 3, stride: 2, pad: 1 };
    let x = randn(&[2, 3, 7, 7], 27);
    let w = randn(&[4, 3, 3, 3], 28);
    let b = randn(&[4], 29);

    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone(), false);
    let wv = g.leaf(w.clone(), false);
    let bv = g.leaf(b.clone(), false);
    let y = g.conv2d(xv, wv, bv, spec);
    let reference = conv2d_reference(
        x.view().into_dimensionality().unwrap(),
        w.view().into_dimensionality().unwrap(),
        b.as_slice().unwrap(),
        spec,
    );
    let diff = g.value(y) - &reference.into_dyn();
    assert!(diff.iter().all(|d| d.abs() < 1e-10), "im2col path disagrees with direct convolution");

    check_op(|g, v| g.conv2d(v[0], v[1], v[2], spec), &[x, w, b]);
}

#[test]
fn conv_transpose2d_matches_reference_and_fd() {
    for (spec, outpad) in [
        (ConvSpec { kernel: 3, stride: 2, pad: 1 }, 1),
        (ConvSpec { kernel: 3, stride: 1, pad: 1 }, 0),
    ] {
        let x = randn(&[2, 3, 5, 5], 30);
        let w = randn(&[3, 4, 3, 3], 31);
        let b = randn(&[4], 32);

        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone(), false);
        let wv = g.leaf(w.clone(), false);
        let bv = g.leaf(b.clone(), false);
        let y = g.conv_transpose2d(xv, wv, bv, spec, outpad);
        let reference = conv_transpose2d_reference(
            x.view().into_dimensionality().unwrap(),
            w.view().into_dimensionality().unwrap(),
            b.as_slice().unwrap(),
            spec,
            outpad,
        );
        let diff = g.value(y) - &reference.into_dyn();
        assert!(diff.iter().all(|d| d.abs() < 1e-10), "gemm path disagrees with direct transposed convolution");

        check_op(|g, v| g.conv_transpose2d(v[0], v[1], v[2], spec, outpad), &[x, w, b]);
    }
}

#[test]
fn grad_accumulates_over_shared_input() {
    // y = x*x + x used twice: dy/dx = 2x + 1
    let x = randn(&[4], 33);
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone(), true);
    let sq = g.mul(xv, xv);
    let sum = g.add(sq, xv);
    let loss = g.mean_all(sum);
    let mut grads = g.backward(loss);
    let got = grads.take(xv).unwrap();
    let want = x.mapv(|v| (2.0 * v + 1.0) / 4.0);
    assert!(max_rel_err(&got, &want) < 1e-12);
}

#[test]
fn inference_graph_records_no_backward() {
    let x = randn(&[2, 3], 34);
    let mut g = Graph::<f64>::inference();
    let xv = g.leaf(x.clone(), true); // downgraded: inference mode
    assert!(!g.requires_grad(xv));
    let y = g.sigmoid(xv);
    assert!(!g.requires_grad(y));
}
