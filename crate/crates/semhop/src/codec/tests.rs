use super::*;
use crate::testutil::{mini_deepjscc_config, mini_vitsc_config, random_batch};
use ndarray::{Array1, Array2};

#[test]
fn cbr_accounting_for_both_paper_rates() {
    let mut cfg = ModelConfig::default();
    cfg.cbr = Ratio::new(1, 6);
    assert_eq!(cfg.pixels(), 3072);
    assert_eq!(cfg.symbols(), 512);
    assert_eq!(2 * cfg.symbols() / cfg.tokens(), 16); // head reals per token

    cfg.cbr = Ratio::new(1, 12);
    assert_eq!(cfg.symbols(), 256);
    assert_eq!(2 * cfg.symbols() / cfg.tokens(), 8);

    cfg.arch = Arch::Deepjscc;
    cfg.cbr = Ratio::new(1, 6);
    assert_eq!(cfg.symbols(), 512); // CBR parity across architectures
}

#[test]
fn config_validation_rejects_bad_shapes() {
    let mut cfg = ModelConfig::default();
    cfg.patch_size = 5; // 32 % 5 != 0
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    let mut cfg = ModelConfig::default();
    cfg.enc_layers = 3; // paper-fixed at 4
    assert!(cfg.validate().is_err());

    let mut cfg = ModelConfig::default();
    cfg.cbr = Ratio::new(1, 1000); // k = 3, 2k not divisible by 64 tokens
    assert!(cfg.validate().is_err());

    ModelConfig::default().validate().unwrap();
}

#[test]
fn seeded_build_is_bitwise_deterministic() {
    for cfg in [mini_vitsc_config(), mini_deepjscc_config()] {
        let (_, a) = build_codec(&cfg, 42).unwrap();
        let (_, b) = build_codec(&cfg, 42).unwrap();
        let (_, c) = build_codec(&cfg, 43).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (name, value) in a.params.iter() {
            assert_eq!(value, b.params.get(name), "{name} differs across identical seeds");
        }
        let any_diff = a.params.iter().any(|(name, value)| value != c.params.get(name));
        assert!(any_diff, "different seeds should give different parameters");
    }
}

#[test]
fn power_normalize_closed_form() {
    // (1,0,1,0,1,0,1,0): k = 4, every symbol magnitude 1, total power 4
    let raw = Array1::from_vec(vec![1.0f64, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    let symbols = power_normalize(raw.view()).unwrap();
    assert_eq!(symbols.len(), 4);
    for s in &symbols {
        assert!((s.norm() - 1.0).abs() < 1e-12);
    }
    let total: f64 = symbols.iter().map(|s| s.norm_sqr()).sum();
    assert!((total - 4.0).abs() < 1e-12);
}

#[test]
fn power_normalize_fixed_point_and_scale_invariance() {
    // already satisfying sum |x|^2 = k: returned unchanged
    let raw = Array1::from_vec(vec![1.0f64, 0.0, -1.0, 0.0]);
    let symbols = power_normalize(raw.view()).unwrap();
    assert_eq!(symbols[0].re, 1.0);
    assert_eq!(symbols[1].re, -1.0);

    let raw = Array1::from_vec(vec![0.3f64, -1.2, 0.8, 2.1, -0.4, 0.9]);
    let scaled = raw.mapv(|v| v * 5.0);
    let a = power_normalize(raw.view()).unwrap();
    let b = power_normalize(scaled.view()).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).norm() < 1e-12);
    }
}

#[test]
fn power_normalize_rejects_zero_input() {
    let raw = Array1::from_vec(vec![0.0f64; 8]);
    assert!(matches!(power_normalize(raw.view()), Err(Error::Numeric(_))));
    let odd = Array1::from_vec(vec![1.0f64; 3]);
    assert!(matches!(power_normalize(odd.view()), Err(Error::Argument(_))));
}

#[test]
fn op_power_normalize_matches_vector_form_and_fd() {
    use tapegrad::fd::{fd_grad_tensor, max_rel_err};
    let x = Array2::from_shape_fn((3, 8), |(i, j)| 0.3 + 0.17 * (i as f64 + 1.0) * (j as f64 - 3.5));
    let mut g = tapegrad::Graph::<f64>::new();
    let xv = g.leaf(x.clone().into_dyn(), true);
    let y = op_power_normalize(&mut g, xv);
    for (row_in, row_out) in x.rows().into_iter().zip(
        g.value(y).view().into_dimensionality::<ndarray::Ix2>().unwrap().rows(),
    ) {
        let expect = power_normalize(row_in.view()).unwrap();
        for (j, c) in expect.iter().enumerate() {
            assert!((row_out[2 * j] - c.re).abs() < 1e-12);
            assert!((row_out[2 * j + 1] - c.im).abs() < 1e-12);
        }
    }

    // gradient against central differences through a scalar projection
    let probe = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f64 * 0.7).sin());
    let loss = |x: &ndarray::ArrayD<f64>| -> (f64, Option<ndarray::ArrayD<f64>>) {
        let mut g = tapegrad::Graph::<f64>::new();
        let xv = g.leaf(x.clone(), true);
        let y = op_power_normalize(&mut g, xv);
        let pv = g.constant(probe.clone().into_dyn());
        let prod = g.mul(y, pv);
        let l = g.mean_all(prod);
        let value = g.value(l).iter().next().copied().unwrap();
        let mut grads = g.backward(l);
        (value, grads.take(xv))
    };
    let xd = x.into_dyn();
    let (_, analytic) = loss(&xd);
    let fd = fd_grad_tensor(&mut |p| loss(p).0, &xd, 1e-6);
    let err = max_rel_err(&analytic.unwrap(), &fd);
    assert!(err < 1e-4, "power-normalize gradient rel err {err}");
}

#[test]
fn encode_satisfies_power_constraint() {
    for cfg in [mini_vitsc_config(), mini_deepjscc_config()] {
        let (codec, cp) = build_codec(&cfg, 7).unwrap();
        let batch = random_batch(32, &cfg, 2);
        let symbols = encode(&codec, &cp, &batch).unwrap();
        assert_eq!(symbols.k(), cfg.symbols());
        assert_eq!(symbols.batch(), 32);
        symbols.validate_power(1e-5).unwrap();
    }
}

#[test]
fn encode_rejects_shape_mismatch() {
    let cfg = mini_vitsc_config();
    let (codec, cp) = build_codec(&cfg, 7).unwrap();
    let wrong = random_batch(2, &ModelConfig::default(), 3); // 32x32 into an 8x8 model
    assert!(matches!(encode(&codec, &cp, &wrong), Err(Error::Argument(_))));
}

#[test]
fn decode_is_sigmoid_bounded_for_wild_inputs() {
    let cfg = mini_vitsc_config();
    let (codec, cp) = build_codec(&cfg, 3).unwrap();
    let k = cfg.symbols();
    // not power-normalized, deliberately huge: decode must still be in [0,1]
    let wild = Array2::from_shape_fn((4, 2 * k), |(i, j)| (i as f32 - 1.5) * (j as f32 + 1.0) * 7.3);
    let received = SymbolBatch::from_interleaved(wild).unwrap();
    let out = decode(&codec, &cp, &received).unwrap();
    assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));

    let bad = SymbolBatch::from_interleaved(Array2::zeros((1, 2 * k + 2))).unwrap();
    assert!(matches!(decode(&codec, &cp, &bad), Err(Error::Argument(_))));
}

#[test]
fn untrained_roundtrip_psnr_is_finite() {
    let cfg = mini_vitsc_config();
    let (codec, cp) = build_codec(&cfg, 11).unwrap();
    let batch = random_batch(4, &cfg, 9);
    let symbols = encode(&codec, &cp, &batch).unwrap();
    let out = decode(&codec, &cp, &symbols).unwrap();
    let psnr = crate::harness::psnr(&batch, &out).unwrap();
    assert!(psnr.mean_db.is_finite());
    assert!(psnr.mean_db < 30.0, "untrained codec should not be near-lossless");
}

#[test]
fn inference_is_pure_and_deterministic() {
    for cfg in [mini_vitsc_config(), mini_deepjscc_config()] {
        let (codec, cp) = build_codec(&cfg, 5).unwrap();
        let batch = random_batch(3, &cfg, 4);
        let s1 = encode(&codec, &cp, &batch).unwrap();
        let s2 = encode(&codec, &cp, &batch).unwrap();
        assert_eq!(s1.interleaved(), s2.interleaved());
        let d1 = decode(&codec, &cp, &s1).unwrap();
        let d2 = decode(&codec, &cp, &s1).unwrap();
        assert_eq!(d1.data, d2.data);
    }
}

#[test]
fn symbol_batch_complex_round_trip() {
    let x = Array2::from_shape_fn((2, 6), |(i, j)| (i as f32 + 1.0) * (j as f32 - 2.5));
    let sb = SymbolBatch::from_interleaved(x.clone()).unwrap();
    assert_eq!(sb.k(), 3);
    let back = SymbolBatch::from_complex(sb.as_complex().view());
    assert_eq!(back.interleaved(), &x);
}

#[test]
fn miniature_vitsc_gradcheck_every_parameter() {
    use tapegrad::fd::check_grads;
    use tapegrad::nn::collect_grads;

    let cfg = mini_vitsc_config();
    let codec = AnyCodec::from_config(&cfg).unwrap();
    let params = codec.init_params::<f64>(21);
    let batch = random_batch(2, &cfg, 31).cast::<f64>();

    let run = |p: &Params<f64>| -> (f64, Option<indexmap::IndexMap<String, ArrayD<f64>>>) {
        let mut g = tapegrad::Graph::<f64>::new();
        let pv = g.register_params(p, true);
        let sv = g.constant(batch.data.clone().into_dyn());
        let symbols = codec.encode_on(&mut g, &pv, sv);
        let recon = codec.decode_on(&mut g, &pv, symbols);
        let loss = g.mean_sq_diff(recon, sv);
        let value = g.value(loss).iter().next().copied().unwrap();
        let mut grads = g.backward(loss);
        let collected = collect_grads(&mut grads, &pv, p);
        (value, Some(collected))
    };

    let (_, analytic) = run(&params);
    let analytic = analytic.unwrap();
    let mut eval = |p: &Params<f64>| run(p).0;
    let report = check_grads(&mut eval, &params, &analytic, 1e-5);
    assert!(
        report.max_rel_err < 1e-4,
        "miniature ViT gradcheck failed over {} params: {report:?}",
        params.num_elements()
    );
}

#[test]
fn deepjscc_gradient_spot_check() {
    use tapegrad::fd::check_grads;
    use tapegrad::nn::collect_grads;

    let cfg = mini_deepjscc_config();
    let codec = AnyCodec::from_config(&cfg).unwrap();
    let params = codec.init_params::<f64>(13);
    let batch = random_batch(2, &cfg, 17).cast::<f64>();

    let run = |p: &Params<f64>| -> (f64, indexmap::IndexMap<String, ArrayD<f64>>) {
        let mut g = tapegrad::Graph::<f64>::new();
        let pv = g.register_params(p, true);
        let sv = g.constant(batch.data.clone().into_dyn());
        let symbols = codec.encode_on(&mut g, &pv, sv);
        let recon = codec.decode_on(&mut g, &pv, symbols);
        let loss = g.mean_sq_diff(recon, sv);
        let value = g.value(loss).iter().next().copied().unwrap();
        let mut grads = g.backward(loss);
        (value, collect_grads(&mut grads, &pv, p))
    };

    let (_, analytic_full) = run(&params);
    let mut subset = Params::<f64>::new();
    for name in ["enc.conv0.b", "enc.act0.a", "dec.deconv4.b", "dec.act0.a"] {
        subset.insert(name, params.get(name).clone());
    }
    let mut analytic = indexmap::IndexMap::new();
    for (name, _) in subset.iter() {
        analytic.insert(name.clone(), analytic_full.get(name).unwrap().clone());
    }
    let base = params.clone();
    let mut eval = |p: &Params<f64>| -> f64 {
        let mut full = base.clone();
        for (name, value) in p.iter() {
            *full.get_mut(name) = value.clone();
        }
        run(&full).0
    };
    let report = check_grads(&mut eval, &subset, &analytic, 1e-5);
    assert!(report.max_rel_err < 1e-4, "deepjscc spot gradcheck: {report:?}");
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = mini_vitsc_config();
    let (_, cp) = build_codec(&cfg, 19).unwrap();
    let meta = CheckpointMeta {
        phase: "single_hop".into(),
        train: Some(serde_json::json!({"epochs": 3})),
        loss_history: vec![0.5, 0.4, 0.3],
        epochs: 3,
    };
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &cp, &meta).unwrap();

    let (_, loaded, loaded_meta) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config, cfg);
    assert_eq!(loaded_meta.phase, "single_hop");
    assert_eq!(loaded_meta.loss_history, meta.loss_history);
    for (name, value) in cp.params.iter() {
        assert_eq!(value, loaded.params.get(name), "{name} not preserved");
    }

    // mismatched config <-> parameter shapes must be rejected
    let tampered = CodecParams {
        config: ModelConfig { embed_dim: 16, ..cfg.clone() },
        params: cp.params.clone(),
        version: CHECKPOINT_VERSION,
    };
    tampered.config.validate().unwrap();
    let bad_path = dir.path().join("bad.bin");
    save_checkpoint(&bad_path, &tampered, &meta).unwrap();
    assert!(matches!(load_checkpoint(&bad_path), Err(Error::Checkpoint(_))));

    // wrong magic
    std::fs::write(dir.path().join("junk.bin"), b"JUNKJUNKrest").unwrap();
    assert!(matches!(load_checkpoint(&dir.path().join("junk.bin")), Err(Error::Checkpoint(_))));
}
