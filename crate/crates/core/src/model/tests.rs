use super::*;
use crate::attention::AttentionMode;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn tiny(mode: AttentionMode, n_sinks: usize) -> ModelConfig {
    ModelConfig {
        mode,
        n_sinks,
        max_seq_len: 32,
        ..ModelConfig::tiny()
    }
}

fn ids(n: usize, salt: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 37 + salt * 11 + 5) % 256).collect()
}

#[test]
fn same_seed_same_parameters() {
    let a = build_model::<f64>(&ModelConfig::tiny(), 7).unwrap();
    let b = build_model::<f64>(&ModelConfig::tiny(), 7).unwrap();
    let c = build_model::<f64>(&ModelConfig::tiny(), 8).unwrap();
    for ((pa, pb), pc) in a.params().iter().zip(b.params()).zip(c.params()) {
        assert_eq!(pa.0, pb.0);
        assert_eq!(pa.2.data(), pb.2.data());
        if pa.1 == ParamKind::Matrix {
            assert_ne!(pa.2.data(), pc.2.data());
        }
    }
}

#[test]
fn tiny_parameter_count_matches_closed_form() {
    let cfg = ModelConfig::tiny();
    let m = Model::<f32>::new(&cfg).unwrap();
    let nonemb: usize = m
        .params()
        .iter()
        .filter(|(_, k, _)| *k != ParamKind::Embedding)
        .map(|(_, _, t)| t.numel())
        .sum();
    // Per layer: q, k, v, o (64x64 each), fc and proj (64x256 each), two LNs.
    let per_layer = 4 * 64 * 64 + 2 * 64 * 256 + 4 * 64;
    assert_eq!(nonemb, 2 * per_layer + 4 * 64);
    assert_eq!(cfg.nonembedding_params(), nonemb);
    assert_eq!(m.num_params(), cfg.total_params());
    assert_eq!(cfg.embedding_params(), 256 * 64);
}

#[test]
fn table_presets_have_advertised_sizes() {
    for (name, size) in [("0.7b", 0.7e9), ("1.4b", 1.4e9), ("2.7b", 2.7e9)] {
        let p = ModelConfig::preset(name).unwrap();
        p.config.validate().unwrap();
        let n = p.config.nonembedding_params() as f64;
        assert!((n / size - 1.0).abs() < 0.05, "{name}: {n}");
    }
    assert_eq!(ModelConfig::preset("1.4B").unwrap().max_lr, 4e-4);
    assert!(ModelConfig::preset("7b").is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ModelConfig::tiny();
    cfg.d_head = 15;
    assert!(Model::<f32>::new(&cfg).is_err());
    let mut cfg = ModelConfig::tiny();
    cfg.n_layers = 0;
    assert!(Model::<f32>::new(&cfg).is_err());
}

#[test]
fn forward_shapes_and_errors() {
    let m = Model::<f64>::new(&tiny(AttentionMode::Sa, 0)).unwrap();
    assert_eq!(m.forward(&ids(5, 0)).unwrap().shape(), &[5, 256]);
    assert_eq!(m.forward_batch(&ids(12, 0), 3, 4).unwrap().shape(), &[3, 4, 256]);
    assert!(matches!(m.forward(&[1, 256]), Err(Error::TokenOutOfRange { id: 256, vocab: 256 })));
    assert!(m.forward(&ids(33, 0)).is_err());
    assert!(m.forward(&[]).is_err());
}

#[test]
fn zero_sinks_match_the_sink_free_path_bitwise() {
    for mode in [AttentionMode::Sa, AttentionMode::Xsa] {
        let m = Model::<f64>::new(&tiny(mode, 0)).unwrap();
        let x = ids(24, 1);
        let a = m.forward_batch(&x, 2, 12).unwrap();
        let b = m.forward_sink_free(&x, 2, 12).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn sinks_are_appended_to_the_initialization() {
    let plain = Model::<f64>::new(&tiny(AttentionMode::Sa, 0)).unwrap();
    let sunk = Model::<f64>::new(&tiny(AttentionMode::Sa, 2)).unwrap();
    assert_eq!(sunk.sinks.shape(), &[2, 64]);
    let names: Vec<String> = sunk.params().into_iter().map(|p| p.0).collect();
    assert!(names.contains(&"sinks".to_string()));
    assert_eq!(names.len(), plain.params().len() + 1);
    assert_eq!(plain.wte.data(), sunk.wte.data());
    assert_eq!(plain.blocks[1].ffn.w_proj.data(), sunk.blocks[1].ffn.w_proj.data());
    // Sinks change the logits and are stripped from them.
    let x = ids(6, 2);
    let a = plain.forward(&x).unwrap();
    let b = sunk.forward(&x).unwrap();
    assert_eq!(b.shape(), &[6, 256]);
    assert_ne!(a.data(), b.data());
}

#[test]
fn end_to_end_causality_with_and_without_sinks() {
    for mode in [AttentionMode::Sa, AttentionMode::Xsa] {
        for sinks in [0, 2] {
            let cfg = ModelConfig {
                n_layers: 3,
                ..tiny(mode, sinks)
            };
            let m = Model::<f64>::new(&cfg).unwrap();
            let x = ids(10, 3);
            let base = m.forward(&x).unwrap();
            let p = 4;
            let mut y = x.clone();
            y[p] = (y[p] + 1) % 256;
            let moved = m.forward(&y).unwrap();
            for i in 0..10 {
                let (a, b) = (&base.data()[i * 256..(i + 1) * 256], &moved.data()[i * 256..(i + 1) * 256]);
                if i < p {
                    assert_eq!(a, b, "{mode} sinks={sinks} pos {i}");
                } else if i == p {
                    assert_ne!(a, b);
                }
            }
        }
    }
}

#[test]
fn zeroed_output_projections_leave_the_residual_path() {
    let mut m = Model::<f64>::new(&tiny(AttentionMode::Xsa, 0)).unwrap();
    for b in &mut m.blocks {
        b.attn.w_o = Tensor::zeros(b.attn.w_o.shape());
        b.ffn.w_proj = Tensor::zeros(b.ffn.w_proj.shape());
    }
    let x = ids(7, 4);
    let logits = m.forward(&x).unwrap();
    let h = m.wte.embedding(&x, &[7]).unwrap();
    let h = m.ln_emb.forward(&h).unwrap();
    let h = m.ln_f.forward(&h).unwrap();
    let expect = h.matmul_t(&m.wte).unwrap();
    assert_eq!(logits.data(), expect.data());
}

#[test]
fn mode_switch_only_matters_when_outputs_overlap_values() {
    let mut m = Model::<f64>::new(&tiny(AttentionMode::Sa, 0)).unwrap();
    let x = ids(9, 5);
    let sa = m.forward(&x).unwrap();
    m.set_mode(AttentionMode::Xsa);
    let xsa = m.forward(&x).unwrap();
    assert_ne!(sa.data(), xsa.data());

    // With every value vector zero, rejection has nothing to remove.
    for b in &mut m.blocks {
        b.attn.w_v = Tensor::zeros(b.attn.w_v.shape());
    }
    let xsa = m.forward(&x).unwrap();
    m.set_mode(AttentionMode::Sa);
    let sa = m.forward(&x).unwrap();
    assert_eq!(sa.data(), xsa.data());
}

#[test]
fn initial_loss_is_near_uniform() {
    let m = Model::<f32>::new(&tiny(AttentionMode::Sa, 0)).unwrap();
    let x = ids(64, 6);
    let y = ids(64, 7);
    let loss = m.loss(&x, &y, 2, 32).unwrap().item().unwrap() as f64;
    assert!((loss - 256f64.ln()).abs() < 0.1, "{loss}");
}

#[test]
fn sampling_is_deterministic_and_validated() {
    let m = Model::<f32>::new(&tiny(AttentionMode::Xsa, 1)).unwrap();
    let prompt = ids(4, 8);
    let g1 = m.sample(&prompt, 10, 0.0, 1).unwrap();
    let g2 = m.sample(&prompt, 10, 0.0, 99).unwrap();
    assert_eq!(g1, g2);
    let s1 = m.sample(&prompt, 40, 1.0, 5).unwrap();
    let s2 = m.sample(&prompt, 40, 1.0, 5).unwrap();
    let s3 = m.sample(&prompt, 40, 1.0, 6).unwrap();
    assert_eq!(s1, s2);
    assert_ne!(s1, s3);
    assert_eq!(s1.len(), 40);
    assert!(m.sample(&[], 3, 1.0, 0).is_err());
    assert!(m.sample(&ids(33, 0), 3, 1.0, 0).is_err());
    assert!(m.sample(&prompt, 3, -1.0, 0).is_err());
    assert!(m.sample(&prompt, 3, f64::NAN, 0).is_err());
}

#[test]
fn untrained_samples_are_near_uniform() {
    let m = Model::<f32>::new(&tiny(AttentionMode::Sa, 0)).unwrap();
    let mut counts = [0usize; 256];
    // Independent short continuations keep autocorrelation out of the test.
    let mut n = 0;
    for seed in 0..500u64 {
        let prompt = [(seed as usize * 97) % 256];
        for t in m.sample(&prompt, 20, 1.0, seed).unwrap() {
            counts[t] += 1;
            n += 1;
        }
    }
    assert_eq!(n, 10_000);
    let expected = n as f64 / 256.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(255.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi2 = {chi2}, p = {p}");
}

mod checkpoints {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f64>::new(&ModelConfig {
            tie_embeddings: false,
            ..tiny(AttentionMode::Xsa, 2)
        })
        .unwrap();
        let mut ck = Checkpoint::capture(&m, 17);
        ck.manifest.lr = Some(1.25e-4);
        ck.manifest.rng.push(RngState {
            seed: 3,
            word_pos: u128::MAX.to_string(),
        });
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        let m2: Model<f64> = back.model().unwrap();
        let x = ids(11, 9);
        assert_eq!(m.forward(&x).unwrap().data(), m2.forward(&x).unwrap().data());
        assert!(back.moments::<f64>().unwrap().is_none());
    }

    #[test]
    fn precision_conversion_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::new(&tiny(AttentionMode::Sa, 0)).unwrap();
        Checkpoint::capture(&m, 0).save(dir.path()).unwrap();
        let ck = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(ck.manifest.dtype, crate::tensor::DType::F32);
        let wide: Model<f64> = ck.model().unwrap();
        let narrow: Model<f32> = ck.model().unwrap();
        assert_eq!(narrow.wte.data(), m.wte.data());
        for (a, b) in wide.wte.data().iter().zip(m.wte.data()) {
            assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn moments_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::new(&tiny(AttentionMode::Sa, 0)).unwrap();
        let mv: Vec<Vec<f32>> = m.params().iter().map(|(_, _, t)| vec![0.5; t.numel()]).collect();
        let vv: Vec<Vec<f32>> = m.params().iter().map(|(_, _, t)| vec![0.25; t.numel()]).collect();
        let mut ck = Checkpoint::capture(&m, 3);
        ck.set_optimizer(3, &mv, &vv).unwrap();
        assert!(ck.set_optimizer(3, &mv[1..], &vv).is_err());
        ck.save(dir.path()).unwrap();
        let (t, m2, v2) = Checkpoint::load(dir.path()).unwrap().moments::<f32>().unwrap().unwrap();
        assert_eq!((t, m2, v2), (3, mv, vv));
    }

    #[test]
    fn damaged_checkpoints_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
        let m = Model::<f32>::new(&tiny(AttentionMode::Sa, 0)).unwrap();
        Checkpoint::capture(&m, 0).save(dir.path()).unwrap();
        std::fs::write(dir.path().join("params.bin"), [0u8; 16]).unwrap();
        let ck = Checkpoint::load(dir.path()).unwrap();
        assert!(ck.model::<f32>().is_err());
    }
}
