use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::corpus::{generate_synthetic, FeatureSequence, SynthSpec};
use crate::nn::uniform_init;

fn tiny(width: usize, n: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        memory_size: n,
        embed_dim: 4,
        hidden_width: width,
        seed,
        ..ModelConfig::default()
    }
}

fn seq(id: &str, frames: Tensor) -> FeatureSequence {
    FeatureSequence {
        utterance_id: id.into(),
        speaker_id: "s".into(),
        frames,
    }
}

fn memory_model(cfg: ModelConfig) -> SparseSpeech {
    let mut m = SparseSpeech::new(cfg).unwrap();
    m.enter_memory_stage().unwrap();
    m
}

#[test]
fn encoder_output_shapes() {
    let cfg = ModelConfig {
        memory_size: 42,
        hidden_width: 8,
        ..ModelConfig::default()
    };
    let model = SparseSpeech::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for m in [1, 7, 100] {
        let (logits, ctx) = model.encode(&uniform_init(m, 13, 1.0, &mut rng)).unwrap();
        assert_eq!(logits.shape(), [m, 42]);
        assert_eq!(ctx.shape(), [1, 16]);
    }
    let err = model.encode(&Tensor::zeros(0, 13)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    assert!(model.encode(&Tensor::zeros(4, 12)).is_err());
}

#[test]
fn constant_input_without_recurrence_gives_constant_states() {
    let mut model = SparseSpeech::new(tiny(4, 5, 1)).unwrap();
    let h = 4;
    for dir in ["fw", "bw"] {
        let p = model.params_mut();
        let name = format!("enc.l0.{dir}.w_hh");
        let shape = p.get(&name).unwrap().shape();
        p.insert(name, Tensor::zeros(shape[0], shape[1]));
        // closed forget gate, so the cell does not accumulate either
        let w_name = format!("enc.l0.{dir}.w_ih");
        let mut w = p.get(&w_name).unwrap().clone();
        for r in 0..w.rows() {
            w.row_mut(r)[h..2 * h].fill(0.0);
        }
        p.insert(w_name, w);
        let b_name = format!("enc.l0.{dir}.b");
        let mut b = p.get(&b_name).unwrap().clone();
        b.data_mut()[h..2 * h].fill(-800.0);
        p.insert(b_name, b);
    }
    let x = Tensor::from_fn(6, 3, |_, c| 0.3 * c as f64 - 0.2);
    let batch = Batch::new(&[&x]).unwrap();
    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let states = bilstm(&mut g, &p, "enc.l0", xv, &batch.layout, &batch.reversal).unwrap();
    let (_, ctx) = model.encode(&x).unwrap();
    for row in g.value(states).row_iter() {
        for (a, b) in row.iter().zip(ctx.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_order_does_not_change_logits() {
    let model = SparseSpeech::new(tiny(5, 4, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seqs: Vec<Tensor> = [4, 9, 2]
        .iter()
        .map(|&m| uniform_init(m, 3, 1.0, &mut rng))
        .collect();
    let logits_of = |order: &[usize]| {
        let refs: Vec<&Tensor> = order.iter().map(|&i| &seqs[i]).collect();
        let batch = Batch::new(&refs).unwrap();
        let mut g = Graph::new();
        let p = model.params().bind_frozen(&mut g);
        let x = g.constant(batch.packed.clone());
        let (l, _) = model.encoder_graph(&mut g, &p, x, &batch).unwrap();
        let packed = g.value(l).clone();
        let mut out = vec![Tensor::zeros(0, 0); seqs.len()];
        for (slot, &i) in order.iter().enumerate() {
            out[i] = batch.layout.unpack(&packed, slot);
        }
        out
    };
    let a = logits_of(&[0, 1, 2]);
    let b = logits_of(&[2, 0, 1]);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.max_abs_diff(y) < 1e-12);
    }
}

#[test]
fn bottleneck_without_noise_at_unit_temperature_is_softmax() {
    let logits = Tensor::from_rows(&[[1.0, 2.0, 0.5], [0.0, 0.0, -3.0]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = bottleneck(&logits, 1.0, 0.0, &mut rng).unwrap();
    for r in 0..2 {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..3 {
            assert!((out.get(r, c) - row[c].exp() / z).abs() < 1e-12);
        }
    }
    let noisy_a = bottleneck(&logits, 0.5, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let noisy_b = bottleneck(&logits, 0.5, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(noisy_a, noisy_b);
    assert!(bottleneck(&logits, 0.0, 1.0, &mut rng).is_err());
}

#[test]
fn memory_read_cases() {
    let bank = Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]).unwrap();
    let one_hot = Tensor::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
    assert_eq!(
        memory_read(&one_hot, &bank, &[false]).unwrap().row(0),
        bank.row(1)
    );
    let uniform = Tensor::filled(1, 3, 1.0 / 3.0);
    let mean = memory_read(&uniform, &bank, &[false]).unwrap();
    assert!((mean.get(0, 0) - 1.5).abs() < 1e-12 && (mean.get(0, 1) - 0.5).abs() < 1e-12);

    let post = Tensor::from_rows(&[[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]]).unwrap();
    let read = memory_read(&post, &bank, &[false, true]).unwrap();
    for c in 0..2 {
        let expected: f64 = (0..3).map(|k| post.get(0, k) * bank.get(k, c)).sum();
        assert!((read.get(0, c) - expected).abs() < 1e-12);
        assert_eq!(read.get(1, c), 0.0);
    }
    assert!(memory_read(&post, &bank, &[false]).is_err());
    assert!(memory_read(&post, &Tensor::zeros(2, 2), &[false, false]).is_err());
}

#[test]
fn decoder_shapes_and_bias_only_output() {
    let mut model = SparseSpeech::new(tiny(4, 5, 4)).unwrap();
    let names: Vec<String> = model.params().names().to_vec();
    for n in names.iter().filter(|n| n.starts_with("dec.")) {
        let t = model.params().get(n).unwrap();
        let zero = Tensor::zeros(t.rows(), t.cols());
        model.params_mut().insert(n.clone(), zero);
    }
    model
        .params_mut()
        .insert("dec.out.b", Tensor::row_vector(&[0.5, -1.0, 2.0]));
    for m in [1, 6] {
        let out = model
            .decode(&Tensor::zeros(m, 4), &Tensor::zeros(1, 8))
            .unwrap();
        assert_eq!(out.shape(), [m, 3]);
        for row in out.row_iter() {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }
}

fn loss_and_grads(model: &SparseSpeech, batch: &Batch, noise: &FrozenNoise) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let terms = model.loss_graph(&mut g, &p, batch, 1.5, noise).unwrap();
    let loss = g.value(terms.total).item();
    let mut grads = g.backward(terms.total).unwrap();
    (loss, p.collect(&mut grads))
}

#[test]
fn memory_receives_gradient_without_masking() {
    let model = memory_model(tiny(4, 5, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = uniform_init(7, 3, 1.0, &mut rng);
    let batch = Batch::new(&[&x]).unwrap();
    let noise = FrozenNoise {
        gumbel: Some(crate::gumbel::sample_gumbel_matrix(7, 5, &mut rng)),
        mask: Some(vec![false; 7]),
    };
    let (_, grads) = loss_and_grads(&model, &batch, &noise);
    let idx = model
        .params()
        .names()
        .iter()
        .position(|n| n == "memory")
        .unwrap();
    assert!(grads[idx].data().iter().any(|&v| v != 0.0));
}

#[test]
fn masked_frames_keep_loss_finite_and_gradient_flowing() {
    let model = memory_model(tiny(4, 5, 6));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform_init(8, 3, 1.0, &mut rng);
    let batch = Batch::new(&[&x]).unwrap();
    let mask = vec![true, false, true, true, false, false, true, false];
    let noise = FrozenNoise {
        gumbel: None,
        mask: Some(mask.clone()),
    };
    let (loss, grads) = loss_and_grads(&model, &batch, &noise);
    assert!(loss.is_finite());
    let idx = model
        .params()
        .names()
        .iter()
        .position(|n| n == "memory")
        .unwrap();
    assert!(grads[idx].data().iter().any(|&v| v != 0.0));

    let all = FrozenNoise {
        gumbel: None,
        mask: Some(vec![true; 8]),
    };
    let (loss, grads) = loss_and_grads(&model, &batch, &all);
    assert!(loss.is_finite());
    assert!(grads[idx].data().iter().all(|&v| v == 0.0));
}

fn check_model_gradients(model: &SparseSpeech, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform_init(5, model.config().input_dim, 1.0, &mut rng);
    let b = uniform_init(3, model.config().input_dim, 1.0, &mut rng);
    let batch = Batch::new(&[&a, &b]).unwrap();
    let noise = model.sample_noise(&batch, &mut rng);
    let report = grad_check(model.params().values(), 1e-4, 1e-4, |g, vars| {
        let p = model.params().bind_existing(vars)?;
        Ok(model.loss_graph(g, &p, &batch, 0.8, &noise)?.total)
    })
    .unwrap();
    assert!(report.passed(), "seed {seed}: {report:?}");
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for seed in 0..2 {
        let cfg = ModelConfig {
            input_dim: 4,
            memory_size: 8,
            embed_dim: 3,
            hidden_width: 8,
            seed,
            ..ModelConfig::default()
        };
        check_model_gradients(&SparseSpeech::new(cfg.clone()).unwrap(), seed);
        check_model_gradients(&memory_model(cfg.clone()), seed);
        let legacy = cfg.legacy_sparsity();
        check_model_gradients(&memory_model(legacy), seed);
    }
}

#[test]
fn overfits_a_single_utterance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let frames = Tensor::from_fn(20, 3, |t, c| {
        ((t / 5) as f64 - 1.5) * (c as f64 - 1.0) + rng.random_range(-0.1..0.1)
    });
    let cfg = ModelConfig {
        input_dim: 3,
        memory_size: 8,
        hidden_width: 16,
        pretrain_epochs: 100,
        epochs: 100,
        batch_size: 1,
        ..ModelConfig::default()
    };
    let out = train(&[seq("u", frames)], &cfg, None).unwrap();
    assert_eq!(out.curve.len(), 200);
    let first = out.curve[0].recon;
    let last = out.curve.last().unwrap().recon;
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<FeatureSequence> = (0..3)
        .map(|i| seq(&format!("u{i}"), uniform_init(6 + i, 3, 1.0, &mut rng)))
        .collect();
    for (mask_prob, noise_weight) in [(0.0, 0.0), (0.2, 1.0)] {
        let cfg = ModelConfig {
            mask_prob,
            noise_weight,
            pretrain_epochs: 2,
            epochs: 2,
            batch_size: 2,
            ..tiny(4, 4, 9)
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = train(&data, &cfg, Some(dir_a.path())).unwrap();
        let b = train(&data, &cfg, Some(dir_b.path())).unwrap();
        assert_eq!(a.model, b.model);
        for f in ["stage1.ssck", "stage2.ssck"] {
            let x = std::fs::read(dir_a.path().join(f)).unwrap();
            let y = std::fs::read(dir_b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
    }
}

#[test]
fn default_config_echo_carries_loss_weights() {
    let text = ModelConfig::default().to_toml();
    let back = ModelConfig::from_toml(&text).unwrap();
    assert_eq!(back.weights.diversity_weight, 100.0);
    assert_eq!(back.weights.sparsity_weight, 0.0);
    assert_eq!(back, ModelConfig::default());
    assert!(ModelConfig::from_toml("hidden_width = 8\nbogus = 1\n").is_err());
    assert!(ModelConfig::from_toml("mask_prob = 1.0\n").is_err());
    assert!(ModelConfig::from_toml("memory_size = 1\n").is_err());
    assert_eq!(
        ModelConfig::from_toml("hidden_width = 8\n")
            .unwrap()
            .hidden_width,
        8
    );
}

#[test]
fn checkpoints_round_trip_and_gate_generation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<FeatureSequence> = (0..4)
        .map(|i| seq(&format!("u{i}"), uniform_init(5 + i, 3, 1.0, &mut rng)))
        .collect();
    let cfg = ModelConfig {
        pretrain_epochs: 1,
        epochs: 1,
        ..tiny(4, 6, 2)
    };
    let dir = tempfile::tempdir().unwrap();
    train(&data, &cfg, Some(dir.path())).unwrap();

    let ck1 = Checkpoint::load(&dir.path().join("stage1.ssck")).unwrap();
    let (m1, opt1) = SparseSpeech::from_checkpoint(&ck1).unwrap();
    assert_eq!(m1.stage(), Stage::Pretrain);
    assert!(m1.projection().is_some() && m1.memory_bank().is_none());
    assert!(opt1.unwrap().step > 0);
    assert!(matches!(
        generate(&m1, &data, 3.0),
        Err(Error::MemoryNotTrained)
    ));

    let ck2 = Checkpoint::load(&dir.path().join("stage2.ssck")).unwrap();
    let (m2, _) = SparseSpeech::from_checkpoint(&ck2).unwrap();
    assert!(m2.memory_bank().is_some());
    let again = m2.to_checkpoint(None, ck2.step, ck2.rng_pos);
    let (m3, none) = SparseSpeech::from_checkpoint(&again).unwrap();
    assert!(none.is_none());
    assert_eq!(m2, m3);

    let posts = generate(&m2, &data, 3.0).unwrap();
    assert_eq!(posts.len(), data.len());
    for (p, u) in posts.iter().zip(&data) {
        assert_eq!(p.utterance_id, u.utterance_id);
        assert_eq!(p.rows.shape(), [u.num_frames(), 6]);
    }
}

#[test]
fn generation_temperature_sharpens_without_reordering() {
    let spec = SynthSpec {
        utterances: 12,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic(&spec).unwrap();
    let data: Vec<FeatureSequence> = corpus
        .utterances
        .iter()
        .map(|u| u.features.clone())
        .collect();
    let cfg = ModelConfig {
        pretrain_epochs: 1,
        epochs: 1,
        hidden_width: 8,
        ..ModelConfig::default()
    };
    let model = train(&data, &cfg, None).unwrap().model;
    let taus = [0.2, 0.8, 1.0, 2.0, 3.0, 5.0];
    let runs: Vec<Vec<Posteriorgram>> = taus
        .iter()
        .map(|&t| generate(&model, &data, t).unwrap())
        .collect();
    let mean_max = |posts: &[Posteriorgram]| {
        posts.iter().map(Posteriorgram::mean_max).sum::<f64>() / posts.len() as f64
    };
    for w in runs.windows(2) {
        assert!(mean_max(&w[0]) > mean_max(&w[1]));
        for (a, b) in w[0].iter().zip(&w[1]) {
            assert_eq!(a.labels(), b.labels());
        }
    }
    for p in runs.iter().flatten() {
        for row in p.rows.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
