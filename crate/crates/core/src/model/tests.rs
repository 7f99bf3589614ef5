use super::*;
use crate::data::{build_all_samples, generate_synthetic, SyntheticConfig};
use crate::semantic::{sample_semantics, StubEmbedder};

fn tiny_config(backbone: BackboneSpec) -> ModelConfig {
    ModelConfig {
        dim: 16,
        encoder: EncoderDims { time_of_day: 8, day_of_week: 8, location: 8, coord: 4 },
        tokenizer: TokenizerConfig { intra_layers: 1, inter_layers: 1, ..TokenizerConfig::default() },
        grid: GridSpec::new(10, 10).unwrap(),
        backbone,
        ablations: Ablations::default(),
    }
}

fn fixtures(dim: usize) -> (Vec<PredictionSample>, Vec<SampleSemantics>) {
    let grid = GridSpec::new(10, 10).unwrap();
    let cfg = SyntheticConfig { grid, ..SyntheticConfig::new(2, 9, 0.2, 4) };
    let data = generate_synthetic(&cfg).unwrap();
    let samples = build_all_samples(&data.trajectories, &grid).unwrap();
    let stub = StubEmbedder::new(0, dim);
    let sems = samples.iter().map(|s| sample_semantics(s, &grid, &stub).unwrap()).collect();
    (samples, sems)
}

fn fused(model: &Model, sample: &PredictionSample, sem: &SampleSemantics) -> Tensor {
    let mut tape = model.tape();
    let v = model.fused_sequence(&mut tape, sample, sem).unwrap();
    tape.value(v).clone()
}

fn zero_semantics(sem: &SampleSemantics) -> SampleSemantics {
    SampleSemantics { history: Tensor::zeros(sem.history.shape()), task: Tensor::zeros(sem.task.shape()) }
}

#[test]
fn fused_sequence_shapes() {
    let (samples, sems) = fixtures(16);
    let model = Model::new(tiny_config(BackboneSpec::Identity), 1).unwrap();
    assert_eq!(fused(&model, &samples[0], &sems[0]).shape(), &[55, 16]);
    let cfg = ModelConfig { ablations: Ablations { no_tokenization: true, ..Default::default() }, ..tiny_config(BackboneSpec::Identity) };
    let model = Model::new(cfg, 1).unwrap();
    assert_eq!(fused(&model, &samples[0], &sems[0]).shape(), &[384, 16]);
}

#[test]
fn zero_prompt_embeddings_equal_ablated_stream() {
    let (samples, sems) = fixtures(16);
    let model = Model::new(tiny_config(BackboneSpec::Identity), 2).unwrap();
    let ablated_cfg = ModelConfig {
        ablations: Ablations { no_traj_info: true, no_task_desc: true, ..Default::default() },
        ..tiny_config(BackboneSpec::Identity)
    };
    let ablated = Model::new(ablated_cfg, 2).unwrap();
    let zero = zero_semantics(&sems[0]);
    assert_eq!(fused(&model, &samples[0], &zero), fused(&ablated, &samples[0], &sems[0]));
}

#[test]
fn task_embedding_is_broadcast_and_fusion_is_linear() {
    let (samples, sems) = fixtures(16);
    let model = Model::new(tiny_config(BackboneSpec::Identity), 3).unwrap();
    let (s, a) = (&samples[0], &sems[0]);
    let b = &sems[1];
    let base = fused(&model, s, &zero_semantics(a));
    let fa = fused(&model, s, a);
    for r in 7..55 {
        for c in 0..16 {
            assert!((fa.get2(r, c) - base.get2(r, c) - a.task.data()[c]).abs() < 1e-12);
        }
    }
    for r in 0..7 {
        for c in 0..16 {
            assert!((fa.get2(r, c) - base.get2(r, c) - a.history.get2(r, c)).abs() < 1e-12);
        }
    }
    let mut sum = a.clone();
    sum.history.axpy(1.0, &b.history);
    sum.task.axpy(1.0, &b.task);
    let fb = fused(&model, s, b);
    let fsum = fused(&model, s, &sum);
    for i in 0..base.len() {
        let lhs = fsum.data()[i] - base.data()[i];
        let rhs = (fa.data()[i] - base.data()[i]) + (fb.data()[i] - base.data()[i]);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn identity_backbone_is_passthrough() {
    let model = Model::new(tiny_config(BackboneSpec::Identity), 4).unwrap();
    let mut tape = model.tape();
    let x = tape.constant(Tensor::filled(&[5, 16], 0.3)).unwrap();
    assert_eq!(model.backbone.forward(&mut tape, x).unwrap(), x);
    assert!(model.frozen.is_empty());
}

#[test]
fn frozen_random_backbone_is_reproducible() {
    let spec = BackboneSpec::FrozenRandom { layers: 2, heads: 4, seed: 9 };
    let a = Model::new(tiny_config(spec.clone()), 5).unwrap();
    let b = Model::new(tiny_config(spec), 6).unwrap();
    assert_eq!(a.backbone_checksum(), b.backbone_checksum());
    let x = Tensor::new(vec![4, 16], (0..64).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let run = |m: &Model| {
        let mut tape = m.tape();
        let v = tape.constant(x.clone()).unwrap();
        let out = m.backbone.forward(&mut tape, v).unwrap();
        tape.value(out).clone()
    };
    assert_eq!(run(&a), run(&b));
    assert_ne!(run(&a), x);
}

#[test]
fn backbone_spec_parsing() {
    assert_eq!("identity".parse::<BackboneSpec>().unwrap(), BackboneSpec::Identity);
    assert_eq!(
        "frozen-random:2:4".parse::<BackboneSpec>().unwrap(),
        BackboneSpec::FrozenRandom { layers: 2, heads: 4, seed: 0 }
    );
    assert_eq!(
        "frozen-random:3:2:11".parse::<BackboneSpec>().unwrap(),
        BackboneSpec::FrozenRandom { layers: 3, heads: 2, seed: 11 }
    );
    assert_eq!("load:/x/y.rhyk".parse::<BackboneSpec>().unwrap(), BackboneSpec::Load { path: "/x/y.rhyk".into() });
    assert!("frozen-random:2".parse::<BackboneSpec>().is_err());
    assert!("gpt".parse::<BackboneSpec>().is_err());
}

#[test]
fn zero_head_gives_uniform_distribution() {
    let w = Tensor::zeros(&[8, 40_000]);
    let b = Tensor::zeros(&[40_000]);
    let p = predict_distribution(&[0.5; 8], &w, &b).unwrap();
    assert!(p.iter().all(|v| (v - 1.0 / 40_000.0).abs() < 1e-15));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let uniform = Tensor::new(vec![48, 40_000], p.repeat(48)).unwrap();
    let loss = sequence_loss(&uniform, &[Some(7); 48]).unwrap();
    assert!((loss - 40_000f64.ln()).abs() < 1e-9);
    assert!((loss - 10.597).abs() < 1e-3);
}

#[test]
fn distribution_ranking_matches_sorted_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = init::uniform(&[6, 50], 1.0, &mut rng);
    let b = init::uniform(&[50], 1.0, &mut rng);
    let h: Vec<f64> = (0..6).map(|i| (i as f64).cos()).collect();
    let p = predict_distribution(&h, &w, &b).unwrap();
    let shifted_b = Tensor::vector(b.data().iter().map(|v| v + 123.0).collect()).unwrap();
    let q = predict_distribution(&h, &w, &shifted_b).unwrap();
    let argmax = |v: &[f64]| (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
    assert_eq!(argmax(&p), argmax(&q));

    let logits: Vec<f64> = (0..50).map(|j| (0..6).map(|i| h[i] * w.get2(i, j)).sum::<f64>() + b.data()[j]).collect();
    let mut by_logit: Vec<usize> = (0..50).collect();
    by_logit.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut by_prob: Vec<usize> = (0..50).collect();
    by_prob.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    assert_eq!(by_logit[..10], by_prob[..10]);
}

#[test]
fn sequence_loss_masking() {
    let probs = Tensor::new(vec![3, 2], vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.5]).unwrap();
    let all = sequence_loss(&probs, &[Some(0), Some(1), Some(0)]).unwrap();
    assert!((all - (-(0.9f64.ln()) - 0.8f64.ln() - 0.5f64.ln()) / 3.0).abs() < 1e-15);
    let masked = sequence_loss(&probs, &[Some(0), None, Some(0)]).unwrap();
    assert!((masked - (-(0.9f64.ln()) - 0.5f64.ln()) / 2.0).abs() < 1e-15);
    assert!(matches!(sequence_loss(&probs, &[None, None, None]), Err(ModelError::Numerics(NumericsError::AllTargetsMissing))));
    let sharp = Tensor::new(vec![1, 2], vec![1.0 - 1e-12, 1e-12]).unwrap();
    assert!(sequence_loss(&sharp, &[Some(0)]).unwrap() < 1e-11);
}

#[test]
fn gradients_flow_through_frozen_backbone() {
    let (samples, sems) = fixtures(16);
    let model = Model::new(tiny_config(BackboneSpec::FrozenRandom { layers: 2, heads: 4, seed: 1 }), 7).unwrap();
    let (loss, grads) = model.loss_and_gradients(&model.trainable, &samples[0], &sems[0], None).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    for (i, g) in grads.iter().enumerate() {
        let g = g.as_ref().unwrap_or_else(|| panic!("{} received no gradient", model.trainable.name(i)));
        assert!(g.norm() > 0.0, "{} has zero gradient", model.trainable.name(i));
    }
}

#[test]
fn end_to_end_gradient_check() {
    let report = end_to_end_gradcheck(&GradcheckSetup { coords_per_tensor: 2, ..GradcheckSetup::default() }).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
    assert!(report.frozen_checksum_unchanged);
    assert!(report.frozen_tensors > 0);
}

#[test]
fn attention_log_covers_every_stage() {
    let (samples, sems) = fixtures(16);
    let model = Model::new(tiny_config(BackboneSpec::FrozenRandom { layers: 1, heads: 2, seed: 1 }), 8).unwrap();
    let mut tape = model.tape();
    model.forward(&mut tape, &samples[0], &sems[0]).unwrap();
    let stages: Vec<&str> = tape.attention_log().iter().map(|r| r.stage).collect();
    assert_eq!(stages, vec!["intra", "pool", "inter", STAGE_BACKBONE]);
    let backbone = tape.attention_log().last().unwrap();
    assert_eq!(backbone.entries_per_head(), 55 * 55);
}

#[test]
fn rejects_bad_configs() {
    let cfg = ModelConfig { dim: 10, ..tiny_config(BackboneSpec::Identity) };
    assert!(matches!(Model::new(cfg, 0), Err(ModelError::InvalidConfig(_))));
    let cfg = tiny_config(BackboneSpec::FrozenRandom { layers: 1, heads: 3, seed: 0 });
    assert!(matches!(Model::new(cfg, 0), Err(ModelError::BadBackbone(_))));
    let (samples, sems) = fixtures(8);
    let model = Model::new(tiny_config(BackboneSpec::Identity), 0).unwrap();
    assert!(matches!(model.logits(&samples[0], &sems[0]), Err(ModelError::DimMismatch { .. })));
}
