use tove_core::harness::{prepare, Example};
use tove_core::hub::{expert_invocations, reset_expert_invocations, HubManifest};
use tove_core::merge::MergeSession;
use tove_core::numerics::{Graph, OptimizerKind, RandomSource};
use tove_core::objectives::{mean_gap, MergeWeights};
use tove_core::routing::TransferStrategy;
use tove_core::synth::{generate_scene, CaptionGrammar};
use tove_core::vlm::{Checkpoint, ForwardOptions, ModelConfig, ToveModel};
use tove_core::Error;

const LAMBDA: f64 = 0.3;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        enc_blocks: 1,
        dec_blocks: 1,
        grid: (4, 4),
        conv_channels: 2,
        ..ModelConfig::default()
    }
}

fn setup(n: usize) -> (ToveModel, Vec<Example>, CaptionGrammar) {
    let cfg = small_cfg();
    let grammar = CaptionGrammar::new(cfg.vocab).unwrap();
    let model = ToveModel::new(cfg.clone(), Some(HubManifest::default_catalogue(cfg.grid)), 2).unwrap();
    let mut rng = RandomSource::new(8);
    let scenes: Vec<_> = (0..n).map(|_| generate_scene(&mut rng)).collect();
    let examples = prepare(&model, &scenes, &grammar).unwrap();
    (model, examples, grammar)
}

fn session(teacher: ToveModel, weights: MergeWeights, lr: f64) -> MergeSession {
    MergeSession::new(teacher, LAMBDA, TransferStrategy::Residual, weights, OptimizerKind::AdamW, lr).unwrap()
}

const BOTH: MergeWeights = MergeWeights { lm: 1.0, gap: 1.0 };

#[test]
fn student_starts_as_an_exact_copy() {
    let (teacher, examples, grammar) = setup(4);
    let s = session(teacher.clone(), BOTH, 1e-3);
    for e in &examples {
        let base = teacher.encode_image(&e.sample(&grammar)).unwrap();
        assert!(s.student_tokens(e, &grammar).unwrap().bit_eq(&base));
    }
}

#[test]
fn initial_gap_is_the_scaled_fusion_output() {
    let (teacher, examples, grammar) = setup(6);
    let s = session(teacher.clone(), BOTH, 1e-3);
    let data = s.targets(&examples, &grammar).unwrap();
    let fusion = teacher.experts.as_ref().unwrap();
    let mut expected = 0.0;
    for e in &examples {
        let sample = e.sample(&grammar);
        let mut g = Graph::new();
        let p = teacher.store.bind(&mut g);
        let opts = ForwardOptions::eval(4, LAMBDA, TransferStrategy::Residual);
        let out = teacher.forward(&mut g, &p, &sample, None, &opts, &mut RandomSource::new(0)).unwrap();
        let t_vis = g.value(out.t_vis).clone();
        let w = g.value(out.weights.unwrap()).clone();
        let projected: Vec<_> = (0..4)
            .map(|k| {
                let t = fusion.hub.cache_tokens(&teacher.store, k, &sample).or_else(|_| {
                    let native = fusion.hub.expert_infer(&teacher.store, k, &sample)?;
                    tove_core::hub::align_token_count(&native, fusion.hub.spec(k)?.native_grid, teacher.cfg.grid)
                });
                tove_core::hub::project_expert_tokens(&fusion.hub.projector_params(&teacher.store), k, &t.unwrap()).unwrap()
            })
            .collect();
        let t_exp = tove_core::routing::ensemble_expert_tokens(&w, &projected).unwrap();
        let m = tove_core::numerics::mlp_forward(&fusion.fusion.params(&teacher.store), &t_exp).unwrap();
        let norms: f64 = (0..m.rows()).map(|i| LAMBDA * m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
        expected += norms / m.rows() as f64;
        let direct = mean_gap(&g.value(out.fused).clone(), &t_vis).unwrap();
        assert!((direct - norms / m.rows() as f64).abs() < 1e-9);
    }
    expected /= examples.len() as f64;
    assert!((s.mean_gap(&data, &grammar).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (teacher, examples, grammar) = setup(6);
    let mut s = session(teacher, BOTH, 0.0);
    let data = s.targets(&examples, &grammar).unwrap();
    let before = s.student.hash("");
    let gap = s.mean_gap(&data, &grammar).unwrap();
    s.run_epoch(&data, &grammar, 3, &mut RandomSource::new(1)).unwrap();
    assert_eq!(s.student.hash(""), before);
    assert_eq!(s.mean_gap(&data, &grammar).unwrap(), gap);
    assert!(s.teacher_unchanged());
}

#[test]
fn term_weights_select_the_objective() {
    let (teacher, examples, grammar) = setup(3);
    for (w, pick) in [
        (MergeWeights { lm: 0.0, gap: 1.0 }, 0),
        (MergeWeights { lm: 1.0, gap: 0.0 }, 1),
        (BOTH, 2),
    ] {
        let mut s = session(teacher.clone(), w, 1e-3);
        let data = s.targets(&examples, &grammar).unwrap();
        let batch: Vec<_> = data.iter().collect();
        let l = s.merge_step(&batch, &grammar).unwrap();
        let expect = [l.gap, l.lm, l.lm + l.gap][pick];
        assert!((l.total - expect).abs() < 1e-12);
        assert!(l.gap > 0.0 && l.lm > 0.0);
    }
}

#[test]
fn training_shrinks_the_gap_and_leaves_the_teacher_alone() {
    let (teacher, examples, grammar) = setup(24);
    let hash = teacher.store.hash("");
    let mut s = session(teacher, MergeWeights { lm: 0.0, gap: 1.0 }, 1e-2);
    let data = s.targets(&examples, &grammar).unwrap();
    let initial = s.mean_gap(&data, &grammar).unwrap();
    let mut rng = RandomSource::new(3);
    for _ in 0..5 {
        s.run_epoch(&data, &grammar, 4, &mut rng).unwrap();
    }
    assert_eq!(s.gap_history.len(), 5);
    assert!(s.mean_gap(&data, &grammar).unwrap() < initial);
    assert!(s.teacher_unchanged());
    assert_eq!(s.teacher.store.hash(""), hash);
}

#[test]
fn lite_export_has_no_expert_path() {
    let (teacher, examples, grammar) = setup(4);
    let cfg = teacher.cfg.clone();
    let mut s = session(teacher, BOTH, 1e-3);
    let data = s.targets(&examples, &grammar).unwrap();
    assert!(matches!(s.export_lite(String::new()), Err(Error::ConfigInvalid(_))));
    s.run_epoch(&data, &grammar, 2, &mut RandomSource::new(0)).unwrap();
    let ck = s.export_lite("experts = false".into()).unwrap();
    assert!(ck.names().all(|n| n.starts_with("enc.") || n.starts_with("dec.")));
    assert!(ck.names().any(|n| n.starts_with("enc.")));
    assert!(ck.manifest.is_empty());

    let bytes = ck.to_bytes();
    let mut lite = ToveModel::new(cfg, None, 99).unwrap();
    Checkpoint::from_bytes(&bytes).unwrap().restore(&mut lite.store, |_| false).unwrap();
    assert_eq!(lite.store.hash("enc."), s.student.hash("enc."));
    reset_expert_invocations();
    let opts = ForwardOptions::eval(0, 0.0, TransferStrategy::Residual);
    for e in &examples {
        lite.forward_tove(&e.sample(&grammar), &opts, &mut RandomSource::new(0)).unwrap();
    }
    assert_eq!(expert_invocations(), 0);
}

#[test]
fn teacher_without_experts_is_rejected() {
    let plain = ToveModel::new(small_cfg(), None, 0).unwrap();
    let r = MergeSession::new(plain, LAMBDA, TransferStrategy::Residual, BOTH, OptimizerKind::AdamW, 1e-3);
    assert!(matches!(r, Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn lite_inference_is_cheaper_than_full() {
    let (teacher, examples, grammar) = setup(8);
    let lite = ToveModel::new(teacher.cfg.clone(), None, 0).unwrap();
    let samples: Vec<_> = examples.iter().map(|e| e.sample(&grammar)).collect();
    let best = |m: &ToveModel, opts: &ForwardOptions| {
        (0..5)
            .map(|_| {
                let start = std::time::Instant::now();
                for s in &samples {
                    m.forward_tove(s, opts, &mut RandomSource::new(0)).unwrap();
                }
                start.elapsed()
            })
            .min()
            .unwrap()
    };
    let full = best(&teacher, &ForwardOptions::eval(teacher.num_experts(), LAMBDA, TransferStrategy::Residual));
    let plain = best(&lite, &ForwardOptions::eval(0, 0.0, TransferStrategy::Residual));
    assert!(plain < full, "lite {plain:?} vs full {full:?}");
}
