use infu_core::config::ModelConfig;
use infu_core::dit::{init_base, BaseModel};
use infu_core::infusenet::InfuseNet;
use infu_core::params::ParamStore;
use infu_core::selftest::perturb;
use infu_core::toyworld::{ControlImage, ToyWorld, WorldConfig};
use infu_core::training::{
    clip_global_norm, global_norm, infu_loss_and_grads, pretrain_base, pretrain_spss,
    sample_base_batch, sample_sft_batch, sample_spss_batch, sft_spms, synthesize_spms,
    train_step_infu, AdamW, Gradients, Stage, StageConfig,
};
use infu_core::InfuError;
use infu_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world() -> ToyWorld {
    ToyWorld::new(WorldConfig::default()).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig {
        token_dim: 16,
        heads: 2,
        mlp_ratio: 2,
        base_blocks: 2,
        infuse_blocks: 1,
        factor: 2,
        id_tokens: 2,
        ..ModelConfig::default()
    }
}

/// A base with randomized zero-initialized layers, so gradients reach the branch.
fn live_base(cfg: &ModelConfig, seed: u64) -> BaseModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = perturb(init_base(seed, cfg).unwrap().params(), 0.2, &mut rng);
    store.round_to_f32();
    BaseModel::from_params(cfg, store).unwrap()
}

fn stage(stage: Stage, steps: usize, lr: f64) -> StageConfig {
    StageConfig {
        steps,
        lr,
        batch_size: 8,
        ..StageConfig::defaults(stage)
    }
}

fn quiet() -> impl FnMut(usize, f64) {
    |_, _| {}
}

#[test]
fn adamw_first_steps_match_hand_computation() {
    let (lr, wd, eps, b1, b2) = (0.1, 0.01, 1e-8, 0.9, 0.999);
    let mut store = ParamStore::new();
    store.insert("w", Tensor::from_vec(vec![1.0, -2.0]));
    store.insert("untouched", Tensor::from_vec(vec![3.0]));
    let mut opt = AdamW::new(lr);
    let grads: Gradients = [("w".to_string(), Tensor::from_vec(vec![0.5, -0.25]))].into();
    let g2: Gradients = [("w".to_string(), Tensor::from_vec(vec![-1.0, 0.0]))].into();

    let mut expect = [1.0f64, -2.0];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    for (k, g) in [&grads, &g2].into_iter().enumerate() {
        opt.step(&mut store, g).unwrap();
        let t = (k + 1) as i32;
        for i in 0..2 {
            let gi = g["w"].data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            expect[i] = expect[i] * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
        }
        for i in 0..2 {
            assert!((store.get("w").unwrap().data()[i] - expect[i]).abs() < 1e-12);
        }
    }
    assert_eq!(store.get("untouched").unwrap().data(), &[3.0]);
    assert_eq!(opt.steps_taken(), 2);
    assert!(opt.moments("w").is_some() && opt.moments("untouched").is_none());
}

#[test]
fn adamw_first_step_moves_each_weight_by_lr() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::from_vec(vec![0.0, 0.0, 0.0]));
    let mut opt = AdamW::new(0.01);
    let grads: Gradients = [("w".to_string(), Tensor::from_vec(vec![3.0, -1e-3, 0.0]))].into();
    opt.step(&mut store, &grads).unwrap();
    let w = store.get("w").unwrap().data();
    assert!((w[0] + 0.01).abs() < 1e-9);
    assert!((w[1] - 0.01).abs() < 1e-6);
    assert_eq!(w[2], 0.0);
}

#[test]
fn adamw_rejects_mismatched_gradients() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::zeros([2]));
    let mut opt = AdamW::new(0.1);
    let wrong: Gradients = [("w".to_string(), Tensor::zeros([3]))].into();
    assert!(opt.step(&mut store, &wrong).is_err());
    let unknown: Gradients = [("v".to_string(), Tensor::zeros([2]))].into();
    assert!(opt.step(&mut store, &unknown).is_err());
    assert_eq!(opt.steps_taken(), 0);
}

#[test]
fn global_norm_clipping() {
    let mut g: Gradients = [
        ("a".to_string(), Tensor::from_vec(vec![3.0])),
        ("b".to_string(), Tensor::from_vec(vec![4.0])),
    ]
    .into();
    assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
    assert_eq!(g["a"].data(), &[3.0]);
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    assert!((g["b"].data()[0] - 0.8).abs() < 1e-12);
}

#[test]
fn stage_config_validation() {
    for s in [Stage::Base, Stage::Spss, Stage::Sft] {
        StageConfig::defaults(s).validate().unwrap();
        assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
    }
    let bad = |f: fn(&mut StageConfig)| {
        let mut c = StageConfig::defaults(Stage::Spss);
        f(&mut c);
        c.validate().is_err()
    };
    assert!(bad(|c| c.steps = 0));
    assert!(bad(|c| c.lr = -1.0));
    assert!(bad(|c| c.prompt_dropout = 1.5));
    assert!(bad(|c| c.spms_blend_gamma = 2.0));
    assert!("bogus".parse::<Stage>().is_err());
}

#[test]
fn batch_dropout_extremes() {
    let w = world();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let keep = StageConfig {
        prompt_dropout: 0.0,
        control_dropout: 0.0,
        ..stage(Stage::Spss, 1, 1e-3)
    };
    let b = sample_spss_batch(&w, &keep, &mut rng).unwrap();
    assert_eq!(b.len(), 8);
    assert!(b.prompts.iter().all(Option::is_some));
    assert!(b
        .controls
        .iter()
        .all(|c| c.data().iter().any(|&v| v != 0.0)));
    let drop = StageConfig {
        prompt_dropout: 1.0,
        control_dropout: 1.0,
        ..keep
    };
    let b = sample_spss_batch(&w, &drop, &mut rng).unwrap();
    assert!(b.prompts.iter().all(Option::is_none));
    assert!(b
        .controls
        .iter()
        .all(|c| c.bit_eq(&ControlImage::black().pixels)));
    assert!(b
        .x0
        .iter()
        .all(|x| x.data().iter().all(|v| (-1.0..=1.0).contains(v))));
}

#[test]
fn base_batches_carry_no_identity_signal() {
    let w = world();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = sample_base_batch(&w, &stage(Stage::Base, 1, 1e-3), &mut rng);
    assert!(b
        .id_embeddings
        .iter()
        .all(|e| e.data().iter().all(|&v| v == 0.0)));
    assert!(b
        .controls
        .iter()
        .all(|c| c.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn fresh_branch_gradients_reach_only_the_zero_heads() {
    let cfg = small();
    let w = world();
    let base = live_base(&cfg, 3);
    let net = InfuseNet::init(4, &cfg, Some(&base)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = sample_spss_batch(&w, &stage(Stage::Spss, 1, 1e-3), &mut rng).unwrap();
    let (loss, grads) = infu_loss_and_grads(&base, &net, &batch, &mut rng).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert!(grads
        .keys()
        .all(|n| n.starts_with("infusenet.") || n.starts_with("proj.")));
    let nonzero = |n: &str| grads[n].data().iter().any(|&v| v != 0.0);
    assert!(nonzero("infusenet.heads.0.0.w"));
    assert!(!nonzero("proj.mlp1.w"));
}

#[test]
fn one_step_opens_the_identity_path() {
    let cfg = small();
    let w = world();
    let base = live_base(&cfg, 5);
    let mut net = InfuseNet::init(6, &cfg, Some(&base)).unwrap();
    let before = base.params().clone();
    let scfg = stage(Stage::Spss, 1, 1e-3);
    let mut opt = AdamW::new(scfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = sample_spss_batch(&w, &scfg, &mut rng).unwrap();
    train_step_infu(&base, &mut net, &mut opt, &batch, &mut rng, 0, &scfg).unwrap();
    assert_eq!(base.params(), &before);
    assert!(net
        .params()
        .iter()
        .all(|(_, t)| t.data().iter().all(|&v| v as f32 as f64 == v)));
    let (_, grads) = infu_loss_and_grads(&base, &net, &batch, &mut rng).unwrap();
    assert!(grads["proj.mlp1.w"].data().iter().any(|&v| v != 0.0));
    assert!(grads["infusenet.blocks.0.img.qkv.w"]
        .data()
        .iter()
        .any(|&v| v != 0.0));
}

#[test]
fn non_finite_loss_aborts_with_step_lr_and_seed() {
    let cfg = small();
    let w = world();
    let base = init_base(7, &cfg).unwrap();
    let mut store = base.params().clone();
    for v in store.get_mut("base.final.out.w").unwrap().data_mut() {
        *v = f64::NAN;
    }
    let poisoned = BaseModel::from_params(&cfg, store).unwrap();
    let net = InfuseNet::init(8, &cfg, Some(&base)).unwrap();
    let scfg = StageConfig {
        seed: 42,
        ..stage(Stage::Spss, 3, 1e-3)
    };
    match pretrain_spss(&w, &poisoned, net, &scfg, &mut quiet()) {
        Err(InfuError::NonFinite { step, lr, seed }) => {
            assert_eq!((step, lr, seed), (0, 1e-3, 42));
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn stage_mismatch_is_rejected() {
    let cfg = small();
    let w = world();
    let base = init_base(0, &cfg).unwrap();
    let net = InfuseNet::init(1, &cfg, Some(&base)).unwrap();
    assert!(pretrain_spss(&w, &base, net, &stage(Stage::Sft, 1, 1e-3), &mut quiet()).is_err());
    assert!(pretrain_base(&w, &cfg, 0, &stage(Stage::Spss, 1, 1e-3), &mut quiet()).is_err());
}

#[test]
fn stage1_is_reproducible_from_its_seeds() {
    let cfg = small();
    let w = world();
    let base = live_base(&cfg, 9);
    let run = |seed| {
        let net = InfuseNet::init(10, &cfg, Some(&base)).unwrap();
        let scfg = StageConfig {
            seed,
            ..stage(Stage::Spss, 4, 1e-3)
        };
        pretrain_spss(&w, &base, net, &scfg, &mut quiet()).unwrap()
    };
    let (a, la) = run(1);
    let (b, lb) = run(1);
    assert_eq!(a.params(), b.params());
    assert_eq!(la, lb);
    let (c, _) = run(2);
    assert_ne!(a.params(), c.params());
}

/// Mean branch loss over fixed batches, so two nets see identical noise.
fn held_out_loss(w: &ToyWorld, base: &BaseModel, net: &InfuseNet) -> f64 {
    let scfg = StageConfig {
        batch_size: 32,
        ..stage(Stage::Spss, 1, 1e-3)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xe7a1);
    let n = 8;
    (0..n)
        .map(|_| {
            let batch = sample_spss_batch(w, &scfg, &mut rng).unwrap();
            infu_loss_and_grads(base, net, &batch, &mut rng).unwrap().0
        })
        .sum::<f64>()
        / n as f64
}

#[test]
fn stage1_training_beats_the_frozen_branch() {
    let cfg = small();
    let w = world();
    let (base, _) =
        pretrain_base(&w, &cfg, 11, &stage(Stage::Base, 150, 2e-3), &mut quiet()).unwrap();
    let fresh = InfuseNet::init(12, &cfg, Some(&base)).unwrap();
    let (trained, log) = pretrain_spss(
        &w,
        &base,
        fresh.clone(),
        &stage(Stage::Spss, 500, 2e-3),
        &mut quiet(),
    )
    .unwrap();
    assert!(log.losses.iter().all(|l| l.is_finite()));
    let (frozen, ours) = (
        held_out_loss(&w, &base, &fresh),
        held_out_loss(&w, &base, &trained),
    );
    assert!(ours < frozen, "trained {ours} vs frozen {frozen}");
}

#[test]
fn ideal_blend_synthesis_accepts_everything() {
    let cfg = small();
    let w = world();
    let base = init_base(13, &cfg).unwrap();
    let net = InfuseNet::init(14, &cfg, Some(&base)).unwrap();
    let scfg = StageConfig {
        spms_blend_gamma: 1.0,
        seed: 3,
        ..stage(Stage::Sft, 1, 1e-3)
    };
    let (recs, report) = synthesize_spms(&w, &base, &net, 20, 2, &scfg).unwrap();
    assert_eq!(recs.len(), 20);
    assert_eq!(report.attempts, 20);
    assert_eq!(report.acceptance_rate(), 1.0);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.record_id, i);
        assert_ne!(r.prompt_a, r.prompt_b);
        assert!(r
            .target_image
            .bit_eq(&w.render(&w.identity(r.id_seed), r.prompt_b)));
        assert!(r
            .source_image
            .bit_eq(&w.render(&w.identity(r.id_seed), r.prompt_a)));
        assert!(r.accepted_id_loss <= scfg.spms_filter_tau);
    }
    let (again, _) = synthesize_spms(&w, &base, &net, 20, 2, &scfg).unwrap();
    assert_eq!(recs, again);
    assert!(synthesize_spms(&w, &base, &net, 0, 2, &scfg).is_err());
}

#[test]
fn raw_candidates_of_an_untrained_model_are_filtered_out() {
    let cfg = small();
    let w = world();
    let base = init_base(15, &cfg).unwrap();
    let net = InfuseNet::init(16, &cfg, Some(&base)).unwrap();
    let scfg = StageConfig {
        spms_blend_gamma: 0.0,
        ..stage(Stage::Sft, 1, 1e-3)
    };
    assert!(synthesize_spms(&w, &base, &net, 4, 2, &scfg).is_err());
}

#[test]
fn sft_batches_pick_the_identity_source() {
    let cfg = small();
    let w = world();
    let base = init_base(17, &cfg).unwrap();
    let net = InfuseNet::init(18, &cfg, Some(&base)).unwrap();
    let mut scfg = StageConfig {
        spms_blend_gamma: 1.0,
        ..stage(Stage::Sft, 1, 1e-3)
    };
    let (recs, _) = synthesize_spms(&w, &base, &net, 1, 2, &scfg).unwrap();
    let r = &recs[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = sample_sft_batch(&w, &recs, &scfg, &mut rng).unwrap();
    assert!(b.id_embeddings.iter().all(|e| e.bit_eq(&r.id_embedding)));
    scfg.spss_synthetic_sft = true;
    let b = sample_sft_batch(&w, &recs, &scfg, &mut rng).unwrap();
    let own = w
        .encode_identity_cond(&r.target_image, &r.prompt_b.face_box().keypoints())
        .unwrap();
    assert!(b.id_embeddings.iter().all(|e| e.bit_eq(&own)));
    assert!(sample_sft_batch(&w, &[], &scfg, &mut rng).is_err());
}

#[test]
fn sft_starts_from_a_fresh_optimizer_and_can_be_skipped() {
    let cfg = small();
    let w = world();
    let base = init_base(19, &cfg).unwrap();
    let fresh = InfuseNet::init(20, &cfg, Some(&base)).unwrap();
    let (stage1, _) =
        pretrain_spss(&w, &base, fresh, &stage(Stage::Spss, 3, 1e-3), &mut quiet()).unwrap();
    let scfg = StageConfig {
        spms_blend_gamma: 1.0,
        seed: 5,
        ..stage(Stage::Sft, 1, 1e-3)
    };
    let (recs, _) = synthesize_spms(&w, &base, &stage1, 8, 2, &scfg).unwrap();

    let (tuned, log) = sft_spms(&w, &base, stage1.clone(), &recs, &scfg, &mut quiet()).unwrap();
    assert_eq!(log.losses.len(), 1);
    let mut manual = stage1.clone();
    let mut opt = AdamW::new(scfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(scfg.seed);
    let batch = sample_sft_batch(&w, &recs, &scfg, &mut rng).unwrap();
    train_step_infu(&base, &mut manual, &mut opt, &batch, &mut rng, 0, &scfg).unwrap();
    assert_eq!(tuned.params(), manual.params());

    let skip = StageConfig {
        no_sft: true,
        ..scfg.clone()
    };
    let (same, log) = sft_spms(&w, &base, stage1.clone(), &recs, &skip, &mut quiet()).unwrap();
    assert_eq!(same.params(), stage1.params());
    assert!(log.losses.is_empty());
    assert!(sft_spms(&w, &base, stage1, &[], &scfg, &mut quiet()).is_err());
}
