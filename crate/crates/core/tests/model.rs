use infu_core::config::ModelConfig;
use infu_core::dit::{init_base, BaseModel};
use infu_core::infusenet::{
    infu_velocity, producer_of, residual_map, Conditioning, InfuseNet, ResidualSet,
};
use infu_core::io::checkpoint::{decode, encode};
use infu_core::nn::{
    init_joint_block, joint_block, linear, patches, timestep_embed, timestep_sinusoid, unpatch,
    TokenKind, TokenSequence,
};
use infu_core::params::{Binder, Init, ParamStore};
use infu_core::selftest::{composed_gradcheck, perturb, tiny_config};
use infu_core::toyworld::{ControlImage, Prompt};
use infu_tensor::gradcheck::{check_gradients, GradCheckOptions};
use infu_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

fn small() -> ModelConfig {
    ModelConfig {
        token_dim: 16,
        heads: 2,
        mlp_ratio: 2,
        base_blocks: 8,
        infuse_blocks: 2,
        factor: 4,
        ..ModelConfig::default()
    }
}

/// A base whose zero-initialized layers have been randomized, so its
/// velocity depends on every input.
fn live_base(cfg: &ModelConfig, seed: u64) -> BaseModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
    let fresh = init_base(seed, cfg).unwrap();
    let mut store = perturb(fresh.params(), 0.2, &mut rng);
    store.round_to_f32();
    BaseModel::from_params(cfg, store).unwrap()
}

fn live_net(cfg: &ModelConfig, base: &BaseModel, seed: u64) -> InfuseNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1f05);
    let fresh = InfuseNet::init(seed, cfg, Some(base)).unwrap();
    InfuseNet::from_params(cfg, perturb(fresh.params(), 0.2, &mut rng)).unwrap()
}

fn control(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ControlImage {
    ControlImage {
        pixels: Tensor::from_fn(cfg.image_shape().to_vec(), |_| rng.gen_range(0.0..1.0)),
    }
}

#[test]
fn config_validation() {
    ModelConfig::default().validate().unwrap();
    small().validate().unwrap();
    let bad = |f: fn(&mut ModelConfig)| {
        let mut c = ModelConfig::default();
        f(&mut c);
        c.validate().is_err()
    };
    assert!(bad(|c| c.base_blocks = 7));
    assert!(bad(|c| c.patch_size = 3));
    assert!(bad(|c| c.heads = 3));
    assert!(bad(|c| c.token_dim = 0));
    assert!(bad(|c| c.residual_scale = f64::NAN));
}

#[test]
fn patchify_examples() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = normal(&mut rng, &cfg.image_shape());
    let p = patches(&img, &cfg).unwrap();
    assert_eq!(p.shape(), &[16, cfg.patch_dim()]);
    assert!(unpatch(&p, &cfg).unwrap().bit_eq(&img));
    assert!(patches(&Tensor::zeros([3, 15, 15]), &cfg).is_err());
    assert!(unpatch(&Tensor::zeros([15, 48]), &cfg).is_err());
}

#[test]
fn patch_embedding_round_trips_through_inverse_projections() {
    let cfg = ModelConfig::default();
    let (pd, d) = (cfg.patch_dim(), cfg.token_dim);
    let mut store = ParamStore::new();
    store.insert(
        "embed.w",
        Tensor::from_fn(vec![pd, d], |i| f64::from(i / d == i % d)),
    );
    store.insert("embed.b", Tensor::zeros([d]));
    store.insert(
        "back.w",
        Tensor::from_fn(vec![d, pd], |i| f64::from(i / pd == i % pd)),
    );
    store.insert("back.b", Tensor::zeros([pd]));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = normal(&mut rng, &cfg.image_shape());
    let mut g = Graph::new();
    let mut b = Binder::new(&store, false);
    let x = g.constant(patches(&img, &cfg).unwrap());
    let tok = linear(&mut g, &mut b, "embed", x).unwrap();
    let back = linear(&mut g, &mut b, "back", tok).unwrap();
    assert!(unpatch(g.value(back), &cfg).unwrap().bit_eq(&img));
}

#[test]
fn swapping_patches_swaps_their_embeddings() {
    let cfg = ModelConfig::default();
    let base = init_base(3, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = normal(&mut rng, &cfg.image_shape());
    let p = patches(&img, &cfg).unwrap();
    let (a, c, w) = (2, 9, cfg.patch_dim());
    let mut swapped = p.clone();
    let data = swapped.data_mut();
    for k in 0..w {
        data.swap(a * w + k, c * w + k);
    }
    let embed = |rows: &Tensor| {
        let mut g = Graph::new();
        let mut b = Binder::new(base.params(), false);
        let x = g.constant(rows.clone());
        let y = linear(&mut g, &mut b, "base.patch", x).unwrap();
        g.value(y).clone()
    };
    let (e, s) = (embed(&p), embed(&swapped));
    let d = cfg.token_dim;
    for row in 0..16 {
        let src = if row == a {
            c
        } else if row == c {
            a
        } else {
            row
        };
        assert_eq!(
            &s.data()[row * d..(row + 1) * d],
            &e.data()[src * d..(src + 1) * d]
        );
    }
}

#[test]
fn timestep_sinusoid_and_embedding() {
    let raw = timestep_sinusoid(0.0, 8).unwrap();
    assert_eq!(&raw[..4], &[0.0; 4]);
    assert_eq!(&raw[4..], &[1.0; 4]);
    assert!(timestep_sinusoid(-0.1, 8).is_err());
    assert!(timestep_sinusoid(1.1, 8).is_err());

    let cfg = ModelConfig::default();
    let base = init_base(4, &cfg).unwrap();
    let embed = |ts: &[f64]| {
        let mut g = Graph::new();
        let mut b = Binder::new(base.params(), false);
        let e = timestep_embed(&mut g, &mut b, "base.time", ts, &cfg).unwrap();
        g.value(e).clone()
    };
    let e = embed(&[0.1, 0.9]);
    assert!(e.bit_eq(&embed(&[0.1, 0.9])));
    let d = cfg.token_dim;
    let (a, b) = (&e.data()[..d], &e.data()[d..]);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(dot / (norm(a) * norm(b)) < 0.99);
}

/// One randomized joint block over `img_count` image and `cond_count`
/// conditioning tokens; returns the image-stream output.
struct BlockRig {
    cfg: ModelConfig,
    store: ParamStore,
    img: Tensor,
    cond: Tensor,
    temb: Tensor,
}

impl BlockRig {
    fn new(img_count: usize, cond_count: usize, seed: u64) -> Self {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        init_joint_block(&mut init, "blk", "text", &cfg, false);
        let store = perturb(&store, 0.3, &mut rng);
        let d = cfg.token_dim;
        Self {
            img: normal(&mut rng, &[img_count, d]),
            cond: normal(&mut rng, &[cond_count, d]),
            temb: normal(&mut rng, &[1, d]),
            cfg,
            store,
        }
    }

    fn run(&self) -> infu_core::Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store, false);
        let img = TokenSequence {
            tokens: g.constant(self.img.clone()),
            count: self.img.shape()[0],
            kind: TokenKind::Image,
        };
        let cond = TokenSequence {
            tokens: g.constant(self.cond.clone()),
            count: self.cond.shape()[0],
            kind: TokenKind::Text,
        };
        let temb = g.constant(self.temb.clone());
        let (out, _) = joint_block(
            &mut g, &mut b, "blk", "text", &self.cfg, img, cond, temb, 1, false,
        )?;
        Ok(g.value(out.tokens).clone())
    }

    fn zero_cols(&mut self, name: &str, start: usize, len: usize) {
        let t = self.store.get_mut(name).unwrap();
        let cols = *t.shape().last().unwrap();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if (start..start + len).contains(&(i % cols)) {
                *v = 0.0;
            }
        }
    }
}

#[test]
fn zeroed_values_reduce_a_block_to_its_mlp_path() {
    let d = tiny_config().token_dim;
    let mut rig = BlockRig::new(1, 1, 5);
    for stream in ["img", "text"] {
        rig.zero_cols(&format!("blk.{stream}.qkv.w"), 2 * d, d);
        rig.zero_cols(&format!("blk.{stream}.qkv.b"), 2 * d, d);
    }
    let with_attention = rig.run().unwrap();
    rig.zero_cols("blk.img.out.w", 0, d);
    let without = rig.run().unwrap();
    assert!(with_attention.bit_eq(&without));
}

#[test]
fn attention_rows_are_convex_combinations() {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = g.constant(normal(&mut rng, &[5, 8]));
    let k = g.constant(normal(&mut rng, &[7, 8]));
    let v = g.constant(Tensor::full([7, 8], 1.0));
    let out = g.attention(q, k, v, 1, 2).unwrap();
    assert!(g.value(out).data().iter().all(|x| (x - 1.0).abs() < 1e-12));
}

#[test]
fn joint_attention_mixes_the_streams() {
    let rig = BlockRig::new(3, 2, 7);
    let before = rig.run().unwrap();
    let mut other = BlockRig::new(3, 2, 7);
    other.cond.data_mut()[0] += 0.5;
    assert!(!before.bit_eq(&other.run().unwrap()));
}

#[test]
fn joint_block_rejects_width_mismatch() {
    let mut rig = BlockRig::new(3, 2, 8);
    rig.cond = Tensor::zeros([2, 5]);
    assert!(rig.run().is_err());
}

#[test]
fn base_forward_residual_contract() {
    let cfg = small();
    let base = live_base(&cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = normal(&mut rng, &cfg.image_shape());
    let p = Some(Prompt::new(1, 2, 0).unwrap());
    let plain = base.velocity(&z, 0.4, p, None).unwrap();
    assert_eq!(plain.shape(), z.shape());
    let zeros = ResidualSet::zeros(&cfg);
    assert!(base
        .velocity(&z, 0.4, p, Some(&zeros))
        .unwrap()
        .bit_eq(&plain));

    let mut fifth = ResidualSet::zeros(&cfg);
    fifth.residuals[4] = normal(&mut rng, &[cfg.image_tokens(), cfg.token_dim]);
    assert!(!base
        .velocity(&z, 0.4, p, Some(&fifth))
        .unwrap()
        .bit_eq(&plain));

    let mut short = ResidualSet::zeros(&cfg);
    short.residuals.pop();
    assert!(base.velocity(&z, 0.4, p, Some(&short)).is_err());
    let mut wide = ResidualSet::zeros(&cfg);
    wide.residuals[0] = Tensor::zeros([cfg.image_tokens(), cfg.token_dim + 1]);
    assert!(base.velocity(&z, 0.4, p, Some(&wide)).is_err());
}

#[test]
fn residual_scale_multiplies_injected_residuals() {
    let cfg = small();
    let base = live_base(&cfg, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let z = normal(&mut rng, &cfg.image_shape());
    let mut res = ResidualSet::zeros(&cfg);
    res.residuals[2] = normal(&mut rng, &[cfg.image_tokens(), cfg.token_dim]);
    let mut doubled = res.clone();
    doubled.residuals[2] =
        Tensor::from_vec(res.residuals[2].data().iter().map(|v| 2.0 * v).collect())
            .reshape(vec![cfg.image_tokens(), cfg.token_dim])
            .unwrap();
    let scaled_cfg = ModelConfig {
        residual_scale: 2.0,
        ..cfg.clone()
    };
    let scaled = BaseModel::from_params(&scaled_cfg, base.params().clone()).unwrap();
    let a = scaled.velocity(&z, 0.6, None, Some(&res)).unwrap();
    let b = base.velocity(&z, 0.6, None, Some(&doubled)).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn init_base_is_seed_deterministic() {
    let cfg = small();
    let a = init_base(11, &cfg).unwrap();
    assert_eq!(a.params(), init_base(11, &cfg).unwrap().params());
    assert!(!init_base(12, &cfg)
        .unwrap()
        .params()
        .changed_names(a.params())
        .is_empty());
    assert!(a
        .params()
        .iter()
        .all(|(_, t)| t.data().iter().all(|&v| v as f32 as f64 == v)));
}

#[test]
fn saved_base_reproduces_its_outputs() {
    let cfg = small();
    let base = live_base(&cfg, 13);
    let mut store = base.params().clone();
    store.round_to_f32();
    let base = BaseModel::from_params(&cfg, store).unwrap();
    let loaded =
        BaseModel::from_params(&cfg, decode(&encode(base.params()).unwrap()).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = normal(&mut rng, &cfg.image_shape());
    let p = Some(Prompt::new(5, 0, 1).unwrap());
    assert!(base
        .velocity(&z, 0.3, p, None)
        .unwrap()
        .bit_eq(&loaded.velocity(&z, 0.3, p, None).unwrap()));
}

#[test]
fn base_checkpoint_layout_is_checked() {
    let cfg = small();
    let base = init_base(0, &cfg).unwrap();
    let mut store = base.params().clone();
    store.insert("base.extra", Tensor::zeros([1]));
    assert!(BaseModel::from_params(&cfg, store).is_err());
    let wider = ModelConfig {
        token_dim: 32,
        ..cfg.clone()
    };
    assert!(BaseModel::from_params(&wider, base.params().clone()).is_err());
}

#[test]
fn residual_map_examples() {
    assert_eq!(residual_map(1, 4, 2).unwrap(), vec![1, 2, 3, 4]);
    assert_eq!(residual_map(2, 4, 2).unwrap(), vec![5, 6, 7, 8]);
    assert_eq!(residual_map(3, 1, 5).unwrap(), vec![3]);
    assert!(residual_map(0, 4, 2).is_err());
    assert!(residual_map(3, 4, 2).is_err());
    assert!(residual_map(1, 0, 2).is_err());
}

#[test]
fn residual_map_partitions_every_small_layout() {
    for factor in 1..=64 {
        for n in 1..=64 / factor {
            let m = n * factor;
            let mut owner = vec![0; m + 1];
            for j in 1..=n {
                for k in residual_map(j, factor, n).unwrap() {
                    assert_eq!(owner[k], 0, "N={n} i={factor}: block {k} claimed twice");
                    owner[k] = j;
                    assert_eq!(producer_of(k, factor), j);
                }
            }
            assert!(
                owner[1..].iter().all(|&j| j > 0),
                "N={n} i={factor}: uncovered block"
            );
        }
    }
}

#[test]
fn fresh_branch_emits_zero_residuals_of_the_right_layout() {
    let cfg = small();
    let base = live_base(&cfg, 14);
    let net = InfuseNet::init(14, &cfg, Some(&base)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let z = normal(&mut rng, &cfg.image_shape());
    let set = net
        .residuals(
            &z,
            0.5,
            &control(&cfg, &mut rng),
            &normal(&mut rng, &[cfg.id_dim]),
        )
        .unwrap();
    assert!(set.all_zero());
    assert_eq!(set.residuals.len(), cfg.base_blocks);
    assert!(set
        .residuals
        .iter()
        .all(|r| r.shape() == [cfg.image_tokens(), cfg.token_dim]));
    assert_eq!(set.producers, vec![1, 1, 1, 1, 2, 2, 2, 2]);
    for name in net
        .params()
        .names()
        .filter(|n| n.starts_with("infusenet.heads."))
    {
        assert!(
            net.params()
                .get(name)
                .unwrap()
                .data()
                .iter()
                .all(|&v| v == 0.0),
            "{name}"
        );
    }
}

#[test]
fn branch_copies_base_weights_where_layouts_match() {
    let cfg = small();
    let base = live_base(&cfg, 15);
    let net = InfuseNet::init(15, &cfg, Some(&base)).unwrap();
    let p = |n: &str| net.params().get(n).unwrap().clone();
    assert_eq!(
        p("infusenet.patch.w"),
        base.params().get("base.patch.w").unwrap().clone()
    );
    assert_eq!(
        p("infusenet.time.mlp2.w"),
        base.params().get("base.time.mlp2.w").unwrap().clone()
    );
    assert_eq!(
        p("infusenet.blocks.1.img.qkv.w"),
        base.params()
            .get("base.blocks.4.img.qkv.w")
            .unwrap()
            .clone()
    );
    assert!(net
        .params()
        .names()
        .all(|n| n.starts_with("infusenet.") || n.starts_with("proj.")));
}

#[test]
fn fresh_branch_leaves_the_base_velocity_bit_identical() {
    let cfg = small();
    let base = live_base(&cfg, 16);
    let net = InfuseNet::init(16, &cfg, Some(&base)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..5 {
        let z = normal(&mut rng, &cfg.image_shape());
        let t = rng.gen_range(0.0..1.0);
        let p = Some(Prompt::from_index(rng.gen_range(0..48)));
        let with = infu_velocity(
            &base,
            &net,
            &z,
            t,
            p,
            &control(&cfg, &mut rng),
            &normal(&mut rng, &[cfg.id_dim]),
        )
        .unwrap();
        assert!(with.bit_eq(&base.velocity(&z, t, p, None).unwrap()));
    }
}

#[test]
fn identity_projection() {
    let cfg = small();
    let net = InfuseNet::init(17, &cfg, None).unwrap();
    let tokens = net.project_identity(&Tensor::zeros([cfg.id_dim])).unwrap();
    assert_eq!(tokens.shape(), &[cfg.id_tokens, cfg.token_dim]);
    assert!(tokens.data().iter().all(|&v| v == 0.0));
    assert!(net
        .project_identity(&Tensor::zeros([cfg.id_dim + 1]))
        .is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    assert_eq!(
        net.project_identity(&normal(&mut rng, &[cfg.id_dim]))
            .unwrap()
            .shape(),
        &[8, cfg.token_dim]
    );
}

#[test]
fn identity_projection_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let net = InfuseNet::init(18, &cfg, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let proj = perturb(&net.params().subset("proj."), 0.3, &mut rng);
    let names: Vec<String> = proj.names().cloned().collect();
    let emb = normal(&mut rng, &[2, cfg.id_dim]);
    let weights = normal(&mut rng, &[2 * cfg.id_tokens, cfg.token_dim]);
    let inputs: Vec<Tensor> = proj.iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(&inputs, GradCheckOptions::default(), |g, vars| {
        let mut b =
            Binder::with_bound(&proj, true, names.iter().cloned().zip(vars.iter().copied()));
        let e = g.constant(emb.clone());
        let toks = infu_core::infusenet::project_identity_graph(g, &mut b, &cfg, e).map_err(
            |e| match e {
                infu_core::InfuError::Tensor(t) => t,
                other => panic!("{other}"),
            },
        )?;
        let w = g.constant(weights.clone());
        let p = g.mul(toks.tokens, w)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn composed_model_gradients_match_finite_differences() {
    for seed in 0..2 {
        let err = composed_gradcheck(seed).unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn trained_branch_responds_to_identity_but_not_to_text() {
    let cfg = small();
    let base = live_base(&cfg, 19);
    let net = live_net(&cfg, &base, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let z = normal(&mut rng, &cfg.image_shape());
    let ctrl = control(&cfg, &mut rng);
    let (e1, e2) = (
        normal(&mut rng, &[cfg.id_dim]),
        normal(&mut rng, &[cfg.id_dim]),
    );
    let p = Some(Prompt::new(0, 1, 1).unwrap());
    let v1 = infu_velocity(&base, &net, &z, 0.5, p, &ctrl, &e1).unwrap();
    assert!(v1.bit_eq(&infu_velocity(&base, &net, &z, 0.5, p, &ctrl, &e1).unwrap()));
    assert!(!v1.bit_eq(&infu_velocity(&base, &net, &z, 0.5, p, &ctrl, &e2).unwrap()));

    let prompts_a = [Some(Prompt::new(0, 0, 0).unwrap())];
    let prompts_b = [None];
    let res = |prompts: &[Option<Prompt>]| {
        net.residuals_batch(
            std::slice::from_ref(&z),
            &Conditioning {
                ts: &[0.5],
                prompts,
                controls: std::slice::from_ref(&ctrl.pixels),
                id_embeddings: std::slice::from_ref(&e1),
            },
        )
        .unwrap()
    };
    assert_eq!(res(&prompts_a), res(&prompts_b));
}

#[test]
fn shared_heads_repeat_one_residual_per_branch_block() {
    let cfg = ModelConfig {
        shared_residual_heads: true,
        ..small()
    };
    let base = live_base(&cfg, 20);
    let net = live_net(&cfg, &base, 20);
    assert!(net.params().contains("infusenet.heads.0.w"));
    assert!(!net.params().contains("infusenet.heads.0.0.w"));
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let z = normal(&mut rng, &cfg.image_shape());
    let set = net
        .residuals(
            &z,
            0.2,
            &control(&cfg, &mut rng),
            &normal(&mut rng, &[cfg.id_dim]),
        )
        .unwrap();
    assert!(set.residuals[0].bit_eq(&set.residuals[3]));
    assert!(!set.residuals[3].bit_eq(&set.residuals[4]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn base_velocity_is_finite(seed in any::<u64>(), t in 0.0f64..=1.0, prompt in 0usize..48) {
        let cfg = small();
        let base = live_base(&cfg, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::from_fn(cfg.image_shape().to_vec(), |_| rng.gen_range(-5.0..=5.0));
        let v = base.velocity(&z, t, Some(Prompt::from_index(prompt)), None).unwrap();
        prop_assert!(v.all_finite());
    }

    #[test]
    fn residual_map_covers_each_block_once(n in 1usize..=16, factor in 1usize..=4) {
        let m = n * factor;
        let mut all: Vec<usize> = (1..=n).flat_map(|j| residual_map(j, factor, n).unwrap()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (1..=m).collect::<Vec<_>>());
    }
}
