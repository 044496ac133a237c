mod common;

use menisc_autograd::{Graph, Tensor};
use menisc_core::checkpoint::{load_checkpoint, read_checkpoint_meta};
use menisc_core::error::Error;
use menisc_core::training::{
    bce_loss, combined_loss, dice_loss, random_grid_search, simulate_early_stopping, train, LossKind, Sample,
    SearchSpace, TrainConfig,
};
use menisc_core::unet::{UNet3D, UNet3DConfig};
use menisc_core::vit::{FreezePolicy, PromptlessViT, PromptlessViTConfig};
use proptest::prelude::*;

fn loss_f32(kind: LossKind, x: &Tensor<f32>, t: &Tensor<f32>) -> f32 {
    let g = Graph::<f32>::inference();
    let v = g.constant(x.clone());
    match kind {
        LossKind::Bce => bce_loss(&v, t),
        LossKind::Dice => dice_loss(&v, t, 1.0),
        LossKind::BcePlusDice => combined_loss(&v, t, 1.0),
    }
    .unwrap()
    .item()
}

fn grad_f32(kind: LossKind, x: &Tensor<f32>, t: &Tensor<f32>) -> Tensor<f32> {
    let g = Graph::<f32>::new();
    let v = g.input(x.clone());
    let l = match kind {
        LossKind::Bce => bce_loss(&v, t),
        LossKind::Dice => dice_loss(&v, t, 1.0),
        LossKind::BcePlusDice => combined_loss(&v, t, 1.0),
    }
    .unwrap();
    g.backward(l).unwrap().wrt(v).unwrap().clone()
}

fn case_4x4x2() -> (Tensor<f32>, Tensor<f32>) {
    let x = common::random(&[4, 4, 2], 21).cast::<f32>().map(|v| 2.0 * v);
    let t = Tensor::from_fn(&[4, 4, 2], |i| ((i * 5) % 3 == 0) as u8 as f32);
    (x, t)
}

#[test]
fn loss_gradients_match_finite_differences_in_f32() {
    let (x, t) = case_4x4x2();
    for kind in [LossKind::Dice, LossKind::BcePlusDice, LossKind::Bce] {
        let a = grad_f32(kind, &x, &t);
        let h = 1e-2f32;
        let mut worst = 0f64;
        for k in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            let fd = ((loss_f32(kind, &p, &t) - loss_f32(kind, &m, &t)) / (2.0 * h)) as f64;
            let ak = a.data()[k] as f64;
            worst = worst.max((fd - ak).abs() / fd.abs().max(ak.abs()).max(1e-3));
        }
        assert!(worst < 1e-3, "{kind:?}: worst relative error {worst}");
    }
}

#[test]
fn combined_is_exactly_bce_plus_dice() {
    for seed in 0..5 {
        let x = common::random(&[3, 5, 2], seed).map(|v| 4.0 * v);
        let t = Tensor::from_fn(&[3, 5, 2], |i| ((i + seed as usize) % 4 == 0) as u8 as f64);
        let g = Graph::<f64>::new();
        let v = g.constant(x);
        let c = combined_loss(&v, &t, 1.0).unwrap().item();
        let b = bce_loss(&v, &t).unwrap().item();
        let d = dice_loss(&v, &t, 1.0).unwrap().item();
        assert!((c - (b + d)).abs() < 1e-12);
    }
}

#[test]
fn bce_reference_cases() {
    let one = |x: f32, t: f32| loss_f32(LossKind::Bce, &Tensor::full(&[1], x), &Tensor::full(&[1], t));
    assert!((one(0.0, 1.0) - std::f32::consts::LN_2).abs() < 1e-6);
    assert!(one(100.0, 1.0) < 1e-6);
    assert!(loss_f32(LossKind::Bce, &Tensor::full(&[8], -100.0), &Tensor::zeros(&[8])) < 1e-6);
    assert!(one(-100.0, 1.0).is_finite());
    let g = Graph::<f32>::new();
    let v = g.input(Tensor::from_fn(&[4], |i| [100.0, -100.0, 100.0, -100.0][i]));
    let grads = g.backward(bce_loss(&v, &Tensor::from_fn(&[4], |i| (i % 2) as f32)).unwrap()).unwrap();
    assert!(grads.wrt(v).unwrap().is_finite());
}

#[test]
fn dice_reference_cases() {
    let t = Tensor::from_fn(&[10], |i| (i < 4) as u8 as f32);
    let x = t.map(|v| if v > 0.5 { 100.0 } else { -100.0 });
    assert!(loss_f32(LossKind::Dice, &x, &t) < 1e-3);
    assert!(loss_f32(LossKind::BcePlusDice, &x, &t) < 1e-3);
    let empty = loss_f32(LossKind::Dice, &Tensor::full(&[10], 2.0), &Tensor::zeros(&[10]));
    assert!(empty.is_finite() && (0.0..=1.0).contains(&empty));
    let g = Graph::<f32>::new();
    assert!(matches!(dice_loss(&g.constant(Tensor::zeros(&[3])), &Tensor::zeros(&[4]), 1.0), Err(Error::InvalidArgument(_))));
}

#[test]
fn worsening_any_voxel_never_lowers_combined_loss() {
    let t = Tensor::from_fn(&[3, 3, 3], |i| ((i * 7) % 5 < 2) as u8 as f64);
    let x = common::random(&[3, 3, 3], 4).map(|v| 3.0 * v);
    let eval = |x: &Tensor<f64>| {
        let g = Graph::<f64>::new();
        combined_loss(&g.constant(x.clone()), &t, 1.0).unwrap().item()
    };
    let base = eval(&x);
    for k in 0..27 {
        for step in [0.1, 1.0, 5.0] {
            let mut worse = x.clone();
            // move the probability away from the target
            worse.data_mut()[k] += if t.data()[k] > 0.5 { -step } else { step };
            assert!(eval(&worse) >= base, "voxel {k}, step {step}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_permutation_invariant(
        pairs in prop::collection::vec((-6.0f64..6.0, prop::bool::ANY), 2..40),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed));
        let eval = |p: &[(f64, bool)], kind: LossKind| {
            let x = Tensor::new(&[p.len()], p.iter().map(|v| v.0).collect()).unwrap();
            let t = Tensor::new(&[p.len()], p.iter().map(|v| v.1 as u8 as f64).collect()).unwrap();
            let g = Graph::<f64>::new();
            menisc_core::training::loss::loss(kind, &g.constant(x), &t, 1.0).unwrap().item()
        };
        for kind in [LossKind::Bce, LossKind::Dice, LossKind::BcePlusDice] {
            prop_assert!((eval(&pairs, kind) - eval(&shuffled, kind)).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stopping_bounds(losses in prop::collection::vec(0.0f64..10.0, 1..60), patience in 1usize..8) {
        let (ran, best) = simulate_early_stopping(&losses, patience);
        let best = best.unwrap();
        prop_assert!(ran <= losses.len());
        if ran < losses.len() {
            prop_assert!(ran > patience);
            prop_assert_eq!(ran - best, patience);
        }
        prop_assert!(ran - best <= patience);
        let min = losses[..ran].iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(losses[best - 1], min);
        prop_assert!(losses[..best - 1].iter().all(|&l| l > min));
    }
}

#[test]
fn early_stopping_reference_series() {
    assert_eq!(simulate_early_stopping(&[3.0, 2.0, 2.5, 2.4, 2.3, 2.2, 2.1], 5), (7, Some(2)));
    let decreasing: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
    assert_eq!(simulate_early_stopping(&decreasing, 5), (10, Some(10)));
    // ties are not improvements
    assert_eq!(simulate_early_stopping(&[1.0, 1.0, 1.0], 2), (3, Some(1)));
}

fn tiny_unet_data() -> (Vec<Sample>, Vec<Sample>) {
    let make = |seed: u64| {
        let input = common::random(&[1, 8, 8, 8], seed).cast::<f32>();
        let target = input.map(|v| (v > 0.2) as u8 as f32);
        Sample { input, target }
    };
    ((0..4).map(make).collect(), (10..12).map(make).collect())
}

fn tiny_unet() -> UNet3D<f32> {
    UNet3D::new(UNet3DConfig { base_features: 2, depth: 2, ..UNet3DConfig::toy() }, 3).unwrap()
}

#[test]
fn training_is_reproducible_for_a_seed() {
    let (tr, va) = tiny_unet_data();
    let cfg = TrainConfig { max_epochs: 6, batch_size: 3, seed: 11, ..TrainConfig::unet() };
    let a = train(&mut tiny_unet(), &tr, &va, &cfg, None).unwrap().history;
    let b = train(&mut tiny_unet(), &tr, &va, &cfg, None).unwrap().history;
    assert_eq!(a.train_loss, b.train_loss);
    assert_eq!(a.val_loss, b.val_loss);
    assert_eq!(a.best_epoch, b.best_epoch);
    assert_eq!(a.train_loss.len(), a.val_loss.len());
    assert_eq!(a.train_loss.len(), a.seconds.len());
    let min = a.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_val_loss, min);
    let c = train(&mut tiny_unet(), &tr, &va, &TrainConfig { seed: 12, ..cfg }, None).unwrap().history;
    assert_ne!(a.train_loss, c.train_loss);
}

#[test]
fn run_directory_holds_all_artifacts_and_best_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va) = tiny_unet_data();
    let cfg = TrainConfig { max_epochs: 4, batch_size: 2, ..TrainConfig::unet() };
    let mut m = tiny_unet();
    let out = train(&mut m, &tr, &va, &cfg, Some(dir.path())).unwrap();
    for f in ["config.json", "history.csv", "best.safetensors", "summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let rows = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + out.history.train_loss.len());
    let meta = read_checkpoint_meta(out.checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(meta.kind, "unet3d");
    let mut restored = tiny_unet();
    load_checkpoint(out.checkpoint.unwrap(), &mut restored.params).unwrap();
    for ((_, a), (_, b)) in restored.params.iter().zip(m.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn training_errors() {
    let (tr, va) = tiny_unet_data();
    let cfg = TrainConfig::unet();
    assert!(matches!(train(&mut tiny_unet(), &[], &va, &cfg, None), Err(Error::Empty(_))));
    assert!(matches!(train(&mut tiny_unet(), &tr, &[], &cfg, None), Err(Error::Empty(_))));
    assert!(train(&mut tiny_unet(), &tr, &va, &TrainConfig { learning_rate: 0.0, ..cfg.clone() }, None).is_err());
    assert!(train(&mut tiny_unet(), &tr, &va, &TrainConfig { batch_size: 0, ..cfg.clone() }, None).is_err());
    let mut broken = tiny_unet();
    let id = broken.params.id("head.bias").unwrap();
    broken.params.value_mut(id).data_mut()[0] = f32::NAN;
    assert!(matches!(train(&mut broken, &tr, &va, &cfg, None), Err(Error::NonFiniteLoss(_))));
}

#[test]
fn one_step_only_touches_trainable_parameters() {
    let cfg_m = PromptlessViTConfig {
        image_size: 32,
        patch_size: 8,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        mlp_dim: 8,
        window_size: 2,
        global_attn_indexes: vec![],
        prompt_dim: 16,
        decoder_heads: 2,
        decoder_mlp_dim: 8,
        iou_head_hidden: 8,
        ..PromptlessViTConfig::toy()
    };
    let mut m = PromptlessViT::<f32>::new(cfg_m, 0).unwrap();
    assert_eq!(m.freeze, FreezePolicy::DecoderOnly);
    let before = m.params.clone();
    let s = Sample {
        input: Tensor::from_fn(&[3, 32, 32], |i| (i % 3) as f32),
        target: Tensor::from_fn(&[1, 32, 32], |i| (i % 2) as f32),
    };
    let cfg = TrainConfig { max_epochs: 1, batch_size: 1, learning_rate: 1e-2, ..TrainConfig::sam1() };
    train(&mut m, std::slice::from_ref(&s), std::slice::from_ref(&s), &cfg, None).unwrap();
    let mut changed = 0;
    for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
        if a.name.starts_with("mask_decoder.") {
            changed += (a.value != b.value) as usize;
        } else {
            assert_eq!(a.value, b.value, "{} is frozen", a.name);
        }
    }
    assert!(changed > 0);
}

#[test]
fn grid_search_exhausts_and_is_deterministic() {
    let space = SearchSpace { learning_rates: vec![1e-2, 1e-3, 1e-4], batch_sizes: vec![2, 4] };
    let score = |c: &TrainConfig| Ok((c.learning_rate.log10() + 3.0).abs() + c.batch_size as f64 * 0.01);
    let r = random_grid_search(&space, &TrainConfig::unet(), 6, 1, score).unwrap();
    assert_eq!(r.leaderboard.len(), 6);
    let mut seen: Vec<(u64, usize)> = r.leaderboard.iter().map(|t| (t.config.learning_rate.to_bits(), t.config.batch_size)).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 6);
    assert_eq!((r.best.learning_rate, r.best.batch_size), (1e-3, 2));
    assert!(r.leaderboard.windows(2).all(|w| w[0].best_val_loss <= w[1].best_val_loss));
    let a = random_grid_search(&space, &TrainConfig::unet(), 3, 9, score).unwrap();
    let b = random_grid_search(&space, &TrainConfig::unet(), 3, 9, score).unwrap();
    assert_eq!(a, b);
    assert!(random_grid_search(&space, &TrainConfig::unet(), 7, 1, score).is_err());
    assert!(random_grid_search(&space, &TrainConfig::unet(), 0, 1, score).is_err());
}

#[test]
fn presets() {
    let s1 = TrainConfig::sam1();
    assert_eq!((s1.batch_size, s1.learning_rate, s1.loss), (8, 5e-6, LossKind::Bce));
    let s2 = TrainConfig::sam2();
    assert_eq!((s2.batch_size, s2.learning_rate, s2.loss), (16, 5e-7, LossKind::Bce));
    let u = TrainConfig::unet();
    assert_eq!((u.batch_size, u.learning_rate, u.loss), (4, 1e-3, LossKind::BcePlusDice));
    assert_eq!((u.patience, u.max_epochs), (5, 200));
    assert_eq!(TrainConfig::preset("sam2").unwrap(), s2);
    assert!(TrainConfig::preset("sam3").is_err());
}
