mod common;

use proptest::prelude::*;

use reid_core::augment::{
    color_jitter, color_pca, compose, flip_horizontal, random_crop, random_erasing, random_flip, resize_bilinear,
    AugmentConfig, ErasingConfig, JitterConfig,
};
use reid_core::backbone::{Backbone, BackboneConfig, Block, Mode, StageSpec};
use reid_core::consensus::{l2_normalize, ConsensusConfig, ConsensusNet};
use reid_core::dataset::{generate_synthetic, BatchSampler, SynthConfig};
use reid_core::eval::{evaluate_descriptors, Meta};
use reid_core::image::ImageBuffer;
use reid_core::{Rng, Tensor};

fn image(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut r = Rng::new(seed);
    ImageBuffer::from_fn(h, w, |_, _| [r.uniform() as f32, r.uniform() as f32, r.uniform() as f32])
}

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.normal(0.0, 1.0)).collect()).unwrap()
}

fn tiny_backbone(k: usize, mode: Mode) -> BackboneConfig {
    BackboneConfig {
        num_blocks: 2,
        factors_per_block: k,
        stage_plan: vec![StageSpec::new(1, 8, 1), StageSpec::new(1, 8, 2)],
        stem_channels: 4,
        feature_dim: 6,
        mode,
        ..BackboneConfig::toy()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evaluator_matches_brute_force(seed in any::<u64>()) {
        let inst = common::random_instance(&mut Rng::new(seed));
        prop_assert!(common::oracle_gap(&inst) <= 1e-12);
    }

    #[test]
    fn cmc_and_map_are_bounded_and_monotone(seed in any::<u64>()) {
        let inst = common::random_instance(&mut Rng::new(seed));
        let r = evaluate_descriptors(&inst.q, &inst.qm, &inst.g, &inst.gm).unwrap();
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.cmc.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
        prop_assert!((0.0..=1.0).contains(&r.map));
    }

    #[test]
    fn increasing_transform_of_descriptors_keeps_scores(seed in any::<u64>(), factor in 0.1f64..10.0) {
        // scaling every descriptor scales every distance by the same factor
        let inst = common::random_instance(&mut Rng::new(seed));
        let scale = |v: &[Vec<f64>]| v.iter().map(|d| d.iter().map(|x| x * factor).collect()).collect::<Vec<Vec<f64>>>();
        let a = evaluate_descriptors(&inst.q, &inst.qm, &inst.g, &inst.gm).unwrap();
        let b = evaluate_descriptors(&scale(&inst.q), &inst.qm, &scale(&inst.g), &inst.gm).unwrap();
        prop_assert_eq!(a.cmc, b.cmc);
        prop_assert!((a.map - b.map).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_gives_unit_map(ids in 1u32..5, per in 1usize..4) {
        // every identity sits at its own point, far from the others
        let mut q = Vec::new();
        let mut qm = Vec::new();
        let mut g = Vec::new();
        let mut gm = Vec::new();
        for id in 1..=ids {
            let p = vec![100.0 * id as f64, 0.0];
            q.push(p.clone());
            qm.push(Meta { identity: id, camera: 1 });
            for j in 0..per {
                g.push(vec![p[0] + j as f64 * 0.01, 0.0]);
                gm.push(Meta { identity: id, camera: 2 });
            }
        }
        let r = evaluate_descriptors(&q, &qm, &g, &gm).unwrap();
        prop_assert_eq!(r.map, 1.0);
        prop_assert_eq!(r.rank1(), 1.0);
    }

    #[test]
    fn cross_entropy_is_non_negative(seed in any::<u64>(), b in 1usize..4, c in 2usize..6) {
        let logits = tensor(&[b, c], seed).scale(5.0);
        let labels: Vec<usize> = (0..b).map(|i| (i * 7 + seed as usize) % c).collect();
        prop_assert!(logits.softmax_cross_entropy(&labels).unwrap().item() >= 0.0);
    }

    #[test]
    fn uniform_logits_give_log_classes(b in 1usize..5, c in 2usize..50, v in -20.0f64..20.0) {
        let logits = Tensor::<f64>::full(&[b, c], v).unwrap();
        let labels = vec![c - 1; b];
        prop_assert_eq!(logits.softmax_cross_entropy(&labels).unwrap().item(), (c as f64).ln());
    }

    #[test]
    fn concat_then_narrow_recovers_parts(seed in any::<u64>(), axis in 0usize..3, a in 1usize..4, b in 1usize..4) {
        let mut sa = vec![2, 3, 2];
        let mut sb = sa.clone();
        sa[axis] = a;
        sb[axis] = b;
        let (x, y) = (tensor(&sa, seed), tensor(&sb, seed ^ 1));
        let joined = Tensor::concat(&[x.clone(), y.clone()], axis).unwrap();
        prop_assert_eq!(joined.narrow(axis, 0, a).unwrap().to_vec(), x.to_vec());
        prop_assert_eq!(joined.narrow(axis, a, b).unwrap().to_vec(), y.to_vec());
    }

    #[test]
    fn identity_kernel_is_identity_map(seed in any::<u64>(), c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let x = tensor(&[2, c, h, w], seed);
        let mut k = vec![0.0; c * c];
        for i in 0..c {
            k[i * c + i] = 1.0;
        }
        let kernel = Tensor::new(&[c, c, 1, 1], k).unwrap();
        prop_assert_eq!(x.conv2d(&kernel, 1, 0).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn rng_streams_are_reproducible(seed in any::<u64>(), label in "[a-z]{1,8}") {
        let draw = |r: &Rng| { let mut s = r.split(&label); (0..8).map(|_| s.uniform()).collect::<Vec<_>>() };
        prop_assert_eq!(draw(&Rng::new(seed)), draw(&Rng::new(seed)));
    }

    #[test]
    fn transforms_keep_shape_and_range(seed in any::<u64>(), h in 2usize..20, w in 2usize..20) {
        let img = image(h, w, seed);
        let mut r = Rng::new(seed);
        let outs = [
            random_crop(&img, 3, &mut r),
            random_erasing(&img, &ErasingConfig { probability: 1.0, ..ErasingConfig::default() }, &mut r).0,
            random_flip(&img, 0.5, &mut r),
            color_jitter(&img, &JitterConfig { brightness: 0.9, contrast: 0.9, saturation: 0.9 }, &mut r),
            color_pca(&img, 1.0, &mut r),
        ];
        for o in outs {
            prop_assert_eq!(o.dims(), (h, w));
            prop_assert!(o.in_unit_range());
        }
        let resized = resize_bilinear(&img, h + 3, w.max(3) - 1);
        prop_assert_eq!(resized.dims(), (h + 3, w.max(3) - 1));
        prop_assert!(resized.in_unit_range());
    }

    #[test]
    fn disabled_transforms_are_identities(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let img = image(h, w, seed);
        let mut r = Rng::new(seed);
        let cfg = AugmentConfig::disabled();
        prop_assert_eq!(&random_crop(&img, 0, &mut r), &img);
        prop_assert_eq!(&random_erasing(&img, &cfg.erasing, &mut r).0, &img);
        prop_assert_eq!(&random_flip(&img, 0.0, &mut r), &img);
        prop_assert_eq!(&color_jitter(&img, &cfg.jitter, &mut r), &img);
        prop_assert_eq!(&color_pca(&img, 0.0, &mut r), &img);
        prop_assert_eq!(&flip_horizontal(&flip_horizontal(&img)), &img);
        prop_assert_eq!(&compose(&img, &cfg, &[(h, w)], &Rng::new(seed)), &vec![img.clone()]);
    }

    #[test]
    fn erasing_leaves_other_pixels_untouched(seed in any::<u64>(), h in 4usize..24, w in 4usize..24) {
        let img = image(h, w, seed);
        let cfg = ErasingConfig { probability: 1.0, ..ErasingConfig::default() };
        let (out, rect) = random_erasing(&img, &cfg, &mut Rng::new(seed));
        for y in 0..h {
            for x in 0..w {
                if rect.is_none_or(|r| !r.contains(y, x)) {
                    prop_assert_eq!(out.pixel(y, x), img.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn pipeline_is_deterministic(seed in any::<u64>()) {
        let img = image(16, 8, seed);
        let scales = [(16, 8), (12, 6)];
        let a = compose(&img, &AugmentConfig::default(), &scales, &Rng::new(seed));
        let b = compose(&img, &AugmentConfig::default(), &scales, &Rng::new(seed));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalized_descriptors_have_unit_norm(v in prop::collection::vec(-100.0f64..100.0, 1..20)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let d = l2_normalize(&v);
        let norm: f64 = d.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        prop_assert!(!d.degenerate);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn signature_length_and_gate_range(seed in any::<u64>(), n_extra in 0usize..2, k in 1usize..5, h in 8usize..20, w in 4usize..12) {
        let mut cfg = tiny_backbone(k, Mode::Full);
        cfg.stage_plan[0].blocks += n_extra;
        cfg.num_blocks += n_extra;
        let net = Backbone::<f64>::new("b", &cfg, (h, w), &Rng::new(seed)).unwrap();
        let x = tensor(&[2, 3, h, w], seed);
        let out = net.forward(&x).unwrap();
        let fs = out.signature.unwrap();
        prop_assert_eq!(fs.len(), cfg.num_blocks * k);
        prop_assert!(fs.tensor().data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn resnext_gates_are_ones_and_shape_ignores_k(seed in any::<u64>(), k in 1usize..5) {
        let x = tensor(&[2, 8, 6, 4], seed);
        let cfg = tiny_backbone(k, Mode::Resnext);
        let block = Block::<f64>::new("blk", &cfg, (8, 8, 2), &Rng::new(seed)).unwrap();
        let (y, gates) = block.forward(&x).unwrap();
        prop_assert!(gates.unwrap().data().iter().all(|&g| g == 1.0));
        let other = Block::<f64>::new("blk", &tiny_backbone(1, Mode::Full), (8, 8, 2), &Rng::new(seed)).unwrap();
        let (y1, _) = other.forward(&x).unwrap();
        prop_assert_eq!(y.shape(), y1.shape());
    }

    #[test]
    fn feature_and_descriptor_dims(seed in any::<u64>(), mode_ix in 0usize..4, m in 1usize..3) {
        let mode = [Mode::Full, Mode::FusionOnly, Mode::Resnext, Mode::Resnet][mode_ix];
        let scales: Vec<(usize, usize)> = [(16, 8), (12, 6)][..m].to_vec();
        let cfg = ConsensusConfig::new(scales.clone(), tiny_backbone(2, mode), 3);
        let net = ConsensusNet::<f64>::new(&cfg, &Rng::new(seed)).unwrap();
        let images: Vec<_> = scales.iter().map(|&(h, w)| tensor(&[2, 3, h, w], seed)).collect();
        let out = net.forward(&images).unwrap();
        for b in &out.branches {
            prop_assert_eq!(b.feature.shape(), &[2, 6]);
        }
        prop_assert_eq!(out.consensus_feature.shape(), &[2, 6 * m]);
        let e1 = net.extract_embeddings(&images).unwrap();
        let e2 = net.extract_embeddings(&images).unwrap();
        prop_assert_eq!(e1.len(), 2);
        prop_assert_eq!(e1[0].values.len(), 6 * m);
        prop_assert_eq!(e1, e2);
    }

    #[test]
    fn synthetic_data_is_deterministic_and_well_posed(seed in any::<u64>(), n_id in 2usize..5, per in 2usize..5) {
        let cfg = SynthConfig { n_id, images_per_id_per_camera: per, height: 16, width: 8, seed, ..SynthConfig::default() };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        prop_assert_eq!(a.len(), cfg.total_records());
        for (x, y) in a.train.iter().chain(&a.query).chain(&a.gallery).zip(b.train.iter().chain(&b.query).chain(&b.gallery)) {
            prop_assert_eq!(&x.image, &y.image);
            prop_assert!(x.image.in_unit_range());
        }
        prop_assert!(a.unanswerable_query_identities().is_empty());
        for q in &a.query {
            prop_assert!(a.gallery.iter().any(|g| g.identity == q.identity && g.camera != q.camera));
        }
        let sampler = BatchSampler::new(&a.train, 4).unwrap();
        prop_assert_eq!(sampler.epoch(&mut Rng::new(seed)), sampler.epoch(&mut Rng::new(seed)));
    }
}
