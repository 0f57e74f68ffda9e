use proptest::prelude::*;

use flatland::distill::{ema_update, mesa_loss, DistillConfig};
use flatland::engine::{Graph, ParamStore, Tensor};
use flatland::landscape::{loss_slice_1d, loss_slice_2d, sample_direction, LossSurface, ModelLoss, Normalization};
use flatland::model::{build_model, channel_schedule, ForwardCtx, Mode, PyramidSpec};
use flatland::pipeline::{cutmix, generate_synthetic_domains, split_domains, CutMixConfig, Image, SyntheticConfig};
use flatland::regularizers::{backward_coefficient, sample_forward, Granularity, ShakeDropConfig, StreamKey};
use flatland::rng::{stream, Purpose};
use rand::Rng;

fn tiny_spec(classes: usize) -> PyramidSpec {
    PyramidSpec {
        input_resolution: 8,
        base_channels: 4,
        total_channel_add: 4,
        num_stages: 2,
        blocks_per_stage: 1,
        num_classes: classes,
        ..PyramidSpec::default()
    }
}

fn random_images(seed: u64, n: usize, res: usize) -> Tensor<f32> {
    let mut rng = stream(seed, Purpose::Eval, 7, 0);
    Tensor::from_fn(vec![n, 3, res, res], |_| rng.random_range(-1.0f32..1.0)).unwrap()
}

fn bits(store: &ParamStore<f32>) -> Vec<Vec<u32>> {
    store.iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kl_term_is_nonnegative(
        s in proptest::collection::vec(-6.0f64..6.0, 8),
        t in proptest::collection::vec(-6.0f64..6.0, 8),
        temperature in 0.5f64..8.0,
        literal in any::<bool>(),
    ) {
        let cfg = DistillConfig { temperature, kl_literal_order: literal, ..DistillConfig::default() };
        let mut g = Graph::new();
        let student = g.leaf(Tensor::new(vec![2, 4], s).unwrap());
        let teacher = Tensor::new(vec![2, 4], t).unwrap();
        let y = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let terms = mesa_loss(&mut g, student, &teacher, &y, &cfg).unwrap();
        let kl = g.value(terms.kl.unwrap()).item().unwrap();
        prop_assert!(kl >= 0.0, "kl = {}", kl);
    }

    #[test]
    fn ema_contracts_towards_the_student(
        t in proptest::collection::vec(-3.0f64..3.0, 6),
        s in proptest::collection::vec(-3.0f64..3.0, 6),
        rho in 0.0f64..1.0,
    ) {
        let make = |v: &[f64]| {
            let mut store = ParamStore::new();
            store.insert("w", flatland::engine::ParamKind::DenseWeight, Tensor::new(vec![2, 3], v.to_vec()).unwrap()).unwrap();
            store
        };
        let student = make(&s);
        let mut teacher = make(&t);
        let dist = |a: &ParamStore<f64>| {
            a.iter().next().unwrap().value.data().iter().zip(&s).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let before = dist(&teacher);
        ema_update(&mut teacher, &student, rho).unwrap();
        prop_assert!(dist(&teacher) <= rho * before + 1e-12);
    }

    #[test]
    fn shakedrop_coefficients_stay_in_unit_interval(
        seed in any::<u64>(),
        step in any::<u64>(),
        p in 0.0f64..=1.0,
        per_example in any::<bool>(),
        literal in any::<bool>(),
        gamma in 0.0f64..1.0,
    ) {
        let cfg = ShakeDropConfig {
            granularity: if per_example { Granularity::PerExample } else { Granularity::PerBatch },
            literal_eq3: literal,
            ..ShakeDropConfig::default()
        };
        for sample in sample_forward(&cfg, p, StreamKey { seed, layer: 1, step }, 6) {
            let f = sample.forward_coefficient();
            let b = backward_coefficient(&cfg, &sample, gamma);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!((0.0..=1.0).contains(&b));
            if sample.beta == 1.0 {
                prop_assert_eq!(f, 1.0);
                if !literal {
                    prop_assert_eq!(b, 1.0);
                }
            }
        }
    }

    #[test]
    fn channel_schedule_is_nondecreasing(
        c0 in 1usize..32,
        add in 0usize..64,
        stages in 1usize..4,
        blocks in 1usize..4,
        wide in any::<bool>(),
    ) {
        let spec = PyramidSpec {
            base_channels: c0,
            total_channel_add: add,
            num_stages: stages,
            blocks_per_stage: blocks,
            widen_factor: if wide { 2.0 } else { 1.0 },
            ..PyramidSpec::default()
        };
        let widths: Vec<usize> = (1..=spec.num_blocks()).map(|k| channel_schedule(&spec, k).unwrap()).collect();
        prop_assert!(widths.windows(2).all(|w| w[0] <= w[1]), "{:?}", widths);
    }

    #[test]
    fn cutmix_targets_sum_to_one(seed in any::<u64>(), n in 1usize..6, beta in 0.2f64..4.0) {
        let mut rng = stream(seed, Purpose::CutMix, 0, 0);
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 4).collect();
        let mut images: Vec<Image> = (0..n).map(|_| Image::zeros(3, 8)).collect();
        let out = cutmix(&mut images, &labels, 4, &CutMixConfig { prob: 1.0, beta }, &mut rng).unwrap();
        prop_assert!((0.0..=1.0).contains(&out.lambda));
        for row in out.targets.data().chunks(4) {
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn split_is_a_pure_function_of_seed(seed in 0u64..1000, held in 0usize..3, frac in 0.0f64..0.5) {
        let cfg = SyntheticConfig { samples_per_cell: 5, ..SyntheticConfig::default() };
        let data = generate_synthetic_domains(&cfg, seed).unwrap();
        let a = split_domains(&data, &[held], frac, seed).unwrap();
        let b = split_domains(&generate_synthetic_domains(&cfg, seed).unwrap(), &[held], frac, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.train.len() + a.val.len() + a.test.len(), data.len());
        prop_assert!(a.test.iter().all(|&i| data.samples[i].domain == held));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn logits_shape_ignores_stochastic_state(seed in any::<u64>(), step in any::<u64>(), n in 1usize..5, classes in 2usize..6) {
        let model = build_model::<f32>(&tiny_spec(classes), &ShakeDropConfig::default(), seed).unwrap();
        let x = random_images(seed, n, 8);
        let y = model.logits(&x, &mut ForwardCtx::new(seed, step)).unwrap();
        prop_assert_eq!(y.shape(), &[n, classes][..]);
    }

    #[test]
    fn eval_forward_is_bit_deterministic(seed in any::<u64>(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let mut model = build_model::<f32>(&tiny_spec(3), &ShakeDropConfig::default(), seed).unwrap();
        model.set_mode(Mode::Eval).unwrap();
        let x = random_images(seed, 3, 8);
        let a = model.logits(&x, &mut ForwardCtx::new(s1, s1)).unwrap();
        let b = model.logits(&x, &mut ForwardCtx::new(s2, s2)).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn slices_restore_parameters_and_hit_the_origin(seed in any::<u64>(), r in 0.1f64..2.0, half in 1usize..4) {
        let mut model = build_model::<f32>(&tiny_spec(3), &ShakeDropConfig::default(), seed).unwrap();
        model.set_mode(Mode::Eval).unwrap();
        let before = bits(&model.store);
        let d1 = sample_direction(&model.store, Normalization::Filter, &mut stream(seed, Purpose::Direction, 0, 0)).unwrap();
        let d2 = sample_direction(&model.store, Normalization::Global, &mut stream(seed, Purpose::Direction, 1, 0)).unwrap();
        let x = random_images(seed, 4, 8);
        let labels = vec![0, 1, 2, 1];
        let (first, second, direct) = {
            let mut surface = ModelLoss::new(&mut model, x, labels).unwrap();
            let direct = surface.loss().unwrap();
            let a = loss_slice_1d(&mut surface, &d1, r, 2 * half + 1).unwrap();
            let b = loss_slice_2d(&mut surface, &d1, &d2, r, 2 * half + 1).unwrap();
            let again = loss_slice_1d(&mut surface, &d1, r, 2 * half + 1).unwrap();
            prop_assert_eq!(&a.values, &again.values);
            (a, b, direct)
        };
        prop_assert_eq!(bits(&model.store), before);
        prop_assert_eq!(first.center().to_bits(), direct.to_bits());
        prop_assert_eq!(second.center().to_bits(), direct.to_bits());
    }
}
