use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use macnet::data::{load_checkpoint, read_dataset, save_checkpoint, write_dataset, EncodedDataset, Vocab};
use macnet::gridworld::{
    execute_program, generate_dataset, generate_scene, AttrValue, DatasetSpec, Program,
};
use macnet::harness::RunConfig;
use macnet::mac::{ControlVariant, Example, MacConfig, MacModel, WriteVariant};
use macnet::nn::ParamStore;
use macnet::optim::{clip_gradients, early_stop, global_norm, Adam, AdamConfig, StopDecision};
use macnet::{Tape, Tensor};

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn data(seed: u64, count: usize) -> EncodedDataset {
    let raw = generate_dataset(&DatasetSpec { seed, count, ..DatasetSpec::default() }).unwrap();
    EncodedDataset::new(raw, &Vocab::standard(5)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        (x, mask) in (1usize..5, 1usize..8).prop_flat_map(|(r, c)| {
            (tensor(r, c).prop_map(|t| t.map(|v| v * 20.0)), prop::collection::vec(any::<bool>(), r * c))
        }),
        shift in -50.0f64..50.0,
    ) {
        let (rows, cols) = (x.rows(), x.cols());
        // Keep at least one position per row.
        let mask: Vec<bool> = mask.iter().enumerate().map(|(i, &m)| m || i % cols == 0).collect();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = tape.softmax(v, Some(&mask)).unwrap();
        let shifted = tape.constant(x.map(|v| v + shift));
        let s2 = tape.softmax(shifted, Some(&mask)).unwrap();
        let (out, out2) = (tape.value(s), tape.value(s2));
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..cols {
                prop_assert!(row[c] >= 0.0);
                if !mask[r * cols + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
                prop_assert!((row[c] - out2.at(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences(
        (x, w, bias) in (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(b, i, o)| (tensor(b, i), tensor(i, o), tensor(1, o))),
        target_seed in any::<u64>(),
    ) {
        let (batch, out) = (x.rows(), w.cols());
        let targets: Vec<usize> = (0..batch).map(|b| (target_seed as usize).wrapping_add(b * 7) % out).collect();
        let bias = bias.reshape(&[out]).unwrap();
        let loss = |w: &Tensor, bias: &Tensor| -> (f64, Tensor, Tensor) {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(bias.clone());
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.add_row(h, bv).unwrap();
            let h = tape.tanh(h);
            let g = tape.sigmoid(h);
            let h = tape.hadamard(h, g).unwrap();
            let l = tape.cross_entropy(h, &targets).unwrap();
            let grads = tape.backward(l).unwrap();
            (tape.value(l).item(), grads.get_or_zeros(wv, w), grads.get_or_zeros(bv, bias))
        };
        let (_, gw, gb) = loss(&w, &bias);
        let eps = 1e-6;
        for (param, grad, is_w) in [(&w, &gw, true), (&bias, &gb, false)] {
            for j in 0..param.numel() {
                let mut up = param.clone();
                up.data_mut()[j] += eps;
                let mut down = param.clone();
                down.data_mut()[j] -= eps;
                let (lu, ld) = if is_w {
                    (loss(&up, &bias).0, loss(&down, &bias).0)
                } else {
                    (loss(&w, &up).0, loss(&w, &down).0)
                };
                let numeric = (lu - ld) / (2.0 * eps);
                let analytic = grad.data()[j];
                prop_assert!((numeric - analytic).abs() <= 1e-6 * analytic.abs().max(numeric.abs()).max(1e-3));
            }
        }
    }

    #[test]
    fn clipping_bounds_norm_and_keeps_direction(
        grads in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 1..6), 1..4),
        max_norm in 0.01f64..20.0,
    ) {
        let original: Vec<Tensor> = grads.into_iter().map(Tensor::vector).collect();
        let mut clipped = original.clone();
        let before = clip_gradients(&mut clipped, max_norm);
        prop_assert!(global_norm(&clipped) <= max_norm + 1e-12 || before <= max_norm);
        let dot: f64 = original.iter().zip(&clipped)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y))
            .sum();
        let (na, nb) = (global_norm(&original), global_norm(&clipped));
        if na > 0.0 {
            prop_assert!(dot >= 0.0);
            prop_assert!((dot / (na * nb) - 1.0).abs() < 1e-12);
        }
        if before <= max_norm {
            prop_assert_eq!(clipped, original);
        }
    }

    #[test]
    fn adam_matches_scalar_oracle_and_moves_against_momentum(
        start in -3.0f64..3.0,
        grads in prop::collection::vec(-5.0f64..5.0, 100),
    ) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![start]));
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg.clone(), &store);
        let (mut w, mut m, mut v) = (start, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let before = store.values()[0].data()[0];
            adam.step(&mut store, &[Tensor::vector(vec![g])]).unwrap();
            let after = store.values()[0].data()[0];
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - cfg.beta2.powi(t as i32 + 1));
            w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            prop_assert!((after - w).abs() < 1e-12);
            let delta = after - before;
            if m_hat != 0.0 && delta != 0.0 {
                prop_assert_eq!(delta.signum(), -m_hat.signum());
            }
        }
        prop_assert_eq!(adam.t, 100);
    }

    #[test]
    fn early_stop_reports_first_best(history in prop::collection::vec(0.0f64..1.0, 1..30), patience in 1usize..6) {
        match early_stop(&history, patience) {
            StopDecision::Stop { best_index } => {
                let seen = best_index + patience + 1;
                prop_assert!(seen <= history.len());
                let prefix = &history[..seen];
                let best = prefix.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(prefix[best_index], best);
                prop_assert!(prefix[..best_index].iter().all(|&h| h < best));
            }
            StopDecision::Continue => {
                let best = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let first = history.iter().position(|&h| h == best).unwrap();
                prop_assert!(history.len() - 1 - first < patience);
            }
        }
    }

    #[test]
    fn scenes_are_collision_free(seed in any::<u64>(), grid in 2usize..7, frac in 0.0f64..1.0) {
        let cells = grid * grid;
        let n = 2 + ((cells - 2) as f64 * frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = generate_scene(&mut rng, grid, n).unwrap();
        prop_assert_eq!(scene.objects.len(), n);
        let mut seen = std::collections::HashSet::new();
        for o in &scene.objects {
            prop_assert!(o.row < grid && o.col < grid);
            prop_assert!(seen.insert((o.row, o.col)));
        }
        prop_assert!(scene.validate().is_ok());
    }

    #[test]
    fn set_operations_compose(seed in any::<u64>(), a in 0usize..13, b in 0usize..13) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = generate_scene(&mut rng, 5, 7).unwrap();
        let values = AttrValue::all();
        let fa = Program::filter(values[a], Program::Scene);
        let fb = Program::filter(values[b], Program::Scene);
        let sa = fa.select(&scene).unwrap();
        let sb = fb.select(&scene).unwrap();
        let union = Program::Or(Box::new(fa.clone()), Box::new(fb.clone())).select(&scene).unwrap();
        let inter = Program::And(Box::new(fa.clone()), Box::new(fb.clone())).select(&scene).unwrap();
        prop_assert_eq!(union.len() + inter.len(), sa.len() + sb.len());
        prop_assert!(inter.iter().all(|i| sa.contains(i) && sb.contains(i)));
        let count = |p: &Program| Box::new(Program::Count(Box::new(p.clone())));
        let greater = execute_program(&Program::Greater(count(&fa), count(&fb)), &scene).unwrap();
        prop_assert_eq!(greater.word(), if sa.len() > sb.len() { "yes" } else { "no" });
        let less = execute_program(&Program::Less(count(&fa), count(&fb)), &scene).unwrap();
        prop_assert_eq!(less.word(), if sa.len() < sb.len() { "yes" } else { "no" });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn padding_never_changes_other_examples(seed in any::<u64>(), i in 0usize..40, j in 0usize..40, p in 1usize..4) {
        let set = data(31, 40);
        let cfg = MacConfig { d: 8, p, use_memory_gate: seed % 2 == 0, use_self_attention: seed % 3 == 0, ..MacConfig::default() };
        let model = MacModel::new(cfg, seed).unwrap();
        let alone = model.logits_with(&model.params, &[set.example(i)]).unwrap();
        let together = model.logits_with(&model.params, &[set.example(j), set.example(i)]).unwrap();
        prop_assert_eq!(alone.row(0), together.row(1));
    }

    #[test]
    fn run_config_text_round_trips(
        d in 2usize..40, p in 1usize..9, shared: bool, gate: bool, bias in -3.0f64..3.0,
        control in 0usize..4, write in 0usize..4, lr in 1e-6f64..1e-1, seed: u64,
    ) {
        let mut cfg = RunConfig::default();
        cfg.model.d = d;
        cfg.model.p = p;
        cfg.model.share_weights = shared;
        cfg.model.use_memory_gate = gate;
        cfg.model.gate_bias = bias;
        cfg.model.control_variant = ControlVariant::ALL[control];
        cfg.model.write_variant = WriteVariant::ALL[write];
        cfg.train.lr = lr;
        cfg.train.seed = seed;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.model.hash(), cfg.model.hash());
        prop_assert_eq!(back.to_text(), cfg.to_text());
    }
}

#[test]
fn vocabulary_round_trips_every_question() {
    let vocab = Vocab::standard(5);
    let raw = generate_dataset(&DatasetSpec { seed: 9, count: 500, ..DatasetSpec::default() }).unwrap();
    for q in &raw {
        let ids = vocab.encode(&q.tokens).unwrap();
        assert!(ids.iter().all(|&i| i != 0));
        assert_eq!(vocab.decode(&ids).unwrap(), q.tokens);
        let a = vocab.answer_id(&q.answer).unwrap();
        assert_eq!(vocab.answer_word(a).unwrap(), q.answer.word());
    }
}

#[test]
fn dataset_and_checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let raw = generate_dataset(&DatasetSpec { seed: 4, count: 50, ..DatasetSpec::default() }).unwrap();
    let path = dir.path().join("set.jsonl");
    write_dataset(&raw, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), raw);

    let cfg = MacConfig { d: 8, p: 2, use_memory_gate: true, ..MacConfig::default() };
    let model = MacModel::new(cfg.clone(), 5).unwrap();
    let mut shadow = model.params.clone();
    shadow.values_mut()[0].data_mut()[0] += 1.0;
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &model, Some(&shadow), serde_json::json!({ "note": 1 })).unwrap();
    let back = load_checkpoint(&ckpt, Some(&cfg)).unwrap();
    assert_eq!(back.model.params, model.params);
    assert_eq!(back.ema.as_ref(), Some(&shadow));
    let set = data(6, 8);
    let batch: Vec<Example> = (0..8).map(|i| set.example(i)).collect();
    assert_eq!(
        back.model.logits_with(&back.model.params, &batch).unwrap(),
        model.logits_with(&model.params, &batch).unwrap()
    );
    let other = MacConfig { d: 16, ..cfg };
    assert!(load_checkpoint(&ckpt, Some(&other)).is_err());
}
