use super::*;
use crate::model::{load_checkpoint, HatConfig, HatParameters, ModelMode};
use crate::tensor::{accumulate_grads, ParamStore, Tensor};
use crate::text::{EncodedExample, BOS_ID, EOS_ID};

fn copy_example(tokens: &[u32]) -> EncodedExample {
    let mut source = vec![BOS_ID];
    source.extend_from_slice(tokens);
    let mut target = tokens.to_vec();
    target.push(EOS_ID);
    EncodedExample {
        segment_ids: vec![0; source.len()],
        source_ids: source,
        bos_positions: vec![0],
        target_ids: target,
    }
}

fn dataset() -> Vec<EncodedExample> {
    (0..8u32)
        .map(|i| copy_example(&[4 + i % 5, 5 + (i * 3) % 6, 4 + (i * 7) % 8]))
        .collect()
}

fn quick_cfg(steps: usize) -> OptimizerConfig {
    OptimizerConfig {
        peak_lr: 3e-3,
        warmup_steps: 0,
        total_steps: steps,
        batch_size: 8,
        label_smoothing: 0.1,
        valid_every: 10,
        ..OptimizerConfig::desk()
    }
}

#[test]
fn frozen_batch_loss_strictly_decreases() {
    let cfg = HatConfig::tiny(ModelMode::Hat, 16);
    let params = HatParameters::<f64>::init(&cfg, 0).unwrap();
    let out = train(
        params,
        &quick_cfg(50),
        &dataset(),
        &[],
        &TrainOptions::default(),
    )
    .unwrap();
    let losses: Vec<f64> = out.log.iter().map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 50);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = HatConfig {
        dropout: 0.1,
        ..HatConfig::tiny(ModelMode::Hat, 16)
    };
    let opt = OptimizerConfig {
        batch_size: 3,
        grad_accum_steps: 2,
        dropout: 0.2,
        ..quick_cfg(12)
    };
    let run = || {
        let p = HatParameters::<f32>::init(&cfg, 1).unwrap();
        train(
            p,
            &opt,
            &dataset(),
            &dataset()[..2],
            &TrainOptions::default(),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    for (x, y) in a.last.store.iter().zip(b.last.store.iter()) {
        assert_eq!(x.tensor.data(), y.tensor.data());
    }
    let other = train(
        HatParameters::<f32>::init(&cfg, 1).unwrap(),
        &OptimizerConfig {
            seed: 9,
            ..opt.clone()
        },
        &dataset(),
        &[],
        &TrainOptions::default(),
    )
    .unwrap();
    assert_ne!(other.log[0].train_loss, a.log[0].train_loss);
}

#[test]
fn accumulated_step_equals_step_on_averaged_grads() {
    let mut store = ParamStore::<f64>::new();
    store.push("w", Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
    let g1 = Tensor::new(vec![2], vec![0.2, -0.4]).unwrap();
    let g2 = Tensor::new(vec![2], vec![1.0, 0.6]).unwrap();
    let cfg = OptimizerConfig::summarization();

    let mut acc = Vec::new();
    accumulate_grads(&mut acc, vec![Some(g1.clone())]).unwrap();
    accumulate_grads(&mut acc, vec![Some(g2.clone())]).unwrap();
    for g in acc.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|x| *x *= 0.5);
    }
    let mut a = store.clone();
    let mut sa = TrainState::new(&a, 0);
    adam_step(&mut a, &acc, &mut sa, &cfg, 1e-3).unwrap();

    let avg = Tensor::new(vec![2], vec![0.6, 0.1]).unwrap();
    let mut b = store;
    let mut sb = TrainState::new(&b, 0);
    adam_step(&mut b, &[Some(avg)], &mut sb, &cfg, 1e-3).unwrap();
    let (pa, pb) = (a.iter().next().unwrap(), b.iter().next().unwrap());
    for (x, y) in pa.tensor.data().iter().zip(pb.tensor.data()) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn writes_log_and_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = HatConfig::tiny(ModelMode::Plain, 16);
    let params = HatParameters::<f32>::init(&cfg, 2).unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_owned()),
        ..TrainOptions::default()
    };
    let out = train(params, &quick_cfg(25), &dataset(), &dataset(), &opts).unwrap();
    let log = read_log(&dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log, out.log);
    let validated: Vec<usize> = log
        .iter()
        .filter(|r| r.valid_loss.is_some())
        .map(|r| r.step)
        .collect();
    assert_eq!(validated, vec![10, 20, 25]);
    let best_loss = log
        .iter()
        .filter_map(|r| r.valid_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_valid_loss, Some(best_loss));
    let loaded: HatParameters<f32> =
        load_checkpoint(out.best_checkpoint.as_ref().unwrap()).unwrap();
    for (x, y) in loaded.store.iter().zip(out.best.store.iter()) {
        assert_eq!(x.tensor.data(), y.tensor.data());
    }
    let line = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert!(line.starts_with("{\"step\":1,\"lr\":"));
}

#[test]
fn score_selection_requires_scorer_and_maximizes() {
    let cfg = HatConfig::tiny(ModelMode::Hat, 16);
    let opt = OptimizerConfig {
        selection: Selection::Bleu,
        ..quick_cfg(30)
    };
    let p = HatParameters::<f32>::init(&cfg, 0).unwrap();
    assert!(train(
        p.clone(),
        &opt,
        &dataset(),
        &dataset(),
        &TrainOptions::default()
    )
    .is_err());
    // a scorer that prefers the earliest checkpoint
    let calls = std::cell::Cell::new(0.0);
    let scorer = |_: &HatParameters<f32>| {
        calls.set(calls.get() + 1.0);
        Ok(10.0 - calls.get())
    };
    let opts = TrainOptions {
        scorer: Some(&scorer),
        ..TrainOptions::default()
    };
    let out = train(p, &opt, &dataset(), &dataset(), &opts).unwrap();
    assert_eq!(out.best_step, 10);
    assert_eq!(out.best_score, Some(9.0));
}

#[test]
fn stops_early_below_threshold() {
    let cfg = HatConfig::tiny(ModelMode::Hat, 16);
    let p = HatParameters::<f32>::init(&cfg, 0).unwrap();
    let opts = TrainOptions {
        stop_below: Some(100.0),
        ..TrainOptions::default()
    };
    let out = train(p, &quick_cfg(50), &dataset(), &dataset(), &opts).unwrap();
    assert_eq!(out.steps, 10);
}

#[test]
fn mlm_loss_decreases_on_repetitive_text() {
    let cfg = HatConfig::tiny(ModelMode::EncoderOnlyHat, 16);
    let p = HatParameters::<f32>::init(&cfg, 0).unwrap();
    let corpus: Vec<EncodedExample> = (0..16u32)
        .map(|i| {
            let mut e = copy_example(&[5, 6, 7, 8, 9, 10, 11, 12]);
            e.source_ids.rotate_right(0);
            e.target_ids.clear();
            e.source_ids[1] = 5 + i % 3;
            e
        })
        .collect();
    let opt = OptimizerConfig {
        label_smoothing: 0.0,
        ..quick_cfg(120)
    };
    let before = evaluate_loss(&p, &MaskedLm { mask_id: 15 }, &corpus, 8, 0).unwrap();
    let out = mlm_pretrain(p, &opt, &corpus, &corpus, 15, &TrainOptions::default()).unwrap();
    assert!((before - 16f64.ln()).abs() < 0.1);
    assert!(
        out.best_valid_loss.unwrap() < before - 0.5,
        "{before} -> {:?}",
        out.best_valid_loss
    );
    let plain = HatParameters::<f32>::init(&HatConfig::tiny(ModelMode::Hat, 16), 0).unwrap();
    assert!(mlm_pretrain(plain, &opt, &corpus, &corpus, 15, &TrainOptions::default()).is_err());
}
