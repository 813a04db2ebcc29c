mod common;

use common::rng;
use strattn::attention::AttentionConfig;
use strattn::icl::*;
use strattn::mup::{adam_lr, init_std, MupRole, MupRule};
use strattn::{Tape, Tensor};

fn rms(t: &Tensor) -> f64 {
    (t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt()
}

fn residual_rms(width: usize, seed: u64) -> Vec<f64> {
    let task = IclTaskConfig::new(8);
    let cfg = ModelConfig::new(2, width, 8, AttentionConfig::standard(4));
    let model = Model::init(&cfg, task.seq_len(), &mut rng(seed)).unwrap();
    let batch = sample_batch(&task, seed, Domain::Eval, 0, 8).unwrap();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &batch.tokens).unwrap();
    fwd.residuals.iter().map(|&r| rms(tape.value(r))).collect()
}

#[test]
fn residual_coordinates_stay_order_one_across_widths() {
    for width in [64, 128, 256, 512] {
        for (l, v) in residual_rms(width, 3).into_iter().enumerate() {
            assert!((0.3..=3.0).contains(&v), "width {width} residual {l}: rms {v}");
        }
    }
}

/// Output change after one Adam step on the same batch, tuned at width 64.
fn one_step_output_change(width: usize) -> f64 {
    let task = IclTaskConfig::new(8);
    let cfg = ModelConfig::new(2, width, 8, AttentionConfig::standard(4));
    let model = Model::init(&cfg, task.seq_len(), &mut rng(5)).unwrap();
    let mut tc = TrainConfig::new(1, 16, 1e-3);
    tc.base_width = Some(64);
    tc.eval_prompts = 4;
    let out = train_from(model.clone(), &task, &tc, 5, &mut |_| {}).unwrap();
    let probe = sample_batch(&task, 9, Domain::Eval, 0, 16).unwrap();
    let outputs = |m: &Model| {
        let mut tape = Tape::new();
        let fwd = m.forward(&mut tape, &probe.tokens).unwrap();
        tape.value(fwd.outputs).clone()
    };
    let before = outputs(&model);
    let after = outputs(&out.model);
    let diff: Vec<f64> = after.data().iter().zip(before.data()).map(|(a, b)| a - b).collect();
    rms(&Tensor::new(after.shape(), diff).unwrap())
}

#[test]
fn first_update_size_is_width_independent() {
    let changes: Vec<f64> = [64, 128, 256].iter().map(|&w| one_step_output_change(w)).collect();
    let (lo, hi) = changes.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &c| (lo.min(c), hi.max(c)));
    assert!(lo > 0.0);
    assert!(hi / lo < 2.0, "{changes:?}");
}

#[test]
fn closed_forms_on_a_width_grid() {
    for d1 in [32usize, 64] {
        for d2 in [64usize, 128, 256, 512] {
            let lr = 1e-3;
            let dense = MupRule::new(MupRole::HiddenDense, d2, 4 * d2, lr, d1, d2).unwrap();
            assert_eq!(init_std(&dense), (1.0 / d2 as f64).sqrt());
            assert_eq!(adam_lr(&dense), lr * d1 as f64 / d2 as f64);

            let down = MupRule::new(MupRole::HiddenDense, 4 * d2, d2, lr, d1, d2).unwrap();
            let want = (1.0 / (4 * d2) as f64 * 0.25).sqrt();
            assert!((init_std(&down) - want).abs() < 1e-15);

            for p in [1usize, 2, 4, 8] {
                let f = MupRule::new(MupRole::MlrFactor { blocks: p }, d2 / p, 8, lr, d1, d2).unwrap();
                assert!((init_std(&f) - (p as f64 / d2 as f64).sqrt()).abs() < 1e-15);
                assert!((adam_lr(&f) - lr * (d1 * p) as f64 / d2 as f64).abs() < 1e-18);
            }

            let out = MupRule::new(MupRole::Output, d2, 1, lr, d1, d2).unwrap();
            assert_eq!(init_std(&out), 0.0);
            assert!((adam_lr(&out) - lr * d1 as f64 / d2 as f64).abs() < 1e-18);
        }
    }
}
