mod common;

use common::rng;
use strattn::attention::{AttentionConfig, BilinearMlrConfig, MlrAttentionConfig, ScoreKind};
use strattn::gradcheck::{finite_diff_grad, relative_error};
use strattn::icl::*;
use strattn::structured::BttSpec;
use strattn::{MaskSpec, Tape, Tensor};

fn kinds(heads: usize) -> Vec<AttentionConfig> {
    vec![
        AttentionConfig::standard(heads),
        AttentionConfig::new(heads, ScoreKind::MlrAttention(MlrAttentionConfig::new("2|1|1".parse().unwrap()))),
        AttentionConfig::new(heads, ScoreKind::BilinearMlr(BilinearMlrConfig::new("2|1".parse().unwrap()))),
        AttentionConfig::new(heads, ScoreKind::BilinearBtt(BttSpec::new(2, 4, 2, 4, 1).unwrap())),
    ]
}

/// Same model with every zero-initialized tensor replaced by noise, so all
/// paths carry signal.
fn randomized(model: &Model, seed: u64) -> Model {
    let mut rng = rng(seed);
    let params = model
        .info()
        .iter()
        .zip(model.params())
        .map(|(info, p)| if info.zero_init { Tensor::randn(&info.shape, 0.5, &mut rng) } else { p.clone() })
        .collect();
    Model::from_params(model.config(), model.max_len(), params).unwrap()
}

#[test]
fn fresh_model_predicts_zero_and_loss_is_one() {
    let task = IclTaskConfig::new(4);
    let cfg = ModelConfig::new(2, 8, 4, AttentionConfig::standard(2));
    let model = Model::init(&cfg, task.seq_len(), &mut rng(1)).unwrap();
    let batch = sample_batch(&task, 1, Domain::Eval, 0, 1024).unwrap();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &batch.tokens).unwrap();
    assert!(tape.value(fwd.outputs).data().iter().all(|&v| v == 0.0));
    let loss = icl_loss(&model, &batch).unwrap();
    assert!((loss - 1.0).abs() < 0.1, "{loss}");
}

#[test]
fn reference_predictors() {
    let task = IclTaskConfig::new(4);
    let prompts = sample_prompts(&task, 2, Domain::Eval, 0, 2048);
    assert_eq!(eval_error_with(&prompts, |p| p.ys[p.ys.len() - 1]), 0.0);
    let zero = eval_error_with(&prompts, |_| 0.0);
    assert!((zero - 1.0).abs() < 0.1, "{zero}");
    let half = eval_error_with(&prompts, |_| 0.5);
    assert!((half - 1.25).abs() < 0.1, "{half}");
    let ls = eval_error_with(&prompts, least_squares_prediction);
    assert!(ls < 1e-20, "{ls}");
    assert_eq!(oracle_eval_error(&task, 2, 2048), ls);
}

#[test]
fn predictions_never_see_the_future() {
    let task = IclTaskConfig::new(2);
    let t = task.seq_len();
    let swa = MaskSpec::GlobalPlusSwa {
        window: 2,
        global_layers: vec![0],
    };
    for attn in kinds(2) {
        for mask in [MaskSpec::Causal, MaskSpec::SlidingWindow { window: 1 }, swa.clone()] {
            let mut cfg = ModelConfig::new(2, 8, 2, attn.clone());
            cfg.mask = mask.clone();
            let model = randomized(&Model::init(&cfg, t, &mut rng(3)).unwrap(), 4);
            let base = sample_batch(&task, 5, Domain::Eval, 0, 1).unwrap().tokens;
            let out = |tokens: &Tensor| {
                let mut tape = Tape::new();
                let f = model.forward(&mut tape, tokens).unwrap();
                tape.value(f.outputs).clone()
            };
            let y0 = out(&base);
            for k in 0..t {
                let mut data = base.clone().into_data();
                data[k * 2] += 1.0;
                data[k * 2 + 1] -= 0.5;
                let y1 = out(&Tensor::new(base.shape(), data).unwrap());
                for i in 0..k {
                    assert_eq!(y0.data()[i], y1.data()[i], "{} {mask:?}: position {i} saw {k}", attn.kind_id());
                }
                assert_ne!(y0.data()[k], y1.data()[k]);
            }
        }
    }
}

#[test]
fn mlr_attention_pads_to_block_multiple() {
    let task = IclTaskConfig::new(3);
    let attn = AttentionConfig::new(2, ScoreKind::MlrAttention(MlrAttentionConfig::new("2|1|1".parse().unwrap())));
    let cfg = ModelConfig::new(1, 8, 3, attn);
    assert_eq!(cfg.padded_len(task.seq_len()), 12);
    let model = Model::init(&cfg, task.seq_len(), &mut rng(6)).unwrap();
    assert_eq!(model.param("embed.pos").unwrap().shape(), &[12, 8]);
    let batch = sample_batch(&task, 1, Domain::Train, 0, 3).unwrap();
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, &batch.tokens).unwrap();
    assert_eq!(tape.shape(f.outputs), &[3, 12]);
}

#[test]
fn one_layer_gradients_match_finite_differences() {
    let task = IclTaskConfig::new(2);
    let batch = sample_batch(&task, 7, Domain::Train, 0, 2).unwrap();
    for attn in kinds(2) {
        let mut cfg = ModelConfig::new(1, 8, 2, attn.clone());
        cfg.mlp_ratio = 1;
        let model = randomized(&Model::init(&cfg, task.seq_len(), &mut rng(8)).unwrap(), 9);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch.tokens).unwrap();
        let pred = model.predictions(&mut tape, &fwd, task.n_points()).unwrap();
        let target = tape.leaf(batch.targets.clone());
        let diff = tape.sub(pred, target).unwrap();
        let sq = tape.square(diff).unwrap();
        let loss = tape.mean(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!((tape.value(loss).item().unwrap() - icl_loss(&model, &batch).unwrap()).abs() < 1e-14);
        let mut worst: f64 = 0.0;
        for (i, info) in model.info().iter().enumerate() {
            let fd = finite_diff_grad(
                |p| {
                    let mut ps = model.params().to_vec();
                    ps[i] = p.clone();
                    icl_loss(&Model::from_params(&cfg, model.max_len(), ps)?, &batch)
                },
                &model.params()[i],
            )
            .unwrap();
            let err = relative_error(grads.wrt(fwd.params[i]).unwrap(), &fd);
            assert!(err < 1e-5, "{} {}: {err}", attn.kind_id(), info.name);
            worst = worst.max(err);
        }
        assert!(worst.is_finite());
    }
}

#[test]
fn zero_steps_reports_initial_error() {
    let task = IclTaskConfig::new(2);
    let cfg = ModelConfig::new(1, 8, 2, AttentionConfig::standard(2));
    let mut train_cfg = TrainConfig::new(0, 4, 1e-3);
    train_cfg.eval_prompts = 256;
    let out = train(&cfg, &task, &train_cfg, 1, &mut |_| {}).unwrap();
    assert_eq!(out.records.len(), 1);
    assert!((out.records[0].eval_error - 1.0).abs() < 0.2);
    assert_eq!(out.records[0].flops_cumulative, 0);
    assert!(out.diverged.is_none());
}

#[test]
fn training_is_deterministic() {
    let task = IclTaskConfig::new(2);
    let cfg = ModelConfig::new(1, 16, 2, AttentionConfig::standard(2));
    let mut train_cfg = TrainConfig::new(60, 16, 1e-2);
    train_cfg.eval_every = 20;
    train_cfg.eval_prompts = 128;
    let mut seen = vec![];
    let a = train(&cfg, &task, &train_cfg, 11, &mut |r| seen.push(r.step)).unwrap();
    let b = train(&cfg, &task, &train_cfg, 11, &mut |_| {}).unwrap();
    assert_eq!(seen, vec![0, 20, 40, 60]);
    let strip = |o: &TrainOutcome| -> Vec<(usize, u64, u64, u128)> {
        o.records.iter().map(|r| (r.step, r.loss.to_bits(), r.eval_error.to_bits(), r.flops_cumulative)).collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.model, b.model);
    let first = a.records.first().unwrap();
    let last = a.records.last().unwrap();
    assert!(last.eval_error.is_finite() && first.eval_error.is_finite());
    assert!(last.flops_cumulative > 0);
    let c = train(&cfg, &task, &train_cfg, 12, &mut |_| {}).unwrap();
    assert_ne!(strip(&a), strip(&c));
}

#[test]
fn divergence_stops_with_last_good_model() {
    let task = IclTaskConfig::new(2);
    let cfg = ModelConfig::new(1, 8, 2, AttentionConfig::standard(2));
    let train_cfg = TrainConfig::new(20, 8, 1e6);
    let out = train(&cfg, &task, &train_cfg, 1, &mut |_| {}).unwrap();
    let msg = out.diverged.expect("diverges");
    assert!(msg.contains("step") && msg.contains("activation"), "{msg}");
    assert!(icl_loss(&out.model, &sample_batch(&task, 1, Domain::Eval, 0, 8).unwrap()).unwrap() <= DIVERGENCE_LOSS);
}

#[test]
fn unsupported_precision_is_rejected() {
    let mut c = TrainConfig::new(1, 1, 1e-3);
    c.precision = Precision::F32;
    assert!(c.validate().is_err());
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let task = IclTaskConfig::new(3);
    for attn in kinds(2) {
        let cfg = ModelConfig::new(2, 8, 3, attn);
        let model = randomized(&Model::init(&cfg, task.seq_len(), &mut rng(5)).unwrap(), 6);
        let path = dir.path().join(model.config().attention.kind_id());
        save_checkpoint(&path, &model, 17).unwrap();
        let (back, step) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 17);
        assert_eq!(back, model);
    }
    std::fs::write(dir.path().join("standard").join(WEIGHTS_FILE), b"short").unwrap();
    assert!(load_checkpoint(dir.path().join("standard")).is_err());
}

#[test]
fn metrics_csv_layout() {
    let rec = MetricRecord {
        step: 3,
        loss: 0.5,
        eval_error: 0.25,
        flops_cumulative: 1234,
        wall_seconds: 1.5,
    };
    let mut buf = vec![];
    write_metrics(std::slice::from_ref(&rec), true, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,loss,eval_error,flops_cumulative,wall_seconds\n3,"));
    let mut buf = vec![];
    write_metrics(&[rec], false, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,eval_error,flops_cumulative\n3,5e-1,2.5e-1,1234\n");
}
