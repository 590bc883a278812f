use mmgpl::diffcore::{ParamStore, Tape, Tensor};
use mmgpl::model::Arm;
use mmgpl::relevance::Mode;
use mmgpl::trainer::{evaluate, kfold_split, lr_at, rank_auc, summarize, train, AdamW, Experiment, Metrics, TrainConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

mod common;

fn scalar_store(value: f32, grad: Option<f32>) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::new(vec![1, 1], vec![value]).unwrap()).unwrap();
    if let Some(g) = grad {
        store.accumulate(vec![Some(vec![g])]).unwrap();
    }
    store
}

#[test]
fn adamw_zero_gradient_no_decay_is_a_no_op() {
    let mut store = scalar_store(0.37, None);
    let mut opt = AdamW::new(&store, 0.0);
    for _ in 0..5 {
        opt.step(&mut store, 0.1);
    }
    assert_eq!(store.by_name("p").unwrap().data()[0].to_bits(), 0.37f32.to_bits());
}

#[test]
fn adamw_first_step_moves_by_lr() {
    // m̂ = v̂ = 1 after bias correction: Δ = −lr / (1 + ε)
    let mut store = scalar_store(0.5, Some(1.0));
    let mut opt = AdamW::new(&store, 0.0);
    opt.step(&mut store, 0.01);
    let want = 0.5 - 0.01 / (1.0 + 1e-8);
    assert!((f64::from(store.by_name("p").unwrap().data()[0]) - want).abs() < 1e-7);
}

#[test]
fn adamw_decay_alone_shrinks() {
    let mut store = scalar_store(2.0, None);
    let mut opt = AdamW::new(&store, 0.5);
    opt.step(&mut store, 0.1);
    assert!((store.by_name("p").unwrap().data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-7);
}

#[test]
fn schedule_values() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 1e-4);
    assert_eq!(lr_at(30, &cfg), 2e-5);
    assert_eq!(lr_at(60, &cfg), 4e-6);
    assert!((lr_at(30, &cfg) - 1e-4 * 0.2).abs() < 1e-20);
    assert!((lr_at(60, &cfg) - 1e-4 * 0.04).abs() < 1e-20);
}

#[test]
fn ten_subjects_five_folds() {
    let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
    let splits = kfold_split(&labels, 5, 9).unwrap();
    assert_eq!(splits.len(), 5);
    let mut seen = vec![0; 10];
    for (train, test) in &splits {
        assert_eq!(test.len(), 2);
        assert_eq!(train.len(), 8);
        // one of each label per fold
        assert_eq!(test.iter().map(|&i| labels[i]).sum::<usize>(), 1);
        for &i in test {
            seen[i] += 1;
            assert!(!train.contains(&i));
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert_eq!(kfold_split(&labels, 5, 9).unwrap(), splits);
    assert!(kfold_split(&labels, 11, 0).is_err());
}

#[test]
fn folds_partition_and_stratify() {
    let mut runner = TestRunner::new(Config::with_cases(300));
    let strategy = (proptest::collection::vec(0usize..4, 2..60), 2usize..8, any::<u64>());
    runner
        .run(&strategy, |(labels, folds, seed)| {
            prop_assume!(folds <= labels.len());
            let splits = kfold_split(&labels, folds, seed).unwrap();
            let mut seen = vec![0; labels.len()];
            for (train, test) in &splits {
                prop_assert_eq!(train.len() + test.len(), labels.len());
                for &i in test {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            for c in 0..4 {
                let counts: Vec<usize> =
                    splits.iter().map(|(_, t)| t.iter().filter(|&&i| labels[i] == c).count()).collect();
                prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            }
            prop_assert_eq!(kfold_split(&labels, folds, seed).unwrap(), splits);
            Ok(())
        })
        .unwrap();
}

#[test]
fn perfect_predictions() {
    let labels = [0, 1, 2, 0, 1, 2];
    let scores: Vec<f64> = labels.iter().flat_map(|&l| (0..3).map(move |c| if c == l { 0.9 } else { 0.05 })).collect();
    let m = evaluate(&labels, &scores, &labels, 3).unwrap().metrics;
    assert_eq!(m.values(), [1.0; 5]);
}

#[test]
fn tied_scores_give_half_auc() {
    assert_eq!(rank_auc(&[0.3; 6], &[true, false, true, false, false, true]), Some(0.5));
    assert_eq!(rank_auc(&[0.3, 0.4], &[true, true]), None);
}

#[test]
fn toy_confusion_matrix() {
    // rows true class, columns predicted: [[2,0,0],[1,1,0],[0,0,2]]
    let labels = [0, 0, 1, 1, 2, 2];
    let preds = [0, 0, 0, 1, 2, 2];
    let scores = vec![1.0 / 3.0; 18];
    let report = evaluate(&preds, &scores, &labels, 3).unwrap();
    let m = report.metrics;
    assert!((m.acc - 5.0 / 6.0).abs() < 1e-12);
    assert!((m.sen - (1.0 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
    // specificities: class 0 3/4, class 1 4/4, class 2 4/4
    assert!((m.spe - (0.75 + 1.0 + 1.0) / 3.0).abs() < 1e-12);
    let f1 = [2.0 * (2.0 / 3.0) / (2.0 / 3.0 + 1.0), 2.0 * 0.5 / 1.5, 1.0];
    assert!((m.f1 - f1.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert_eq!(m.auc, 0.5);
    assert!(report.warnings.is_empty());
}

#[test]
fn absent_class_is_reported() {
    let report = evaluate(&[0, 1], &[0.9, 0.1, 0.0, 0.2, 0.8, 0.0], &[0, 1], 3).unwrap();
    assert_eq!(report.metrics.acc, 1.0);
    assert_eq!(report.metrics.sen, 1.0);
    assert!(report.warnings.iter().any(|w| w.contains("class 2")));
}

#[test]
fn auc_matches_pair_counting() {
    let mut runner = TestRunner::new(Config::with_cases(500));
    runner
        .run(&proptest::collection::vec((0u8..6, any::<bool>()), 2..40), |pairs| {
            let scores: Vec<f64> = pairs.iter().map(|(s, _)| f64::from(*s)).collect();
            let positive: Vec<bool> = pairs.iter().map(|(_, p)| *p).collect();
            let got = rank_auc(&scores, &positive);
            let (mut wins, mut total) = (0.0, 0.0);
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if positive[i] && !positive[j] {
                        total += 1.0;
                        wins += if scores[i] > scores[j] {
                            1.0
                        } else if scores[i] == scores[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            if total == 0.0 {
                prop_assert_eq!(got, None);
            } else {
                prop_assert!((got.unwrap() - wins / total).abs() < 1e-12);
            }
            Ok(())
        })
        .unwrap();
}

#[test]
fn metrics_stay_in_range() {
    let mut runner = TestRunner::new(Config::with_cases(300));
    let strategy = (2usize..5).prop_flat_map(|c| {
        (
            Just(c),
            proptest::collection::vec((0..c, 0..c, proptest::collection::vec(0.0f64..1.0, c)), 1..30),
        )
    });
    runner
        .run(&strategy, |(classes, rows)| {
            let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let preds: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let scores: Vec<f64> = rows.iter().flat_map(|r| r.2.clone()).collect();
            let m = evaluate(&preds, &scores, &labels, classes).unwrap().metrics;
            prop_assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
            Ok(())
        })
        .unwrap();
}

#[test]
fn summary_uses_population_std() {
    let runs = [
        Metrics { acc: 0.5, auc: 1.0, spe: 0.2, sen: 0.0, f1: 0.3 },
        Metrics { acc: 1.0, auc: 1.0, spe: 0.4, sen: 1.0, f1: 0.3 },
    ];
    let s = summarize(&runs);
    assert!((s.mean.acc - 0.75).abs() < 1e-12 && (s.std.acc - 0.25).abs() < 1e-12);
    assert!((s.std.sen - 0.5).abs() < 1e-12);
    assert_eq!(s.std.auc, 0.0);
    assert!(s.std.values().iter().all(|&v| v >= 0.0));
}

#[test]
fn training_is_deterministic() {
    let (cfg, data) = common::tiny(Arm::BWG);
    let idx: Vec<usize> = (0..data.inputs.len()).collect();
    let run = || {
        let mut model = data.model(&cfg, 11).unwrap();
        let log = train(&mut model, &data.inputs, &idx, &cfg.train, 11, |_| {}).unwrap();
        let report = mmgpl::trainer::evaluate_model(&model, &data.inputs, &idx).unwrap();
        (log.last().unwrap().train_loss, report.metrics, model.params.checksum())
    };
    let (a, b) = (run(), run());
    assert!((a.0 - b.0).abs() <= 1e-7);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn loss_falls_on_synthetic_data() {
    let (mut cfg, data) = common::tiny(Arm::BWG);
    cfg.train.epochs = 20;
    cfg.train.decay_epochs = vec![];
    let idx: Vec<usize> = (0..data.inputs.len()).collect();
    let mut ratios: Vec<f64> = (0..3)
        .map(|seed| {
            let mut model = data.model(&cfg, seed).unwrap();
            let log = train(&mut model, &data.inputs, &idx, &cfg.train, seed, |_| {}).unwrap();
            assert_eq!(log.len(), 20);
            log.last().unwrap().train_loss / log[0].train_loss
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] < 0.5, "median final/initial loss ratio {}", ratios[1]);
}

#[test]
fn arms_toggle_only_their_stages() {
    let (cfg, data) = common::tiny(Arm::BWG);
    let mut train_cfg = cfg.train.clone();
    train_cfg.epochs = 1;
    train_cfg.decay_epochs = vec![];
    train_cfg.folds = 2;
    let exp = Experiment {
        data: &data.inputs,
        shapes: &data.shapes,
        concepts: &data.concepts,
        model: cfg.model.clone(),
        train: train_cfg,
        seed: 4,
    };
    for arm in Arm::ALL {
        let cell = exp.train_cell(arm, 0, 1).unwrap();
        let mut normalized = cell.model.config.clone();
        normalized.arm = cfg.model.arm;
        assert_eq!(normalized, cfg.model, "{arm:?} changed more than the arm");

        let input = &data.inputs[0];
        let mut tape = Tape::new();
        let bound = cell.model.params.bind(&mut tape);
        let f = cell.model.forward(&mut tape, &bound, input, Mode::Eval).unwrap();
        assert_eq!(f.weights.is_some(), arm.weights(), "{arm:?}");
        assert_eq!(f.adjacency.is_some(), arm.graph(), "{arm:?}");
        // the graph still needs similarities
        assert_eq!(f.similarity.is_some(), arm != Arm::B, "{arm:?}");
        assert!(cell.record.final_loss.is_finite());
    }
}

#[test]
fn ablation_tables() {
    let (cfg, data) = common::tiny(Arm::BWG);
    let mut train_cfg = cfg.train.clone();
    train_cfg.epochs = 1;
    train_cfg.decay_epochs = vec![];
    train_cfg.folds = 2;
    train_cfg.repeats = 2;
    let exp = Experiment {
        data: &data.inputs,
        shapes: &data.shapes,
        concepts: &data.concepts,
        model: cfg.model.clone(),
        train: train_cfg,
        seed: 1,
    };
    let result = exp.run_ablation(&Arm::ALL).unwrap();
    assert_eq!(result.runs.len(), 16);
    let runs = result.runs_csv();
    assert!(runs.starts_with("arm,fold,repeat,acc,auc,spe,sen,f1\n"));
    assert_eq!(runs.lines().count(), 17);
    let summary = result.summary_csv();
    assert_eq!(summary.lines().count(), 9);
    assert!(summary.contains("\nBWG,std,"));
    // parallel cells give the same table as a second run
    assert_eq!(exp.run_ablation(&Arm::ALL).unwrap().runs, result.runs);
}
