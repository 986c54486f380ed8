use arp_core::autorep::{accuracy, train_replace, train_supervised, ReplacementConfig, TrainConfig};
use arp_core::data::two_spirals;
use arp_core::Model64;

#[test]
fn replacement_hits_budget_and_logs_legal_transitions() {
    let train = two_spirals::<f64>(150, 1.5, 0.05, 1);
    let mut model = Model64::mlp(&[2, 16, 16, 2], 2);
    let tc = TrainConfig {
        epochs: 60,
        lr: 1e-2,
        seed: 2,
        ..TrainConfig::default()
    };
    train_supervised(&mut model, &train, &tc).unwrap();
    let base = accuracy(&model, &train).unwrap();
    let cfg = ReplacementConfig {
        budget: 16,
        epochs: 12,
        lr_weights: 1e-3,
        log_transitions: true,
        seed: 3,
        ..ReplacementConfig::default()
    };
    let (plan, history) = train_replace(&mut model, &train, None, &cfg).unwrap();
    assert_eq!(plan.relu_count(), 16);
    assert_eq!(model.relu_count(), 16);
    assert_eq!(history.first_violation(), None);
    assert!(!history.transitions.is_empty());
    assert_eq!(history.epochs.len(), cfg.epochs + cfg.finetune_epochs);
    assert!(history.epochs.iter().all(|r| r.loss.is_finite()));
    assert!(accuracy(&model, &train).unwrap() > 0.5 * base);
    let csv = history.to_csv();
    assert!(csv.starts_with("epoch,accuracy,relu_count,flips\n"));
    assert_eq!(csv.lines().count(), history.epochs.len() + 1);
}

#[test]
fn replacement_is_deterministic_under_a_seed() {
    let train = two_spirals::<f64>(60, 1.0, 0.05, 4);
    let run = || {
        let mut m = Model64::mlp(&[2, 8, 2], 5);
        let cfg = ReplacementConfig {
            budget: 3,
            epochs: 4,
            seed: 6,
            ..ReplacementConfig::default()
        };
        train_replace(&mut m, &train, None, &cfg).unwrap()
    };
    assert_eq!(run(), run());
}
