use tutorcount::experiment::AblationConfig;
use tutorcount::synth::generate_dataset;
use tutorcount::trainer::{train, Mode};

#[test]
fn tutored_training_descends_on_the_reference_set() {
    let preset = AblationConfig::default();
    let scenes = generate_dataset(&preset.recipe, 200).unwrap();
    let mut cfg = preset.train_config(Mode::SfPlusTutor, 0).unwrap();
    cfg.epochs = 3;
    let out = train(&scenes, &cfg).unwrap();
    assert!(out.divergence.is_none());
    let epoch_mean = |e: usize| {
        let v: Vec<f64> = out.records.iter().filter(|r| r.epoch == e).map(|r| r.main_loss).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (first, last) = (epoch_mean(0), epoch_mean(2));
    assert!(last < first, "first-epoch mean {first}, final-epoch mean {last}");
    for r in &out.records {
        let w = r.mean_weight.unwrap();
        assert!((0.5..1.0).contains(&w));
        assert!(r.min_weight.unwrap() <= w && w <= r.max_weight.unwrap());
    }
}
