use gsnias::corpus::{generate_synthetic, SynthConfig};
use gsnias::train::{train, TrainConfig};

#[test]
fn synthetic_loss_drops_by_epoch_three() {
    let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig {
        dim: 16,
        layers: 1,
        anchors: 10,
        epochs: 4,
        seed: 1,
        ..TrainConfig::default()
    };
    let ckpt = train(&cfg, &corpus).unwrap();
    let losses = &ckpt.epoch_losses;
    assert_eq!(losses.len(), 4);
    assert!(losses[3] < losses[0], "{losses:?}");
}
