mod common;

use mocnn_core::autodiff::checkpoint;
use mocnn_core::model::ArchitectureSpec;
use mocnn_core::train::{train_full, train_transfer_from, TrainConfig};
use mocnn_core::MultiObjectiveNet;

fn pretrained() -> MultiObjectiveNet {
    let corpus = common::tiny_corpus(8, 4, 6, 3, 21);
    let net = MultiObjectiveNet::with_spec(ArchitectureSpec::tiny(), 6, 3, 21).unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::full()
    };
    train_full(net, &corpus, &config).unwrap().final_net
}

fn frozen_bytes_unchanged(epochs: usize) {
    let dir = tempfile::tempdir().unwrap();
    let before = dir.path().join("pretrained.bin");
    let after = dir.path().join("final.bin");
    pretrained().save(&before).unwrap();

    let target = common::tiny_corpus(8, 4, 7, 1, 22);
    let config = TrainConfig {
        epochs,
        batch_size: 4,
        early_stop_patience: epochs,
        ..TrainConfig::transfer()
    };
    let loaded = MultiObjectiveNet::load(&before).unwrap();
    let out = train_transfer_from(loaded, &target, &config).unwrap();
    assert_eq!(out.log.epochs.len(), epochs);
    out.final_net.save(&after).unwrap();

    let old = checkpoint::load(&before).unwrap();
    let new = checkpoint::load(&after).unwrap();
    let mut frozen = 0;
    let mut moved = 0;
    for t in new.iter().filter(|t| t.name != mocnn_core::model::ARCH_TENSOR) {
        let prior = old.iter().find(|o| o.name == t.name).expect("same tensor names");
        let same = t.value.data().iter().zip(prior.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            && t.value.shape() == prior.value.shape();
        if t.trainable {
            moved += usize::from(!same);
        } else {
            frozen += 1;
            assert!(same, "frozen tensor {} changed after {epochs} epochs", t.name);
        }
    }
    assert_eq!(frozen, 10, "trunk and first mask conv, weights and biases");
    assert!(moved > 0);
}

#[test]
fn one_epoch() {
    frozen_bytes_unchanged(1);
}

#[test]
fn five_epochs() {
    frozen_bytes_unchanged(5);
}

#[test]
fn thirty_epochs() {
    frozen_bytes_unchanged(30);
}
