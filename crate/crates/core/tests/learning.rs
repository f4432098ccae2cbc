use ierot::dataio::synthetic_dataset;
use ierot::eval::{probe_accuracy, ProbeConfig};
use ierot::trainer::{self, Pretrained, ProbePoint, RunConfig, TrainMode};

#[test]
fn both_pretext_heads_learn_on_synthetic_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(TrainMode::Ierot, "synthetic", dir.path());
    cfg.epochs = 6;
    cfg.batch_size = 32;
    cfg.lr0 = 0.05;
    let ds = synthetic_dataset(320, 10, 21);
    let (ck, history) = trainer::train(cfg, &ds).unwrap();
    let first = history.first().unwrap();
    let last = history.last().unwrap();
    println!(
        "val_acc_R {:.3} val_acc_I {:.3}, loss {:.3} -> {:.3}",
        last.val_acc_r, last.val_acc_i, first.train_loss_total, last.train_loss_total
    );
    assert!(last.val_acc_r >= 0.40, "{last:?}");
    assert!(last.val_acc_i >= 0.40, "{last:?}");
    assert!(last.train_loss_total < first.train_loss_total);

    let pre = Pretrained::from_checkpoint(&ck).unwrap();
    let probe_train = synthetic_dataset(300, 4, 22);
    let probe_test = synthetic_dataset(100, 4, 23);
    let acc = probe_accuracy(
        &pre,
        &probe_train,
        &probe_test,
        ProbePoint::Gap,
        &ProbeConfig::default(),
    )
    .unwrap();
    assert!(acc > 0.4, "probe accuracy {acc}");
}
