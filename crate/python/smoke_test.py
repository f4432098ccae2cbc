"""Smoke test for the ierot Python extension."""

import math
import os
import tempfile

import ierot


def main():
    pixels = bytes([10, 10, 10, 20, 20, 20, 30, 30, 30, 40, 40, 40])
    out, h, w = ierot.transform(pixels, 2, 2, 1, "solarization", 3)
    assert (h, w) == (2, 2)
    assert out == bytes([20, 20, 20, 40, 40, 40, 10, 10, 10, 30, 30, 30]), out
    inverted, _, _ = ierot.transform(bytes([10, 10, 10]), 1, 1, 2, "solarization", 0)
    assert inverted == bytes([245, 245, 245])

    assert ierot.mgda_alpha([1.0, 0.0], [1.0, 0.0]) == 0.5
    assert abs(ierot.mgda_alpha([1.0, 0.0], [0.0, 1.0]) - 0.5) < 1e-6
    assert ierot.mgda_alpha([1.0], [2.0]) == 1.0

    try:
        ierot.transform(pixels, 2, 2, 4, "solarization", 0)
    except ValueError:
        pass
    else:
        raise AssertionError("rotation label 4 accepted")

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "train.bin")
        ierot.write_synthetic_cifar(data, 48, classes=4, seed=1)
        cfg = os.path.join(tmp, "run.cfg")
        with open(cfg, "w") as f:
            f.write(
                "\n".join(
                    [
                        "mode = ierot",
                        "ie_kind = solarization",
                        f"dataset_path = {data}",
                        "dataset_variant = cifar10",
                        "seed = 0",
                        "epochs = 2",
                        "batch_size = 16",
                        "lr0 = 0.01",
                        "momentum = 0.9",
                        "weight_decay = 0.0005",
                        "alpha_mode = mgda_ub",
                        "alpha_fixed = 0.5",
                        f"checkpoint_dir = {tmp}",
                        f"metrics_path = {os.path.join(tmp, 'metrics.csv')}",
                        "",
                    ]
                )
            )
        history = ierot.pretrain(cfg)
        assert [m["epoch"] for m in history] == [0, 1], history
        assert all(math.isfinite(m["train_loss_total"]) for m in history)
        assert all(0.0 <= m["alpha_min"] <= m["alpha_max"] <= 1.0 for m in history)

        ck = os.path.join(tmp, "checkpoint.bin")
        top1 = ierot.probe(ck, data, probe_point="gap")
        assert 0.0 <= top1 <= 1.0
        assert ierot.probe(ck, data, probe_point="gap") == top1
        try:
            ierot.probe(ck, data, probe_point="conv9")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown probe point accepted")

    print(f"ierot smoke test passed (probe top1 {top1:.3f})")


if __name__ == "__main__":
    main()
