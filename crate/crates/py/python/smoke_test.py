"""Quick end-to-end check of the Python bindings.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`.
"""

import os
import tempfile

import vimoe


def main():
    cfg = vimoe.ModelConfig("vit-s-14", num_experts=8, moe_last_l=2, shared_expert=True)
    total, activated = cfg.count_params()
    assert round(total / 1e6, 1) == 40.9, total
    assert round(activated / 1e6, 1) == 24.4, activated
    assert vimoe.routing_degree(2, 1, 5) == 32
    assert abs(vimoe.load_balance_loss([2, 2], [2.0, 2.0], 4, 0.01) - 0.01) < 1e-15

    small = vimoe.ModelConfig(embed_dim=16, depth=3, heads=2, mlp_ratio=2, num_classes=4,
                              num_experts=4, moe_last_l=2, shared_expert=True)
    train = vimoe.Dataset.classification(4, 32, seed=1)
    test = vimoe.Dataset.classification(4, 16, seed=1, split="test")
    model = vimoe.Model(small, seed=0)
    epochs = model.train(train, vimoe.TrainConfig(epochs=2, batch_size=8, warmup_epochs=1), eval=test)
    assert len(epochs) == 2 and 0.0 <= epochs[-1]["metric"] <= 1.0

    shape, values = test.image(0)
    logits, routing = model.predict(shape, values)
    assert len(logits) == 4 and len(routing) == 2

    metric, log = model.evaluate(test)
    assert log.layers == [1, 2]
    heat = log.heatmap(1)
    assert len(heat["matrix"]) == 4
    assert abs(sum(log.expert_load(1)) - 1.0) < 1e-12

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.vimo")
        model.save(path)
        again = vimoe.Model.load(path)
        assert again.evaluate(test)[0] == metric
        try:
            vimoe.Dataset.load(os.path.join(d, "missing.vimd"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file should raise OSError")

    print("smoke test passed: accuracy", metric, "epochs", [round(e["task_loss"], 4) for e in epochs])


if __name__ == "__main__":
    main()
