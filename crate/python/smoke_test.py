"""Smoke test for the ufps Python bindings.

Build the extension first, for example with
``maturin develop -m crates/py/Cargo.toml``, or copy
``target/debug/libufps.so`` next to this file as ``ufps.so``.
"""

import json
import math

import ufps


def main():
    cfg = ufps.RunConfig(
        json.dumps(
            {
                "rounds": 4,
                "warmup_rounds": 1,
                "ws_end_round": 2,
                "arce_start_round": 2,
                "ua_start_round": 2,
                "gmt_start_round": 2,
                "susam": {"start_round": 3, "refresh_every": 1},
                "pretrain_epochs": 3,
                "batch_size": 2,
                "split": {"train": 4, "val": 2, "test": 2},
            }
        )
    )
    assert cfg.rounds == 4
    assert cfg.rescaled(8).rounds == 8
    assert cfg.with_value("scheduler.kind", "RG").hash() != cfg.hash()

    try:
        ufps.RunConfig('{"no_such_key": 1}')
    except ValueError:
        pass
    else:
        raise AssertionError("unknown keys must be rejected")

    bench = ufps.Benchmark(seed=cfg.seed, train=4, val=2, test=2)
    assert bench.num_clients == 3
    ds = bench.split(0, "train")
    h, w = ds.shape
    assert len(ds) == 4 and len(ds.image(0)) == h * w
    assert set(ds.labels(0)) <= {0, 1, 2, 3, 4}
    assert 0 in ds.known(0), "partially annotated client withholds labels"

    teachers = ufps.pretrain_teachers(cfg, bench)
    assert sorted(c for owned in teachers.owned() for c in owned) == [1, 2, 3, 4]
    pseudo = teachers.pseudo_label(ds.image(0), w, h)
    assert len(pseudo) == h * w

    result = ufps.train(cfg, bench, teachers)
    assert [r for r, _ in result.history] == [1, 2, 3, 4]
    model = result.best_model
    pred = model.predict(ds.image(0), w, h)
    assert len(pred) == h * w and max(pred) <= 4
    probs = model.probabilities(ds.image(0), w, h)
    assert abs(sum(probs[:5]) - 1.0) < 1e-9

    rows = ufps.evaluate(model, bench, run="smoke", post=True)
    assert len(rows) == 4 * 4
    for row in rows:
        assert 0.0 <= row["dice"] <= 1.0 and row["hd"] >= 0.0

    assert ufps.proportional_weights([10, 30]) == [0.25, 0.75]
    ua = ufps.ua_weights([0.1, 0.2], [0.0, 0.0], [0.5, 0.5], 0.05, 0.001)
    assert abs(ua[0] - 0.62693) < 1e-5
    assert ufps.topk_mask([0.1, -3.0, 0.5, 2.0], 0.5) == [1, 3]
    assert ufps.hausdorff([(0, 0)], [(3, 4)], 100.0) == 5.0
    assert ufps.dice([1, 1, 0, 0], [1, 0, 1, 0], 1) == 0.5
    assert math.isclose(sum(ufps.proportional_weights([40, 40, 40])), 1.0)

    print("smoke test passed:", len(rows), "metric rows, best round", result.best_round)


if __name__ == "__main__":
    main()
