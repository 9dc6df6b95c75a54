"""Smoke test for the teamlearn_py extension.

Build the library first:

    cargo build -p teamlearn-py --features extension-module

then run `python3 crates/py/python/smoke_test.py [path/to/libteamlearn_py.so]`.
"""

import importlib.util
import os
import shutil
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
DEFAULT_LIB = os.path.join(HERE, "..", "..", "..", "target", "debug", "libteamlearn_py.so")


def load(path):
    tmp = tempfile.mkdtemp()
    target = os.path.join(tmp, "teamlearn_py.so")
    shutil.copy(path, target)
    spec = importlib.util.spec_from_file_location("teamlearn_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    tl = load(sys.argv[1] if len(sys.argv) > 1 else DEFAULT_LIB)

    probs = tl.softmax([1.0, 0.0])
    assert abs(probs[0] - 0.7310585786300049) < 1e-12

    data = tl.Dataset.synthetic(n=1200, seed=3)
    assert len(data) == 1200 and data.num_classes == 5 and data.feature_dim == 8
    train, val, test = data.split(0.6, 0.15, 0.25, 0)
    assert len(train) + len(val) + len(test) == 1200

    team = tl.TeamConfig.accuracy(5, 0.1)
    cfg = tl.TrainConfig(iterations=300, calibration_interval=100)

    human = tl.human_only(test, team)
    assert human["query_rate"] == 1.0

    fixed = tl.DiscriminativeSystem.train_fixed(train, team, cfg)
    joint = tl.DiscriminativeSystem.train_joint(train, team, cfg)
    for system in (fixed, joint):
        m = system.evaluate(test, team)
        assert abs(m["total_loss"] - (m["classification_error"] + 0.1 * m["query_rate"])) < 1e-9

    voi = tl.VoiSystem.train_fixed(train, team, cfg)
    x, y, h = test.instance(0)
    decision = voi.decide(x)
    assert decision["query"] == (decision["u_q"] > decision["u_nq"])
    label, queried = voi.predict(x, h)
    assert queried == decision["query"]
    if not queried:
        assert label == decision["best_label_no_query"]
    assert voi.with_cost(1.0).decide(x)["query"] is False

    u_nq_soft, _, q_soft = voi.soft_team_quantities(x, 1e-3)
    assert abs(u_nq_soft - decision["u_nq"]) < 1e-3 and 0.0 <= q_soft <= 1.0

    for bad in (
        lambda: tl.TrainConfig(learning_rate=-1.0),
        lambda: tl.TeamConfig.accuracy(1, 0.1),
        lambda: tl.TeamConfig.accuracy(3, 0.1).with_cost(-1.0),
        lambda: tl.Dataset.synthetic(n=0),
    ):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("invalid input accepted")

    print("teamlearn_py smoke test passed:", round(m["total_loss"], 4), decision)


if __name__ == "__main__":
    main()
