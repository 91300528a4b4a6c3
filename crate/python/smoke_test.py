"""Smoke test for the flowrl extension module.

Build and run:
    cargo build --release -p flowrl-py
    cp target/release/libflowrl_py.so python/flowrl.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import flowrl  # noqa: E402


def main():
    assert abs(flowrl.sigma_at(0.7, 10, 5) - 0.7) < 1e-12
    assert abs(flowrl.sigma_at(0.7, 10, 8) - 1.4) < 1e-12

    cfg = flowrl.RunConfig(json.dumps({
        "seed": 3,
        "pretrain": {"steps": 200},
        "calibrate": {"iterations": 2, "samples": 8},
        "align": {"group_size": 6, "train_steps": 2, "eval_every": 2, "eval_samples_per_class": 4},
    }))
    assert json.loads(cfg.to_json())["calibrate"]["eps1"] == 2

    field, losses = flowrl.pretrain(cfg)
    assert len(losses) == 200 and all(math.isfinite(l) for l in losses)
    model = cfg.reward_model()

    traj = flowrl.sample_trajectory(field, 1, steps=10, seed=5)
    assert len(traj.states) == 11
    latent = flowrl.latent_rewards(field, traj, model)
    gains = flowrl.reward_gains(latent)
    assert abs(sum(gains) - (latent[0] - latent[10])) < 1e-9

    adv = flowrl.group_advantages([latent, [v + 0.1 * i for i, v in enumerate(latent)]], "dense")
    assert len(adv) == 2 and len(adv[0]) == 10

    psi = flowrl.calibrate(cfg, field)
    assert len(psi) == 10 and all(0.01 <= p <= 3.0 for p in psi)

    aligned, metrics = flowrl.align(cfg, field, psi=psi)
    assert len(metrics) == 4
    assert metrics[0]["max_ratio_deviation"] == 0.0
    summary = flowrl.evaluate(aligned, model, samples_per_class=4)
    assert len(summary["per_class_reward"]) == 4

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "f.ckpt.json")
        aligned.save(path)
        again = flowrl.VelocityField.load(path)
        assert again.digest() == aligned.digest()
        assert flowrl.run_command(["align", "--out", os.path.join(d, "empty")]) == 3

    try:
        flowrl.RunConfig('{"align": {"nope": 1}}')
    except flowrl.FlowRLError as e:
        assert "nope" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    print(f"python smoke test ok: {field!r}, eval reward {summary['mean_reward']:.3f}")


if __name__ == "__main__":
    main()
