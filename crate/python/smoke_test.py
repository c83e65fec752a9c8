"""Smoke test for the kinesim Python module.

Build and install first:

    pip install --no-build-isolation -e crates/py
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import kinesim


def main():
    # Kinematics and codec.
    x, y, theta, v = kinesim.ctra_step((0.0, 0.0, 0.0, 10.0), (0.0, 0.5), 0.5)
    assert abs(y - 20.0 * (1.0 - math.cos(0.25))) < 1e-9, y
    assert kinesim.VOCAB == 3969
    tok = kinesim.quantize_action(0.0, 0.0)
    assert kinesim.dequantize_token(tok) == (0.0, 0.0)

    # Tokenizer recovers a codebook track exactly.
    truth = [kinesim.quantize_action(1.0, 0.1)] * 6
    states = [(0.0, 0.0, 0.0, 5.0)]
    for t in truth:
        states.append(kinesim.ctra_step(states[-1], kinesim.dequantize_token(t)))
    tokens, ctl, residuals = kinesim.tokenize_track(states)
    assert tokens == truth, tokens
    assert max(residuals) < 1e-9

    # Scenes, a tiny model, rollouts and metrics.
    scenes = kinesim.generate_scenes(3, {"straight_follow": 4, "car_following": 2})
    assert len(scenes) == 6
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "scene.jsonl"
        scenes[0].save(str(path))
        again = kinesim.Scenario.load(str(path))
        assert again.id == scenes[0].id and again.states(again.ego) == scenes[0].states(scenes[0].ego)

        model = kinesim.Model({"d_model": 16, "enc_layers": 1, "dec_layers": 1}, seed=1)
        curve = model.train(scenes, scenes[:2], {"epochs": 2, "batch_size": 4, "lr": 2e-3})
        assert len(curve) == 2 and all(math.isfinite(e["train_loss"]) for e in curve)
        ckpt = Path(d) / "m.ckpt"
        model.save(str(ckpt))
        model = kinesim.Model.load(str(ckpt))

    groups = [model.rollout(s, samples=2, sampler="top-p:0.9", seed=5) for s in scenes]
    assert all(r.is_feasible() for g in groups for r in g)
    report = kinesim.evaluate(groups, scenes)
    assert report["scenarios"] == 6 and math.isfinite(report["min_ade"])
    assert scenes[0].to_svg().startswith("<svg")

    # Same seed, same rollouts.
    again = model.rollout(scenes[0], samples=2, sampler="top-p:0.9", seed=5)
    assert [r.tokens(scenes[0].ego) for r in again] == [r.tokens(scenes[0].ego) for r in groups[0]]

    print("smoke test ok:", model, report["collision_rate_8s"])


if __name__ == "__main__":
    main()
