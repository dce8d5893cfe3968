"""Smoke test for the gridrl_py extension module.

Build and install first:  pip install --no-build-isolation -e crates/python
"""

import json
import math
import tempfile
from pathlib import Path

import gridrl_py as g


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    # Rewards.
    assert close(g.entropy_reward(1.0, 1.0), 1.0)
    assert close(g.entropy_reward(0.0, 2.0), 0.2)
    assert g.combine_rewards([1.0, 1.0, 0.5], [0.5, 1.0, 1.0], 0.4, "top") == [1.2, 1.4, 0.5]

    adv = g.normalize_advantages([1.0, 0.0, 0.0, 1.0])
    assert close(sum(adv), 0.0) and close(sum(a * a for a in adv) / 4, 1.0)
    assert g.normalize_advantages([0.5, 0.5]) == [0.0, 0.0]

    # Similarity chain: identical tokens across opposite-sign rollouts cancel.
    cb = g.Codebook()
    assert cb.vocab == 64 and cb.num_categories == 8
    assert close(cb.cosine(3, 3), 1.0, 1e-9)
    tokens = [[0, 9, 17, 25], [0, 10, 40, 26]]
    sim = g.opposite_sign_similarity(cb, [1.0, 0.0], tokens)
    mask = g.similarity_mask(sim)
    tilde = g.reweight_advantages(g.normalize_advantages([1.0, 0.0]), mask)
    assert tilde[0][0] == 0.0 and tilde[1][0] == 0.0
    w = g.kl_weights(sim, 0.03)
    assert all(0.015 - 1e-12 <= x <= 0.045 + 1e-12 for row in w for x in row)

    # Scoring and sampling.
    cfg = g.TrainConfig(overrides=json.dumps({"pretrain_steps": 3, "pretrain_batch": 2,
                                              "eval_prompts": 4, "eval_samples": 1,
                                              "total_steps": 2, "batch_size": 2, "group_size": 2,
                                              "eval_every": 0, "learning_rate": 1e-3}))
    prompt = json.dumps({"task": "counting", "categories": [2], "targets": {"count": 4}})
    policy = g.Policy.init(cfg, 0)
    toks, logp, h = policy.sample(prompt, seed=5)
    assert len(toks) == 64 and len(logp) == 64 and 0.0 <= h <= math.log(64) + 1e-9
    assert 0.0 <= g.score(cfg, toks, prompt) <= 1.0

    # Pretrain, train, evaluate, compare.
    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        ref, losses, held = g.pretrain(cfg, str(d / "ref.stg"))
        assert len(losses) == 3 and 0.0 <= held <= 1.0
        assert g.Policy.load(str(d / "ref.stg")).num_params == ref.num_params
        trained, metrics = g.train(cfg, ref, str(d / "run"))
        assert len(metrics) == 2 and json.loads(metrics[0])["step"] == 0
        rows = g.evaluate(cfg, trained, n_samples=1)
        assert rows[-1][0] == "overall"
        report = g.compare_runs([str(d / "run" / "metrics.csv")] * 2)
        assert "entropy_drift" in report

    print("python smoke test passed")


if __name__ == "__main__":
    main()
