"""Smoke test for the `mitp` extension module.

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""
import json
import math

import mitp

TINY = {
    "encoder": {
        "num_layers": 4, "d_v": 8, "d_t": 8, "num_heads": 2, "n_patches": 3,
        "raw_dim": 4, "n_text_tokens": 4, "vocab_size": 16, "d_joint": 6,
    },
    "interaction_layers": [1, 2],
    "prompt_length": 2,
    "epochs": 2,
    "batch_size": 8,
    "data": {"synthetic": {
        "num_classes": 3, "n_train": 24, "n_val": 12, "n_test": 12,
        "n_patches": 3, "raw_dim": 4, "n_text_tokens": 4, "vocab_size": 16,
    }},
}


def main():
    cfg = mitp.RunConfig(json.dumps(TINY))
    assert cfg.interaction_layers == [1, 2]
    assert cfg.variant == "mitp_full"
    round_trip = mitp.RunConfig(cfg.to_json())
    assert round_trip.to_json() == cfg.to_json()

    try:
        mitp.RunConfig('{"similarity": "euclid"}')
    except ValueError:
        pass
    else:
        raise AssertionError("bad similarity accepted")

    a = [[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]]
    b = [[2.0, 4.0, 6.0], [1.0, 1.0, 0.0]]
    cos = mitp.similarity_scores(a, b, "cosine")
    assert abs(cos[0] - 1.0) < 1e-12
    assert mitp.similarity_scores(a, a, "mmd") == [1.0, 1.0]

    step = mitp.hub_step(a, [[0.1, 0.2], [0.3, -0.4]], similarity="cov-pearsonr")
    assert len(step["p_v_next"]) == 2 and len(step["p_t_next"][0]) == 2
    for z, r in zip(step["z_v"], step["r_v"]):
        assert z >= 0 and r >= 0

    census = mitp.param_census(cfg)
    assert 0 < census["trainable_fraction"] < 1

    splits = mitp.generate_synthetic(cfg)
    assert [len(splits[s]) for s in ("train", "val", "test")] == [24, 12, 12]

    result = mitp.train_run(cfg)
    assert result["trainable_param_count"] == census["trainable_total"]
    assert math.isfinite(result["test_loss"])
    again = mitp.train_run(cfg)
    assert again["test_metrics"] == result["test_metrics"]

    cfg.variant = "baseline"
    assert cfg.interaction_layers == []
    assert mitp.train_run(cfg)["trainable_param_count"] == 0

    suites = mitp.gradcheck(1e-4)
    assert all(s["passed"] for s in suites), suites

    print(f"mitp {mitp.__version__}: accuracy {result['test_metrics']['accuracy']:.3f}, "
          f"{len(suites)} gradient suites ok")


if __name__ == "__main__":
    main()
