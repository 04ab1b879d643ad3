import math

import numpy as np
import pytest

from cpaudit.synth import GroupSpec, SynthConfig, SynthConfigError, generate, ham_like


def test_same_seed_same_data():
    a, b = generate(ham_like(n=500, seed=3)), generate(ham_like(n=500, seed=3))
    assert np.array_equal(a.probs, b.probs) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.probs, generate(ham_like(n=500, seed=4)).probs)


def test_large_concentration_is_accurate():
    ds = generate(SynthConfig(n=10000, k=7, concentration=1e6, seed=0))
    assert ds.accuracy() >= 0.995


def test_small_concentration_is_chance():
    n, k = 10000, 7
    acc = generate(SynthConfig(n=n, k=k, concentration=1e-6, seed=0)).accuracy()
    assert abs(acc - 1 / k) <= 3 * math.sqrt((1 / k) * (1 - 1 / k) / n)


def test_priors():
    ds = generate(SynthConfig(n=10000, k=2, class_priors=(0.9, 0.1), seed=1))
    assert abs(ds.class_distribution()[1] - 0.1) <= 0.01


def test_group_multiplier_makes_subgroup_harder():
    g = GroupSpec("tone", ("light", "dark"), (0.5, 0.5), (1.0, 0.2))
    ds = generate(SynthConfig(n=8000, k=5, concentration=4.0, group_specs=(g,), seed=2))
    correct = ds.probs.argmax(1) == ds.labels
    tone = ds.groups["tone"]
    assert correct[tone == "light"].mean() > correct[tone == "dark"].mean() + 0.1


def test_config_round_trip():
    cfg = ham_like(n=100, seed=5, group_specs=(GroupSpec("s", ("a",), (1.0,), (1.0,)),))
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("kw", [
    {"n": 0, "k": 3}, {"n": 10, "k": 1}, {"n": 10, "k": 3, "concentration": 0},
    {"n": 10, "k": 2, "class_priors": (0.5, 0.6)}, {"n": 10, "k": 2, "class_priors": (1.0,)},
])
def test_config_validation(kw):
    with pytest.raises(SynthConfigError):
        SynthConfig(**kw)


def test_unknown_field():
    with pytest.raises(SynthConfigError, match="unknown"):
        SynthConfig.from_dict({"n": 10, "k": 2, "temperature": 1})
