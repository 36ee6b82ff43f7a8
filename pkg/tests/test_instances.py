import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rfl.instances import (GenConfig, beta_hat_row, dumps, generate, illustrative_2_4,
                           instance_from_dict, instance_to_dict, load_instance, save_instance)
from rfl.model import ModelError


def test_same_seed_same_bytes():
    a = dumps(generate(GenConfig(10, 3, seed=7)))
    b = dumps(generate(GenConfig(10, 3, seed=7)))
    c = dumps(generate(GenConfig(10, 3, seed=8)))
    assert a == b and a != c


@given(st.integers(0, 2**32), st.integers(2, 12))
def test_generator_invariants(seed, n):
    inst = generate(GenConfig(n, 2, seed=seed))
    assert inst.n_sites == inst.n_facilities == n
    assert np.all((inst.capacities >= 100) & (inst.capacities <= 180))
    assert np.all((inst.demands >= 20) & (inst.demands <= 80))
    coords = np.array([s.coord for s in inst.sites])
    assert np.all((coords >= 0) & (coords <= 15))
    for i in range(n):  # every site is inside its own effective set
        assert inst.pair(i, i).beta_hat[i] == pytest.approx(10.0)
    for (i, j), pair in inst.ambiguity.items():
        assert np.linalg.norm(coords[i] - coords[j]) <= 5.0 + 1e-12
        assert np.all((pair.beta_hat >= 0) & (pair.beta_hat <= 10))
        assert np.linalg.eigvalsh(pair.ellipsoid_shape)[0] >= 1 - 1e-9
        assert np.linalg.eigvalsh(pair.cov_hat)[0] >= -1e-10


def test_beta_row_branches():
    d = np.array([0.0, 2.0, 6.0])
    row = beta_hat_row(d, 0, 5.0)
    assert row.tolist() == pytest.approx([10.0, 0.6, 0.0])
    assert beta_hat_row(d, 2, 5.0).tolist() == [0, 0, 0]
    assert beta_hat_row(d, 0, 5.0, clip=False)[2] == pytest.approx(-0.2)


def test_full_matrices_materializes_every_pair():
    inst = generate(GenConfig(5, 2, seed=1, full_matrices=True))
    assert len(inst.ambiguity) == 25


def test_round_trip(tmp_path):
    inst = generate(GenConfig(6, 2, seed=4))
    path = tmp_path / "i.json"
    save_instance(inst, path)
    back = load_instance(path)
    assert dumps(back) == dumps(inst)
    data = json.loads(path.read_text())
    assert data["format"] == 1


def test_diag_shorthand_and_format_check():
    data = instance_to_dict(illustrative_2_4("est1"))
    back = instance_from_dict(data)
    assert np.allclose(back.pair(0, 0).ellipsoid_shape, 2 * np.eye(3))
    data["format"] = 99
    with pytest.raises(ModelError):
        instance_from_dict(data)


def test_example_data():
    inst = illustrative_2_4("est2")
    assert inst.demands.tolist() == [20, 30, 25]
    assert inst.capacities.tolist() == [75, 75, 75]
    assert inst.budget == 1
    with pytest.raises(ValueError):
        illustrative_2_4("est3")


def test_config_validation():
    with pytest.raises(ModelError):
        GenConfig(0, 1)
    with pytest.raises(ModelError):
        GenConfig(3, -1)
