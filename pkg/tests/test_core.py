"""Configuration validation and deterministic stream derivation."""

import numpy as np
import pytest

from oafel.core import (
    Hyperparams,
    InvalidValue,
    MissingKey,
    derive_stream,
    validate_config,
)

from conftest import base_config


class TestValidateConfig:
    def test_minimal_config_fills_defaults(self):
        hp, devices = validate_config(base_config())
        assert hp.q_min == 0.1
        assert hp.momentum == 0.0
        assert hp.K_local == 1
        assert hp.L_e == hp.L_b
        assert hp.delta_h == 0.5
        assert hp.l_smooth is None and hp.mu is None and hp.G_sq is None
        assert len(devices) == 4
        assert devices[0].e_n == 0.01

    def test_scalar_eta_broadcasts_to_horizon(self):
        hp, _ = validate_config(base_config(T=5, eta=0.2))
        assert hp.eta == (0.2,) * 5
        assert hp.eta_at(1) == 0.2 and hp.eta_at(5) == 0.2

    def test_eta_list_must_match_horizon(self):
        hp, _ = validate_config(base_config(T=3, eta=[0.3, 0.2, 0.1]))
        assert hp.eta == (0.3, 0.2, 0.1)
        with pytest.raises(InvalidValue) as err:
            validate_config(base_config(T=3, eta=[0.3, 0.2]))
        assert err.value.name == "eta"

    def test_missing_required_key(self):
        cfg = base_config()
        del cfg["gamma0"]
        with pytest.raises(MissingKey) as err:
            validate_config(cfg)
        assert err.value.name == "gamma0"

    def test_unknown_key_rejected(self):
        with pytest.raises(InvalidValue) as err:
            validate_config(base_config(gama0=5.0))
        assert err.value.name == "gama0"

    def test_negative_budget_rejected(self):
        with pytest.raises(InvalidValue) as err:
            validate_config(base_config(E_bar_n=-1.0))
        assert err.value.name == "E_bar_n"

    def test_momentum_range(self):
        with pytest.raises(InvalidValue):
            validate_config(base_config(momentum=1.0))
        hp, _ = validate_config(base_config(momentum=0.9))
        assert hp.momentum == 0.9

    def test_L_e_bounds(self):
        with pytest.raises(InvalidValue):
            validate_config(base_config(L_e=17))
        with pytest.raises(InvalidValue):
            validate_config(base_config(L_e=0))
        hp, _ = validate_config(base_config(L_e=4))
        assert hp.L_e == 4

    def test_per_device_lists(self):
        cfg = base_config(e_n=[0.01, 0.02, 0.03, 0.04], E_bar_n=[10, 20, 30, 40])
        hp, devices = validate_config(cfg)
        assert [d.e_n for d in devices] == [0.01, 0.02, 0.03, 0.04]
        assert [d.E_bar_n for d in devices] == [10, 20, 30, 40]
        with pytest.raises(InvalidValue):
            validate_config(base_config(e_n=[0.01, 0.02]))

    def test_E_cp_round_converts_to_per_sample(self):
        cfg = base_config(K_local=2)
        del cfg["e_n"]
        cfg["E_cp_round"] = 0.64
        hp, devices = validate_config(cfg)
        assert devices[0].e_n == pytest.approx(0.64 / (16 * 2), rel=1e-15)
        cfg["e_n"] = 0.01
        with pytest.raises(InvalidValue):
            validate_config(cfg)

    def test_bool_is_not_an_int(self):
        with pytest.raises(InvalidValue):
            validate_config(base_config(T=True))

    def test_optional_analysis_constants(self):
        hp, _ = validate_config(base_config(l_smooth=2.0, mu=0.5, G_sq=3.0))
        assert hp.l_smooth == 2.0 and hp.mu == 0.5 and hp.G_sq == 3.0
        with pytest.raises(InvalidValue):
            validate_config(base_config(mu=0.0))
        with pytest.raises(InvalidValue):
            validate_config(base_config(G_sq=-1.0))


class TestDeriveStream:
    def test_reproducible(self):
        a = derive_stream(42, "noise", 3, 17).standard_normal(8)
        b = derive_stream(42, "noise", 3, 17).standard_normal(8)
        assert np.array_equal(a, b)

    def test_coordinates_separate_streams(self):
        base = derive_stream(42, "noise", 3, 17).standard_normal(8)
        for other in (
            derive_stream(43, "noise", 3, 17),
            derive_stream(42, "batch", 3, 17),
            derive_stream(42, "noise", 4, 17),
            derive_stream(42, "noise", 3, 18),
        ):
            assert not np.array_equal(base, other.standard_normal(8))

    def test_purpose_hash_disambiguates_from_coordinates(self):
        # same numeric coordinates, different purpose strings
        a = derive_stream(0, "channel", 1, 1).standard_normal(4)
        b = derive_stream(0, "channel_obs", 1, 1).standard_normal(4)
        assert not np.array_equal(a, b)


def test_hyperparams_is_frozen():
    hp, _ = validate_config(base_config())
    with pytest.raises(AttributeError):
        hp.T = 99
