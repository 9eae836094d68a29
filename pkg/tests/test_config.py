import numpy as np
import pytest

from pwshortcut.harness.config import ConfigError, ExperimentConfig, from_ini, load_config, stream, to_ini
from pwshortcut.phantom import Cyst, PhantomSpec, PointTarget


def test_defaults_house_experiment_constants():
    cfg = ExperimentConfig()
    assert cfg.acquisition.angle_count == 75
    assert np.rad2deg(cfg.angles[[0, -1]]).tolist() == pytest.approx([-16.0, 16.0])
    s = cfg.sampler
    assert (s.n_full, s.steps, s.sigma_k, s.sigma_max, s.sigma_min, s.rho, s.lam) == (50, 20, 5.0, 80.0, 0.002, 7.0, 0.1)
    assert s.schedule_mode == "rebuild" and s.dc_angles == "single"
    d = cfg.denoiser
    assert (d.patch_size, d.sigma_count, d.sigma_lo, d.sigma_hi, d.alpha, d.patches_per_sigma) == (9, 12, 0.01, 80.0, 1e-3, 200_000)
    assert cfg.sweep.sigma_max_list == (40.0, 60.0, 80.0)
    assert cfg.sweep.steps_list == (5, 10, 15, 20, 30, 40, 50)
    assert cfg.sweep.modes == ("rebuild", "truncate")


def test_ini_round_trip(small_ini):
    cfg = from_ini(small_ini, {"seed": "17"})
    again = from_ini(to_ini(cfg))
    assert again == cfg
    assert again.seed == 17


def test_phantom_round_trip():
    spec = PhantomSpec(0.5, (Cyst((0.01, 0.001), 0.002, 0.25),), (PointTarget((0.012, -0.001), 3.0),))
    cfg = ExperimentConfig(phantom=spec)
    assert from_ini(to_ini(cfg)).phantom == spec


def test_overrides_take_precedence(small_ini):
    cfg = from_ini(small_ini, {"grid.axial_count": "40", "sampler.lam": "0.3", "sweep.steps_list": "3,6,9"})
    assert cfg.grid.axial_count == 40
    assert cfg.sampler.lam == 0.3
    assert cfg.sweep.steps_list == (3, 6, 9)


def test_load_from_file(tmp_path, small_ini):
    path = tmp_path / "exp.ini"
    path.write_text(small_ini)
    assert load_config(path).grid.axial_count == 48


@pytest.mark.parametrize(
    "text, field",
    [
        ("[sampler]\nschedule_mode = sideways\n", "sampler.schedule_mode"),
        ("[sampler]\nlam = -1\n", "sampler.lam"),
        ("[sampler]\nsteps = many\n", "sampler.steps"),
        ("[grid]\nbogus = 1\n", "grid.bogus"),
        ("[nonsense]\na = 1\n", "nonsense"),
        ("[grid]\nz_min = 0\n", "grid"),
        ("[metrics]\ngcnr_bins = 1\n", "metrics.gcnr_bins"),
    ],
)
def test_invalid_config_names_the_field(text, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        from_ini(text)


def test_streams_are_labeled_and_reproducible():
    a = stream(3, 1, 0).standard_normal(4)
    assert np.array_equal(a, stream(3, 1, 0).standard_normal(4))
    assert not np.array_equal(a, stream(3, 2, 0).standard_normal(4))
    assert not np.array_equal(a, stream(4, 1, 0).standard_normal(4))
