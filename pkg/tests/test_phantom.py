import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwshortcut.acoustics import ImagingGrid, TransducerGeometry, adjoint, build_operator, envelope, forward, steering_angles
from pwshortcut.phantom import Cyst, PhantomSpec, PointTarget, default_cyst_phantom, render, roi_masks

GRID = ImagingGrid()


def test_zero_background_no_features_is_zero():
    assert not np.any(render(PhantomSpec(background_std=0.0), GRID))


def test_render_is_deterministic_in_seed():
    spec = default_cyst_phantom(GRID, seed=7)
    assert np.array_equal(render(spec, GRID), render(spec, GRID))
    assert not np.array_equal(render(spec, GRID), render(spec.with_seed(8), GRID))


def test_anechoic_cyst_masks_only_its_disk():
    spec = default_cyst_phantom(GRID, seed=3)
    plain = render(PhantomSpec(1.0, seed=3), GRID)
    img = render(spec, GRID)
    cyst = spec.cysts[0]
    zz, xx = GRID.mesh()
    disk = np.hypot(zz - cyst.center[0], xx - cyst.center[1]) < cyst.radius
    assert np.all(img[disk] == 0.0)
    assert np.array_equal(img[~disk], plain[~disk])


def test_background_statistics():
    spec = default_cyst_phantom(GRID, seed=11)
    img = render(spec, GRID)
    zz, xx = GRID.mesh()
    c = spec.cysts[0]
    bg = np.hypot(zz - c.center[0], xx - c.center[1]) >= c.radius
    assert 0.97 <= img[bg].std() <= 1.03


def test_partial_cyst_scales_amplitude():
    spec = PhantomSpec(1.0, (Cyst((12e-3, 0.0), 2e-3, 0.25),), seed=1)
    plain = render(PhantomSpec(1.0, seed=1), GRID)
    img = render(spec, GRID)
    zz, xx = GRID.mesh()
    disk = np.hypot(zz - 12e-3, xx) < 2e-3
    assert np.allclose(img[disk], 0.25 * plain[disk])


def test_point_target_added_at_nearest_pixel():
    pos = (10.03e-3, 1.01e-3)
    img = render(PhantomSpec(0.0, points=(PointTarget(pos, 2.5),)), GRID)
    iz = np.argmin(np.abs(GRID.z - pos[0]))
    ix = np.argmin(np.abs(GRID.x - pos[1]))
    assert img[iz, ix] == 2.5
    assert np.count_nonzero(img) == 1


@pytest.mark.parametrize(
    "spec",
    [
        PhantomSpec(1.0, (Cyst((30e-3, 0.0), 1e-3),)),
        PhantomSpec(1.0, points=(PointTarget((10e-3, 9e-3)),)),
    ],
)
def test_features_outside_grid_rejected(spec):
    with pytest.raises(ValueError, match="outside the grid"):
        render(spec, GRID)


@pytest.mark.parametrize("kwargs", [{"radius": 0.0}, {"radius": 1e-3, "amplitude_scale": 1.5}])
def test_cyst_validation(kwargs):
    with pytest.raises(ValueError):
        Cyst((10e-3, 0.0), **kwargs)


def test_negative_background_rejected():
    with pytest.raises(ValueError):
        PhantomSpec(-1.0)


def test_inside_mask_counts_disk_pixels():
    spec = default_cyst_phantom(GRID)
    inside, _ = roi_masks(spec, GRID, 0.0)
    c = spec.cysts[0]
    count = 0
    for z in GRID.z:
        for x in GRID.x:
            if (z - c.center[0]) ** 2 + (x - c.center[1]) ** 2 < c.radius**2:
                count += 1
    assert inside.sum() == count


@settings(max_examples=20, deadline=None)
@given(margin_px=st.floats(0.0, 8.0))
def test_masks_disjoint_and_areas_close(margin_px):
    spec = default_cyst_phantom(GRID)
    inside, outside = roi_masks(spec, GRID, margin_px * GRID.dz)
    assert not np.any(inside & outside)
    assert abs(int(inside.sum()) - int(outside.sum())) <= GRID.lateral_count


def test_default_masks_known_sizes():
    inside, outside = roi_masks(default_cyst_phantom(GRID), GRID)
    assert (inside.sum(), outside.sum()) == (448, 456)


def test_roi_errors():
    with pytest.raises(ValueError):
        roi_masks(PhantomSpec(1.0), GRID)
    with pytest.raises(ValueError, match="empty"):
        roi_masks(default_cyst_phantom(GRID), GRID, margin=1.0)


def test_compounded_cyst_darker_than_background():
    geom = TransducerGeometry(element_count=32, sample_count=768)
    grid = ImagingGrid(48, 48, z_min=6e-3, z_max=14e-3, x_min=-4e-3, x_max=4e-3)
    spec = default_cyst_phantom(grid, radius_pixels=8)
    inside, outside = roi_masks(spec, grid)
    ops = [build_operator(geom, grid, t) for t in steering_angles(7, 16.0)]
    e_in, e_out = [], []
    for seed in range(4):
        x = render(spec.with_seed(seed), grid)
        env = envelope(np.mean([adjoint(op, forward(op, x)) for op in ops], axis=0))
        e_in.append(np.mean(env[inside] ** 2))
        e_out.append(np.mean(env[outside] ** 2))
    assert np.mean(e_in) < np.mean(e_out)
