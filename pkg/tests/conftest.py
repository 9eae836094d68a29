import pytest

from pwshortcut.harness.config import from_ini

SMALL_INI = """
[geometry]
element_count = 32
sample_count = 768

[grid]
axial_count = 48
lateral_count = 48
z_min = 0.006
z_max = 0.014
x_min = -0.004
x_max = 0.004

[acquisition]
angle_count = 7

[denoiser]
patch_size = 5
train_phantoms = 3
patches_per_sigma = 5000

[sweep]
steps_list = 2, 4
sigma_max_list = 40, 80
"""


@pytest.fixture
def small_ini():
    return SMALL_INI


@pytest.fixture
def small_cfg(tmp_path):
    return from_ini(SMALL_INI, {"out": str(tmp_path / "run")})


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
