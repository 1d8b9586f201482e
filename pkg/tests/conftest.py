import os

import numpy as np
import pytest

from fsnet.data import _write_netpbm

FIXTURE_DS = os.path.join(os.path.dirname(__file__), "fixtures", "fixture_ds")


@pytest.fixture
def fixture_ds():
    """Path of the committed 4-sample PGM dataset."""
    return FIXTURE_DS


@pytest.fixture
def fake_drive(tmp_path):
    """A DRIVE-layout directory with 40 tiny samples and fov masks."""
    root = tmp_path / "drive"
    rng = np.random.default_rng(11)
    for sub in ("images", "masks", "fov"):
        (root / sub).mkdir(parents=True)
    for i in range(40):
        stem = f"{i:02d}"
        image = rng.random((16, 16))
        mask = (rng.random((16, 16)) < 0.2).astype(float)
        mask[4, 4] = 1.0  # guarantee at least one vessel pixel
        fov = np.ones((16, 16))
        _write_netpbm(root / "images" / f"{stem}.pgm", image)
        _write_netpbm(root / "masks" / f"{stem}.pgm", mask)
        _write_netpbm(root / "fov" / f"{stem}.pgm", fov)
    return str(root)
