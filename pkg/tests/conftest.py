import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sist.datasets import ImageDataset, ShapeDataset  # noqa: E402
from sist.geom3d import VoxelGrid  # noqa: E402
from sist.nets import NetConfig  # noqa: E402

TINY_NET = dict(
    image_size=16, voxel_res=16, za_dim=4, zs_dim=8, gen_width=4, disc_width=4, enc_width=4, dec_width=8,
    implicit_hidden=(16, 8),
)


@pytest.fixture
def tiny_data():
    rng = np.random.default_rng(0)
    grids = []
    for i in range(4):
        occ = np.zeros((16, 16, 16), bool)
        lo = rng.integers(2, 6, 3)
        hi = lo + rng.integers(4, 9, 3)
        occ[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
        grids.append(VoxelGrid(occ))
    shapes = ShapeDataset(grids, [f"s{i}" for i in range(4)])
    images = ImageDataset(rng.uniform(-1, 1, (8, 16, 16, 3)), [f"i{i}" for i in range(8)])
    gt = {f"i{i}": f"s{i % 4}" for i in range(8)}
    return shapes, images, gt


@pytest.fixture
def tiny_net():
    return NetConfig(**TINY_NET)


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.passed else "FAIL"
        detail = getattr(item, "acceptance_detail", "")
        if rep.failed and not detail:
            detail = str(rep.longrepr.reprcrash.message).splitlines()[0] if hasattr(rep.longrepr, "reprcrash") else ""
        _ACCEPTANCE[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[n]
        line = f"criterion {n:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
