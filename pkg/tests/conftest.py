import numpy as np
import pytest

from thinsurf.normals import augment_offsets
from thinsurf.synthetic import gen_sphere


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sphere_augmented():
    """Noise-free unit sphere with exact outward normals, offset by L = 0.1."""
    cloud = gen_sphere(1500, 1.0, 0.0, seed=7, with_normals=True)
    return augment_offsets(cloud, 0.1)


def brute_knn(points, q, k):
    diff = points - q
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((np.arange(len(points)), d))[:k]
    return order, d[order]


# criterion number -> (passed, one-line detail); filled by test_acceptance
ACCEPTANCE: dict = {}
ACCEPTANCE_NAMES = {
    1: "exactness at the sites",
    2: "GCV score against brute force",
    3: "quadratic reproduction",
    4: "analytic gradient against finite differences",
    5: "noisy sphere reconstruction",
    6: "curled sheet gap preservation",
    7: "normal orientation consensus",
    8: "partition invariants",
    9: "linear scaling",
    10: "C0 against C2 curvature spread",
}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    broken = [r.nodeid for key in ("failed", "error") for r in terminalreporter.stats.get(key, [])]
    terminalreporter.section("acceptance criteria")
    for num, name in ACCEPTANCE_NAMES.items():
        if num in ACCEPTANCE:
            ok, detail = ACCEPTANCE[num]
            tag = "PASS" if ok else "FAIL"
        elif any(f"test_criterion_{num}_" in nodeid for nodeid in broken):
            tag, detail = "FAIL", "raised before its check completed"
        else:
            tag, detail = "----", "not run"
        terminalreporter.write_line(f"[{tag}] {num:2d}. {name}: {detail}")
