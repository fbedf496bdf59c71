import time
from dataclasses import dataclass

import numpy as np
import pytest

from npprov.ongrid import OnGridModel, load_idx_images, sample_mask, write_idx_images
from npprov.train import TrainConfig, build_model, train


def digit_images(count: int = 512) -> np.ndarray:
    """Grayscale 28x28 handwritten digits in [0, 1], shape ``[count, 28, 28]``.

    The scikit-learn 8x8 digits are upsampled with cubic splines; they ship
    with the library, so no download is needed.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    small = load_digits().images[:count] / 16.0
    big = np.stack([zoom(im, 3.5, order=3) for im in small])
    return np.clip(big, 0.0, 1.0)


@pytest.fixture(scope="session")
def digits_idx(tmp_path_factory):
    path = tmp_path_factory.mktemp("digits") / "digits-idx3-ubyte"
    write_idx_images(digit_images(), path)
    return path


@dataclass
class Trained:
    model: object
    result: object
    cfg: TrainConfig
    seconds: float
    initial_image_loss: float | None = None
    images: np.ndarray | None = None


def _train(cfg: TrainConfig, **kw) -> Trained:
    return _train_model(build_model(cfg), cfg, **kw)


def _train_model(model, cfg: TrainConfig, **kw) -> Trained:
    images = kw.get("images")
    initial = image_loss(model, images) if images is not None else None
    start = time.process_time()
    result = train(model, cfg, **kw)
    return Trained(model, result, cfg, time.process_time() - start, initial, images)


@pytest.fixture(scope="session")
def desk_np_prov():
    return _train(TrainConfig(dataset="eq", model="np-prov"))


@pytest.fixture(scope="session")
def desk_convcnp():
    return _train(TrainConfig(dataset="eq", model="convcnp"))


def image_loss(model, images, n: int = 64, seed: int = 12345) -> float:
    """Mean ongrid_loss over the first ``n`` images with fixed held-out masks."""
    h, w = images.shape[-2:]
    masks = np.stack([sample_mask(h, w, i, seed) for i in range(n)])
    return float(model.loss(images[:n], masks).data)


@pytest.fixture(scope="session")
def desk_ongrid(digits_idx):
    images = load_idx_images(digits_idx)
    cfg = TrainConfig(dataset="mnist", data_path=str(digits_idx), epochs=5, tasks_per_epoch=len(images))
    model = OnGridModel.create(seed=cfg.seed)
    return _train_model(model, cfg, images=images)


# --- acceptance reporting -----------------------------------------------------

CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def criterion(request):
    """``report(ok, detail)`` records one pass/fail line for the test's criterion."""
    number = request.node.get_closest_marker("criterion").args[0]

    def report(ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        request.config.stash[CRITERIA][number] = line
        print(line)
        return ok

    return report


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and rep.failed and marker.args[0] not in item.config.stash[CRITERIA]:
        reason = str(call.excinfo.value).splitlines()[0] if call.excinfo else "failed"
        item.config.stash[CRITERIA][marker.args[0]] = f"criterion {marker.args[0]:>2} FAIL: {reason}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash[CRITERIA]
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
