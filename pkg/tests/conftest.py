import re

import pytest

from helpers import smooth_image, stripe_image, tiny_config
from mtransfer.tensor import Tensor
from mtransfer.train import FixedImages, Trainer

_CRITERION = re.compile(r"test_criterion_(\d+)")
_results: dict[int, str] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed or report.skipped:
        if report.failed:
            _results[n] = "FAIL"
        elif report.skipped:
            _results.setdefault(n, "SKIP")
        elif report.when == "call":
            _results.setdefault(n, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        terminalreporter.write_line(f"criterion {n:2d}: {_results[n]}")


OVERFIT_ITERS = 200


@pytest.fixture(scope="session")
def overfit_run():
    """Divisor-8 network, one content image, one style image, 200 steps."""
    cfg = tiny_config(iterations=OVERFIT_ITERS, lambdas="1,0.5,0.25")
    content = Tensor(smooth_image(cfg.train_scales[1]))
    style = Tensor(stripe_image(cfg.style_scales[1]))
    trainer = Trainer(cfg, FixedImages([content]), [style])
    return trainer.run()
