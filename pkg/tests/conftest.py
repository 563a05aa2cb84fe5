import json
import time

import numpy as np
import pytest

from tnt.model import build, preset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro():
    return build(preset("tnt-micro"), seed=0)


@pytest.fixture
def micro_image():
    return np.random.default_rng(7).uniform(0, 255, size=(32, 32, 3))


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    """The desk training run through the CLI, shared by the acceptance and CLI tests."""
    from tnt.cli import main

    out = tmp_path_factory.mktemp("micro_run")
    t0 = time.perf_counter()
    code = main([
        "train", "--preset", "tnt-micro", "--task", "subpatch", "--steps", "2000",
        "--seed", "0", "--out", str(out), "--log-every", "0",
    ])
    seconds = time.perf_counter() - t0
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    return {"dir": out, "summary": summary, "seconds": seconds}
