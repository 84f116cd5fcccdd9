import sys

import pytest

from madgnet.config import parse_config
from madgnet.data import Manifest, load_manifest, manifest_path, synth_generate

TINY_CONFIG = """\
[network]
widths = 4,4,8,8,8
c_e = 8

[mfmsa]
K = 4
r = 2
C_min = 2
H_min = 2
W_min = 2

[train]
epochs = 2
batch_size = 2
lr_max = 1e-3
lr_min = 1e-5
seed = 3

[data]
size = 32
"""


@pytest.fixture
def tiny_config():
    return parse_config(TINY_CONFIG)


@pytest.fixture
def tiny_samples(tmp_path):
    synth_generate(tmp_path / "data", 4, 32, seed=11)
    return load_manifest(Manifest.read(manifest_path(tmp_path / "data")))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
