import numpy as np
import pytest
import torch
import torch.nn as nn
from PIL import Image

from crossseg.data import LabeledSample, SyntheticConfig, generate_synthetic_dataset
from crossseg.models import register_network

torch.set_num_threads(1)


@register_network("mask_oracle")
class MaskOracle(nn.Module):
    """Reads the label back out of channel 0 (encoded as label / 2)."""

    def __init__(self, cfg):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(50.0))

    def forward(self, x, with_representation=False):
        labels = torch.round(x[:, 0] * 2).long().clamp(0, 2)
        logits = nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).to(x.dtype) * self.scale
        z = nn.functional.normalize(x.mean(dim=(2, 3)), dim=1) if with_representation else None
        return logits, z


def encode_mask(mask, rng):
    image = rng.random((3,) + mask.shape).astype(np.float32)
    image[0] = mask / 2.0
    return image


@pytest.fixture
def oracle_model():
    from crossseg.models import NetworkConfig, build_network
    return build_network(NetworkConfig(kind="mask_oracle"))


@pytest.fixture
def oracle_samples():
    rng = np.random.default_rng(0)
    out = []
    for i in range(3):
        mask = np.zeros((32, 32), np.uint8)
        mask[2:10, 3:20] = 1
        mask[18 + i:28, 5:25] = 2
        out.append(LabeledSample(encode_mask(mask, rng), mask, f"o{i}"))
    return out


@pytest.fixture
def oracle_dataset(tmp_path, oracle_samples):
    """Dataset directory whose images encode their own masks."""
    root = tmp_path / "oracle_ds"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    for s in oracle_samples:
        rgb = np.round(np.transpose(s.image, (1, 2, 0)) * 255).astype(np.uint8)
        Image.fromarray(rgb).save(root / "images" / f"{s.id}.png")
        Image.fromarray(s.mask).save(root / "masks" / f"{s.id}.png")
    ids = [s.id for s in oracle_samples]
    (root / "manifest.json").write_text(
        '{"labeled": [], "unlabeled": [], "val": %s, "height": 32, "width": 32, "seed": 0}'
        % str(ids).replace("'", '"'))
    return root


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    cfg = SyntheticConfig(num_labeled=4, num_unlabeled=6, num_val=2, height=64, width=64, seed=3)
    generate_synthetic_dataset(cfg, root)
    return root


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config._criteria = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker
    detail = dict(report.user_properties).get("detail", "")
    # keep the first failure if a test has several phases
    results = _config._criteria
    if number not in results or results[number][0] == "PASS":
        results[number] = ("PASS" if report.passed else "FAIL", title, detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_sessionstart(session):
    global _config
    _config = session.config


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, detail = results[number]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
