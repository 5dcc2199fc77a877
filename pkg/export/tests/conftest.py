import pytest
import torch
from torch import nn


class TinyDetector(nn.Module):
    """Stride-8 conv head emitting (1, anchors, 6) raw detection rows."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Conv2d(3, 8, 3, stride=8, padding=1)
        self.head = nn.Conv2d(8, 6, 1)

    def forward(self, x):
        y = self.head(torch.relu(self.stem(x)))
        return y.flatten(2).transpose(1, 2)


@pytest.fixture(scope="session")
def detector_cls():
    return TinyDetector


@pytest.fixture(scope="session")
def tiny_module():
    torch.manual_seed(7)
    return TinyDetector().eval()


@pytest.fixture
def ckpt_path(tmp_path, tiny_module):
    p = tmp_path / "best.pt"
    torch.save(tiny_module, p)
    return p


@pytest.fixture
def dict_ckpt_path(tmp_path, tiny_module):
    p = tmp_path / "last.pt"
    torch.save({"model": tiny_module, "epoch": 3, "optimizer": None}, p)
    return p
