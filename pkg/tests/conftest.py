import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from promptseg.autodiff import Tensor
from promptseg.model import MemoryEntry, ModelConfig, PromptableNet

# acceptance-criterion results collected by tests/test_acceptance.py
CRITERIA: list = []


def record_criterion(name, passed, detail=""):
    CRITERIA.append((name, bool(passed), detail))
    assert passed, f"{name} failed: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(CRITERIA):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{name} {status}: {detail}")


TINY_CONFIG = ModelConfig(
    input_size=32,
    stage_dims=(8, 12, 16, 16),
    neck_dim=16,
    memory_dim=8,
    memory_layers=1,
    decoder_layers=1,
)


@pytest.fixture(scope="session")
def tiny_model():
    return PromptableNet(TINY_CONFIG, seed=0)


class FakeModel:
    """Deterministic drop-in for PromptableNet in pipeline-level tests.

    ``logits_fn(frame, prompt, n_memories, frame_index)`` decides the
    output; memory entries carry the frame mean so bank contents are
    observable.  ``delay`` makes in-flight-lock tests possible.
    """

    def __init__(self, logits_fn, input_size=16, memory_capacity=8, delay=0.0):
        self.config = SimpleNamespace(
            input_size=input_size, memory_capacity=memory_capacity, trunk_grid=(2, 2)
        )
        self.logits_fn = logits_fn
        self.delay = delay
        self.checkpoint_id = "fake-model"
        self.calls = []

    def encode_image(self, frame):
        frame = np.asarray(frame, dtype=np.float32)
        trunk = Tensor(np.full((4, 2), float(frame.mean()), dtype=np.float32))
        return SimpleNamespace(trunk=trunk, fpn={}, stage_tokens=[])

    def encode_memory(self, trunk, mask_logits, frame_index=0, is_prompted=False):
        return MemoryEntry(
            frame_index=int(frame_index),
            spatial_features=Tensor(trunk.data.copy()),
            is_prompted=bool(is_prompted),
        )

    def forward_frame(self, frame, bank, prompt=None, frame_index=0):
        if prompt is None and (bank is None or len(bank.entries) == 0):
            raise ValueError("unprompted frame with an empty memory bank")
        if self.delay:
            time.sleep(self.delay)
        frame = np.asarray(frame, dtype=np.float32)
        n_mem = 0 if bank is None else len(bank.entries)
        self.calls.append((int(frame_index), prompt is not None, n_mem))
        logits = np.asarray(
            self.logits_fn(frame, prompt, n_mem, frame_index), dtype=np.float32
        )
        assert logits.shape == frame.shape
        entry = self.encode_memory(
            self.encode_image(frame).trunk, logits, frame_index, prompt is not None
        )
        return Tensor(logits), Tensor(np.float32(0.5)), entry


def box_interior_logits(frame, prompt, n_mem, frame_index):
    """+1 inside the prompt box, -1 elsewhere; unprompted frames: copy of
    nothing (all background)."""
    out = np.full(frame.shape, -1.0, dtype=np.float32)
    if prompt is not None:
        out[prompt.y_min : prompt.y_max, prompt.x_min : prompt.x_max] = 1.0
    return out


def bright_threshold_logits(frame, prompt, n_mem, frame_index):
    """Segment bright pixels (> 127.5), regardless of prompting."""
    return (np.asarray(frame, dtype=np.float32) - 127.5) / 32.0


@pytest.fixture
def fake_box_model():
    return FakeModel(box_interior_logits)


@pytest.fixture
def fake_bright_model():
    return FakeModel(bright_threshold_logits)
