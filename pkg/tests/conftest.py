import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """Small rendered toy dataset shared by the data/CLI tests."""
    from guidedgan.data_pipeline import make_toy_domains
    root = tmp_path_factory.mktemp("toy")
    make_toy_domains(root, n_per_domain=48, resolution=64, seed=0, frames_per_identity=4, n_paired=24)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_model_kwargs(**over):
    """Smallest GuidedCycleGAN configuration that still exercises every path."""
    from guidedgan.losses import PatchSampleSpec
    from guidedgan.networks import DiscriminatorConfig, GeneratorConfig
    kw = dict(gen_cfg=GeneratorConfig(base_channels=8, n_res_blocks=2, n_adain_blocks=1, style_dim=8),
              disc_cfg=DiscriminatorConfig(base_channels=8),
              patch_spec=PatchSampleSpec(n_patches=16, projection_dim=16))
    kw.update(over)
    return kw


ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
