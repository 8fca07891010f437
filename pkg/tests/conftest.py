import pytest
import torch

from mdtrans.data import SynthSpec, synth_generate
from mdtrans.metrics import train_domain_classifier

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth():
    return synth_generate(SynthSpec())


@pytest.fixture(scope="session")
def classifier(synth):
    return train_domain_classifier(synth.train, embed_dim=64, epochs=8, seed=0)


@pytest.fixture(scope="session")
def tiny_synth():
    return synth_generate(SynthSpec(num_domains=3, image_size=16, train_per_domain=6,
                                    test_per_domain=4, seed=5))


def pytest_configure(config):
    config._criteria_lines = []


@pytest.fixture
def verdict(request):
    """Record (and print) one pass/fail line per acceptance criterion."""
    def record(number, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        request.config._criteria_lines.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
