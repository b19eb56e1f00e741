import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def tiny_problems():
    from esib.corpus import generate_synthetic

    return generate_synthetic(24, 3)


@pytest.fixture
def tiny_net(tiny_problems):
    from esib.corpus import Vocabulary
    from esib.network import ESIBNet, ModelConfig

    net = ESIBNet(Vocabulary.build(tiny_problems), ModelConfig(hidden_dim=8, embedding_dim=8, latent_dim=4, dropout=0.0))
    net.reset_parameters(0)
    return net


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
