import numpy as np
import pytest

from echoatt.model import ModelConfig, TransformerModel
from echoatt.plan import SharingPlan


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=3, d_model=8, n_heads=2, n_kv_heads=1, d_ff=12, vocab_size=11, max_seq_len=16)
    base.update(kw)
    return ModelConfig(**base)


def random_plan(n_layers: int, rng: np.random.Generator) -> SharingPlan:
    src = []
    for j in range(n_layers):
        roots = [i for i in range(j) if src[i] == i]
        if roots and rng.random() < 0.5:
            src.append(int(rng.choice(roots)))
        else:
            src.append(j)
    return SharingPlan(tuple(src))


def jitter_norms(model: TransformerModel, rng: np.random.Generator) -> TransformerModel:
    """Give norm weights non-unit values so their gradients are exercised."""
    for name, p in model.params.items():
        if name.endswith("norm"):
            p.data[...] = rng.uniform(0.5, 1.5, size=p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA = {
    1: "parameter arithmetic",
    2: "sharing invariant",
    3: "gradient correctness",
    4: "similarity oracle",
    5: "max-gap selection",
    6: "loss identities",
    7: "training recovery",
    8: "throughput ordering",
    9: "determinism",
}
DETAILS: dict[int, list[str]] = {}
OUTCOMES: dict[int, str] = {}


@pytest.fixture
def acceptance(request):
    """Record measured values for the criterion named by the test (``test_criterion_<n>_...``)."""
    n = int(request.node.name.split("_")[2])

    def record(text: str):
        DETAILS.setdefault(n, []).append(text)
        print(f"[criterion {n}] {text}")
    return record


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    if report.when == "call" or report.failed:
        prev = OUTCOMES.get(n, "PASS")
        OUTCOMES[n] = "FAIL" if report.failed or prev == "FAIL" else ("SKIP" if report.skipped else prev)


def pytest_terminal_summary(terminalreporter):
    if not OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(OUTCOMES):
        detail = "; ".join(DETAILS.get(n, []))
        terminalreporter.write_line(f"{OUTCOMES[n]}  criterion {n} ({CRITERIA[n]})  {detail}")
