import numpy as np
import pytest

from copydet.model import CandidateList, GroundTruth


def random_instance(rng, n_queries=None, max_pairs=3000, n_refs=None, score_levels=None):
    """Random candidate list + single-positive ground truth.

    ``score_levels`` quantizes scores so that ties show up often.
    """
    nq = n_queries or int(rng.integers(1, 40))
    nr = n_refs or int(rng.integers(2, 200))
    qids = [f"q{i:03d}" for i in range(nq)]
    rids = [f"r{i:03d}" for i in range(nr)]
    trip = []
    per_q = max(1, min(nr, max_pairs // nq))
    for q in qids:
        m = int(rng.integers(0, per_q + 1))
        for j in rng.choice(nr, m, replace=False):
            s = float(rng.standard_normal())
            if score_levels:
                s = float(np.round(s * score_levels) / score_levels)
            trip.append((q, rids[j], s))
    gt = {}
    for q in qids:
        if rng.random() < 0.7:
            gt[q] = rids[int(rng.integers(nr))]
    return trip, GroundTruth(gt)


def as_candidates(trip):
    if not trip:
        return CandidateList.empty()
    return CandidateList.from_triples(trip)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
