import numpy as np
import pytest

from ampl.fixtures import tiered_fixture, toy
from ampl.space import write_embeddings, write_tab_pairs


@pytest.fixture
def toy_fx():
    return toy()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def write_space_files(tmp_path, space, joint=None, counts=None):
    """Dump a SecretSpace (and optional joint model) in the ingestion file formats."""
    emb = tmp_path / "emb.txt"
    tiers = tmp_path / "tiers.tsv"
    write_embeddings(emb, space.candidates, space.embeddings)
    write_tab_pairs(tiers, {l: int(t) for l, t in zip(space.candidates, space.tier_of)})
    paths = {"embeddings": emb, "tiers": tiers}
    if counts is not None:
        paths["counts"] = tmp_path / "counts.tsv"
        write_tab_pairs(paths["counts"], counts)
    if joint is not None:
        paths["joint"] = tmp_path / "joint.tsv"
        with open(paths["joint"], "w", encoding="utf-8") as fh:
            for t, p in zip(joint.support, joint.probs):
                fh.write("\t".join(space.candidates[k] for k in t) + f"\t{float(p)!r}\n")
    return paths


@pytest.fixture(scope="session")
def tiered():
    return tiered_fixture(0)


ACCEPTANCE: dict[int, tuple[bool, str, float]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, elapsed = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{n:>2}] {title} ({elapsed:.2f}s)")
