"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""
import os

import pytest

from phds import acceptance

RESULTS: list = []


@pytest.fixture(scope="module")
def ctx():
    return acceptance.Context(seed=0, threads=int(os.environ.get("PHDS_THREADS", "4")))


@pytest.mark.parametrize("number", range(1, len(acceptance.CRITERIA) + 1))
def test_criterion(ctx, number):
    res = acceptance.run_all(ctx, only=[number], log=lambda line: None)[0]
    RESULTS.append(res)
    print(res.line())
    assert res.passed, res.line()
