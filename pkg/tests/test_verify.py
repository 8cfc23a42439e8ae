import pytest

from hardneg.errors import UsageError
from hardneg.verify import SUITES, gaps_decrease, gradcheck_cases, run_suite


def test_gaps_decrease():
    assert gaps_decrease([3, 2, 1, 0, 0])
    assert not gaps_decrease([3, 3, 1])
    assert not gaps_decrease([1, 2])


def test_every_suite_passes_at_default_seed():
    for name in SUITES:
        res = run_suite(name, seed=0)
        assert res.passed, name
        assert all(len(row) == len(res.header) for row in res.rows)


def test_gradcheck_cases_cover_branches():
    kinds = [c[0] for c in gradcheck_cases(0, 20)]
    assert {"clip", "floor", "linear", "nce", "hard"} <= set(kinds)


def test_unknown_suite():
    with pytest.raises(UsageError):
        run_suite("nosuch")
