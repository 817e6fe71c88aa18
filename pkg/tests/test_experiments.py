import pytest

from collabmi.experiments import MODEL_KEYS, SuiteConfig, mean_ap, run_suite, seed_ap

TINY = SuiteConfig(n_train=8, n_test=4, epochs=1, batch_size=2, seeds=(0, 1))


def test_suite_modes_cover_the_comparison():
    labels = [(m.label, m.noise_std) for m in SuiteConfig().modes()]
    assert ("none", 0.0) in labels and ("early", 0.0) in labels and ("intermediate-alpha0", 0.0) in labels
    assert [s for label, s in labels if label == "intermediate"] == [0.0, 0.2, 0.4]
    assert {m.checkpoint_key for m in SuiteConfig().modes()} == set(MODEL_KEYS)


@pytest.mark.slow
def test_results_do_not_depend_on_worker_count():
    one = run_suite(TINY, workers=1)
    two = run_suite(TINY, workers=2)
    assert one["rows"] == two["rows"]
    assert len(one["rows"]) == 2 * len(TINY.modes())


def test_row_helpers():
    rows = [
        {"mode": "none", "seed": 0, "noise_std": 0.0, "ap50": 0.2, "ap70": 0.1},
        {"mode": "none", "seed": 1, "noise_std": 0.0, "ap50": 0.4, "ap70": 0.1},
        {"mode": "intermediate", "seed": 0, "noise_std": 0.2, "ap50": 0.5, "ap70": 0.3},
    ]
    assert mean_ap(rows, "none") == pytest.approx(0.3)
    assert mean_ap(rows, "intermediate", 0.2, "ap70") == 0.3
    assert seed_ap(rows, "none", 1) == 0.4
    with pytest.raises(ValueError):
        seed_ap(rows, "none", 5)
