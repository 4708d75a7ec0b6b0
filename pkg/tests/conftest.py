import sys

import pytest
import torch

from grqodet.synthdata import DatasetSpec, make_dataset

torch.set_num_threads(1)

TINY_SPEC = DatasetSpec(n_train=48, n_val_id=24, n_val_ood=24, pool_min_per_class=4,
                        train_pool_min_per_class=4)


@pytest.fixture(scope="session")
def tiny_data():
    return make_dataset(TINY_SPEC, master_seed=5)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
