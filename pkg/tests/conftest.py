import numpy as np
import pytest

from dnsmos.nnet import Architecture

# every op of the full network (conv, pool with odd floor, dropout, global max
# pool, dense, linear head) at a size where finite differences are cheap
SURROGATE = Architecture(input_shape=(10, 7), conv_filters=(3, 4), conv_pooled=(True, False),
                         dense_units=(5,), dropout=0.3, name="surrogate")

# input 8x8, one conv, one dense
TINY = Architecture(input_shape=(8, 8), conv_filters=(2,), conv_pooled=(False,), dense_units=(3,),
                    dropout=0.0, name="surrogate")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.RESULTS, key=lambda s: int(s.split("AC")[1].split(":")[0])):
            terminalreporter.write_line(line)
