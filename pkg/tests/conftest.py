import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from edgesplit.dse import random_mapping  # noqa: E402
from edgesplit.model import load_model  # noqa: E402
from edgesplit.specio import parse_mapping, parse_platform, parse_platform_text, resource_options  # noqa: E402
from edgesplit.zoo import DIAMOND_PLATFORM, toy_cnn  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
DIAMOND = FIXTURES / "diamond"


@pytest.fixture(scope="session")
def diamond():
    m = load_model(DIAMOND / "model.json", DIAMOND / "weights.bin")
    p = parse_platform(DIAMOND / "platform.txt")
    ms = parse_mapping(DIAMOND / "mapping.json", m, p)
    return m, p, ms


@pytest.fixture(scope="session")
def toy():
    return toy_cnn()


def random_mappings(m, count, seed, ranks=(2, 4)):
    """``count`` seeded consistent mappings over the diamond platform."""
    rng = np.random.default_rng(seed)
    options = resource_options(parse_platform_text(DIAMOND_PLATFORM))
    return [random_mapping(m, options, int(rng.integers(ranks[0], ranks[1] + 1)), rng) for _ in range(count)]


def load_json(path):
    return json.loads(Path(path).read_text())
