import numpy as np
import pytest

from decorrec.embedding import Item, ItemDatabase
from decorrec.synthdb import generate_database


@pytest.fixture(scope="session")
def tiny_db():
    """24 items over 8 attributes in 16 dimensions; fast enough for everything."""
    return generate_database(num_items=24, num_attributes=8, dim=16,
                             seed=7, noise_scale=0.05, min_tags=2, max_tags=4)


@pytest.fixture(scope="session")
def clean_db():
    """Noise-free variant for exact detection and contrast checks."""
    return generate_database(num_items=24, num_attributes=8, dim=16,
                             seed=7, noise_scale=0.0, min_tags=2, max_tags=4)


@pytest.fixture
def ortho_db():
    """Two orthogonal unit items plus an empty object dictionary."""
    items = [
        Item(id="a", embedding=np.array([1.0, 0.0, 0.0, 0.0])),
        Item(id="b", embedding=np.array([0.0, 1.0, 0.0, 0.0])),
        Item(id="c", embedding=np.array([0.0, 0.0, 1.0, 0.0])),
    ]
    return ItemDatabase(items, object_names=[], object_vectors=np.zeros((0, 4)))
