import numpy as np
import pytest

from alquery.records import make_object, make_record


def random_object(rng, dim=8, num_classes=4, ways=5, class_id=None, score=None):
    feature = rng.normal(size=dim)
    probs = rng.dirichlet(np.ones(ways))
    return make_object(
        feature,
        int(rng.integers(0, num_classes)) if class_id is None else class_id,
        float(rng.uniform()) if score is None else score,
        probs,
    )


def random_record(rng, image_id, max_objects=6, dim=8, num_classes=4, ways=5, min_objects=0):
    count = int(rng.integers(min_objects, max_objects + 1))
    return make_record(image_id, [random_object(rng, dim, num_classes, ways) for _ in range(count)])


def random_pool(rng, n, **kwargs):
    return [random_record(rng, f"img_{i:04d}", **kwargs) for i in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
