import gin
import numpy as np
import pytest

from artigauss.fusion import fuse_states
from artigauss.part_field import AssignmentField, PartProjection
from artigauss.repel_field import RepelField
from artigauss.synthetic_objects import load_object_spec, make_object
from artigauss.training import TrainConfig, TrainedModel


@pytest.fixture(autouse=True)
def clear_gin():
    yield
    gin.clear_config()


def build_oracle_model(obj, embedding_dim=8):
    """TrainedModel carrying the ground-truth parts and transforms of a synthetic object."""
    report = fuse_states(obj.state0, obj.state1)
    pairs = report.match.pairs
    labels = obj.state0.gt_labels[pairs[:, 0]]
    k = len(obj.gt_transforms)
    return TrainedModel(
        canonical=report.canonical,
        assignment=AssignmentField(np.eye(k)[labels]),
        transforms=list(obj.gt_transforms),
        projection=PartProjection(np.zeros([k, embedding_dim]), np.zeros(k)),
        labels=labels,
        source_centers=obj.state0.centers[pairs[:, 0]],
        target_centers=obj.state1.centers[pairs[:, 1]],
        static_part=obj.static_part,
        repel_field=RepelField.empty(),
        fusion=report.to_json(),
        pairs=pairs,
        loss_history={"loss/total": np.array([1., 0.5])},
        config=TrainConfig().to_dict())


@pytest.fixture
def oracle_model():
    return build_oracle_model


@pytest.fixture
def drawer():
    return make_object(load_object_spec("drawer").with_samples(120))


@pytest.fixture
def door():
    return make_object(load_object_spec("door").with_samples(120))
