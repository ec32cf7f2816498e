import numpy as np
import pytest

from snowattack import geometry, snowsim
from snowattack.fixtures import translating_texture


def manual_field(scene, X, motion, w=3.0, world_size=None, template_id=0, templates=None, rotation=0.0):
    """SnowField from explicit positions, for hand-checked scenarios."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = len(X)
    motion = np.broadcast_to(np.asarray(motion, dtype=np.float64), (n, 3)).copy()
    if world_size is None:
        world_size = snowsim.default_flake_size(scene, 4.0)
    templates = templates or snowsim.make_templates(0)
    return snowsim.SnowField(
        X=X, motion=motion, delta_t=np.zeros((n, 3)), delta_t1=np.zeros((n, 3)),
        template_id=np.full(n, template_id, dtype=np.int64), rotation=np.full(n, float(rotation)),
        world_size=np.full(n, float(world_size)), w=np.full(n, float(w)),
        d_t=geometry.to_camera(scene.pose_t, X)[:, 2],
        d_t1=geometry.to_camera(scene.pose_t1, X + motion)[:, 2],
        templates=templates)


@pytest.fixture
def static_scene():
    """32x32 textured scene, static camera, zero background flow, depth 2."""
    return translating_texture(size=32, shift=(0, 0))
