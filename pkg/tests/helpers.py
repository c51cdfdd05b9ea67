import numpy as np
from scipy.spatial.transform import Rotation

from graspsort.geometry import PointCloud, RigidTransform


def random_rotation(rng):
    return Rotation.random(random_state=rng.integers(2**31)).as_matrix()


def random_transform(rng, from_frame="world", to_frame="world", scale=1.0):
    return RigidTransform(random_rotation(rng), rng.normal(0, scale, 3), from_frame, to_frame)


def plane_points(rng, n, z=0.0, half=0.2):
    return np.column_stack([rng.uniform(-half, half, n), rng.uniform(-half, half, n), np.full(n, z)])


def cylinder_surface(rng, n, radius=0.03, height=0.1, center=(0.0, 0.0), z0=0.0, arc=(0, 2 * np.pi)):
    a = rng.uniform(arc[0], arc[1], n)
    z = rng.uniform(z0, z0 + height, n)
    return np.column_stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), z])


def blob(rng, n, center, sigma):
    return rng.normal(0, sigma, (n, 3)) + np.asarray(center)


def base_cloud(P, view_point=None):
    return PointCloud(P, "base", view_point)
