import math

import numpy as np
import pytest

from ofa.geom import Pose, rot_z
from ofa.shapes import Obstacle, Shape, box, cylinder, ray_intersect, signed_distance, sphere


class TestShape:
    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="Unknown primitive"):
            Shape("cone", (1.0, 2.0))

    def test_dimension_count(self):
        with pytest.raises(ValueError, match="cylinder takes 2 dimensions"):
            Shape("cylinder", (1.0,))

    def test_positive_dimensions(self):
        with pytest.raises(ValueError, match="must be positive"):
            box(0.1, 0.0, 0.1)

    def test_dict_round_trip(self):
        shape = cylinder(0.04, 0.1)
        assert Shape.from_dict(shape.to_dict()) == shape

    def test_half_extents(self):
        assert cylinder(0.1, 0.4).half_extents.tolist() == [0.1, 0.1, 0.2]
        assert box(0.2, 0.4, 0.6).half_extents.tolist() == pytest.approx([0.1, 0.2, 0.3])


class TestSignedDistance:
    def test_box(self):
        """Outside points report the face distance; the center reports minus the half extent."""
        d, n = signed_distance(box(1.0, 1.0, 1.0), [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        assert d.tolist() == pytest.approx([0.5, -0.5])
        assert np.allclose(n[0], (1.0, 0.0, 0.0))
        assert np.linalg.norm(n[1]) == pytest.approx(1.0)

    def test_box_corner(self):
        """Beyond a corner the distance is Euclidean to the corner."""
        d, _ = signed_distance(box(1.0, 1.0, 1.0), [[1.5, 1.5, 0.0]])
        assert d[0] == pytest.approx(math.sqrt(2.0))

    def test_sphere(self):
        d, n = signed_distance(sphere(0.5), [[0.0, 2.0, 0.0]])
        assert d[0] == pytest.approx(1.5)
        assert np.allclose(n[0], (0.0, 1.0, 0.0))

    def test_cylinder(self):
        """Side and cap distances of a cylinder along z."""
        d, n = signed_distance(cylinder(0.1, 0.2), [[0.2, 0.0, 0.0], [0.0, 0.0, 0.2], [0.0, 0.0, 0.0]])
        assert d.tolist() == pytest.approx([0.1, 0.1, -0.1])
        assert np.allclose(n[0], (1.0, 0.0, 0.0))
        assert np.allclose(n[1], (0.0, 0.0, 1.0))

    def test_obstacle_frame(self):
        """Obstacle distances are evaluated in the obstacle's own frame."""
        obstacle = Obstacle(box(0.2, 1.0, 0.2), Pose(rot_z(math.pi / 2), (1.0, 0.0, 0.0)))
        d, n = obstacle.signed_distance([[1.4, 0.0, 0.0], [1.7, 0.0, 0.0]])
        assert d[0] < 0.0
        assert d[1] == pytest.approx(0.2)
        assert np.allclose(n[1], (1.0, 0.0, 0.0), atol=1e-12)


class TestRayIntersect:
    def test_box_hit(self):
        t, n = ray_intersect(box(1.0, 1.0, 1.0), [[-2.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]])
        assert t[0] == pytest.approx(1.5)
        assert np.allclose(n[0], (-1.0, 0.0, 0.0))

    def test_box_from_inside(self):
        """A ray starting inside exits through the far face."""
        t, n = ray_intersect(box(1.0, 1.0, 1.0), [[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]])
        assert t[0] == pytest.approx(0.5)
        assert np.allclose(n[0], (1.0, 0.0, 0.0))

    def test_sphere_hit(self):
        t, n = ray_intersect(sphere(1.0), [[0.0, 0.0, -3.0]], [[0.0, 0.0, 1.0]])
        assert t[0] == pytest.approx(2.0)
        assert np.allclose(n[0], (0.0, 0.0, -1.0))

    def test_cylinder_cap(self):
        t, n = ray_intersect(cylinder(0.1, 0.2), [[0.0, 0.0, 1.0]], [[0.0, 0.0, -1.0]])
        assert t[0] == pytest.approx(0.9)
        assert np.allclose(n[0], (0.0, 0.0, 1.0))

    def test_miss(self):
        """Rays pointing away report an infinite parameter."""
        for shape in (box(1.0, 1.0, 1.0), sphere(1.0), cylinder(0.5, 1.0)):
            t, _ = ray_intersect(shape, [[0.0, 0.0, 5.0]], [[0.0, 0.0, 1.0]])
            assert math.isinf(t[0])

    def test_broadcast_origin(self):
        """One origin can be shared by many directions."""
        t, _ = ray_intersect(sphere(1.0), [[0.0, 0.0, -3.0]], [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        assert t[0] == pytest.approx(2.0)
        assert math.isinf(t[1])

    def test_obstacle_world_rays(self):
        obstacle = Obstacle(sphere(0.5), Pose.from_translation((0.0, 0.0, 1.0)))
        t, n = obstacle.ray_intersect((0.0, 0.0, 0.0), [[0.0, 0.0, 1.0]])
        assert t[0] == pytest.approx(0.5)
        assert np.allclose(n[0], (0.0, 0.0, -1.0))


class TestObstacle:
    def test_corners(self):
        corners = Obstacle(box(0.2, 0.4, 0.6), Pose.from_translation((1.0, 0.0, 0.0))).corners()
        assert corners.shape == (8, 3)
        assert np.allclose(corners.min(axis=0), (0.9, -0.2, -0.3))
        assert np.allclose(corners.max(axis=0), (1.1, 0.2, 0.3))

    def test_moved(self):
        obstacle = Obstacle(sphere(0.1), Pose.identity(), name="ball")
        moved = obstacle.moved(Pose.from_translation((0.0, 1.0, 0.0)))
        assert moved.name == "ball"
        assert moved.shape == obstacle.shape
        assert moved.pose.translation.tolist() == [0.0, 1.0, 0.0]
