#!/usr/bin/env python3
"""
Test Positional Encoding

Tests ray-based position embeddings, cone-driven spatial alignment and
key/value composition.
"""

import sys
import os

import numpy as np
import pytest

# Add src to path so we can import our modules
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from core.camera_geometry import CameraModel, Roi3D, lid_depth_bins
from core.errors import ContractViolation, ConfigurationError
from core.numeric_kernel import LinearLayer, Mlp2, constant_mlp2, zero_linear
from core.positional_encoding import (
    PosEmbedGrid,
    TokenGrid,
    AlignmentNet,
    compose_key_value,
    identity_alignment_net,
    init_alignment_net,
    init_position_mlp,
    position_embedding,
    spatial_align,
    token_cones,
    token_pixel_centers,
)

ROI = Roi3D(minimum=(-4.0, -4.0, 0.0), maximum=(4.0, 4.0, 4.0))

def single_token_camera():
    """16x16 image, principal point at the center of its only stride-16 token."""
    return CameraModel(
        fx=100.0, fy=100.0, cu=8.0, cv=8.0, width=16, height=16,
        rotation=np.eye(3), translation=np.zeros(3),
    )

def channel_mlp(in_dim, values):
    """An Mlp2 that ignores its input and emits the given per-channel values."""
    values = np.asarray(values, dtype=float)
    return Mlp2(
        layer1=zero_linear(in_dim, 3),
        layer2=LinearLayer(weight=np.zeros((values.size, 3)), bias=values),
    )

def test_token_pixel_centers():
    """Test row-major token centers."""
    print("Testing token pixel centers...")

    centers = token_pixel_centers(3, 2, 16)
    assert centers.shape == (6, 2), f"3x2 grid should have 6 centers, got {centers.shape}"
    assert np.allclose(centers[0], [8.0, 8.0]), "First token center is half a stride in"
    assert np.allclose(centers[4], [24.0, 24.0]), "Token 4 is row 1, col 1"

    with pytest.raises(ContractViolation):
        TokenGrid(camera_index=0, width=3, height=2, stride=16, features=np.zeros((5, 4)))

    print("✅ Token pixel centers verified")

def test_position_embedding():
    """Test embeddings against hand-composed ray sampling, normalization and MLP."""
    print("Testing position embedding...")

    cam = single_token_camera()
    grid = TokenGrid(camera_index=0, width=1, height=1, stride=16, features=np.zeros((1, 2)))
    depths = lid_depth_bins(1.0, 3.0, 1)
    assert np.allclose(depths, [1.0, 3.0]), "One LID bin gives the two endpoints"

    # Ray is +z, so points (0,0,1) and (0,0,3) normalize to (.5,.5,.25) and (.5,.5,.75)
    phi = Mlp2(
        layer1=LinearLayer(weight=np.ones((1, 6)), bias=[0.0]),
        layer2=LinearLayer(weight=[[1.0], [2.0]], bias=[0.0, -1.0]),
    )
    embed = position_embedding(grid, cam, phi, depths, ROI)
    assert np.allclose(embed.embeddings, [[3.0, 5.0]]), f"Hand-computed embedding is (3, 5), got {embed.embeddings}"

    zeros = constant_mlp2(6, 4, 2, 0.0)
    assert np.array_equal(position_embedding(grid, cam, zeros, depths, ROI).embeddings, np.zeros((1, 2))), \
        "Zero phi should give zero embeddings"

    twin = single_token_camera()
    phi_random = init_position_mlp(2, 8, 2, 7)
    first = position_embedding(grid, cam, phi_random, depths, ROI).embeddings
    second = position_embedding(grid, twin, phi_random, depths, ROI).embeddings
    assert np.array_equal(first, second), "Identical cameras must give identical embeddings"

    with pytest.raises(ContractViolation):
        position_embedding(grid, cam, phi, [1.0, 2.0, 3.0], ROI)
    with pytest.raises(ContractViolation):
        position_embedding(grid, cam, constant_mlp2(6, 4, 5, 0.0), depths, ROI)

    print("✅ Position embedding verified")

def test_spatial_align():
    """Test alignment arithmetic and the identity transform."""
    print("Testing spatial alignment...")

    cam = single_token_camera()
    grid = TokenGrid(camera_index=0, width=1, height=1, stride=16, features=[[3.0, 4.0]])
    cones = token_cones(grid, cam)
    assert len(cones) == 1, "One token gives one cone"

    net = AlignmentNet(weight_net=channel_mlp(9, [2.0, 0.5]), bias_net=channel_mlp(9, [1.0, -1.0]))
    aligned = spatial_align(grid, cones, net)
    assert np.allclose(aligned.features, [[7.0, 1.0]]), f"w=(2,.5), b=(1,-1), F=(3,4) gives (7,1), got {aligned.features}"
    assert aligned.aligned and not grid.aligned, "Only the output grid is flagged aligned"
    assert np.allclose(grid.features, [[3.0, 4.0]]), "Input features must not change"

    identity = spatial_align(grid, cones, identity_alignment_net(2, 4))
    assert np.allclose(identity.features, grid.features), "T_w = 1, T_b = 0 leaves F unchanged"

    shift_only = AlignmentNet(weight_net=channel_mlp(9, [0.0, 0.0]), bias_net=channel_mlp(9, [0.25, -2.0]))
    assert np.allclose(spatial_align(grid, cones, shift_only).features, [[0.25, -2.0]]), \
        "T_w = 0 leaves only the shift"

    with pytest.raises(ContractViolation):
        spatial_align(grid, cones + cones, net)
    with pytest.raises(ContractViolation):
        AlignmentNet(weight_net=channel_mlp(6, [1.0, 1.0]), bias_net=channel_mlp(6, [0.0, 0.0]), content="cone")

    ray_net = init_alignment_net(2, 4, 3, content="ray")
    ray_aligned = spatial_align(grid, cones, ray_net)
    assert ray_aligned.features.shape == (1, 2), "Ray-content alignment keeps the feature shape"

    print("✅ Spatial alignment verified")

def test_compose_key_value():
    """Test the three key/value modes."""
    print("Testing key/value composition...")

    grid = TokenGrid(camera_index=0, width=1, height=1, stride=16, features=[[1.0, 1.0]])
    embed = PosEmbedGrid(camera_index=0, embeddings=np.array([[2.0, 3.0]]))

    keys, values = compose_key_value(grid, embed, "petr")
    assert np.allclose(keys, [[3.0, 4.0]]) and np.allclose(values, [[1.0, 1.0]]), "petr: k = F + E, v = F"

    keys, values = compose_key_value(grid, embed, "pos")
    assert np.allclose(values, keys), "pos: v = k"

    zero = PosEmbedGrid(camera_index=0, embeddings=np.zeros((1, 2)))
    for mode in ("petr", "focal"):
        keys, values = compose_key_value(grid, zero, mode)
        assert np.array_equal(keys, values), f"E = 0 should make k == v in {mode} mode"

    with pytest.raises(ConfigurationError):
        compose_key_value(grid, embed, "dense")
    with pytest.raises(ContractViolation):
        compose_key_value(grid, PosEmbedGrid(camera_index=0, embeddings=np.zeros((1, 3))), "petr")

    print("✅ Key/value composition verified")

def test_pose_perturbation():
    """Moving the camera changes keys through E but leaves petr values untouched."""
    print("Testing pose perturbation...")

    cam = CameraModel(
        fx=91.4, fy=91.4, cu=64.0, cv=32.0, width=128, height=64,
        rotation=np.eye(3), translation=np.zeros(3),
    )
    rng = np.random.default_rng(4)
    grid = TokenGrid(camera_index=0, width=8, height=4, stride=16, features=rng.normal(size=(32, 6)))
    depths = lid_depth_bins(1.0, 4.0, 3)
    phi = init_position_mlp(len(depths), 16, 6, 5)
    net = init_alignment_net(6, 16, 6)

    embed = position_embedding(grid, cam, phi, depths, ROI)
    keys, values = compose_key_value(grid, embed, "petr")
    focal_values = compose_key_value(spatial_align(grid, token_cones(grid, cam), net), embed, "focal")[1]

    for trial in range(5):
        yaw = rng.uniform(-0.3, 0.3)
        rotation = np.array([[np.cos(yaw), 0.0, np.sin(yaw)], [0.0, 1.0, 0.0], [-np.sin(yaw), 0.0, np.cos(yaw)]])
        moved = cam.with_pose(rotation, rng.uniform(-0.5, 0.5, size=3))
        moved_embed = position_embedding(grid, moved, phi, depths, ROI)
        moved_keys, moved_values = compose_key_value(grid, moved_embed, "petr")
        assert np.array_equal(moved_values, values), f"Trial {trial}: petr values are the raw features"
        assert not np.allclose(moved_keys, keys), f"Trial {trial}: keys must follow the camera pose"
        moved_focal = compose_key_value(spatial_align(grid, token_cones(grid, moved), net), moved_embed, "focal")[1]
        assert not np.allclose(moved_focal, focal_values), f"Trial {trial}: aligned values depend on the cones"

    print("✅ Pose perturbation verified")

def main():
    """Run all positional encoding tests."""
    print("🧪 Testing Positional Encoding")
    print("==============================")

    try:
        test_token_pixel_centers()
        test_position_embedding()
        test_spatial_align()
        test_compose_key_value()
        test_pose_perturbation()

        print("\n🎉 All positional encoding tests passed!")
        return 0

    except AssertionError as e:
        print(f"\n❌ Test failed: {e}")
        return 1
    except Exception as e:
        print(f"\n💥 Unexpected error: {e}")
        return 1

if __name__ == "__main__":
    exit(main())
