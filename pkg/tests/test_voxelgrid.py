import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxwin.pointcloud import (
    PointCloud,
    PointCloudFormatError,
    load,
    load_binary,
    load_text,
    save_binary,
    save_text,
)
from voxwin.voxelgrid import (
    build_hierarchy,
    coarsen,
    partition_windows,
    voxelize,
    write_hierarchy_dump,
)
from conftest import random_level


def cloud_from_positions(pos, rng=None):
    rng = rng or np.random.default_rng(0)
    color = rng.uniform(-1, 1, (len(pos), 3))
    return PointCloud(np.concatenate([np.asarray(pos, dtype=float), color], axis=1))


class TestVoxelize:
    def test_single_point(self):
        pc = cloud_from_positions([[0.01, 0.01, 0.01]])
        level = voxelize(pc, 0.02, seed=1)
        assert level.num_voxels == 1
        np.testing.assert_array_equal(level.coords, [[0, 0, 0]])
        np.testing.assert_array_equal(level.rep_points[0], pc.positions[0])

    def test_eight_octants(self):
        centers = [(0.01 + 0.02 * i, 0.01 + 0.02 * j, 0.01 + 0.02 * k)
                   for i in range(2) for j in range(2) for k in range(2)]
        level = voxelize(cloud_from_positions(centers), 0.02, seed=3)
        assert level.num_voxels == 8
        # each rep is its cell's sole point
        got = {tuple(p) for p in level.rep_points}
        assert got == {tuple(np.asarray(c, dtype=float)) for c in centers}

    def test_cell_count_matches_brute_force_recount(self, rng):
        pos = rng.uniform(0.0, 1.0, size=(1000, 3))
        level = voxelize(cloud_from_positions(pos, rng), 0.05, seed=9)
        # independent hashing pass
        distinct = {tuple(np.floor(p / 0.05).astype(int)) for p in pos}
        assert level.num_voxels == len(distinct)
        assert set(map(tuple, level.coords)) == distinct

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError):
            voxelize(PointCloud(np.empty((0, 6))), 0.02, seed=1)
        with pytest.raises(ValueError):
            voxelize(cloud_from_positions([[0.0, 0.0, 0.0]]), 0.0, seed=1)

    def test_same_seed_same_reps(self, rng):
        pos = rng.uniform(0, 0.3, size=(150, 3))
        pc = cloud_from_positions(pos, rng)
        a = voxelize(pc, 0.04, seed=42)
        b = voxelize(pc, 0.04, seed=42)
        np.testing.assert_array_equal(a.rep_indices, b.rep_indices)

    def test_reps_lie_inside_their_voxel(self, rng):
        pos = rng.uniform(-0.2, 0.2, size=(300, 3))
        level = voxelize(cloud_from_positions(pos, rng), 0.03, seed=5)
        lo = level.coords * level.voxel_size
        assert (level.rep_points >= lo - 1e-12).all()
        assert (level.rep_points < lo + level.voxel_size).all()


class TestHierarchy:
    def test_single_voxel_all_levels(self):
        pc = cloud_from_positions([[0.01, 0.01, 0.01]])
        hier = build_hierarchy(voxelize(pc, 0.02, 1), 5, [3, 2, 2, 2])
        for lvl in hier.levels:
            assert lvl.num_voxels == 1
            np.testing.assert_array_equal(lvl.rep_points[0], pc.positions[0])

    def test_symmetric_tie_breaks_lexicographic(self):
        # two children with reps symmetric about the centroid
        pc = cloud_from_positions([[0.005, 0.005, 0.005], [0.035, 0.005, 0.005]])
        level = voxelize(pc, 0.02, seed=1)
        coarse = coarsen(level, 2)
        assert coarse.num_voxels == 1
        np.testing.assert_array_equal(coarse.rep_points[0], [0.005, 0.005, 0.005])

    def test_coarse_rep_is_descendant_rep(self, rng):
        pos = rng.uniform(0, 1.2, size=(800, 3))
        level = voxelize(cloud_from_positions(pos, rng), 0.02, seed=2)
        hier = build_hierarchy(level, 5, [3, 2, 2, 2])
        finest_reps = {tuple(p) for p in hier.levels[0].rep_points}
        for lvl in hier.levels[1:]:
            for rep in lvl.rep_points:
                assert tuple(rep) in finest_reps

    def test_descendant_scan_exhaustive(self, rng):
        """Every coarse rep equals the rep of one of its own descendants."""
        pos = rng.uniform(0, 0.9, size=(700, 3))
        level = voxelize(cloud_from_positions(pos, rng), 0.02, seed=7)
        hier = build_hierarchy(level, 5, [3, 2, 2, 2])
        for l in range(1, 5):
            fine = hier.levels[l - 1]
            fine_map = fine.coord_map()
            coarse = hier.levels[l]
            for row in range(coarse.num_voxels):
                child_rows = [fine_map[tuple(c)] for c in coarse.children[row]]
                child_reps = fine.rep_points[child_rows]
                assert any(np.array_equal(coarse.rep_points[row], r) for r in child_reps)

    def test_counts_non_increasing(self, rng):
        pos = rng.uniform(0, 1, size=(500, 3))
        hier = build_hierarchy(voxelize(cloud_from_positions(pos, rng), 0.03, 3), 5, [3, 2, 2, 2])
        counts = [lvl.num_voxels for lvl in hier.levels]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_level_stride_validation(self, rng):
        level = voxelize(cloud_from_positions([[0.0, 0.0, 0.0]]), 0.02, 1)
        with pytest.raises(ValueError):
            build_hierarchy(level, 5, [2, 2])  # needs 4 strides
        with pytest.raises(ValueError):
            build_hierarchy(level, 0, [])

    def test_stride_arithmetic(self, rng):
        pos = rng.uniform(-1, 1, size=(300, 3))
        level = voxelize(cloud_from_positions(pos, rng), 0.05, seed=4)
        coarse = coarsen(level, 3)
        expected = {tuple(c) for c in np.floor_divide(level.coords, 3)}
        assert set(map(tuple, coarse.coords)) == expected
        assert coarse.voxel_size == pytest.approx(0.15)


class TestPartition:
    def test_window_size_one(self, rng):
        level = random_level(rng)
        part = partition_windows(level, 1, shifted=False)
        assert part.num_windows == level.num_voxels
        assert all(len(idx) == 1 for idx in part.windows.values())

    def test_hand_evaluated_m7(self):
        pc = cloud_from_positions([[0.01, 0.01, 0.01], [0.13, 0.13, 0.13]])
        level = voxelize(pc, 0.02, seed=1)  # coords (0,0,0) and (6,6,6)
        regular = partition_windows(level, 7, shifted=False)
        assert regular.num_windows == 1
        shifted = partition_windows(level, 7, shifted=True)
        assert shifted.num_windows == 2

    def test_union_is_permutation(self, rng):
        for _ in range(10):
            level = random_level(rng)
            m = int(rng.integers(1, 9))
            for shifted in (False, True):
                part = partition_windows(level, m, shifted)
                rows = np.concatenate(list(part.windows.values()))
                assert sorted(rows.tolist()) == list(range(level.num_voxels))

    def test_window_members_fit_in_box(self, rng):
        level = random_level(rng)
        m = 4
        for shifted in (False, True):
            offset = m // 2 if shifted else 0
            part = partition_windows(level, m, shifted)
            for wcoord, idx in part.windows.items():
                lo = np.array(wcoord) * m - offset
                inside = (level.coords[idx] >= lo) & (level.coords[idx] < lo + m)
                assert inside.all()

    def test_window_height(self, rng):
        level = random_level(rng, voxel_size=0.02)
        part = partition_windows(level, 5, shifted=False)
        assert part.window_height == pytest.approx(0.1)

    @settings(max_examples=30, deadline=None)
    @given(m=st.integers(min_value=1, max_value=12), seed=st.integers(0, 2**31 - 1))
    def test_coverage_property(self, m, seed):
        level = random_level(np.random.default_rng(seed), max_extent=8, max_voxels=60)
        for shifted in (False, True):
            part = partition_windows(level, m, shifted)
            rows = np.concatenate(list(part.windows.values()))
            assert sorted(rows.tolist()) == list(range(level.num_voxels))


class TestPointCloudIO:
    def test_text_roundtrip(self, tmp_path, rng):
        pc = cloud_from_positions(rng.uniform(0, 1, (20, 3)), rng)
        path = tmp_path / "pc.txt"
        save_text(pc, path)
        back = load_text(path)
        np.testing.assert_allclose(back.signals, pc.signals, rtol=1e-6)

    def test_binary_roundtrip(self, tmp_path, rng):
        pc = cloud_from_positions(rng.uniform(0, 1, (20, 3)), rng)
        path = tmp_path / "pc.bin"
        save_binary(pc, path)
        back = load_binary(path)
        np.testing.assert_allclose(back.signals, pc.signals, atol=1e-6)
        auto = load(path)
        np.testing.assert_array_equal(auto.signals, back.signals)

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "pc.txt"
        path.write_text("# header\n\n0.1 0.2 0.3 0.5 -0.5 0.0\n")
        assert load_text(path).num_points == 1

    def test_malformed_line_number_reported(self, tmp_path):
        path = tmp_path / "pc.txt"
        path.write_text("0.1 0.2 0.3 0 0 0\n0.1 0.2 0.3 0 0 0\n0.1 oops 0.3 0 0 0\n")
        with pytest.raises(PointCloudFormatError) as err:
            load_text(path)
        assert err.value.line == 3
        assert "line 3" in str(err.value)

    def test_bad_field_count(self, tmp_path):
        path = tmp_path / "pc.txt"
        path.write_text("0.1 0.2 0.3 0.0\n")
        with pytest.raises(PointCloudFormatError):
            load_text(path)

    def test_color_out_of_range(self, tmp_path):
        path = tmp_path / "pc.txt"
        path.write_text("0.1 0.2 0.3 2.0 0.0 0.0\n")
        with pytest.raises(PointCloudFormatError):
            load_text(path)

    def test_nine_channel_cloud(self, tmp_path):
        path = tmp_path / "pc.txt"
        path.write_text("0.1 0.2 0.3 0.5 0.5 0.5 0.0 0.0 1.0\n")
        assert load_text(path).num_channels == 9


class TestHierarchyDump:
    def test_format(self):
        pc = cloud_from_positions([[0.01, 0.02, 0.03]])
        hier = build_hierarchy(voxelize(pc, 0.02, 1), 2, [2])
        buf = io.StringIO()
        write_hierarchy_dump(hier, buf)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "1 0 1 1 0.01 0.02 0.03"
        assert lines[1] == "2 0 0 0 0.01 0.02 0.03"
