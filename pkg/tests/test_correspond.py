import numpy as np
import pytest
from scipy import stats

from stseg.cloud import PointCloud, RigidTransform, project_to_range_image, SensorFov
from stseg.correspond import (DYNAMIC, STATIC, CorrespondConfig,
                              CorrespondenceSet, build_correspondences,
                              dynamic_correspondences, pairs_to_pixels,
                              read_correspondence_cache, sample_pair,
                              static_correspondences,
                              write_correspondence_cache)
from stseg.dynamics import fit_box
from stseg.preprocess import AlignedSequence
from stseg.synth import (GROUND_CLASS, STRUCTURE_CLASS, Body, SceneSpec,
                         SensorModel, render_sequence)
from stseg.tracking import Track


def make_aligned(frames_xyz, ground_masks=None, poses=None):
    clouds = [PointCloud(np.asarray(x, float), np.full(len(x), 0.5),
                         frame_index=t)
              for t, x in enumerate(frames_xyz)]
    if ground_masks is None:
        ground_masks = [np.zeros(len(c), bool) for c in clouds]
    keep_masks = [~g for g in ground_masks]
    if poses is None:
        poses = [RigidTransform.identity() for _ in clouds]
    n = len(clouds)
    return AlignedSequence(clouds, ground_masks, keep_masks, poses,
                           np.zeros(n, bool), np.zeros(n))


def box_cluster(rng, center, n=60):
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * [2.0, 0.8, 0.6]
    return pts + center


class TestSamplePair:
    def test_single_option_sequence(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            assert sample_pair(6, rng, intervals=(5,)) == (5, 0)

    def test_pair_is_valid(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            t, s = sample_pair(40, rng)
            assert 0 <= s < t < 40
            assert (t - s) in {5, 10, 15, 20, 25, 30}

    def test_interval_distribution_uniform(self):
        rng = np.random.default_rng(2)
        draws = [sample_pair(100, rng) for _ in range(10000)]
        ks = np.array([t - s for t, s in draws])
        counts = [np.sum(ks == k) for k in (5, 10, 15, 20, 25, 30)]
        assert sum(counts) == 10000
        assert stats.chisquare(counts).pvalue > 0.01

    def test_too_short_sequence_raises(self):
        with pytest.raises(ValueError):
            sample_pair(5, np.random.default_rng(0), intervals=(5,))

    def test_seed_reproducible(self):
        a = [sample_pair(50, np.random.default_rng(9)) for _ in range(50)]
        b = [sample_pair(50, np.random.default_rng(9)) for _ in range(50)]
        assert a == b


class TestStaticCorrespondences:
    def test_identical_frames_self_pairing(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-5, 5, (80, 3))
        aligned = make_aligned([pts, pts.copy()])
        ia, ib = static_correspondences(aligned, 0, 1, max_dist=0.3)
        np.testing.assert_array_equal(ia, np.arange(80))
        np.testing.assert_array_equal(ib, np.arange(80))

    def test_disjoint_frames_empty(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (40, 3))
        aligned = make_aligned([a, a + 100.0])
        ia, ib = static_correspondences(aligned, 0, 1, max_dist=0.3)
        assert len(ia) == 0 and len(ib) == 0

    def test_excludes_are_respected(self):
        pts = np.random.default_rng(2).uniform(-5, 5, (30, 3))
        aligned = make_aligned([pts, pts.copy()])
        ia, ib = static_correspondences(aligned, 0, 1, max_dist=0.3,
                                        exclude_a=np.array([0, 1, 2]),
                                        exclude_b=np.array([5]))
        assert not (set(ia) & {0, 1, 2})
        assert 5 not in set(ib)

    def test_wall_points_track_their_surface(self):
        # moving ego, static wall: pairs must land on the matching spot of
        # the wall, not merely on the wall
        spec = SceneSpec(ground_half=25.0,
                         sensor=SensorModel(h=64, w=1024, range_noise=0.0))
        # wall short enough to sit fully inside the vertical fov from every
        # ego position, so surface coverage persists across the sweep
        spec.bodies.append(Body("box", (7.0, 0.0), (1.0, 10.0, 2.5),
                                STRUCTURE_CLASS))
        spec.ego_velocity = (0.0, 0.2)
        seq = render_sequence(spec, 10, seed=0)
        pose0 = seq.frames[0].ego_pose
        aligned = make_aligned(
            [f.cloud.xyz for f in seq.frames],
            ground_masks=[f.class_ids == GROUND_CLASS for f in seq.frames],
            poses=[pose0.inverse().compose(f.ego_pose) for f in seq.frames])
        a, b = seq.frames[0], seq.frames[9]
        ia, ib = static_correspondences(aligned, 0, 9, max_dist=0.3)
        on_wall = a.class_ids[ia] == STRUCTURE_CLASS
        assert on_wall.sum() > 200
        d = np.linalg.norm(b.world_xyz[ib[on_wall]] - a.world_xyz[ia[on_wall]],
                           axis=1)
        assert np.mean(d <= 0.1) >= 0.95


class TestDynamicCorrespondences:
    def make_track(self, xyz_a, ids_a, xyz_b, ids_b, track_id=0):
        return Track(track_id=track_id,
                     boxes={0: fit_box(xyz_a, ids_a, 0),
                            1: fit_box(xyz_b, ids_b, 1)},
                     last_frame=1)

    def test_translated_object_identity_map(self):
        rng = np.random.default_rng(0)
        pts = box_cluster(rng, np.array([6.0, 2.0, 0.8]))
        delta = np.array([1.2, -0.6, 0.0])
        track = self.make_track(pts, np.arange(60), pts + delta, np.arange(60))
        aligned = make_aligned([pts, pts + delta])
        ia, ib, mem_a, mem_b = dynamic_correspondences([track], aligned, 0, 1)
        assert len(ia) == 60
        np.testing.assert_array_equal(np.sort(ia), np.arange(60))
        # full overlap and exact rigid motion: the map is the identity
        np.testing.assert_array_equal(ia, ib)

    def test_track_missing_one_frame_no_pairs(self):
        rng = np.random.default_rng(1)
        pts = box_cluster(rng, np.array([5.0, 0.0, 0.8]))
        track = Track(track_id=0, boxes={0: fit_box(pts, np.arange(60), 0)},
                      last_frame=0)
        aligned = make_aligned([pts, pts + 0.5])
        ia, ib, mem_a, mem_b = dynamic_correspondences([track], aligned, 0, 1)
        assert len(ia) == 0 and len(mem_a) == 0

    def test_pairs_never_cross_tracks(self):
        rng = np.random.default_rng(2)
        c1a = box_cluster(rng, np.array([6.0, 3.0, 0.8]))
        c2a = box_cluster(rng, np.array([6.0, -3.0, 0.8]))
        d1, d2 = np.array([1.0, 0.0, 0.0]), np.array([-1.0, 0.4, 0.0])
        frame_a = np.vstack([c1a, c2a])
        frame_b = np.vstack([c1a + d1, c2a + d2])
        t1 = self.make_track(c1a, np.arange(60), c1a + d1, np.arange(60), 0)
        t2 = self.make_track(c2a, np.arange(60, 120), c2a + d2,
                             np.arange(60, 120), 1)
        aligned = make_aligned([frame_a, frame_b])
        ia, ib, _, _ = dynamic_correspondences([t1, t2], aligned, 0, 1)
        assert len(ia) > 100
        same_side = (ia < 60) == (ib < 60)
        assert np.all(same_side)

    def test_failed_icp_contributes_nothing(self):
        rng = np.random.default_rng(3)
        pts_a = box_cluster(rng, np.array([5.0, 0.0, 0.8]))
        pts_b = box_cluster(rng, np.array([5.0, 0.0, 0.8]))
        # lie about the boxes: same center although the points sit 8 m
        # apart, so ICP starts starved of correspondences
        box_a = fit_box(pts_a, np.arange(60), 0)
        box_b = fit_box(pts_b, np.arange(60), 1)
        aligned = make_aligned([pts_a, pts_b + [8.0, 0.0, 0.0]])
        track = Track(track_id=0, boxes={0: box_a, 1: box_b}, last_frame=1)
        cfg = CorrespondConfig()
        ia, ib, mem_a, _ = dynamic_correspondences([track], aligned, 0, 1, cfg)
        assert len(ia) == 0
        assert len(mem_a) == 60   # members still reported for exclusion


class TestBuildCorrespondences:
    def test_identical_static_frames_full_coverage(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-5, 5, (100, 3))
        ground = np.zeros(100, bool)
        ground[:30] = True
        aligned = make_aligned([pts, pts.copy()],
                               ground_masks=[ground, ground.copy()])
        cset = build_correspondences(aligned, [], 0, 1)
        assert cset.coverage == pytest.approx(1.0)
        assert not cset.low_quality
        assert np.all(cset.kinds == STATIC)
        assert len(cset) == 100

    def test_same_frame_rejected(self):
        pts = np.random.default_rng(1).uniform(-5, 5, (20, 3))
        aligned = make_aligned([pts, pts])
        with pytest.raises(ValueError):
            build_correspondences(aligned, [], 1, 1)

    def test_low_overlap_flagged(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, (50, 3))
        aligned = make_aligned([a, a + 50.0])
        cset = build_correspondences(aligned, [], 0, 1)
        assert cset.coverage == 0.0
        assert cset.low_quality

    def test_static_and_dynamic_disjoint(self):
        rng = np.random.default_rng(3)
        wall = rng.uniform(-1, 1, (150, 3)) * [0.2, 6.0, 2.0] + [10.0, 0, 1]
        mover = box_cluster(rng, np.array([4.0, 0.0, 0.8]))
        delta = np.array([1.0, 0.0, 0.0])
        frame_a = np.vstack([wall, mover])
        frame_b = np.vstack([wall, mover + delta])
        ids = np.arange(150, 210)
        track = Track(track_id=0,
                      boxes={0: fit_box(mover, ids, 0),
                             1: fit_box(mover + delta, ids, 1)},
                      last_frame=1)
        aligned = make_aligned([frame_a, frame_b])
        cset = build_correspondences(aligned, [track], 0, 1)
        sa, _ = cset.of_kind(STATIC)
        da, db = cset.of_kind(DYNAMIC)
        assert len(da) == 60 and len(sa) == 150
        assert not (set(sa) & set(da))
        # each frame-a point at most once
        assert len(np.unique(cset.ids_a)) == len(cset.ids_a)

    def test_emitted_distances_respect_gates(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(-5, 5, (120, 3))
        b = a + rng.normal(0, 0.12, (120, 3))
        aligned = make_aligned([a, b])
        cfg = CorrespondConfig(static_max_dist=0.2)
        cset = build_correspondences(aligned, [], 0, 1, cfg)
        assert len(cset) > 0
        d = np.linalg.norm(b[cset.ids_b] - a[cset.ids_a], axis=1)
        assert np.max(d) <= 0.2 + 1e-12


class TestCache:
    def roundtrip(self, tmp_path, cset):
        path = str(tmp_path / "pairs.bin")
        write_correspondence_cache(path, cset)
        return read_correspondence_cache(path)

    def test_round_trip(self, tmp_path):
        cset = CorrespondenceSet(3, 8,
                                 np.array([0, 5, 9], np.int64),
                                 np.array([2, 5, 11], np.int64),
                                 np.array([0, 1, 0], np.uint8),
                                 coverage=0.75, low_quality=False)
        back = self.roundtrip(tmp_path, cset)
        assert back.frame_a == 3 and back.frame_b == 8
        np.testing.assert_array_equal(back.ids_a, cset.ids_a)
        np.testing.assert_array_equal(back.ids_b, cset.ids_b)
        np.testing.assert_array_equal(back.kinds, cset.kinds)
        assert back.coverage == pytest.approx(0.75)
        assert back.low_quality is False

    def test_empty_set_round_trip(self, tmp_path):
        cset = CorrespondenceSet(0, 1, np.empty(0, np.int64),
                                 np.empty(0, np.int64), np.empty(0, np.uint8),
                                 coverage=0.0, low_quality=True)
        back = self.roundtrip(tmp_path, cset)
        assert len(back) == 0
        assert back.low_quality is True

    def test_bad_magic_rejected(self, tmp_path):
        path = str(tmp_path / "junk.bin")
        with open(path, "wb") as fh:
            fh.write(b"NOPE" + b"\x00" * 28)
        with pytest.raises(ValueError, match="not a correspondence cache"):
            read_correspondence_cache(path)

    def test_truncated_file_rejected(self, tmp_path):
        cset = CorrespondenceSet(0, 1, np.arange(10), np.arange(10),
                                 np.zeros(10, np.uint8), 1.0)
        path = str(tmp_path / "pairs.bin")
        write_correspondence_cache(path, cset)
        data = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(data[:-5])
        with pytest.raises(ValueError):
            read_correspondence_cache(path)


class TestPairsToPixels:
    def test_identity_pairs_map_to_same_pixels(self):
        rng = np.random.default_rng(0)
        n = 120
        az = rng.uniform(-np.pi, np.pi, n)
        el = rng.uniform(-0.3, 0.15, n)
        r = rng.uniform(2, 20, n)
        xyz = np.column_stack([r * np.cos(el) * np.cos(az),
                               r * np.cos(el) * np.sin(az),
                               r * np.sin(el)])
        cloud = PointCloud(xyz, np.full(n, 0.5))
        fov = SensorFov.from_degrees(12.0, 22.0)
        image = project_to_range_image(cloud, 32, 256, fov)
        owned = image.point_index[image.valid]
        cset = CorrespondenceSet(0, 1, owned.copy(), owned.copy(),
                                 np.zeros(len(owned), np.uint8), 1.0)
        pa, pb, kinds = pairs_to_pixels(cset, image, image)
        assert len(pa) == len(owned)
        np.testing.assert_array_equal(pa, pb)
        got = image.point_index.ravel()[pa]
        np.testing.assert_array_equal(np.sort(got), np.sort(owned))

    def test_occluded_pairs_dropped(self):
        # two points on the same ray: the far one loses its pixel and any
        # pair touching it must vanish
        xyz = np.array([[5.0, 0.0, 0.0], [9.0, 0.0, 0.0], [0.0, 6.0, 0.0]])
        cloud = PointCloud(xyz, np.full(3, 0.5))
        fov = SensorFov.from_degrees(12.0, 22.0)
        image = project_to_range_image(cloud, 16, 64, fov)
        cset = CorrespondenceSet(0, 1, np.array([0, 1, 2]),
                                 np.array([0, 1, 2]),
                                 np.zeros(3, np.uint8), 1.0)
        pa, pb, _ = pairs_to_pixels(cset, image, image)
        kept_points = image.point_index.ravel()[pa]
        assert 1 not in kept_points
        assert {0, 2} == set(kept_points)
