import numpy as np
import pytest

from fewseg3d import prototypes as pr


def brute_force_fps(coords, s):
    """Independent greedy trace with explicit loops and the same tie rules."""
    coords = [tuple(float(x) for x in p) for p in coords]
    n = len(coords)

    def d2(a, b):
        return sum((x - y) ** 2 for x, y in zip(a, b))

    centroid = tuple(sum(p[i] for p in coords) / n for i in range(3))
    best, best_d = 0, -1.0
    for i, p in enumerate(coords):
        d = d2(p, centroid)
        if d > best_d:
            best, best_d = i, d
    sel = [best]
    while len(sel) < s:
        cand, cand_d = None, -1.0
        for i, p in enumerate(coords):
            if i in sel:
                continue
            d = min(d2(p, coords[j]) for j in sel)
            if d > cand_d:
                cand, cand_d = i, d
        sel.append(cand)
    return sel


class TestFps:
    def test_line_example(self):
        coords = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0.0]])
        # centroid x=3.25 -> farthest is x=10 (idx 3), then x=0 (idx 0)
        np.testing.assert_array_equal(pr.fps(coords, 2), [3, 0])

    def test_s_equals_n_covers_all(self):
        coords = np.random.default_rng(0).uniform(0, 1, (7, 3))
        assert sorted(pr.fps(coords, 7).tolist()) == list(range(7))

    def test_s1_is_centroid_farthest(self):
        coords = np.array([[0, 0, 0], [4, 0, 0], [1, 1, 0.0]])
        centroid = coords.mean(0)
        want = int(np.argmax(((coords - centroid) ** 2).sum(1)))
        assert pr.fps(coords, 1).tolist() == [want]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(123)
        for trial in range(200):
            n = int(rng.integers(1, 9))
            s = int(rng.integers(1, n + 1))
            # mix of continuous and grid-snapped coordinates to exercise ties
            if trial % 3 == 0:
                coords = rng.integers(0, 3, (n, 3)).astype(float)
            else:
                coords = rng.uniform(-1, 1, (n, 3))
            got = pr.fps(coords, s).tolist()
            want = brute_force_fps(coords, s)
            assert got == want, f"trial {trial}: {got} != {want}\n{coords}"

    def test_duplicate_points_never_repeat_indices(self):
        coords = np.zeros((4, 3))
        assert sorted(pr.fps(coords, 4).tolist()) == [0, 1, 2, 3]

    def test_bad_s_rejected(self):
        with pytest.raises(ValueError):
            pr.fps(np.zeros((3, 3)), 4)
        with pytest.raises(ValueError):
            pr.fps(np.zeros((3, 3)), 0)


class TestInvertedCluster:
    def test_single_point_returns_its_feature(self):
        feats = np.arange(12.0).reshape(4, 3)
        coords = np.random.default_rng(0).uniform(0, 1, (4, 3))
        mask = np.array([False, True, False, False])
        np.testing.assert_array_equal(pr.inverted_cluster(feats, coords, mask, 5), feats[1])

    def test_two_separated_clusters_average(self):
        # oracle: explicit clustering of two far-apart equal-size blobs
        f1, f2 = np.array([2.0, 0.0]), np.array([0.0, 6.0])
        feats = np.vstack([np.tile(f1, (10, 1)), np.tile(f2, (10, 1))])
        coords = np.vstack([np.random.default_rng(1).normal(0, 0.05, (10, 3)),
                            np.random.default_rng(2).normal(10, 0.05, (10, 3))])
        proto = pr.inverted_cluster(feats, coords, np.ones(20, bool), s=2)
        np.testing.assert_allclose(proto, (f1 + f2) / 2, atol=1e-12)

    def test_identical_features_any_s(self):
        f = np.array([1.5, -2.0, 0.25])
        feats = np.tile(f, (9, 1))
        coords = np.random.default_rng(3).uniform(0, 1, (9, 3))
        for s in (1, 3, 9):
            np.testing.assert_allclose(
                pr.inverted_cluster(feats, coords, np.ones(9, bool), s), f, atol=1e-12)

    def test_s1_equals_masked_mean(self):
        rng = np.random.default_rng(4)
        feats = rng.normal(0, 1, (30, 8))
        coords = rng.uniform(0, 1, (30, 3))
        mask = rng.uniform(size=30) < 0.5
        np.testing.assert_allclose(pr.inverted_cluster(feats, coords, mask, 1),
                                   feats[mask].mean(0), atol=1e-12)

    def test_prototype_inside_feature_bounding_box(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            feats = rng.normal(0, 2, (25, 6))
            coords = rng.uniform(0, 1, (25, 3))
            proto = pr.inverted_cluster(feats, coords, np.ones(25, bool), s=4)
            assert (proto >= feats.min(0) - 1e-12).all()
            assert (proto <= feats.max(0) + 1e-12).all()

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="empty mask"):
            pr.inverted_cluster(np.ones((3, 2)), np.ones((3, 3)), np.zeros(3, bool), 1)


class TestProtoGen:
    def _episode_arrays(self, rng, n=40, d=16, n_classes=2, k=1):
        feats = [[rng.normal(0, 1, (n, d)) for _ in range(k)] for _ in range(n_classes)]
        coords = [[rng.uniform(0, 1, (n, 3)) for _ in range(k)] for _ in range(n_classes)]
        masks = []
        for c in range(n_classes):
            per_shot = []
            for _ in range(k):
                m = np.zeros(n, bool)
                m[rng.choice(n, size=n // 4, replace=False)] = True
                per_shot.append(m)
            masks.append(per_shot)
        return feats, masks, coords

    def test_shapes_2way_1shot(self):
        rng = np.random.default_rng(0)
        feats, masks, coords = self._episode_arrays(rng, d=64)
        fg, bg = pr.proto_gen(feats, masks, coords, s=5)
        assert fg.shape == (2, 64) and bg.shape == (64,)

    def test_all_foreground_raises_background_error(self):
        feats = [[np.ones((5, 4))]]
        coords = [[np.random.default_rng(0).uniform(0, 1, (5, 3))]]
        masks = [[np.ones(5, bool)]]
        with pytest.raises(ValueError, match="background"):
            pr.proto_gen(feats, masks, coords)

    def test_empty_class_mask_names_class(self):
        rng = np.random.default_rng(1)
        feats, masks, coords = self._episode_arrays(rng)
        masks[1][0][:] = False
        with pytest.raises(ValueError, match="class 1"):
            pr.proto_gen(feats, masks, coords)

    def test_duplicated_shots_match_single_shot(self):
        rng = np.random.default_rng(2)
        feats, masks, coords = self._episode_arrays(rng, k=1)
        fg1, bg1 = pr.proto_gen(feats, masks, coords, s=3)
        feats2 = [[f[0], f[0].copy()] for f in feats]
        masks2 = [[m[0], m[0].copy()] for m in masks]
        coords2 = [[c[0], c[0].copy()] for c in coords]
        fg2, bg2 = pr.proto_gen(feats2, masks2, coords2, s=3)
        np.testing.assert_allclose(fg1, fg2, atol=1e-12)
        np.testing.assert_allclose(bg1, bg2, atol=1e-12)


class TestAssemble:
    def test_row_order_and_shape(self):
        fg = np.arange(8.0).reshape(2, 4)
        bg = np.full(4, -1.0)
        ps = pr.assemble(fg, bg, source="intrinsic")
        assert ps.matrix.shape == (3, 4)
        np.testing.assert_array_equal(ps.matrix[0], fg[0])
        np.testing.assert_array_equal(ps.matrix[1], fg[1])
        np.testing.assert_array_equal(ps.matrix[2], bg)
        assert ps.n_classes == 2

    def test_three_way_gives_four_rows(self):
        ps = pr.assemble(np.zeros((3, 6)), np.zeros(6), source="diffusion")
        assert ps.matrix.shape == (4, 6)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError, match="width mismatch"):
            pr.assemble(np.zeros((2, 4)), np.zeros(5), source="fused")
