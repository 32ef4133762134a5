import numpy as np
import pytest

from trimodal.retrieval import (FeatureRecord, KnnConfig, RetrievalError,
                                cross_modal_retrieve, extract_features,
                                knn_accuracy, knn_classify,
                                load_feature_index, pool_grid,
                                save_feature_index)


def record(vec, label=0, modality="image", ref=0):
    v = np.asarray(vec, dtype=np.float64)
    return FeatureRecord(vector=v / np.linalg.norm(v), label=label,
                         modality=modality, sample_ref=ref)


def brute_force_knn(query, index, k, tau):
    """Independent oracle: python-loop similarity, sort, and vote."""
    sims = [(float(np.dot(r.vector, query.vector)), i)
            for i, r in enumerate(index)]
    sims.sort(key=lambda t: (-t[0], t[1]))
    top = sims[:min(k, len(index))]
    n_classes = max(r.label for r in index) + 1
    scores = [0.0] * n_classes
    for s, i in top:
        scores[index[i].label] += np.exp(s / tau)
    best = max(range(n_classes), key=lambda c: (scores[c], -c))
    return best, np.array(scores)


class TestKnnClassify:
    def test_matches_brute_force_oracle(self, rng):
        index = [record(rng.standard_normal(8), label=int(l), ref=i)
                 for i, l in enumerate(rng.integers(0, 5, size=40))]
        for _ in range(20):
            q = record(rng.standard_normal(8), label=0)
            got_pred, got_scores = knn_classify(q, index, KnnConfig(k=7, tau=0.07))
            want_pred, want_scores = brute_force_knn(q, index, 7, 0.07)
            assert got_pred == want_pred
            assert np.max(np.abs(got_scores - want_scores)) < 1e-9

    def test_huge_tau_reduces_to_majority_vote(self, rng):
        """As tau -> inf every neighbor weight tends to e^0 = 1, so the
        prediction must equal the plain majority among the k nearest."""
        index = [record(rng.standard_normal(4), label=int(l), ref=i)
                 for i, l in enumerate(rng.integers(0, 3, size=30))]
        cfg = KnnConfig(k=9, tau=1e6)
        for _ in range(10):
            q = record(rng.standard_normal(4))
            pred, _ = knn_classify(q, index, cfg)
            sims = np.array([r.vector @ q.vector for r in index])
            top = np.argsort(-sims, kind="stable")[:9]
            votes = np.bincount([index[i].label for i in top], minlength=3)
            assert votes[pred] == votes.max()

    def test_tiny_tau_follows_single_nearest(self, rng):
        index = [record([1.0, 0.0], label=0), record([0.9, 0.1], label=1),
                 record([0.0, 1.0], label=1)]
        pred, _ = knn_classify(record([1.0, 0.05]), index,
                               KnnConfig(k=3, tau=1e-3))
        assert pred == 0

    def test_tie_breaks_to_lowest_class(self):
        v = [1.0, 0.0]
        index = [record(v, label=2), record(v, label=1)]
        pred, scores = knn_classify(record(v), index, KnnConfig(k=2, tau=0.07))
        assert scores[1] == scores[2]
        assert pred == 1

    def test_k_capped_at_index_size(self):
        index = [record([1.0, 0.0], label=0)]
        pred, _ = knn_classify(record([1.0, 0.0]), index, KnnConfig(k=20))
        assert pred == 0

    def test_errors(self):
        with pytest.raises(RetrievalError):
            knn_classify(record([1.0]), [])
        with pytest.raises(RetrievalError, match="dims"):
            knn_classify(record([1.0, 0.0, 0.0]), [record([1.0, 0.0])])
        with pytest.raises(ValueError):
            KnnConfig(k=0)
        with pytest.raises(ValueError):
            KnnConfig(tau=0.0)

    def test_rotation_invariance(self, rng):
        """Dot products are preserved by orthogonal maps, so predictions
        and scores must be identical after rotating every vector."""
        d = 6
        a = rng.standard_normal((d, d))
        q_rot, _ = np.linalg.qr(a)
        index = [record(rng.standard_normal(d), label=int(l), ref=i)
                 for i, l in enumerate(rng.integers(0, 4, size=25))]
        rotated = [FeatureRecord(vector=q_rot @ r.vector, label=r.label,
                                 modality=r.modality, sample_ref=r.sample_ref)
                   for r in index]
        for _ in range(5):
            q = record(rng.standard_normal(d))
            qr = FeatureRecord(vector=q_rot @ q.vector, label=q.label,
                               modality=q.modality, sample_ref=q.sample_ref)
            p1, s1 = knn_classify(q, index)
            p2, s2 = knn_classify(qr, rotated)
            assert p1 == p2
            # scores pass through exp(s/tau); compare with relative tolerance
            assert np.allclose(s1, s2, rtol=1e-9)


class TestKnnAccuracy:
    def test_perfect_and_chance_extremes(self, rng):
        anchors = np.eye(3)
        index = [record(anchors[c] + 0.01 * rng.standard_normal(3), label=c, ref=i)
                 for i in range(30) for c in range(3)]
        queries = [record(anchors[c] + 0.01 * rng.standard_normal(3), label=c)
                   for c in range(3) for _ in range(5)]
        assert knn_accuracy(queries, index, KnnConfig(k=5, tau=0.07)) == 1.0


class TestPooling:
    def test_mean_and_max(self, rng):
        g = rng.standard_normal((2, 2, 3, 3, 4))
        assert np.allclose(pool_grid(g, "mean"), g.mean(axis=(1, 2, 3)))
        assert np.allclose(pool_grid(g, "max"), g.max(axis=(1, 2, 3)))
        with pytest.raises(ValueError):
            pool_grid(g, "sum")


class TestExtractFeatures:
    @pytest.fixture(scope="class")
    def model(self):
        from trimodal.model import MultiModalModel
        from trimodal.patch_embed import PatchSpec
        from trimodal.trunk import TrunkConfig
        return MultiModalModel(PatchSpec(2, 4, 4, 16), TrunkConfig(),
                               {"di": (8, 0.0), "dv": (8, 0.0)}, seed=5)

    def test_unit_norm_and_alignment(self, model):
        from trimodal.data import SyntheticWorld, gen_synthetic
        from trimodal.patch_embed import IMAGE, VIDEO
        world = SyntheticWorld(seed=2)
        samples = (gen_synthetic(world, "di", IMAGE, 3)
                   + gen_synthetic(world, "dv", VIDEO, 2))
        records = extract_features(model, samples)
        assert len(records) == 5
        for i, r in enumerate(records):
            assert abs(np.linalg.norm(r.vector) - 1.0) < 1e-9
            assert r.sample_ref == i
            assert r.label == samples[i].label
            assert r.modality == samples[i].modality

    def test_mixed_order_matches_single_modality_order(self, model):
        """Grouping by shape inside extract_features must not change any
        vector relative to extracting each modality alone."""
        from trimodal.data import SyntheticWorld, gen_synthetic
        from trimodal.patch_embed import IMAGE, VIDEO
        world = SyntheticWorld(seed=2)
        imgs = gen_synthetic(world, "di", IMAGE, 2)
        vids = gen_synthetic(world, "dv", VIDEO, 2)
        mixed = extract_features(model, [vids[0], imgs[0], vids[1], imgs[1]])
        alone = (extract_features(model, imgs), extract_features(model, vids))
        assert np.allclose(mixed[1].vector, alone[0][0].vector, atol=1e-6)
        assert np.allclose(mixed[2].vector, alone[1][1].vector, atol=1e-6)


class TestCrossModalRetrieve:
    def test_ranking_descends_and_positions_correct(self, rng):
        db = [record(rng.standard_normal(4), label=i % 2, ref=i)
              for i in range(10)]
        queries = [record(rng.standard_normal(4)) for _ in range(3)]
        results = cross_modal_retrieve(queries, db, top_n=4)
        for q, ranked in zip(queries, results):
            sims = [s for _, s, _ in ranked]
            assert sims == sorted(sims, reverse=True)
            for pos, sim, label in ranked:
                assert abs(db[pos].vector @ q.vector - sim) < 1e-12
                assert db[pos].label == label

    def test_empty_database(self):
        with pytest.raises(RetrievalError):
            cross_modal_retrieve([record([1.0])], [], top_n=1)


class TestFeatureIndexIO:
    def test_roundtrip(self, tmp_path, rng):
        records = [record(rng.standard_normal(5), label=i % 3,
                          modality="video" if i % 2 else "image", ref=i)
                   for i in range(7)]
        stem = str(tmp_path / "index")
        save_feature_index(stem, records, meta={"note": "x"})
        loaded = load_feature_index(stem)
        assert len(loaded) == 7
        for a, b in zip(records, loaded):
            assert np.array_equal(a.vector, b.vector)
            assert (a.label, a.modality, a.sample_ref) == \
                   (b.label, b.modality, b.sample_ref)

    def test_kind_mismatch(self, tmp_path):
        from trimodal.serialize import save_container
        stem = str(tmp_path / "ckpt")
        save_container(stem, {"a": np.zeros(2)}, meta={}, kind="checkpoint")
        with pytest.raises(ValueError, match="checkpoint"):
            load_feature_index(stem)
