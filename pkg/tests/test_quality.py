import json

import numpy as np
import pytest

from dsm import quality
from dsm.quality import (
    InvalidModelFile,
    MissingFeature,
    QualityModel,
    SessionRecord,
    SingleClass,
    TooFewRecords,
    build_dataset,
    log_loss,
    loss_gradient,
    predict_risk,
    predict_risk_batch,
    recommend_parameters,
    sigmoid,
    train_logistic,
)


def make_records(n=40, seed=0, constant=None):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        feats = {"a": float(rng.normal()), "b": float(rng.normal(2.0, 3.0))}
        if constant is not None:
            feats["c"] = constant
        label = int(feats["a"] + 0.5 * feats["b"] + rng.normal(0, 0.3) > 1.0)
        records.append(SessionRecord(features=feats, session_id=f"s{i % 5}", t_us=1 + i, label=label))
    # force both classes
    records[0] = SessionRecord(features=records[0].features, session_id="s0", t_us=1, label=0)
    records[1] = SessionRecord(features=records[1].features, session_id="s0", t_us=2, label=1)
    return records


class TestBuildDataset:
    def test_small_valid_dataset(self):
        recs = []
        for i, (a, label) in enumerate([(0.0, 0), (0.1, 0), (3.0, 1), (3.1, 1)] * 5):
            recs.append(SessionRecord(features={"a": a + i * 1e-3}, session_id="s", t_us=i + 1, label=label))
        x, y, names, mu, sigma, dropped = build_dataset(recs)
        assert x.shape == (20, 1)
        assert names == ["a"]
        assert dropped == []

    def test_constant_feature_dropped(self):
        x, y, names, mu, sigma, dropped = build_dataset(make_records(constant=7.0))
        assert dropped == ["c"]
        assert names == ["a", "b"]

    def test_standardized_moments(self):
        x, *_ = build_dataset(make_records(60, seed=3))
        assert np.all(np.abs(x.mean(axis=0)) < 1e-9)
        assert np.all(np.abs(x.std(axis=0) - 1.0) < 1e-9)

    def test_too_few(self):
        with pytest.raises(TooFewRecords):
            build_dataset(make_records()[:10])

    def test_single_class(self):
        recs = [
            SessionRecord(features={"a": float(i)}, session_id="s", t_us=i + 1, label=1)
            for i in range(25)
        ]
        with pytest.raises(SingleClass):
            build_dataset(recs)


class TestTraining:
    def test_initial_bias_gradient_is_zero_when_balanced(self):
        # at w=0, b=0 every p is 0.5, so the bias gradient is mean(0.5 - y) = 0
        x = np.random.default_rng(0).normal(size=(10, 3))
        y = np.array([0, 1] * 5, dtype=float)
        _, gb = loss_gradient(x, y, np.zeros(3), 0.0, 0.0)
        assert abs(gb) < 1e-15

    def test_gradient_matches_central_finite_differences(self):
        rng = np.random.default_rng(42)
        eps = 1e-5
        for _ in range(10):
            n, d = int(rng.integers(5, 30)), int(rng.integers(1, 6))
            x = rng.normal(size=(n, d))
            y = (rng.random(n) < 0.5).astype(float)
            w = rng.normal(size=d)
            b = float(rng.normal())
            l2 = float(rng.choice([0.0, 1e-3, 0.1]))
            gw, gb = loss_gradient(x, y, w, b, l2)
            for j in range(d):
                wp, wm = w.copy(), w.copy()
                wp[j] += eps
                wm[j] -= eps
                fd = (log_loss(x, y, wp, b, l2) - log_loss(x, y, wm, b, l2)) / (2 * eps)
                assert abs(fd - gw[j]) < 1e-6
            fd_b = (log_loss(x, y, w, b + eps, l2) - log_loss(x, y, w, b - eps, l2)) / (2 * eps)
            assert abs(fd_b - gb) < 1e-6

    def test_loss_non_increasing_small_lr(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(50, 4))
        y = (x @ np.array([1.0, -2.0, 0.5, 0.0]) > 0).astype(float)
        _, _, trace = train_logistic(x, y, lr=1e-3, l2=1e-3, epochs=300)
        diffs = np.diff(trace)
        assert (diffs <= 1e-12).all()

    def test_synthetic_recovery_cosine(self):
        rng = np.random.default_rng(7)
        w_true = np.array([2.0, -1.5, 0.8])
        x = rng.normal(size=(2000, 3))
        p = sigmoid(x @ w_true + 0.2)
        y = (rng.random(2000) < p).astype(float)
        w, b, _ = train_logistic(x, y, lr=0.5, l2=1e-4, epochs=2000)
        cos = float(w @ w_true / (np.linalg.norm(w) * np.linalg.norm(w_true)))
        assert cos >= 0.9


class TestPrediction:
    def model(self, w=(0.0, 0.0), b=0.0, threshold=0.7):
        return QualityModel(
            feature_names=["a", "b"],
            mu=np.zeros(2),
            sigma=np.ones(2),
            w=np.array(w, dtype=float),
            b=b,
            threshold=threshold,
        )

    def test_zero_weights_give_half(self):
        assert predict_risk(self.model(), {"a": 123.0, "b": -9.0}) == 0.5

    def test_sigma_of_one(self):
        m = self.model(w=(1.0, 0.0))
        assert predict_risk(m, {"a": 1.0, "b": 0.0}) == pytest.approx(0.73106, abs=1e-5)

    def test_missing_feature(self):
        with pytest.raises(MissingFeature):
            predict_risk(self.model(), {"a": 1.0})

    def test_batch_equals_elementwise(self):
        rng = np.random.default_rng(5)
        m = self.model(w=(0.7, -1.2), b=0.3)
        rows = rng.normal(size=(50, 2))
        batch = predict_risk_batch(m, rows)
        single = [predict_risk(m, {"a": r[0], "b": r[1]}) for r in rows]
        assert np.allclose(batch, single, rtol=0, atol=0)

    def test_monotone_in_positive_weight(self):
        m = self.model(w=(1.5, 0.2), b=-0.4)
        risks = [predict_risk(m, {"a": a, "b": 0.0}) for a in np.linspace(-3, 3, 50)]
        assert all(r2 >= r1 for r1, r2 in zip(risks, risks[1:]))


class TestRecommendation:
    def model(self):
        return QualityModel(
            feature_names=["feed", "rpm"],
            mu=np.array([25.0, 12000.0]),
            sigma=np.array([10.0, 4000.0]),
            w=np.array([2.0, 0.0]),
            b=-1.0,
        )

    @staticmethod
    def predictor(context, rpm, feed):
        return {"feed": feed, "rpm": rpm}

    def test_single_candidate(self):
        cand, risk = recommend_parameters(self.model(), {}, [(9000, 30.0)], self.predictor)
        assert cand == (9000, 30.0)

    def test_tie_breaks_to_lower_feed(self):
        # rpm weight is zero so risk depends only on feed; equal feeds tie on risk
        cand, _ = recommend_parameters(
            self.model(), {}, [(18000, 10.0), (9000, 10.0), (9000, 20.0)], self.predictor
        )
        assert cand == (9000, 10.0)

    def test_equals_brute_force(self):
        m = self.model()
        grid = [(r, f) for r in (6000, 9000, 12000, 15000, 18000) for f in (5.0, 10.0, 20.0, 30.0, 40.0)]
        got_cand, got_risk = recommend_parameters(m, {}, grid, self.predictor)
        best = min(
            ((predict_risk(m, self.predictor({}, r, f)), f, r) for r, f in grid),
        )
        assert got_risk == best[0]
        assert got_cand == (best[2], best[1])

    def test_grid_order_invariance(self):
        m = self.model()
        grid = [(r, f) for r in (6000, 18000) for f in (5.0, 40.0)]
        a = recommend_parameters(m, {}, grid, self.predictor)
        b = recommend_parameters(m, {}, list(reversed(grid)), self.predictor)
        assert a == b


class TestModelIO:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        m = QualityModel(
            feature_names=["a", "b", "c"],
            mu=rng.normal(size=3),
            sigma=np.abs(rng.normal(size=3)) + 0.1,
            w=rng.normal(size=3),
            b=float(rng.normal()),
            threshold=0.7,
            version="v3",
            trained_on=["s1", "s2"],
            created_at="t_us:5",
        )
        path = tmp_path / "model.json"
        quality.save_model(m, path)
        m2 = quality.load_model(path)
        assert m2.feature_names == m.feature_names
        assert m2.mu.tolist() == m.mu.tolist()
        assert m2.sigma.tolist() == m.sigma.tolist()
        assert m2.w.tolist() == m.w.tolist()
        assert m2.b == m.b and m2.threshold == m.threshold
        quality.save_model(m2, tmp_path / "model2.json")
        assert (tmp_path / "model.json").read_bytes() == (tmp_path / "model2.json").read_bytes()

    def test_length_mismatch_rejected(self, tmp_path):
        doc = {
            "version": "v1",
            "feature_names": ["a", "b"],
            "mu": [0.0],
            "sigma": [1.0],
            "w": [0.0],
            "b": 0.0,
            "threshold": 0.7,
            "trained_on": [],
            "created_at": "",
        }
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(InvalidModelFile):
            quality.load_model(path)

    def test_zero_sigma_rejected(self, tmp_path):
        doc = {
            "version": "v1",
            "feature_names": ["a"],
            "mu": [0.0],
            "sigma": [0.0],
            "w": [0.0],
            "b": 0.0,
            "threshold": 0.7,
            "trained_on": [],
            "created_at": "",
        }
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(InvalidModelFile):
            quality.load_model(path)


class TestAuc:
    def test_perfect_separation(self):
        assert quality.auc_score([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_random_is_half(self):
        assert quality.auc_score([0, 1], [0.5, 0.5]) == 0.5

    def test_matches_pairwise_definition(self):
        rng = np.random.default_rng(12)
        y = (rng.random(200) < 0.4).astype(int)
        s = rng.normal(size=200) + y * 0.8
        pos = s[y == 1]
        neg = s[y == 0]
        wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
        want = wins / (len(pos) * len(neg))
        assert quality.auc_score(y, s) == pytest.approx(want, abs=1e-12)


class TestSplit:
    def test_every_fifth_held_out(self):
        train, hold = quality.split_sessions([f"s{i:02d}" for i in range(10)])
        assert hold == ["s04", "s09"]
        assert len(train) == 8
