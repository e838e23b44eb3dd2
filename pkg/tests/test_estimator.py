import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from convseq.data import DataError
from convseq.estimator import ConvSeqRecommender, check_interactions
from convseq.metrics import evaluate
from convseq.tensor import ConfigurationError


def make_records(users=8, items=24, events=7, stride=5):
    records = []
    for u in range(users):
        for step in range(events):
            item = (u * stride + step) % items
            records.append({"user": f"u{u}", "item": f"i{item}",
                            "ts": 86400 * (5 + u + 2 * step),
                            "attrs": [float(item % 4), float(item % 3)]})
    return records


def fast_estimator(**overrides):
    settings = dict(sequence_length=6, embedding=8, schedule=((2, 2), (3, 3)),
                    batch_size=8, learning_rate=1e-2, dropout_rate=0.0,
                    weight_decay=0.0, max_epochs=3, n_train=6, n_eval=6,
                    seed=11)
    settings.update(overrides)
    return ConvSeqRecommender(**settings)


@pytest.fixture(scope="module")
def fitted():
    return fast_estimator().fit(make_records())


class TestSklearnProtocol:
    def test_get_params_covers_constructor(self):
        params = ConvSeqRecommender().get_params()
        assert params["sequence_length"] == 50
        assert params["schedule"] == ((2, 2), (5, 5), (7, 7))
        assert params["learning_rate"] == 1e-4
        assert "frequent_count" in params

    def test_set_params_roundtrip(self):
        est = ConvSeqRecommender().set_params(embedding=16, seed=3)
        assert est.embedding == 16
        assert est.seed == 3

    def test_clone_is_unfitted_with_equal_params(self, fitted):
        fresh = clone(fitted)
        assert fresh.get_params() == fitted.get_params()
        assert not hasattr(fresh, "model_")

    def test_constructor_defers_validation(self):
        est = ConvSeqRecommender(batch_size=0)
        with pytest.raises(ConfigurationError):
            est.fit(make_records())


class TestFit:
    def test_fitted_attributes(self, fitted):
        assert hasattr(fitted, "model_")
        assert len(fitted.history_) == 3
        assert fitted.best_epoch_ >= 0
        assert 0.0 <= fitted.best_ndcg_ <= 1.0
        assert fitted.n_features_in_ == 2

    def test_path_and_records_agree(self, fitted, tmp_path):
        path = tmp_path / "data.jsonl"
        with open(path, "w") as fh:
            for rec in make_records():
                fh.write(json.dumps(rec) + "\n")
        from_path = fast_estimator().fit(str(path))
        ours = dict((p.name, p.value.data) for p in fitted.model_.parameters())
        theirs = dict((p.name, p.value.data)
                      for p in from_path.model_.parameters())
        assert ours.keys() == theirs.keys()
        for name in ours:
            np.testing.assert_array_equal(ours[name], theirs[name])

    def test_refit_resets_state(self, fitted):
        est = fast_estimator(max_epochs=2).fit(make_records())
        assert len(est.history_) == 2
        est.fit(make_records())
        assert len(est.history_) == 2


class TestPredict:
    def test_predict_returns_one_item_per_user(self, fitted):
        preds = fitted.predict()
        assert preds.shape == (8,)
        known = set(fitted.dataset_.vocab.dense_to_item)
        assert set(preds) <= known

    def test_predict_for_named_users(self, fitted):
        preds = fitted.predict(["u0", "u3"])
        assert len(preds) == 2

    def test_top_k_rows_are_distinct_and_unconsumed(self, fitted):
        rows = fitted.predict_top_k(["u2"], k=5)
        assert len(rows) == 1 and len(rows[0]) == 5
        assert len(set(rows[0])) == 5
        seq = next(s for s in fitted.dataset_.sequences if s.user_id == "u2")
        consumed = {fitted.dataset_.vocab.dense_to_item[i] for i in seq.items}
        target = fitted.dataset_.vocab.dense_to_item[seq.items[seq.holdout[1]]]
        for key in rows[0]:
            assert key not in consumed or key == target

    def test_unknown_user(self, fitted):
        with pytest.raises(DataError, match="u99"):
            fitted.predict(["u99"])

    def test_unfitted_predict(self):
        with pytest.raises(NotFittedError):
            ConvSeqRecommender().predict()


class TestScore:
    def test_score_matches_direct_evaluation(self, fitted):
        expected = evaluate(fitted.model_, fitted.dataset_,
                            protocol=fitted.n_eval, k=10, seed=fitted.seed,
                            mode="test")
        assert fitted.score() == expected.ndcg_at_k

    def test_score_is_a_probability(self, fitted):
        assert 0.0 <= fitted.score() <= 1.0


class TestCheckInteractions:
    def test_valid_records_pass_through(self):
        records = make_records(users=2, events=3)
        assert check_interactions(records) == records

    def test_empty(self):
        with pytest.raises(DataError, match="no interaction"):
            check_interactions([])

    def test_non_dict_entry(self):
        with pytest.raises(DataError, match="records\\[1\\]"):
            check_interactions([{"user": "a", "item": "b", "ts": 1},
                                ("a", "b", 2)])

    def test_missing_field_names_index(self):
        with pytest.raises(DataError, match="records\\[0\\].*'ts'"):
            check_interactions([{"user": "a", "item": "b"}])

    def test_negative_timestamp(self):
        with pytest.raises(DataError, match="negative"):
            check_interactions([{"user": "a", "item": "b", "ts": -4}])

    def test_non_numeric_timestamp(self):
        with pytest.raises(DataError, match="not an integer"):
            check_interactions([{"user": "a", "item": "b", "ts": "soon"}])

    def test_ragged_attrs(self):
        with pytest.raises(DataError, match="flat list"):
            check_interactions([{"user": "a", "item": "b", "ts": 1,
                                 "attrs": [[1.0], [2.0]]}])

    def test_non_finite_attrs(self):
        with pytest.raises(DataError, match="finite"):
            check_interactions([{"user": "a", "item": "b", "ts": 1,
                                 "attrs": [np.nan]}])
