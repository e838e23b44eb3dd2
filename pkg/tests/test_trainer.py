import json

import numpy as np
import pytest

from convseq.data import load_dataset, make_training_example
from convseq.gradcheck import grad_check
from convseq.model import Model
from convseq.optim import GradientError, adam_step, zero_grads
from convseq.tensor import ConfigurationError, Tensor, add, no_grad
from convseq.trainer import (
    TrainConfig, bce_loss, build_model, fit, score, train_epoch, validation_metrics,
    write_training_log)


def write_walk_dataset(path, users=8, items=24, events=7, stride=5):
    with open(path, "w") as fh:
        for u in range(users):
            base = 1_580_000_000 + u * 7000
            for step in range(events):
                item = (u * stride + step) % items
                fh.write(json.dumps({
                    "user": f"u{u}", "item": f"i{item}",
                    "ts": base + step * 100_000,
                    "attrs": [np.cos(item / 5.0), (item % 4) / 3.0],
                }) + "\n")
    return path


@pytest.fixture
def dataset(tmp_path):
    return load_dataset(write_walk_dataset(tmp_path / "walks.jsonl"), frequent_count=30)


def tiny_config(**kwargs):
    defaults = dict(sequence_length=6, embedding=8, schedule=((2, 2), (3, 3)),
                    batch_size=8, learning_rate=1e-2, dropout_rate=0.0,
                    weight_decay=0.0, max_epochs=3, early_stop_patience=100,
                    n_train=6, n_eval=6, seed=11)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


class TestConfigValidation:
    @pytest.mark.parametrize("field,value", [
        ("batch_size", 0),
        ("dropout_rate", 1.0),
        ("dropout_rate", -0.1),
        ("n_train", 0),
        ("learning_rate", 0.0),
        ("sequence_length", 0),
        ("embedding", 0),
        ("max_epochs", 0),
        ("early_stop_patience", -1),
    ])
    def test_rejects_bad_field(self, field, value):
        config = tiny_config(**{field: value})
        with pytest.raises(ConfigurationError):
            config.validate()

    def test_rejects_conflicting_ablations(self):
        with pytest.raises(ConfigurationError):
            tiny_config(single_conv=True, avgpool_only=True).validate()

    def test_accepts_defaults(self):
        TrainConfig().validate()


class TestScore:
    def test_self_dot_product_is_one(self):
        state = Tensor(np.array([[0.6, 0.8]]))
        targets = Tensor(np.array([[0.6, 0.8], [0.8, -0.6], [1.0, 0.0]]))
        logits = score(state, targets).data.ravel()
        assert logits[0] == pytest.approx(1.0)
        assert logits[1] == pytest.approx(0.0)  # orthogonal row

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        state = Tensor(rng.normal(size=(1, 5)))
        targets = rng.normal(size=(7, 5))
        perm = rng.permutation(7)
        plain = score(state, Tensor(targets)).data.ravel()
        shuffled = score(state, Tensor(targets[perm])).data.ravel()
        np.testing.assert_allclose(shuffled, plain[perm], atol=1e-14)

    def test_loss_invariant_under_negative_permutation(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=9)
        permuted = np.concatenate([[logits[0]], rng.permutation(logits[1:])])
        a = bce_loss(Tensor(logits)).data
        b = bce_loss(Tensor(permuted)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_bce_closed_form(self):
        assert bce_loss(Tensor(np.zeros(2))).data == pytest.approx(1.3862943611198906)


class TestTrainEpoch:
    def test_mean_loss_decreases_on_toy_data(self, dataset):
        config = tiny_config()
        model = build_model(dataset, config)
        first = train_epoch(model, dataset, config, np.random.default_rng(0))
        for epoch in range(6):
            last = train_epoch(model, dataset, config, np.random.default_rng(epoch + 1))
        assert last < first

    def test_fixed_seed_gives_identical_trajectory(self, dataset):
        config = tiny_config()
        losses = []
        for _ in range(2):
            model = build_model(dataset, config)
            run = [train_epoch(model, dataset, config, np.random.default_rng([9, e]))
                   for e in range(3)]
            losses.append(run)
        assert losses[0] == losses[1]

    def test_nan_loss_aborts_with_diagnostics(self, dataset):
        config = tiny_config()
        model = build_model(dataset, config)
        model.encoder.w_q.value.data[0, 0] = np.nan
        with pytest.raises(GradientError, match="non-finite"):
            train_epoch(model, dataset, config, np.random.default_rng(0))

    def test_candidate_count_honors_n_train(self, dataset):
        config = tiny_config(n_train=9)
        seen = []

        class Spy(Model):
            def forward_example(self, example, ds, *args, **kwargs):
                seen.append(len(example.candidate_items))
                return super().forward_example(example, ds, *args, **kwargs)

        model = Spy(dataset.attr_width, dataset.vocab.table_rows, 8,
                    [(2, 2), (3, 3)], 6, seed=0)
        train_epoch(model, dataset, config, np.random.default_rng(0))
        assert seen and all(n == 10 for n in seen)

    def test_descent_on_frozen_batch(self, dataset):
        # a single small step decreases the frozen-batch loss on average
        deltas = []
        for seed in range(10):
            config = tiny_config(seed=seed, learning_rate=1e-4)
            model = build_model(dataset, config)
            rng = np.random.default_rng([seed, 77])
            examples = [make_training_example(seq, config.sequence_length,
                                              config.n_train, rng, dataset)
                        for seq in dataset.sequences]
            examples = [e for e in examples if e is not None]

            def batch_loss(training):
                total = None
                for example in examples:
                    state, cands = model.forward_example(example, dataset,
                                                         training=training)
                    loss = bce_loss(score(state, cands))
                    total = loss if total is None else add(total, loss)
                return total

            params = model.parameters()
            zero_grads(params)
            before = batch_loss(training=True)
            before.backward(seed=1.0 / len(examples))
            adam_step(params, config.learning_rate)
            with no_grad():
                after = batch_loss(training=False)
            deltas.append(after.data.item() - before.data.item())
        assert np.mean(deltas) < 0

    def test_end_to_end_gradient_matches_finite_differences(self, tmp_path):
        path = write_walk_dataset(tmp_path / "two.jsonl", users=2, items=12,
                                  events=5, stride=6)
        dataset = load_dataset(path, frequent_count=12)
        config = tiny_config(sequence_length=10, n_train=3)
        model = build_model(dataset, config)
        rng = np.random.default_rng(5)
        examples = [make_training_example(seq, 10, 3, rng, dataset)
                    for seq in dataset.sequences]

        def f():
            total = None
            for example in examples:
                state, cands = model.forward_example(example, dataset)
                loss = bce_loss(score(state, cands))
                total = loss if total is None else add(total, loss)
            return total

        err = grad_check(f, model.parameters(), step=1e-6)
        assert err < 1e-3

    def test_one_user_memorization(self, tmp_path):
        path = tmp_path / "one.jsonl"
        with open(path, "w") as fh:
            for step in range(6):
                fh.write(json.dumps({"user": "hero", "item": f"i{step}",
                                     "ts": 1_600_000_000 + step * 86_400,
                                     "attrs": [step / 5.0]}) + "\n")
            for u in range(3):
                for step in range(3):
                    item = 6 + u * 3 + step
                    fh.write(json.dumps({"user": f"f{u}", "item": f"i{item}",
                                         "ts": 1_600_500_000 + step * 86_400,
                                         "attrs": [item / 5.0]}) + "\n")
        dataset = load_dataset(path, frequent_count=20)
        config = tiny_config(embedding=16, batch_size=4, n_train=5, n_eval=5)
        model = build_model(dataset, config)
        for epoch in range(120):
            loss = train_epoch(model, dataset, config,
                               np.random.default_rng([config.seed, 0, epoch]))
        assert loss < 0.05


class TestFit:
    def test_zero_patience_stops_at_first_miss(self, dataset):
        # a vanishing learning rate freezes the validation metric, so the
        # second epoch cannot improve on the first
        config = tiny_config(learning_rate=1e-12, max_epochs=30,
                             early_stop_patience=0)
        result = fit(dataset, config)
        assert len(result.history) == 2
        assert result.best_epoch == 0

    def test_best_parameters_are_restored(self, dataset):
        config = tiny_config(max_epochs=6)
        result = fit(dataset, config)
        hr, ndcg = validation_metrics(result.model, dataset, config)
        assert ndcg == pytest.approx(result.best_ndcg)
        assert result.best_ndcg == max(r.val_ndcg10 for r in result.history)

    def test_history_and_log_columns(self, dataset, tmp_path):
        config = tiny_config(max_epochs=2)
        result = fit(dataset, config)
        log_path = tmp_path / "train_log.csv"
        write_training_log(log_path, result.history)
        lines = log_path.read_text().strip().splitlines()
        assert lines[0] == "epoch,mean_loss,val_hr10,val_ndcg10,seconds,peak_bytes"
        assert len(lines) == 1 + len(result.history)
        assert all(r.peak_bytes > 0 for r in result.history)

    def test_fit_is_deterministic(self, dataset):
        config = tiny_config(max_epochs=3)
        a = fit(dataset, config)
        b = fit(dataset, config)
        assert [r.mean_loss for r in a.history] == [r.mean_loss for r in b.history]
        assert [r.val_ndcg10 for r in a.history] == [r.val_ndcg10 for r in b.history]
        for p, q in zip(a.model.parameters(), b.model.parameters()):
            np.testing.assert_array_equal(p.value.data, q.value.data)
