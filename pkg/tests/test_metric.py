import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abdtrauma.errors import ContractError, DegenerateInputError
from abdtrauma.metric import any_injury, evaluate, final_score, group_log_loss, normalize_probs
from abdtrauma.schema import LabelGroup, LabelSchema, default_schema

from oracles import metric_oracle, random_instance


def schema_from(groups):
    return LabelSchema(tuple(LabelGroup(n, tuple(f"s{i}" for i in range(k)), h, tuple(w)) for n, k, h, w in groups))


class TestNormalize:
    @pytest.mark.parametrize(
        "raw, expected",
        [
            ([0.25, 0.25, 0.5], [0.25, 0.25, 0.5]),
            ([1, 1, 2], [0.25, 0.25, 0.5]),
            ([0.2, 0.2, 0.1], [0.4, 0.4, 0.2]),
        ],
    )
    def test_examples(self, raw, expected):
        np.testing.assert_allclose(normalize_probs(raw), expected, rtol=0, atol=1e-15)

    def test_all_zero_raises(self):
        with pytest.raises(DegenerateInputError):
            normalize_probs([0.0, 0.0])

    def test_uniform_fallback_flag(self):
        np.testing.assert_array_equal(normalize_probs([0.0, 0.0], uniform_fallback=True), [0.5, 0.5])

    def test_negative_rejected(self):
        with pytest.raises(ContractError):
            normalize_probs([-0.1, 1.0])


class TestGroupLogLoss:
    def test_perfect(self):
        assert group_log_loss([1], [1 - 1e-15], [1]) == pytest.approx(0, abs=1e-14)

    def test_symmetric(self):
        assert group_log_loss([1, 0], [0.5, 0.5], [1, 1]) == pytest.approx(math.log(2), abs=1e-15)

    def test_hand_value(self):
        # -(ln 0.9 + ln 0.8) / 2
        assert group_log_loss([1, 0], [0.9, 0.2], [1, 1]) == pytest.approx(0.164252033486018, abs=1e-6)

    def test_weights_inside_sum_divide_by_n(self):
        loss = group_log_loss([1, 0], [0.9, 0.2], [2, 1])
        assert loss == pytest.approx(-(2 * math.log(0.9) + math.log(0.8)) / 2, abs=1e-15)
        loss_w = group_log_loss([1, 0], [0.9, 0.2], [2, 1], normalize_weights=True)
        assert loss_w == pytest.approx(-(2 * math.log(0.9) + math.log(0.8)) / 3, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            group_log_loss([1, 0], [0.5], [1, 1])

    @given(st.lists(st.tuples(st.booleans(), st.floats(0.001, 0.999)), min_size=1, max_size=20))
    def test_nonnegative(self, pairs):
        y = [float(a) for a, _ in pairs]
        p = [b for _, b in pairs]
        assert group_log_loss(y, p, [1.0] * len(y)) >= 0


class TestAnyInjury:
    schema = LabelSchema(tuple(LabelGroup(f"g{i}", ("h", "x")) for i in range(3)))

    def test_all_healthy(self):
        patient = {g: np.array([1.0, 0.0]) for g in self.schema.names}
        assert any_injury(patient, self.schema) == 0.0

    def test_max_of_complements(self):
        patient = {"g0": np.array([0.9, 0.1]), "g1": np.array([0.7, 0.3]), "g2": np.array([0.8, 0.2])}
        assert any_injury(patient, self.schema) == pytest.approx(0.3, abs=1e-15)

    def test_boundary(self):
        schema = LabelSchema((LabelGroup("a", ("h", "x")),))
        assert any_injury({"a": np.array([0.0, 1.0])}, schema) == 1.0

    @given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(0, 2), st.floats(0, 1))
    def test_monotone_in_healthy(self, healthy, which, bump):
        patient = {f"g{i}": np.array([h, 1 - h]) for i, h in enumerate(healthy)}
        base = any_injury(patient, self.schema)
        raised = dict(patient)
        h = min(1.0, healthy[which] + bump)
        raised[f"g{which}"] = np.array([h, 1 - h])
        assert 0.0 <= base <= 1.0
        assert any_injury(raised, self.schema) <= base


class TestFinalScore:
    def test_mean(self):
        assert final_score([0.2, 0.4], 0.3) == pytest.approx(0.3, abs=1e-15)

    def test_single(self):
        assert final_score([0.7], 0.7) == 0.7

    def test_empty(self):
        with pytest.raises(ContractError):
            final_score([], 0.1)

    def test_random_against_loop(self):
        rng = random.Random(3)
        for _ in range(50):
            losses = [rng.uniform(0, 3) for _ in range(rng.randint(1, 6))]
            any_loss = rng.uniform(0, 3)
            expected = 0.0
            for v in losses + [any_loss]:
                expected += v
            expected /= len(losses) + 1
            assert abs(final_score(losses, any_loss) - expected) < 1e-12

    def test_group_order_invariant(self):
        assert final_score([0.1, 0.5, 0.9], 0.2) == pytest.approx(final_score([0.9, 0.1, 0.5], 0.2), abs=1e-15)


class TestEvaluate:
    def test_perfect_predictions(self):
        schema = default_schema()
        rng = np.random.default_rng(0)
        truth, preds = {}, {}
        for i in range(6):
            sid = f"s{i}"
            truth[sid] = {g.name: int(rng.integers(g.n_states)) for g in schema.groups}
            preds[sid] = {g.name: np.eye(g.n_states)[truth[sid][g.name]] for g in schema.groups}
        assert evaluate(preds, truth, schema).final_score < 1e-6

    def test_uniform_balanced_binary(self):
        schema = LabelSchema((LabelGroup("a", ("h", "x")),))
        truth = {"s0": {"a": 0}, "s1": {"a": 1}}
        preds = {s: {"a": np.array([0.5, 0.5])} for s in truth}
        rep = evaluate(preds, truth, schema)
        assert rep.group_losses["a"] == pytest.approx(math.log(2), abs=1e-15)

    def test_missing_study_names_id(self):
        schema = LabelSchema((LabelGroup("a", ("h", "x")),))
        with pytest.raises(ContractError, match="s1"):
            evaluate({"s0": {"a": [0.5, 0.5]}}, {"s0": {"a": 0}, "s1": {"a": 1}}, schema)

    @pytest.mark.parametrize("mode", ["study", "study_state"])
    @pytest.mark.parametrize("normalize_weights", [False, True])
    def test_matches_oracle(self, mode, normalize_weights):
        rng = random.Random(11)
        for _ in range(40):
            groups, preds, truth = random_instance(rng)
            rep = evaluate(preds, truth, schema_from(groups), sample_mode=mode, normalize_weights=normalize_weights)
            expected, losses, any_loss = metric_oracle(
                preds, truth, groups, sample_mode=mode, normalize_weights=normalize_weights
            )
            assert abs(rep.final_score - expected) < 1e-9
            assert abs(rep.any_injury_loss - any_loss) < 1e-9
            for (name, *_), loss in zip(groups, losses):
                assert abs(rep.group_losses[name] - loss) < 1e-9

    def test_report_invariant_mean(self):
        rng = random.Random(5)
        groups, preds, truth = random_instance(rng)
        rep = evaluate(preds, truth, schema_from(groups))
        vals = list(rep.group_losses.values()) + [rep.any_injury_loss]
        assert abs(rep.final_score - sum(vals) / len(vals)) < 1e-12
        assert all(v >= 0 for v in vals)
        d = rep.to_dict()
        assert d["settings"]["clip"] == 1e-15
