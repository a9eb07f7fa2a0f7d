import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsloc.data import SynthConfig, synth_dataset
from wsloc.diffcore import Tensor, grad_check, resize_linear
from wsloc.errors import InvalidArgument
from wsloc.ilg import (
    IlgConfig, IlgModel, csc_loss, fuse_cas, generate_initial_labels, ilg_total_loss, initial_labels,
    sc_loss, train_ilg,
)

from conftest import small_dataset
from gradcases import composed_case


def column_cas(columns):
    """CAS from a list of per-step columns (each of length C+1)."""
    return np.array(columns, dtype=float).T


class TestCrossStream:
    def test_identical_is_exactly_zero(self, rng):
        a = Tensor(rng.uniform(size=(3, 7)))
        assert csc_loss(a, a).item() == 0.0

    def test_constant_gap(self, rng):
        a = rng.uniform(0.2, 0.8, size=(3, 7))
        assert csc_loss(Tensor(a), Tensor(a + 0.1)).item() == pytest.approx(0.1)

    def test_symmetric(self, rng):
        a, b = Tensor(rng.uniform(size=(3, 5))), Tensor(rng.uniform(size=(3, 5)))
        assert csc_loss(a, b).item() == csc_loss(b, a).item()

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            csc_loss(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5))))


class TestMultiResolution:
    @given(st.integers(2, 30), st.floats(0.5, 2.0))
    def test_constant_maps(self, length, s):
        a = Tensor(np.full((3, length), 0.3))
        a_hat = Tensor(np.full((3, max(1, round(s * length))), 0.5))
        assert sc_loss(a, a_hat, s).item() == pytest.approx(0.2)

    def test_unit_scale_with_shared_network(self, rng):
        model = IlgModel(4, 2, 8, seed=1)
        x = Tensor(rng.normal(size=(4, 12)))
        cas = model.rgb.suppressed_cas(x)
        cas_hat = model.rgb.suppressed_cas(resize_linear(x, 1.0))
        assert sc_loss(cas, cas_hat, 1.0).item() <= 1e-12

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgument):
            sc_loss(Tensor(np.zeros((3, 10))), Tensor(np.zeros((3, 10))), 2.0)

    def test_non_negative(self, rng):
        for s in (0.5, 0.8, 1.7):
            a = Tensor(rng.uniform(size=(3, 10)))
            b = Tensor(rng.uniform(size=(3, max(1, round(s * 10)))))
            assert sc_loss(a, b, s).item() >= 0


class TestTotalLoss:
    def setup_method(self):
        self.ds = small_dataset()
        self.model = IlgModel(self.ds.dim, self.ds.class_count, 8, seed=2)
        self.record = self.ds.records[0]

    def test_zero_weights_is_backbone_sum(self):
        config = IlgConfig(alpha=0.0, beta=0.0, gamma=0.0)
        total, parts = ilg_total_loss(self.record, self.model, 1.3, config)
        rgb = self.model.rgb.loss(self.record.rgb, self.record.video_labels)
        flow = self.model.flow.loss(self.record.flow, self.record.video_labels)
        assert total.item() == pytest.approx(rgb.item() + flow.item(), rel=1e-12)
        assert set(parts) == {"bas_rgb", "bas_flow"}

    def test_unit_scale(self):
        total, parts = ilg_total_loss(self.record, self.model, 1.0)
        assert parts["sc_rgb"].item() <= 1e-12 and parts["sc_flow"].item() <= 1e-12
        expected = parts["bas_rgb"].item() + parts["bas_flow"].item() + 0.5 * parts["csc"].item()
        assert total.item() == pytest.approx(expected, rel=1e-12)

    def test_weighted_sum_of_parts(self):
        config = IlgConfig(alpha=0.3, beta=0.2, gamma=0.7)
        total, p = ilg_total_loss(self.record, self.model, 0.7, config)
        expected = (p["bas_rgb"].item() + p["bas_flow"].item() + 0.3 * p["csc"].item()
                    + 0.2 * p["sc_rgb"].item() + 0.7 * p["sc_flow"].item())
        assert total.item() == pytest.approx(expected, rel=1e-12)


class TestGradients:
    # test points keep every difference at least 0.1 away from the |x| kink

    @pytest.mark.parametrize("name", ["cross_stream", "multi_resolution", "joint"])
    @pytest.mark.parametrize("seed", range(10))
    def test_loss(self, name, seed):
        assert grad_check(*composed_case(name, seed)) < 1e-4


class TestTraining:
    def test_zero_iterations(self):
        ds = small_dataset()
        model = IlgModel(ds.dim, ds.class_count, 8, seed=0)
        before = [p.data.tobytes() for p in model.params()]
        out, trace = train_ilg(ds, IlgConfig(iterations=0, hidden=8), model)
        assert trace == [] and [p.data.tobytes() for p in out.params()] == before

    def test_same_seed_same_params(self):
        ds = small_dataset()
        config = IlgConfig(iterations=15, hidden=8, seed=4)
        a, _ = train_ilg(ds, config)
        b, _ = train_ilg(ds, config)
        assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.params(), b.params()))

    def test_trace_records_scale_in_range(self):
        _, trace = train_ilg(small_dataset(), IlgConfig(iterations=20, hidden=8))
        assert len(trace) == 20
        assert all(0.5 <= row["s"] <= 2.0 for row in trace)
        assert {"loss", "bas_rgb", "bas_flow", "csc", "sc_rgb", "sc_flow", "video"} <= set(trace[0])

    def test_loss_goes_down(self):
        ds = synth_dataset(SynthConfig(snr=4, videos=12, seed=0))
        _, trace = train_ilg(ds, IlgConfig(iterations=300, hidden=16, lr=1e-3))
        losses = np.array([row["loss"] for row in trace])
        assert losses[-50:].mean() < losses[:50].mean()

    def test_empty_dataset(self):
        from wsloc.data import Dataset
        with pytest.raises(InvalidArgument):
            train_ilg(Dataset(2, ()), IlgConfig(iterations=1))

    def test_streams_do_not_share_parameters(self):
        model = IlgModel(4, 2, 8)
        rgb, flow = {id(p) for p in model.rgb.params()}, {id(p) for p in model.flow.params()}
        assert not rgb & flow
        assert not any(np.array_equal(p.data, q.data) for p, q in zip(model.rgb.params(), model.flow.params()))

    def test_checkpoint_round_trip(self, tmp_path):
        model = IlgModel(4, 2, 8, seed=3)
        model.save(tmp_path / "ilg.ckpt")
        back = IlgModel.load(tmp_path / "ilg.ckpt")
        assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(model.params(), back.params()))


class TestFusion:
    def test_equal_inputs(self, rng):
        x = rng.uniform(size=(3, 5))
        np.testing.assert_allclose(fuse_cas(x, x), x)

    def test_weighted_cell(self):
        assert fuse_cas([[0.4]], [[0.8]])[0, 0] == pytest.approx(0.64)

    def test_stays_in_unit_interval(self, rng):
        out = fuse_cas(rng.uniform(size=(3, 9)), rng.uniform(size=(3, 9)))
        assert out.min() >= 0 and out.max() <= 1

    def test_uniform_rgb_defers_to_flow(self, rng):
        flow = rng.dirichlet(np.ones(4), size=10).T
        out = fuse_cas(np.full((4, 10), 0.25), flow)
        np.testing.assert_array_equal(out.argmax(axis=0), flow.argmax(axis=0))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            fuse_cas(np.zeros((3, 4)), np.zeros((3, 5)))


class TestInitialLabels:
    def test_confident_foreground(self):
        ls = initial_labels(column_cas([[0.05, 0.2, 0.75]]), {2})
        assert ls.as_dict() == {0: 2}

    def test_low_foreground_mass_is_background(self):
        ls = initial_labels(column_cas([[0.95, 0.02, 0.03]]), {1})
        assert ls.as_dict() == {0: 0}

    def test_ambiguous_excluded(self):
        ls = initial_labels(column_cas([[0.5, 0.5, 0.0]]), {1})
        assert len(ls) == 0

    def test_threshold_is_strict(self):
        assert len(initial_labels(column_cas([[0.3, 0.7, 0.0]]), {1})) == 0

    def test_absent_class_never_assigned(self):
        ls = initial_labels(column_cas([[0.0, 0.9, 0.1], [0.1, 0.1, 0.8]]), {2})
        assert ls.as_dict() == {1: 2}

    def test_ties_pick_lowest_class(self):
        ls = initial_labels(column_cas([[0.0, 0.5, 0.5]]), {1, 2}, high=0.4)
        assert ls.as_dict() == {0: 1}

    @given(st.integers(0, 10_000), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
    def test_lower_threshold_never_shrinks(self, seed, h1, h2):
        rng = np.random.default_rng(seed)
        cas = rng.dirichlet(np.ones(4) * 0.5, size=20).T
        labels = {1, 3}
        lo, hi = sorted((h1, h2))
        small, large = initial_labels(cas, labels, high=hi), initial_labels(cas, labels, high=lo)
        assert set(small.indices.tolist()) <= set(large.indices.tolist())
        assert len(large) <= 20
        assert set(large.classes[large.classes > 0].tolist()) <= labels

    def test_generate_for_dataset(self):
        ds = small_dataset()
        model = IlgModel(ds.dim, ds.class_count, 8, seed=0)
        labels, cas = generate_initial_labels(model, ds)
        assert set(labels) == set(cas) == {r.video_id for r in ds}
        for r in ds:
            assert cas[r.video_id].shape == (ds.class_count + 1, r.length)
            np.testing.assert_allclose(cas[r.video_id].sum(axis=0), 1.0, atol=1e-12)
