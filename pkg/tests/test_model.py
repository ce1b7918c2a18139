"""Model init, forward-pass invariants, batching exactness, checkpoints."""

import numpy as np
import pytest

from gridhil.autodiff import Tape
from gridhil.graph import NODE_TYPES, build_graph, disjoint_union
from gridhil.grid import load_bundled_case
from gridhil.model import (ModelConfig, attention_coefficients,
                           expected_param_shapes, forward, init_params,
                           load_params, param_count, predict, save_params)
from support import permuted_case, random_case, small_case

CFG = ModelConfig(hidden=12, layers=2, init_seed=0)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"hidden": 0}, {"layers": 0}, {"leaky_slope": -0.1},
        {"leaky_slope": 1.0},
    ])
    def test_bad_config_rejected(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)


class TestInit:
    def test_shapes_match_declaration(self, params):
        shapes = expected_param_shapes(CFG)
        assert set(params) == set(shapes)
        for name, arr in params.items():
            assert arr.shape == shapes[name]

    def test_deterministic_per_seed(self):
        a = init_params(CFG)
        b = init_params(CFG)
        c = init_params(ModelConfig(hidden=12, layers=2, init_seed=1))
        for name in a:
            assert np.array_equal(a[name], b[name])
        assert any(not np.array_equal(a[n], c[n]) for n in a
                   if not n.endswith(".b"))

    def test_glorot_bounds_and_zero_biases(self, params):
        for name, arr in params.items():
            if name.endswith(".b"):
                assert np.all(arr == 0.0)
            else:
                limit = np.sqrt(6.0 / sum(arr.shape))
                assert np.max(np.abs(arr)) <= limit

    def test_param_count_scales_with_width(self):
        narrow = param_count(init_params(ModelConfig(hidden=4)))
        wide = param_count(init_params(ModelConfig(hidden=8)))
        assert wide > narrow


class TestForward:
    def test_output_shapes(self, params):
        g = build_graph(load_bundled_case())
        y_bus, y_slack = predict(params, g, CFG)
        assert y_bus.shape == (9, 2)
        assert y_slack.shape == (1, 2)

    def test_deterministic(self, params):
        g = build_graph(small_case())
        a = predict(params, g, CFG)
        b = predict(params, g, CFG)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_attention_rows_sum_to_one(self, params):
        g = build_graph(load_bundled_case())
        att = attention_coefficients(params, g, CFG)
        assert set(att) == {f"layer{k}.{r.name}"
                            for k in range(CFG.layers) for r in g.relations}
        for key, alpha in att.items():
            rel = g.relation(key.split(".", 1)[1])
            sums = np.zeros(g.num_nodes(rel.dst_type))
            np.add.at(sums, rel.dst_index, alpha[:, 0])
            covered = np.unique(rel.dst_index)
            assert np.allclose(sums[covered], 1.0, atol=1e-12)

    def test_hidden_states_unit_norm(self, params):
        g = build_graph(load_bundled_case())
        pred = forward(params, g, CFG, Tape(), capture=True)
        for key, h in pred.hidden.items():
            norms = np.linalg.norm(h, axis=1)
            live = norms > 1e-9  # rows fully zeroed by relu stay zero
            assert np.allclose(norms[live], 1.0, atol=1e-9)
            assert live.any()

    def test_permutation_equivariance(self, params):
        rng = np.random.default_rng(17)
        case = random_case(rng)
        shuffled, perm = permuted_case(case, rng)
        y1, s1 = predict(params, build_graph(case), CFG)
        y2, s2 = predict(params, build_graph(shuffled), CFG)
        # perm maps old bus rows to new ones, so y2[perm] realigns with y1.
        assert np.allclose(y2[perm], y1, atol=1e-10, rtol=0.0)
        assert np.allclose(s1, s2, atol=1e-10, rtol=0.0)

    def test_union_pass_equals_independent_passes(self, params):
        cases = [load_bundled_case(), small_case()]
        graphs = [build_graph(c) for c in cases]
        single = [predict(params, g, CFG) for g in graphs]
        y_bus, y_slack = predict(params, disjoint_union(graphs), CFG)
        assert np.allclose(y_bus, np.concatenate([s[0] for s in single]),
                           atol=1e-12, rtol=0.0)
        assert np.allclose(y_slack, np.concatenate([s[1] for s in single]),
                           atol=1e-12, rtol=0.0)

    def test_wrong_shape_rejected(self, params):
        g = build_graph(small_case())
        broken = dict(params)
        broken["head.bus.w"] = np.zeros((3, 2))
        with pytest.raises(ValueError, match="head.bus.w"):
            predict(broken, g, CFG)

    def test_missing_param_rejected(self, params):
        g = build_graph(small_case())
        broken = dict(params)
        del broken["layer0.bus_self.att"]
        with pytest.raises(ValueError, match="missing"):
            predict(broken, g, CFG)


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path, params):
        path = tmp_path / "model.ckpt"
        save_params(path, params, CFG)
        loaded, cfg = load_params(path)
        assert cfg == CFG
        assert set(loaded) == set(params)
        for name in params:
            assert np.array_equal(loaded[name], params[name])

    def test_predictions_survive_round_trip(self, tmp_path, params):
        path = tmp_path / "model.ckpt"
        save_params(path, params, CFG)
        loaded, cfg = load_params(path)
        g = build_graph(small_case())
        a = predict(params, g, CFG)
        b = predict(loaded, g, cfg)
        assert np.array_equal(a[0], b[0])

    def test_bad_magic_rejected(self, tmp_path, params):
        path = tmp_path / "model.ckpt"
        save_params(path, params, CFG)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            load_params(path)

    def test_truncation_rejected(self, tmp_path, params):
        path = tmp_path / "model.ckpt"
        save_params(path, params, CFG)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(ValueError):
            load_params(path)

    def test_trailing_garbage_rejected(self, tmp_path, params):
        path = tmp_path / "model.ckpt"
        save_params(path, params, CFG)
        path.write_bytes(path.read_bytes() + b"extra")
        with pytest.raises(ValueError):
            load_params(path)
