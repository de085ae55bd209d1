import json

import numpy as np
import pytest

from fpsa.attention import FpsaLayer, solve_state
from fpsa.autodiff import no_grad
from fpsa.diagnostics import (
    IterationTrace,
    contraction_probe,
    export_attention_csv,
    export_trace_csv,
    layer_step,
    load_checkpoint,
    lower_median,
    read_attention_csv,
    read_trace_csv,
    restore_model,
    save_checkpoint,
    summarize,
    summarize_counts,
)
from fpsa.diagnostics.checkpoint import BLOB, MANIFEST
from fpsa.errors import CheckpointError, DataError
from fpsa.solver import FpiConfig
from fpsa.tasks import ModelSpec, build_model


def hand_trace(counts, converged=None, residual=None):
    counts = np.asarray(counts)
    return IterationTrace(
        counts=counts,
        converged=np.ones(counts.shape, bool) if converged is None else np.asarray(converged),
        final_residual=np.full(counts.shape, 1e-5) if residual is None else np.asarray(residual),
        residual_sum=np.zeros((1, counts.shape[1])),
        residual_count=np.zeros((1, counts.shape[1]), dtype=np.int64),
        max_iter=100,
        epsilon=1e-4,
    )


class TestSummaries:
    def test_constant_counts(self):
        s = summarize_counts([5, 5, 5])
        assert (s.mean, s.median, s.max, s.non_converged) == (5.0, 5, 5, 0)

    def test_non_converged_and_max(self):
        s = summarize_counts([1, 22], [True, False])
        assert s.max == 22 and s.non_converged == 1

    def test_lower_median_for_even_length(self):
        assert lower_median([4, 1, 3, 2]) == 2

    def test_hand_built_trace(self):
        # sample x head x token; head 0 counts {3,7,2,9}, head 1 counts {4,4,100,5}
        counts = np.array([[[3, 7], [4, 4]], [[2, 9], [100, 5]]])
        converged = counts < 100
        out = summarize(hand_trace(counts, converged))
        assert (out[0].mean, out[0].median, out[0].max, out[0].non_converged) == (5.25, 3, 9, 0)
        assert (out[1].mean, out[1].median, out[1].max, out[1].non_converged) == (28.25, 4, 100, 1)

    def test_order_invariance(self):
        rng = np.random.default_rng(0)
        a = hand_trace(rng.integers(1, 30, (3, 2, 4)))
        b = hand_trace(rng.integers(1, 30, (5, 2, 4)))
        assert summarize(IterationTrace.concat([a, b])) == summarize(IterationTrace.concat([b, a]))

    def test_empty_trace(self):
        with pytest.raises(DataError):
            summarize(IterationTrace.empty(heads=2))

    def test_trace_from_solver(self, f64):
        layer = FpsaLayer(8, 2, np.random.default_rng(0))
        with no_grad():
            _, info = solve_state(np.random.default_rng(1).standard_normal((3, 4, 8)), layer, FpiConfig(50, 1e-6))
        trace = IterationTrace.from_result(info.result, (3, 4, 8), 2, FpiConfig(50, 1e-6))
        assert trace.counts.shape == (3, 2, 4)
        np.testing.assert_array_equal(trace.counts[1, 0], info.result.iterations[1, :, 0])
        assert (trace.final_residual[trace.converged] < 1e-6).all()


class TestAttentionExport:
    def test_single_cell(self, tmp_path):
        (path,) = export_attention_csv(np.ones((1, 1, 1)), tmp_path / "a.csv")
        assert path.read_text().splitlines() == ["query,0", "0,1.000000000"]

    def test_one_hot_rows(self, tmp_path):
        (path,) = export_attention_csv(np.eye(3)[None], tmp_path / "a.csv", labels=["x", "y", "z"])
        lines = path.read_text().splitlines()
        assert lines[0] == "query,x,y,z"
        assert lines[2] == "y,0.000000000,1.000000000,0.000000000"

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        p = rng.random((2, 5, 5))
        p /= p.sum(-1, keepdims=True)
        paths = export_attention_csv(p, tmp_path / "maps.csv")
        assert [x.name for x in paths] == ["maps_head0.csv", "maps_head1.csv"]
        for h, path in enumerate(paths):
            matrix, labels = read_attention_csv(path)
            assert labels == [str(i) for i in range(5)]
            np.testing.assert_allclose(matrix, p[h], atol=1e-8)

    def test_refuses_bad_rows(self, tmp_path):
        bad = np.full((1, 2, 2), 0.5)
        bad[0, 1, 1] = 0.6
        with pytest.raises(DataError, match="query 1"):
            export_attention_csv(bad, tmp_path / "bad.csv")
        assert not list(tmp_path.iterdir())

    def test_deterministic_bytes(self, tmp_path):
        p = np.full((1, 3, 3), 1 / 3)
        a = export_attention_csv(p, tmp_path / "a.csv")[0].read_bytes()
        b = export_attention_csv(p, tmp_path / "b.csv")[0].read_bytes()
        assert a == b and b"\r" not in a


class TestTraceExport:
    def test_empty_trace_is_header_only(self, tmp_path):
        path = export_trace_csv(IterationTrace.empty(), tmp_path / "t.csv")
        assert path.read_text() == "sample_id,head,token,iterations,converged,final_residual\n"

    def test_cardinality_and_round_trip(self, tmp_path):
        counts = np.arange(1, 13).reshape(2, 2, 3)
        converged = counts != 7
        trace = hand_trace(counts, converged)
        rows = read_trace_csv(export_trace_csv(trace, tmp_path / "t.csv"))
        assert len(rows) == 12
        assert [(r["sample_id"], r["head"], r["token"]) for r in rows[:4]] == [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 1, 0)]
        parsed = hand_trace(
            np.array([r["iterations"] for r in rows]).reshape(2, 2, 3),
            np.array([r["converged"] for r in rows]).reshape(2, 2, 3),
        )
        assert summarize(parsed) == summarize(trace)


class TestProbe:
    def test_linear_map(self):
        stats = contraction_probe(lambda z: z * 0.5, np.random.default_rng(0).standard_normal((2, 3, 4)), 32)
        np.testing.assert_allclose(stats.ratios, 0.5, atol=1e-6)

    def test_identity(self):
        stats = contraction_probe(lambda z: z, np.ones((3, 3)), 8)
        np.testing.assert_allclose(stats.ratios, 1.0, atol=1e-12)
        assert stats.fraction_contractive == 0.0

    def test_degenerate_pairs_are_skipped(self):
        assert contraction_probe(lambda z: z, np.ones(2), 4).skipped == 0
        # perturbations below the spacing of 1.0 leave both points at z
        with pytest.raises(DataError, match="degenerate"):
            contraction_probe(lambda z: z, np.ones(2), 4, scale=1e-300)

    def test_attention_step_is_finite(self, f64):
        layer = FpsaLayer(8, 2, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((2, 4, 8))
        with no_grad():
            z, _ = solve_state(x, layer, FpiConfig(50, 1e-6))
        stats = contraction_probe(layer_step(layer, x), z, 16)
        assert np.isfinite(stats.ratios).all() and stats.max < 10


@pytest.fixture
def model():
    return build_model(ModelSpec("induction", "self", vocab_size=5), seed=3)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path, model):
        save_checkpoint(tmp_path / "ck", model, {"seed": 3}, epoch=7)
        ckpt = load_checkpoint(tmp_path / "ck")
        assert ckpt.epoch == 7 and ckpt.config == {"seed": 3}
        fresh = build_model(ModelSpec("induction", "self", vocab_size=5), seed=99)
        restore_model(fresh, ckpt)
        for (name, a), b in zip(model.state_arrays().items(), fresh.state_arrays().values()):
            assert a.dtype == b.dtype and a.tobytes() == b.tobytes(), name

    def test_manifest_contents(self, tmp_path, model):
        save_checkpoint(tmp_path / "ck", model)
        manifest = json.loads((tmp_path / "ck" / MANIFEST).read_text())
        assert manifest["format"] == "fpsa-ckpt-1"
        entry = manifest["tensors"][0]
        assert entry["dtype"] == "<f4" and entry["offset"] == 0
        assert sum(e["nbytes"] for e in manifest["tensors"]) == manifest["blob_bytes"]

    def test_truncated_blob_names_tensor(self, tmp_path, model):
        save_checkpoint(tmp_path / "ck", model)
        manifest = json.loads((tmp_path / "ck" / MANIFEST).read_text())
        third = manifest["tensors"][2]
        blob = tmp_path / "ck" / BLOB
        blob.write_bytes(blob.read_bytes()[: third["offset"] + 3])
        with pytest.raises(CheckpointError, match=third["name"]):
            load_checkpoint(tmp_path / "ck")

    def test_flipped_byte_fails_integrity(self, tmp_path, model):
        save_checkpoint(tmp_path / "ck", model)
        blob = tmp_path / "ck" / BLOB
        data = bytearray(blob.read_bytes())
        data[10] ^= 0xFF
        blob.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="integrity"):
            load_checkpoint(tmp_path / "ck")

    def test_edited_manifest_rejected(self, tmp_path, model):
        save_checkpoint(tmp_path / "ck", model, {"lr": 1e-3})
        path = tmp_path / "ck" / MANIFEST
        path.write_text(path.read_text().replace("0.001", "0.002"))
        with pytest.raises(CheckpointError, match="integrity"):
            load_checkpoint(tmp_path / "ck")

    def test_corrupt_manifest(self, tmp_path, model):
        save_checkpoint(tmp_path / "ck", model)
        (tmp_path / "ck" / MANIFEST).write_text("{not json")
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(tmp_path / "ck")

    def test_version_mismatch(self, tmp_path, model):
        save_checkpoint(tmp_path / "ck", model)
        path = tmp_path / "ck" / MANIFEST
        path.write_text(path.read_text().replace("fpsa-ckpt-1", "fpsa-ckpt-0"))
        with pytest.raises(CheckpointError, match="fpsa-ckpt-0"):
            load_checkpoint(tmp_path / "ck")

    def test_different_head_count_is_shape_error(self, tmp_path, model):
        save_checkpoint(tmp_path / "ck", model)
        # 4 heads change only the temperature vector's shape
        other = build_model(ModelSpec("induction", "self", heads=4, vocab_size=5), seed=3)
        with pytest.raises(CheckpointError, match="shape mismatch for layer.rho"):
            restore_model(other, load_checkpoint(tmp_path / "ck"))

    def test_optimizer_state_round_trip(self, tmp_path, model):
        from fpsa.autodiff import AdamWState

        state = AdamWState(lr=1e-3, t=4)
        state.m["x"] = np.arange(3, dtype=np.float32)
        state.v["x"] = np.ones(3, dtype=np.float32)
        save_checkpoint(tmp_path / "ck", model, state=state)
        back = load_checkpoint(tmp_path / "ck").optimizer_state()
        assert back.t == 4 and back.lr == 1e-3
        np.testing.assert_array_equal(back.m["x"], state.m["x"])
