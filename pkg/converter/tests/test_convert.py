"""Converter round trips, name-map semantics, and dtype policies."""

from __future__ import annotations

import json
import shutil
import subprocess

import numpy as np
import pytest
import torch

from ace_convert import (
    AcetError,
    MapError,
    NameMap,
    export_to_acet,
    import_from_acet,
    read_acet,
    write_acet,
)


def save_state(tmp_path, state, name="model.pt"):
    path = tmp_path / name
    torch.save(state, path)
    return path


def four_tensor_state(seed=0):
    g = torch.Generator().manual_seed(seed)
    return {
        "encoder.weight": torch.randn(6, 5, generator=g),
        "encoder.bias": torch.randn(5, generator=g),
        "head.weight": torch.randn(3, 6, generator=g),
        "scale": torch.randn((), generator=g, dtype=torch.float64),
    }


class TestNameMap:
    def test_identity(self):
        assert NameMap.identity().apply("a.b.c") == "a.b.c"

    def test_template_backreference(self):
        nm = NameMap(rules=((r"model\.(.*)", r"\1"),))
        assert nm.apply("model.encoder.weight") == "encoder.weight"
        assert nm.apply("other.weight") is None

    def test_multiple_matches_rejected(self):
        nm = NameMap(rules=((r".*", r"x"), (r"a.*", r"y")))
        with pytest.raises(MapError, match="more than one rule"):
            nm.apply("abc")

    def test_load_and_policy_validation(self, tmp_path):
        path = tmp_path / "map.json"
        path.write_text(json.dumps({"rules": [{"pattern": "(.*)", "template": r"\1"}],
                                    "dtype_policy": "force-f32"}))
        nm = NameMap.load(path)
        assert nm.dtype_policy == "force-f32"
        with pytest.raises(MapError, match="dtype policy"):
            NameMap(rules=(), dtype_policy="f16")
        with pytest.raises(MapError, match="invalid pattern"):
            NameMap(rules=(("(", "x"),))


class TestExport:
    def test_single_f32_matrix_identity_map(self, tmp_path):
        values = torch.tensor([[1.25, -2.5], [0.5, 3.75]])
        ckpt = save_state(tmp_path, {"w": values})
        out = tmp_path / "out.acet"
        summary = export_to_acet(ckpt, NameMap.identity(), out)
        assert summary.exported == [("w", "w")]
        tensors, _ = read_acet(out)
        np.testing.assert_allclose(tensors["w"], values.numpy(), rtol=1e-7)
        assert tensors["w"].dtype == np.float32

    def test_collision_rejected(self, tmp_path):
        ckpt = save_state(tmp_path, {"a.w": torch.zeros(2), "b.w": torch.zeros(2)})
        nm = NameMap(rules=((r".*\.w", "merged"),))
        with pytest.raises(MapError, match="collision"):
            export_to_acet(ckpt, nm, tmp_path / "out.acet")

    def test_unmatched_skipped_with_warning(self, tmp_path):
        ckpt = save_state(tmp_path, {"keep.w": torch.zeros(2), "drop.w": torch.zeros(2)})
        nm = NameMap(rules=((r"keep\.(.*)", r"\1"),))
        with pytest.warns(UserWarning, match="drop.w"):
            summary = export_to_acet(ckpt, nm, tmp_path / "out.acet")
        assert summary.skipped == ["drop.w"]
        tensors, _ = read_acet(tmp_path / "out.acet")
        assert list(tensors) == ["w"]

    def test_keep_policy_rejects_half_precision(self, tmp_path):
        ckpt = save_state(tmp_path, {"w": torch.zeros(2, dtype=torch.float16)})
        with pytest.raises(MapError, match="force-f32"):
            export_to_acet(ckpt, NameMap.identity(), tmp_path / "out.acet")

    def test_force_f32_casts(self, tmp_path):
        state = {
            "h": torch.tensor([1.0, 2.0], dtype=torch.float16),
            "d": torch.tensor([0.1], dtype=torch.float64),
        }
        ckpt = save_state(tmp_path, state)
        export_to_acet(ckpt, NameMap.identity("force-f32"), tmp_path / "out.acet")
        tensors, _ = read_acet(tmp_path / "out.acet")
        assert tensors["h"].dtype == np.float32 and tensors["d"].dtype == np.float32
        np.testing.assert_allclose(tensors["d"], np.float32(0.1))


class TestImport:
    def test_empty_container_empty_state(self, tmp_path):
        acet = tmp_path / "empty.acet"
        write_acet({}, acet)
        summary = import_from_acet(acet, NameMap.identity(), tmp_path / "out.pt")
        assert summary.exported == [] and summary.total_bytes == 0
        assert torch.load(tmp_path / "out.pt", weights_only=True) == {}

    def test_force_f32_on_f64_input(self, tmp_path):
        acet = tmp_path / "d.acet"
        write_acet({"w": np.array([0.1, 0.2], dtype=np.float64)}, acet)
        import_from_acet(acet, NameMap.identity("force-f32"), tmp_path / "out.pt")
        state = torch.load(tmp_path / "out.pt", weights_only=True)
        assert state["w"].dtype == torch.float32
        np.testing.assert_allclose(state["w"].numpy(), np.array([0.1, 0.2], dtype=np.float32))

    def test_bad_container_rejected(self, tmp_path):
        bad = tmp_path / "bad.acet"
        bad.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(AcetError, match="bad magic"):
            import_from_acet(bad, NameMap.identity(), tmp_path / "out.pt")


class TestRoundTrip:
    def test_export_import_value_equal(self, tmp_path):
        state = four_tensor_state()
        ckpt = save_state(tmp_path, state)
        acet = tmp_path / "model.acet"
        export_to_acet(ckpt, NameMap.identity(), acet)
        import_from_acet(acet, NameMap.identity(), tmp_path / "back.pt")
        back = torch.load(tmp_path / "back.pt", weights_only=True)
        assert set(back) == set(state)
        for name, tensor in state.items():
            assert back[name].dtype == tensor.dtype
            assert torch.equal(back[name], tensor)

    def test_import_export_value_equal(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {
            "a": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal(7),
        }
        first = tmp_path / "first.acet"
        write_acet(tensors, first)
        import_from_acet(first, NameMap.identity(), tmp_path / "mid.pt")
        export_to_acet(tmp_path / "mid.pt", NameMap.identity(), tmp_path / "second.acet")
        back, _ = read_acet(tmp_path / "second.acet")
        for name, arr in tensors.items():
            assert back[name].dtype == arr.dtype
            assert np.array_equal(back[name], arr)


class TestCrossComponent:
    @pytest.mark.skipif(shutil.which("ace") is None, reason="primary CLI not installed")
    def test_export_then_primary_inspect_shapes(self, tmp_path):
        state = four_tensor_state()
        ckpt = save_state(tmp_path, state)
        acet = tmp_path / "model.acet"
        export_to_acet(ckpt, NameMap.identity(), acet)
        result = subprocess.run(
            ["ace", "inspect", str(acet)], capture_output=True, text=True, check=True
        )
        listed = {}
        for line in result.stdout.splitlines():
            if line.startswith("  ") and "=" not in line:
                name, shape, _ = line.split()
                listed[name] = shape
        expected = {
            name: "x".join(str(e) for e in tensor.shape) if tensor.dim() else "scalar"
            for name, tensor in state.items()
        }
        assert listed == expected


class TestCli:
    def test_cli_round_trip(self, tmp_path):
        from ace_convert.cli import main

        ckpt = save_state(tmp_path, four_tensor_state())
        acet = tmp_path / "m.acet"
        back = tmp_path / "b.pt"
        assert main(["export", "--in", str(ckpt), "--out", str(acet)]) == 0
        assert main(["import", "--in", str(acet), "--out", str(back)]) == 0
        restored = torch.load(back, weights_only=True)
        assert set(restored) == set(four_tensor_state())

    def test_cli_requires_paths(self):
        from ace_convert.cli import main

        assert main(["export"]) == 1

    def test_cli_map_file(self, tmp_path):
        from ace_convert.cli import main

        ckpt = save_state(tmp_path, {"model.w": torch.ones(2)})
        map_path = tmp_path / "map.json"
        map_path.write_text(
            json.dumps({"rules": [{"pattern": r"model\.(.*)", "template": r"\1"}]})
        )
        acet = tmp_path / "m.acet"
        assert main(["export", "--map", str(map_path), "--in", str(ckpt), "--out", str(acet)]) == 0
        tensors, _ = read_acet(acet)
        assert list(tensors) == ["w"]
