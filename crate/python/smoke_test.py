"""Smoke test for the xbarprune Python bindings.

Uses an installed `xbarprune_py` (e.g. `maturin develop -m crates/python/pyproject.toml`)
or falls back to the library built by `cargo build -p xbarprune-python --features extension-module`.
"""

import importlib.machinery
import importlib.util
import json
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import xbarprune_py

        return xbarprune_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libxbarprune_py.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("xbarprune_py", str(lib))
            spec = importlib.util.spec_from_file_location("xbarprune_py", lib, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("xbarprune_py not found; build it first")


xp = load()

levels = xp.SparsityLevelSet(64)
assert levels.full_bits == 6
assert levels.closest(0.74) == "x=2"
assert [lv[2] for lv in levels.levels()][:3] == [64, 32, 16]
assert xp.target_sparsity(3) == 0.875

assert abs(xp.hoyer_square([3.0, 4.0]) - 49.0 / 25.0) < 1e-12
assert xp.l0_count([0.0, 1.0, -2.0]) == 2

# 16x16 layer, only the first two rows nonzero: every column needs 1 of 4 bits
values = [1.0 if i < 32 else 0.0 for i in range(256)]
layer = xp.LayerMatrix.dense("fc", 16, 16, values)
report = xp.energy_report([(layer, None)], 16)
assert report["normalized_energy"] == 0.25, report
assert xp.energy_from_bits(16, [4, 2]) == 0.75

dense = xp.LayerMatrix.dense("fc", 16, 16, [float(i % 7 + 1) for i in range(256)])
mask, plan = xp.prune_per_tile(dense, 0.8, 8)
assert mask.provenance == "dub"
assert len(plan["tiles"]) == 4
assert mask.pruned_fraction >= 0.75
col = xp.prune_structured(dense, 8, "column", 0.5)
assert col.pruned_fraction <= 0.5

try:
    xp.SparsityLevelSet(12)
except xp.XbarpruneError as e:
    assert e.exit_code in (1, 2, 3)
else:
    raise AssertionError("tile size 12 accepted")

config = xp.Config.from_json(
    json.dumps(
        {
            "data": {"source": "synthetic", "classes": 3,
                     "shape": {"channels": 1, "height": 4, "width": 4},
                     "count": 30, "test_count": 15, "seed": 1},
            "architecture": {"input": {"channels": 1, "height": 4, "width": 4},
                             "layers": [{"kind": "flatten"}, {"kind": "dense", "units": 3}]},
            "train": {"learning_rate": 0.05, "batch_size": 10, "epochs": 2,
                      "tile_size": 4, "seed": 0, "finetune_epochs": 1},
            "method": "dub",
            "allowed_ratio": 0.5,
        }
    ),
    ["train.reg.lambda_var=0.01"],
)
result = xp.run_experiment(config)
summary = result.summary()
assert summary["method"] == "dub"
assert 0.0 <= summary["accuracy"] <= 1.0
assert summary["normalized_energy"] <= 1.0

with tempfile.TemporaryDirectory() as tmp:
    path = pathlib.Path(tmp) / "model.xbw"
    result.checkpoint().save(str(path))
    ckpt = xp.Checkpoint.load(str(path))
    (weights, m), = ckpt.layers()
    assert (weights.rows, weights.cols) == (16, 3)
    assert m is not None and m.provenance == "dub"
    analysis = ckpt.analyze(4)
    assert analysis["report"]["normalized_energy"] == summary["normalized_energy"]

print("python smoke test ok:", summary["method"], f"energy {summary['normalized_energy']:.2f}")
