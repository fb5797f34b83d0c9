"""Builds the `faith` extension module, imports it and runs a short workflow.

Usage: python3 python/smoke_test.py [--release]
"""

import importlib.util
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build(release: bool) -> Path:
    cmd = ["cargo", "build", "-p", "faith-python", "--features", "extension-module"]
    if release:
        cmd.append("--release")
    subprocess.run(cmd, cwd=ROOT, check=True)
    profile = "release" if release else "debug"
    lib = ROOT / "target" / profile / "libfaith.so"
    if not lib.exists():
        sys.exit(f"built library not found at {lib}")
    return lib


def load(lib: Path, workdir: Path):
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    target = workdir / f"faith{suffix}"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("faith", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def run(faith, workdir: Path) -> None:
    ph = faith.Phantom(48)
    vol = ph.volume
    assert vol.dims == [48, 48, 48] and vol.dtype == "uint8" and vol.max_value == 255

    path = workdir / "phantom"
    vol.save(str(path))
    reloaded = faith.Volume.load(str(path) + ".raw")
    assert reloaded.tobytes() == vol.tobytes()

    width, height, values = vol.slice("z", ph.plane_z)
    assert (width, height) == (48, 48) and len(values) == 48 * 48

    seeds = ph.plane_seeds(25)
    thresholds = faith.local_mce(vol, seeds[:3], 5)
    assert all(0 <= t <= 255 for t in thresholds)

    model, report = faith.train(vol, seeds, theta_g=150.0, env_size=5)
    assert len(report["cells"]) == 112
    assert model.lambda_ == report["lambda"]
    assert faith.Model.from_json(model.to_json()).beta == model.beta

    mask, stats = faith.segment(vol, model, slab=8, workers=1)
    plane, blob, fpr = ph.score(mask)
    print(f"beta={model.beta} plane_recall={plane:.4f} blob_recall={blob:.4f} fpr={fpr:.4f}")
    assert plane >= 0.9 and fpr < 0.05
    assert stats["voxels"] == 48 ** 3

    global_model = faith.Model.global_threshold(150.0, 255, 5)
    global_mask, _ = faith.segment(vol, global_model)
    plane_global, _, _ = ph.score(global_mask)
    assert plane_global < 0.05, plane_global

    beta = faith.solve([[1.0, 0.0], [0.0, 1.0]], [3.0, 4.0], 10.0, 255.0, 0.1, 0.5)
    assert len(beta) == 2 and beta[0] < 3.0 and beta[1] < 4.0

    try:
        faith.train(vol, [(0, 0, 0)], theta_g=150.0)
    except ValueError as e:
        assert "border" in str(e)
    else:
        raise AssertionError("border seed accepted")


def main() -> None:
    lib = build("--release" in sys.argv)
    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        run(load(lib, workdir), workdir)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
