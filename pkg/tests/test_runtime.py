"""End-to-end checks of the generated C runtime.

Generates the built-in lateral-dynamics controller, builds the harnesses in
runtime/ with make, and compares the C solver against the host reference:
conformance replay, closed-loop software-in-the-loop agreement, and
byte-stable regeneration.
"""
import filecmp
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mlmpc import embedded as emb

ROOT = Path(__file__).resolve().parent.parent
RUNTIME_DIR = ROOT / "runtime"

_GCC = shutil.which("gcc") or shutil.which("cc")
_MAKE = shutil.which("make")

pytestmark = pytest.mark.skipif(
    _GCC is None or _MAKE is None, reason="needs a C toolchain and make"
)


def _codegen(out_dir, float_type="double"):
    subprocess.run(
        [sys.executable, "-m", "mlmpc", "codegen", "--spec", "lateral_lti",
         "--out", str(out_dir), "--float", float_type],
        check=True, cwd=ROOT,
    )


def _build(work_dir, gen_dir, *targets):
    """Copy the runtime tree into work_dir and build the given targets."""
    work = Path(work_dir) / "runtime"
    if not work.exists():
        shutil.copytree(RUNTIME_DIR, work, ignore=shutil.ignore_patterns("run"))
    subprocess.run(
        [_MAKE, f"GEN={gen_dir}", f"TEMPLATES={ROOT / 'src/mlmpc/templates'}",
         *targets],
        check=True, cwd=work, stdout=subprocess.PIPE,
    )
    return work


@pytest.fixture(scope="module")
def double_build(tmp_path_factory):
    base = tmp_path_factory.mktemp("runtime_double")
    gen = base / "gen"
    _codegen(gen, "double")
    work = _build(base, gen, "conformance", "sil")
    return work, gen


def test_selftest_passes(tmp_path):
    work = _build(tmp_path, tmp_path / "unused", "selftest")
    out = subprocess.run([str(work / "selftest" / "run")],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stdout
    assert "self-test passed" in out.stdout


def test_conformance_double(double_build):
    work, gen = double_build
    out = subprocess.run(
        [str(work / "conformance"), str(gen / "mpc_conformance.txt")],
        capture_output=True, text=True,
    )
    assert out.returncode == 0, out.stdout + out.stderr
    assert "20/20 vectors pass" in out.stdout


def test_conformance_single(tmp_path):
    gen = tmp_path / "gen"
    _codegen(gen, "single")
    work = _build(tmp_path, gen, "conformance")
    out = subprocess.run(
        [str(work / "conformance"), str(gen / "mpc_conformance.txt")],
        capture_output=True, text=True,
    )
    assert out.returncode == 0, out.stdout + out.stderr


def test_conformance_detects_wrong_answers(double_build, tmp_path):
    work, gen = double_build
    lines = (gen / "mpc_conformance.txt").read_text().strip().splitlines()
    parts = lines[0].split()
    parts[-1] = repr(float(parts[-1]) + 0.5)
    bad = tmp_path / "bad.txt"
    bad.write_text("\n".join([" ".join(parts)] + lines[1:]) + "\n")
    out = subprocess.run([str(work / "conformance"), str(bad)],
                         capture_output=True, text=True)
    assert out.returncode == 1
    assert "FAIL" in out.stdout


def test_conformance_rejects_malformed_manifest(double_build, tmp_path):
    work, _ = double_build
    bad = tmp_path / "short.txt"
    bad.write_text("0.1 0.2\n")
    out = subprocess.run([str(work / "conformance"), str(bad)],
                         capture_output=True, text=True)
    assert out.returncode == 2


def _host_sil(steps, x0):
    """Reference closed loop: warm-started host solver on the nominal plant."""
    spec = emb.lateral_lti_spec()
    qp = emb.condense(spec)
    settings = emb.AlmFgmSettings.for_qp(qp, inner=10, outer=5)
    x = np.array(x0, dtype=float)
    res = None
    states, inputs = [], []
    for _ in range(steps):
        res = emb.alm_fgm_solve(qp, x, settings, warm_start=res)
        states.append(x.copy())
        inputs.append(res.u0.copy())
        x = spec.A @ x + spec.B @ res.u0
    return np.array(states), np.array(inputs)


def test_sil_matches_host_loop(double_build):
    work, _ = double_build
    steps, x0 = 400, [0.1, 0.05, 0.0]
    out = subprocess.run(
        [str(work / "sil"), str(steps)] + [repr(v) for v in x0],
        capture_output=True, text=True, check=True,
    )
    rows = np.array([[float(v) for v in line.split(",")[1:]]
                     for line in out.stdout.strip().splitlines()[1:]])
    assert rows.shape == (steps, 4)
    states, inputs = _host_sil(steps, x0)
    assert np.max(np.abs(rows[:, :3] - states)) < 1e-3
    assert np.max(np.abs(rows[:, 3:] - inputs)) < 1e-3
    # input box from the problem definition is never violated
    assert np.all(np.abs(rows[:, 3]) <= 0.1 + 1e-12)
    # the regulator makes progress (the lateral channel settles slowly
    # because the heading band keeps the steering authority small)
    assert np.max(np.abs(rows[-1, :3])) < 0.05


def test_sil_zero_state_stays_zero(double_build):
    work, _ = double_build
    out = subprocess.run([str(work / "sil"), "10"],
                         capture_output=True, text=True, check=True)
    rows = np.array([[float(v) for v in line.split(",")[1:]]
                     for line in out.stdout.strip().splitlines()[1:]])
    assert np.all(rows == 0.0)


def test_regeneration_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _codegen(a, "double")
    _codegen(b, "double")
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors
