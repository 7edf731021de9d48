import importlib.util
from pathlib import Path

import pytest

pytest.importorskip("gzsl_moe._ckernels")

BENCH = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"


def test_benchmark_smoke(capsys):
    spec = importlib.util.spec_from_file_location("bench_kernels", BENCH)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    assert mod.main(["--repeat", "1", "--points", "200"]) == 0
    out = capsys.readouterr().out
    assert out.count("x\n") == 5
