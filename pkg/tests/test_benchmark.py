import importlib.util
from pathlib import Path


def test_kernel_benchmark_runs(capsys):
    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    mod.main(["--seconds", "1", "--repeat", "2"])
    out = capsys.readouterr().out
    assert "overlap_add" in out and "round trip" in out
