"""Smoke test for the compiled module: python smoke_test.py [out_dir]."""

import math
import sys
import tempfile
from pathlib import Path

import mechanochem_py as mc


def main() -> None:
    t = mc.tableau()
    assert abs(t["gamma"] - (1 - 1 / math.sqrt(2))) < 1e-15
    assert abs(sum(t["b"]) - 1) < 1e-15 and abs(sum(t["bhat"]) - 1) < 1e-15

    echo = mc.effective_config("t_final = 2.0\nseed = 4\n")
    assert "t_final = 2.0" in echo and "[controller]" in echo
    try:
        mc.effective_config("[layers.d]\nnu = 0.5\n")
    except ValueError as e:
        assert "layers.d.nu" in str(e)
    else:
        raise AssertionError("nu = 0.5 accepted")

    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
    cfg = "t_final = 2.0\n[geometry]\nnx = 4\nny_d = 4\nny_e = 2\n"
    a = mc.run(cfg, str(out), seed=1)
    b = mc.run(cfg, seed=1)
    assert a["t"] == 2.0 and a["accepted"] > 0
    assert a["w"] == b["w"]
    lo, hi, mean = a["fields"]["D.w1"]
    assert lo <= mean <= hi
    assert (out / "steps.csv").read_text().startswith("t,dt,err,accepted")
    assert (out / "snapshot_D_0000.vtk").read_text().startswith("# vtk DataFile Version 3.0")

    rates = mc.verify("space", 3).strip().splitlines()
    assert len(rates) == 4
    print("smoke test passed:", a["accepted"], "accepted steps, output in", out)


if __name__ == "__main__":
    main()
