import numpy as np
import pytest

from lspd import evaluate, linops, simdata, unroll


@pytest.fixture(scope="module")
def setup():
    g = linops.ScanGeometry(mode="fan", image_size=16, n_angles=8, n_rays=24, source_distance=2.0, pixel_size=0.3)
    A = linops.assemble_projector(g)
    ds = simdata.make_dataset(g, simdata.NoiseModel(I0=1e4), 20, seed=1, op=A)
    return g, A, ds


def test_table_rows_and_calls(setup):
    g, A, ds = setup
    models = {
        "lpd": unroll.init_params(unroll.UnrollConfig("lpd", K=12, hidden=2, kernel=3), A),
        "lspd": unroll.init_params(unroll.UnrollConfig("lspd", K=12, m=4, hidden=2, kernel=3), A),
    }
    t = evaluate.evaluate(models, ds, A)
    assert [s["method"] for s in t.summary] == ["fbp", "lpd", "lspd"]
    assert t.method("lpd")["operator_calls"] == 24 and t.method("lspd")["operator_calls"] == 6
    # zero-initialised output convs return the FBP input, so every row ties the baseline
    assert t.method("lspd")["mean_psnr"] == pytest.approx(t.method("fbp")["mean_psnr"], abs=1e-9)
    for s in t.summary:
        rs = [r["psnr"] for r in t.rows if r["method"] == s["method"]]
        assert s["mean_psnr"] == pytest.approx(sum(rs) / len(rs), abs=1e-9)
        assert s["n_images"] == 2


def test_threaded_matches_serial(setup):
    g, A, ds = setup
    p = unroll.init_params(unroll.UnrollConfig("lspd", K=2, m=4, hidden=2, kernel=3), A)
    for t in p.named().values():
        t.value = t.value + np.float32(0.02)
    a = evaluate.evaluate({"m": p}, ds, A, workers=1)
    b = evaluate.evaluate({"m": p}, ds, A, workers=2)
    assert a.rows == b.rows


def test_errors(setup):
    g, A, ds = setup
    with pytest.raises(ValueError, match="split"):
        evaluate.evaluate({}, ds, A, split="nope")
    with pytest.raises(ValueError, match="ground truth"):
        evaluate.evaluate({}, ds.measurements_only(), A)
    other = linops.ScanGeometry(mode="fan", image_size=16, n_angles=4, n_rays=24, source_distance=2.0, pixel_size=0.3)
    p = unroll.init_params(unroll.UnrollConfig("lspd", K=2, m=4, hidden=2, kernel=3), A)
    with pytest.raises(ValueError, match="geometry mismatch"):
        evaluate.evaluate({"m": (p, {"geometry": other.to_dict()})}, ds, A)


def test_csv_header_records_peak(setup, tmp_path):
    g, A, ds = setup
    t = evaluate.evaluate({}, ds, A)
    t.write_csv(tmp_path / "e.csv", tmp_path / "s.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0].startswith("# psnr/ssim peak = max(ref) - min(ref)")
    assert lines[1] == "method,index,psnr,ssim,operator_calls"
    assert (tmp_path / "s.csv").read_text().splitlines()[1] == "method,n_images,mean_psnr,mean_ssim,operator_calls"
