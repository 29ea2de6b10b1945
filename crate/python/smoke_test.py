"""Smoke test for the hmlstm_py extension.

Build and install it first:

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run `python python/smoke_test.py`.
"""

import math
import pathlib
import tempfile

import hmlstm_py as hm


def check_scalars():
    assert hm.hard_sigmoid(2.0, 0.25) == 1.0
    assert hm.hard_sigmoid(-2.0, 0.25) == 0.0
    assert hm.hard_sigmoid(0.0) == 0.5
    assert round(hm.z_ratio(0.42, 0.09), 2) == 4.67
    assert hm.z_ratio(0.3, 0.0) is None
    assert hm.boundary_frequency([1, 0, 0, 1]) == 0.5


def check_model():
    text = hm.synthetic_text(7, 4000)
    vocab = hm.Vocabulary(text)
    ids = vocab.encode(text[:300])
    assert vocab.decode(ids) == text[:300]

    model = hm.Model(vocab.size, units=16, embed_dim=8, output_dim=16)
    names = model.parameter_names()
    assert "head.gate_w" in names and "layer1.V" in names
    simple = hm.Model(vocab.size, units=16, embed_dim=8, output_dim=16, output_head="simple")
    assert "head.gate_w" not in simple.parameter_names()
    assert model.parameter_count() - simple.parameter_count() == 9 * 16
    bpc = model.evaluate_bpc(ids, chunk=50)
    assert math.isfinite(bpc) and bpc > 0


def check_training(tmp):
    conf = tmp / "tiny.conf"
    conf.write_text(
        "name = tiny\nunits = 16\nembed_dim = 8\noutput_dim = 16\n"
        "batch = 4\nmax_iterations = 5\nsynthetic_chars = 20000\n"
        f"out_dir = {tmp / 'runs'}\n"
    )
    effective = dict(hm.parse_config(str(conf)))
    assert effective["seq_len"] == "100"
    assert effective["units"] == "16"

    summary = hm.train(str(conf), ["seq_len=20"])
    assert summary["iterations"] == 5
    assert summary["outcome"] == "max_iterations"
    ckpt = hm.Checkpoint(str(tmp / "runs" / "tiny" / "last.hmlb"))
    sample = hm.synthetic_text(8, 500)
    assert math.isfinite(ckpt.bpc(sample))
    seg = ckpt.segment(sample)
    assert len(seg["z1"]) == len(sample) == len(seg["z2"])
    assert 0.0 <= seg["freq1"] <= 1.0


def check_gradients():
    results = hm.gradcheck()
    assert results and all(ok for _, _, ok in results), [r for r in results if not r[2]]
    assert max(err for _, err, _ in results) < hm.GRADIENT_TOLERANCE


if __name__ == "__main__":
    check_scalars()
    check_model()
    with tempfile.TemporaryDirectory() as d:
        check_training(pathlib.Path(d))
    check_gradients()
    print("smoke test passed")
