import csv
import json
import os
import struct

import numpy as np
import pytest

from pairedae.checkpoint import CheckpointError, decode_checkpoint, model_from_bytes, model_to_bytes, save_model
from pairedae.cli import main
from pairedae.datagen import load_idx, save_idx
from pairedae.numerics import make_rng
from pairedae.paired import PairedModel, build_paired
from pairedae.variational import build_latent_map, build_vpae


def _models():
    r = make_rng(0)
    return [
        build_paired(9, 7, 3, 2, (5,), r),
        PairedModel.identity(4),
        build_vpae(9, 7, 3, 2, (5,), r, sigma=0.5),
        (build_paired(9, 7, 3, 2, (5,), r), build_latent_map(2, 3, hidden=4, rng=r, fixed_log_std=-3.0)),
    ]


@pytest.mark.parametrize("idx", range(4))
def test_checkpoint_roundtrip_bytes(idx):
    model = _models()[idx]
    data = model_to_bytes(model, {"seed": 3})
    kind, back, cfg = model_from_bytes(data)
    assert cfg == {"seed": 3}
    assert model_to_bytes(back, cfg) == data


def test_checkpoint_roundtrip_predictions(rng):
    model = _models()[0]
    _, back, _ = model_from_bytes(model_to_bytes(model))
    Y = rng.random((3, 7))
    np.testing.assert_array_equal(back.d_x(back.M_dagger(back.e_y(Y))), model.d_x(model.M_dagger(model.e_y(Y))))


def test_checkpoint_corruption():
    data = model_to_bytes(_models()[0])
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:-8])
    with pytest.raises(CheckpointError):
        decode_checkpoint(data + b"\0" * 8)
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:4] + struct.pack("<Q", 10**9) + data[12:])
    junk = b"[1,2]"
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"PAE1" + struct.pack("<Q", len(junk)) + junk)
    (hlen,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12 : 12 + hlen])
    header["manifest"][1]["offset"] += 8
    hb = json.dumps(header).encode()
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"PAE1" + struct.pack("<Q", len(hb)) + hb + data[12 + hlen :])


def _config(tmp_path, **over):
    cfg = {
        "seed": 1,
        "data": {"count": 48, "height": 8, "width": 8},
        "corruption": {"variant": "pixel-bernoulli", "p": 0.3},
        "model": {"kind": "paired", "r_x": 4, "r_y": 4, "widths": [12]},
        "train": {"epochs": 2, "batch_size": 16, "lr": 1e-2},
        "lsi": {"steps": 20},
        "out": str(tmp_path / "run"),
    }
    for k, v in over.items():
        cfg[k] = {**cfg[k], **v} if isinstance(v, dict) and isinstance(cfg.get(k), dict) else v
    p = tmp_path / f"cfg{len(os.listdir(tmp_path))}.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def _load(path):
    got = load_idx(str(path))
    return np.asarray(getattr(got, "pixels", got))


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_make_data_and_train(tmp_path):
    cfg = _config(tmp_path)
    assert main(["make-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    x, y, mask = (_load(tmp_path / "d" / f) for f in ("x.idx", "y.idx", "mask.idx"))
    assert x.shape == (48, 8, 8)
    np.testing.assert_array_equal(y, x * mask)
    assert main(["train", "--config", cfg]) == 0
    hist = _rows(tmp_path / "run" / "history.csv")
    assert hist[0] == ["epoch", "loss"] and len(hist) == 4


def test_train_is_deterministic(tmp_path):
    cfg = _config(tmp_path)
    main(["train", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["train", "--config", cfg, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "model.pae").read_bytes() == (tmp_path / "b" / "model.pae").read_bytes()
    main(["train", "--config", cfg, "--seed", "2", "--out", str(tmp_path / "c")])
    assert (tmp_path / "a" / "model.pae").read_bytes() != (tmp_path / "c" / "model.pae").read_bytes()


def test_train_zero_epochs(tmp_path):
    cfg = _config(tmp_path, train={"epochs": 0})
    assert main(["train", "--config", cfg]) == 0
    assert len(_rows(tmp_path / "run" / "history.csv")) == 2


@pytest.mark.parametrize("kind", ["linear", "vpae", "latent-map"])
def test_train_other_kinds(tmp_path, kind):
    model = {"kind": kind}
    if kind == "latent-map":
        model["map"] = {"epochs": 2, "hidden": 6}
    cfg = _config(tmp_path, model=model)
    assert main(["train", "--config", cfg]) == 0
    kind_read = model_from_bytes((tmp_path / "run" / "model.pae").read_bytes())[0]
    assert kind_read == ("paired" if kind == "linear" else kind)


def test_malformed_config_writes_nothing(tmp_path):
    out = tmp_path / "never"
    bad = [
        {"seed": 0, "bogus": 1},
        {"model": {"kind": "transformer"}},
        {"train": {"epochs": 2, "lr": 1e-2, "learning_rate": 3}},
        {"corruption": {"variant": "blur"}},
        {"data": {"source": "idx", "path": str(tmp_path / "missing.idx")}},
    ]
    for i, b in enumerate(bad):
        p = tmp_path / f"bad{i}.json"
        p.write_text(json.dumps({**b, "out": str(out)}))
        assert main(["train", "--config", str(p)]) == 2
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["make-data", "--config", str(p), "--out", str(out)]) == 2
    assert not out.exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_exits_three(tmp_path):
    cfg = _config(tmp_path, train={"lr": 1e200, "epochs": 2})
    assert main(["train", "--config", cfg]) == 3


def test_invert_identity_direct_equals_input(tmp_path, rng):
    save_model(str(tmp_path / "id.pae"), PairedModel.identity(64))
    Y = rng.random((5, 8, 8))
    save_idx(str(tmp_path / "y.idx"), Y)
    out = tmp_path / "inv"
    assert main(["invert", str(tmp_path / "id.pae"), str(tmp_path / "y.idx"), "--direct",
                 "--truth", str(tmp_path / "y.idx"), "--out", str(out)]) == 0
    np.testing.assert_array_equal(_load(out / "estimates.idx"), Y)
    rows = _rows(out / "metrics.csv")
    assert rows[0] == ["index", "rel_err", "ssim"] and all(float(r[1]) == 0.0 for r in rows[1:])


def test_invert_lsi_huge_alpha_matches_direct(tmp_path):
    cfg = _config(tmp_path)
    main(["train", "--config", cfg])
    main(["make-data", "--config", cfg, "--out", str(tmp_path / "d")])
    ck, y = str(tmp_path / "run" / "model.pae"), str(tmp_path / "d" / "y.idx")
    assert main(["invert", ck, y, "--direct", "--out", str(tmp_path / "dir")]) == 0
    assert main(["invert", ck, y, "--lsi", "--alpha", "1e9", "--steps", "30", "--out", str(tmp_path / "lsi")]) == 0
    a = _load(tmp_path / "dir" / "estimates.idx")
    b = _load(tmp_path / "lsi" / "estimates.idx")
    assert np.max(np.abs(a - b)) <= 1e-4
    misfit = _rows(tmp_path / "lsi" / "misfit.csv")
    assert len(misfit) == 32 and len(misfit[0]) == 49
    assert main(["invert", ck, y, "--lsi", "--cold", "--mask", str(tmp_path / "d" / "mask.idx"),
                 "--steps", "5", "--out", str(tmp_path / "cold")]) == 0


def test_invert_dimension_mismatch(tmp_path, rng):
    save_model(str(tmp_path / "id.pae"), PairedModel.identity(10))
    save_idx(str(tmp_path / "y.idx"), rng.random((3, 4, 4)))
    assert main(["invert", str(tmp_path / "id.pae"), str(tmp_path / "y.idx"), "--direct",
                 "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.pae").write_bytes(b"PAE1junk")
    assert main(["invert", str(tmp_path / "bad.pae"), str(tmp_path / "y.idx"), "--direct",
                 "--out", str(tmp_path / "o")]) == 2


def test_ood_command(tmp_path, rng):
    save_model(str(tmp_path / "m.pae"), build_paired(16, 16, 3, 3, (6,), rng))
    save_idx(str(tmp_path / "base.idx"), rng.random((40, 4, 4)))
    save_idx(str(tmp_path / "small.idx"), rng.random((10, 4, 4)))
    d1, d2 = tmp_path / "p1", tmp_path / "p2"
    d1.mkdir()
    d2.mkdir()
    save_idx(str(d1 / "y.idx"), rng.random((5, 4, 4)))
    save_idx(str(d2 / "y.idx"), 3 * rng.random((6, 4, 4)))
    out = tmp_path / "ood"
    assert main(["ood", str(tmp_path / "m.pae"), "--baseline", str(tmp_path / "base.idx"),
                 "--probe", str(d1 / "y.idx"), "--probe", str(d2 / "y.idx"), "--out", str(out)]) == 0
    summary = _rows(out / "summary.csv")
    assert [r[0] for r in summary[1:]] == ["y", "y_1"] and [r[1] for r in summary[1:]] == ["5", "6"]
    assert len(_rows(out / "metrics.csv")) == 12
    assert main(["ood", str(tmp_path / "m.pae"), "--baseline", str(tmp_path / "small.idx"),
                 "--probe", str(d1 / "y.idx"), "--out", str(tmp_path / "o2")]) == 2
    assert main(["ood", str(tmp_path / "m.pae"), "--baseline", str(tmp_path / "base.idx"),
                 "--probe", str(d1 / "y.idx"), "--pair", "m1,m9", "--out", str(tmp_path / "o3")]) == 2


def test_sample_command(tmp_path, rng):
    save_model(str(tmp_path / "v.pae"), build_vpae(16, 16, 3, 3, (6,), rng))
    save_model(str(tmp_path / "p.pae"), build_paired(16, 16, 3, 3, (6,), rng))
    save_idx(str(tmp_path / "y.idx"), rng.random((2, 4, 4)))
    out = tmp_path / "s"
    assert main(["sample", str(tmp_path / "v.pae"), str(tmp_path / "y.idx"), "--n", "1", "--out", str(out)]) == 0
    assert _load(out / "samples.idx").shape == (2, 1, 16)
    assert not (out / "std.idx").exists()
    out2 = tmp_path / "s2"
    assert main(["sample", str(tmp_path / "v.pae"), str(tmp_path / "y.idx"), "--n", "4", "--out", str(out2)]) == 0
    assert (out2 / "std.idx").exists()
    assert main(["sample", str(tmp_path / "p.pae"), str(tmp_path / "y.idx"), "--out", str(tmp_path / "s3")]) == 2


def test_export_latents(tmp_path, rng):
    save_model(str(tmp_path / "p.pae"), build_paired(16, 16, 3, 2, (6,), rng))
    save_idx(str(tmp_path / "x.idx"), rng.random((4, 4, 4)))
    save_idx(str(tmp_path / "lab.idx"), np.array([3, 1, 4, 1], dtype=np.uint8), ubyte=True)
    out = tmp_path / "lat"
    assert main(["export-latents", str(tmp_path / "p.pae"), str(tmp_path / "x.idx"), "--labels",
                 str(tmp_path / "lab.idx"), "--out", str(out)]) == 0
    rows = _rows(out / "latents.csv")
    assert rows[0] == ["z0", "z1", "z2", "label"] and [r[-1] for r in rows[1:]] == ["3", "1", "4", "1"]
    save_idx(str(tmp_path / "empty.idx"), np.zeros((0, 4, 4)))
    out2 = tmp_path / "lat2"
    assert main(["export-latents", str(tmp_path / "p.pae"), str(tmp_path / "empty.idx"), "--space", "y",
                 "--out", str(out2)]) == 0
    assert _rows(out2 / "latents.csv") == [["z0", "z1"]]
