import numpy as np
import pytest

from refgroup.cli import main
from refgroup.config import RunConfig
from refgroup.harness import (ABLATIONS, LOG_HEADER, NonFiniteLossError, _check_finite, build_splits, dump_masks,
                              evaluate, learning_rate, load_model, read_pgm, run_ablation, train, variant_config,
                              write_pgm)
from refgroup.metrics import read_metrics_csv
from refgroup.objectives import total_loss
from refgroup.params import read_checkpoint
from refgroup.synth import SHAPES


def tiny(**kw):
    base = dict(data__image_size=32, data__n_train=8, data__n_val=4, data__n_test=4, train__epochs=1,
                train__batch_size=4, model__n_tokens=4)
    base.update(kw)
    return RunConfig().replace(**base)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return train(tiny(), out), out


def test_one_epoch_round_trip(trained):
    res, out = trained
    lines = (out / "train.log").read_text().splitlines()
    assert lines[0] == LOG_HEADER
    assert len(lines) == 2
    fields = lines[1].split("\t")
    assert len(fields) == 5 and all(np.isfinite(float(x)) for x in fields)
    direct = evaluate_model_metrics(res.model, res.splits["val"])
    again = evaluate(out / "model.ckpt", "val")
    assert again.metrics.ious == direct.ious


def evaluate_model_metrics(model, samples):
    from refgroup.harness import evaluate_model
    return evaluate_model(model, samples).metrics


def test_checkpoint_carries_config(trained):
    res, out = trained
    meta, state = read_checkpoint(out / "model.ckpt")
    assert RunConfig.from_single_line(meta["config"]) == res.model.config
    model = load_model(out / "model.ckpt")
    for k, t in res.model.store:
        assert model.store[k].data.tobytes() == t.data.tobytes()


def test_same_seed_identical_logs(tmp_path):
    cfg = tiny(train__epochs=2)
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    assert a.log_lines == b.log_lines
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()


def test_different_seed_differs(tmp_path):
    a = train(tiny(), None)
    b = train(tiny(train__seed=1), None)
    assert a.log_lines != b.log_lines


def test_loss_decreases_over_training():
    res = train(tiny(train__epochs=6, data__n_train=16), None)
    rows = [line.split("\t") for line in res.log_lines[1:]]
    total = [float(r[1]) + float(r[2]) for r in rows]
    assert total[-1] < total[0]


def test_non_finite_loss_is_named():
    rep = total_loss(float("nan"), [0.1, 0.2, 0.3])
    with pytest.raises(NonFiniteLossError, match="l_cl"):
        _check_finite(rep)


def test_cosine_schedule():
    tc = RunConfig().train
    assert learning_rate(tc, 0, 100) == tc.lr
    assert learning_rate(tc, 50, 100) == pytest.approx(tc.lr / 2)
    const = RunConfig().replace(train__schedule="constant").train
    assert learning_rate(const, 70, 100) == const.lr


def test_generalization_splits_exclude_unseen_from_train():
    cfg = tiny(data__unseen=("ring", "bar"), data__n_train=30)
    splits = build_splits(cfg)
    unseen = {SHAPES.index("ring"), SHAPES.index("bar")}
    assert all(s.referent_category not in unseen for s in splits["train"])
    assert splits["val-unseen"] and all(s.referent_category in unseen for s in splits["val-unseen"])
    assert splits["val"] is splits["val-seen"]


# ---- ablation ladder ------------------------------------------------------------

def test_variant_flags_only_touch_mechanism_switches():
    base = RunConfig()
    mechanism = {"model.tokens", "model.grouping", "model.stages", "model.affinity", "loss.contrastive",
                 "decoder.mode", "tau.mode"}
    ref = dict(base.items())
    for name in ABLATIONS:
        changed = {k for k, v in variant_config(base, name).items() if ref[k] != v}
        assert changed <= mechanism, (name, changed)
    assert variant_config(base, "7-full") == base


def test_ablation_csv(tmp_path):
    res = run_ablation(tiny(), tmp_path)
    rows = read_metrics_csv((tmp_path / "ablation.csv").read_text())
    assert list(rows) == list(ABLATIONS)
    assert len(rows) == 9
    for name, r in rows.items():
        assert r["miou"] == pytest.approx(res[name].metrics.miou, abs=5e-7)


# ---- mask dumps ------------------------------------------------------------------

def test_pgm_round_trip(tmp_path):
    arr = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    write_pgm(tmp_path / "x.pgm", arr)
    np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), arr)


def test_dump_masks(trained, tmp_path):
    res, out = trained
    files = dump_masks(out / "model.ckpt", "val", tmp_path / "masks")
    n = len(res.splits["val"])
    assert len(files) == 3 * n
    for i, s in enumerate(res.splits["val"]):
        gt = read_pgm(tmp_path / "masks" / f"{i:04d}_gt.pgm")
        np.testing.assert_array_equal(gt > 0, s.gt_mask)
        groups = read_pgm(tmp_path / "masks" / f"{i:04d}_groups.pgm")
        assert groups.shape == s.gt_mask.shape
        assert len(np.unique(groups)) <= res.model.n_tokens
        assert set(np.unique(read_pgm(tmp_path / "masks" / f"{i:04d}_pred.pgm"))) <= {0, 255}


# ---- command line ------------------------------------------------------------------

def write_tiny_config(path, **kw):
    path.write_text(tiny(**kw).to_text())
    return path


def test_cli_train_eval_dump(tmp_path, capsys):
    cfg = write_tiny_config(tmp_path / "c.txt")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "model.ckpt").exists()
    assert main(["eval", "--ckpt", str(tmp_path / "run" / "model.ckpt"), "--split", "test",
                 "--out", str(tmp_path / "ev")]) == 0
    text = (tmp_path / "ev" / "metrics.csv").read_text()
    assert text.startswith("split,n,miou,oiou,p50,p70,p90\ntest,4,")
    assert main(["dump-masks", "--ckpt", str(tmp_path / "run" / "model.ckpt"), "--split", "test",
                 "--out", str(tmp_path / "m"), "--limit", "2"]) == 0
    assert len(list((tmp_path / "m").glob("*.pgm"))) == 6


def test_cli_seed_flag_overrides_config(tmp_path):
    cfg = write_tiny_config(tmp_path / "c.txt")
    main(["--seed", "7", "train", "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert "train.seed = 7" in (tmp_path / "run" / "config.txt").read_text()


def test_cli_gen_data(tmp_path):
    cfg = write_tiny_config(tmp_path / "c.txt")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    vocab = (tmp_path / "d" / "vocab.txt").read_text().split()
    assert vocab[:2] == ["circle", "square"]
    rows = (tmp_path / "d" / "train" / "expressions.tsv").read_text().strip().split("\n")
    assert len(rows) == 9
    assert (tmp_path / "d" / "train" / "0000_image.ppm").read_bytes().startswith(b"P6\n32 32\n255\n")


def test_cli_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_cli_rejects_unknown_key(tmp_path):
    with pytest.raises(Exception):
        main(["train", "--set", "model.bogus=1", "--out", str(tmp_path)])
