"""Training, benchmark cost model and the command line, at toy sizes."""
import csv
import filecmp
import io
import math
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from rgbtrack import bench, checkpoint as ckpt, cli, config, synth
from rgbtrack.backbone import ModelConfig
from rgbtrack.errors import DataError
from rgbtrack.model import RGBTModel
from rgbtrack.train import Optimizer, TripletSampler, epoch_rng, sample_frames, train

TINY_CFG = """\
patch=8
dim=8
heads=2
depth=3
mlp_ratio=1.0
prune_layers=2
tdtb_layers=2
template_size=16
search_size=32
samples_per_epoch=8
batch_size=4
epochs=3
gen_sequences=2
gen_frames=8
gen_frame_size=64
bench_frames=1
bench_warmup=0
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert cli.main(["gen", "--config", str(root / "tiny.cfg"), "--out", str(root / "data")]) == 0
    return root


def run_cli(*args):
    proc = subprocess.run([sys.executable, "-m", "rgbtrack.cli", *args], capture_output=True, text=True)
    return proc.returncode, proc.stdout, proc.stderr


# -- training ----------------------------------------------------------------

def test_sample_frames_order(rng):
    for _ in range(500):
        n = int(rng.integers(3, 40))
        a, b, c = sample_frames(rng, n, 5)
        assert 0 <= a < b < c < n and c - b <= 5
    with pytest.raises(DataError):
        sample_frames(rng, 2, 5)


def test_sampler_shapes_and_target_range(workdir):
    cfg = config.load(workdir / "tiny.cfg")
    sampler = TripletSampler(synth.find_sequences(workdir / "data"), cfg)
    rgb, tir, gt = sampler.batch(np.random.default_rng(0), 5)
    assert [a.shape for a in rgb] == [(5, 16, 16, 3), (5, 16, 16, 3), (5, 32, 32, 3)]
    assert [a.shape for a in tir] == [(5, 16, 16), (5, 16, 16), (5, 32, 32)]
    assert gt.shape == (5, 4) and gt.min() >= 1e-3 and gt.max() <= 1.0
    again = sampler.batch(np.random.default_rng(0), 5)
    assert all(np.array_equal(x, y) for x, y in zip(rgb + tir, again[0] + again[1]))


def test_epoch_rng_streams_differ():
    a, b = epoch_rng(1, 0).random(4), epoch_rng(1, 1).random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, epoch_rng(1, 0).random(4))


def test_parameter_groups_keep_the_lr_ratio():
    cfg = config.parse_text(TINY_CFG)
    model = RGBTModel(cfg.model_config())
    opt = Optimizer(model, cfg)
    back, rest = opt.groups
    assert back.lr * 10 == pytest.approx(rest.lr)
    assert {id(p) for p in back.params} == {id(p) for p in model.backbone_params()}
    assert len(back.params) + len(rest.params) == len(list(model.parameters()))
    assert opt.lr_scale(0) == 1.0 and opt.lr_scale(cfg.epochs - 1) == pytest.approx(cfg.lr_decay_factor)
    moved = Optimizer(model, replace(cfg, bridge_lr_group="backbone"))
    bridges = {id(p) for n, p in model.named_parameters() if n.startswith("backbone.bridges.")}
    assert bridges and bridges <= {id(p) for p in moved.groups[0].params}
    assert not bridges & {id(p) for p in back.params}


def test_one_epoch_smoke(workdir, tmp_path):
    cfg = config.load(workdir / "tiny.cfg")
    _, hist = train(cfg, workdir / "data", tmp_path, epochs=1)
    assert len(hist) == 1 and math.isfinite(hist[0].loss)
    rows = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert [r["epoch"] for r in rows] == ["1"]


def test_resume_matches_uninterrupted_run(workdir, tmp_path):
    cfg = config.load(workdir / "tiny.cfg")
    _, full = train(cfg, workdir / "data", tmp_path / "a")
    train(cfg, workdir / "data", tmp_path / "b", epochs=1)
    _, resumed = train(cfg, workdir / "data", tmp_path / "b")
    # epochs 2.. are recomputed after the resume and must match exactly
    assert [h.loss for h in resumed[1:]] == [h.loss for h in full[1:]]
    assert (tmp_path / "a/checkpoint.btmt").read_bytes() == (tmp_path / "b/checkpoint.btmt").read_bytes()
    assert (tmp_path / "a/train_log.csv").read_text() == (tmp_path / "b/train_log.csv").read_text()


def test_train_without_data_errors(tmp_path):
    with pytest.raises(DataError):
        train(config.parse_text(TINY_CFG), tmp_path / "nothing", tmp_path / "out")


# -- cost model --------------------------------------------------------------

def test_full_schedule_token_column():
    rows = bench.cost_rows(ModelConfig(), "tmce")
    assert [r.n_search for r in rows] == [256] * 4 + [180] * 3 + [126] * 3 + [89] * 2


def test_ratio_one_matches_no_pruning():
    cfg = ModelConfig(keep_ratio=1.0)
    assert bench.cost_rows(cfg) == bench.cost_rows(cfg, "none")


def test_flop_totals_closed_form():
    cfg = ModelConfig()
    counts = [256] * 4 + [180] * 3 + [126] * 3 + [89] * 2
    c, nz = cfg.dim, 2 * 64

    def layer(n):
        n += nz
        return 2 * (4 * n * c * c + 2 * n * n * c)

    rows = list(csv.reader(io.StringIO(bench.cost_report(cfg))))
    total = next(r for r in rows if r[0] == "total")
    assert int(total[2]) == 12 * layer(256)
    assert int(total[4]) == sum(layer(n) for n in counts)
    ratio = next(r for r in rows if r[0] == "ratio")
    assert ratio[4] == f"{sum(layer(n) for n in counts) / (12 * layer(256)):.6f}"


def test_throughput_report_columns():
    cfg = ModelConfig(**dict(patch=8, dim=8, heads=2, depth=3, mlp_ratio=1.0, prune_layers=(2,),
                             tdtb_layers=(2,), template_size=16, search_size=32))
    rows, text = bench.throughput_report(cfg, frames=1, warmup=0)
    assert [r.strategy for r in rows] == ["none", "tmce"]
    assert text.splitlines()[0].endswith("speedup") and all(r.seconds_per_frame > 0 for r in rows)


# -- command line ------------------------------------------------------------

def test_gen_is_deterministic_across_suites(workdir, tmp_path):
    assert cli.main(["gen", "--config", str(workdir / "tiny.cfg"), "--out", str(tmp_path)]) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [f"{s}_{i:04d}" for s in ("clean", "low_light", "thermal_crossover") for i in range(2)]
    cmp = filecmp.dircmp(workdir / "data", tmp_path)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        assert not sub.diff_files and not sub.left_only and not sub.right_only
        _, mismatch, errors = filecmp.cmpfiles(sub.left, sub.right, sub.common_files, shallow=False)
        assert not mismatch and not errors


def test_seed_flag_changes_data(workdir, tmp_path):
    cli.main(["gen", "--config", str(workdir / "tiny.cfg"), "--seed", "3", "--out", str(tmp_path)])
    a = (workdir / "data/clean_0000/rgb/000001.ppm").read_bytes()
    assert (tmp_path / "clean_0000/rgb/000001.ppm").read_bytes() != a


def test_bad_key_is_a_one_line_error(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs=2\nlearning_rate=0.1\n")
    code, _, err = run_cli("gen", "--config", str(bad), "--out", str(tmp_path / "o"))
    assert code != 0 and "learning_rate" in err
    assert len(err.strip().splitlines()) == 1


def test_config_echo_is_printed_and_stable(workdir, tmp_path):
    outs = [run_cli("bench-prune", "--analytic-only", "--config", str(workdir / "tiny.cfg"),
                    "--out", str(tmp_path / f"b{i}")) for i in range(2)]
    assert outs[0][0] == 0 and outs[0][1] == outs[1][1]
    echo = config.load(workdir / "tiny.cfg").echo()
    assert outs[0][1].startswith(echo)
    assert (tmp_path / "b0/cost_model.csv").read_bytes() == (tmp_path / "b1/cost_model.csv").read_bytes()


def test_missing_checkpoint_errors(workdir, tmp_path):
    code, _, err = run_cli("track", "--config", str(workdir / "tiny.cfg"), "--checkpoint",
                           str(tmp_path / "none.btmt"), "--sequences", str(workdir / "data"))
    assert code == 2 and "checkpoint not found" in err and len(err.strip().splitlines()) == 1


def test_train_track_eval_round(workdir, tmp_path, capsys):
    c = str(workdir / "tiny.cfg")
    assert cli.main(["train", "--config", c, "--data", str(workdir / "data"), "--out", str(tmp_path / "run")]) == 0
    ck = tmp_path / "run/checkpoint.btmt"
    assert cli.main(["track", "--config", c, "--checkpoint", str(ck), "--sequences", str(workdir / "data"),
                     "--out", str(tmp_path / "res")]) == 0
    seqs = synth.find_sequences(workdir / "data")
    for s in seqs:
        boxes = synth.read_boxes(tmp_path / f"res/{s.name}.txt")
        assert len(boxes) == len(s)
        assert np.allclose(boxes[0], s.gt[0], atol=1e-3)
    assert cli.main(["eval", "--config", c, "--results", str(tmp_path / "res"),
                     "--sequences", str(workdir / "data")]) == 0
    assert (tmp_path / "res/metrics.csv").is_file() and (tmp_path / "res/metrics.txt").is_file()
    assert "overall" in capsys.readouterr().out


def test_eval_missing_results_errors(workdir, tmp_path):
    code, _, err = run_cli("eval", "--config", str(workdir / "tiny.cfg"), "--results", str(tmp_path),
                           "--sequences", str(workdir / "data"))
    assert code == 2 and len(err.strip().splitlines()) == 1


CLEAN_RUN = """\
patch=8
dim=32
heads=2
depth=12
template_size=32
search_size=64
samples_per_epoch=2048
gen_suites=clean
gen_sequences=67
"""


@pytest.mark.slow
def test_clean_suite_loss_mostly_decreases(tmp_path):
    """Default momentum-SGD recipe, 20 epochs: at least 15 of 19 epoch-to-epoch steps go down."""
    cfg = tmp_path / "clean.cfg"
    cfg.write_text(CLEAN_RUN)
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(tmp_path / "data"),
                     "--out", str(tmp_path / "run")]) == 0
    losses = [float(r["loss"]) for r in csv.DictReader(open(tmp_path / "run/train_log.csv"))]
    assert len(losses) == 20
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    print(f"\n[clean suite] {drops}/19 decreasing epochs: {[round(v, 4) for v in losses]}")
    assert drops >= 15
