"""Acceptance criteria 1-10, each checked at its stated tolerance.

The desk-preset pipeline (gen-data -> train -> sweep, then an adapter
fine-tune) runs once per session through the CLI and feeds criteria 3, 4, 5, 7
and 10. Every attack issued anywhere in this module is recorded and audited
for criterion 7.
"""

import dataclasses
import json
import math
import time

import numpy as np
import pytest

import advseg.tensor as T
from advseg import attack as A
from advseg import data as D
from advseg import model as M
from advseg.harness import cli
from advseg.harness.config import preset
from advseg.harness.evaluate import evaluate, read_report_csv
from advseg.harness.optim import lr_at
from advseg.objective import combined_loss, dsc, iou, per_sample_loss
from advseg.tensor import Tensor, grad_check

EPSILONS = (0.01, 0.03, 0.1, 0.5)
BOUND_SLACK = 1e-6


@pytest.fixture(scope="module")
def attack_audit():
    """Wraps the attack entry points so every call's output is checked for criterion 7."""
    calls = []
    originals = {name: getattr(A, name) for name in ("fgsm", "pgd")}
    mp = pytest.MonkeyPatch()

    def record(name):
        fn = originals[name]

        def wrapped(loss_fn, image, arg):
            res = fn(loss_fn, image, arg)
            eps = arg if name == "fgsm" else arg.epsilon
            x0 = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
            adv = res.adversarial_image.astype(np.float64)
            calls.append((name, eps, float(np.abs(adv - x0).max()), float(adv.min()), float(adv.max())))
            return res
        return wrapped

    for name in originals:
        mp.setattr(A, name, record(name))
    yield calls
    mp.undo()


def _cpu():
    return time.process_time()


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory, attack_audit):
    out = tmp_path_factory.mktemp("desk")
    ft_cfg = out / "finetune.cfg"
    ft_cfg.write_text("[train]\nmode = adapter-finetune\n")
    base = ["--preset", "desk", "--out", str(out), "--seed", "0"]
    timings = {}
    t0 = _cpu()
    assert cli.run_cli(["gen-data", *base]) == 0
    timings["gen-data"] = _cpu() - t0
    t0 = _cpu()
    assert cli.run_cli(["train", *base]) == 0
    timings["train"] = _cpu() - t0
    t0 = _cpu()
    assert cli.run_cli(["sweep", *base]) == 0
    timings["sweep"] = _cpu() - t0
    t0 = _cpu()
    assert cli.run_cli(["train", *base, "--config", str(ft_cfg)]) == 0
    timings["finetune"] = _cpu() - t0
    report = json.loads((out / "report.json").read_text())
    rows = {(r["attack"], r["epsilon"]): r for r in report["rows"]}
    return {"out": out, "timings": timings, "rows": rows, "csv": read_report_csv(out / "report.csv"),
            "config": preset("desk")}


# -- 1 -------------------------------------------------------------------------------

def _op_cases():
    """(name, fn(rng) -> (scalar fn, point, h)) for every differentiable op."""
    linear_h, smooth_h = 1e-3, 1e-4

    def probe(rng, shape):
        w = Tensor(rng.normal(size=shape))
        return lambda y: T.reduce("sum", y * w)

    def unary(op, shape=(3, 4), kink=False):
        def make(rng):
            x = rng.uniform(-2, 2, shape)
            if kink:
                x = np.where(np.abs(x) < 1e-3, 0.1, x)
            p = probe(rng, op(Tensor(x)).shape)
            return (lambda t: p(op(t))), x, smooth_h
        return make

    def binary(op, which):
        def make(rng):
            a, b = rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, (2, 3))
            p = probe(rng, (2, 3))
            if which == 0:
                return (lambda t: p(op(t, Tensor(b)))), a, smooth_h
            return (lambda t: p(op(Tensor(a), t))), b, smooth_h
        return make

    def conv(which):
        def make(rng):
            x, k = rng.uniform(-2, 2, (1, 2, 5, 5)), rng.uniform(-2, 2, (3, 2, 3, 3))
            stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
            p = probe(rng, T.conv2d(Tensor(x), Tensor(k), stride, pad).shape)
            if which == 0:
                return (lambda t: p(T.conv2d(t, Tensor(k), stride, pad))), x, linear_h
            return (lambda t: p(T.conv2d(Tensor(x), t, stride, pad))), k, linear_h
        return make

    def matmul(which):
        def make(rng):
            a, b = rng.uniform(-2, 2, (4, 5)), rng.uniform(-2, 2, (5, 3))
            p = probe(rng, (4, 3))
            if which == 0:
                return (lambda t: p(T.matmul(t, Tensor(b)))), a, linear_h
            return (lambda t: p(T.matmul(Tensor(a), t))), b, linear_h
        return make

    def embedding(rng):
        ids = rng.integers(0, 4, (2, 3))
        p = probe(rng, (2, 3, 5))
        return (lambda t: p(T.embedding(t, ids))), rng.uniform(-2, 2, (4, 5)), linear_h

    safe_div = lambda a, b: T.div(a, T.abs(b) + 0.5)
    return [
        ("add", binary(T.add, 0)), ("add/b", binary(T.add, 1)),
        ("sub", binary(T.sub, 0)), ("sub/b", binary(T.sub, 1)),
        ("mul", binary(T.mul, 0)), ("mul/b", binary(T.mul, 1)),
        ("div", binary(safe_div, 0)), ("div/b", binary(lambda a, b: T.div(a, T.exp(b)), 1)),
        ("neg", unary(T.neg)), ("scale", unary(lambda a: T.scale(a, 0.7))),
        ("relu", unary(T.relu, kink=True)), ("sigmoid", unary(T.sigmoid)),
        ("softplus", unary(T.softplus)), ("exp", unary(T.exp)),
        ("abs", unary(T.abs, kink=True)), ("log", unary(lambda a: T.log(T.exp(a) + 0.1))),
        ("sum", unary(lambda a: T.reduce("sum", a, axes=1))), ("mean", unary(lambda a: T.reduce("mean", a))),
        ("reshape", unary(lambda a: T.reshape(a, (2, 6)))), ("transpose", unary(lambda a: T.transpose(a))),
        ("expand", unary(lambda a: T.expand(T.reshape(a, (1, 3, 4)), (2, 3, 4)))),
        ("matmul/a", matmul(0)), ("matmul/b", matmul(1)),
        ("conv2d/x", conv(0)), ("conv2d/k", conv(1)),
        ("avg_pool2d", unary(lambda a: T.avg_pool2d(a, 2), shape=(1, 2, 4, 4))),
        ("upsample", unary(lambda a: T.upsample_nearest(a, 2), shape=(1, 2, 2, 3))),
        ("embedding", embedding),
    ]


KINK_MARGIN = 1e-3
MODEL_STEPS = (1e-4, 1e-3)


def _model_rel_err(fn, point):
    """Per-coordinate relative error against the better-resolved of two central differences.

    Entries near 1e-9 drown in rounding at the small step and high-curvature entries in
    truncation at the large one; each coordinate is scored at whichever step resolves it.
    Returns (combined max error, max error at the small step alone).
    """
    analytic = T.analytic_gradient(fn, point)
    errs = []
    for h in MODEL_STEPS:
        numeric = T.numerical_gradient(fn, point, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
        errs.append(np.abs(analytic - numeric) / denom)
    return float(np.minimum(*errs).max()), float(errs[0].max())


def _relu_margin(forward) -> float:
    """Smallest |relu input| seen while running ``forward``."""
    seen = [np.inf]
    original = T.relu

    def spy(a):
        seen[0] = min(seen[0], float(np.abs(a.data).min()))
        return original(a)

    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(T, "relu", spy)
        forward()
    return seen[0]


def test_criterion_01_gradient_fidelity(acceptance_log, tiny_config):
    t0 = _cpu()
    rng = np.random.default_rng(2024)
    worst, n_checks = {}, 0
    for name, make in _op_cases():
        for _ in range(20):
            fn, point, h = make(rng)
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, point, h))
            n_checks += 1
    model_worst = single_step_worst = 0.0
    rejected = instances = 0
    while instances < 20:
        # realistic model states: Glorot weights, with biases and adapter up-projections
        # made non-zero so every path carries gradient
        params = M.init_params(dataclasses.replace(tiny_config, seed=int(rng.integers(2**31))))
        params = params.replace({n: rng.uniform(-0.3, 0.3, a.shape) for n, a in params.arrays.items()
                                 if n.endswith(".b") or n.endswith("adapter.up")})
        leaves = params.leaves()
        img = rng.random((1, 3, 8, 8))
        toks = np.array([[2, 3, int(rng.integers(4, 7)), 0]])
        target = (rng.random((1, 1, 8, 8)) > 0.5).astype(float)
        # the loss is piecewise smooth; a relu input within reach of the stencil makes the
        # central difference straddle a kink, so such draws are redrawn
        if _relu_margin(lambda: M.forward_batch(img, toks, leaves, tiny_config)) < KINK_MARGIN:
            rejected += 1
            continue
        instances += 1
        checks = [(lambda x: combined_loss(M.forward_batch(x, toks, leaves, tiny_config), target), img)]
        for name in params.names():
            checks.append(((lambda nm: lambda t: combined_loss(
                M.forward_batch(img, toks, {**leaves, nm: t}, tiny_config), target))(name), params[name]))
        for fn, point in checks:
            err, single = _model_rel_err(fn, point)
            model_worst = max(model_worst, err)
            single_step_worst = max(single_step_worst, single)
            n_checks += 1
    elapsed = _cpu() - t0
    op_worst = max(worst.values())
    ok = op_worst < 1e-5 and model_worst < 1e-5 and elapsed < 120
    acceptance_log(1, ok, f"{len(worst)} ops + full model loss ({instances} instances, {rejected} redrawn "
                          f"near a relu kink), {n_checks} checks; max rel err ops {op_worst:.2e}, model "
                          f"{model_worst:.2e} (h=1e-4 alone {single_step_worst:.2e}); {elapsed:.1f}s CPU (limit 120s)")
    assert ok, {k: v for k, v in worst.items() if v >= 1e-5}


# -- 2 -------------------------------------------------------------------------------

def test_criterion_02_metric_identity(acceptance_log):
    rng = np.random.default_rng(99)
    worst, ordered = 0.0, True
    for _ in range(1000):
        shape = tuple(rng.integers(1, 33, size=2))
        p = (rng.random(shape) < rng.random()).astype(np.uint8)
        t = (rng.random(shape) < rng.random()).astype(np.uint8)
        d, j = dsc(p, t), iou(p, t)
        worst = max(worst, abs(j - d / (2 - d)))
        ordered &= 0 <= j <= d <= 1
    ok = worst <= 1e-12 and ordered
    acceptance_log(2, ok, f"1000 pairs; max |iou - dsc/(2-dsc)| = {worst:.1e} (limit 1e-12); "
                          f"0<=iou<=dsc<=1 {'holds' if ordered else 'violated'}")
    assert ok


# -- 3 -------------------------------------------------------------------------------

def test_criterion_03_clean_training_and_finetune(acceptance_log, desk_run):
    out, cfg = desk_run["out"], desk_run["config"]
    clean = float(desk_run["rows"][("none", 0.0)]["dsc_pct"])
    shift_test = D.load_triplets(out / "data" / "shift-test", D.DEFAULT_VOCAB, cfg.model.image_size,
                                 cfg.model.context_length)
    frozen = evaluate(M.load_checkpoint(out / "checkpoint.ckpt", cfg.model), shift_test, cfg.model)
    tuned = evaluate(M.load_checkpoint(out / "adapter.ckpt", cfg.model), shift_test, cfg.model)
    gain = tuned.row("none").dsc_pct - frozen.row("none").dsc_pct
    cpu = desk_run["timings"]["train"] + desk_run["timings"]["finetune"]
    ok = clean >= 90 and gain >= 5 and cpu < 15 * 60
    acceptance_log(3, ok, f"clean test DSC {clean:.2f}% (>=90); shifted split frozen "
                          f"{frozen.row('none').dsc_pct:.2f}% -> adapters {tuned.row('none').dsc_pct:.2f}% "
                          f"(+{gain:.2f}, >=5); train+finetune {cpu:.0f}s CPU (<900s)")
    assert ok


# -- 4 -------------------------------------------------------------------------------

def test_criterion_04_attack_efficacy(acceptance_log, desk_run):
    rows = desk_run["rows"]
    clean = rows[("none", 0.0)]["dsc_pct"]
    fgsm = [rows[("fgsm", e)]["dsc_pct"] for e in EPSILONS]
    drop = clean - fgsm[EPSILONS.index(0.1)]
    monotone = all(b <= a + 2.0 for a, b in zip(fgsm, fgsm[1:]))
    ok = drop >= 20 and monotone
    acceptance_log(4, ok, f"FGSM eps=0.1 drop {drop:.2f} points (>=20); FGSM DSC over eps "
                          f"{[round(v, 2) for v in fgsm]} non-increasing within 2 points: {monotone}")
    assert ok


def test_attacks_never_help(desk_run):
    rows = desk_run["rows"]
    clean = rows[("none", 0.0)]
    for (kind, eps), row in rows.items():
        assert row["dsc_pct"] <= clean["dsc_pct"] + 2
        if kind != "none" and eps >= 0.1:
            recs = row["records"]
            assert np.mean([r["loss_after"] for r in recs]) > np.mean([r["loss_before"] for r in recs])


def test_prompt_changes_trained_logits(desk_run):
    cfg = desk_run["config"].model
    params = M.load_checkpoint(desk_run["out"] / "checkpoint.ckpt", cfg)
    sample = D.load_triplets(desk_run["out"] / "data" / "test", D.DEFAULT_VOCAB, 64, 16)[0]
    a = M.forward(sample.image, D.tokenize("segment the circle"), params, cfg).data
    b = M.forward(sample.image, D.tokenize("segment the square"), params, cfg).data
    assert np.abs(a - b).max() > 0


# -- 5 -------------------------------------------------------------------------------

def test_criterion_05_pgd_strength(acceptance_log, desk_run):
    f = desk_run["rows"][("fgsm", 0.1)]["records"]
    p = desk_run["rows"][("pgd", 0.1)]["records"]
    assert [r["id"] for r in f] == [r["id"] for r in p]
    frac = sum(b["loss_after"] >= a["loss_after"] for a, b in zip(f, p)) / len(f)
    ok = frac >= 0.9
    acceptance_log(5, ok, f"PGD(T=40) loss >= FGSM loss at eps=0.1 on {100 * frac:.1f}% of "
                          f"{len(f)} test samples (>=90%)")
    assert ok


# -- 6 -------------------------------------------------------------------------------

def test_criterion_06_fgsm_pgd_equivalence(acceptance_log, tiny_config, attack_audit):
    rng = np.random.default_rng(6)
    configs = [tiny_config, dataclasses.replace(tiny_config, dtype="float32")]
    identical = 0
    for trial in range(100):
        cfg = configs[trial % 2]
        params = M.init_params(dataclasses.replace(cfg, seed=trial))
        params = params.replace({n: rng.uniform(-0.7, 0.7, a.shape) for n, a in params.arrays.items()})
        leaves = params.leaves()
        img = rng.random((1, 3, 8, 8)).astype(cfg.np_dtype)
        toks = np.array([[2, 3, int(rng.integers(4, 7)), 0]])
        mask = (rng.random((1, 1, 8, 8)) > 0.6).astype(cfg.np_dtype)
        loss = lambda x: T.reduce("sum", per_sample_loss(M.forward_batch(x, toks, leaves, cfg), mask))
        eps = float(rng.uniform(0.001, 0.6))
        a = A.fgsm(loss, img, eps).adversarial_image
        b = A.pgd(loss, img, A.AttackConfig(kind="pgd", epsilon=eps, alpha=eps, steps=1)).adversarial_image
        identical += a.dtype == b.dtype and a.tobytes() == b.tobytes()
    ok = identical == 100
    acceptance_log(6, ok, f"PGD(T=1, alpha=eps) bitwise equal to FGSM on {identical}/100 random triples")
    assert ok


# -- 7 -------------------------------------------------------------------------------

def test_criterion_07_bounds(acceptance_log, desk_run, attack_audit, tiny_config):
    # extra random-start PGD calls so that code path is audited too
    rng = np.random.default_rng(7)
    params = M.init_params(tiny_config).leaves()
    for seed in range(10):
        img = rng.random((1, 3, 8, 8))
        toks = np.array([[2, 3, 4, 0]])
        loss = lambda x: T.reduce("sum", per_sample_loss(M.forward_batch(x, toks, params, tiny_config),
                                                          np.ones((1, 1, 8, 8))))
        A.pgd(loss, img, A.AttackConfig(kind="pgd", epsilon=float(rng.uniform(0, 0.5)), steps=3,
                                        random_start=True, seed=seed))
    violations = [c for c in attack_audit
                  if c[2] > c[1] + BOUND_SLACK or c[3] < 0 or c[4] > 1]
    kinds = {c[0] for c in attack_audit}
    ok = not violations and kinds == {"fgsm", "pgd"} and len(attack_audit) > 100
    acceptance_log(7, ok, f"{len(attack_audit)} attack invocations audited; {len(violations)} violations of "
                          f"linf <= eps + 1e-6 or range [0,1]")
    assert ok, violations[:5]


# -- 8 -------------------------------------------------------------------------------

def test_criterion_08_schedule(acceptance_log):
    paper = preset("paper").train
    W = paper.warmup_epochs
    warm_end = lr_at(W, paper)
    cos_start = paper.lr_final + (paper.lr_peak - paper.lr_final) * (1 + math.cos(0)) / 2
    jump = abs(warm_end - cos_start)
    ok = lr_at(20, paper) == 1e-3 and lr_at(200, paper) == 1e-5 and jump <= 1e-12
    ok &= abs(warm_end - paper.lr_peak) <= 1e-12
    acceptance_log(8, ok, f"lr_at(20)={lr_at(20, paper)!r}, lr_at(200)={lr_at(200, paper)!r}, "
                          f"junction gap {jump:.1e}")
    assert ok


# -- 9 -------------------------------------------------------------------------------

SMALL_CFG = """
[model]
image_size = 16
encoder_channels = 4 8
embed_dim = 8
adapter_dim = 8
[train]
epochs_total = 2
warmup_epochs = 1
batch_size = 8
[data]
n_train = 16
n_val = 4
n_test = 6
shift_n_train = 4
[attack]
steps = 3
dump_images = 1
"""


def test_criterion_09_determinism_and_persistence(acceptance_log, tmp_path, attack_audit):
    cfg_file = tmp_path / "small.cfg"
    cfg_file.write_text(SMALL_CFG)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        common = ["--config", str(cfg_file), "--out", str(out), "--seed", "11"]
        for cmd in ("gen-data", "train", "sweep"):
            assert cli.run_cli([cmd, *common]) == 0
        outs.append(out)
    same_ckpt = (outs[0] / "checkpoint.ckpt").read_bytes() == (outs[1] / "checkpoint.ckpt").read_bytes()
    same_csv = (outs[0] / "report.csv").read_bytes() == (outs[1] / "report.csv").read_bytes()
    same_json = (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()

    # round trip: evaluation from reloaded params equals evaluation from the in-memory ones
    from advseg.harness.config import load_config_file
    from advseg.harness.train import train
    run = load_config_file(cfg_file, preset("desk")).with_seed(11)
    load = lambda split: D.load_triplets(outs[0] / "data" / split, D.DEFAULT_VOCAB, 16, 16)
    params, _ = train(load("train"), run.model, run.train, load("val"))
    fresh = evaluate(params, load("test"), run.model).to_json()
    M.save_checkpoint(tmp_path / "rt.ckpt", params)
    reloaded = evaluate(M.load_checkpoint(tmp_path / "rt.ckpt", run.model), load("test"), run.model).to_json()
    same_bytes = M.checkpoint_bytes(params) == (outs[0] / "checkpoint.ckpt").read_bytes()
    ok = same_ckpt and same_csv and same_json and fresh == reloaded and same_bytes
    acceptance_log(9, ok, f"checkpoints identical: {same_ckpt}; CSV identical: {same_csv}; JSON identical: "
                          f"{same_json}; reload reproduces evaluation bitwise: {fresh == reloaded}")
    assert ok


# -- 10 ------------------------------------------------------------------------------

def test_criterion_10_end_to_end(acceptance_log, desk_run):
    csv_rows = desk_run["csv"]
    grid = [(r["attack"], r["epsilon"]) for r in csv_rows]
    expected = [("none", "0")] + [(k, repr(e)) for k in ("fgsm", "pgd") for e in EPSILONS]
    n_dump = desk_run["config"].attack.dump_images
    images = sorted((desk_run["out"] / "images").glob("*.ppm"))
    expected_images = n_dump * 2 * len(EPSILONS) * 3
    minutes = sum(desk_run["timings"][k] for k in ("gen-data", "train", "sweep")) / 60
    ok = len(csv_rows) == 1 + 2 * 4 and grid == expected and len(images) == expected_images and minutes < 30
    acceptance_log(10, ok, f"{len(csv_rows)} CSV rows (expect 9), {len(images)} image dumps "
                           f"(expect {expected_images}); gen-data+train+sweep {minutes:.1f} min CPU (<30)")
    assert ok
