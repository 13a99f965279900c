"""End-to-end acceptance checks; the toy training runs take most of an hour on one core."""

import csv
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
from ript import autodiff as ad
from ript import cli, geometry, io, synth
from ript import eval as ev
from ript.autodiff import Tensor
from ript.config import dump_config, load_config
from ript.sdmm import distill
from ript.sdmm.distill import ema_lambda, lr_schedule
from ript.sdmm.views import ViewBundle
from ript.tokenizer import TokenizerConfig
from ript.transformer import RIPT, Network, TransformerConfig

from test_eval import _oracle_map, _oracle_nmi

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.toml"
CLASSES = ("sphere", "box", "cylinder", "torus")
SEEDS = (0, 1, 2)


def report(n, ok, detail):
    conftest.ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(conftest.ACCEPTANCE[n])


class ToyRuns:
    """Synthetic data plus cached training runs of the toy config."""

    def __init__(self, root):
        self.root = root
        self.data = root / "data"
        code = cli.main(["synth", "--classes", *CLASSES, "--per-class", "40", "--test-per-class", "20",
                         "--n-points", "256", "--seed", "2024", "--out-dir", str(self.data)])
        assert code == 0
        self.runs = {}
        self.seconds = {}

    def train(self, seed=0, rotation="Nr", region_scale=1.0, views="full", tag=""):
        key = (seed, rotation, region_scale, views, tag)
        if key in self.runs:
            return self.runs[key]
        name = f"s{seed}_{rotation}_r{region_scale}_{views}{tag}"
        cfg = load_config(TOY_CONFIG)
        cfg.data.train_manifest = str(self.data / "train.tsv")
        cfg.data.test_manifest = str(self.data / "test.tsv")
        cfg.data.train_rotation = rotation
        cfg.tokenizer.region_scale = region_scale
        cfg.sdmm.use_local = cfg.sdmm.use_mixed = views == "full"
        cfg.run.seed = seed
        cfg.run.out_dir = str(self.root / name)
        cfg.validate()
        path = self.root / f"{name}.toml"
        path.write_text(dump_config(cfg))
        start = time.time()
        assert cli.main(["--log-level", "WARNING", "train", str(path)]) == 0
        self.seconds[key] = time.time() - start
        self.runs[key] = self.root / name
        return self.runs[key]

    def test_features(self, run, rotation, seed=7):
        out = run / f"test_{rotation}.bin"
        if not out.exists():
            code = cli.main(["--log-level", "WARNING", "extract", "--checkpoint", str(run / "final.ckpt"), "--manifest",
                             str(self.data / "test.tsv"), "--out", str(out), "--n-points", "256",
                             "--rotation", rotation, "--seed", str(seed)])
            assert code == 0
        feats, labels = io.read_features(out)
        return ev.FeatureTable(feats, labels)

    def macro_map(self, run, rotation="Nr"):
        return ev.macro_map(self.test_features(run, rotation))


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    return ToyRuns(tmp_path_factory.mktemp("toy"))


def _metrics(run):
    with open(run / "metrics.csv", newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------


def test_criterion_1_rotation_invariance(toy):
    start = time.time()
    cfg = load_config(TOY_CONFIG)
    rng = np.random.default_rng(11)
    classes = synth.SHAPES
    sets = [geometry.normalize_pose(synth.sample_shape(classes[i % len(classes)], 256, rng)) for i in range(100)]
    trained = toy.train(seed=0)
    models = {
        "init f64": RIPT(cfg.tokenizer, cfg.transformer, np.random.default_rng(0), np.float64),
        "init f32": RIPT(cfg.tokenizer, cfg.transformer, np.random.default_rng(0), np.float32),
        "trained f64": cli.load_encoder(trained / "final.ckpt", np.float64)[0],
        "trained f32": cli.load_encoder(trained / "final.ckpt", np.float32)[0],
    }
    tol = {"f64": 1e-6, "f32": 1e-3}
    describer = models["init f64"]

    def latents(point_sets):
        # descriptors are parameter-free, so all four encoders share them
        descs = [describer.describe(ps, 0) for ps in point_sets]
        with ad.no_grad():
            return {k: m.encode(descs).data.astype(np.float64) for k, m in models.items()}

    base = latents(sets)
    worst = {k: np.inf for k in models}
    for _ in range(100):
        rotated = [geometry.apply_rotation(ps, geometry.random_rotation(rng)) for ps in sets]
        for k, z in latents(rotated).items():
            worst[k] = min(worst[k], float(np.einsum("ij,ij->i", z, base[k]).min()))
    elapsed = time.time() - start - toy.seconds.get((0, "Nr", 1.0, "full", ""), 0.0)
    ok = all(worst[k] >= 1 - tol[k[-3:]] for k in models) and elapsed < 300
    detail = ", ".join(f"{k} min cos 1-{1 - v:.1e}" for k, v in worst.items())
    report(1, ok, f"{detail}; {elapsed:.0f}s")
    assert ok


def _relative_error(fn, arrays, rng, eps=1e-6, samples=12):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    C = rng.normal(size=out.shape)
    ad.backward(ad.sum(ad.mul(out, C)))

    def value(vals):
        with ad.no_grad():
            return float(np.sum(fn(*[Tensor(v) for v in vals]).data * C))

    worst = 0.0
    for k, t in enumerate(ts):
        fd, an = [], []
        for j in rng.choice(t.data.size, size=min(samples, t.data.size), replace=False):
            idx = np.unravel_index(j, t.shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k][idx] += eps
            minus[k][idx] -= eps
            fd.append((value(plus) - value(minus)) / (2 * eps))
            an.append(t.grad[idx])
        fd, an = np.array(fd), np.array(an)
        worst = max(worst, np.linalg.norm(fd - an) / max(np.linalg.norm(fd), np.linalg.norm(an), 1e-300))
    return worst


def _network_error(rng, eps=1e-6):
    tok = TokenizerConfig(token_count=8, grid=2, width=16)
    tr = TransformerConfig(block_k=[2, 4], latent=16)
    net = Network(tok, tr, [16, 16], 16, rng)
    descs = [net.encoder.describe(geometry.normalize_pose(synth.sample_shape(c, 64, rng)))
             for c in ("sphere", "box", "torus")]
    C = rng.normal(size=(3, 16))

    def value():
        with ad.no_grad():
            return float(np.sum(net(descs, training=True).data * C))

    ad.backward(ad.sum(ad.mul(net(descs, training=True), C)))
    worst = 0.0
    for name, p in net.named_parameters():
        fd, an = [], []
        for j in rng.choice(p.data.size, size=min(6, p.data.size), replace=False):
            idx = np.unravel_index(j, p.shape)
            old = p.data[idx]
            p.data[idx] = old + eps
            up = value()
            p.data[idx] = old - eps
            down = value()
            p.data[idx] = old
            fd.append((up - down) / (2 * eps))
            an.append(p.grad[idx])
        fd, an = np.array(fd), np.array(an)
        err = np.linalg.norm(fd - an)
        scale = max(np.linalg.norm(fd), np.linalg.norm(an))
        # batchnorm cancels a shift shared by every token, leaving some gradients exactly zero
        if scale < 1e-7:
            continue
        worst = max(worst, err / scale)
    return worst


def test_criterion_2_gradients():
    start = time.time()
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3, 5))
    kinkless = np.where(np.abs(x) < 1e-3, 0.5, x)
    rm, rv = rng.normal(size=5), rng.uniform(0.5, 2, 5)
    q = distill._softmax(rng.normal(size=(4, 6)))
    cases = {
        "add": (ad.add, [x, rng.normal(size=5)]),
        "sub": (ad.sub, [x, rng.normal(size=(4, 1, 5))]),
        "mul": (ad.mul, [x, rng.normal(size=(3, 1))]),
        "matmul": (ad.matmul, [rng.normal(size=(2, 4, 6)), rng.normal(size=(6, 3))]),
        "matmul batched": (ad.matmul, [rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 6, 3))]),
        "relu": (ad.relu, [kinkless]),
        "gelu": (ad.gelu, [x]),
        "exp": (ad.exp, [x]),
        "log": (ad.log, [rng.uniform(0.5, 2, (4, 5))]),
        "softmax": (lambda t: ad.softmax(t, axis=1), [x]),
        "sum": (lambda t: ad.sum(t, axis=2), [x]),
        "mean": (lambda t: ad.mean(t, axis=(0, 1), keepdims=True), [x]),
        "l2_normalize": (ad.l2_normalize, [x]),
        "reshape": (lambda t: ad.reshape(t, (12, 5)), [x]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [x, rng.normal(size=(4, 2, 5))]),
        "gather": (lambda t: ad.gather(t, np.array([3, 0, 3])), [x]),
        "batchnorm train": (lambda t, g, b: ad.batchnorm(t, g, b, np.zeros(5), np.ones(5), True),
                            [x, rng.normal(size=5), rng.normal(size=5)]),
        "batchnorm eval": (lambda t, g, b: ad.batchnorm(t, g, b, rm.copy(), rv.copy(), False),
                           [x, rng.normal(size=5), rng.normal(size=5)]),
        "cross_entropy": (lambda p: ad.cross_entropy(q, ad.softmax(p)), [rng.normal(size=(4, 6))]),
    }
    errors = {name: _relative_error(fn, arrays, rng) for name, (fn, arrays) in cases.items()}
    errors["composed network"] = _network_error(rng)
    elapsed = time.time() - start
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-4 for e in errors.values()) and elapsed < 120
    report(2, ok, f"{len(errors)} checks, worst relative error {errors[worst]:.1e} ({worst}); {elapsed:.0f}s")
    assert ok


def test_criterion_3_loss_structure():
    ok, details = True, []
    for H in (128, 1024):
        u = np.full(H, 1.0 / H)
        student = {v: Tensor(u) for v in ("G1", "G2", "L1", "L2", "M")}
        terms = distill.loss_terms({"G1": u, "G2": u}, student, distill.mix_labels(u, u, 0.3))
        multi = [n for n, _ in terms if n != "mix->M"]
        bundle = ViewBundle(None, None, None, None, None, m=0.3, partner_index=1)
        total = distill.sample_loss(bundle, {"G1": u, "G2": u, "partner": u}, student)
        err = abs(float(total.data) - 7 * math.log(H))
        ok &= len(multi) == 6 and len(terms) == 7 and err < 1e-9
        details.append(f"H={H}: {len(multi)}+{len(terms) - len(multi)} terms, |loss-7lnH|={err:.1e}")
    report(3, ok, "; ".join(details))
    assert ok


def test_criterion_4_schedules():
    checks = [lr_schedule(0) - 1e-4, lr_schedule(20) - 5e-4, lr_schedule(200) - 1e-4,
              ema_lambda(0, 5000) - 0.996, ema_lambda(5000, 5000) - 1.0]
    worst = max(abs(c) for c in checks)
    ok = worst < 1e-12
    report(4, ok, f"max endpoint deviation {worst:.1e}")
    assert ok


def test_criterion_5_toy_experiment(toy):
    nr = toy.train(seed=0)
    rr = toy.train(seed=0, rotation="Rr")
    rows = _metrics(nr)
    first, last = rows[0]["loss"], rows[-1]["loss"]
    floor = 0.25 * math.log(128)
    min_entropy = min(r["teacher_entropy"] for r in rows)
    test = toy.test_features(nr, "Nr")
    prior = ev.label_prior_baseline(test.labels)
    map_nrnr = ev.macro_map(test)
    map_nrrr = toy.macro_map(nr, "Rr")
    map_rrrr = toy.macro_map(rr, "Rr")
    minutes = toy.seconds.get((0, "Nr", 1.0, "full", ""), 0.0) / 60
    parts = {
        "a": last < 0.9 * first,
        "b": map_nrnr >= 1.5 * prior,
        "c": abs(map_nrrr - map_rrrr) <= 2.0,
        "d": min_entropy >= floor,
        "time": minutes < 20,
    }
    ok = all(parts.values())
    report(5, ok, (
        f"(a) loss {first:.2f} -> {last:.2f} (limit {0.9 * first:.2f}) {'ok' if parts['a'] else 'FAIL'}; "
        f"(b) macroMAP {map_nrnr:.2f} vs prior {prior:.2f} {'ok' if parts['b'] else 'FAIL'}; "
        f"(c) Nr/Rr {map_nrrr:.2f} Rr/Rr {map_rrrr:.2f} {'ok' if parts['c'] else 'FAIL'}; "
        f"(d) min epoch entropy {min_entropy:.3f} (floor {floor:.3f}) {'ok' if parts['d'] else 'FAIL'}; "
        f"{minutes:.1f} min per run"
    ))
    assert ok


def test_criterion_6_ablation_direction(toy):
    region_wins = view_wins = 0
    rows = []
    for seed in SEEDS:
        full = toy.macro_map(toy.train(seed=seed))
        small = toy.macro_map(toy.train(seed=seed, region_scale=0.05))
        glob = toy.macro_map(toy.train(seed=seed, views="global"))
        region_wins += full >= small
        view_wins += full >= glob
        rows.append(f"seed {seed}: full {full:.2f}, s=0.05 {small:.2f}, global-only {glob:.2f}")
    ok = region_wins >= 2 and view_wins >= 2
    report(6, ok, f"region wins {region_wins}/3, view wins {view_wins}/3 ({'; '.join(rows)})")
    assert ok


def test_criterion_7_metric_oracles():
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(300):
        n = int(rng.integers(3, 9))
        labels = [str(v) for v in rng.integers(0, 3, n)]
        labels[1] = labels[0]
        feats = rng.integers(0, 3, (n, 2)).astype(float)
        worst = max(worst, abs(ev.macro_map(feats, labels) - _oracle_map(feats, labels)) / 100)
        rel = list(rng.integers(0, 2, n).astype(bool))
        if any(rel):
            hits = np.cumsum(rel)
            want = sum(hits[i] / (i + 1) for i in range(n) if rel[i]) / sum(rel)
            worst = max(worst, abs(ev.average_precision(rel) - want))
        truth = [int(v) for v in rng.integers(0, 3, n)]
        pred = [int(v) for v in rng.integers(0, 3, n)]
        worst = max(worst, abs(ev.nmi(truth, pred) - _oracle_nmi(truth, pred)))
    # k-means against exhaustive two-way partitions of six points
    for _ in range(10):
        x = rng.normal(size=(6, 2))
        truth = [int(v) for v in rng.integers(0, 2, 6)]
        best, best_assign = np.inf, None
        for bits in itertools.product([0, 1], repeat=6):
            a = np.array(bits)
            if a.min() == a.max():
                continue
            inertia = sum(((x[a == c] - x[a == c].mean(axis=0)) ** 2).sum() for c in (0, 1))
            if inertia < best - 1e-12:
                best, best_assign = inertia, list(bits)
        worst = max(worst, abs(ev.kmeans_nmi(x, labels=truth, k=2) - _oracle_nmi(truth, best_assign)))
    ok = worst < 1e-9
    report(7, ok, f"max deviation from brute-force oracles {worst:.1e}")
    assert ok


def test_criterion_8_determinism(toy):
    a = toy.train(seed=0)
    b = toy.train(seed=0, tag="_repeat")
    same = (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    report(8, same, "metrics.csv of two seed-0 runs " + ("identical" if same else "DIFFER"))
    assert same
