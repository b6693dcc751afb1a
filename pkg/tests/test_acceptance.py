"""Acceptance criteria 1-10 on the desk-scale Morpho-MNIST-style fixture.

The first run builds the fixture data (``tools/make_morpho_fixture.py``) and
trains every component into ``.cache/acceptance`` through the experiment
commands; later runs reuse the cached artifacts as long as the config is
unchanged. Quality gates are not enforced during training because criterion
4 measures them here. One PASS/FAIL line per criterion is printed in the
terminal summary.
"""
import json
import shutil
import subprocess
import sys
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from cgmexplain import experiments as ex
from cgmexplain.attributes import MCAttributeClassifier, MCConfig, attribute_shapley
from cgmexplain.cgm import ADVERSARIAL, VARIATIONAL, LabelEmbedding, check_distribution, expected_embedding, interpolated_embedding
from cgmexplain.checkpoint import file_digest
from cgmexplain.classifiers import predict_class
from cgmexplain.config import load_config
from cgmexplain.counterfactuals import AgnosticCFConfig, agnostic_cf
from cgmexplain.data import CONTINUOUS, stack
from cgmexplain.metrics import im1, im2, mean_ci, oracle_score
from cgmexplain.morphometrics import batch_morphometrics
from cgmexplain.pixel import shapley_saliency

pytestmark = [pytest.mark.acceptance, pytest.mark.filterwarnings("ignore::UserWarning")]

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / ".cache" / "morpho"
OUT = ROOT / ".cache" / "acceptance"

RESULTS: dict = {}

ACCEPTANCE_CONFIG = {
    "out": str(OUT),
    "data": {
        "train_images": str(DATA / "train-images-idx3-ubyte.gz"),
        "train_attributes": str(DATA / "train-morpho.csv"),
        "test_images": str(DATA / "t10k-images-idx3-ubyte.gz"),
        "test_attributes": str(DATA / "t10k-morpho.csv"),
    },
    "cgm": {"vae": {"enforce_gate": False}, "bigan": {"enforce_gate": False}},
    "clf": {"enforce_gate": False},
    "ae": {"enforce_gate": False},
    # successes only are evaluated, so draw enough instances for >= 1000 per method
    "cf": {"n_instances": 1200},
}


def record(n: int, ok: bool, detail: str):
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def _ensure_data():
    if not (DATA / "t10k-morpho.csv").exists():
        pytest.importorskip("mlxtend", reason="the fixture dataset is built from mlxtend's bundled MNIST subset")
        subprocess.run([sys.executable, str(ROOT / "tools" / "make_morpho_fixture.py"), "--out", str(DATA)], check=True)


# explanation sections and the output directories that depend on them
DOWNSTREAM = {"sweep": ("sweeps",), "attributes": ("attributes",), "cf": ("cf", "eval"), "metrics": ("eval",)}


def _ensure_artifacts(cfg):
    stamp = OUT / "acceptance-config.json"
    wanted = json.dumps(cfg, sort_keys=True, indent=2)
    if stamp.exists() and stamp.read_text() != wanted:
        old = json.loads(stamp.read_text())
        keys = set(old) | set(cfg)
        changed = {k for k in keys if old.get(k) != cfg.get(k)}
        if changed <= set(DOWNSTREAM):
            # only explanation settings changed: keep checkpoints, drop what they feed
            for k in changed:
                for d in DOWNSTREAM[k]:
                    shutil.rmtree(OUT / d, ignore_errors=True)
        else:
            shutil.rmtree(OUT)  # stale cache from a different config
    OUT.mkdir(parents=True, exist_ok=True)
    stamp.write_text(wanted)
    c = ex.ckpt_dir(cfg)
    needed = {
        "scm": c / "scm.pt",
        "classifier": c / "classifier.pt",
        "cgm-vae": c / "cgm-variational.pt",
        "cgm-bigan": c / "cgm-adversarial.pt",
        "oracles": c / "oracles" / "oracle-09.pt",
        "autoencoders": c / "autoencoders" / "ae-global.pt",
    }
    for comp, path in needed.items():
        if not path.exists():
            ex.cmd_train(comp, cfg)
    if not all((OUT / "cf" / f"{m}.npz").exists() for m in ex.METHODS):
        ex.cmd_explain_cf(cfg)
    if not (OUT / "attributes" / "summary.json").exists():
        ex.cmd_explain_attributes(cfg)
    if not (OUT / "eval" / "report.json").exists():
        ex.cmd_evaluate(cfg)


@pytest.fixture(scope="module")
def cfg():
    warnings.simplefilter("ignore", UserWarning)
    _ensure_data()
    cfg = load_config(None, ACCEPTANCE_CONFIG, environ={})
    _ensure_artifacts(cfg)
    return cfg


@pytest.fixture(scope="module")
def world(cfg):
    _, test, norm = ex.load_data(cfg)
    art = ex.load_artifacts(cfg)
    return {"test": test, "norm": norm, **art}


# 1 -------------------------------------------------------------------------


def test_criterion_01_formula_fixtures():
    def const(v):
        return lambda x: np.broadcast_to(v, np.shape(x)).copy()

    x0 = np.zeros((28, 28))
    px = np.zeros((28, 28))
    px[3, 3] = np.sqrt(2.0)
    qx = np.zeros((28, 28))
    qx[3, 3] = np.sqrt(0.5)
    errs = [abs(im1(x0, const(px), const(qx)) - 0.5 / (2.0 + 1e-8))]
    flat = np.full((28, 28), 60.0 / 784)
    g = np.zeros((28, 28))
    g[0, 0] = np.sqrt(0.3)
    errs.append(abs(im2(flat, const(x0), const(g)) - 0.3 / (60.0 + 1e-8)))

    class Fixed:
        def __init__(self, labels):
            self.labels = np.array(labels)

        def __call__(self, x):
            return torch.nn.functional.one_hot(torch.as_tensor(self.labels), 10).float()

    errs.append(abs(oracle_score(Fixed([1, 2, 3, 4]), Fixed([1, 2, 0, 4]), np.zeros((4, 28, 28))) - 0.75))
    m, h = mean_ci([1.0, 2.0, 3.0, 4.0], 0.95)
    errs.append(abs(m - 2.5))
    errs.append(abs(h - 1.959963984540054 * np.sqrt(5.0 / 3.0) / 2.0))
    emb = LabelEmbedding(np.arange(20, dtype=np.float64).reshape(10, 2))
    p = np.zeros(10)
    p[[1, 4]] = [0.25, 0.75]
    check_distribution(p)
    errs.append(np.abs(expected_embedding(emb, p) - [0.25 * 2 + 0.75 * 8, 0.25 * 3 + 0.75 * 9]).max())
    errs.append(np.abs(interpolated_embedding(emb, 1, 4, 0.3) - [0.7 * 2 + 0.3 * 8, 0.7 * 3 + 0.3 * 9]).max())
    worst = float(max(errs))
    record(1, worst <= 1e-9, f"max deviation from hand-computed fixtures {worst:.2e} (tol 1e-9)")


# 2 -------------------------------------------------------------------------


def _enumerate(value, n):
    from itertools import combinations
    from math import factorial

    phi = np.zeros(n)
    for j in range(n):
        rest = [p for p in range(n) if p != j]
        for r in range(n):
            for s in combinations(rest, r):
                phi[j] += factorial(r) * factorial(n - r - 1) / factorial(n) * (value(set(s) | {j}) - value(set(s)))
    return phi


def test_criterion_02_shapley(world):
    w = torch.tensor([0.7, -1.3, 2.1, 0.4])

    def lin(z):
        z = torch.as_tensor(z, dtype=torch.float32).reshape(len(z), -1)
        return torch.stack([z @ w + 0.2, -(z @ w)], 1)

    rng = np.random.default_rng(11)
    x = rng.uniform(0, 1, 4).astype(np.float32)
    b = rng.uniform(0, 1, (1, 4)).astype(np.float32)
    sal = shapley_saliency(lin, x, b, n_samples=200)

    def v(s):
        z = b[0].copy()
        z[list(s)] = x[list(s)]
        return float(lin(z[None])[0, 0])

    exact = _enumerate(v, 4)
    rel = float(np.max(np.abs(sal.values[0] - exact) / np.abs(exact)))

    test, f, model = world["test"], world["f"], world["models"][VARIATIONAL]
    f_hat = MCAttributeClassifier(f, model, MCConfig(m=4))
    bg = stack(test[1000:1100])
    worst = 0.0
    for obs in test[:20]:
        e = attribute_shapley(f_hat, obs.attributes, (bg[1], bg[2]))
        worst = max(worst, float(np.abs(e.values.sum(1) - (e.prediction - e.base_value)).max()))
    record(2, rel < 0.05 and worst <= 1e-3,
           f"linear toy rel. error {rel:.2e} (< 5%); attribute local-accuracy error {worst:.2e} (<= 1e-3)")


# 3 -------------------------------------------------------------------------


def test_criterion_03_scm(world):
    sys.path.insert(0, str(Path(__file__).parent))
    from test_scm import linear_scm

    scm = world["scm"]
    _, cont, labels = stack(world["test"])
    rt = float(np.abs(scm.forward_array(scm.abduct_array(cont)) - cont).max())
    s_cf, _ = scm.counterfactual_array(cont, labels, {"slant": 0.25})
    only_s = bool(np.array_equal(s_cf[:, :2], cont[:, :2]) and (s_cf[:, 2] == 0.25).all())

    lin = linear_scm()
    rng = np.random.default_rng(3)
    t = rng.normal(size=500)
    vals = np.stack([t, 2.0 * t + rng.normal(size=500), 0.1 + 0.5 * rng.normal(size=500)], 1)
    cf, _ = lin.counterfactual_array(vals, np.zeros(500), {"thickness": 0.7})
    closed = vals[:, 1] + 2.0 * (0.7 - vals[:, 0])  # i' = 2 t' + (i - 2 t)
    lin_err = float(np.abs(cf[:, 1] - closed).max())
    ok = rt <= 1e-6 and only_s and lin_err <= 1e-6
    record(3, ok, f"round trip {rt:.1e}, do(s) isolated {only_s}, do(t) closed-form error {lin_err:.1e}")


# 4 -------------------------------------------------------------------------


def test_criterion_04_generative_gates(world):
    images, cont, labels = stack(world["test"][:1000])
    targets = (labels + 1) % 10
    parts = []
    ok = True
    for kind in (VARIATIONAL, ADVERSARIAL):
        m = world["models"][kind]
        rec = m.reconstruction_error(images, cont, labels)
        with torch.no_grad():
            z = m.encode_batch(images, cont, labels)
            x_cf = m.generate_batch(z, cont, targets)[:, 0].numpy()
        hit = float(np.mean(predict_class(world["f"], x_cf) == targets))
        ok &= rec <= 0.05 and hit >= 0.8
        parts.append(f"{kind}: L1 {rec:.4f} (<= 0.05), label hit {hit:.3f} (>= 0.8)")
    record(4, ok, "; ".join(parts))


# 5 -------------------------------------------------------------------------


def test_criterion_05_intervention_fidelity(world):
    norm, scm, model = world["norm"], world["scm"], world["models"][VARIATIONAL]
    images, cont, labels = stack(world["test"][:500])
    raw = norm.denormalize_array(cont)
    rng = np.random.default_rng(5)
    rhos = {}
    with torch.no_grad():
        z = model.encode_batch(images, cont, labels)
    for j, name in enumerate(CONTINUOUS):
        lo, hi = np.quantile(raw[:, j], [0.05, 0.95])
        target_raw = rng.uniform(lo, hi, size=500)
        target = raw.copy()
        target[:, j] = target_raw
        value = norm.normalize_array(target)[:, j]
        new_cont, _ = scm.counterfactual_array(cont, labels, {name: value})  # one target per row
        with torch.no_grad():
            gen = model.generate_batch(z, new_cont, labels)[:, 0].numpy()
        measured = batch_morphometrics(gen)[:, j]
        keep = np.isfinite(measured)
        rhos[name] = float(stats.spearmanr(target_raw[keep], measured[keep]).statistic)
    ok = all(r >= 0.8 for r in rhos.values())
    record(5, ok, ", ".join(f"{k} rho {v:.3f}" for k, v in rhos.items()) + " (>= 0.8)")


# 6, 7 ----------------------------------------------------------------------


def _report():
    return json.loads((OUT / "eval" / "report.json").read_text())


def test_criterion_06_im1_ordering(cfg):
    m = _report()["methods"]
    im = {k: v["im1_mean"] for k, v in m.items()}
    n = {k: v["n"] for k, v in m.items()}
    grad = [im["vae-grad"], im["bigan-grad"]]
    agn = [im["vae-agnostic"], im["bigan-agnostic"]]
    ok = min(n.values()) >= 1000 and max(grad) < min(agn) and max(agn) < im["baseline-pixel"] and all(0.4 <= g <= 0.9 for g in grad)
    detail = ", ".join(f"{k} {im[k]:.4f} (n={n[k]})" for k in sorted(im))
    record(6, ok, detail + "; need grad < agnostic < baseline, grad in [0.4, 0.9], n >= 1000")


def test_criterion_07_oracle_ordering(cfg):
    m = _report()["methods"]
    o = {k: v["oracle_mean"] for k, v in m.items()}
    best = max(o, key=o.get)
    aware = [k for k in o if k != "baseline-pixel"]
    ok = best in ("vae-grad", "bigan-grad") and all(o["baseline-pixel"] < o[k] for k in aware)
    record(7, ok, ", ".join(f"{k} {o[k]:.4f}" for k in sorted(o)) + f"; best {best}, baseline lowest required")


# 8 -------------------------------------------------------------------------


def test_criterion_08_intensity_least_important(cfg):
    s = json.loads((OUT / "attributes" / "summary.json").read_text())
    counts = s["intensity_lowest_classes"]
    ok = all(counts[k] >= 6 for k in (VARIATIONAL, ADVERSARIAL))
    record(8, ok, f"classes with intensity lowest: {counts} (>= 6 of 10 for each model kind)")


# 9 -------------------------------------------------------------------------


def test_criterion_09_agnostic_minimality(world):
    model, f = world["models"][VARIATIONAL], world["f"]
    rng = np.random.default_rng(9)
    picks = rng.choice(len(world["test"]), size=100, replace=False)
    cfg = AgnosticCFConfig()
    emb = model.label_embedding
    mismatches = 0
    for i in picks:
        obs = world["test"][int(i)]
        y = int(predict_class(f, obs.image))
        y_t = int((y + rng.integers(1, 10)) % 10)
        got = agnostic_cf(model, None, f, obs, cfg, target=y_t)
        a = obs.attributes
        with torch.no_grad():
            z = model.encode_batch(obs.image, a.continuous()[None], [a.label])
            hits = [
                alpha for alpha in np.arange(100) / 99
                if predict_class(f, model.generate_batch(z, a.continuous()[None], embedding=interpolated_embedding(emb, y, y_t, float(alpha)))[0, 0].numpy()) == y_t
            ]
        want = min(hits) if hits else None
        have = got.artifact["alpha"] if got.success else None
        mismatches += int(want != have)
    record(9, mismatches == 0, f"{mismatches} of 100 queries differ from the exhaustive scan (need 0)")


# 10 ------------------------------------------------------------------------


def test_criterion_10_determinism(cfg, tmp_path):
    report = OUT / "eval" / "report.json"
    before = report.read_bytes()
    ex.cmd_evaluate(cfg)
    same_report = report.read_bytes() == before
    again = dict(cfg, out=str(tmp_path))
    shutil.copy(OUT / "normalizer.json", tmp_path / "normalizer.json")
    same = {}
    for comp, name in (("scm", "scm.pt"), ("classifier", "classifier.pt")):
        ex.cmd_train(comp, again)
        same[comp] = file_digest(tmp_path / "checkpoints" / name) == file_digest(OUT / "checkpoints" / name)
    record(10, same_report and all(same.values()), f"report bytes identical {same_report}; retrained digests identical {same}")
