"""End-to-end protocol: training, the three explanation families, and evaluation.

Every command reads and writes inside ``cfg["out"]``:

    checkpoints/   scm.pt, cgm-variational.pt, cgm-adversarial.pt, classifier.pt,
                   oracles/oracle-XX.pt, autoencoders/ae-X.pt, autoencoders/ae-global.pt
    normalizer.json
    sweeps/        raw arrays (.npz), score tables (.csv), figures (.png)
    attributes/    global importances per model kind
    cf/            one counterfactual set per method
    eval/          IM records, IM1 table, oracle runs, report.json
    manifests/     one RunManifest per command

Figures always sit next to a raw-data file with the same stem.
"""
from __future__ import annotations

import json
import logging
import platform
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
from scipy import stats  # noqa: E402

from . import attributes as attr_mod  # noqa: E402
from .cgm import ADVERSARIAL, VARIATIONAL, CGMConfig, load_cgm, save_cgm, train_bigan, train_vae  # noqa: E402
from .checkpoint import file_digest  # noqa: E402
from .classifiers import (  # noqa: E402
    AutoencoderConfig,
    ClassAutoencoders,
    ClassifierConfig,
    load_autoencoder,
    load_classifier,
    predict_class,
    save_autoencoder,
    save_classifier,
    train_autoencoders,
    train_classifier,
    train_oracles,
)
from .config import get, require_data_paths  # noqa: E402
from .counterfactuals import (  # noqa: E402
    AgnosticCFConfig,
    BaselineCFConfig,
    GradientCFConfig,
    agnostic_cf_batch,
    baseline_pixel_cf_batch,
    gradient_cf_batch,
)
from .data import CONTINUOUS, NUM_CLASSES, AttributeNormalizer, fit_normalizer, load_dataset, normalize_observations, stack  # noqa: E402
from .errors import ConfigError  # noqa: E402
from .metrics import im_records, oracle_score, summarize  # noqa: E402
from .pixel import ContrastiveConfig, SweepConfig, sweep_explain  # noqa: E402
from .scm import fit_mechanisms, load_scm, sample_attributes, save_scm  # noqa: E402

logger = logging.getLogger(__name__)

COMPONENTS = ("cgm-vae", "cgm-bigan", "scm", "classifier", "oracles", "autoencoders")
METHODS = {
    "vae-grad": (VARIATIONAL, "gradient"),
    "bigan-grad": (ADVERSARIAL, "gradient"),
    "vae-agnostic": (VARIATIONAL, "agnostic"),
    "bigan-agnostic": (ADVERSARIAL, "agnostic"),
    "baseline-pixel": (None, "baseline"),
}
MODEL_KINDS = (VARIATIONAL, ADVERSARIAL)


def tool_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:  # not installed, e.g. running from a checkout
        return "0+unknown"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serialisable: {type(o)}")


def write_json(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


class RunManifest:
    """Config snapshot, checkpoint digests, timings and emitted files of one command.

    Written when the run starts (``status: running``) and rewritten on
    :meth:`finalize`.
    """

    def __init__(self, out: Path, command: str, cfg: dict):
        self.path = Path(out) / "manifests" / f"{command}.json"
        self.data = {
            "command": command,
            "config": cfg,
            "tool_version": tool_version(),
            "python": platform.python_version(),
            "torch": torch.__version__,
            "status": "running",
            "checkpoints": {},
            "files": [],
            "gates": {},
            "timings": {},
        }
        self._t0 = time.perf_counter()
        write_json(self.path, self.data)

    def checkpoint(self, name: str, path, digest: str):
        self.data["checkpoints"][name] = {"path": str(path), "sha256": digest}

    def file(self, path):
        self.data["files"].append(str(path))

    def gate(self, name: str, info: dict):
        self.data["gates"][name] = info

    def timing(self, name: str, seconds: float):
        self.data["timings"][name] = seconds

    @property
    def gates_passed(self) -> bool:
        return all(g.get("passed", True) for g in self.data["gates"].values())

    def finalize(self, status: str = "ok"):
        self.data["status"] = status
        self.data["timings"]["total"] = time.perf_counter() - self._t0
        self.data["files"] = sorted(set(self.data["files"]))
        write_json(self.path, self.data)
        return self.data


# ---------------------------------------------------------------------------
# data and artifacts


def out_dir(cfg) -> Path:
    return Path(cfg["out"])


def ckpt_dir(cfg) -> Path:
    return out_dir(cfg) / "checkpoints"


def load_data(cfg):
    """Normalised (train, test) observations plus the normaliser fitted on train."""
    paths = require_data_paths(cfg)
    train = load_dataset(paths["train_images"], paths["train_attributes"], "train")
    test = load_dataset(paths["test_images"], paths["test_attributes"], "test")
    norm_path = out_dir(cfg) / "normalizer.json"
    if norm_path.exists():
        norm = AttributeNormalizer.from_dict(json.loads(norm_path.read_text()))
    else:
        norm = fit_normalizer(train)
        write_json(norm_path, norm.to_dict())
    return normalize_observations(train, norm), normalize_observations(test, norm), norm


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError("out", f"{what} checkpoint missing at {path}; run `train` first")
    return path


def load_model(cfg, kind: str):
    return load_cgm(_require(ckpt_dir(cfg) / f"cgm-{kind}.pt", kind))


def load_artifacts(cfg, models=MODEL_KINDS, scm=True, oracles=False, autoencoders=False) -> dict:
    c = ckpt_dir(cfg)
    out = {"f": load_classifier(_require(c / "classifier.pt", "classifier"))}
    out["models"] = {k: load_model(cfg, k) for k in models}
    if scm:
        out["scm"] = load_scm(_require(c / "scm.pt", "scm"))
    if oracles:
        paths = sorted((c / "oracles").glob("oracle-*.pt"))
        if not paths:
            raise ConfigError("out", f"no oracle checkpoints under {c / 'oracles'}; run `train oracles`")
        out["oracles"] = [load_classifier(p) for p in paths]
    if autoencoders:
        d = c / "autoencoders"
        per = [load_autoencoder(_require(d / f"ae-{p}.pt", f"AE_{p}")) for p in range(NUM_CLASSES)]
        out["autoencoders"] = ClassAutoencoders(per, load_autoencoder(_require(d / "ae-global.pt", "global AE")))
    return out


def _subset(observations, n: int, seed: int):
    idx = np.random.default_rng(seed).permutation(len(observations))[: min(n, len(observations))]
    return [observations[i] for i in sorted(idx)]


# ---------------------------------------------------------------------------
# train


def _cgm_config(cfg, section: str, seed):
    d = dict(get(cfg, f"cgm.{section}"))
    d["recon_gate"] = get(cfg, "cgm.recon_gate")
    if seed is not None:
        d["seed"] = seed
    return CGMConfig.from_dict(d)


def cmd_train(component: str, cfg: dict, seed: int | None = None, n: int | None = None) -> dict:
    """Train one component, write its checkpoint(s) and a manifest.

    Quality gates of the trainers are enforced; a failing gate raises
    :class:`~cgmexplain.errors.TrainingError` after the manifest records it.
    """
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; choose from {COMPONENTS}")
    train, test, _ = load_data(cfg)
    man = RunManifest(out_dir(cfg), f"train-{component}", cfg)
    c = ckpt_dir(cfg)
    t0 = time.perf_counter()
    try:
        if component == "scm":
            s = get(cfg, "scm")
            scm = fit_mechanisms(
                train,
                held_out=test,
                hidden=s["hidden"],
                lr=s["lr"],
                max_steps=s["max_steps"],
                patience=s["patience"],
                seed=s["seed"] if seed is None else seed,
                propagate=s["propagate"],
            )
            man.checkpoint("scm", c / "scm.pt", save_scm(scm, c / "scm.pt"))
            man.gate("scm", {"held_out_ll": scm.log_likelihood(stack(test)[1]), "passed": True})
        elif component in ("cgm-vae", "cgm-bigan"):
            kind, section, trainer = (
                (VARIATIONAL, "vae", train_vae) if component == "cgm-vae" else (ADVERSARIAL, "bigan", train_bigan)
            )
            model = trainer(train, _cgm_config(cfg, section, seed), held_out=test)
            path = c / f"cgm-{kind}.pt"
            man.checkpoint(kind, path, save_cgm(model, path))
            man.gate(kind, model.meta.get("gates", {}))
        elif component == "classifier":
            conf = ClassifierConfig.from_dict(get(cfg, "clf"))
            f = train_classifier(train, get(cfg, "clf.seed") if seed is None else seed, conf, held_out=test)
            man.checkpoint("classifier", c / "classifier.pt", save_classifier(f, c / "classifier.pt"))
            man.gate("classifier", f.meta["gates"])
        elif component == "oracles":
            conf = ClassifierConfig.from_dict(get(cfg, "clf"))
            n = get(cfg, "oracle.n") if n is None else n
            base = get(cfg, "oracle.base_seed") if seed is None else seed
            for k, h in enumerate(train_oracles(train, n, base, conf, held_out=test)):
                path = c / "oracles" / f"oracle-{k:02d}.pt"
                man.checkpoint(f"oracle-{k:02d}", path, save_classifier(h, path))
                man.gate(f"oracle-{k:02d}", h.meta["gates"])
        else:
            conf = AutoencoderConfig.from_dict(get(cfg, "ae") | ({} if seed is None else {"seed": seed}))
            aes = train_autoencoders(train, conf, held_out=test)
            d = c / "autoencoders"
            for p, ae in enumerate(aes.per_class):
                man.checkpoint(f"ae-{p}", d / f"ae-{p}.pt", save_autoencoder(ae, conf, d / f"ae-{p}.pt"))
                man.gate(f"ae-{p}", ae.meta.get("gates", {}))
            man.checkpoint("ae-global", d / "ae-global.pt", save_autoencoder(aes.global_ae, conf, d / "ae-global.pt"))
            man.gate("ae-global", aes.global_ae.meta.get("gates", {}))
    except Exception as exc:
        diag = getattr(exc, "diagnostics", {})
        man.gate(component, {"passed": False, "error": str(exc), "diagnostics": diag})
        man.finalize("failed")
        raise
    man.timing(component, time.perf_counter() - t0)
    return man.finalize("ok" if man.gates_passed else "gate-failed")


# ---------------------------------------------------------------------------
# figures


def save_figure(fig, path: Path, raw: dict, man: RunManifest | None = None):
    """Write ``path`` (PNG) and its regenerating raw data ``path.with_suffix('.npz')``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    raw_path = path.with_suffix(".npz")
    np.savez(raw_path, **raw)
    if man is not None:
        man.file(path)
        man.file(raw_path)


def _saliency_grid(entries, attribute):
    vals = np.stack([e.explanation.values for e in entries])  # (L, K, 28, 28)
    vmax = float(np.abs(vals).max()) or 1.0
    n_rows, k = len(entries), vals.shape[1]
    fig, axes = plt.subplots(n_rows, k + 1, figsize=(1.2 * (k + 1), 1.3 * n_rows), squeeze=False)
    for r, e in enumerate(entries):
        axes[r, 0].imshow(e.image, cmap="gray", vmin=0, vmax=1)
        axes[r, 0].set_title(f"{attribute}={e.value:+.1f}  C={int(np.argmax(e.scores))}", fontsize=6)
        for j in range(k):
            axes[r, j + 1].imshow(vals[r, j], cmap="bwr", vmin=-vmax, vmax=vmax)
            axes[r, j + 1].set_title(f"{j}: {e.scores[j]:.2f}", fontsize=6)
    for ax in axes.ravel():
        ax.set_axis_off()
    fig.tight_layout()
    return fig, vals


def _contrastive_grid(entries, attribute):
    n_rows = len(entries)
    fig, axes = plt.subplots(n_rows, 3, figsize=(4.0, 1.4 * n_rows), squeeze=False)
    pn = np.stack([e.image + e.explanation.pn_delta for e in entries])
    pp = np.stack([e.explanation.pp for e in entries])
    for r, e in enumerate(entries):
        ex = e.explanation
        axes[r, 0].imshow(e.image, cmap="gray", vmin=0, vmax=1)
        axes[r, 0].set_title(f"{attribute}={e.value:+.1f} C={ex.original_class}", fontsize=6)
        axes[r, 1].imshow(ex.pn_delta, cmap="bwr", vmin=-1, vmax=1)
        axes[r, 1].set_title(f"PN -> {ex.pn_class}{'' if ex.pn_success else ' (fail)'}", fontsize=6)
        axes[r, 2].imshow(ex.pp, cmap="gray", vmin=0, vmax=1)
        axes[r, 2].set_title(f"PP -> {ex.pp_class}{'' if ex.pp_success else ' (fail)'}", fontsize=6)
    for ax in axes.ravel():
        ax.set_axis_off()
    fig.tight_layout()
    return fig, pn, pp


# ---------------------------------------------------------------------------
# explain-sweep


def cmd_explain_sweep(cfg: dict) -> dict:
    s = get(cfg, "sweep")
    man = RunManifest(out_dir(cfg), "explain-sweep", cfg)
    train, test, _ = load_data(cfg)
    art = load_artifacts(cfg, models=(s["model"],))
    model, scm, f = art["models"][s["model"]], art["scm"], art["f"]
    rng = np.random.default_rng(s["seed"])
    bg_idx = np.sort(rng.choice(len(train), size=min(s["n_background"], len(train)), replace=False))
    background = stack([train[i] for i in bg_idx])[0]
    base = out_dir(cfg) / "sweeps" / s["model"]
    rows = []
    for inst in s["instances"]:
        obs = test[int(inst)]
        for attribute in s["attributes"]:
            for explainer in s["explainers"]:
                sc = SweepConfig(attribute, tuple(s["values"]), explainer, s["n_samples"], s["seed"], ContrastiveConfig())
                entries = sweep_explain(model, scm, f, obs, sc, background if explainer == "shapley" else None)
                stem = base / f"{attribute}-{explainer}-{int(inst):05d}"
                raw = {
                    "values": np.array([e.value for e in entries]),
                    "images": np.stack([e.image for e in entries]),
                    "scores": np.stack([e.scores for e in entries]),
                    "attributes": np.stack([e.attributes for e in entries]),
                    "latent": entries[0].latent,
                }
                if explainer == "shapley":
                    fig, vals = _saliency_grid(entries, attribute)
                    raw["saliency"] = vals
                    raw["expected"] = np.stack([e.explanation.expected for e in entries])
                else:
                    fig, _, pp = _contrastive_grid(entries, attribute)
                    raw["pn_delta"] = np.stack([e.explanation.pn_delta for e in entries])
                    raw["pp"] = pp
                    raw["pn_success"] = np.array([e.explanation.pn_success for e in entries])
                    raw["pp_success"] = np.array([e.explanation.pp_success for e in entries])
                save_figure(fig, stem.with_suffix(".png"), raw, man)
                for e in entries:
                    rows.append({"instance": int(inst), "attribute": attribute, "explainer": explainer, "value": e.value,
                                 **{f"score_{k}": float(e.scores[k]) for k in range(len(e.scores))}})
    table = base / "scores.csv"
    pd.DataFrame(rows).to_csv(table, index=False)
    man.file(table)
    return man.finalize()


# ---------------------------------------------------------------------------
# explain-attributes


def attribute_background(cfg, test, scm):
    a = get(cfg, "attributes")
    n = a["n_background"]
    if a["background"] == "scm":
        return sample_attributes(scm, n, a["seed"])
    if a["background"] != "test":
        raise ConfigError("attributes.background", "must be 'test' or 'scm'")
    picked = _subset(test, n, a["seed"])
    _, cont, labels = stack(picked)
    return cont, labels


def attribute_instances(cfg, test):
    a = get(cfg, "attributes")
    rng = np.random.default_rng(a["seed"] + 1)
    labels = np.array([o.attributes.label for o in test])
    chosen = []
    for k in range(NUM_CLASSES):
        idx = np.flatnonzero(labels == k)
        chosen.extend(sorted(rng.permutation(idx)[: a["per_class"]].tolist()))
    return [test[i] for i in chosen]


def explain_attributes_for(f, model, instances, background, cfg) -> attr_mod.GlobalImportance:
    a = get(cfg, "attributes")
    f_hat = attr_mod.MCAttributeClassifier(f, model, attr_mod.MCConfig(m=a["m"], seed=a["seed"], include_label=a["include_label"]))
    expl = [attr_mod.attribute_shapley(f_hat, o.attributes, background) for o in instances]
    return attr_mod.global_importance(expl, [o.attributes.label for o in instances]), expl


def rank_agreement(g1, g2) -> dict:
    rhos = []
    same = 0
    for k in range(len(g1.values)):
        if not (g1.present[k] and g2.present[k]):
            continue
        rho = stats.spearmanr(g1.values[k], g2.values[k]).statistic
        rhos.append(float(rho) if np.isfinite(rho) else 0.0)
        same += int(np.array_equal(np.argsort(g1.values[k]), np.argsort(g2.values[k])))
    return {"mean_spearman": float(np.mean(rhos)) if rhos else float("nan"), "identical_rankings": same, "classes": len(rhos)}


def cmd_explain_attributes(cfg: dict) -> dict:
    man = RunManifest(out_dir(cfg), "explain-attributes", cfg)
    _, test, _ = load_data(cfg)
    art = load_artifacts(cfg)
    background = attribute_background(cfg, test, art["scm"])
    instances = attribute_instances(cfg, test)
    base = out_dir(cfg) / "attributes"
    base.mkdir(parents=True, exist_ok=True)
    globals_, rows = {}, []
    for kind in MODEL_KINDS:
        g, expl = explain_attributes_for(art["f"], art["models"][kind], instances, background, cfg)
        globals_[kind] = g
        np.savez(base / f"local-{kind}.npz", values=np.stack([e.values for e in expl]),
                 labels=np.array([o.attributes.label for o in instances]), index=np.array([o.index for o in instances]))
        man.file(base / f"local-{kind}.npz")
        for k in range(NUM_CLASSES):
            rows.append({"model": kind, "class": k, "n": int(g.counts[k]), **{n: float(g.values[k, j]) for j, n in enumerate(g.names)}})
    table = base / "global_importance.csv"
    pd.DataFrame(rows).to_csv(table, index=False)
    man.file(table)
    summary = {
        "rank_agreement": rank_agreement(globals_[VARIATIONAL], globals_[ADVERSARIAL]),
        "lowest": {kind: g.lowest_attribute() for kind, g in globals_.items()},
        "intensity_lowest_classes": {kind: sum(x == "intensity" for x in g.lowest_attribute()) for kind, g in globals_.items()},
    }
    write_json(base / "summary.json", summary)
    man.file(base / "summary.json")

    fig, axes = plt.subplots(1, 2, figsize=(10, 3), sharey=True)
    width = 0.27
    for ax, kind in zip(axes, MODEL_KINDS):
        g = globals_[kind]
        for j, n in enumerate(g.names):
            ax.bar(np.arange(NUM_CLASSES) + (j - 1) * width, g.values[:, j], width, label=n)
        ax.set_title(kind)
        ax.set_xticks(range(NUM_CLASSES))
        ax.set_xlabel("class")
    axes[0].set_ylabel("median mean-|SHAP|")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    save_figure(fig, base / "global_importance.png", {k: globals_[k].values for k in MODEL_KINDS} | {"names": np.array(CONTINUOUS)}, man)
    man.data["summary"] = summary
    return man.finalize()


# ---------------------------------------------------------------------------
# explain-cf


def cf_instances(cfg, test):
    c = get(cfg, "cf")
    return _subset(test, c["n_instances"], c["seed"])


def run_method(method: str, art: dict, instances, cfg) -> list:
    c = get(cfg, "cf")
    kind, family = METHODS[method]
    f = art["f"]
    src = np.atleast_1d(predict_class(f, stack(instances)[0]))
    targets = (src + c["target_offset"]) % NUM_CLASSES
    if family == "gradient":
        conf = GradientCFConfig(**c["gradient"], hinge=bool(c.get("hinge", False)))
        return gradient_cf_batch(art["models"][kind], art["scm"], f, instances, conf, targets)
    if family == "agnostic":
        return agnostic_cf_batch(art["models"][kind], art["scm"], f, instances, AgnosticCFConfig(**c["agnostic"]), targets)
    conf = dict(c["baseline"])
    conf["lambdas"] = tuple(conf["lambdas"])
    return baseline_pixel_cf_batch(f, stack(instances)[0], BaselineCFConfig(**conf), [o.index for o in instances])


def save_cf_set(path: Path, method: str, expl: list, f) -> Path:
    images = np.stack([e.image for e in expl]).astype(np.float32)
    raw = {
        "method": np.array(method),
        "original": np.stack([e.original for e in expl]).astype(np.float32),
        "image": images,
        "index": np.array([e.index for e in expl], dtype=np.int64),
        "source": np.array([e.source for e in expl], dtype=np.int64),
        "target": np.array([-1 if e.target is None else e.target for e in expl], dtype=np.int64),
        "achieved": np.array([e.achieved for e in expl], dtype=np.int64),
        "success": np.array([e.success for e in expl], dtype=bool),
        "evaluations": np.array([e.evaluations for e in expl], dtype=np.int64),
        "scores": f.scores(images).astype(np.float64),
    }
    if "p" in expl[0].artifact:
        raw["p"] = np.stack([e.artifact["p"] for e in expl])
        raw["best_loss"] = np.array([e.artifact["best_loss"] for e in expl])
    if "alpha" in expl[0].artifact:
        raw["alpha"] = np.array([e.artifact["alpha"] for e in expl])
    if "l1" in expl[0].artifact:
        raw["l1"] = np.array([np.nan if e.artifact["l1"] is None else e.artifact["l1"] for e in expl])
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **raw)
    return path


def load_cf_set(path) -> dict:
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def cmd_explain_cf(cfg: dict, methods=None) -> dict:
    c = get(cfg, "cf")
    methods = list(methods or c["methods"])
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError("cf.methods", f"unknown method(s) {unknown}; choose from {sorted(METHODS)}")
    man = RunManifest(out_dir(cfg), "explain-cf", cfg)
    _, test, _ = load_data(cfg)
    kinds = tuple(sorted({METHODS[m][0] for m in methods if METHODS[m][0]}))
    art = load_artifacts(cfg, models=kinds)
    instances = cf_instances(cfg, test)
    base = out_dir(cfg) / "cf"
    sets = {}
    for m in methods:
        t0 = time.perf_counter()
        expl = run_method(m, art, instances, cfg)
        sets[m] = save_cf_set(base / f"{m}.npz", m, expl, art["f"])
        pd.DataFrame([e.as_record() for e in expl]).drop(columns=["artifact_p"], errors="ignore").to_csv(base / f"{m}.csv", index=False)
        man.file(sets[m])
        man.file(base / f"{m}.csv")
        man.timing(m, time.perf_counter() - t0)
        man.gate(m, {"success_rate": float(np.mean([e.success for e in expl])), "passed": True})
        logger.info("%s: success rate %.3f", m, man.data["gates"][m]["success_rate"])
    comparison_figure(base / "comparison.png", {m: load_cf_set(p) for m, p in sets.items()}, man)
    return man.finalize()


def comparison_figure(path: Path, sets: dict, man=None, n_show: int = 6):
    methods = list(sets)
    first = sets[methods[0]]
    n_show = min(n_show, len(first["index"]))
    cols = 1 + len(methods)
    fig, axes = plt.subplots(2 * n_show, cols, figsize=(1.6 * cols, 2.2 * n_show), squeeze=False,
                             gridspec_kw={"height_ratios": [3, 1] * n_show})
    raw = {"original": first["original"][:n_show]}
    for r in range(n_show):
        axes[2 * r, 0].imshow(first["original"][r], cmap="gray", vmin=0, vmax=1)
        axes[2 * r, 0].set_title(f"x (y={first['source'][r]})", fontsize=6)
        axes[2 * r + 1, 0].set_axis_off()
        for j, m in enumerate(methods, start=1):
            s = sets[m]
            axes[2 * r, j].imshow(s["image"][r], cmap="gray", vmin=0, vmax=1)
            axes[2 * r, j].set_title(f"{m} -> {s['achieved'][r]}", fontsize=6)
            axes[2 * r + 1, j].bar(range(NUM_CLASSES), s["scores"][r], color="gray")
            axes[2 * r + 1, j].set_ylim(0, 1)
            axes[2 * r + 1, j].set_xticks(range(NUM_CLASSES))
            axes[2 * r + 1, j].tick_params(labelsize=4)
            axes[2 * r + 1, j].set_yticks([])
    for m in methods:
        raw[f"{m}_image"] = sets[m]["image"][:n_show]
        raw[f"{m}_scores"] = sets[m]["scores"][:n_show]
        raw[f"{m}_achieved"] = sets[m]["achieved"][:n_show]
    for ax in axes[0::2].ravel():
        ax.set_axis_off()
    fig.tight_layout()
    save_figure(fig, path, raw, man)


# ---------------------------------------------------------------------------
# evaluate


def evaluate_sets(sets: dict, f, oracles, autoencoders, eps: float, level: float):
    """IM records per method (successful counterfactuals only), oracle runs and the report."""
    records, oracle_runs, success = {}, {}, {}
    for m in sorted(sets):
        s = sets[m]
        ok = s["success"]
        success[m] = float(ok.mean())
        if not ok.any():
            records[m], oracle_runs[m] = [], []
            continue
        # the untargeted baseline is scored against the class it reached
        targets = np.where(s["target"] >= 0, s["target"], s["achieved"])[ok]
        records[m] = im_records(s["image"][ok], s["source"][ok], targets, autoencoders, eps, ids=s["index"][ok])
        oracle_runs[m] = [oracle_score(f, o, s["image"][ok]) for o in oracles]
    return records, oracle_runs, summarize(records, oracle_runs, success, level)


def cmd_evaluate(cfg: dict) -> dict:
    m_cfg = get(cfg, "metrics")
    base = out_dir(cfg) / "cf"
    methods = [m for m in get(cfg, "cf.methods") if (base / f"{m}.npz").exists()]
    if not methods:
        raise ConfigError("cf.methods", f"no persisted counterfactual sets under {base}; run `explain-cf` first")
    man = RunManifest(out_dir(cfg), "evaluate", cfg)
    art = load_artifacts(cfg, models=(), scm=False, oracles=True, autoencoders=True)
    oracles = art["oracles"][: m_cfg["oracle_runs"]]
    sets = {m: load_cf_set(base / f"{m}.npz") for m in methods}
    records, oracle_runs, report = evaluate_sets(sets, art["f"], oracles, art["autoencoders"], m_cfg["eps"], m_cfg["level"])

    ev = out_dir(cfg) / "eval"
    ev.mkdir(parents=True, exist_ok=True)
    rec_rows = [{"method": m, **r.as_dict()} for m in sorted(records) for r in records[m]]
    pd.DataFrame(rec_rows, columns=["method", "instance", "source", "target", "im1", "im2"]).to_csv(ev / "im_records.csv", index=False)
    table = [{"method": m, **v} for m, v in report.methods.items()]
    pd.DataFrame(table).to_csv(ev / "im1_table.csv", index=False)
    pd.DataFrame(report.per_class).to_csv(ev / "per_class.csv", index=False)
    orows = [{"method": m, "run": k, "oracle_seed": oracles[k].seed, "score": s} for m in sorted(oracle_runs) for k, s in enumerate(oracle_runs[m])]
    pd.DataFrame(orows, columns=["method", "run", "oracle_seed", "score"]).to_csv(ev / "oracle_scores.csv", index=False)
    write_json(ev / "report.json", report.to_dict())
    for name in ("im_records.csv", "im1_table.csv", "per_class.csv", "oracle_scores.csv", "report.json"):
        man.file(ev / name)

    pc = pd.DataFrame(report.per_class)
    if len(pc):
        fig, ax = plt.subplots(figsize=(5, 4))
        for m, g in pc.groupby("method", sort=True):
            ax.scatter(g["im1_mean"], g["im2_mean"], label=m, s=14)
        ax.set_xlabel("IM1")
        ax.set_ylabel("IM2")
        ax.legend(fontsize=7)
        fig.tight_layout()
        save_figure(fig, ev / "im1_im2_scatter.png", {"method": pc["method"].to_numpy(str), "class": pc["class"].to_numpy(),
                                                       "im1": pc["im1_mean"].to_numpy(), "im2": pc["im2_mean"].to_numpy()}, man)
    names = [m for m in report.methods if oracle_runs[m]]
    if names:
        fig, ax = plt.subplots(figsize=(5, 3))
        means = [report.methods[m]["oracle_mean"] for m in names]
        cis = [report.methods[m]["oracle_ci"] for m in names]
        ax.bar(range(len(names)), means, yerr=cis, color="gray", capsize=3)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, fontsize=7)
        ax.set_ylabel("oracle score")
        fig.tight_layout()
        save_figure(fig, ev / "oracle_scores.png", {"methods": np.array(names), "runs": np.array([oracle_runs[m] for m in names])}, man)
    man.data["report_sha256"] = file_digest(ev / "report.json")
    return man.finalize()


__all__ = [
    "COMPONENTS",
    "METHODS",
    "RunManifest",
    "cmd_train",
    "cmd_explain_sweep",
    "cmd_explain_attributes",
    "cmd_explain_cf",
    "cmd_evaluate",
    "evaluate_sets",
    "load_cf_set",
]
