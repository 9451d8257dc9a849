"""Experiment orchestration: grid search, evaluation, persistence, reports.

A run trains one model per grid point with a shared seed, keeps the point
with the best validation Recall@20, evaluates it once on the test phase,
and appends the record to a JSON-lines file. Reporting covers the
six-column metric table and the three-axis trade-off radar SVG.
"""

from __future__ import annotations

import itertools
import json
import os
import time
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_EVEN
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ConfigError, FairdiffError, ValidationError
from . import dataset as ds
from .baselines import (
    EaseModel,
    ItemKnnModel,
    BprMfModel,
    MultiVaeModel,
    PopularityModel,
    fit_bprmf,
    fit_ease,
    fit_itemknn,
    fit_multivae,
    fit_popularity,
)
from .diffusion import DiffRecModel, DiffRecParams, fit_diffrec
from .ldiffrec import LDiffRecModel, LdiffrecParams, fit_ldiffrec
from .metrics import MetricReport, TopKLists, evaluate_run, recall_at_k

MODEL_NAMES = ("popularity", "itemknn", "ease", "bprmf", "multivae", "diffrec", "ldiffrec")

DEFAULT_GRIDS = {
    "popularity": {"dummy": [0]},
    "itemknn": {"n_neighbors": [50, 100, 300]},
    "ease": {"lam": [1.0, 10.0, 100.0, 500.0]},
    "bprmf": {"n_factors": [64], "lr": [1e-3, 3e-3], "reg": [1e-4, 1e-3]},
    "multivae": {"d_z": [64, 200], "beta_max": [0.2, 0.5]},
    "diffrec": {"T": [5, 20, 50], "s": [0.01, 0.1, 0.5], "t_prime_frac": [0.0, 0.5]},
    "ldiffrec": {"C": [2, 5, 10], "rho": [0.05, 0.1, 0.3]},
}


def default_seed() -> int:
    return int(os.environ.get("FAIRDIFF_SEED", 42))


@dataclass
class ExperimentConfig:
    """One sweep: a dataset, a model, and its hyperparameter grid."""

    dataset: dict
    model: str
    grid: dict | None = None
    k: int = 20
    seed: int | None = None
    out_dir: str | None = None
    extra: dict = field(default_factory=dict)  # fixed non-grid overrides

    def resolved_grid(self) -> dict:
        grid = self.grid if self.grid is not None else DEFAULT_GRIDS.get(self.model)
        if self.model not in MODEL_NAMES:
            raise ConfigError(f"unknown model {self.model!r}")
        if not grid:
            raise ConfigError("hyperparameter grid is empty")
        return grid

    def resolved_seed(self) -> int:
        return self.seed if self.seed is not None else default_seed()


@dataclass
class RunRecord:
    """Outcome of one grid search: winner, validation score, test report."""

    model: str
    dataset: str
    seed: int
    k: int
    chosen: dict
    validation_recall: float
    report: MetricReport | None
    seconds: float
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "dataset": self.dataset,
            "seed": self.seed,
            "k": self.k,
            "chosen": self.chosen,
            "validation_recall": self.validation_recall,
            "report": self.report.to_dict() if self.report is not None else None,
            "seconds": self.seconds,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        report = d.get("report")
        return cls(
            model=d["model"],
            dataset=d["dataset"],
            seed=int(d["seed"]),
            k=int(d["k"]),
            chosen=dict(d["chosen"]),
            validation_recall=float(d["validation_recall"]),
            report=MetricReport.from_dict(report) if report is not None else None,
            seconds=float(d["seconds"]),
            failures=list(d.get("failures", [])),
        )


def append_record(path, record: RunRecord) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record.to_dict()) + "\n")


def load_records(path) -> list[RunRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(RunRecord.from_dict(json.loads(line)))
    return records


def _resolve_t_prime(params: dict, T: int) -> int:
    if "t_prime" in params:
        return int(params["t_prime"])
    return int(round(params.get("t_prime_frac", 0.0) * T))


def fit_model(name: str, train, params: dict, seed: int):
    """Train one model from a flat hyperparameter dict."""
    p = dict(params)
    p.pop("dummy", None)
    if name == "popularity":
        return fit_popularity(train)
    if name == "itemknn":
        return fit_itemknn(train, n_neighbors=int(p.get("n_neighbors", 100)))
    if name == "ease":
        return fit_ease(train, lam=float(p.get("lam", 100.0)))
    if name == "bprmf":
        return fit_bprmf(
            train,
            n_factors=int(p.get("n_factors", 64)),
            lr=float(p.get("lr", 0.05)),
            reg=float(p.get("reg", 1e-4)),
            epochs=int(p.get("epochs", 10)),
            seed=seed,
            batch_size=int(p.get("batch_size", 4096)),
        )
    if name == "multivae":
        model, _ = fit_multivae(
            train,
            d_z=int(p.get("d_z", 64)),
            hidden_dims=tuple(p.get("hidden_dims", (300,))),
            dropout=float(p.get("dropout", 0.5)),
            beta_max=float(p.get("beta_max", 0.2)),
            anneal_steps=int(p.get("anneal_steps", 500)),
            lr=float(p.get("lr", 1e-3)),
            epochs=int(p.get("epochs", 30)),
            seed=seed,
            batch_size=int(p.get("batch_size", 500)),
        )
        return model
    if name == "diffrec":
        T = int(p.get("T", 5))
        hp = DiffRecParams(
            T=T,
            s=float(p.get("s", 0.1)),
            beta_min=float(p.get("beta_min", 1e-4)),
            beta_max=float(p.get("beta_max", 0.02)),
            t_prime=_resolve_t_prime(p, T),
            hidden_dims=tuple(p.get("hidden_dims", (300,))),
            d_t=int(p.get("d_t", 10)),
            lr=float(p.get("lr", 1e-3)),
            epochs=int(p.get("epochs", 30)),
            batch_size=int(p.get("batch_size", 400)),
        )
        return fit_diffrec(train, hp, seed=seed)
    if name == "ldiffrec":
        T = int(p.get("T", 5))
        hp = LdiffrecParams(
            C=int(p.get("C", 5)),
            rho=float(p.get("rho", 0.1)),
            T=T,
            s=float(p.get("s", 0.1)),
            beta_min=float(p.get("beta_min", 1e-4)),
            beta_max=float(p.get("beta_max", 0.02)),
            t_prime=_resolve_t_prime(p, T),
            hidden_dims=tuple(p.get("hidden_dims", (300,))),
            d_t=int(p.get("d_t", 10)),
            gamma=float(p.get("gamma", 1.0)),
            beta_kl=float(p.get("beta_kl", 0.1)),
            lr=float(p.get("lr", 1e-3)),
            epochs=int(p.get("epochs", 30)),
            batch_size=int(p.get("batch_size", 400)),
            embed_dim=int(p.get("embed_dim", 64)),
            embed_epochs=int(p.get("embed_epochs", 10)),
        )
        return fit_ldiffrec(train, hp, seed=seed)
    raise ConfigError(f"unknown model {name!r}")


def expand_grid(grid: dict) -> list[dict]:
    keys = list(grid)
    points = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        points.append(dict(zip(keys, combo)))
    return points


def recommend_topk(model, split: ds.SplitDataset, phase: str, k: int, batch_size: int = 512) -> TopKLists:
    """Top-k lists for every user with ground truth in the given phase.

    Scores come from the user's train vector; train items (plus validation
    items when phase is test) are masked to -inf before ranking. Ties
    break by ascending item index.
    """
    if phase not in ("validation", "test"):
        raise ConfigError("phase must be validation or test")
    truth = split.items_by_user(phase)
    users = sorted(truth)
    train_items = split.items_by_user("train")
    val_items = split.items_by_user("validation") if phase == "test" else {}
    csr = split.train_csr()
    n_items = split.n_items
    item_order = np.arange(n_items)
    lists = {}
    truncated = set()
    for start in range(0, len(users), batch_size):
        batch = users[start : start + batch_size]
        X = np.asarray(csr[batch].todense(), dtype=float)
        scores = np.asarray(model.score_batch(X, np.array(batch)), dtype=float)
        if not np.all(np.isfinite(scores)):
            raise ValidationError("model produced non-finite scores")
        for row, u in enumerate(batch):
            masked = train_items.get(u, [])
            s = scores[row].copy()
            s[masked] = -np.inf
            if phase == "test" and u in val_items:
                s[val_items[u]] = -np.inf
            order = np.lexsort((item_order, -s))
            top = []
            for idx in order[:k]:
                if s[idx] == -np.inf:
                    break
                top.append(int(idx))
            if len(top) < k:
                truncated.add(u)
            lists[u] = tuple(top)
    return TopKLists(k=k, lists=lists, truncated=frozenset(truncated))


def verify_masking(lists: TopKLists, split: ds.SplitDataset, phase: str) -> None:
    """Assert no train (or train + validation) item leaked into any list."""
    banned = split.pairs("train")
    if phase == "test":
        banned = banned | split.pairs("validation")
    for u, items in lists.lists.items():
        for i in items:
            if (u, i) in banned:
                raise ValidationError(f"masked item {i} appears in user {u}'s list")


def validation_recall(model, split: ds.SplitDataset, k: int) -> float:
    lists = recommend_topk(model, split, "validation", k)
    truth = split.items_by_user("validation")
    vals = [recall_at_k(items, set(truth[u]), k) for u, items in lists.lists.items()]
    return float(np.mean(vals)) if vals else 0.0


def evaluate_run_for(lists: TopKLists, split: ds.SplitDataset, k: int, phase: str = "test") -> MetricReport:
    return evaluate_run(lists, split.pairs(phase), split.user_groups, split.item_groups, k)


def resolve_dataset(spec: dict) -> tuple[str, ds.SplitDataset]:
    """Build a SplitDataset from a dataset spec dict.

    kinds: ml1m (ratings/users paths), canonical (interactions/users
    paths), synthetic (SyntheticConfig fields), split_dir (a directory
    written by save_split).
    """
    kind = spec.get("kind")
    label = spec.get("label", kind)
    min_n = spec.get("min_interactions")
    if kind == "split_dir":
        return label, load_split(spec["path"])
    if kind == "ml1m":
        data = ds.ingest_ml1m(spec["ratings"], spec["users"])
        data = ds.filter_min_interactions(data, int(min_n if min_n is not None else 20))
    elif kind == "canonical":
        data = ds.ingest_canonical(spec["interactions"], spec["users"])
        data = ds.filter_min_interactions(data, int(min_n if min_n is not None else 20))
    elif kind == "synthetic":
        cfg = ds.SyntheticConfig(
            n_users=int(spec["n_users"]),
            n_items=int(spec["n_items"]),
            density=float(spec["density"]),
            popularity_exponent=float(spec.get("popularity_exponent", 1.0)),
            group_bias=float(spec.get("group_bias", 0.0)),
            female_fraction=float(spec.get("female_fraction", 0.3)),
            seed=int(spec.get("seed", default_seed())),
        )
        data = ds.generate_synthetic(cfg)
        if min_n is not None:
            data = ds.filter_min_interactions(data, int(min_n))
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    return label, ds.temporal_split(data)


def grid_search(cfg: ExperimentConfig, split: ds.SplitDataset | None = None) -> RunRecord:
    """Train every grid point, select on validation Recall@k, test the winner."""
    seed = cfg.resolved_seed()
    grid = cfg.resolved_grid()
    if split is None:
        label, split = resolve_dataset(cfg.dataset)
    else:
        label = cfg.dataset.get("label", "inline")
    train = split.train_csr()
    t0 = time.monotonic()
    best = None  # (recall, index, params, model)
    failures = []
    for idx, point in enumerate(expand_grid(grid)):
        merged = {**cfg.extra, **point}
        try:
            model = fit_model(cfg.model, train, merged, seed)
            score = validation_recall(model, split, cfg.k)
        except FairdiffError as exc:
            failures.append({"params": point, "error": str(exc)})
            continue
        if best is None or score > best[0]:
            best = (score, idx, point, model)
    if best is None:
        raise ConfigError(f"all {cfg.model} grid points failed: {failures}")
    val_recall, _, chosen, model = best
    lists = recommend_topk(model, split, "test", cfg.k)
    verify_masking(lists, split, "test")
    report = evaluate_run(lists, split.pairs("test"), split.user_groups, split.item_groups, cfg.k)
    record = RunRecord(
        model=cfg.model,
        dataset=label,
        seed=seed,
        k=cfg.k,
        chosen=chosen,
        validation_recall=100.0 * val_recall,
        report=report,
        seconds=time.monotonic() - t0,
        failures=failures,
    )
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        append_record(out / "runs.jsonl", record)
        save_checkpoint(model, out / f"{cfg.model}-{label}.ckpt.json")
    return record


def save_checkpoint(model, path) -> None:
    """Write a model checkpoint; EASE keeps its dense matrix in a sidecar .npy."""
    path = Path(path)
    d = model.to_dict()
    if isinstance(model, EaseModel):
        matrix_file = path.with_suffix(".npy")
        np.save(matrix_file, model.B)
        d["matrix_file"] = matrix_file.name
    path.write_text(json.dumps(d), encoding="utf-8")


_MODEL_CLASSES = {
    "popularity": PopularityModel,
    "itemknn": ItemKnnModel,
    "bprmf": BprMfModel,
    "multivae": MultiVaeModel,
    "diffrec": DiffRecModel,
    "ldiffrec": LDiffRecModel,
}


def load_checkpoint(path):
    path = Path(path)
    d = json.loads(path.read_text(encoding="utf-8"))
    name = d.get("model")
    if name == "ease":
        B = np.load(path.parent / d["matrix_file"])
        return EaseModel(B=B, lam=float(d["lam"]))
    if name not in _MODEL_CLASSES:
        raise ConfigError(f"unknown checkpoint model {name!r}")
    return _MODEL_CLASSES[name].from_dict(d)


def save_split(split: ds.SplitDataset, out_dir) -> None:
    """Write a split as TSVs: users, items with groups, and the three phases."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "users.tsv", "w", encoding="utf-8") as fh:
        for idx, user in enumerate(split.users):
            fh.write(f"{user}\t{split.user_groups[idx]}\n")
    with open(out / "items.tsv", "w", encoding="utf-8") as fh:
        for idx, item in enumerate(split.items):
            fh.write(f"{item}\t{split.item_groups[idx]}\n")
    for phase in ("train", "validation", "test"):
        with open(out / f"{phase}.tsv", "w", encoding="utf-8") as fh:
            for u, i, ts in split.phase(phase):
                fh.write(f"{split.users[u]}\t{split.items[i]}\t{ts}\n")


def load_split(in_dir) -> ds.SplitDataset:
    src = Path(in_dir)
    users, user_groups = [], {}
    with open(src / "users.tsv", encoding="utf-8") as fh:
        for idx, line in enumerate(fh):
            user, group = line.rstrip("\n").split("\t")
            users.append(user)
            user_groups[idx] = group
    items, item_groups = [], {}
    with open(src / "items.tsv", encoding="utf-8") as fh:
        for idx, line in enumerate(fh):
            item, group = line.rstrip("\n").split("\t")
            items.append(item)
            item_groups[idx] = group
    uindex = {u: k for k, u in enumerate(users)}
    iindex = {i: k for k, i in enumerate(items)}
    phases = {}
    for phase in ("train", "validation", "test"):
        rows = []
        with open(src / f"{phase}.tsv", encoding="utf-8") as fh:
            for line in fh:
                user, item, ts = line.rstrip("\n").split("\t")
                rows.append((uindex[user], iindex[item], int(ts)))
        phases[phase] = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return ds.SplitDataset(
        users=tuple(users),
        items=tuple(items),
        train=phases["train"],
        validation=phases["validation"],
        test=phases["test"],
        user_groups=user_groups,
        item_groups=item_groups,
    )


def _fmt2(value: float) -> str:
    return str(Decimal(str(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


TABLE_COLUMNS = ("recall", "ndcg", "delta_recall", "delta_ndcg", "aplt", "delta_exp")


def emit_table(records: list[RunRecord]) -> str:
    """CSV with one row per record and the six metric columns in table order."""
    if not records:
        raise ConfigError("no records to report")
    lines = ["dataset,model," + ",".join(TABLE_COLUMNS)]
    for rec in records:
        if rec.report is None:
            cells = ["NA"] * len(TABLE_COLUMNS)
        else:
            cells = [_fmt2(v) for v in rec.report.values()]
        lines.append(f"{rec.dataset},{rec.model}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def emit_markdown_table(records: list[RunRecord]) -> str:
    csv_text = emit_table(records)
    rows = [line.split(",") for line in csv_text.strip().split("\n")]
    out = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    for row in rows[1:]:
        out.append("| " + " | ".join(row) + " |")
    return "\n".join(out) + "\n"


def radar_triples(records: list[RunRecord]) -> dict[str, tuple[float, float, float]]:
    """Per-model (nDCG, delta-nDCG, APLT) raw values from run records."""
    triples = {}
    for rec in records:
        if rec.report is not None:
            triples[rec.model] = (rec.report.ndcg, rec.report.delta_ndcg, rec.report.aplt)
    if not triples:
        raise ConfigError("no records with reports")
    return triples


def normalize_for_radar(values: dict[str, tuple]) -> dict[str, tuple]:
    """Min-max normalize each axis; flip the delta-nDCG axis so higher is better."""
    if not values:
        raise ConfigError("need at least one model")
    names = list(values)
    arr = np.array([values[m] for m in names], dtype=float)
    out = np.empty_like(arr)
    for col in range(arr.shape[1]):
        lo, hi = arr[:, col].min(), arr[:, col].max()
        out[:, col] = 1.0 if hi == lo else (arr[:, col] - lo) / (hi - lo)
    out[:, 1] = 1.0 - out[:, 1]
    return {m: tuple(out[i]) for i, m in enumerate(names)}


_PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3")

RADAR_AXES = ("nDCG", "ΔnDCG", "APLT")


def emit_radar_svg(normalized: dict[str, tuple], axis_labels=RADAR_AXES) -> str:
    """Three-axis Kiviat diagram, one closed polygon per model."""
    if len(axis_labels) != 3:
        raise ConfigError("radar uses exactly three axes")
    if not normalized:
        raise ConfigError("need at least one model")
    cx, cy, radius = 210.0, 180.0, 140.0
    angles = [np.deg2rad(-90 + 120 * i) for i in range(3)]

    def point(axis, value):
        return (
            cx + radius * value * np.cos(angles[axis]),
            cy + radius * value * np.sin(angles[axis]),
        )

    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="420" '
        f'height="{220 + 18 * len(normalized)}" viewBox="0 0 420 {220 + 18 * len(normalized)}">'
    ]
    for ring in (0.25, 0.5, 0.75, 1.0):
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (point(a, ring) for a in range(3)))
        parts.append(f'<polygon points="{pts}" fill="none" stroke="#cccccc" stroke-width="1"/>')
    for axis in range(3):
        x, y = point(axis, 1.0)
        parts.append(
            f'<line x1="{cx}" y1="{cy}" x2="{x:.2f}" y2="{y:.2f}" stroke="#999999" stroke-width="1"/>'
        )
        lx, ly = point(axis, 1.12)
        parts.append(
            f'<text x="{lx:.2f}" y="{ly:.2f}" font-size="13" text-anchor="middle">'
            f"{escape(str(axis_labels[axis]))}</text>"
        )
    for i, (label, triple) in enumerate(normalized.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (point(a, float(v)) for a, v in enumerate(triple)))
        parts.append(
            f'<polygon points="{pts}" fill="{color}" fill-opacity="0.15" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        ly = 340 + 18 * i
        parts.append(f'<rect x="30" y="{ly - 10}" width="12" height="12" fill="{color}"/>')
        parts.append(f'<text x="48" y="{ly}" font-size="13">{escape(str(label))}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
