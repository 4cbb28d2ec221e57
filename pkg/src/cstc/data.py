"""Dataset generation, file ingestion, and model serialization.

Two generators ship with the package: the four-quadrant regression problem
(two unit-cost sign features identify the quadrant; four cost-10 features
carry the exact label only inside their own quadrant) and a synthetic
ranking surrogate with graded relevance labels and extraction costs
stratified over the usual cost levels, where expensive features are
informative only for highly relevant documents.  The surrogate is generated
data, not a real learning-to-rank collection; reports should label it as
such.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .ensemble import (
    WeakLearnerEnsemble,
    ensemble_from_json_dict,
    ensemble_hash,
    ensemble_to_json_dict,
    identity_ensemble,
)
from .model import NODE, TERMINAL, Child, ClassifierNode, CstcTree
from .objective import CostSchedule

__all__ = [
    "Bundle",
    "SyntheticConfig",
    "SyntheticData",
    "generate_synthetic",
    "RankingSurrogateConfig",
    "RankingData",
    "generate_ranking_surrogate",
    "load_dataset",
    "load_costs",
    "save_dataset",
    "save_costs",
    "save_ensemble",
    "load_ensemble",
    "model_to_json_dict",
    "model_from_json_dict",
    "save_model",
    "load_model",
    "split_bundle",
]

MODEL_SCHEMA_VERSION = 1


@dataclass
class Bundle:
    """A dataset slice: raw features, labels, optional query ids."""

    features: np.ndarray
    labels: np.ndarray
    qid: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# synthetic quadrant data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    """Four-quadrant regression problem in raw feature space.

    ``means`` orders the quadrant means as (++, +-, -+, --), matching the
    expensive feature columns 2..5.  The decoy draw fills an expensive
    feature outside its own quadrant.
    """

    n: int = 4000
    means: tuple[float, float, float, float] = (9.0, 3.0, -3.0, -9.0)
    noise_sd: float = 1.0
    decoy_mean: float = 0.0
    decoy_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.noise_sd <= 0:
            raise ValueError("noise_sd must be > 0")


@dataclass
class SyntheticData:
    features: np.ndarray  # columns: sign(x), sign(z), y_pp, y_pm, y_mp, y_mm
    labels: np.ndarray
    quadrant: np.ndarray  # 0..3, aligned with feature column 2 + quadrant
    schedule: CostSchedule
    ensemble: WeakLearnerEnsemble

    def bundle(self) -> Bundle:
        return Bundle(self.features, self.labels)


def _sign(v: np.ndarray) -> np.ndarray:
    # sign(0) is defined as +1 so the mapping is total and deterministic
    return np.where(v >= 0, 1.0, -1.0)


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticData:
    """Sample the quadrant problem; feature costs are [1, 1, 10, 10, 10, 10]."""
    rng = np.random.default_rng(cfg.seed)
    x = rng.uniform(-1.0, 1.0, cfg.n)
    z = rng.uniform(-1.0, 1.0, cfg.n)
    sx = _sign(x)
    sz = _sign(z)
    quadrant = ((sx < 0) * 2 + (sz < 0)).astype(np.int64)
    means = np.asarray(cfg.means, dtype=float)
    labels = rng.normal(means[quadrant], cfg.noise_sd)
    expensive = rng.normal(cfg.decoy_mean, cfg.decoy_sd, (cfg.n, 4))
    expensive[np.arange(cfg.n), quadrant] = labels
    features = np.column_stack([sx, sz, expensive])
    schedule = CostSchedule(
        feature_costs=np.array([1.0, 1.0, 10.0, 10.0, 10.0, 10.0]),
        learner_costs=np.zeros(6),
    )
    return SyntheticData(
        features=features,
        labels=labels,
        quadrant=quadrant,
        schedule=schedule,
        ensemble=identity_ensemble(6),
    )


# ---------------------------------------------------------------------------
# ranking surrogate
# ---------------------------------------------------------------------------


@dataclass
class RankingSurrogateConfig:
    """Planted ranking problem with cost-stratified features.

    Cheap features carry a noisy copy of the latent utility for every
    document; expensive features are informative only when the relevance
    grade reaches ``high_grade``, and pure noise otherwise.
    """

    queries: int = 200
    docs_per_query: int = 20
    num_features: int = 60
    cost_levels: tuple = (1, 5, 20, 50, 100, 150, 200)
    informative_per_level: int = 3
    grade_fractions: tuple = (0.45, 0.25, 0.15, 0.10, 0.05)
    cheap_noise: float = 0.6
    expensive_noise: float = 0.25
    high_grade: int = 3
    expensive_from: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if min(self.queries, self.docs_per_query, self.num_features) < 1:
            raise ValueError("queries, docs_per_query and num_features must be >= 1")
        if len(self.cost_levels) < 1:
            raise ValueError("need at least one cost level")


@dataclass
class RankingData:
    features: np.ndarray
    labels: np.ndarray  # relevance grades 0..4
    qid: np.ndarray
    schedule: CostSchedule

    def bundle(self) -> Bundle:
        return Bundle(self.features, self.labels, self.qid)


def generate_ranking_surrogate(cfg: RankingSurrogateConfig) -> RankingData:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.queries * cfg.docs_per_query
    d = cfg.num_features
    levels = np.asarray(cfg.cost_levels, dtype=float)
    costs = levels[(np.arange(d) * len(levels)) // d]

    utility = rng.normal(0.0, 1.0, n)
    fractions = np.asarray(cfg.grade_fractions, dtype=float)
    edges = np.quantile(utility, np.cumsum(fractions / fractions.sum())[:-1])
    grades = np.searchsorted(edges, utility, side="right").astype(np.int64)
    high = grades >= cfg.high_grade

    features = rng.normal(0.0, 1.0, (n, d))
    for level in levels:
        cols = np.nonzero(costs == level)[0]
        informative = cols[: min(cfg.informative_per_level, len(cols))]
        for c in informative:
            noise = rng.normal(0.0, 1.0, n)
            if level < cfg.expensive_from:
                features[:, c] = utility + cfg.cheap_noise * noise
            else:
                decoy = rng.normal(0.0, 1.0, n)
                features[:, c] = np.where(high, utility + cfg.expensive_noise * noise, decoy)
    qid = np.repeat(np.arange(cfg.queries), cfg.docs_per_query)
    schedule = CostSchedule(feature_costs=costs, learner_costs=np.ones(1))
    return RankingData(features=features, labels=grades, qid=qid, schedule=schedule)


def split_bundle(bundle: Bundle, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> list[Bundle]:
    """Shuffle-split a bundle; grouped by whole queries when qid is present."""
    fractions = np.asarray(fractions, dtype=float)
    fractions = fractions / fractions.sum()
    rng = np.random.default_rng(seed)
    if bundle.qid is not None:
        keys = list(dict.fromkeys(bundle.qid.tolist()))
        order = rng.permutation(len(keys))
        cuts = np.floor(np.cumsum(fractions) * len(keys)).astype(int)[:-1]
        parts = np.split(order, cuts)
        out = []
        for part in parts:
            chosen = {keys[i] for i in part}
            rows = np.asarray([i for i, q in enumerate(bundle.qid) if q in chosen], dtype=np.int64)
            out.append(Bundle(bundle.features[rows], bundle.labels[rows], bundle.qid[rows]))
        return out
    order = rng.permutation(len(bundle))
    cuts = np.floor(np.cumsum(fractions) * len(bundle)).astype(int)[:-1]
    return [
        Bundle(bundle.features[rows], bundle.labels[rows])
        for rows in np.split(order, cuts)
    ]


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------


class ParseError(ValueError):
    """A malformed dataset or cost file row; message carries the line number."""


def _parse_float(token: str, path: str, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: not a number: {token!r}") from None
    if not np.isfinite(value):
        raise ParseError(f"{path}:{lineno}: non-finite value {token!r}")
    return value


def load_dataset(path: str, num_features: int | None = None) -> Bundle:
    """Read a dense CSV (header with feature names, ``label``, optional
    ``qid`` column) or sparse ``label [qid:Q] idx:val ...`` rows."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not body:
        raise ParseError(f"{path}:1: empty dataset")
    if "," in body[0][1]:
        return _load_dense(path, body)
    return _load_sparse(path, body, num_features)


def _load_dense(path: str, body) -> Bundle:
    header = [h.strip() for h in body[0][1].split(",")]
    if "label" not in header:
        raise ParseError(f"{path}:{body[0][0]}: dense header needs a 'label' column")
    label_col = header.index("label")
    qid_col = header.index("qid") if "qid" in header else None
    feat_cols = [i for i in range(len(header)) if i not in (label_col, qid_col)]
    feats, labels, qids = [], [], []
    for lineno, line in body[1:]:
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} cells, got {len(cells)}")
        labels.append(_parse_float(cells[label_col], path, lineno))
        if qid_col is not None:
            qids.append(cells[qid_col])
        feats.append([_parse_float(cells[i], path, lineno) for i in feat_cols])
    if not feats:
        raise ParseError(f"{path}:{body[0][0]}: no data rows")
    return Bundle(
        features=np.asarray(feats, dtype=float),
        labels=np.asarray(labels, dtype=float),
        qid=np.asarray(qids) if qid_col is not None else None,
    )


def _load_sparse(path: str, body, num_features: int | None) -> Bundle:
    rows = []
    labels = []
    qids: list[str] = []
    saw_qid = False
    max_idx = -1
    for lineno, line in body:
        tokens = line.split()
        labels.append(_parse_float(tokens[0], path, lineno))
        entries = {}
        qid_value = None
        for tok in tokens[1:]:
            if tok.startswith("#"):
                break
            if ":" not in tok:
                raise ParseError(f"{path}:{lineno}: expected idx:value, got {tok!r}")
            key, value = tok.split(":", 1)
            if key == "qid":
                qid_value = value
                continue
            try:
                idx = int(key)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad feature index {key!r}") from None
            if idx < 0:
                raise ParseError(f"{path}:{lineno}: negative feature index {idx}")
            entries[idx] = _parse_float(value, path, lineno)
            max_idx = max(max_idx, idx)
        rows.append(entries)
        if qid_value is not None:
            saw_qid = True
        qids.append(qid_value if qid_value is not None else "")
    d = num_features if num_features is not None else max_idx + 1
    if d < 1:
        raise ParseError(f"{path}:1: could not infer the feature dimension")
    features = np.zeros((len(rows), d))
    for i, entries in enumerate(rows):
        for idx, value in entries.items():
            if idx >= d:
                raise ParseError(f"{path}: feature index {idx} exceeds dimension {d}")
            features[i, idx] = value
    return Bundle(
        features=features,
        labels=np.asarray(labels, dtype=float),
        qid=np.asarray(qids) if saw_qid else None,
    )


def save_dataset(path: str, bundle: Bundle) -> None:
    """Write a bundle as dense CSV (feature names f0..f{d-1})."""
    d = bundle.features.shape[1]
    header = [f"f{i}" for i in range(d)] + ["label"]
    if bundle.qid is not None:
        header.append("qid")
    lines = [",".join(header)]
    for i in range(len(bundle)):
        cells = [repr(float(v)) for v in bundle.features[i]] + [repr(float(bundle.labels[i]))]
        if bundle.qid is not None:
            cells.append(str(bundle.qid[i]))
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_costs(
    path: str, num_features: int, default_learner_costs: np.ndarray | None = None
) -> CostSchedule:
    """Read ``feature_index cost [learner_cost]`` rows.

    Every feature index in ``[0, num_features)`` must appear exactly once;
    defaulting a missing feature cost is refused.  The optional third column
    on row i overrides the evaluation cost of learner i (valid only while i
    is a valid learner index).
    """
    feature_costs = np.full(num_features, np.nan)
    learner_costs = (
        None if default_learner_costs is None else np.asarray(default_learner_costs, dtype=float).copy()
    )
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) not in (2, 3):
                raise ParseError(f"{path}:{lineno}: expected 2 or 3 columns, got {len(tokens)}")
            try:
                idx = int(tokens[0])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad feature index {tokens[0]!r}") from None
            if not 0 <= idx < num_features:
                raise ParseError(f"{path}:{lineno}: unknown feature index {idx}")
            if not np.isnan(feature_costs[idx]):
                raise ParseError(f"{path}:{lineno}: duplicate cost for feature {idx}")
            feature_costs[idx] = _parse_float(tokens[1], path, lineno)
            if len(tokens) == 3:
                if learner_costs is None or idx >= len(learner_costs):
                    raise ParseError(
                        f"{path}:{lineno}: learner-cost override without a matching learner"
                    )
                learner_costs[idx] = _parse_float(tokens[2], path, lineno)
    missing = np.nonzero(np.isnan(feature_costs))[0]
    if missing.size:
        raise ParseError(f"{path}: missing cost for feature(s) {missing.tolist()}")
    if learner_costs is None:
        learner_costs = np.ones(num_features)
    return CostSchedule(feature_costs=feature_costs, learner_costs=learner_costs)


def save_costs(path: str, schedule: CostSchedule) -> None:
    with open(path, "w") as fh:
        for idx, c in enumerate(schedule.feature_costs):
            fh.write(f"{idx} {float(c)!r}\n")


# ---------------------------------------------------------------------------
# JSON model / ensemble files
# ---------------------------------------------------------------------------


class CompatibilityError(ValueError):
    """Model file does not match the ensemble or schema it is loaded against."""


def _dump_json(path: str, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def save_ensemble(path: str, ens: WeakLearnerEnsemble) -> None:
    _dump_json(path, ensemble_to_json_dict(ens))


def load_ensemble(path: str) -> WeakLearnerEnsemble:
    with open(path) as fh:
        return ensemble_from_json_dict(json.load(fh))


def _sparse_vec(v: np.ndarray) -> dict:
    idx = np.nonzero(v != 0.0)[0]
    return {"indices": idx.tolist(), "values": [float(v[i]) for i in idx]}


def _dense_vec(doc: dict, size: int) -> np.ndarray:
    out = np.zeros(size)
    out[np.asarray(doc["indices"], dtype=np.int64)] = np.asarray(doc["values"], dtype=float)
    return out


def model_to_json_dict(tree: CstcTree, ensemble_digest: str) -> dict:
    nodes = []
    for k in range(tree.num_nodes):
        node = tree.nodes[k]
        nodes.append(
            {
                "label": tree.labels[k],
                "theta": float(node.theta),
                "beta": _sparse_vec(node.beta),
                "beta_ft": None if node.beta_ft is None else _sparse_vec(node.beta_ft),
                "upper": {"kind": tree.upper[k].kind, "index": tree.upper[k].index},
                "lower": {"kind": tree.lower[k].kind, "index": tree.lower[k].index},
            }
        )
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "ensemble_hash": ensemble_digest,
        "num_weak": tree.num_weak,
        "depth": tree.depth,
        "nodes": nodes,
    }


def model_from_json_dict(doc: dict, expected_hash: str | None = None) -> CstcTree:
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise CompatibilityError(
            f"unsupported model schema version: {doc.get('schema_version')!r}"
        )
    if expected_hash is not None and doc.get("ensemble_hash") != expected_hash:
        raise CompatibilityError(
            "model was trained against a different ensemble "
            f"(hash {doc.get('ensemble_hash')!r} != {expected_hash!r})"
        )
    T = int(doc["num_weak"])
    nodes = []
    upper = []
    lower = []
    labels = []
    for entry in doc["nodes"]:
        nodes.append(
            ClassifierNode(
                beta=_dense_vec(entry["beta"], T),
                theta=float(entry["theta"]),
                beta_ft=None if entry["beta_ft"] is None else _dense_vec(entry["beta_ft"], T),
            )
        )
        labels.append(int(entry["label"]))
        upper.append(Child(entry["upper"]["kind"], int(entry["upper"]["index"])))
        lower.append(Child(entry["lower"]["kind"], int(entry["lower"]["index"])))
    return CstcTree(nodes, upper, lower, labels, depth=int(doc["depth"]))


def save_model(path: str, tree: CstcTree, ensemble: WeakLearnerEnsemble) -> None:
    _dump_json(path, model_to_json_dict(tree, ensemble_hash(ensemble)))


def load_model(path: str, ensemble: WeakLearnerEnsemble | None = None) -> CstcTree:
    """Load a model file, refusing when the bound ensemble hash mismatches."""
    with open(path) as fh:
        doc = json.load(fh)
    expected = None if ensemble is None else ensemble_hash(ensemble)
    return model_from_json_dict(doc, expected)
