"""Dataset manifests, mean-shape oracles, batch evaluation and the
preference-test statistics."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from voxface.errors import DataError
from voxface.metrics import (
    EvalReport,
    IcpConfig,
    RATIO_NAMES,
    REGION_NAMES,
    RatioSpec,
    RegionMap,
    absolute_ratio_error,
    icp_point_to_plane,
    mean_report,
    nme,
    part_rmse,
)
from voxface.morphable import MorphableBasis, reconstruct, vertex_normals

log = logging.getLogger(__name__)

EVAL_LETTERS = frozenset("ABCDE")


# -- manifests ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    gender: str = ""
    utterances: tuple[str, ...] = ()
    coefficients: str = ""

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise DataError("identity name must be non-empty")
        object.__setattr__(self, "utterances", tuple(self.utterances))


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    root: Optional[Path] = None

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def check_files(self) -> None:
        for e in self.entries:
            for rel in (*e.utterances, *([e.coefficients] if e.coefficients else [])):
                if not self.resolve(rel).is_file():
                    raise DataError(f"identity {e.name}: missing file {rel}")

    @classmethod
    def load(cls, path: str | os.PathLike, check: bool = True) -> "DatasetManifest":
        """Read a JSON manifest::

            {"identities": [
                {"name": "Alice", "gender": "f",
                 "utterances": ["feats/alice_0.txt", ...],
                 "coefficients": "coeffs/alice.txt"},
                ...]}

        Relative paths resolve against the manifest's directory.
        """
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            raw = doc["identities"]
            entries = tuple(
                ManifestEntry(
                    str(item["name"]),
                    str(item.get("gender", "")),
                    tuple(item.get("utterances", ())),
                    str(item.get("coefficients", "")),
                )
                for item in raw
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed manifest ({exc})") from None
        m = cls(entries, path.parent)
        if check:
            m.check_files()
        return m

    def save(self, path: str | os.PathLike) -> None:
        doc = {
            "identities": [
                {
                    "name": e.name,
                    "gender": e.gender,
                    "utterances": list(e.utterances),
                    "coefficients": e.coefficients,
                }
                for e in self.entries
            ]
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def is_eval_name(name: str) -> bool:
    if not name or not name.strip():
        raise DataError("identity name must be non-empty")
    return name.strip()[0].upper() in EVAL_LETTERS


def split_names(names: Iterable[str]) -> tuple[list[str], list[str]]:
    """``(train, eval)``: names starting with A-E (any case) go to eval."""
    train, evals = [], []
    for n in names:
        (evals if is_eval_name(n) else train).append(n)
    if not evals:
        log.warning("evaluation split is empty: no identity name starts with A-E")
    return train, evals


def split_manifest(m: DatasetManifest) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    train, evals = [], []
    for e in m.entries:
        (evals if is_eval_name(e.name) else train).append(e)
    if not evals:
        log.warning("evaluation split is empty: no identity name starts with A-E")
    return train, evals


# -- oracles -----------------------------------------------------------------


@dataclass(frozen=True)
class OracleModel:
    kind: str
    means: Mapping[str, np.ndarray]
    group_key: str = "gender"

    def predict(self, group: Optional[str] = None) -> np.ndarray:
        if self.kind == "global_mean":
            return self.means[""].copy()
        if group not in self.means:
            raise DataError(f"oracle has no mean for group {group!r}")
        return self.means[group].copy()


def fit_oracle(
    coeffs, kind: str = "global_mean", groups: Optional[Sequence[str]] = None
) -> OracleModel:
    """Mean coefficient vector of the training set, overall or per group."""
    c = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    if c.shape[0] == 0 or c.size == 0:
        raise DataError("oracle needs a non-empty training set")
    if kind == "global_mean":
        return OracleModel(kind, {"": c.mean(axis=0)})
    if kind != "per_group_mean":
        raise DataError(f"unknown oracle kind {kind!r}")
    if groups is None or len(groups) != len(c):
        raise DataError("per-group oracle needs one group label per sample")
    labels = np.asarray(groups, dtype=object)
    means = {}
    for g in sorted(set(groups)):
        members = c[labels == g]
        if len(members) == 0:
            raise DataError(f"group {g!r} is empty")
        means[g] = members.mean(axis=0)
    return OracleModel(kind, means)


# -- evaluation --------------------------------------------------------------


@dataclass
class Evaluation:
    aggregate: EvalReport
    per_identity: dict[str, EvalReport] = field(default_factory=dict)


def compare_pair(
    pred_coeffs,
    ref_coeffs,
    basis: MorphableBasis,
    spec: RatioSpec = RatioSpec(),
    regions: Optional[RegionMap] = None,
    cfg: IcpConfig = IcpConfig(),
    metadata: Optional[dict] = None,
) -> EvalReport:
    """All metrics for one predicted/reference coefficient pair.

    When ``regions`` is omitted the part RMSE values are reported as zero.
    """
    pred = reconstruct(basis, pred_coeffs)
    ref = vertex_normals(reconstruct(basis, ref_coeffs))
    are = absolute_ratio_error(pred, ref, spec, basis)
    lm = basis.landmark_indices
    point_err = nme(pred.vertices[lm], ref.vertices[lm], ref)
    _, rmse = icp_point_to_plane(pred, ref, cfg)
    if regions is not None:
        parts = part_rmse(pred, ref, regions, cfg)
    else:
        parts = {k: 0.0 for k in REGION_NAMES}
    return EvalReport({k: are[k] for k in RATIO_NAMES}, point_err, rmse, parts, dict(metadata or {}))


def evaluate(
    predictions: Sequence[tuple[str, np.ndarray]],
    references: Mapping[str, np.ndarray],
    basis: MorphableBasis,
    spec: RatioSpec = RatioSpec(),
    regions: Optional[RegionMap] = None,
    cfg: IcpConfig = IcpConfig(),
    workers: int = 1,
) -> Evaluation:
    """Score ``(identity, coefficients)`` predictions against one reference per identity.

    Pair reports are averaged per identity (over its utterances), then the
    identity reports are averaged in sorted-name order, so the result does not
    depend on input order or on ``workers``.
    """
    if not predictions:
        raise DataError("no predictions to evaluate")
    grouped: dict[str, list[np.ndarray]] = {}
    for name, coeffs in predictions:
        if name not in references:
            raise DataError(f"no reference coefficients for identity {name!r}")
        grouped.setdefault(name, []).append(np.asarray(coeffs, dtype=np.float64))

    def score(name):
        ref = references[name]
        reports = [
            compare_pair(p, ref, basis, spec, regions, cfg, {"identity": name, "utterance": str(i)})
            for i, p in enumerate(grouped[name])
        ]
        return name, mean_report(reports, {"identity": name, "utterances": str(len(reports))})

    names = sorted(grouped)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per = dict(pool.map(score, names))
    else:
        per = dict(map(score, names))
    agg = mean_report([per[n] for n in names], {"identities": str(len(names))})
    return Evaluation(agg, per)


# -- binomial significance ----------------------------------------------------


def _log_pmf(n: int, p: float) -> np.ndarray:
    k = np.arange(n + 1)
    log_comb = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    return log_comb + k * math.log(p) + (n - k) * math.log1p(-p)


def _check_np(n: int, p: float) -> None:
    if int(n) != n or n < 1:
        raise DataError("n must be a positive integer")
    if not 0 < p < 1:
        raise DataError("p must lie strictly between 0 and 1")


def binomial_cdf(m: int, n: int, p: float) -> float:
    """``P(X <= m)`` for ``X ~ Binomial(n, p)`` by log-space summation."""
    _check_np(n, p)
    if m < 0:
        return 0.0
    if m >= n:
        return 1.0
    return float(np.exp(np.logaddexp.reduce(_log_pmf(n, p)[: m + 1])))


def binomial_sf(k: int, n: int, p: float) -> float:
    """Upper tail ``P(X >= k)``."""
    _check_np(n, p)
    if k <= 0:
        return 1.0
    if k > n:
        return 0.0
    return float(np.exp(np.logaddexp.reduce(_log_pmf(n, p)[k:])))


def binomial_quantile(n: int, p: float, q: float) -> int:
    """Smallest ``m`` with ``P(X <= m) >= q``."""
    _check_np(n, p)
    if not 0 < q < 1:
        raise DataError("quantile order must lie strictly between 0 and 1")
    # P(X <= m) >= q  <=>  P(X > m) <= 1 - q; the upper tail keeps precision as q -> 1
    log_pmf = _log_pmf(n, p)
    log_tail = np.append(np.logaddexp.accumulate(log_pmf[::-1])[::-1][1:], -np.inf)
    hits = np.flatnonzero(log_tail <= math.log1p(-q))
    return int(hits[0])


@dataclass(frozen=True)
class PreferenceTally:
    n: int
    k: int
    gamma: float = 0.001

    def __post_init__(self):
        if self.n < 1 or not 0 <= self.k <= self.n:
            raise DataError("tally needs n >= 1 and 0 <= k <= n")
        if not 0 < self.gamma < 1:
            raise DataError("gamma must lie strictly between 0 and 1")


@dataclass(frozen=True)
class SignificanceResult:
    reject: bool
    p_value: float
    threshold: int


def significance_test(t: PreferenceTally, p0: float = 0.5) -> SignificanceResult:
    """One-sided test of ``p <= p0`` against ``p > p0`` for ``k`` votes out of ``n``.

    Rejects when ``k`` reaches the binomial quantile of order ``1 - gamma``;
    ``p_value`` is ``P(X >= k)`` under ``p0``.
    """
    threshold = binomial_quantile(t.n, p0, 1.0 - t.gamma)
    return SignificanceResult(t.k >= threshold, binomial_sf(t.k, t.n, p0), threshold)


# -- coefficient tables ------------------------------------------------------


def write_coeff_table(path: str | os.PathLike, rows: Iterable[tuple[str, np.ndarray]]) -> None:
    """CSV with header ``identity,c0,c1,...`` and one row per prediction."""
    rows = list(rows)
    width = len(rows[0][1]) if rows else 0
    with open(path, "w") as fh:
        fh.write(",".join(["identity"] + [f"c{i}" for i in range(width)]) + "\n")
        for name, values in rows:
            if "," in name:
                raise DataError(f"identity name {name!r} contains a comma")
            fh.write(",".join([name] + [repr(float(v)) for v in values]) + "\n")


def read_coeff_table(path: str | os.PathLike) -> list[tuple[str, np.ndarray]]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "identity":
            raise DataError(f"{path}: expected an 'identity,c0,...' header")
        for lineno, raw in enumerate(fh, 2):
            if not raw.strip():
                continue
            cells = raw.strip().split(",")
            if len(cells) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells")
            try:
                rows.append((cells[0], np.array([float(c) for c in cells[1:]])))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric coefficient") from None
    return rows


def load_vector(path: str | os.PathLike) -> np.ndarray:
    """Whitespace-separated numbers (any line layout) as a flat vector."""
    with open(path) as fh:
        tokens = fh.read().split()
    try:
        return np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: malformed numeric file ({exc})") from None
