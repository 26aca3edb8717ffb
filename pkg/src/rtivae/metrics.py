"""Cluster validity indices, feature measurements and latent probes."""

from __future__ import annotations

import csv
import io
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, sosfiltfilt
from scipy.spatial.distance import cdist, pdist
from sklearn.exceptions import ConvergenceWarning
from sklearn.model_selection import StratifiedKFold
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

F0_MIN, F0_MAX = 80.0, 400.0
YIN_THRESHOLD = 0.1
PAUSE_THRESHOLD = 0.1


class DegenerateClusteringError(ValueError):
    pass


@dataclass
class LabeledPoints:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.labels = np.asarray(self.labels)
        if len(self.points) != len(self.labels):
            raise ValueError(f"{len(self.points)} points but {len(self.labels)} labels")

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def groups(self) -> list:
        return [self.points[self.labels == c] for c in self.classes]


def _require_classes(data: LabeledPoints, n: int = 2):
    if len(data.classes) < n:
        raise ValueError(f"need at least {n} distinct labels, got {len(data.classes)}")


def dunn_index(data: LabeledPoints) -> float:
    """Smallest between-cluster point distance over the largest cluster diameter."""
    _require_classes(data)
    groups = data.groups()
    diameter = max((pdist(g).max() if len(g) > 1 else 0.0) for g in groups)
    if diameter <= 0:
        raise DegenerateClusteringError("degenerate clustering: every cluster has zero diameter")
    separation = min(cdist(a, b).min() for a, b in itertools.combinations(groups, 2))
    return float(separation / diameter)


def davies_bouldin(data: LabeledPoints) -> float:
    """Mean over clusters of the worst (spread_i + spread_j) / centroid distance ratio."""
    _require_classes(data)
    groups = data.groups()
    centroids = np.array([g.mean(axis=0) for g in groups])
    spreads = np.array([np.linalg.norm(g - c, axis=1).mean() for g, c in zip(groups, centroids)])
    sep = cdist(centroids, centroids)
    n = len(groups)
    if np.any(sep[~np.eye(n, dtype=bool)] == 0):
        raise DegenerateClusteringError("coincident cluster centroids")
    ratios = (spreads[:, None] + spreads[None, :]) / np.where(np.eye(n, dtype=bool), 1.0, sep)
    np.fill_diagonal(ratios, -np.inf)
    return float(ratios.max(axis=1).mean())


def cluster_overlap_percent(data: LabeledPoints) -> dict:
    """Share of points falling inside another class's one-standard-deviation box.

    Returns ``{"pairs": {(i, j): percent of class-i points inside j's box},
    "aggregate": percent of all points inside some other class's box}``.
    Standard deviations are per dimension with ``ddof=0``.
    """
    _require_classes(data)
    classes = data.classes
    stats = {c: (data.points[data.labels == c].mean(axis=0),
                 data.points[data.labels == c].std(axis=0)) for c in classes}
    pairs = {}
    any_overlap = np.zeros(len(data.points), dtype=bool)
    for i in classes:
        sel = data.labels == i
        pts = data.points[sel]
        for j in classes:
            if i == j:
                continue
            mu, sd = stats[j]
            inside = np.all((pts >= mu - sd) & (pts <= mu + sd), axis=1)
            pairs[(i.item(), j.item())] = 100.0 * inside.mean()
            any_overlap[np.flatnonzero(sel)[inside]] = True
    return {"pairs": pairs, "aggregate": 100.0 * any_overlap.mean()}


# ---------------------------------------------------------------- measurements

def difference_function(x: np.ndarray, tau_max: int) -> np.ndarray:
    """d(tau) = sum_j (x_j - x_{j+tau})^2 over a window of len(x) - tau_max samples."""
    w = len(x) - tau_max
    return np.array([np.sum((x[:w] - x[tau:tau + w]) ** 2) for tau in range(tau_max + 1)])


def cumulative_mean_normalized(d: np.ndarray) -> np.ndarray:
    out = np.ones_like(d)
    csum = np.cumsum(d[1:])
    taus = np.arange(1, len(d))
    with np.errstate(divide="ignore", invalid="ignore"):
        out[1:] = np.where(csum > 0, d[1:] * taus / csum, 1.0)
    return out


def estimate_f0(waveform, sample_rate: int = 8000, threshold: float = YIN_THRESHOLD,
                f_min: float = F0_MIN, f_max: float = F0_MAX,
                lowpass_hz: float | None = 1000.0) -> float | None:
    """Difference-function pitch estimate in Hz, or ``None`` for unvoiced input.

    The signal is low-passed (zero phase) first; bright harmonic carriers
    otherwise produce octave errors at non-integer periods.
    """
    x = np.asarray(waveform, dtype=np.float64)
    tau_min = int(np.floor(sample_rate / f_max))
    tau_max = int(np.ceil(sample_rate / f_min))
    if len(x) < 2 * tau_max:
        raise ValueError(f"need at least {2 * tau_max} samples, got {len(x)}")
    if np.sqrt(np.mean(x ** 2)) < 1e-6:
        return None
    if lowpass_hz is not None and lowpass_hz < sample_rate / 2:
        x = sosfiltfilt(butter(4, lowpass_hz, fs=sample_rate, output="sos"), x)
    cmnd = cumulative_mean_normalized(difference_function(x, tau_max + 1))
    search = cmnd[tau_min:tau_max + 1]
    below = np.flatnonzero(search < threshold)
    if len(below):
        tau = tau_min + below[0]
        while tau + 1 <= tau_max and cmnd[tau + 1] < cmnd[tau]:
            tau += 1
    else:
        tau = tau_min + int(np.argmin(search))
    shift = 0.0
    if tau_min < tau < len(cmnd) - 1:
        a, b, c = cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]
        denom = a - 2 * b + c
        if denom > 0:
            shift = 0.5 * (a - c) / denom
    return float(sample_rate / (tau + shift))


def measure_pause(frames, threshold: float = PAUSE_THRESHOLD) -> int:
    """Longest interior run of frames whose mean energy is below ``threshold``."""
    energy = np.asarray(frames, dtype=np.float64).mean(axis=-1)
    quiet = energy < threshold
    loud = np.flatnonzero(~quiet)
    if len(loud) < 2:
        return 0
    best = run = 0
    for q in quiet[loud[0]:loud[-1] + 1]:
        run = run + 1 if q else 0
        best = max(best, run)
    return best


# ---------------------------------------------------------------- probes

def probe_accuracy(data: LabeledPoints, folds: int = 5, seed: int = 0) -> float:
    """Cross-validated accuracy of a one-hidden-layer (8 tanh units) classifier."""
    _, counts = np.unique(data.labels, return_counts=True)
    if counts.min() < 10:
        raise ValueError("probe needs at least 10 points per class")
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    correct = 0
    for train, test in splitter.split(data.points, data.labels):
        clf = make_pipeline(StandardScaler(),
                            MLPClassifier(hidden_layer_sizes=(8,), activation="tanh",
                                          solver="lbfgs", max_iter=1000, random_state=seed))
        with warnings.catch_warnings():
            # hitting max_iter on inseparable data is expected; the accuracy is still valid
            warnings.simplefilter("ignore", ConvergenceWarning)
            clf.fit(data.points[train], data.labels[train])
        correct += int((clf.predict(data.points[test]) == data.labels[test]).sum())
    return correct / len(data.labels)


# ---------------------------------------------------------------- reports

@dataclass
class ClusterReport:
    dunn: float
    davies_bouldin: float
    overlap_percent: dict
    probe_accuracy: float
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_points(cls, data: LabeledPoints, folds: int = 5, seed: int = 0,
                    strict: bool = True) -> "ClusterReport":
        """All indices for ``data``; with ``strict=False`` a probe that cannot
        run on too few points is reported as NaN instead of raising."""
        try:
            probe = probe_accuracy(data, folds, seed)
        except ValueError:
            if strict:
                raise
            probe = float("nan")
        return cls(dunn_index(data), davies_bouldin(data), cluster_overlap_percent(data), probe)

    def rows(self, prefix: str = "") -> list:
        """(metric, class_pair, value) rows."""
        rows = [(f"{prefix}dunn", "all", self.dunn),
                (f"{prefix}davies_bouldin", "all", self.davies_bouldin)]
        for (i, j), v in sorted(self.overlap_percent["pairs"].items()):
            rows.append((f"{prefix}overlap_percent", f"{i}-{j}", v))
        rows.append((f"{prefix}overlap_percent", "all", self.overlap_percent["aggregate"]))
        rows.append((f"{prefix}probe_accuracy", "all", self.probe_accuracy))
        rows.extend((f"{prefix}{k}", "all", v) for k, v in sorted(self.extra.items()))
        return rows

    def to_record(self) -> str:
        return " ".join(f"{m}[{p}]={float(v)!r}" for m, p, v in self.rows())


CSV_HEADER = ("metric", "class_pair", "value")


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def read_report_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CSV_HEADER:
        raise ValueError(f"unexpected report header {header}")
    return [(m, p, float(v)) for m, p, v in reader]
