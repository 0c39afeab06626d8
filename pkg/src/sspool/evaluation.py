"""Segmentation scoring, frame-DTW cosine ABX, a linear speaker probe, and
TIMIT-style label parsing."""

import os
from dataclasses import dataclass

import numpy as np

from .encoder import contextualize, encode_frames
from .errors import ContractError, DataError
from .pooling import predict_boundaries, soft_pool
from .synth import load_manifest
from .audio import load_wav


# ---- boundary matching ---------------------------------------------------------


@dataclass(frozen=True)
class SegmentationScore:
    precision: float
    recall: float
    f1: float
    r_value: float

    def to_jsonable(self):
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "r_value": self.r_value,
        }


def match_boundaries(predicted, reference, tolerance=0.02):
    """Greedy one-to-one matching in time order.

    Each reference boundary takes the nearest still-unmatched prediction
    within the tolerance; distance ties go to the earlier prediction.
    Returns (ref_index, pred_index) pairs.
    """
    pred = list(predicted)
    used = [False] * len(pred)
    pairs = []
    for ri, r in enumerate(reference):
        best = None
        for pi, p in enumerate(pred):
            if used[pi] or abs(p - r) > tolerance:
                continue
            if best is None or (abs(p - r), p) < (abs(pred[best] - r), pred[best]):
                best = pi
        if best is not None:
            used[best] = True
            pairs.append((ri, best))
    return pairs


def _check_sorted(name, values):
    v = list(values)
    if any(b < a for a, b in zip(v, v[1:])):
        raise ContractError(f"{name} boundary times must be sorted ascending")
    return v


def _scores_from_counts(hits, n_pred, n_ref):
    precision = hits / n_pred if n_pred else 0.0
    recall = hits / n_ref
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    os_ = n_pred / n_ref - 1.0  # R/P - 1 written so zero-hit cases stay defined
    r1 = np.sqrt((1.0 - recall) ** 2 + os_**2)
    r2 = (-os_ + recall - 1.0) / np.sqrt(2.0)
    r_value = 1.0 - (abs(r1) + abs(r2)) / 2.0
    return SegmentationScore(precision, recall, f1, float(r_value))


def segmentation_scores(predicted, reference, tolerance=0.02) -> SegmentationScore:
    """Precision/recall/F1 plus the R-value of a predicted boundary list.

    R-value from over-segmentation OS = R/P - 1:
    r1 = sqrt((1-R)^2 + OS^2), r2 = (-OS + R - 1)/sqrt(2),
    R-val = 1 - (|r1| + |r2|)/2.
    """
    pred = _check_sorted("predicted", predicted)
    ref = _check_sorted("reference", reference)
    if not ref:
        raise ContractError("reference boundary list is empty")
    if tolerance < 0:
        raise ContractError(f"tolerance must be >= 0, got {tolerance}")
    hits = len(match_boundaries(pred, ref, tolerance))
    return _scores_from_counts(hits, len(pred), len(ref))


def aggregate_segmentation_scores(pairs, tolerance=0.02) -> SegmentationScore:
    """Micro-averaged scores over (predicted, reference) utterance pairs:
    hits and boundary counts are summed before computing the metrics."""
    hits = n_pred = n_ref = 0
    for pred, ref in pairs:
        pred = _check_sorted("predicted", pred)
        ref = _check_sorted("reference", ref)
        if not ref:
            raise ContractError("reference boundary list is empty")
        hits += len(match_boundaries(pred, ref, tolerance))
        n_pred += len(pred)
        n_ref += len(ref)
    if n_ref == 0:
        raise ContractError("no reference boundaries to score")
    return _scores_from_counts(hits, n_pred, n_ref)


# ---- ABX -----------------------------------------------------------------------


@dataclass
class AbxResult:
    within_error: float
    across_error: float
    n_within: int
    n_across: int

    def to_jsonable(self):
        return {
            "within_error": self.within_error,
            "across_error": self.across_error,
            "n_within": self.n_within,
            "n_across": self.n_across,
        }


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(norms > 0, x / np.maximum(norms, 1e-300), 0.0)
    return out


def dtw_cosine_distance(u, v):
    """Mean frame-pair cosine distance along the cheapest monotonic path.

    Steps are (1,0), (0,1), (1,1) with no step weighting; the total path
    cost is minimized, then divided by the number of visited cells.
    Zero-norm frames count as cosine similarity 0.
    """
    a = _unit_rows(getattr(u, "values", u))
    b = _unit_rows(getattr(v, "values", v))
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("dtw needs two nonempty (frames, dim) arrays")
    cost = 1.0 - a @ b.T
    n, m = cost.shape
    acc = np.empty((n, m))
    step = np.zeros((n, m), dtype=np.int8)  # 0 diag, 1 up, 2 left
    acc[0, 0] = cost[0, 0]
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + cost[0, j]
        step[0, j] = 2
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
        step[i, 0] = 1
        row = acc[i]
        prev = acc[i - 1]
        ci = cost[i]
        for j in range(1, m):
            best = prev[j - 1]
            s = 0
            if prev[j] < best:
                best = prev[j]
                s = 1
            if row[j - 1] < best:
                best = row[j - 1]
                s = 2
            row[j] = best + ci[j]
            step[i, j] = s
    i, j = n - 1, m - 1
    length = 1
    while i or j:
        s = step[i, j]
        if s == 0:
            i, j = i - 1, j - 1
        elif s == 1:
            i -= 1
        else:
            j -= 1
        length += 1
    return float(acc[n - 1, m - 1] / length)


def _representation(buf, model, which):
    z = encode_frames(buf, model)
    if which == "z":
        return z.values
    if which == "c":
        return contextualize(z, model).values
    if which == "pooled":
        return soft_pool(z, predict_boundaries(z, model))
    raise ContractError(f"unknown representation {which!r} (use z, c, or pooled)")


def _triple_error(model, t, representation):
    if t.condition not in ("within", "across"):
        raise DataError(f"triple condition must be within/across, got {t.condition!r}")
    ra = _representation(t.a, model, representation)
    rb = _representation(t.b, model, representation)
    rx = _representation(t.x, model, representation)
    da = dtw_cosine_distance(ra, rx)
    db = dtw_cosine_distance(rb, rx)
    return t.condition, 1.0 if da > db else 0.5 if da == db else 0.0


def abx_error(model, triples, representation="z", threads=1) -> AbxResult:
    """Fraction of triples where X sits closer to B than to A under frame-DTW
    cosine distance; ties count 0.5. Averaged per condition.

    Triples are independent, so `threads` > 1 evaluates them in a thread pool;
    contributions are merged in input order either way.
    """
    triples = list(triples)
    if not triples:
        raise ContractError("need at least one ABX triple")
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda t: _triple_error(model, t, representation), triples))
    else:
        results = [_triple_error(model, t, representation) for t in triples]
    sums = {"within": 0.0, "across": 0.0}
    counts = {"within": 0, "across": 0}
    for condition, contribution in results:
        sums[condition] += contribution
        counts[condition] += 1
    return AbxResult(
        within_error=sums["within"] / counts["within"] if counts["within"] else None,
        across_error=sums["across"] / counts["across"] if counts["across"] else None,
        n_within=counts["within"],
        n_across=counts["across"],
    )


# ---- speaker probe -------------------------------------------------------------


@dataclass
class ProbeConfig:
    train_fraction: float = 0.7
    lr: float = 0.5
    max_steps: int = 4000
    tol: float = 1e-7
    representation: str = "z"

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ContractError(f"train_fraction must be in (0,1), got {self.train_fraction}")
        if self.lr <= 0 or self.max_steps < 1 or self.tol <= 0:
            raise ContractError("probe needs lr > 0, max_steps >= 1, tol > 0")


def fit_softmax_probe(x_train, y_train, n_classes, config: ProbeConfig):
    """Full-batch gradient descent on multinomial cross-entropy until the loss
    settles. Returns (weights, bias)."""
    x = np.asarray(x_train, dtype=np.float64)
    y = np.asarray(y_train)
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    prev = np.inf
    for _ in range(config.max_steps):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300)))
        g = (p - onehot) / n
        w -= config.lr * (x.T @ g)
        b -= config.lr * g.sum(axis=0)
        if abs(prev - loss) < config.tol:
            break
        prev = loss
    return w, b


def probe_accuracy(features, labels, config: ProbeConfig = None):
    """Stratified split by utterance, standardize on train, fit, score test."""
    config = config or ProbeConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = sorted(set(y.tolist()))
    if len(classes) < 2:
        raise DataError(f"speaker probe needs at least 2 speakers, got {len(classes)}")
    index = {c: k for k, c in enumerate(classes)}
    y = np.array([index[v] for v in y.tolist()])
    train_idx, test_idx = [], []
    for k in range(len(classes)):
        members = np.flatnonzero(y == k)
        if members.size < 2:
            raise DataError(
                f"speaker {classes[k]!r} has {members.size} utterance(s); "
                "need at least 2 for a train/test split"
            )
        n_train = max(1, min(members.size - 1, round(config.train_fraction * members.size)))
        train_idx.extend(members[:n_train])
        test_idx.extend(members[n_train:])
    train_idx, test_idx = np.array(train_idx), np.array(test_idx)
    mu = x[train_idx].mean(axis=0)
    sd = np.maximum(x[train_idx].std(axis=0), 1e-8)
    xs = (x - mu) / sd
    w, b = fit_softmax_probe(xs[train_idx], y[train_idx], len(classes), config)
    pred = np.argmax(xs[test_idx] @ w + b, axis=1)
    return float(np.mean(pred == y[test_idx]))


def speaker_probe(model, manifest, config: ProbeConfig = None):
    """Mean-pooled frame features per utterance, linear softmax classifier on a
    speaker split; returns held-out accuracy in [0, 1]."""
    config = config or ProbeConfig()
    entries = (
        load_manifest(manifest)
        if isinstance(manifest, (str, os.PathLike))
        else list(manifest)
    )
    feats, labels = [], []
    for e in entries:
        buf = load_wav(e["audio"]) if isinstance(e.get("audio"), str) else e["audio"]
        rep = _representation(buf, model, config.representation)
        feats.append(np.asarray(rep, dtype=np.float64).mean(axis=0))
        labels.append(e["speaker"])
    if not feats:
        raise DataError("manifest has no utterances")
    return probe_accuracy(np.stack(feats), labels, config)


# ---- TIMIT labels --------------------------------------------------------------


def parse_phn(path, sample_rate=16000):
    """Read a .PHN file of `start_sample end_sample label` lines.

    Returns (boundary_times, labels) where times are the segment starts in
    seconds. Segments must tile the file: each start equals the previous end.
    """
    if sample_rate <= 0:
        raise ContractError(f"sample_rate must be positive, got {sample_rate}")
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    times, labels = [], []
    prev_end = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 'start end label', got {raw!r}")
        try:
            start, end = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric sample index in {raw!r}") from None
        if start < 0 or end <= start:
            raise DataError(f"{path}:{lineno}: bad segment [{start}, {end})")
        if prev_end is not None and start != prev_end:
            raise DataError(
                f"{path}:{lineno}: segment starts at {start} but previous ended at {prev_end}"
            )
        times.append(start / sample_rate)
        labels.append(parts[2])
        prev_end = end
    if not times:
        raise DataError(f"{path}: no label lines found")
    return times, labels
