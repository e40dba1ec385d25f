"""Few-shot keypoint detection: templates, the soft selection-matrix
optimization, argmax extraction, nearest-neighbor and FPS baselines, and
shape retrieval by class token."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import GeodesicMatrix, SamplePoints, TriangleMesh, farthest_point_sample

DEFAULT_ALPHA = 4.0
DEFAULT_BETA = 0.0
DEFAULT_STEPS = 5000
DEFAULT_LEARNING_RATE = 0.05
DEFAULT_CANDIDATES = 2048


class OptimizationError(RuntimeError):
    """Non-finite objective; carries the loss trajectory up to the failure."""

    def __init__(self, message: str, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory or []


@dataclass
class AnnotatedShape:
    """Semantic keypoint annotations snapped to mesh vertices."""

    shape_id: str
    keypoints: dict[int, tuple[int, np.ndarray]]  # semantic id -> (vertex, original xyz)

    def __post_init__(self):
        if len(set(self.keypoints)) != len(self.keypoints):
            raise ValueError("duplicate semantic ids")

    @property
    def semantic_ids(self) -> list[int]:
        return sorted(self.keypoints)

    @property
    def vertex_ids(self) -> np.ndarray:
        return np.asarray([self.keypoints[s][0] for s in self.semantic_ids], dtype=np.int64)


@dataclass
class FewShotTemplate:
    """Averaged keypoint features and relative geodesic distances over the shots."""

    semantic_ids: list[int]
    features: np.ndarray            # (k, d)
    distances: np.ndarray           # (k, k), relative units in [0, 1]
    sample_counts: np.ndarray       # (k,) shapes contributing each class
    filled_pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.distances = np.asarray(self.distances, dtype=np.float64)
        k = len(self.semantic_ids)
        if k < 1:
            raise ValueError("template needs at least one keypoint class")
        if self.features.shape[0] != k or self.distances.shape != (k, k):
            raise ValueError("template dimensions disagree")
        if not np.allclose(self.distances, self.distances.T):
            raise ValueError("template distances must be symmetric")
        if self.distances.min() < 0 or self.distances.max() > 1 + 1e-9:
            raise ValueError("template distances must lie in [0, 1]")

    @property
    def k(self) -> int:
        return len(self.semantic_ids)


@dataclass
class CandidateSet:
    """FPS candidate vertices with features and relative geodesic distances."""

    vertex_ids: np.ndarray
    features: np.ndarray            # (n, d)
    distances: np.ndarray           # (n, n) normalized
    positions: np.ndarray | None = None

    def __post_init__(self):
        self.vertex_ids = np.asarray(self.vertex_ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.distances = np.asarray(self.distances, dtype=np.float64)

    @property
    def n(self) -> int:
        return len(self.vertex_ids)


@dataclass
class OptimizerConfig:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    steps: int = DEFAULT_STEPS
    learning_rate: float = DEFAULT_LEARNING_RATE
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


class SelectionState:
    """Logits whose row-softmax is the right-stochastic selection matrix."""

    def __init__(self, logits: np.ndarray, seed: int | None = None, step: int = 0):
        self.logits = np.asarray(logits, dtype=np.float64)
        self.seed = seed
        self.step = step

    @property
    def selection(self) -> np.ndarray:
        """Row-softmax of the logits: (n, k+1), rows sum to 1."""
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    @property
    def soft_assignment(self) -> np.ndarray:
        """First k columns of the selection matrix (the 'none' column dropped)."""
        return self.selection[:, :-1]


@dataclass
class ObjectiveTerms:
    total: float
    feature: float
    distance: float
    selection_reward: float


@dataclass
class KeypointPrediction:
    """Chosen candidate per template keypoint plus collapse warnings."""

    shape_id: str
    semantic_ids: list[int | None]
    vertex_ids: np.ndarray
    positions: np.ndarray
    scores: np.ndarray
    collapses: list[tuple[int | None, int | None, int]] = field(default_factory=list)
    losses: ObjectiveTerms | None = None
    method: str = "optimize"

    def __post_init__(self):
        self.vertex_ids = np.asarray(self.vertex_ids, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)


def build_template(
    shapes: list[AnnotatedShape],
    features_by_shape: dict[str, np.ndarray],
    distances_by_shape: dict[str, GeodesicMatrix],
) -> FewShotTemplate:
    """Average features and relative distances per keypoint class over the shots.

    ``features_by_shape`` maps shape id to an (N, d) per-vertex array;
    ``distances_by_shape`` maps shape id to a normalized GeodesicMatrix over
    that shape's annotated vertices (ordered by ascending semantic id).
    Class pairs that never co-occur are filled with the mean defined entry
    and reported in ``filled_pairs``.
    """
    if not shapes:
        raise ValueError("need at least one annotated shape")
    classes = sorted({s for shape in shapes for s in shape.semantic_ids})
    k = len(classes)
    pos = {s: i for i, s in enumerate(classes)}

    dim = features_by_shape[shapes[0].shape_id].shape[1]
    feat_sum = np.zeros((k, dim))
    feat_cnt = np.zeros(k, dtype=np.int64)
    dist_sum = np.zeros((k, k))
    dist_cnt = np.zeros((k, k), dtype=np.int64)

    for shape in shapes:
        feats = features_by_shape[shape.shape_id]
        local = shape.semantic_ids
        for s in local:
            vertex = shape.keypoints[s][0]
            feat_sum[pos[s]] += feats[vertex]
            feat_cnt[pos[s]] += 1
        matrix = distances_by_shape[shape.shape_id]
        if matrix.values.shape != (len(local), len(local)):
            raise ValueError(f"distance matrix for {shape.shape_id} does not cover its annotations")
        if not matrix.normalized:
            raise ValueError("template distances must be normalized (relative units)")
        for i, si in enumerate(local):
            for j, sj in enumerate(local):
                dist_sum[pos[si], pos[sj]] += matrix.values[i, j]
                dist_cnt[pos[si], pos[sj]] += 1

    features = feat_sum / feat_cnt[:, None]
    defined = dist_cnt > 0
    distances = np.zeros((k, k))
    distances[defined] = dist_sum[defined] / dist_cnt[defined]
    filled = []
    if not defined.all():
        off = ~np.eye(k, dtype=bool)
        fill = distances[defined & off].mean() if (defined & off).any() else 0.0
        for i, j in np.argwhere(~defined):
            distances[i, j] = 0.0 if i == j else fill
            if i < j:
                filled.append((classes[i], classes[j]))
    distances = 0.5 * (distances + distances.T)
    np.fill_diagonal(distances, 0.0)
    return FewShotTemplate(
        semantic_ids=classes,
        features=features,
        distances=np.clip(distances, 0.0, 1.0),
        sample_counts=feat_cnt,
        filled_pairs=filled,
    )


def objective_and_gradient(
    state: SelectionState,
    template: FewShotTemplate,
    candidates: CandidateSet,
    config: OptimizerConfig,
) -> tuple[ObjectiveTerms, np.ndarray]:
    """Evaluate the matching objective and its analytic gradient w.r.t. logits.

    total = ||S^T F_cand - F_kp||_F + alpha ||S^T D_cand S - D_kp||_F
            - beta * sum_j (max_i S_ij - mean_i S_ij)
    with S the first k columns of the row-softmax selection matrix. The max
    term uses the standard subgradient (all mass at the argmax row, ties to
    the lowest index).
    """
    S = state.selection
    Sh = S[:, :-1]
    n, k = Sh.shape
    F = candidates.features
    D = candidates.distances

    # non-finite inputs propagate and are reported below, not warned about
    with np.errstate(invalid="ignore", over="ignore"):
        A = Sh.T @ F - template.features
        feat_norm = float(np.linalg.norm(A))
        DS = D @ Sh
        B = Sh.T @ DS - template.distances
        dist_norm = float(np.linalg.norm(B))

    argmax_rows = np.argmax(Sh, axis=0)
    reward = float((Sh[argmax_rows, np.arange(k)] - Sh.mean(axis=0)).sum())

    total = feat_norm + config.alpha * dist_norm - config.beta * reward
    if not np.isfinite(total):
        raise OptimizationError(f"non-finite objective at step {state.step}")

    grad_sh = np.zeros_like(Sh)
    if feat_norm > 0:
        grad_sh += (F @ A.T) / feat_norm
    if dist_norm > 0:
        grad_sh += config.alpha * (DS @ B.T + D.T @ Sh @ B) / dist_norm
    if config.beta != 0.0:
        grad_reward = np.full_like(Sh, -1.0 / n)
        grad_reward[argmax_rows, np.arange(k)] += 1.0
        grad_sh -= config.beta * grad_reward

    grad_S = np.concatenate([grad_sh, np.zeros((n, 1))], axis=1)
    grad_logits = S * (grad_S - (grad_S * S).sum(axis=1, keepdims=True))
    if not np.isfinite(grad_logits).all():
        raise OptimizationError(f"non-finite gradient at step {state.step}")
    terms = ObjectiveTerms(total=total, feature=feat_norm, distance=dist_norm, selection_reward=reward)
    return terms, grad_logits


def optimize(
    template: FewShotTemplate,
    candidates: CandidateSet,
    config: OptimizerConfig | None = None,
    callback=None,
) -> tuple[SelectionState, list[ObjectiveTerms]]:
    """Plain gradient descent on normally-initialized logits.

    Returns the final state and the loss trajectory (one entry per step plus
    the final evaluation). ``callback(state, step, terms)`` runs before each
    update.
    """
    config = config or OptimizerConfig()
    n, k = candidates.n, template.k
    if n <= k:
        raise ValueError("need more candidates than template keypoints")
    rng = np.random.default_rng(config.seed)
    state = SelectionState(rng.standard_normal((n, k + 1)), seed=config.seed)

    trajectory: list[ObjectiveTerms] = []
    try:
        for step in range(config.steps):
            state.step = step
            terms, grad = objective_and_gradient(state, template, candidates, config)
            trajectory.append(terms)
            if callback is not None:
                callback(state, step, terms)
            state.logits -= config.learning_rate * grad
        state.step = config.steps
        final, _ = objective_and_gradient(state, template, candidates, config)
        trajectory.append(final)
        if callback is not None:
            callback(state, config.steps, final)
    except OptimizationError as exc:
        exc.trajectory = trajectory
        raise
    return state, trajectory


def extract(
    state: SelectionState,
    template: FewShotTemplate,
    candidates: CandidateSet,
    shape_id: str = "",
    losses: ObjectiveTerms | None = None,
) -> KeypointPrediction:
    """Argmax over the soft-assignment columns; ties go to the lowest row.

    Distinct keypoints may land on one candidate; each such pair is reported
    as a collapse warning rather than being forced apart.
    """
    Sh = state.soft_assignment
    rows = np.argmax(Sh, axis=0)
    scores = Sh[rows, np.arange(template.k)]
    vertex_ids = candidates.vertex_ids[rows]
    positions = (
        candidates.positions[rows]
        if candidates.positions is not None
        else np.zeros((template.k, 3))
    )
    collapses = _collapse_warnings(template.semantic_ids, rows, vertex_ids)
    return KeypointPrediction(
        shape_id=shape_id,
        semantic_ids=list(template.semantic_ids),
        vertex_ids=vertex_ids,
        positions=positions,
        scores=scores,
        collapses=collapses,
        losses=losses,
        method="optimize",
    )


def _collapse_warnings(semantic_ids, rows, vertex_ids):
    collapses = []
    for a in range(len(rows)):
        for b in range(a + 1, len(rows)):
            if rows[a] == rows[b]:
                collapses.append((semantic_ids[a], semantic_ids[b], int(vertex_ids[a])))
    return collapses


def knn_match(template: FewShotTemplate, candidates: CandidateSet, shape_id: str = "") -> KeypointPrediction:
    """Per-keypoint nearest neighbor by cosine similarity (no distribution matching).

    Zero-norm template rows fall back to Euclidean distance. Scores map the
    winning cosine from [-1, 1] into [0, 1].
    """
    F = candidates.features
    cand_norm = np.linalg.norm(F, axis=1)
    safe = np.where(cand_norm > 0, cand_norm, 1.0)
    unit = F / safe[:, None]

    rows = np.zeros(template.k, dtype=np.int64)
    scores = np.zeros(template.k)
    for j in range(template.k):
        row = template.features[j]
        norm = np.linalg.norm(row)
        if norm > 0:
            sims = unit @ (row / norm)
            sims[cand_norm == 0] = -1.0
            rows[j] = int(np.argmax(sims))
            scores[j] = (1.0 + sims[rows[j]]) / 2.0
        else:
            dist = np.linalg.norm(F - row, axis=1)
            rows[j] = int(np.argmin(dist))
            scores[j] = 1.0 / (1.0 + dist[rows[j]])
    vertex_ids = candidates.vertex_ids[rows]
    positions = candidates.positions[rows] if candidates.positions is not None else np.zeros((template.k, 3))
    return KeypointPrediction(
        shape_id=shape_id,
        semantic_ids=list(template.semantic_ids),
        vertex_ids=vertex_ids,
        positions=positions,
        scores=scores,
        collapses=_collapse_warnings(template.semantic_ids, rows, vertex_ids),
        method="knn",
    )


def fps_baseline(
    mesh: TriangleMesh,
    geodesics: GeodesicMatrix,
    shot_shapes: list[AnnotatedShape],
    shape_id: str = "",
) -> KeypointPrediction:
    """Unlabeled farthest-point-sampling baseline.

    Picks round-half-even of the mean shot keypoint count, seeding at the
    vertex with maximal mean geodesic distance to all vertices.
    """
    if not shot_shapes:
        raise ValueError("need at least one few-shot shape for the count")
    count = round(float(np.mean([len(s.keypoints) for s in shot_shapes])))
    count = max(1, min(count, mesh.n_vertices))
    sample = farthest_point_sample(mesh, count, geodesics, seed_rule="max-avg-geodesic")
    return KeypointPrediction(
        shape_id=shape_id,
        semantic_ids=[None] * count,
        vertex_ids=sample.indices,
        positions=mesh.vertices[sample.indices],
        scores=np.ones(count),
        method="fps",
    )


def retrieve_nearest_shape(labeled_tokens: list[np.ndarray], target_token: np.ndarray) -> int:
    """Index of the labeled shape whose view-averaged class token is most cosine-similar."""
    if not labeled_tokens:
        raise ValueError("no labeled class tokens available")
    target = np.asarray(target_token, dtype=np.float64).reshape(-1)
    tnorm = np.linalg.norm(target)
    best, best_sim = 0, -np.inf
    for idx, token in enumerate(labeled_tokens):
        token = np.asarray(token, dtype=np.float64).reshape(-1)
        denom = np.linalg.norm(token) * tnorm
        sim = float(token @ target / denom) if denom > 0 else -1.0
        if sim > best_sim:
            best, best_sim = idx, sim
    return best


# ---------------------------------------------------------------------------
# prediction file format (structured text)

def write_prediction(path, prediction: KeypointPrediction) -> None:
    lines = [f"shape {prediction.shape_id}", f"method {prediction.method}"]
    if prediction.losses is not None:
        t = prediction.losses
        lines.append(
            f"loss {t.total:.9g} {t.feature:.9g} {t.distance:.9g} {t.selection_reward:.9g}"
        )
    for sid, vid, pos, score in zip(
        prediction.semantic_ids, prediction.vertex_ids, prediction.positions, prediction.scores
    ):
        tag = "-" if sid is None else str(sid)
        lines.append(
            f"keypoint {tag} {vid} {pos[0]:.9g} {pos[1]:.9g} {pos[2]:.9g} {score:.9g}"
        )
    for a, b, vid in prediction.collapses:
        lines.append(f"collapse {'-' if a is None else a} {'-' if b is None else b} {vid}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_prediction(path) -> KeypointPrediction:
    shape_id = ""
    method = "optimize"
    losses = None
    semantic_ids: list[int | None] = []
    vertex_ids: list[int] = []
    positions: list[list[float]] = []
    scores: list[float] = []
    collapses: list[tuple[int | None, int | None, int]] = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "shape":
            shape_id = parts[1] if len(parts) > 1 else ""
        elif parts[0] == "method":
            method = parts[1]
        elif parts[0] == "loss":
            losses = ObjectiveTerms(*(float(v) for v in parts[1:5]))
        elif parts[0] == "keypoint":
            semantic_ids.append(None if parts[1] == "-" else int(parts[1]))
            vertex_ids.append(int(parts[2]))
            positions.append([float(v) for v in parts[3:6]])
            scores.append(float(parts[6]))
        elif parts[0] == "collapse":
            a = None if parts[1] == "-" else int(parts[1])
            b = None if parts[2] == "-" else int(parts[2])
            collapses.append((a, b, int(parts[3])))
    return KeypointPrediction(
        shape_id=shape_id,
        semantic_ids=semantic_ids,
        vertex_ids=np.asarray(vertex_ids, dtype=np.int64),
        positions=np.asarray(positions, dtype=np.float64),
        scores=np.asarray(scores, dtype=np.float64),
        collapses=collapses,
        losses=losses,
        method=method,
    )
