"""
Audits of the invariance and equivariance properties, brute-force oracles and
finite-difference gradient checks.

Each audit samples inputs and rotations, compares transformed and reference
outputs and condenses the trials into an ``AuditReport``.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .autodiff import Parameter, ParameterStore, Tape, Tensor, backward
from .conv import (
    AlignedConvParams,
    generate_kernel_points,
    kpconv_standard,
    multi_align_conv,
    multi_align_kpconv,
)
from .data import SHAPE_CLASSES, preprocess, synth_shape
from .geometry import (
    PointCloud,
    grid_subsample_equivariant,
    knn,
    radius_neighbors,
    sample_uniform_rotation,
)
from .layers import (
    BlockInputs,
    LRFUpdate,
    ResidualBlock,
    ResidualBlockSpec,
    lrf_update,
    max_pool_radius,
    nearest_upsample,
)
from .lrf import jacobi_eigh, multi_scale_lrf_init, pool_lrf_nearest
from .network import ArchitectureSpec, Model, build, build_pyramid, forward, total_loss

logger = logging.getLogger(__name__)

CONV_TOLERANCE = 1e-10
EQUIVARIANCE_TOLERANCE = 1e-9
NETWORK_TOLERANCE = 1e-8
ORACLE_TOLERANCE = 1e-12
GRADIENT_TOLERANCE = 1e-5
ABSOLUTE_GRADIENT_FLOOR = 1e-8
# Central differences of a loss L carry about ulp(L) / eps of rounding noise
ROUNDOFF_ULPS = 256
NEGATIVE_CONTROL_MARGIN = 1e-3

Output = Union[np.ndarray, Tuple[np.ndarray, ...]]


@dataclass
class AuditReport:
    """Condensed result of one audit.

    Negative controls are expected to fail: they are ``ok`` when their
    deviation clears ``NEGATIVE_CONTROL_MARGIN``.
    """

    check: str
    trials: int
    max_deviation: float
    tolerance: float
    passed: bool
    degenerate_count: int = 0
    excluded: int = 0
    negative_control: bool = False
    note: str = ""

    @property
    def ok(self) -> bool:
        if self.trials == 0:
            return False
        if self.negative_control:
            return self.max_deviation > NEGATIVE_CONTROL_MARGIN
        return self.passed

    def to_line(self) -> str:
        status = "OK" if self.ok else "FAIL"
        expected = "fail" if self.negative_control else "pass"
        line = (
            f"{status:4s} {self.check}: trials={self.trials} "
            f"max_dev={self.max_deviation:.3e} tol={self.tolerance:.1e} "
            f"expected={expected} degenerate={self.degenerate_count} "
            f"excluded={self.excluded}"
        )
        return f"{line} ({self.note})" if self.note else line


def reports_to_frame(reports: Sequence[AuditReport]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "check": [r.check for r in reports],
            "trials": [r.trials for r in reports],
            "max_dev": [r.max_deviation for r in reports],
            "tol": [r.tolerance for r in reports],
            "pass": [r.passed for r in reports],
            "expected": ["fail" if r.negative_control else "pass" for r in reports],
            "ok": [r.ok for r in reports],
            "degenerate": [r.degenerate_count for r in reports],
            "excluded": [r.excluded for r in reports],
        }
    )


def write_reports(reports: Sequence[AuditReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    reports_to_frame(reports).to_csv(path, index=False, float_format="%.10g")
    return path


@dataclass
class AuditInput:
    """Geometry handed to audited functions.

    ``frames`` are (N, J, 3, 3) stacks that rotate with the points; ``extras``
    holds rotation-invariant payload such as weights or features.
    """

    points: np.ndarray
    features: Optional[np.ndarray] = None
    frames: Optional[np.ndarray] = None
    queries: Optional[np.ndarray] = None
    degenerate: int = 0
    extras: Dict[str, Any] = field(default_factory=dict)

    def rotated(self, rotation: np.ndarray) -> "AuditInput":
        return replace(
            self,
            points=self.points @ rotation.T,
            frames=None if self.frames is None else np.matmul(rotation, self.frames),
            queries=None if self.queries is None else self.queries @ rotation.T,
        )


def relative_deviation(value: Output, reference: Output) -> float:
    """``max|value - reference| / (1 + max|reference|)``, maximized over tuple parts."""
    if isinstance(reference, tuple):
        return max(relative_deviation(v, r) for v, r in zip(value, reference))
    value, reference = np.asarray(value, float), np.asarray(reference, float)
    if value.shape != reference.shape:
        return float("inf")
    if reference.size == 0:
        return 0.0
    return float(np.max(np.abs(value - reference)) / (1.0 + np.max(np.abs(reference))))


def matched_deviation(value: np.ndarray, reference: np.ndarray) -> float:
    """Deviation between point multisets, matching each point to its nearest partner."""
    if value.shape != reference.shape:
        return float("inf")
    nearest = knn(reference, value, 1).indices
    return relative_deviation(value, reference[nearest])


def rotate_output(rotation: np.ndarray, output: Output) -> Output:
    """Default action on outputs: frames rotate by ``R @ F``, points by ``x @ Rᵀ``."""
    if isinstance(output, tuple):
        return tuple(rotate_output(rotation, part) for part in output)
    output = np.asarray(output, dtype=np.float64)
    if output.ndim >= 2 and output.shape[-2:] == (3, 3):
        return np.matmul(rotation, output)
    if output.shape[-1:] == (3,):
        return output @ rotation.T
    return output


def _run_trials(
    name: str,
    trial: Callable[[np.random.Generator], Tuple[float, int, bool]],
    trials: int,
    seed: int,
    parallelism: int,
) -> Tuple[float, int, int, int]:
    children = np.random.SeedSequence(seed).spawn(trials)
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        jobs = pool.map(lambda s: trial(np.random.default_rng(s)), children)
        results = list(tqdm(jobs, total=trials, desc=name, leave=False,
                            disable=not logger.isEnabledFor(logging.INFO)))
    used = [r for r in results if not r[2]]
    worst = max((r[0] for r in used), default=0.0)
    degenerate = sum(r[1] for r in results)
    logger.debug(f"{name}: {len(used)} of {trials} trials used, max deviation {worst:.3e}")
    return worst, len(used), len(results) - len(used), degenerate


def audit_invariance(
    fn: Callable[[AuditInput], Output],
    generator: Callable[[np.random.Generator], AuditInput],
    rotations: int = 32,
    tol: float = CONV_TOLERANCE,
    trials: int = 20,
    seed: int = 0,
    name: str = "invariance",
    transform: Optional[Callable[[AuditInput, np.ndarray], AuditInput]] = None,
    negative_control: bool = False,
    parallelism: int = 1,
) -> AuditReport:
    """Check ``fn(R·input) == fn(input)`` over sampled inputs and rotations.

    Inputs flagged degenerate are excluded and counted. ``transform`` replaces
    the whole-input rotation, e.g. to rotate one neighborhood only.
    """
    transform = transform or (lambda inp, rotation: inp.rotated(rotation))

    def trial(rng: np.random.Generator):
        inp = generator(rng)
        if inp.degenerate:
            return 0.0, inp.degenerate, True
        reference = fn(inp)
        worst = 0.0
        for _ in range(rotations):
            rotation = sample_uniform_rotation(rng)
            worst = max(worst, relative_deviation(fn(transform(inp, rotation)), reference))
        return worst, 0, False

    worst, used, excluded, degenerate = _run_trials(name, trial, trials, seed, parallelism)
    return AuditReport(
        name, used, worst, tol, used > 0 and worst <= tol, degenerate, excluded,
        negative_control,
    )


def audit_equivariance(
    fn: Callable[[AuditInput], Output],
    generator: Callable[[np.random.Generator], AuditInput],
    rotations: int = 32,
    tol: float = EQUIVARIANCE_TOLERANCE,
    trials: int = 20,
    seed: int = 0,
    name: str = "equivariance",
    act: Callable[[np.ndarray, Output], Output] = rotate_output,
    distance: Callable[[Output, Output], float] = relative_deviation,
    parallelism: int = 1,
) -> AuditReport:
    """Check ``fn(R·input) == act(R, fn(input))`` over sampled inputs and rotations."""

    def trial(rng: np.random.Generator):
        inp = generator(rng)
        if inp.degenerate:
            return 0.0, inp.degenerate, True
        reference = fn(inp)
        worst = 0.0
        for _ in range(rotations):
            rotation = sample_uniform_rotation(rng)
            expected = act(rotation, reference)
            worst = max(worst, distance(fn(inp.rotated(rotation)), expected))
        return worst, 0, False

    worst, used, excluded, degenerate = _run_trials(name, trial, trials, seed, parallelism)
    return AuditReport(name, used, worst, tol, used > 0 and worst <= tol, degenerate, excluded)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def gradient_noise_floor(loss: float, eps: float) -> float:
    """Smallest gradient a central difference of step ``eps`` can resolve."""
    roundoff = ROUNDOFF_ULPS * np.finfo(float).eps * max(abs(loss), 1.0) / eps
    return max(ABSOLUTE_GRADIENT_FLOOR, roundoff)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-6,
    tol: float = GRADIENT_TOLERANCE,
    name: str = "gradients",
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> AuditReport:
    """Compare central differences with backward gradients, per parameter.

    ``loss_fn`` must rebuild the loss from the current parameter values. The
    per-parameter error is ``|fd - g| / max(|fd|, |g|)`` in the L2 norm, or
    the absolute difference when both norms are below the noise floor: 1e-8,
    raised to ``ROUNDOFF_ULPS * machine_eps * max(|L|, 1) / eps`` when the rounding
    noise of the loss itself is larger. Entries sitting on a kink (one-sided
    slopes disagree by more than the central-difference error) are excluded
    and counted.
    """
    if not 1e-7 <= eps <= 1e-5:
        raise ValueError(f"eps must lie in [1e-7, 1e-5], got {eps}")
    with Tape() as tape:
        loss = loss_fn()
    analytic = backward(tape, loss, params)
    base = loss.item()
    rng = np.random.default_rng(seed)
    floor = gradient_noise_floor(base, eps)

    worst, excluded, failing = 0.0, 0, []
    for param in params:
        flat = param.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(entries))
        keep = np.ones(len(entries), dtype=bool)
        grad = analytic[param.name].reshape(-1)[entries]
        for slot, entry in enumerate(entries):
            original = flat[entry]
            flat[entry] = original + eps
            plus = loss_fn().item()
            flat[entry] = original - eps
            minus = loss_fn().item()
            flat[entry] = original
            numeric[slot] = (plus - minus) / (2 * eps)
            error = abs(numeric[slot] - grad[slot])
            scale = max(abs(numeric[slot]), abs(grad[slot]))
            if error > max(tol * scale, floor):
                slopes = abs((plus - base) / eps - (base - minus) / eps)
                if slopes >= error:
                    keep[slot] = False
        excluded += int((~keep).sum())
        difference = np.linalg.norm(numeric[keep] - grad[keep])
        scale = max(np.linalg.norm(numeric[keep]), np.linalg.norm(grad[keep]))
        param_floor = floor * np.sqrt(max(int(keep.sum()), 1))
        deviation = difference if scale < param_floor else difference / scale
        passed = deviation <= (param_floor if scale < param_floor else tol)
        if not passed:
            failing.append(param.name)
        worst = max(worst, deviation if scale >= param_floor else 0.0)

    note = f"failing: {', '.join(failing)}" if failing else ""
    if excluded:
        logger.info(f"{name}: {excluded} entries excluded at kinks")
    return AuditReport(name, len(params), worst, tol, not failing, 0, excluded, note=note)


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------


def _brute_radius(points: np.ndarray, query: np.ndarray, r: float) -> List[int]:
    found = []
    for i, p in enumerate(points):
        d = p - query
        if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r * r:
            found.append(i)
    return found


def _brute_knn(points: np.ndarray, query: np.ndarray, k: int) -> List[int]:
    d = points - query
    dist2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    order = sorted(range(len(points)), key=lambda i: (dist2[i], i))
    return order[:k]


def _double_loop_conv(query, points, features, disposition, weights, neighbors) -> np.ndarray:
    out = np.zeros(weights.shape[2])
    for i in neighbors:
        offset = points[i] - query
        for k, kernel_point in enumerate(disposition.points):
            h = max(0.0, 1.0 - np.linalg.norm(offset - kernel_point) / disposition.sigma)
            out += h * (features[i] @ weights[k])
    return out


def brute_force_oracles(
    seed: int = 0,
    instances: int = 100,
    max_points: int = 500,
    conv_configs: int = 20,
) -> AuditReport:
    """Neighbor search, standard convolution and eigensolver against naive oracles.

    Index sets must match exactly (a mismatch counts as deviation 1); numeric
    comparisons use the relative deviation.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, max_points + 1))
        points = rng.uniform(-1, 1, size=(n, 3))
        queries = np.vstack([points[: min(n, 5)], rng.uniform(-1.5, 1.5, size=(5, 3))])
        r = float(rng.uniform(0.05, 0.6))
        k = int(rng.integers(1, min(n, 32) + 1))
        index = radius_neighbors(points, queries, r)
        nearest = knn(points, queries, k)
        for q, query in enumerate(queries):
            if index[q].tolist() != _brute_radius(points, query, r):
                worst = 1.0
            if nearest[q].tolist() != _brute_knn(points, query, k):
                worst = 1.0

    for config in range(conv_configs):
        n = int(rng.integers(5, 60))
        d, d_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        points = rng.uniform(-1, 1, size=(n, 3))
        features = rng.uniform(-1, 1, size=(n, d))
        disposition = generate_kernel_points(15, float(rng.uniform(0.4, 1.0)), seed=config % 3,
                                             use_cache=False, iterations=500)
        weights = rng.normal(0, 0.1, size=(15, d, d_out))
        for query in (points[0], np.array([10.0, 10.0, 10.0])):
            neighbors = radius_neighbors(points, query[None], disposition.radius)[0]
            fast = kpconv_standard(query, points, features, disposition, weights, neighbors)
            slow = _double_loop_conv(query, points, features, disposition, weights, neighbors)
            worst = max(worst, relative_deviation(fast, slow))

    matrices = rng.normal(size=(instances, 3, 3))
    matrices = matrices @ matrices.transpose(0, 2, 1)
    values, vectors = jacobi_eigh(matrices)
    reference = np.linalg.eigvalsh(matrices)[:, ::-1]
    worst = max(worst, relative_deviation(values, reference))
    reconstructed = vectors @ (values[:, :, None] * vectors.transpose(0, 2, 1))
    worst = max(worst, relative_deviation(reconstructed, matrices))
    orthogonality = vectors.transpose(0, 2, 1) @ vectors - np.eye(3)
    worst = max(worst, float(np.max(np.abs(orthogonality))))

    return AuditReport("oracles", instances + conv_configs, worst, ORACLE_TOLERANCE,
                       worst <= ORACLE_TOLERANCE)


# ---------------------------------------------------------------------------
# Input generators
# ---------------------------------------------------------------------------


def random_cloud(rng: np.random.Generator, n: int = 64) -> np.ndarray:
    """Anisotropic Gaussian cloud; distinct spreads keep PCA well defined."""
    return rng.normal(size=(n, 3)) * np.array([0.6, 0.4, 0.25])


def _lrf_input(rng: np.random.Generator, scales=(8, 16), n: int = 64) -> AuditInput:
    points = random_cloud(rng, n)
    lrfs = multi_scale_lrf_init(points, list(scales))
    return AuditInput(points, rng.normal(size=(n, 3)), lrfs.frames,
                      degenerate=lrfs.degenerate_count + (not lrfs.equivariant))


def _conv_input(rng: np.random.Generator, merge_lrf: bool = True) -> AuditInput:
    inp = _lrf_input(rng)
    store = ParameterStore(rng)
    inp.extras["params"] = AlignedConvParams(store, "audit.conv", 2, 3, 4, kernel_size=15,
                                             merge_lrf=merge_lrf)
    inp.extras["disposition"] = generate_kernel_points(15, 0.5, use_cache=False, iterations=500)
    inp.extras["weights"] = rng.normal(size=(15, 3, 4))
    return inp


def _conv_output(inp: AuditInput) -> np.ndarray:
    """Multi-aligned convolution at every point, with frames recomputed from the geometry."""
    frames = multi_scale_lrf_init(inp.points, [8, 16]).frames
    disposition = inp.extras["disposition"]
    neighbors = radius_neighbors(inp.points, inp.points, disposition.radius, 40)
    n = len(inp.points)
    out = multi_align_conv(
        inp.points, Tensor(frames.reshape(n, -1)), inp.points, Tensor(inp.features),
        Tensor(frames.reshape(n, -1)), neighbors, inp.extras["params"], disposition,
    )
    return out.data


def _standard_output(inp: AuditInput) -> np.ndarray:
    disposition = inp.extras["disposition"]
    neighbors = radius_neighbors(inp.points, inp.points, disposition.radius)
    return np.stack([
        kpconv_standard(q, inp.points, inp.features, disposition, inp.extras["weights"],
                        neighbors[i])
        for i, q in enumerate(inp.points)
    ])


def _local_input(rng: np.random.Generator, identity: bool = False) -> AuditInput:
    points = random_cloud(rng, 96)
    frames = np.stack([[sample_uniform_rotation(rng) for _ in range(2)] for _ in points])
    if identity:
        frames = np.broadcast_to(np.eye(3), frames.shape).copy()
    inp = _conv_input(rng)
    return AuditInput(points, rng.normal(size=(96, 3)), frames, extras=inp.extras)


def _rotate_neighborhood(inp: AuditInput, rotation: np.ndarray, identity: bool) -> AuditInput:
    """Rotate only the query's radius neighborhood (points and frames) about the query."""
    center = inp.points[0]
    members = radius_neighbors(inp.points, center[None], inp.extras["disposition"].radius)[0]
    points, frames = inp.points.copy(), inp.frames.copy()
    points[members] = center + (points[members] - center) @ rotation.T
    if not identity:
        frames[members] = np.matmul(rotation, frames[members])
    return replace(inp, points=points, frames=frames)


def _local_output(inp: AuditInput) -> np.ndarray:
    return multi_align_kpconv(
        inp.points[0], inp.frames[0], inp.points, inp.features, inp.frames,
        inp.extras["params"], inp.extras["disposition"],
    )


def _update_input(rng: np.random.Generator) -> AuditInput:
    inp = _lrf_input(rng)
    inp.extras["update"] = LRFUpdate(ParameterStore(rng), "audit.lrf_update", 3, 2)
    inp.extras["update"].output.weight.data = rng.normal(0, 0.3, size=(3, 18))
    return inp


def _update_output(inp: AuditInput) -> Tuple[np.ndarray, np.ndarray]:
    frames = multi_scale_lrf_init(inp.points, [8, 16]).frames
    n = len(inp.points)
    result = lrf_update(Tensor(inp.features), Tensor(frames.reshape(n, 18)),
                        inp.extras["update"], 0.5)
    return result.frames.data.reshape(n, 2, 3, 3), result.ortho_loss.data


def _block_input(rng: np.random.Generator) -> AuditInput:
    inp = _lrf_input(rng)
    spec = ResidualBlockSpec("audit.block", 3, 8, num_alignments=2, kernel_size=15)
    disposition = generate_kernel_points(15, 0.5, use_cache=False, iterations=500)
    block = ResidualBlock(ParameterStore(rng), spec, disposition)
    for state in (block.unary1.norm.state, block.conv_norm.state, block.unary2.norm.state,
                  block.shortcut.norm.state):
        state.running_mean = rng.normal(0, 0.1, size=state.running_mean.shape)
    inp.extras["block"] = block
    return inp


def _block_output(inp: AuditInput) -> Tuple[np.ndarray, np.ndarray]:
    block = inp.extras["block"]
    n = len(inp.points)
    frames = Tensor(multi_scale_lrf_init(inp.points, [8, 16]).frames.reshape(n, 18))
    neighbors = radius_neighbors(inp.points, inp.points, block.disposition.radius, 40)
    result = block(
        BlockInputs(inp.points, Tensor(inp.features), frames, inp.points, frames, neighbors),
        "eval",
    )
    return result.features.data, result.frames.data.reshape(n, 2, 3, 3)


def _block_act(rotation: np.ndarray, output):
    features, frames = output
    return features, np.matmul(rotation, frames)


def _subsample_output(inp: AuditInput) -> np.ndarray:
    return grid_subsample_equivariant(inp.points, 0.2).cloud.points


def _pool_output(inp: AuditInput) -> np.ndarray:
    result = grid_subsample_equivariant(inp.points, 0.2)
    return pool_lrf_nearest(multi_scale_lrf_init(inp.points, [8, 16]), result.carry).frames


def _max_pool_output(inp: AuditInput) -> np.ndarray:
    neighbors = radius_neighbors(inp.points, inp.points, 0.3)
    return max_pool_radius(Tensor(inp.features), neighbors).data


def _upsample_output(inp: AuditInput) -> np.ndarray:
    coarse = grid_subsample_equivariant(PointCloud(inp.points, inp.features), 0.25).cloud
    return nearest_upsample(Tensor(coarse.features), inp.points, coarse.points).data


def audit_clouds(count: int, seed: int = 0, points_per_shape: int = 512,
                 grid: float = 0.06, input_feature: str = "ones") -> List[PointCloud]:
    """Preprocessed synthetic clouds cycling through the shape classes."""
    rng = np.random.default_rng(seed)
    clouds = []
    for index in range(count):
        raw = synth_shape(index % len(SHAPE_CLASSES), points_per_shape, rng)
        clouds.append(preprocess(raw, grid, input_feature))
    return clouds


def audit_network(
    model: Model,
    clouds: Sequence[PointCloud],
    rotations: int = 32,
    tol: float = NETWORK_TOLERANCE,
    seed: int = 0,
    name: str = "network_invariance",
    rotation_mode: str = "so3",
    parallelism: int = 1,
) -> AuditReport:
    """Eval-mode logits under whole-cloud rotation, subsampling stages included."""
    clouds = list(clouds)
    children = np.random.SeedSequence(seed).spawn(len(clouds))

    def trial(job):
        cloud, child = job
        rng = np.random.default_rng(child)
        reference = forward(model, cloud, "eval")
        if not reference.equivariant:
            return 0.0, reference.degenerate_count, True
        worst = 0.0
        for _ in range(rotations):
            rotation = sample_uniform_rotation(rng, rotation_mode)
            rotated = forward(model, cloud.with_points(cloud.points @ rotation.T), "eval")
            worst = max(worst, relative_deviation(rotated.logits.data, reference.logits.data))
        return worst, reference.degenerate_count, False

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        results = list(pool.map(trial, zip(clouds, children)))
    used = [r for r in results if not r[2]]
    worst = max((r[0] for r in used), default=0.0)
    return AuditReport(
        name, len(used), worst, tol, bool(used) and worst <= tol,
        sum(r[1] for r in results), len(results) - len(used),
        note=f"variant={model.spec.variant}",
    )


def gradient_audit(seed: int = 0, max_entries: Optional[int] = None,
                   cache_dir: Optional[str] = None) -> AuditReport:
    """Finite differences on every parameter of the two-block toy network."""
    spec = ArchitectureSpec.toy()
    kwargs = {"use_cache": False} if cache_dir is None else {"cache_dir": cache_dir}
    model = build(spec, seed, **kwargs)
    clouds = audit_clouds(2, seed, points_per_shape=160, grid=spec.grid_size)
    pyramids = [build_pyramid(c, spec) for c in clouds]
    labels = np.array([0, 1])

    def loss_fn() -> Tensor:
        out = forward(model, pyramids, "train")
        return total_loss(out.logits, labels, out.ortho_loss)

    return finite_diff_check(loss_fn, model.parameters(), name="gradients",
                             max_entries=max_entries, seed=seed)


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------


@dataclass
class AuditBudget:
    rotations: int = 32
    trials: int = 20
    network_clouds: int = 16
    network_rotations: int = 32
    oracle_instances: int = 100
    gradient_entries: Optional[int] = None
    parallelism: int = 1
    seed: int = 0


def _component_checks(budget: AuditBudget) -> Dict[str, Callable[[], AuditReport]]:
    common = dict(rotations=budget.rotations, trials=budget.trials, seed=budget.seed,
                  parallelism=budget.parallelism)
    return {
        "conv_invariance": lambda: audit_invariance(
            _conv_output, _conv_input, tol=CONV_TOLERANCE, name="conv_invariance", **common
        ),
        "conv_unaligned_control": lambda: audit_invariance(
            _standard_output, _conv_input, tol=CONV_TOLERANCE, name="conv_unaligned_control",
            negative_control=True, **common
        ),
        "lrf_equivariance": lambda: audit_equivariance(
            lambda inp: multi_scale_lrf_init(inp.points, [8, 16]).frames, _lrf_input,
            name="lrf_equivariance", **common
        ),
        "lrf_update_equivariance": lambda: audit_equivariance(
            _update_output, _update_input, name="lrf_update_equivariance",
            act=lambda rotation, out: (np.matmul(rotation, out[0]), out[1]), **common
        ),
        "subsample_equivariance": lambda: audit_equivariance(
            _subsample_output, _lrf_input, name="subsample_equivariance",
            distance=matched_deviation, **common
        ),
        "lrf_pool_equivariance": lambda: audit_equivariance(
            _pool_output, _lrf_input, name="lrf_pool_equivariance", **common
        ),
        "max_pool_invariance": lambda: audit_invariance(
            _max_pool_output, _lrf_input, tol=ORACLE_TOLERANCE, name="max_pool_invariance",
            **common
        ),
        "upsample_invariance": lambda: audit_invariance(
            _upsample_output, _lrf_input, tol=EQUIVARIANCE_TOLERANCE,
            name="upsample_invariance", **common
        ),
        "block_equivariance": lambda: audit_equivariance(
            _block_output, _block_input, name="block_equivariance", act=_block_act, **common
        ),
        "local_invariance": lambda: audit_invariance(
            _local_output, _local_input, tol=CONV_TOLERANCE, name="local_invariance",
            transform=lambda inp, rotation: _rotate_neighborhood(inp, rotation, False),
            **common
        ),
        "local_identity_control": lambda: audit_invariance(
            _local_output, lambda rng: _local_input(rng, identity=True), tol=CONV_TOLERANCE,
            name="local_identity_control", negative_control=True,
            transform=lambda inp, rotation: _rotate_neighborhood(inp, rotation, True),
            **common
        ),
        "oracles": lambda: brute_force_oracles(budget.seed, budget.oracle_instances),
        "gradients": lambda: gradient_audit(budget.seed, budget.gradient_entries),
    }


def run_audit_suite(
    model: Optional[Model] = None,
    budget: Optional[AuditBudget] = None,
    clouds: Optional[Sequence[PointCloud]] = None,
    checks: Optional[Sequence[str]] = None,
) -> List[AuditReport]:
    """Run every registered audit (plus the network audit when a model is given).

    A registered check that produces no usable trial is reported as failed,
    so nothing can be skipped silently.
    """
    budget = budget or AuditBudget()
    registry = _component_checks(budget)
    if model is not None:
        if clouds is None:
            clouds = audit_clouds(budget.network_clouds, budget.seed, grid=model.spec.grid_size,
                                  input_feature="ones" if model.spec.input_dim == 1 else "height")
        registry["network_invariance"] = lambda: audit_network(
            model, clouds, budget.network_rotations, seed=budget.seed,
            parallelism=budget.parallelism,
        )
    selected = list(registry) if checks is None else list(checks)
    unknown = [name for name in selected if name not in registry]
    if unknown:
        raise ValueError(f"Unknown audit checks {unknown}. Known: {', '.join(registry)}")

    reports = []
    for name in selected:
        report = registry[name]()
        if report.trials == 0:
            report.note = "skipped: no usable trials"
        logger.info(report.to_line())
        reports.append(report)
    return reports


def suite_passed(reports: Sequence[AuditReport]) -> bool:
    return bool(reports) and all(r.ok for r in reports)
