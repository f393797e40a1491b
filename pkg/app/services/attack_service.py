"""
Illusion-crafting attacks: white-box PGD, surrogate-ensemble transfer,
query-based square search and the hybrid warm start.
"""
import logging
import math
import time
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from app.core import grad
from app.core.exceptions import (
    InvalidConfigError,
    OracleError,
    ShapeMismatchError,
    UnsupportedModalityError,
)
from app.core.grad import Tape, Tensor
from app.schemas.attack import AttackConfig, AttackMethod, AttackResult, EnsembleMode, PerturbationBudget
from app.schemas.encoder import EncoderCheckpoint
from app.schemas.sample import MODALITY_RANGES, Modality, Sample
from app.services.encoder_service import embed_tensor, encode
from app.services.oracle_service import QueryOracle

logger = logging.getLogger(__name__)

LossFn = Callable[[Tensor, int], Tensor]
SuccessFn = Callable[[np.ndarray], bool]

WEIGHT_TOLERANCE = 1e-9
SQUARE_INIT_FRACTION = 0.3
# the square side halves each time this fraction of the query budget is passed
SQUARE_SCHEDULE = (0.001, 0.005, 0.02, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8)


# =============================================================================
# Budget
# =============================================================================

def _as_array(value) -> np.ndarray:
    return np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)


def project_and_clamp(x, delta, budget: PerturbationBudget) -> Tensor:
    """x + clip(delta, -eps, eps), clamped to the budget's value range."""
    xa, da = _as_array(x), _as_array(delta)
    if xa.shape != da.shape:
        raise ShapeMismatchError("project_and_clamp", xa.shape, da.shape)
    eps = budget.epsilon
    return Tensor(np.clip(xa + np.clip(da, -eps, eps), budget.clamp_lo, budget.clamp_hi))


def _feasible_delta(x: np.ndarray, delta: np.ndarray, budget: PerturbationBudget) -> np.ndarray:
    return project_and_clamp(x, delta, budget).numpy() - x


def check_attack_pair(x: Sample, y_t: Sample, ckpts: Sequence[EncoderCheckpoint] = ()) -> None:
    if x.modality not in MODALITY_RANGES:
        raise UnsupportedModalityError(f"{x.modality.value} inputs cannot be perturbed")
    if x.modality == y_t.modality:
        raise InvalidConfigError("source and target must be in different modalities")
    for ckpt in ckpts:
        for modality in (x.modality, y_t.modality):
            if modality not in ckpt.layers:
                raise UnsupportedModalityError(f"checkpoint has no {modality.value} encoder")


# =============================================================================
# Gradient attacks
# =============================================================================

def whitebox_loss(ckpt: EncoderCheckpoint, modality: Modality, adv: Tensor, target: Tensor) -> Tensor:
    """1 - cos(theta(x + delta), theta(y_t))."""
    return 1.0 - grad.cosine_similarity(embed_tensor(ckpt, modality, adv), target)


def run_pgd(x: Sample, budget: PerturbationBudget, cfg: AttackConfig, iterations: int,
            loss_at: LossFn) -> Tuple[np.ndarray, List[float], bool]:
    """
    Sign-gradient descent on ``loss_at(x + delta, t)`` with projection.

    Returns the flat feasible delta, the loss before every step and whether
    the success threshold stopped the run.
    """
    x_flat = x.payload.reshape(-1)
    eps = budget.epsilon
    step = cfg.resolved_step(budget)
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        delta = _feasible_delta(x_flat, rng.uniform(-eps, eps, size=x_flat.shape), budget)
    else:
        delta = np.zeros_like(x_flat)

    x_const = Tensor.constant(x_flat)
    trace: List[float] = []
    for t in range(iterations):
        d = Tensor(delta, requires_grad=True)
        with Tape():
            loss = loss_at(x_const + d, t)
            grad.backward(loss)
        value = loss.item()
        trace.append(value)
        if t % 500 == 0:
            logger.debug("pgd step %d/%d loss %.6f", t, iterations, value)
        if cfg.early_stop and cfg.success_threshold is not None and 1.0 - value > cfg.success_threshold:
            return delta, trace, True
        g = d.grad if d.grad is not None else np.zeros_like(delta)
        delta = _feasible_delta(x_flat, delta - step * np.sign(g), budget)
    return delta, trace, False


def gradient_result(method: AttackMethod, x: Sample, delta: np.ndarray, budget: PerturbationBudget,
                    cfg: AttackConfig, trace: List[float], stopped: bool, alignment_of: Callable[[Tensor], float],
                    started: float, surrogate_trace=None) -> AttackResult:
    x_flat = x.payload.reshape(-1)
    adv = np.clip(x_flat + delta, budget.clamp_lo, budget.clamp_hi)
    result = AttackResult(
        method=method,
        modality=x.modality,
        epsilon=budget.epsilon,
        seed=cfg.seed,
        delta=(adv - x_flat).reshape(x.payload.shape),
        adversarial=adv.reshape(x.payload.shape),
        final_alignment=alignment_of(Tensor.constant(adv)),
        trace=trace,
        surrogate_trace=surrogate_trace or [],
        stopped_early=stopped,
        wall_time=time.perf_counter() - started,
    )
    logger.info("%s attack done: eps=%.5f iterations=%d alignment=%.4f (%.2fs)", method.value, budget.epsilon,
                len(trace), result.final_alignment, result.wall_time)
    return result


def pgd_whitebox(x: Sample, y_t: Sample, ckpt: EncoderCheckpoint, budget: PerturbationBudget,
                 cfg: AttackConfig, method: AttackMethod = AttackMethod.WHITEBOX) -> AttackResult:
    """Minimize 1 - cos(theta(x + delta), theta(y_t)) with full gradient access."""
    check_attack_pair(x, y_t, [ckpt])
    iterations = cfg.resolved_iterations(AttackMethod.WHITEBOX)
    target = encode(ckpt, y_t)
    logger.info("%s attack: %s -> %s eps=%.5f T=%d", method.value, x.modality.value, y_t.modality.value,
                budget.epsilon, iterations)
    started = time.perf_counter()
    delta, trace, stopped = run_pgd(
        x, budget, cfg, iterations, lambda adv, t: whitebox_loss(ckpt, x.modality, adv, target))
    return gradient_result(
        method, x, delta, budget, cfg, trace, stopped,
        lambda adv: grad.cosine_value(embed_tensor(ckpt, x.modality, adv), target), started)


def _ensemble_weights(cfg: AttackConfig, count: int) -> List[float]:
    weights = cfg.ensemble_weights if cfg.ensemble_weights is not None else [1.0 / count] * count
    if len(weights) != count:
        raise InvalidConfigError(f"{len(weights)} ensemble weights for {count} surrogates")
    if abs(math.fsum(weights) - 1.0) > WEIGHT_TOLERANCE:
        raise InvalidConfigError(f"ensemble weights sum to {math.fsum(weights)}, expected 1")
    return list(weights)


def transfer_ensemble(x: Sample, y_t: Sample, surrogates: Sequence[EncoderCheckpoint], budget: PerturbationBudget,
                      cfg: AttackConfig) -> AttackResult:
    """
    PGD against an ensemble of surrogate encoders.

    ``cycle`` mode steps on one surrogate per iteration, round-robin over
    the surrogates with positive weight; ``sum`` mode steps on the weighted
    sum of all surrogate losses.
    """
    if not surrogates:
        raise InvalidConfigError("transfer needs at least one surrogate")
    weights = _ensemble_weights(cfg, len(surrogates))
    check_attack_pair(x, y_t, surrogates)
    iterations = cfg.resolved_iterations(AttackMethod.TRANSFER)
    targets = [encode(s, y_t) for s in surrogates]
    active = [i for i, w in enumerate(weights) if w > 0]
    surrogate_trace: List[Tuple[int, float]] = []

    def loss_at(adv: Tensor, t: int) -> Tensor:
        if cfg.ensemble_mode == EnsembleMode.CYCLE:
            i = active[t % len(active)]
            loss = whitebox_loss(surrogates[i], x.modality, adv, targets[i])
            surrogate_trace.append((i, loss.item()))
            return loss
        total = None
        for i in active:
            term = whitebox_loss(surrogates[i], x.modality, adv, targets[i])
            surrogate_trace.append((i, term.item()))
            term = term * weights[i]
            total = term if total is None else total + term
        return total

    def alignment_of(adv: Tensor) -> float:
        values = [grad.cosine_value(embed_tensor(surrogates[i], x.modality, adv), targets[i]) for i in active]
        return math.fsum(values) / len(values)

    logger.info("TRANSFER attack: %d surrogates (%s) eps=%.5f T=%d", len(active), cfg.ensemble_mode.value,
                budget.epsilon, iterations)
    started = time.perf_counter()
    delta, trace, stopped = run_pgd(x, budget, cfg, iterations, loss_at)
    return gradient_result(AttackMethod.TRANSFER, x, delta, budget, cfg, trace, stopped, alignment_of, started,
                            surrogate_trace)


# =============================================================================
# Query attacks
# =============================================================================

def query_objective(embedding: np.ndarray, target: np.ndarray, non_targets: Sequence[np.ndarray],
                    literal: bool = False) -> float:
    """
    -cos(e, target) + log sum exp cos(e, y) over the non-targets (lower is
    better). ``literal`` subtracts the log-sum-exp term instead.
    """
    f = grad.cosine_value(embedding, target)
    if not non_targets:
        return -f
    lse = float(logsumexp([grad.cosine_value(embedding, nt) for nt in non_targets]))
    return -f - lse if literal else -f + lse


def _query_view(x: Sample) -> Tuple[int, int, int]:
    shape = x.payload.shape
    if x.modality == Modality.IMAGE and len(shape) == 3:
        return shape
    return 1, 1, x.payload.size


def square_side(initial: int, queries: int, limit: int) -> int:
    """Side length after ``queries`` of ``limit`` queries on the halving schedule."""
    if limit <= 0:
        return initial
    halvings = sum(1 for f in SQUARE_SCHEDULE if queries > f * limit)
    return max(1, initial >> halvings)


def square_attack(x: Sample, y_t: Sample, oracle: QueryOracle, budget: PerturbationBudget, cfg: AttackConfig,
                  success_fn: Optional[SuccessFn] = None, init_delta: Optional[np.ndarray] = None) -> AttackResult:
    """
    Gradient-free randomized search over square patches set to +-eps.

    A proposal is kept only when it strictly lowers the objective. The
    target and non-target embeddings are fetched once up front and counted
    as ``setup_queries``; ``queries_used`` counts objective evaluations and
    never exceeds ``cfg.query_limit``. When ``early_stop`` is set and a
    ``success_fn`` is given, it is checked after the first evaluation and
    then every ``cfg.check_every`` queries. Oracle failures abort the run and
    return what was found so far.
    """
    check_attack_pair(x, y_t)
    limit = cfg.query_limit
    eps, lo, hi = budget.epsilon, budget.clamp_lo, budget.clamp_hi
    channels, height, width = _query_view(x)
    x_view = x.payload.reshape(channels, height, width)
    rng = np.random.default_rng(cfg.seed)

    if init_delta is not None:
        raw = np.clip(np.asarray(init_delta, dtype=np.float64).reshape(x_view.shape), -eps, eps)
    else:
        stripes = rng.choice([-eps, eps], size=(channels, 1, width))
        raw = np.broadcast_to(stripes, x_view.shape).copy()

    def adversarial_of(candidate: np.ndarray) -> np.ndarray:
        return np.clip(x_view + candidate, lo, hi)

    checking = cfg.early_stop and success_fn is not None
    initial_side = max(1, math.ceil(SQUARE_INIT_FRACTION * (min(height, width) if height > 1 else width)))
    queries = setup = accepted = 0
    trace: List[float] = []
    best_emb = None
    target = None
    stopped = aborted = False
    started = time.perf_counter()
    logger.info("QUERY attack: %s -> %s eps=%.5f N=%d non-targets=%d", x.modality.value, y_t.modality.value,
                eps, limit, len(cfg.non_targets))

    if limit > 0:
        try:
            target = oracle.encode_sample(y_t)
            setup += 1
            non_targets = []
            for nt in cfg.non_targets:
                non_targets.append(oracle.encode_sample(nt))
                setup += 1

            best_emb = oracle.encode(x.modality, adversarial_of(raw).reshape(x.payload.shape))
            queries += 1
            best = query_objective(best_emb, target, non_targets, cfg.literal_objective)
            trace.append(best)
            stopped = checking and success_fn(best_emb)

            while queries < limit and not stopped:
                side = square_side(initial_side, queries, limit)
                h, w = min(side, height), min(side, width)
                r = int(rng.integers(0, height - h + 1))
                c = int(rng.integers(0, width - w + 1))
                patch = np.broadcast_to(rng.choice([-eps, eps], size=(channels, 1, 1)), (channels, h, w))
                window = raw[:, r:r + h, c:c + w]
                if np.array_equal(patch, window):
                    patch = -patch
                proposal = raw.copy()
                proposal[:, r:r + h, c:c + w] = patch

                emb = oracle.encode(x.modality, adversarial_of(proposal).reshape(x.payload.shape))
                queries += 1
                value = query_objective(emb, target, non_targets, cfg.literal_objective)
                if value < best:
                    raw, best, best_emb = proposal, value, emb
                    accepted += 1
                    trace.append(best)
                if checking and queries % cfg.check_every == 0:
                    stopped = success_fn(best_emb)
                if queries % 10_000 == 0:
                    logger.debug("query %d/%d objective %.6f side %d", queries, limit, best, side)
        except OracleError as exc:
            aborted = True
            logger.warning("query attack aborted after %d queries: %s", queries, exc)

    # with no evaluation, only a warm start survives (and only when nothing failed)
    keep = best_emb is not None or (init_delta is not None and limit == 0)
    adv = adversarial_of(raw) if keep else x_view
    result = AttackResult(
        method=AttackMethod.QUERY,
        modality=x.modality,
        epsilon=eps,
        seed=cfg.seed,
        delta=(adv - x_view).reshape(x.payload.shape),
        adversarial=adv.reshape(x.payload.shape),
        final_alignment=None if best_emb is None else grad.cosine_value(best_emb, target),
        trace=trace,
        queries_used=queries,
        setup_queries=setup,
        accepted_moves=accepted,
        stopped_early=bool(stopped),
        aborted=aborted,
        wall_time=time.perf_counter() - started,
    )
    logger.info("QUERY attack done: queries=%d accepted=%d stopped=%s aborted=%s (%.2fs)", queries, accepted,
                result.stopped_early, aborted, result.wall_time)
    return result


def hybrid_attack(x: Sample, y_t: Sample, surrogates: Sequence[EncoderCheckpoint], oracle: QueryOracle,
                  budget: PerturbationBudget, cfg: AttackConfig,
                  success_fn: Optional[SuccessFn] = None) -> AttackResult:
    """
    Transfer from the surrogates, then warm-start the square search from
    the transferred delta. Only the query phase is counted in
    ``queries_used``.
    """
    if not surrogates:
        raise InvalidConfigError("hybrid attack needs at least one surrogate")
    transferred = transfer_ensemble(x, y_t, surrogates, budget,
                                    cfg.model_copy(update={"method": AttackMethod.TRANSFER}))
    searched = square_attack(x, y_t, oracle, budget, cfg, success_fn=success_fn, init_delta=transferred.delta)
    transfer_success = None
    if success_fn is not None and cfg.early_stop:
        transfer_success = searched.stopped_early and searched.queries_used == 1
    return searched.model_copy(update={
        "method": AttackMethod.HYBRID,
        "surrogate_trace": transferred.surrogate_trace,
        "transfer_success": transfer_success,
        "wall_time": transferred.wall_time + searched.wall_time,
    })
