"""Correspondence-free point-set losses and fine-tuning.

Chamfer distance (symmetric mean squared nearest-neighbor distance) and
Earth Mover's Distance (mean cost of an optimal perfect matching) compare
predicted and observed particle clouds when per-particle tracking is
unavailable. EMD is exact (Hungarian) up to a size threshold and switches
to an epsilon-scaling auction above it; the auction's mean-distance gap is
bounded by its final epsilon.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

EXACT_EMD_LIMIT = 256
AUCTION_EPS_FINAL = 1e-5   # meters; documented suboptimality per point


class Empty(ValueError):
    """A point-set metric received an empty cloud."""


class SizeMismatch(ValueError):
    """EMD requires equally-sized clouds; resample beforehand."""


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance in m^2.

    Mean over ``a`` of the squared distance to its nearest neighbor in
    ``b``, plus the mirrored term.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise Empty("chamfer needs nonempty clouds")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


def chamfer_grad(pred: np.ndarray, obs: np.ndarray):
    """Chamfer value plus its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape[0] == 0 or obs.shape[0] == 0:
        raise Empty("chamfer needs nonempty clouds")
    d_po, nn_po = cKDTree(obs).query(pred)
    d_op, nn_op = cKDTree(pred).query(obs)
    value = float(np.mean(d_po ** 2) + np.mean(d_op ** 2))
    grad = 2.0 * (pred - obs[nn_po]) / pred.shape[0]
    back = -2.0 * (obs - pred[nn_op]) / obs.shape[0]
    np.add.at(grad, nn_op, back)
    return value, grad


def _auction_assign(cost: np.ndarray, eps_final: float) -> np.ndarray:
    """Forward auction with epsilon scaling; returns column per row.

    The resulting matching's total cost is within n * eps_final of optimal.
    """
    n = cost.shape[0]
    value = -cost
    prices = np.zeros(n)
    owner = np.full(n, -1, dtype=np.int64)       # object -> person
    assigned = np.full(n, -1, dtype=np.int64)    # person -> object
    eps = max(float(value.max() - value.min()), eps_final) / 4.0
    while True:
        owner.fill(-1)
        assigned.fill(-1)
        while (assigned < 0).any():
            people = np.nonzero(assigned < 0)[0]
            net = value[people] - prices[None, :]
            best2 = np.argpartition(-net, 1, axis=1)[:, :2]
            v2 = np.take_along_axis(net, best2, axis=1)
            swap = v2[:, 0] < v2[:, 1]
            best2[swap] = best2[swap][:, ::-1]
            v2[swap] = v2[swap][:, ::-1]
            bids = prices[best2[:, 0]] + (v2[:, 0] - v2[:, 1]) + eps
            # Highest bid per object wins this round.
            order = np.lexsort((bids, best2[:, 0]))
            objs = best2[:, 0][order]
            last = np.searchsorted(objs, np.unique(objs), side="right") - 1
            for k in last:
                person = people[order[k]]
                obj = objs[k]
                prev = owner[obj]
                if prev >= 0:
                    assigned[prev] = -1
                owner[obj] = person
                assigned[person] = obj
                prices[obj] = bids[order[k]]
        if eps <= eps_final:
            return assigned
        # Halve-and-repeat with prices carried over (epsilon scaling).
        eps = max(eps / 4.0, eps_final)


def emd(a: np.ndarray, b: np.ndarray,
        exact_limit: int = EXACT_EMD_LIMIT) -> float:
    """Earth Mover's Distance: mean distance of the min-cost perfect matching.

    Exact (Hungarian) for clouds up to ``exact_limit`` points; larger clouds
    use the auction approximation with a documented gap of at most
    AUCTION_EPS_FINAL per point.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise Empty("emd needs nonempty clouds")
    if a.shape[0] != b.shape[0]:
        raise SizeMismatch(f"emd sizes differ: {a.shape[0]} vs {b.shape[0]}")
    cols = emd_matching(a, b, exact_limit)
    return float(np.mean(np.linalg.norm(a - b[cols], axis=1)))


def emd_matching(a: np.ndarray, b: np.ndarray,
                 exact_limit: int = EXACT_EMD_LIMIT) -> np.ndarray:
    """The matching behind :func:`emd`: column index per row of ``a``."""
    dist = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    if a.shape[0] <= exact_limit:
        rows, cols = linear_sum_assignment(dist)
        out = np.empty(a.shape[0], dtype=np.int64)
        out[rows] = cols
        return out
    return _auction_assign(dist, AUCTION_EPS_FINAL)


def emd_grad(pred: np.ndarray, obs: np.ndarray):
    """EMD value and gradient w.r.t. ``pred`` holding the matching fixed."""
    cols = emd_matching(pred, obs)
    diff = pred - obs[cols]
    dist = np.linalg.norm(diff, axis=1)
    value = float(np.mean(dist))
    grad = diff / (np.maximum(dist, 1e-12)[:, None] * pred.shape[0])
    return value, grad


# ---------------------------------------------------------------------------
# Correspondence-free fine-tuning
# ---------------------------------------------------------------------------

def finetune_correspondence_free(samples, models, train_cfg,
                                 chamfer_weight: float = 1.0,
                                 emd_weight: float = 1.0,
                                 emd_points: int = 128,
                                 proposer_kind: str = "learned",
                                 log=None):
    """Fine-tune the dynamics weights on untracked point-cloud pairs.

    ``samples`` yields (scene, observed_next_cloud) pairs via
    ``samples(rng) -> (SimScene, (M, 3) array, ControlInput)``. The loss is
    a weighted Chamfer + EMD between the one-step prediction and the
    observation; the EMD matching is held fixed within each step. Only
    dynamics parameters change; the proposer is never touched.
    """
    from .dataset import build_model_graph
    from .localized import _local_sample, _select_indices, parse_proposer
    from .nn import optimizer_step
    from .terrain import farthest_point_sample

    model = models.dynamics
    rng = np.random.default_rng(train_cfg.seed)
    names = list(model.store.keys())
    mode, diameter = parse_proposer(proposer_kind)
    curve = []
    for step_i in range(train_cfg.steps):
        scene, observed, u = samples(rng)
        s = _local_sample(scene, u)
        surface = None
        if mode == "learned":
            stack = models.proposer.input_stack(
                s.local_frames[:, :s.n_terrain])
            surface = models.proposer.forward(
                stack[None], s.ctrl_vec[None])[0].astype(np.float64)
        idx = _select_indices(mode, diameter, s, models, surface)
        graph, sub = build_model_graph(s, idx, model, models.graph_cfg)
        out, cache = model.forward_cached(graph)
        scale = model.model_cfg.displacement_scale
        delta_local = out[:idx.size].astype(np.float64) * scale

        nt = scene.state.n_terrain
        pred = scene.state.positions[:nt].copy()
        pred[idx] += s.frame.rotate_to_world(delta_local)

        c_val, c_grad = chamfer_grad(pred, observed)
        k = min(emd_points, pred.shape[0], observed.shape[0])
        pi = farthest_point_sample(pred, k)
        oi = farthest_point_sample(observed, k)
        e_val, e_grad_sub = emd_grad(pred[pi], observed[oi])
        loss = chamfer_weight * c_val + emd_weight * e_val

        dpred = chamfer_weight * c_grad
        np.add.at(dpred, pi, emd_weight * e_grad_sub)
        d_out = np.zeros_like(out, dtype=np.float64)
        d_out[:idx.size] = s.frame.rotate_to_local(dpred[idx]) * scale

        model.store.zero_grad()
        for p in model.store.values():
            p.ensure_grad()
        model.backward(cache, d_out)
        frac = step_i / max(1, train_cfg.steps - 1)
        lr = train_cfg.lr * (1.0 - (1.0 - train_cfg.lr_final_frac) * frac)
        optimizer_step(model.store, train_cfg.optimizer, lr,
                       train_cfg.momentum, names)
        if step_i % train_cfg.log_every == 0 or step_i == train_cfg.steps - 1:
            curve.append((step_i, loss))
            if log:
                log(f"finetune step {step_i}: chamfer {c_val:.6f} emd {e_val:.6f}")
    return curve
