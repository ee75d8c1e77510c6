"""Message-passing particle dynamics: encode node/edge features to latents,
propagate messages for a fixed number of rounds with sum aggregation, decode
per-particle displacements.

One shared edge-update and node-update network is applied at every round.
Displacements are regressed in units of ``displacement_scale`` so the decoder
operates near unit range. The full forward/backward pair is hand-written
reverse-mode; gradients flow into every MLP and the class embedding table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import GraphConfig, ModelConfig
from .graph import (
    SceneGraph, edge_feature_dim, node_feature_dim, segment_sum,
)
from .nn import Mlp, ParamStore, ShapeMismatch


@dataclass
class DynamicsModel:
    """Weights plus configuration for the particle dynamics network."""

    model_cfg: ModelConfig
    graph_cfg: GraphConfig
    store: ParamStore = field(default_factory=ParamStore)
    dtype: type = np.float32

    def __post_init__(self) -> None:
        self.node_dim = node_feature_dim(
            self.graph_cfg.history, self.graph_cfg.embed_dim,
            self.model_cfg.include_z)
        self.edge_dim = edge_feature_dim(
            self.graph_cfg.history, self.graph_cfg.embed_dim)

    def _mlp_dims(self) -> list[tuple[str, list[int]]]:
        h = self.model_cfg.hidden
        lat = self.model_cfg.latent
        return [("node_enc", [self.node_dim, h, h, lat]),
                ("edge_enc", [self.edge_dim, h, h, lat]),
                ("edge_prop", [3 * lat, h, h, lat]),
                ("node_prop", [2 * lat, h, h, lat]),
                ("decoder", [lat, h, h, 3])]

    def init_weights(self, rng: np.random.Generator) -> None:
        for name, dims in self._mlp_dims():
            scale = 0.1 if name == "decoder" else 1.0
            setattr(self, name, Mlp(self.store, name, dims, rng, self.dtype,
                                    out_scale=scale))
        self.store.add("class_embed",
                       (0.5 * rng.normal(size=(2, self.graph_cfg.embed_dim))
                        ).astype(self.dtype))

    def bind(self) -> None:
        """Re-attach Mlp views after raw weights were loaded into the store."""
        rng = np.random.default_rng(0)
        for name, dims in self._mlp_dims():
            view = Mlp(ParamStore(), name, dims, rng, self.dtype)
            view.store = self.store
            if f"{name}.w0" not in self.store:
                raise KeyError(f"checkpoint is missing parameters for {name!r}")
            setattr(self, name, view)

    @property
    def embed(self) -> np.ndarray:
        return self.store["class_embed"].value

    # -- forward -----------------------------------------------------------

    def forward_cached(self, graph: SceneGraph):
        """Returns (normalized displacement (N, 3), cache)."""
        nf = np.ascontiguousarray(graph.node_features, dtype=self.dtype)
        ef = np.ascontiguousarray(graph.edge_features, dtype=self.dtype)
        if nf.shape[1] != self.node_dim or ef.shape[1] != self.edge_dim:
            raise ShapeMismatch(
                f"feature dims ({nf.shape[1]}, {ef.shape[1]}) do not match "
                f"model ({self.node_dim}, {self.edge_dim})")
        cache: dict = {"graph": graph}
        zv, cache["enc_v"] = self.node_enc.forward_cached(nf)
        ze, cache["enc_e"] = self.edge_enc.forward_cached(ef)
        rounds = []
        for _ in range(self.model_cfg.rounds):
            e_in = np.concatenate([ze, zv[graph.src], zv[graph.dst]], axis=1)
            ze_new, cache_e = self.edge_prop.forward_cached(e_in)
            agg = segment_sum(ze_new, graph.dst_unique, graph.dst_starts,
                              graph.n_nodes)
            v_in = np.concatenate([zv, agg], axis=1)
            zv_new, cache_v = self.node_prop.forward_cached(v_in)
            rounds.append({"cache_e": cache_e, "cache_v": cache_v})
            zv, ze = zv_new, ze_new
        out, cache["dec"] = self.decoder.forward_cached(zv)
        cache["rounds"] = rounds
        return out, cache

    def forward(self, graph: SceneGraph) -> np.ndarray:
        """Per-particle displacement in meters."""
        out, _ = self.forward_cached(graph)
        return out.astype(np.float64) * self.model_cfg.displacement_scale

    # -- backward ----------------------------------------------------------

    def backward(self, cache, d_out: np.ndarray):
        """Accumulate parameter grads; returns (d_node_features, d_edge_features).

        ``d_out`` is the gradient of the loss w.r.t. the normalized decoder
        output. Also accumulates the class-embedding gradient through both
        feature tables.
        """
        graph: SceneGraph = cache["graph"]
        lat = self.model_cfg.latent
        dzv = self.decoder.backward(cache["dec"], d_out.astype(self.dtype))
        dze = np.zeros((graph.n_edges, lat), dtype=self.dtype)
        for rnd in reversed(cache["rounds"]):
            dv_in = self.node_prop.backward(rnd["cache_v"], dzv)
            dzv_prev = dv_in[:, :lat].copy()
            dagg = dv_in[:, lat:]
            dze_new = dze + dagg[graph.dst]
            de_in = self.edge_prop.backward(rnd["cache_e"], dze_new)
            dze = de_in[:, :lat].copy()
            # scatter edge-input gradients back to src/dst node latents
            src_sorted = de_in[:, lat:2 * lat][graph.src_perm]
            dzv_prev += segment_sum(src_sorted, graph.src_unique,
                                    graph.src_starts, graph.n_nodes)
            dzv_prev += segment_sum(de_in[:, 2 * lat:], graph.dst_unique,
                                    graph.dst_starts, graph.n_nodes)
            dzv = dzv_prev
        dnf = self.node_enc.backward(cache["enc_v"], dzv)
        ndef = self.edge_enc.backward(cache["enc_e"], dze)
        self._accumulate_embed_grad(graph, dnf, ndef)
        return dnf, ndef

    def _accumulate_embed_grad(self, graph: SceneGraph, dnf, ndef) -> None:
        e = self.graph_cfg.embed_dim
        h = self.graph_cfg.history
        n_off = 3 * h + 3
        e_off = 3 * (h + 1)
        grad = self.store["class_embed"].ensure_grad()
        classes = graph.classes
        for cls in (0, 1):
            node_mask = classes == cls
            grad[cls] += dnf[node_mask, n_off:n_off + e].sum(axis=0)
            src_mask = classes[graph.src] == cls
            dst_mask = classes[graph.dst] == cls
            grad[cls] += ndef[src_mask, e_off:e_off + e].sum(axis=0)
            grad[cls] += ndef[dst_mask, e_off + e:e_off + 2 * e].sum(axis=0)


def fuse_graphs(graphs: list[SceneGraph]) -> tuple[SceneGraph, list[int]]:
    """Stack disjoint graphs with offset indices into one large graph.

    One aggregation pass then serves the whole batch. Returns the fused
    graph plus per-element node counts for splitting results.
    """
    from .graph import make_scene_graph

    counts = [g.n_nodes for g in graphs]
    offsets = np.cumsum([0] + counts[:-1])
    node_features = np.concatenate([g.node_features for g in graphs], axis=0)
    edge_features = np.concatenate([g.edge_features for g in graphs], axis=0)
    src = np.concatenate([g.src + off for g, off in zip(graphs, offsets)])
    dst = np.concatenate([g.dst + off for g, off in zip(graphs, offsets)])
    classes = np.concatenate([g.classes for g in graphs])
    fused = make_scene_graph(sum(counts), node_features, src, dst,
                             edge_features, classes)
    return fused, counts


class DataEmpty(ValueError):
    """Training was requested on an empty sample set."""


def train_dynamics(samples, model: DynamicsModel, train_cfg, pairs=None,
                   log=None):
    """Minimize the MSE of predicted vs recorded next-step displacements.

    Training operates on RoI-restricted subgraphs in the tool frame, with
    random-walk input noise for rollout stability. Deterministic for a
    fixed seed. Returns the (step, loss) curve.
    """
    if pairs is None:
        pairs = samples.pairs()
    if not pairs:
        raise DataEmpty("no trainable (trajectory, step) pairs")
    rng = np.random.default_rng(train_cfg.seed)
    from .nn import optimizer_step

    names = list(model.store.keys())
    curve = []
    for step in range(train_cfg.steps):
        graphs, targets, masks = [], [], []
        for _ in range(train_cfg.batch):
            ti, t = pairs[rng.integers(len(pairs))]
            g, tgt, rows = samples.dynamics_sample(
                ti, t, model, rng=rng, noise_std=train_cfg.noise_std)
            graphs.append(g)
            targets.append(tgt)
            masks.append(rows)
        fused, counts = fuse_graphs(graphs)
        offs = np.cumsum([0] + counts[:-1])
        rows = np.concatenate([m + o for m, o in zip(masks, offs)])
        # Rare ballistic outliers (flicked particles) would dominate the
        # squared loss; clip them in normalized units.
        target_n = np.clip(np.concatenate(targets, axis=0), -10.0, 10.0)

        out, cache = model.forward_cached(fused)
        residual = out[rows].astype(np.float64) - target_n
        denom = max(1, residual.size)
        loss = float(np.sum(residual * residual)) / denom
        d_out = np.zeros_like(out, dtype=np.float64)
        d_out[rows] = 2.0 * residual / denom

        model.store.zero_grad()
        for p in model.store.values():
            p.ensure_grad()
        model.backward(cache, d_out)
        frac = step / max(1, train_cfg.steps - 1)
        lr = train_cfg.lr * (1.0 - (1.0 - train_cfg.lr_final_frac) * frac)
        optimizer_step(model.store, train_cfg.optimizer, lr,
                       train_cfg.momentum, names)
        if step % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            curve.append((step, loss))
            if log:
                log(f"dynamics step {step}: loss {loss:.5f}")
    return curve


def one_step_mse(samples, model: DynamicsModel, pairs, world_shift=None) -> float:
    """Mean squared one-step displacement error (m^2) on RoI subgraphs."""
    total = 0.0
    count = 0
    scale = model.model_cfg.displacement_scale
    for ti, t in pairs:
        g, tgt, rows = samples.dynamics_sample(ti, t, model,
                                               world_shift=world_shift)
        if rows.size == 0:
            continue
        out, _ = model.forward_cached(g)
        err = (out[rows].astype(np.float64) - tgt) * scale
        total += float(np.sum(err * err))
        count += err.size
    if count == 0:
        raise DataEmpty("no evaluable pairs")
    return total / count


def create_dynamics_model(model_cfg: ModelConfig, graph_cfg: GraphConfig,
                          seed: int = 0) -> DynamicsModel:
    model = DynamicsModel(model_cfg=model_cfg, graph_cfg=graph_cfg)
    model.init_weights(np.random.default_rng(seed))
    return model


def save_dynamics(path, model: DynamicsModel, extra_meta: dict | None = None) -> None:
    from dataclasses import asdict

    from .trajio import save_weights

    meta = {"model": asdict(model.model_cfg), "graph": asdict(model.graph_cfg)}
    meta.update(extra_meta or {})
    save_weights(path, model.store, meta)


def load_dynamics(path) -> DynamicsModel:
    from .trajio import load_weights

    arrays, meta = load_weights(path)
    model = DynamicsModel(model_cfg=ModelConfig(**meta["model"]),
                          graph_cfg=GraphConfig(**meta["graph"]))
    for name, value in arrays.items():
        model.store.add(name, value)
    model.bind()
    return model
