"""Staged training and transductive prediction.

The full chain trains four networks in sequence: an embedding net whose
metric space defines the initial KNN graph, a first weighting net that
assigns kernel weights for label denoising, an update net whose refined
embedding space rebuilds the graph with per-node budgets recounted from
edges that survived denoising, and a second weighting net for the final
denoising pass. Ablation variants stop the chain early:

    G-2      embedding net + denoise on the unweighted graph
    G-12     + learned edge weighting before denoising
    G-1232   + graph update, second denoise on the updated unweighted graph
    G-12312  + reweighting of the updated graph before the second denoise

A trailing "s" (e.g. "G-12s") switches prediction to rank-sampled reference
batches. "DML-KNN" trains the embedding net only and predicts by
nearest-neighbor vote, the natural baseline of the ablation ladder.

Training batches draw 80 labeled train nodes and 20 unlabeled validation
nodes per graph, 16 graphs per epoch; test nodes never appear in training
and are classified by joining them to small reference graphs and running the
frozen chain with their labels set to 0.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import dataio
from .dataio import TRAIN, VAL, Dataset
from .errors import ConfigError, SamplingError, UsageError
from .glr import GlrParams, denoise
from .graphs import (Graph, LaplacianSystem, assign_weights, auto_sigma,
                     build_laplacian, graph_update, knn_edges,
                     pairwise_sq_dists, partition_edges)
from .metricnet import (AdamState, MetricNet, NetConfig, adam_step, lr_at,
                        load_checkpoint, node_attention_matrix, sample_triplets,
                        save_checkpoint, triplet_loss_E, triplet_loss_W)
from .seeds import substream, substream_seed

logger = logging.getLogger(__name__)

CHAINS = ("G-2", "G-12", "G-1232", "G-12312")
VARIANT_LADDER = ("DML-KNN", "DML-KNN-s", "G-2", "G-12", "G-12s",
                  "G-1232", "G-12312", "G-12312s")


def parse_variant(variant: str) -> tuple[str, bool]:
    """Split a variant name into (chain, rank-sampling flag)."""
    sampling = variant.endswith("s") and variant not in CHAINS + ("DML-KNN",)
    chain = variant[:-1].removesuffix("-") if sampling else variant
    if chain not in CHAINS + ("DML-KNN",):
        raise ConfigError(f"unknown variant {variant!r}; known: {VARIANT_LADDER}")
    return chain, sampling


@dataclass(frozen=True)
class ArchPreset:
    """Per-dataset widths and schedules; tuples are (lr_start, lr_end)."""

    metric_hidden: tuple
    update_hidden: tuple
    embed_lr: tuple = (0.02, 0.01)
    embed_epochs: int = 60
    weight1_lr: tuple = (0.02, 0.01)
    weight1_epochs: int = 80
    update_lr: tuple = (0.002, 0.001)
    update_epochs: int = 60
    weight2_lr: tuple = (0.01, 0.002)
    weight2_epochs: int = 40


PRESETS = {
    "phoneme": ArchPreset((256, 64), (256, 6), (0.02, 0.01), 160, (0.02, 0.01), 320,
                          (0.002, 0.001), 120, (0.01, 0.002), 60),
    "magic": ArchPreset((128, 32), (128, 4), (0.02, 0.01), 160, (0.02, 0.01), 320,
                        (0.002, 0.001), 180, (0.01, 0.002), 40),
    "spambase": ArchPreset((32, 32), (64, 6), (0.02, 0.01), 60, (0.02, 0.012), 80,
                           (0.002, 0.001), 100, (0.02, 0.01), 40),
    "default": ArchPreset((64, 32), (64, 8)),
}


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "G-12312"
    margin_e: float = 10.0
    margin_w: float = 10.0
    eps1: float = 0.6
    eps2: float = 0.15
    beta: float = 0.1
    glr: GlrParams = field(default_factory=GlrParams)
    graphs_per_epoch: int = 16
    labeled_per_graph: int = 80
    unlabeled_per_graph: int = 20
    triplets_per_graph: int = 80
    unet_neighbors: int = 6
    rank_sample_k: int = 480
    rank_sample_batches: int = 6
    rank_coverage: float = 3.0
    gamma_candidates: tuple = (2, 4, 6, 8, 10, 12, 14, 16, 18, 20)
    embedding_dim: int = 16
    arch: ArchPreset = field(default_factory=lambda: PRESETS["default"])
    # the per-dataset schedules were published for convolutional stacks; the
    # dense stacks need smaller adaptive-moment steps or they memorize label
    # noise instead of the majority structure
    lr_scale: float = 0.03
    weight_decay: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        parse_variant(self.variant)
        if self.rank_sample_k % self.rank_sample_batches != 0:
            raise ConfigError("rank_sample_k must divide into rank_sample_batches")
        if self.labeled_per_graph + self.unlabeled_per_graph != 100:
            raise ConfigError("each batch graph must hold 100 nodes (80 labeled + 20 unlabeled)")

    @classmethod
    def for_dataset(cls, dataset_id: str, **overrides) -> "PipelineConfig":
        arch = overrides.pop("arch", PRESETS.get(dataset_id, PRESETS["default"]))
        return cls(arch=arch, **overrides)

    def net_config(self, stage: str) -> NetConfig:
        arch = self.arch
        seed = substream_seed(self.seed, "net", stage)
        common = dict(seed=seed, weight_decay=self.weight_decay)

        def lrs(pair):
            return self.lr_scale * pair[0], self.lr_scale * pair[1]

        if stage == "embed":
            return NetConfig(arch.metric_hidden, self.embedding_dim,
                             *lrs(arch.embed_lr), arch.embed_epochs, **common)
        if stage == "weight1":
            return NetConfig(arch.metric_hidden, self.embedding_dim,
                             *lrs(arch.weight1_lr), arch.weight1_epochs, **common)
        if stage == "update":
            return NetConfig(arch.update_hidden, self.embedding_dim,
                             *lrs(arch.update_lr), arch.update_epochs, **common)
        if stage == "weight2":
            hidden = arch.metric_hidden
            skip = len(hidden) - 1 if len(hidden) >= 2 else (1 if hidden else None)
            return NetConfig(hidden, self.embedding_dim,
                             *lrs(arch.weight2_lr), arch.weight2_epochs,
                             skip_to_layer=skip, **common)
        raise ConfigError(f"unknown stage {stage!r}")


# ---------------------------------------------------------------------------
# attention

def node_phi(y_prev: np.ndarray, y_cur: np.ndarray, eps: float) -> np.ndarray:
    """Per-node reliability: 1 where the denoising pass moved the value <= eps."""
    return (np.abs(np.asarray(y_prev) - np.asarray(y_cur)) <= eps).astype(np.float64)


def attention(y_prev_i, y_cur_i, y_prev_j, y_cur_j, eps: float) -> int:
    """Edge attention: min of the endpoint reliability flags."""
    phi_i = 1 if abs(y_prev_i - y_cur_i) <= eps else 0
    phi_j = 1 if abs(y_prev_j - y_cur_j) <= eps else 0
    return min(phi_i, phi_j)


def edge_attention_matrix(graph: Graph, phi: np.ndarray) -> sp.csr_matrix:
    """Attention restricted to the graph's edge pattern."""
    coo = graph.edges.tocoo()
    vals = np.minimum(phi[coo.row], phi[coo.col])
    return sp.csr_matrix((vals, (coo.row, coo.col)), shape=graph.edges.shape)


# ---------------------------------------------------------------------------
# batches

@dataclass(frozen=True)
class Batch:
    ids: np.ndarray
    labeled: np.ndarray


def build_batches(ds: Dataset, cfg: PipelineConfig, seed: int) -> list[Batch]:
    """16 batch graphs of 80 train + 20 val nodes, disjoint within the epoch.

    If a split cannot cover the epoch without reuse, nodes are drawn with
    replacement (logged once per call).
    """
    rng = substream(seed, "batches")
    pools = []
    for idx, per_graph in ((ds.indices(TRAIN), cfg.labeled_per_graph),
                           (ds.indices(VAL), cfg.unlabeled_per_graph)):
        need = cfg.graphs_per_epoch * per_graph
        if idx.size >= need:
            pool = rng.choice(idx, size=need, replace=False)
        else:
            logger.info("split of %d cannot fill %d slots; sampling with replacement",
                        idx.size, need)
            pool = rng.choice(idx, size=need, replace=True)
        pools.append(pool)
    batches = []
    for k in range(cfg.graphs_per_epoch):
        tr = pools[0][k * cfg.labeled_per_graph:(k + 1) * cfg.labeled_per_graph]
        va = pools[1][k * cfg.unlabeled_per_graph:(k + 1) * cfg.unlabeled_per_graph]
        ids = np.concatenate([tr, va])
        labeled = np.zeros(ids.size, dtype=bool)
        labeled[: tr.size] = True
        batches.append(Batch(ids=ids, labeled=labeled))
    return batches


def batch_signal(ds: Dataset, batch: Batch) -> np.ndarray:
    y = ds.noisy_labels[batch.ids].copy()
    y[~batch.labeled] = 0.0
    return y


# ---------------------------------------------------------------------------
# state

@dataclass
class StageRecord:
    graph: Graph
    laplacian: LaplacianSystem
    y: np.ndarray
    embeddings: np.ndarray | None = None
    attention: sp.csr_matrix | None = None
    phi: np.ndarray | None = None


@dataclass
class PipelineState:
    config: PipelineConfig
    dataset: Dataset
    work_ids: np.ndarray
    work_pos: np.ndarray
    nets: dict = field(default_factory=dict)
    gamma0: int | None = None
    stages: dict = field(default_factory=dict)
    update_graph: Graph | None = None
    update_budgets: np.ndarray | None = None
    update_inputs: np.ndarray | None = None
    update_shallow: np.ndarray | None = None
    stage_losses: dict = field(default_factory=dict)
    trained_chain: str | None = None

    @classmethod
    def fresh(cls, ds: Dataset, cfg: PipelineConfig) -> "PipelineState":
        work_ids = np.flatnonzero(ds.split != dataio.TEST)
        work_pos = np.full(ds.n_nodes, -1, dtype=np.int64)
        work_pos[work_ids] = np.arange(work_ids.size)
        return cls(config=cfg, dataset=ds, work_ids=work_ids, work_pos=work_pos)

    def positions(self, node_ids: np.ndarray) -> np.ndarray:
        pos = self.work_pos[node_ids]
        if (pos < 0).any():
            raise UsageError("node outside the train/val working set")
        return pos

    @property
    def work_signal0(self) -> np.ndarray:
        """Initial signal: noisy train labels, 0 on validation nodes."""
        y = self.dataset.noisy_labels[self.work_ids].copy()
        y[self.dataset.split[self.work_ids] == VAL] = 0.0
        return y


# ---------------------------------------------------------------------------
# gamma grid search

def grid_search_gamma(embeddings: np.ndarray, train_pos: np.ndarray,
                      train_labels: np.ndarray, val_pos: np.ndarray,
                      val_labels: np.ndarray, candidates) -> int:
    """Neighbor budget maximizing KNN-vote accuracy on validation nodes.

    Train nodes vote with their (noisy) labels; accuracy is measured against
    the (noisy) validation labels. Ties prefer the smaller candidate.
    """
    candidates = sorted(int(c) for c in candidates)
    if not candidates:
        raise ConfigError("gamma candidate set is empty")
    d = pairwise_sq_dists(embeddings[val_pos], embeddings[train_pos])
    order = np.argsort(d, axis=1, kind="stable")
    best_gamma, best_acc = None, -1.0
    for gamma in candidates:
        nn = order[:, : min(gamma, train_pos.size)]
        votes = train_labels[nn].sum(axis=1)
        pred = np.where(votes >= 0, 1.0, -1.0)
        acc = float(np.mean(pred == np.sign(val_labels)))
        if acc > best_acc:
            best_gamma, best_acc = gamma, acc
    return best_gamma


# ---------------------------------------------------------------------------
# stage training

def _train_stage(net: MetricNet, cfg: PipelineConfig, ds: Dataset, stage: str,
                 loss_of_batch) -> list[float]:
    """Shared epoch/batch loop; loss_of_batch(batch, epoch, b_idx) -> (loss, grads)
    or None to skip. Returns the mean batch loss per epoch."""
    net_cfg = net.config
    adam = AdamState.for_net(net)
    epoch_losses = []
    for epoch in range(net_cfg.epochs):
        lr = lr_at(net_cfg, epoch)
        batches = build_batches(ds, cfg, substream_seed(cfg.seed, stage, "epoch", epoch))
        losses = []
        for b_idx, batch in enumerate(batches):
            result = loss_of_batch(batch, epoch, b_idx)
            if result is None:
                continue
            loss, grads = result
            losses.append(loss)
            adam_step(net, grads, adam, lr)
        epoch_losses.append(float(np.mean(losses)) if losses else 0.0)
    return epoch_losses


def run_stage_gnet(ds: Dataset, cfg: PipelineConfig) -> PipelineState:
    """Train the embedding net, grid-search the neighbor budget, build the
    initial unweighted working graph."""
    state = PipelineState.fresh(ds, cfg)
    net = MetricNet(ds.n_features, cfg.net_config("embed"))

    def loss_of_batch(batch, epoch, b_idx):
        y = batch_signal(ds, batch)
        try:
            trips = sample_triplets(y, cfg.triplets_per_graph,
                                    substream_seed(cfg.seed, "embed", "trip", epoch, b_idx))
        except SamplingError:
            logger.info("embed stage: single-class batch skipped (epoch %d)", epoch)
            return None
        return triplet_loss_E(net, ds.features[batch.ids], trips, cfg.margin_e)

    state.stage_losses["embed"] = _train_stage(net, cfg, ds, "embed", loss_of_batch)
    state.nets["embed"] = net

    emb_work, _ = net.forward_batch(ds.features[state.work_ids])
    split_work = ds.split[state.work_ids]
    train_pos = np.flatnonzero(split_work == TRAIN)
    val_pos = np.flatnonzero(split_work == VAL)
    state.gamma0 = grid_search_gamma(
        emb_work, train_pos, ds.noisy_labels[state.work_ids][train_pos],
        val_pos, ds.noisy_labels[state.work_ids][val_pos], cfg.gamma_candidates)

    graph0 = knn_edges(emb_work, state.gamma0)
    lap0 = build_laplacian(graph0)
    state.stages[0] = StageRecord(graph=graph0, laplacian=lap0,
                                  y=state.work_signal0, embeddings=emb_work)
    return state


def _stage_inputs(state: PipelineState, r: int) -> np.ndarray:
    """Concatenated inputs for a weighting stage: raw features plus the
    previous net's shallow feature tap."""
    ds = state.dataset
    feats = ds.features[state.work_ids]
    if r == 1:
        _, shallow = state.nets["embed"].forward_batch(feats)
    else:
        shallow = state.update_shallow
    return np.hstack([feats, shallow])


def run_stage_wnet(state: PipelineState, r: int, cfg: PipelineConfig | None = None
                   ) -> PipelineState:
    """Train weighting net r, alternating per batch graph: weight, denoise,
    refresh attention from the signal change, then one loss step."""
    cfg = cfg or state.config
    ds = state.dataset
    eps = cfg.eps1 if r == 1 else cfg.eps2
    inputs_work = _stage_inputs(state, r)
    if r == 1:
        y_prev_work = state.stages[0].y
        labels_work = y_prev_work
        base_emb = state.stages[0].embeddings
        budgets_work = None
    else:
        if state.update_graph is None:
            raise UsageError("run the update stage before weighting r=2")
        y_prev_work = state.stages[1].y
        labels_work = np.sign(state.stages[1].y)
        base_emb = state.nets["update"].forward_batch(state.update_inputs)[0]
        budgets_work = state.update_budgets
    stage = f"weight{r}"
    net = MetricNet(inputs_work.shape[1], cfg.net_config(stage))

    def loss_of_batch(batch, epoch, b_idx):
        pos = state.positions(batch.ids)
        x_in = inputs_work[pos]
        labels_b = labels_work[pos]
        if r == 1:
            g_b = knn_edges(base_emb[pos], state.gamma0)
        else:
            g_b = knn_edges(base_emb[pos], np.maximum(budgets_work[pos], 1))
        part = partition_edges(g_b, labels_b)
        if part.same.size == 0 or part.opposite.size == 0:
            logger.info("%s: batch without both edge classes skipped (epoch %d)", stage, epoch)
            return None
        emb_c, _ = net.forward_batch(x_in)
        sigma = auto_sigma(emb_c, part)
        lap = build_laplacian(assign_weights(g_b, emb_c, sigma))
        y_cur = denoise(lap, y_prev_work[pos], cfg.glr)
        att = node_attention_matrix(node_phi(y_prev_work[pos], y_cur, eps))
        try:
            trips = sample_triplets(labels_b, cfg.triplets_per_graph,
                                    substream_seed(cfg.seed, stage, "trip", epoch, b_idx))
        except SamplingError:
            logger.info("%s: single-class batch skipped (epoch %d)", stage, epoch)
            return None
        return triplet_loss_W(net, x_in, trips, cfg.margin_w, att)

    state.stage_losses[stage] = _train_stage(net, cfg, ds, stage, loss_of_batch)
    state.nets[stage] = net

    base_graph = state.stages[0].graph if r == 1 else state.update_graph
    emb_work, _ = net.forward_batch(inputs_work)
    part = partition_edges(base_graph, labels_work)
    sigma = auto_sigma(emb_work, part)
    weighted = assign_weights(base_graph, emb_work, sigma)
    lap = build_laplacian(weighted)
    y_r = denoise(lap, y_prev_work, cfg.glr)
    phi = node_phi(y_prev_work, y_r, eps)
    state.stages[r] = StageRecord(graph=weighted, laplacian=lap, y=y_r,
                                  embeddings=emb_work,
                                  attention=edge_attention_matrix(weighted, phi),
                                  phi=phi)
    return state


def _denoise_stage(state: PipelineState, r: int, graph: Graph, y_prev: np.ndarray,
                   eps: float, embeddings=None) -> None:
    """Record a GLR pass over an existing (possibly unweighted) graph."""
    lap = build_laplacian(graph)
    y_r = denoise(lap, y_prev, state.config.glr)
    phi = node_phi(y_prev, y_r, eps)
    state.stages[r] = StageRecord(graph=graph, laplacian=lap, y=y_r,
                                  embeddings=embeddings,
                                  attention=edge_attention_matrix(graph, phi),
                                  phi=phi)


def unet_inputs(features: np.ndarray, y: np.ndarray, adjacency: sp.csr_matrix,
                k: int) -> np.ndarray:
    """Per-node update-net encoding: raw features, the two-slot label encoding
    of the denoised value, and its differences to the k largest-weight
    neighbors' encodings.

    The encoding of value v is (v, 0) for v > 0 and (0, v) otherwise. Nodes
    with fewer than k neighbors repeat their nearest available neighbor
    (isolated nodes repeat themselves), logged.
    """
    m = features.shape[0]
    enc = np.zeros((m, 2))
    posv = y > 0
    enc[posv, 0] = y[posv]
    enc[~posv, 1] = y[~posv]
    adj = adjacency.tocsr()
    adj.sort_indices()
    neighbor_ids = np.empty((m, k), dtype=np.int64)
    padded = 0
    for i in range(m):
        row = slice(adj.indptr[i], adj.indptr[i + 1])
        cols = adj.indices[row]
        w = adj.data[row]
        order = np.argsort(-w, kind="stable")
        chosen = cols[order[:k]]
        if chosen.size == 0:
            chosen = np.array([i], dtype=np.int64)
            padded += 1
        elif chosen.size < k:
            padded += 1
        reps = np.resize(chosen, k) if chosen.size < k else chosen
        neighbor_ids[i] = reps
    if padded:
        logger.info("padded neighbor lists for %d nodes with fewer than %d neighbors",
                    padded, k)
    diffs = enc[neighbor_ids] - enc[:, None, :]
    return np.hstack([features, enc, diffs.reshape(m, 2 * k)])


def run_stage_unet(state: PipelineState, cfg: PipelineConfig | None = None
                   ) -> PipelineState:
    """Train the update net on neighborhood-encoded inputs and rebuild the
    graph with budgets recounted from surviving edges."""
    cfg = cfg or state.config
    ds = state.dataset
    rec1 = state.stages[1]
    feats = ds.features[state.work_ids]
    g_inputs = unet_inputs(feats, rec1.y, rec1.laplacian.adjacency, cfg.unet_neighbors)
    labels_work = np.sign(rec1.y)
    phi1 = rec1.phi if rec1.phi is not None else np.ones(rec1.y.size)
    net = MetricNet(g_inputs.shape[1], cfg.net_config("update"))

    def loss_of_batch(batch, epoch, b_idx):
        pos = state.positions(batch.ids)
        labels_b = labels_work[pos]
        att = node_attention_matrix(phi1[pos])
        try:
            trips = sample_triplets(labels_b, cfg.triplets_per_graph,
                                    substream_seed(cfg.seed, "update", "trip", epoch, b_idx))
        except SamplingError:
            logger.info("update stage: single-class batch skipped (epoch %d)", epoch)
            return None
        return triplet_loss_W(net, g_inputs[pos], trips, cfg.margin_w, att)

    state.stage_losses["update"] = _train_stage(net, cfg, ds, "update", loss_of_batch)
    state.nets["update"] = net

    emb_hu, shallow_hu = net.forward_batch(g_inputs)
    state.update_graph = graph_update(rec1.graph, rec1.laplacian, rec1.y, emb_hu,
                                      cfg.beta)
    state.update_budgets = state.update_graph.gamma
    state.update_inputs = g_inputs
    state.update_shallow = shallow_hu
    return state


def run_variant(ds: Dataset, cfg: PipelineConfig) -> PipelineState:
    """Train every stage the configured variant needs and record per-iteration
    artifacts on the train+val working set."""
    chain, _ = parse_variant(cfg.variant)
    state = run_stage_gnet(ds, cfg)
    if chain == "DML-KNN":
        state.trained_chain = chain
        return state
    if chain == "G-2":
        _denoise_stage(state, 1, state.stages[0].graph, state.stages[0].y, cfg.eps1,
                       embeddings=state.stages[0].embeddings)
    else:
        run_stage_wnet(state, 1, cfg)
        if chain in ("G-1232", "G-12312"):
            run_stage_unet(state, cfg)
            if chain == "G-1232":
                _denoise_stage(state, 2, state.update_graph, state.stages[1].y, cfg.eps2)
            else:
                run_stage_wnet(state, 2, cfg)
    state.trained_chain = chain
    return state


# ---------------------------------------------------------------------------
# frozen-chain transduction

def _forward_chain(state: PipelineState, chain: str, features: np.ndarray,
                   y0: np.ndarray, cfg: PipelineConfig
                   ) -> tuple[np.ndarray, sp.csr_matrix]:
    """Run the frozen variant chain on an arbitrary node set.

    Returns the final denoised signal and the final adjacency (for
    neighbor-based tie-breaks).
    """
    emb_d, shallow_d = state.nets["embed"].forward_batch(features)
    g0 = knn_edges(emb_d, state.gamma0)
    if chain == "G-2":
        lap = build_laplacian(g0)
        return denoise(lap, y0, cfg.glr), lap.adjacency
    f1 = np.hstack([features, shallow_d])
    emb_c1, _ = state.nets["weight1"].forward_batch(f1)
    sigma = auto_sigma(emb_c1, partition_edges(g0, y0))
    g1 = assign_weights(g0, emb_c1, sigma)
    lap1 = build_laplacian(g1)
    y1 = denoise(lap1, y0, cfg.glr)
    if chain == "G-12":
        return y1, lap1.adjacency
    labels1 = np.sign(y1)
    g_in = unet_inputs(features, y1, lap1.adjacency, cfg.unet_neighbors)
    emb_hu, shallow_hu = state.nets["update"].forward_batch(g_in)
    g_up = graph_update(g1, lap1, y1, emb_hu, cfg.beta)
    if chain == "G-1232":
        lap2 = build_laplacian(g_up)
        return denoise(lap2, y1, cfg.glr), lap2.adjacency
    f2 = np.hstack([features, shallow_hu])
    emb_c2, _ = state.nets["weight2"].forward_batch(f2)
    sigma2 = auto_sigma(emb_c2, partition_edges(g_up, labels1))
    lap3 = build_laplacian(assign_weights(g_up, emb_c2, sigma2))
    return denoise(lap3, y1, cfg.glr), lap3.adjacency


def _stratified_train_sample(ds: Dataset, size: int, rng) -> np.ndarray:
    """Class-proportional draw of train node ids, without replacement.

    Stratification uses the noisy working labels; clean labels stay
    diagnostics-only."""
    train_idx = ds.indices(TRAIN)
    labels = ds.noisy_labels[train_idx]
    pos = train_idx[labels > 0]
    neg = train_idx[labels < 0]
    n_pos = int(round(size * pos.size / train_idx.size))
    n_pos = min(max(n_pos, 1), size - 1)
    take_pos = rng.choice(pos, size=min(n_pos, pos.size), replace=False)
    take_neg = rng.choice(neg, size=min(size - n_pos, neg.size), replace=False)
    return np.concatenate([take_pos, take_neg])


def _stratified_batches(ids: np.ndarray, labels: np.ndarray, n_batches: int,
                        rng) -> list[np.ndarray]:
    """Deal ids into n_batches groups, class-balanced, shuffled per class."""
    groups = [[] for _ in range(n_batches)]
    for cls in (1, -1):
        members = ids[labels == cls]
        members = members[rng.permutation(members.size)]
        for k, node in enumerate(members):
            groups[k % n_batches].append(node)
    return [np.asarray(g, dtype=np.int64) for g in groups]


def _reference_sets(state: PipelineState, cfg: PipelineConfig, sampling: bool
                    ) -> list[np.ndarray]:
    ds = state.dataset
    if not sampling:
        rng = substream(cfg.seed, "predict", "refs")
        return [_stratified_train_sample(ds, cfg.labeled_per_graph, rng)]
    top = rank_sampling(ds, state, cfg.rank_sample_k, cfg)
    rng = substream(cfg.seed, "predict", "rank-batches")
    return _stratified_batches(top, ds.noisy_labels[top], cfg.rank_sample_batches, rng)


def _chunks(indices: np.ndarray, size: int):
    for start in range(0, indices.size, size):
        yield indices[start:start + size]


def predict(state: PipelineState, test_indices, cfg: PipelineConfig | None = None
            ) -> np.ndarray:
    """Classify nodes by joining them to reference graphs of training nodes.

    References carry their noisy labels, targets carry 0; the frozen chain
    runs end to end and the prediction is the sign of the final signal,
    averaged over reference batches in sampling mode. Exact zeros fall back
    to the sign of the accumulated weighted-neighbor signal, then +1.
    """
    cfg = cfg or state.config
    if state.trained_chain is None:
        raise UsageError("predict called before the pipeline was trained")
    chain, sampling = parse_variant(cfg.variant)
    test_indices = np.asarray(test_indices, dtype=np.int64)
    ds = state.dataset
    if chain == "DML-KNN":
        return _predict_dml_knn(state, test_indices, cfg, sampling)
    ref_sets = _reference_sets(state, cfg, sampling)
    total = np.zeros(test_indices.size)
    neighbor_total = np.zeros(test_indices.size)
    offset = 0
    for chunk in _chunks(test_indices, cfg.unlabeled_per_graph):
        chunk_slice = slice(offset, offset + chunk.size)
        for refs in ref_sets:
            nodes = np.concatenate([refs, chunk])
            y0 = np.concatenate([ds.noisy_labels[refs], np.zeros(chunk.size)])
            y_fin, adj = _forward_chain(state, chain, ds.features[nodes], y0, cfg)
            tpos = np.arange(refs.size, nodes.size)
            total[chunk_slice] += y_fin[tpos]
            neighbor_total[chunk_slice] += np.asarray(adj[tpos] @ y_fin).ravel()
        offset += chunk.size
    avg = total / len(ref_sets)
    pred = np.sign(avg)
    ties = pred == 0
    pred[ties] = np.sign(neighbor_total[ties])
    pred[pred == 0] = 1.0
    return pred.astype(np.int8)


def _knn_vote(emb_refs: np.ndarray, labels_refs: np.ndarray, emb_targets: np.ndarray,
              gamma: int) -> np.ndarray:
    d = pairwise_sq_dists(emb_targets, emb_refs)
    order = np.argsort(d, axis=1, kind="stable")[:, : min(gamma, emb_refs.shape[0])]
    return labels_refs[order].sum(axis=1)


def _predict_dml_knn(state: PipelineState, test_indices: np.ndarray,
                     cfg: PipelineConfig, sampling: bool) -> np.ndarray:
    """Nearest-neighbor vote in the embedding space (the ladder's baseline)."""
    ds = state.dataset
    net = state.nets["embed"]
    emb_test, _ = net.forward_batch(ds.features[test_indices])
    if sampling:
        ref_sets = _reference_sets(state, cfg, True)
    else:
        ref_sets = [ds.indices(TRAIN)]
    votes = np.zeros(test_indices.size)
    for refs in ref_sets:
        emb_refs, _ = net.forward_batch(ds.features[refs])
        votes += np.sign(_knn_vote(emb_refs, ds.noisy_labels[refs], emb_test,
                                   state.gamma0))
    pred = np.where(votes >= 0, 1, -1)
    return pred.astype(np.int8)


# ---------------------------------------------------------------------------
# rank sampling

def _batch_accuracy(state: PipelineState, chain: str, refs: np.ndarray,
                    target_ids: np.ndarray, target_labels: np.ndarray,
                    cfg: PipelineConfig) -> float:
    ds = state.dataset
    if chain == "DML-KNN":
        emb_refs, _ = state.nets["embed"].forward_batch(ds.features[refs])
        emb_t, _ = state.nets["embed"].forward_batch(ds.features[target_ids])
        votes = _knn_vote(emb_refs, ds.noisy_labels[refs], emb_t, state.gamma0)
        pred = np.where(votes >= 0, 1.0, -1.0)
        return float(np.mean(pred == target_labels))
    hits = 0
    for chunk_start in range(0, target_ids.size, cfg.unlabeled_per_graph):
        chunk = target_ids[chunk_start:chunk_start + cfg.unlabeled_per_graph]
        nodes = np.concatenate([refs, chunk])
        y0 = np.concatenate([ds.noisy_labels[refs], np.zeros(chunk.size)])
        y_fin, _ = _forward_chain(state, chain, ds.features[nodes], y0, cfg)
        pred = np.sign(y_fin[refs.size:])
        pred[pred == 0] = 1.0
        hits += int((pred == target_labels[chunk_start:chunk_start + chunk.size]).sum())
    return hits / target_ids.size


def rank_sampling(ds: Dataset, state: PipelineState, k: int | None = None,
                  cfg: PipelineConfig | None = None) -> np.ndarray:
    """Top-k trusted training nodes by rank-fused accuracy and stability.

    Accuracy: each train node inherits the validation accuracy of the random
    reference batches it appeared in (measured against noisy validation
    labels). Stability: small change of the node's signal across the last two
    denoising passes. Equal-weight rank fusion, deterministic per seed; for
    the baseline without recorded signals, accuracy alone ranks.
    """
    cfg = cfg or state.config
    if state.trained_chain is None:
        raise UsageError("rank sampling needs a trained pipeline")
    chain, _ = parse_variant(cfg.variant)
    k = cfg.rank_sample_k if k is None else int(k)
    train_ids = ds.indices(TRAIN)
    m = train_ids.size
    if k > m:
        clamped = (int(0.6 * m) // cfg.rank_sample_batches) * cfg.rank_sample_batches
        logger.info("rank_sampling k=%d exceeds train size %d; clamped to %d", k, m, clamped)
        k = clamped
    val_ids = ds.indices(VAL)
    val_labels = np.sign(ds.noisy_labels[val_ids])
    rounds = max(1, math.ceil(cfg.rank_coverage * m / cfg.labeled_per_graph))
    acc_sum = np.zeros(m)
    acc_cnt = np.zeros(m)
    train_rank = np.full(ds.n_nodes, -1, dtype=np.int64)
    train_rank[train_ids] = np.arange(m)
    for rnd in range(rounds):
        rng = substream(cfg.seed, "rank", rnd)
        refs = _stratified_train_sample(ds, cfg.labeled_per_graph, rng)
        acc = _batch_accuracy(state, chain, refs, val_ids, val_labels, cfg)
        members = train_rank[refs]
        acc_sum[members] += acc
        acc_cnt[members] += 1
    seen = acc_cnt > 0
    acc_score = np.full(m, acc_sum[seen].sum() / acc_cnt[seen].sum() if seen.any() else 0.0)
    acc_score[seen] = acc_sum[seen] / acc_cnt[seen]

    recorded = sorted(state.stages)
    if len(recorded) >= 2:
        last, prev = recorded[-1], recorded[-2]
        delta = np.abs(state.stages[last].y - state.stages[prev].y)
        train_pos_work = state.positions(train_ids)
        instability = delta[train_pos_work]
        rank_acc = _ordinal_rank(-acc_score)
        rank_stab = _ordinal_rank(instability)
        fused = rank_acc + rank_stab
    else:
        fused = _ordinal_rank(-acc_score)
    order = np.lexsort((np.arange(m), fused))
    return np.sort(train_ids[order[:k]])


def _ordinal_rank(values: np.ndarray) -> np.ndarray:
    """Smaller value gets smaller rank; ties broken by position (stable)."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.int64)
    ranks[order] = np.arange(values.size)
    return ranks


# ---------------------------------------------------------------------------
# persistence

def write_run_manifest(path, cfg: PipelineConfig, ds_manifest: dict,
                       extra: dict | None = None) -> None:
    payload = {
        "variant": cfg.variant,
        "seed": cfg.seed,
        "margins": {"triplet": cfg.margin_e, "weighted": cfg.margin_w},
        "thresholds": {"eps1": cfg.eps1, "eps2": cfg.eps2, "beta": cfg.beta},
        "glr": {"kappa": cfg.glr.kappa, "mu_fraction": cfg.glr.mu_fraction,
                "solver_tol": cfg.glr.solver_tol},
        "batching": {"graphs_per_epoch": cfg.graphs_per_epoch,
                     "labeled_per_graph": cfg.labeled_per_graph,
                     "unlabeled_per_graph": cfg.unlabeled_per_graph},
        "rank_sampling": {"k": cfg.rank_sample_k, "batches": cfg.rank_sample_batches},
        "gamma_candidates": list(cfg.gamma_candidates),
        "embedding_dim": cfg.embedding_dim,
        "dataset": ds_manifest,
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_state(state: PipelineState, run_dir) -> None:
    """Checkpoint directory: one file per net plus per-iteration snapshots."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for name, net in state.nets.items():
        save_checkpoint(net, run_dir / f"net_{name}.npz")
    meta = {"gamma0": state.gamma0, "trained_chain": state.trained_chain,
            "variant": state.config.variant, "seed": state.config.seed,
            "stages": sorted(state.stages)}
    (run_dir / "state.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for r, rec in state.stages.items():
        arrays = {"y": rec.y}
        if rec.phi is not None:
            arrays["phi"] = rec.phi
        if rec.embeddings is not None:
            arrays["embeddings"] = rec.embeddings
        np.savez(run_dir / f"stage{r}.npz", **arrays)
        sp.save_npz(run_dir / f"stage{r}_edges.npz", rec.graph.edges)
        sp.save_npz(run_dir / f"stage{r}_weights.npz", rec.graph.weights)
        np.save(run_dir / f"stage{r}_gamma.npy", rec.graph.gamma)
    if state.update_graph is not None:
        sp.save_npz(run_dir / "update_edges.npz", state.update_graph.edges)
        np.save(run_dir / "update_budgets.npy", state.update_budgets)
        np.savez(run_dir / "update_arrays.npz", inputs=state.update_inputs,
                 shallow=state.update_shallow)


def load_state(run_dir, ds: Dataset, cfg: PipelineConfig) -> PipelineState:
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "state.json").read_text())
    state = PipelineState.fresh(ds, cfg)
    state.gamma0 = meta["gamma0"]
    state.trained_chain = meta["trained_chain"]
    for path in sorted(run_dir.glob("net_*.npz")):
        name = path.stem.removeprefix("net_")
        state.nets[name], _ = load_checkpoint(path)
    for r in meta["stages"]:
        with np.load(run_dir / f"stage{r}.npz") as data:
            y = data["y"]
            phi = data["phi"] if "phi" in data else None
            emb = data["embeddings"] if "embeddings" in data else None
        edges = sp.load_npz(run_dir / f"stage{r}_edges.npz").tocsr()
        weights = sp.load_npz(run_dir / f"stage{r}_weights.npz").tocsr()
        gamma = np.load(run_dir / f"stage{r}_gamma.npy")
        graph = Graph(n_nodes=edges.shape[0], edges=edges, weights=weights, gamma=gamma)
        lap = build_laplacian(graph)
        att = edge_attention_matrix(graph, phi) if phi is not None else None
        state.stages[r] = StageRecord(graph=graph, laplacian=lap, y=y,
                                      embeddings=emb, attention=att, phi=phi)
    if (run_dir / "update_edges.npz").exists():
        edges = sp.load_npz(run_dir / "update_edges.npz").tocsr()
        budgets = np.load(run_dir / "update_budgets.npy")
        with np.load(run_dir / "update_arrays.npz") as data:
            state.update_inputs = data["inputs"]
            state.update_shallow = data["shallow"]
        state.update_budgets = budgets
        state.update_graph = Graph(n_nodes=edges.shape[0], edges=edges,
                                   weights=edges.astype(np.float64), gamma=budgets)
    return state
