"""Desk-scale relational GNN: encoder, message passing, heads, training and checks."""

from __future__ import annotations

import numpy as np

from ..graph import HeteroTemporalGraph
from ..sampler import SampledSubgraph
from .checkpoint import load_checkpoint, params_from_bytes, params_to_bytes, save_checkpoint
from .config import EncoderConfig, GnnConfig, HeadConfig, ModelConfig, TrainConfig, default_config, merge_config
from .gradcheck import grad_check
from .losses import loss_bpr, loss_entity
from .network import Batch, build_adjacency, build_node_features, encode, gnn_forward, init_params, make_batch
from .train import TrainingDiverged, Trainer, TrainResult, score_batch_idgnn, train


def encode_nodes(sg: SampledSubgraph, g: HeteroTemporalGraph, cfg: EncoderConfig, params: dict,
                 feats=None, identity: bool = False) -> dict[str, np.ndarray]:
    """Initial embedding per local node, keyed by node type."""
    feats = feats if feats is not None else build_node_features(g)
    batch = make_batch(sg, g, feats, cfg, GnnConfig(), dtype=next(iter(params.values())).dtype)
    return encode(params, batch, cfg, identity=identity)[0]


def forward(sg: SampledSubgraph, embeddings: dict[str, np.ndarray], gnn: GnnConfig, params: dict) -> dict:
    """Run ``gnn.num_layers`` rounds of message passing over the subgraph's local edges."""
    n = {t: len(idx) for t, idx in sg.node_index.items()}
    batch = Batch(sg, n, {}, {}, {}, build_adjacency(sg, n, gnn.aggregation, embeddings[next(iter(embeddings))].dtype))
    return gnn_forward(params, batch, embeddings, gnn)[0]


def score_idgnn(sg: SampledSubgraph, final_embeddings: dict[str, np.ndarray], params: dict,
                dst_type: str) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per root: (global destination indices inside its subgraph, logits)."""
    from .network import mlp_forward

    out = []
    if sg.num_nodes(dst_type) == 0:
        return [(np.empty(0, dtype=np.int64), np.empty(0)) for _ in range(sg.num_roots)]
    keep = sg.node_hop[dst_type] > 0
    logits = mlp_forward(params, final_embeddings[dst_type])[0]
    for r in range(sg.num_roots):
        m = keep & (sg.node_root[dst_type] == r)
        out.append((sg.node_index[dst_type][m], logits[m]))
    return out


__all__ = [
    "EncoderConfig", "GnnConfig", "HeadConfig", "ModelConfig", "TrainConfig", "TrainResult", "Trainer",
    "TrainingDiverged", "default_config", "encode_nodes", "forward", "grad_check", "load_checkpoint",
    "loss_bpr", "loss_entity", "merge_config", "params_from_bytes", "params_to_bytes", "save_checkpoint",
    "score_batch_idgnn", "score_idgnn", "train", "init_params",
]
