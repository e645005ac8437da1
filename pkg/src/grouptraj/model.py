"""Variational encoder-decoder over a hierarchical group graph.

Several scenes are processed together by stacking their pedestrians into one
:class:`SceneBatch`; every mixing operator (spatial pooling, intra-group and
inter-group adjacency, group selector) is block diagonal over scenes so no
information crosses scene boundaries.

Activations: ReLU after the motion, spatial and decoder embeddings and after
both layers of each GCN; the latent heads and the output layer are linear.
The variance head predicts a log-variance and is exponentiated.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Tensor, concat, no_grad, stack
from .dataset import Scene, compute_relative
from .group_graph import (
    GroupAssignment,
    build_intra_mask,
    gpool,
    gunpool,
    normalize_rows,
    unique_rows,
)
from .sampler import CorrelationSpec, reparameterize, sample_joint

__all__ = [
    "LATENT_DIM",
    "VARIANTS",
    "ModelParams",
    "SceneBatch",
    "EncoderOutput",
    "PredictionSet",
    "param_shapes",
    "init_params",
    "encode_self",
    "gcn_forward",
    "hierarchical_forward",
    "parallel_forward",
    "encode",
    "decode",
    "predict",
    "predict_batch",
    "save_params",
    "load_params",
]

LATENT_DIM = 8
EMBED = 16
ENC_HIDDEN = 32
DEC_HIDDEN = 32
GCN_HIDDEN = 72
GCN_OUT = 16
VARIANTS = ("hierarchical", "parallel")
CHECKPOINT_VERSION = 1


def param_shapes(variant: str = "hierarchical") -> "OrderedDict[str, tuple[int, ...]]":
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    c_width = ENC_HIDDEN + EMBED
    inter_in = GCN_OUT if variant == "hierarchical" else c_width
    e_width = 2 * GCN_OUT
    return OrderedDict(
        [
            ("mot.W", (2, EMBED)),
            ("mot.b", (EMBED,)),
            ("sp.W", (2, EMBED)),
            ("sp.b", (EMBED,)),
            ("enc.W", (EMBED + ENC_HIDDEN, 4 * ENC_HIDDEN)),
            ("enc.b", (4 * ENC_HIDDEN,)),
            ("intra1.W", (c_width, GCN_HIDDEN)),
            ("intra1.b", (GCN_HIDDEN,)),
            ("intra2.W", (GCN_HIDDEN, GCN_OUT)),
            ("intra2.b", (GCN_OUT,)),
            ("inter1.W", (inter_in, GCN_HIDDEN)),
            ("inter1.b", (GCN_HIDDEN,)),
            ("inter2.W", (GCN_HIDDEN, GCN_OUT)),
            ("inter2.b", (GCN_OUT,)),
            ("mu.W", (e_width, LATENT_DIM)),
            ("mu.b", (LATENT_DIM,)),
            ("logvar.W", (e_width, LATENT_DIM)),
            ("logvar.b", (LATENT_DIM,)),
            ("de.W", (2, EMBED)),
            ("de.b", (EMBED,)),
            ("dec.W", (LATENT_DIM + EMBED + DEC_HIDDEN, 4 * DEC_HIDDEN)),
            ("dec.b", (4 * DEC_HIDDEN,)),
            ("out.W", (DEC_HIDDEN, 2)),
            ("out.b", (2,)),
        ]
    )


class ModelParams:
    """Named learnable tensors plus the GCN variant they belong to."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]", variant: str = "hierarchical"):
        expected = param_shapes(variant)
        if list(tensors) != list(expected):
            raise ValueError(f"parameter names {list(tensors)} do not match the {variant} layout")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.tensors = tensors
        self.variant = variant

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def n_values(self) -> int:
        return sum(t.size for t in self)

    def copy(self) -> "ModelParams":
        return ModelParams(
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.items()), self.variant
        )

    def zero_grads(self) -> None:
        for t in self:
            t.grad = None


def init_params(seed=0, variant: str = "hierarchical") -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(variant)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in shapes.items():
        layer = name.split(".")[0]
        fan_in = shapes[layer + ".W"][0]
        bound = 1.0 / np.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape)
        if name in ("enc.b", "dec.b"):
            # forget-gate bias starts at 1
            hid = shape[0] // 4
            data[hid : 2 * hid] += 1.0
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors, variant)


# --------------------------------------------------------------------- batch


@dataclass
class SceneBatch:
    """Pedestrians of several scenes stacked into one block-structured graph."""

    n_scenes: int
    ped_slices: list[slice]
    groups: GroupAssignment
    x_rel: np.ndarray
    pair_disp: np.ndarray
    pair_pool: np.ndarray
    a_intra: np.ndarray
    selector: np.ndarray
    a_inter: np.ndarray
    a_complement: np.ndarray
    last_pos: np.ndarray
    future_rel: np.ndarray
    future_pos: np.ndarray
    t_obs: int
    horizon: int

    @property
    def n_peds(self) -> int:
        return self.x_rel.shape[0]

    @property
    def last_disp(self) -> np.ndarray:
        return self.x_rel[:, -1]

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene]) -> "SceneBatch":
        if not scenes:
            raise ValueError("empty scene list")
        t_obs, horizon = scenes[0].t_obs, scenes[0].horizon
        if any(s.t_obs != t_obs or s.horizon != horizon for s in scenes):
            raise ValueError("all scenes in a batch need the same t_obs and horizon")
        x_rel, pairs, fut_rel, labels, scene_of = [], [], [], [], []
        slices, pair_rows = [], []
        start = pair_start = 0
        for k, s in enumerate(scenes):
            rel = compute_relative(s)
            n = s.n_peds
            x_rel.append(rel.x_rel)
            fut_rel.append(rel.future_rel)
            pairs.append(rel.p_rel.reshape(n * n, 2))
            labels.extend((k, int(g)) for g in s.groups.group_of)
            scene_of.extend([k] * n)
            slices.append(slice(start, start + n))
            pair_rows.append((start, n, pair_start))
            start += n
            pair_start += n * n
        n_total = start
        pool = np.zeros((n_total, pair_start))
        for first, n, p0 in pair_rows:
            for i in range(n):
                pool[first + i, p0 + i * n : p0 + (i + 1) * n] = 1.0 / n
        groups = GroupAssignment.from_labels(labels)
        scene_of = np.array(scene_of)
        m_intra = build_intra_mask(groups)
        selector = unique_rows(m_intra)
        scene_of_group = np.array([scene_of[np.flatnonzero(row)[0]] for row in selector])
        inter_mask = (scene_of_group[:, None] == scene_of_group[None, :]).astype(np.float64)
        same_scene = scene_of[:, None] == scene_of[None, :]
        comp_mask = (same_scene & (m_intra == 0)).astype(np.float64) + np.eye(n_total)
        return cls(
            n_scenes=len(scenes),
            ped_slices=slices,
            groups=groups,
            x_rel=np.concatenate(x_rel),
            pair_disp=np.concatenate(pairs),
            pair_pool=pool,
            a_intra=normalize_rows(m_intra),
            selector=selector,
            a_inter=normalize_rows(inter_mask),
            a_complement=normalize_rows(comp_mask),
            last_pos=np.concatenate([s.last_observed for s in scenes]),
            future_rel=np.concatenate(fut_rel),
            future_pos=np.concatenate([s.future for s in scenes]),
            t_obs=t_obs,
            horizon=horizon,
        )


# ------------------------------------------------------------------- encoder


def _linear(x: Tensor, params: ModelParams, layer: str) -> Tensor:
    return x @ params[layer + ".W"] + params[layer + ".b"]


def _lstm_step(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    hid = h.shape[1]
    gates = concat([x, h], axis=1) @ w + b
    i = gates[:, :hid].sigmoid()
    f = gates[:, hid : 2 * hid].sigmoid()
    g = gates[:, 2 * hid : 3 * hid].tanh()
    o = gates[:, 3 * hid :].sigmoid()
    c = f * c + i * g
    return o * c.tanh(), c


def encode_self(x_rel: np.ndarray, pair_disp: np.ndarray, pair_pool: np.ndarray, params: ModelParams) -> Tensor:
    """Per-pedestrian self representation ``c`` (N x 48).

    ``pair_disp`` stacks every pedestrian's relative positions to all scene
    members (including itself) and ``pair_pool`` averages them back per row.
    """
    x_rel = np.asarray(x_rel, dtype=np.float64)
    if not (np.isfinite(x_rel).all() and np.isfinite(pair_disp).all()):
        raise ValueError("NaN or infinite value in encoder input")
    n = x_rel.shape[0]
    h = Tensor(np.zeros((n, ENC_HIDDEN)))
    c = Tensor(np.zeros((n, ENC_HIDDEN)))
    for t in range(x_rel.shape[1]):
        emb = _linear(Tensor(x_rel[:, t]), params, "mot").relu()
        h, c = _lstm_step(emb, h, c, params["enc.W"], params["enc.b"])
    spatial = Tensor(pair_pool) @ _linear(Tensor(pair_disp), params, "sp").relu()
    return concat([h, spatial], axis=1)


def gcn_forward(features: Tensor, adjacency: np.ndarray, layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Stack of ``H <- ReLU(A H W + b)`` layers."""
    a = Tensor(adjacency)
    h = features
    for w, b in layers:
        h = ((a @ h) @ w + b).relu()
    return h


def _gcn_layers(params: ModelParams, prefix: str):
    return [(params[f"{prefix}1.W"], params[f"{prefix}1.b"]), (params[f"{prefix}2.W"], params[f"{prefix}2.b"])]


@dataclass
class EncoderOutput:
    e: Tensor
    mu: Tensor
    sigma: Tensor


def _heads(e: Tensor, params: ModelParams) -> EncoderOutput:
    return EncoderOutput(e, _linear(e, params, "mu"), _linear(e, params, "logvar").exp())


def hierarchical_forward(c: Tensor, batch: SceneBatch, params: ModelParams) -> EncoderOutput:
    e_intra = gcn_forward(c, batch.a_intra, _gcn_layers(params, "intra"))
    g_in = gpool(e_intra, batch.selector)
    g_out = gcn_forward(g_in, batch.a_inter, _gcn_layers(params, "inter"))
    e_inter = gunpool(g_out, batch.selector)
    return _heads(concat([e_intra, e_inter], axis=1), params)


def parallel_forward(c: Tensor, batch: SceneBatch, params: ModelParams) -> EncoderOutput:
    """Ablation: intra GCN and a pedestrian-level out-of-group GCN side by side."""
    e_intra = gcn_forward(c, batch.a_intra, _gcn_layers(params, "intra"))
    e_inter = gcn_forward(c, batch.a_complement, _gcn_layers(params, "inter"))
    return _heads(concat([e_intra, e_inter], axis=1), params)


def encode(batch: SceneBatch, params: ModelParams) -> EncoderOutput:
    c = encode_self(batch.x_rel, batch.pair_disp, batch.pair_pool, params)
    if params.variant == "hierarchical":
        return hierarchical_forward(c, batch, params)
    return parallel_forward(c, batch, params)


# ------------------------------------------------------------------- decoder


def decode(z: Tensor, last_disp: np.ndarray, params: ModelParams, horizon: int) -> Tensor:
    """Roll the decoder LSTM ``horizon`` steps; returns displacements (R x horizon x 2)."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rows = z.shape[0]
    h = Tensor(np.zeros((rows, DEC_HIDDEN)))
    c = Tensor(np.zeros((rows, DEC_HIDDEN)))
    prev = Tensor(np.asarray(last_disp, dtype=np.float64))
    steps = []
    for _ in range(horizon):
        inp = concat([z, _linear(prev, params, "de").relu()], axis=1)
        h, c = _lstm_step(inp, h, c, params["dec.W"], params["dec.b"])
        prev = _linear(h, params, "out")
        steps.append(prev)
    return stack(steps, axis=1)


def tile_rows(x: Tensor, k: int) -> Tensor:
    return x if k == 1 else concat([x] * k, axis=0)


def draw_eps(groups: GroupAssignment, k: int, rho: float, seed, dim: int = LATENT_DIM) -> np.ndarray:
    """``k`` joint draws; draw ``j`` uses the ``j``-th child of ``SeedSequence(seed)``."""
    spec = CorrelationSpec(rho, groups, dim)
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = seq.spawn(k)
    return np.stack([sample_joint(spec, np.random.default_rng(ch)) for ch in children])


# ---------------------------------------------------------------- prediction


@dataclass
class PredictionSet:
    samples: np.ndarray  # k x N x T x 2 displacements
    mean_trajectory: np.ndarray  # N x T x 2, decoded from z = mu
    eps: np.ndarray  # k x N x D
    last_positions: np.ndarray  # N x 2

    @property
    def k(self) -> int:
        return self.samples.shape[0]

    def sample_positions(self) -> np.ndarray:
        return self.last_positions[None, :, None, :] + np.cumsum(self.samples, axis=2)

    def mean_positions(self) -> np.ndarray:
        return self.last_positions[:, None, :] + np.cumsum(self.mean_trajectory, axis=1)


def predict_batch(
    batch: SceneBatch, params: ModelParams, k: int = 20, rho: float = 1.0, seed=0, eps: np.ndarray | None = None
) -> list[PredictionSet]:
    if k < 1:
        raise ValueError("k must be at least 1")
    if eps is None:
        eps = draw_eps(batch.groups, k, rho, seed)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (k, batch.n_peds, LATENT_DIM):
        raise ValueError(f"eps must have shape {(k, batch.n_peds, LATENT_DIM)}, got {eps.shape}")
    with no_grad():
        enc = encode(batch, params)
        n = batch.n_peds
        z = reparameterize(tile_rows(enc.mu, k + 1), tile_rows(enc.sigma, k + 1),
                           np.concatenate([np.zeros((n, LATENT_DIM)), eps.reshape(k * n, LATENT_DIM)]))
        last = np.tile(batch.last_disp, (k + 1, 1))
        out = decode(z, last, params, batch.horizon).data.reshape(k + 1, n, batch.horizon, 2)
    return [
        PredictionSet(out[1:, sl].copy(), out[0, sl].copy(), eps[:, sl].copy(), batch.last_pos[sl].copy())
        for sl in batch.ped_slices
    ]


def predict(scene: Scene, params: ModelParams, k: int = 20, rho: float = 1.0, seed=0, eps=None) -> PredictionSet:
    """Encode once, decode ``k`` joint samples plus the mean (eps = 0) trajectory."""
    return predict_batch(SceneBatch.from_scenes([scene]), params, k, rho, seed, eps)[0]


# ---------------------------------------------------------------- checkpoint


def save_params(path, params: ModelParams, meta: dict[str, str] | None = None) -> None:
    """Text manifest; values stored as ``float.hex`` so a reload is bit exact."""
    lines = [f"grouptraj-checkpoint {CHECKPOINT_VERSION}", f"variant {params.variant}"]
    for key, value in (meta or {}).items():
        if any(ch.isspace() for ch in str(key)):
            raise ValueError(f"meta key {key!r} contains whitespace")
        lines.append(f"meta {key} {value}")
    for name, t in params.items():
        lines.append(f"tensor {name} {' '.join(str(d) for d in t.shape)}")
        lines.append(" ".join(float(v).hex() for v in t.data.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(path, with_meta: bool = False):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("grouptraj-checkpoint "):
        raise ValueError(f"{path}: not a checkpoint file")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    variant = lines[1].split()[1]
    meta: dict[str, str] = {}
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    i = 2
    while i < len(lines):
        head = lines[i].split(" ", 2)
        if head[0] == "meta":
            meta[head[1]] = head[2] if len(head) > 2 else ""
            i += 1
            continue
        if head[0] != "tensor":
            raise ValueError(f"{path}:{i + 1}: unexpected line")
        parts = lines[i].split()
        name, shape = parts[1], tuple(int(d) for d in parts[2:])
        values = np.array([float.fromhex(v) for v in lines[i + 1].split()], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{path}: tensor {name} has {values.size} values, shape {shape}")
        tensors[name] = Tensor(values.reshape(shape), requires_grad=True)
        i += 2
    params = ModelParams(tensors, variant)
    return (params, meta) if with_meta else params
