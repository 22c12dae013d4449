"""The completion network: twin point encoders, pooled features, residual decoder.

Layout for encoder widths ``E`` and decoder widths ``D``::

    S (B,N,3) --shared per-point linear+ReLU over E--> max over points --+
    T (B,M,3) --shared per-point linear+ReLU over E--> max over points --+--> g (B, 2*E[-1])
    g --FC+ReLU over D[:-1]--> h
    per point i: relu(h @ Wg + S_i @ Wp + b) (width D[-1]) -> dropout -> 3 offsets
    MS = S + offsets

The last hidden decoder layer is evaluated per point so the 3*N outputs stay
index-aligned with S: permuting S permutes MS the same way.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import PointCloud, SpatialIndex

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetworkConfig:
    encoder_widths: tuple = (64, 128, 512, 1024)
    iterative_encoder_widths: tuple = (64, 128, 1024)
    decoder_widths: tuple = (1024, 512, 256)
    source_count: int = 64
    template_count: int = 64
    dropout_p: float = 0.2
    iterative: bool = True
    laplacian_k: int = 8
    squared_chamfer: bool = False
    supervision: str = "chamfer"  # or "l2": mean per-point distance to the label
    zero_init_head: bool = False

    def __post_init__(self):
        for name in ("encoder_widths", "iterative_encoder_widths", "decoder_widths"):
            w = tuple(int(v) for v in getattr(self, name))
            if not w or min(w) <= 0:
                raise ValueError(f"{name} must be non-empty and positive")
            object.__setattr__(self, name, w)
        if self.source_count < 8 or self.template_count < 8:
            raise ValueError("source_count and template_count must be >= 8")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.supervision not in ("chamfer", "l2"):
            raise ValueError(f"unknown supervision {self.supervision!r}")
        if not 3 <= self.laplacian_k < self.source_count:
            raise ValueError("laplacian_k must be in [3, source_count)")

    @property
    def widths(self) -> tuple:
        """Encoder widths actually used by both branches."""
        return self.iterative_encoder_widths if self.iterative else self.encoder_widths


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.7

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")


@dataclass
class Patch:
    """Source/template neighbourhoods around one GP point, in the local frame.

    ``source.points[0]`` is always the center point itself.
    """

    center: np.ndarray
    source: PointCloud
    template: PointCloud
    radius: float
    index: int = -1

    @property
    def has_template(self) -> bool:
        return len(self.template) > 0


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: NetworkConfig) -> list[tuple[str, tuple]]:
    """Canonical (name, shape) order; checkpoints are written in this order."""
    shapes = []
    for branch in ("src", "tmpl"):
        fan = 3
        for i, w in enumerate(cfg.widths):
            shapes += [(f"{branch}.{i}.w", (fan, w)), (f"{branch}.{i}.b", (w,))]
            fan = w
    fan = 2 * cfg.widths[-1]
    for j, w in enumerate(cfg.decoder_widths[:-1]):
        shapes += [(f"dec.{j}.w", (fan, w)), (f"dec.{j}.b", (w,))]
        fan = w
    last = cfg.decoder_widths[-1]
    shapes += [("dec.point.wg", (fan, last)), ("dec.point.wp", (3, last)), ("dec.point.b", (last,)),
               ("dec.out.w", (last, 3)), ("dec.out.b", (3,))]
    return shapes


def init_params(cfg: NetworkConfig, seed: int = 0) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, optionally a zero output layer."""
    rng = np.random.default_rng(seed)
    shapes = dict(param_shapes(cfg))
    # the per-point layer is one linear map over [global feature, xyz]
    point_fan_in = shapes["dec.point.wg"][0] + 3
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = point_fan_in if name.startswith("dec.point.") else shape[0]
            lim = np.sqrt(6.0 / (fan_in + shape[1]))
            data = rng.uniform(-lim, lim, size=shape)
        if name == "dec.out.w" and cfg.zero_init_head:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def copy_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def count_params(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())


# ---------------------------------------------------------------------------
# forward pass


def _batch(x) -> np.ndarray:
    a = np.asarray(x.points if isinstance(x, PointCloud) else x, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def encode(params, cfg: NetworkConfig, branch: str, x, fused: bool = True) -> Tensor:
    """One encoder branch: (B, P, 3) -> pooled (B, widths[-1])."""
    h = x if isinstance(x, Tensor) else Tensor(_batch(x))
    n = len(cfg.widths)
    for i in range(n - 1):
        h = ad.relu(ad.matmul(h, params[f"{branch}.{i}.w"]) + params[f"{branch}.{i}.b"])
    w, b = params[f"{branch}.{n - 1}.w"], params[f"{branch}.{n - 1}.b"]
    if fused:
        return ad.relu(ad.linear_max(h, w, b))
    return ad.max_over_points(ad.relu(ad.matmul(h, w) + b))


def decode(params, cfg: NetworkConfig, g: Tensor, s: Tensor, training: bool = False,
           rng: Optional[np.random.Generator] = None) -> Tensor:
    """Global feature (B, F) and source points (B, N, 3) -> offsets (B, N, 3)."""
    for j in range(len(cfg.decoder_widths) - 1):
        g = ad.relu(ad.matmul(g, params[f"dec.{j}.w"]) + params[f"dec.{j}.b"])
    per_sample = ad.expand_dims(ad.matmul(g, params["dec.point.wg"]), 1)
    per_point = ad.matmul(s, params["dec.point.wp"])
    h = ad.relu(per_point + per_sample + params["dec.point.b"])
    h = ad.dropout(h, cfg.dropout_p, training, rng)
    return ad.matmul(h, params["dec.out.w"]) + params["dec.out.b"]


def pooled_features(params, cfg: NetworkConfig, source, template, fused: bool = True):
    return (encode(params, cfg, "src", source, fused).data,
            encode(params, cfg, "tmpl", template, fused).data)


def forward_tensor(params, cfg: NetworkConfig, source, template, training: bool = False,
                   rng: Optional[np.random.Generator] = None, fused: bool = True,
                   template_feature: Optional[Tensor] = None) -> Tensor:
    s = Tensor(_batch(source))
    if s.shape[1] != cfg.source_count:
        raise ValueError(f"source has {s.shape[1]} points, config expects {cfg.source_count}")
    if template_feature is None:
        t = _batch(template)
        if t.shape[1] != cfg.template_count:
            raise ValueError(f"template has {t.shape[1]} points, config expects {cfg.template_count}")
        template_feature = encode(params, cfg, "tmpl", t, fused)
    fs = encode(params, cfg, "src", s, fused)
    g = ad.concat(fs, template_feature, axis=-1)
    return s + decode(params, cfg, g, s, training, rng)


def forward(params, cfg: NetworkConfig, source, template) -> np.ndarray:
    """Modeled source points for one patch (N, 3) or a batch (B, N, 3); eval mode."""
    single = np.asarray(source.points if isinstance(source, PointCloud) else source).ndim == 2
    out = forward_tensor(params, cfg, source, template).data
    return out[0] if single else out


def iterative_complete_batch(params, cfg: NetworkConfig, sources: np.ndarray, templates: np.ndarray,
                             m_iters: int, chunk: int = 256) -> np.ndarray:
    """Feed MS back as S ``m_iters`` times with the template fixed; (P, N, 3) in and out."""
    if m_iters < 1:
        raise ValueError("m_iters must be >= 1")
    sources = np.asarray(sources, dtype=np.float64)
    out = np.empty_like(sources)
    for lo in range(0, len(sources), chunk):
        s = sources[lo:lo + chunk]
        tf = encode(params, cfg, "tmpl", templates[lo:lo + chunk])
        for _ in range(m_iters):
            s = forward_tensor(params, cfg, s, None, template_feature=tf).data
        out[lo:lo + chunk] = s
    return out


def iterative_complete(params, cfg: NetworkConfig, patch: Patch, m_iters: int) -> PointCloud:
    if m_iters < 1:
        raise ValueError("m_iters must be >= 1")
    if not patch.has_template:
        return patch.source
    ms = iterative_complete_batch(params, cfg, patch.source.points[None],
                                  patch.template.points[None], m_iters)[0]
    return PointCloud(ms)


# ---------------------------------------------------------------------------
# losses, indexed (numpy) forms


def _pts(c) -> np.ndarray:
    a = np.asarray(c.points if isinstance(c, PointCloud) else c, dtype=np.float64)
    return a.reshape(-1, 3)


def chamfer(s, t, squared: bool = False) -> float:
    """Mean nearest-neighbour distance S->T plus T->S (unsquared by default)."""
    s, t = _pts(s), _pts(t)
    if len(s) == 0 or len(t) == 0:
        raise ValueError("empty cloud")
    _, d_st = SpatialIndex(t).nearest_many(s)
    _, d_ts = SpatialIndex(s).nearest_many(t)
    if squared:
        d_st, d_ts = d_st ** 2, d_ts ** 2
    return float(d_st.mean() + d_ts.mean())


def laplacian_residual(s, k: int = 8) -> float:
    """Mean distance from each point to the centroid of its k nearest neighbours."""
    s = _pts(s)
    if k < 3 or len(s) <= k:
        raise ValueError(f"laplacian_residual needs more than k={k} points and k >= 3")
    nbr, _ = SpatialIndex(s).knn(s, k, exclude_self=True)
    lp = s[nbr].mean(axis=1)
    return float(np.sqrt(np.sum((s - lp) ** 2, axis=1)).mean())


def total_loss(ms, t, weights: LossWeights = LossWeights(), k: int = 8, squared: bool = False) -> float:
    return weights.alpha * chamfer(ms, t, squared) + (1 - weights.alpha) * laplacian_residual(ms, k)


# ---------------------------------------------------------------------------
# losses on tensors (batched, dense nearest neighbours)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ad.pairwise_distances(np.ascontiguousarray(a, dtype=np.float64),
                                 np.ascontiguousarray(b, dtype=np.float64))


def chamfer_tensor(ms: Tensor, target: np.ndarray, squared: bool = False) -> Tensor:
    """Per-sample chamfer (B,) between a point tensor and constant targets."""
    target = np.asarray(target, dtype=np.float64)
    dist = _pairwise(ms.data, target)
    i_st = np.argmin(dist, axis=2)  # (B, N) target index per MS point
    i_ts = np.argmin(dist, axis=1)  # (B, K) MS index per target point
    ad.note_branch(i_st)
    ad.note_branch(i_ts)
    near_t = np.take_along_axis(target, i_st[..., None], axis=1)
    d1 = ms - near_t
    d2 = ad.take_points(ms, i_ts) - target
    if squared:
        t1 = ad.sum_(d1 * d1, axis=-1)
        t2 = ad.sum_(d2 * d2, axis=-1)
    else:
        t1, t2 = ad.norm(d1), ad.norm(d2)
    return ad.mean(t1, axis=1) + ad.mean(t2, axis=1)


def knn_dense(points: np.ndarray, k: int) -> np.ndarray:
    """(B, N, 3) -> (B, N, k) neighbour indices, self excluded, ties to lowest index."""
    dist = _pairwise(points, points)
    n = points.shape[1]
    dist[:, np.arange(n), np.arange(n)] = np.inf
    nbr = np.argsort(dist, axis=2, kind="stable")[:, :, :k]
    ad.note_branch(np.sort(nbr, axis=2))
    return nbr


def laplacian_tensor(ms: Tensor, k: int) -> Tensor:
    bsz, n, _ = ms.shape
    nbr = knn_dense(ms.data, k)
    gathered = ad.reshape(ad.take_points(ms, nbr.reshape(bsz, n * k)), (bsz, n, k, 3))
    lp = ad.mean(gathered, axis=2)
    return ad.mean(ad.norm(ms - lp), axis=1)


def loss_tensor(ms: Tensor, target: np.ndarray, cfg: NetworkConfig,
                weights: LossWeights = LossWeights()) -> Tensor:
    """Batch mean of alpha * fit(MS, target) + (1 - alpha) * laplacian(MS)."""
    if cfg.supervision == "l2":
        fit = ad.mean(ad.norm(ms - np.asarray(target)), axis=1)
    else:
        fit = chamfer_tensor(ms, target, cfg.squared_chamfer)
    per = fit * weights.alpha + laplacian_tensor(ms, cfg.laplacian_k) * (1 - weights.alpha)
    return ad.mean(per)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 256
    epochs: int = 1000
    lr_decay: float = 0.92
    alpha: float = 0.7
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class TrainResult:
    params: dict            # best-validation parameters
    final_params: dict
    curve: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr)
    best_epoch: int = 0

    @property
    def train_losses(self) -> list[float]:
        return [row[1] for row in self.curve]


def evaluate_loss(params, cfg: NetworkConfig, sources, templates, labels,
                  weights: LossWeights = LossWeights(), chunk: int = 256) -> float:
    total = 0.0
    for lo in range(0, len(sources), chunk):
        ms = forward_tensor(params, cfg, sources[lo:lo + chunk], templates[lo:lo + chunk])
        total += float(loss_tensor(ms, labels[lo:lo + chunk], cfg, weights).data) * len(ms.data)
    return total / len(sources)


def train(sources: np.ndarray, templates: np.ndarray, labels: np.ndarray, cfg: NetworkConfig,
          hyper: TrainConfig = TrainConfig(), init: Optional[dict] = None,
          progress: Optional[Callable[[int, float, float], None]] = None) -> TrainResult:
    """Fit the network to (S, T, label) triples with Adam.

    A seeded ``val_fraction`` of the samples is held out; the returned
    ``params`` are those with the lowest validation loss.
    """
    sources = np.asarray(sources, dtype=np.float64)
    templates = np.asarray(templates, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(sources) == 0:
        raise ValueError("empty dataset")
    if not (len(sources) == len(templates) == len(labels)):
        raise ValueError("sources, templates and labels differ in length")
    rng = np.random.default_rng(hyper.seed)
    order = rng.permutation(len(sources))
    n_val = int(round(hyper.val_fraction * len(sources)))
    if n_val >= len(sources):
        n_val = 0
    val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    weights = LossWeights(hyper.alpha)

    params = copy_params(init) if init is not None else init_params(cfg, hyper.seed)
    state = ad.AdamState(hyper.learning_rate, hyper.beta1, hyper.beta2, hyper.epsilon, hyper.lr_decay)
    result = TrainResult(params=copy_params(params), final_params=params)
    best = np.inf
    for epoch in range(1, hyper.epochs + 1):
        perm = tr_idx[rng.permutation(len(tr_idx))]
        epoch_total = 0.0
        for bno, lo in enumerate(range(0, len(perm), hyper.batch_size)):
            b = perm[lo:lo + hyper.batch_size]
            try:
                ms = forward_tensor(params, cfg, sources[b], templates[b], training=True, rng=rng)
                loss = loss_tensor(ms, labels[b], cfg, weights)
            except FloatingPointError as e:
                raise RuntimeError(f"NaN loss at epoch {epoch} batch {bno}: {e}") from None
            loss.backward()
            ad.adam_step(params, state)
            epoch_total += float(loss.data) * len(b)
        train_loss = epoch_total / len(perm)
        if n_val:
            val_loss = evaluate_loss(params, cfg, sources[val_idx], templates[val_idx],
                                     labels[val_idx], weights)
        else:
            val_loss = train_loss
        result.curve.append((epoch, train_loss, val_loss, state.learning_rate))
        if val_loss < best:
            best = val_loss
            result.params = copy_params(params)
            result.best_epoch = epoch
        if progress is not None:
            progress(epoch, train_loss, val_loss)
        log.debug("epoch %d train %.6f val %.6f lr %.3g", epoch, train_loss, val_loss,
                  state.learning_rate)
        state.end_epoch()
    result.final_params = params
    return result


def write_loss_curve(result: TrainResult, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("epoch\ttrain_loss\tval_loss\tlearning_rate\n")
        for epoch, tr, va, lr in result.curve:
            f.write(f"{epoch}\t{tr:.17g}\t{va:.17g}\t{lr:.17g}\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, cfg: NetworkConfig, path) -> None:
    header = [1, cfg.source_count, cfg.template_count, int(cfg.iterative), len(cfg.widths), *cfg.widths,
              len(cfg.decoder_widths), *cfg.decoder_widths]
    ad.save_flat(path, header, (params[name].data for name, _ in param_shapes(cfg)))


def load_checkpoint(path, base: Optional[NetworkConfig] = None) -> tuple[dict, NetworkConfig]:
    header, flat = ad.load_flat(path)
    if not header or header[0] != 1:
        raise ValueError("unsupported checkpoint version")
    n, m, iterative, ne = header[1:5]
    enc = tuple(header[5:5 + ne])
    nd = header[5 + ne]
    dec = tuple(header[6 + ne:6 + ne + nd])
    base = base or NetworkConfig()
    kw = dict(source_count=n, template_count=m, iterative=bool(iterative), decoder_widths=dec)
    kw["iterative_encoder_widths" if iterative else "encoder_widths"] = enc
    cfg = replace(base, **kw)
    params = {}
    pos = 0
    for name, shape in param_shapes(cfg):
        size = int(np.prod(shape))
        if pos + size > len(flat):
            raise ValueError("checkpoint payload too short for its header")
        params[name] = Tensor(flat[pos:pos + size].reshape(shape).copy(), requires_grad=True)
        pos += size
    if pos != len(flat):
        raise ValueError("checkpoint payload length does not match header")
    return params, cfg
