"""The set-abstraction network with frame-aligned edge convolutions.

Layout: an SAFirst block groups Euclidean neighborhoods around FPS reference
points, expresses them in local reference frames, and pools a shared MLP per
neighborhood. SANext blocks keep a quarter of the references (FPS over their
positions), build kNN graphs in feature space, and run an edge convolution
whose neighbor features are first aligned into the reference's frame. A max
pool plus head MLP produces class logits; the segmentation head propagates
features back to full resolution through two aligned interpolation stages.

Every input cloud is canonically reordered (lexicographic point sort) on
entry, which makes the full pipeline bitwise permutation invariant, and all
geometry consumed by the MLPs is frame-relative, which makes it rotation
invariant to float precision.
"""
from __future__ import annotations

import enum
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import lrf
from . import neighbors as nb
from .config import NetworkConfig, ConfigError
from .nn import Mlp

AECONV1_PENALTY_WEIGHT = 1e-3
FP_NEIGHBORS = 3
FP_DISTANCE_FLOOR = 1e-10


class AlignVariant(enum.Enum):
    """How a neighbor's feature is brought into the reference's frame."""

    PLAIN_EDGECONV = "edgeconv"
    AECONV1 = "aeconv1"   # predicted FxF matrix applied to x_j
    AECONV2 = "aeconv2"   # MLP on raw frame pair + offset + feature
    AECONV3 = "aeconv3"   # MLP on relative rotation + offset + feature

    @classmethod
    def from_name(cls, name) -> "AlignVariant":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(
                f"unknown align variant {name!r}; expected one of "
                f"{[v.value for v in cls]}"
            ) from None


@dataclass
class SaOutput:
    """Per-reference outputs of one set-abstraction block (single cloud)."""

    ref_points: np.ndarray    # (r, 3)
    frame_bases: np.ndarray   # (r, 3, 3)
    features: np.ndarray      # (r, f)

    def __post_init__(self):
        r = self.ref_points.shape[0]
        if self.frame_bases.shape[0] != r or self.features.shape[0] != r:
            raise ValueError("ref_points, frames, features must align")

    @property
    def frames(self) -> list:
        return [lrf.Lrf(origin=p, basis=b)
                for p, b in zip(self.ref_points, self.frame_bases)]

    def __len__(self) -> int:
        return self.ref_points.shape[0]


@dataclass
class _Level:
    """Batched per-level state flowing through the encoder."""

    pts: np.ndarray           # (b, r, 3)
    bases: np.ndarray         # (b, r, 3, 3)
    feat: Optional[object]    # Tensor (b, r, f) or None at the raw level


def _bidx(b: int, idx: np.ndarray) -> np.ndarray:
    return np.broadcast_to(
        np.arange(b).reshape((b,) + (1,) * (idx.ndim - 1)), idx.shape
    )


def _align_edge_features(variant: AlignVariant, align_mlp, x_j,
                         bases_i: np.ndarray, bases_j: np.ndarray,
                         t: np.ndarray, penalties: list):
    """Neighbor features x_j (.., k, f) aligned into the reference frames.

    bases_i: (.., 3, 3) reference frames; bases_j: (.., k, 3, 3) neighbor
    frames; t: (.., k, 3) neighbor offsets expressed in the reference frame.
    Geometry enters as constants; gradient flows through x_j and the MLP.
    AEConv1 appends its orthogonality penalty Tensor to `penalties`.
    """
    if variant is AlignVariant.PLAIN_EDGECONV:
        return x_j
    f = x_j.values.shape[-1]
    rel = lrf.relative_rotation_batch(bases_i, bases_j)
    rel9 = rel.reshape(rel.shape[:-2] + (9,))
    if variant is AlignVariant.AECONV1:
        code = ad.constant(np.concatenate([rel9, t], axis=-1))
        m = ad.reshape(align_mlp(code), code.values.shape[:-1] + (f, f))
        penalties.append(ad.orthogonality_penalty(m))
        return ad.edge_matvec(m, x_j)
    if variant is AlignVariant.AECONV2:
        ei = np.broadcast_to(
            bases_i[..., None, :, :], bases_j.shape
        ).reshape(bases_j.shape[:-2] + (9,))
        ej = bases_j.reshape(bases_j.shape[:-2] + (9,))
        code = ad.constant(np.concatenate([ei, ej, t], axis=-1))
        return align_mlp(ad.concat([code, x_j]))
    code = ad.constant(np.concatenate([rel9, t], axis=-1))
    return align_mlp(ad.concat([code, x_j]))


class Model:
    """Weights plus forward passes for one NetworkConfig.

    Construction draws fresh parameters from the seed; `load_values` swaps in
    checkpointed arrays. All forward entry points sort the points of each
    cloud into canonical order first, so point order never matters.
    """

    def __init__(self, config: NetworkConfig, seed: int = 0):
        config.validated()
        self.config = config
        self.params: dict = {}
        self.lrf_fallbacks: dict = {}
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
        c = config

        in_dim = 3 if c.features == "rir" else 6
        self.h_mlp = Mlp((in_dim, *c.sa_first.widths), rng, self.params,
                         "sa_first.h", normalize=c.normalize)

        self.block_mlps = []
        f_in = c.sa_first.widths[-1]
        for i, blk in enumerate(c.sa_next, start=1):
            variant = AlignVariant.from_name(blk.variant or c.variant)
            align = self._build_align_mlp(
                variant, f_in, c.aeconv1_hidden, rng, f"sa_next{i}.align"
            )
            q_in = 2 * f_in if variant is AlignVariant.PLAIN_EDGECONV else 2 * f_in + 3
            q = Mlp((q_in, *blk.widths), rng, self.params, f"sa_next{i}.q",
                    normalize=c.normalize)
            self.block_mlps.append((variant, align, q, blk.k))
            f_in = blk.widths[-1]

        self.head_mlp = Mlp((f_in, *c.head_widths, c.n_classes), rng, self.params,
                            "head")

        self.fp_stages = []
        self.point_head = None
        if c.n_parts:
            variant = AlignVariant.from_name(c.variant)
            widths = c.feature_widths()          # (f1, f2, f3)
            # Stage 1: coarsest level onto the sa_first references (skip f1);
            # stage 2: onto the raw points (no skip).
            specs = [
                (widths[-1], widths[0], c.fp_widths[0]),
                (c.fp_widths[0], 0, c.fp_widths[1]),
            ]
            for si, (f_coarse, f_skip, f_out) in enumerate(specs, start=1):
                align = self._build_align_mlp(
                    variant, f_coarse, c.fp_align_hidden, rng, f"fp{si}.align",
                    hidden_override=c.fp_align_hidden,
                )
                mlp = Mlp((f_coarse + f_skip, f_out, f_out), rng, self.params,
                          f"fp{si}.mlp", normalize=c.normalize)
                self.fp_stages.append((variant, align, mlp))
            self.point_head = Mlp(
                (c.fp_widths[1] + c.n_classes, *c.point_head, c.n_parts),
                rng, self.params, "point_head", normalize=c.normalize,
            )

    def _build_align_mlp(self, variant: AlignVariant, f: int, aeconv1_hidden: int,
                         rng, name: str, hidden_override: Optional[int] = None):
        if variant is AlignVariant.PLAIN_EDGECONV:
            return None
        if variant is AlignVariant.AECONV1:
            hidden = hidden_override or aeconv1_hidden
            return Mlp((12, hidden, f * f), rng, self.params, name)
        if variant is AlignVariant.AECONV2:
            hidden = hidden_override or f
            return Mlp((21 + f, hidden, f), rng, self.params, name)
        hidden = hidden_override or f
        return Mlp((12 + f, hidden, f), rng, self.params, name)

    # -- weight management ---------------------------------------------------

    def values(self) -> dict:
        return {k: t.values.copy() for k, t in self.params.items()}

    def load_values(self, arrays: dict):
        missing = [k for k in self.params if k not in arrays]
        extra = [k for k in arrays if k not in self.params]
        if missing or extra:
            raise ValueError(
                f"weight name mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for k, t in self.params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.values.shape:
                raise ValueError(
                    f"shape mismatch for {k}: checkpoint {a.shape}, model {t.values.shape}"
                )
            t.values = a.copy()

    @contextmanager
    def _inference(self):
        """Drop gradient tracking for pure evaluation passes."""
        old = [(p, p.needs_grad) for p in self.params.values()]
        for p, _ in old:
            p.needs_grad = False
        try:
            yield
        finally:
            for p, was in old:
                p.needs_grad = was

    def parameter_count(self) -> int:
        return sum(int(p.values.size) for p in self.params.values())

    # -- geometry plumbing ---------------------------------------------------

    def _canonicalize(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 3 or points.shape[2] != 3:
            raise ValueError(f"expected (b, n, 3) points, got {points.shape}")
        if points.shape[1] != self.config.n_points:
            raise ValueError(
                f"this model expects {self.config.n_points} points per cloud, "
                f"got {points.shape[1]}"
            )
        order = np.stack([geo.canonical_order(p) for p in points])
        spts = np.take_along_axis(points, order[:, :, None], axis=1)
        return spts, order

    def _first_level(self, pts: np.ndarray, nb_idx: np.ndarray,
                     bases: np.ndarray, ref_idx: np.ndarray) -> _Level:
        """Shared tail of sa_first: RIR (or raw) coords -> pooled features."""
        b = pts.shape[0]
        ref_pts = pts[_bidx(b, ref_idx), ref_idx]
        nb_pts = pts[_bidx(b, nb_idx), nb_idx]
        if self.config.features == "rir":
            h_in = lrf.rir_batch(nb_pts, ref_pts, bases)
        else:
            # Negative-control mode: world coordinates go straight in.
            offsets = nb_pts - ref_pts[:, :, None, :]
            refs_rep = np.repeat(ref_pts[:, :, None, :], nb_pts.shape[2], axis=2)
            h_in = np.concatenate([refs_rep, offsets], axis=-1)
        feat = self.h_mlp(ad.constant(h_in), set_axes=(2,))
        feat = ad.max_reduce(feat, axis=2)
        return _Level(pts=ref_pts, bases=bases, feat=feat)

    def _sa_first_batch(self, pts: np.ndarray) -> _Level:
        c = self.config.sa_first
        b = pts.shape[0]
        ref_idx = nb.fps_batch(pts, c.n_ref)
        ref_pts = pts[_bidx(b, ref_idx), ref_idx]
        if c.search == "knn":
            nb_idx = nb.knn_points_batch(pts, ref_pts, c.k)
        else:
            nb_idx = nb.ball_points_batch(pts, ref_pts, c.radius, c.k)
        nb_pts = pts[_bidx(b, nb_idx), nb_idx]
        bases = lrf.compute_lrf_batch(
            ref_pts, nb_pts, strategy=c.anchor, counts=self.lrf_fallbacks
        )
        return self._first_level(pts, nb_idx, bases, ref_idx)

    def _all_point_frames(self, pts: np.ndarray):
        """Frames for every point, used by the segmentation head."""
        c = self.config.sa_first
        if c.search == "knn":
            nb_idx = nb.knn_points_batch(pts, pts, c.k)
        else:
            nb_idx = nb.ball_points_batch(pts, pts, c.radius, c.k)
        nb_pts = pts[_bidx(pts.shape[0], nb_idx), nb_idx]
        bases = lrf.compute_lrf_batch(
            pts, nb_pts, strategy=c.anchor, counts=self.lrf_fallbacks
        )
        return nb_idx, bases

    # -- aligned edge convolution ---------------------------------------------

    def _align(self, variant: AlignVariant, align_mlp, x_j, bases_i: np.ndarray,
               bases_j: np.ndarray, t: np.ndarray, penalties: list):
        return _align_edge_features(variant, align_mlp, x_j, bases_i, bases_j,
                                    t, penalties)

    def _sa_next_batch(self, level: _Level, block_index: int,
                       penalties: list) -> _Level:
        variant, align_mlp, q_mlp, k = self.block_mlps[block_index]
        b, r_in = level.pts.shape[:2]
        r_out = r_in // 4
        sub = nb.fps_batch(level.pts, r_out)                      # (b, r_out)
        new_pts = level.pts[_bidx(b, sub), sub]
        new_bases = level.bases[_bidx(b, sub), sub]
        corpus = level.feat.values
        queries = corpus[_bidx(b, sub), sub]
        graph = nb.knn_features_batch(corpus, queries, k)         # (b, r_out, k)
        x_i = ad.gather_rows(level.feat, sub)                     # (b, r_out, f)
        x_j = ad.gather_rows(level.feat, graph)                   # (b, r_out, k, f)
        nb_pos = level.pts[_bidx(b, graph), graph]
        nb_bases = level.bases[_bidx(b, graph), graph]
        t = lrf.rir_batch(nb_pos, new_pts, new_bases)             # (b, r_out, k, 3)
        xhat = self._align(variant, align_mlp, x_j, new_bases, nb_bases, t,
                           penalties)
        xi_rep = ad.expand_set(x_i, k)
        parts = [xi_rep, ad.sub(xhat, xi_rep)]
        if variant is not AlignVariant.PLAIN_EDGECONV:
            parts.append(ad.constant(t))
        edge = q_mlp(ad.concat(parts), set_axes=(2,))
        feat = ad.max_reduce(edge, axis=2)
        return _Level(pts=new_pts, bases=new_bases, feat=feat)

    # -- forward passes --------------------------------------------------------

    def encode_batch(self, points: np.ndarray):
        """Canonical order, SAFirst, all SANext blocks.

        Returns (levels, order, penalties): levels[0] is the raw sorted cloud
        (no features), then one level per abstraction stage.
        """
        pts, order = self._canonicalize(points)
        penalties: list = []
        first = self._sa_first_batch(pts)
        levels = [_Level(pts=pts, bases=np.empty(0), feat=None), first]
        cur = first
        for i in range(len(self.block_mlps)):
            cur = self._sa_next_batch(cur, i, penalties)
            levels.append(cur)
        return levels, order, penalties

    def classify_batch(self, points: np.ndarray):
        """Logits Tensor (b, c) plus the regularization penalty Tensor list."""
        levels, _, penalties = self.encode_batch(points)
        pooled = ad.max_reduce(levels[-1].feat, axis=1)
        return self.head_mlp(pooled), penalties

    def segment_batch(self, points: np.ndarray, onehot: np.ndarray):
        """Per-point part logits Tensor (b, n, n_parts), original point order."""
        c = self.config
        if not c.n_parts:
            raise ConfigError(["this model was configured without a segmentation head"])
        onehot = np.asarray(onehot, dtype=np.float64)
        if onehot.shape != (points.shape[0], c.n_classes):
            raise ValueError(
                f"object one-hot must have shape ({points.shape[0]}, {c.n_classes})"
            )
        pts, order = self._canonicalize(points)
        b, n = pts.shape[:2]
        penalties: list = []

        # Frames everywhere; sa_first reuses the ones at its references.
        nb_all, bases_all = self._all_point_frames(pts)
        ref_idx = nb.fps_batch(pts, c.sa_first.n_ref)
        bases_ref = bases_all[_bidx(b, ref_idx), ref_idx]
        nb_idx = nb_all[_bidx(b, ref_idx), ref_idx]
        first = self._first_level(pts, nb_idx, bases_ref, ref_idx)

        levels = [first]
        cur = first
        for i in range(len(self.block_mlps)):
            cur = self._sa_next_batch(cur, i, penalties)
            levels.append(cur)

        fine_mid = levels[0]
        coarse = levels[-1]
        variant1, align1, mlp1 = self.fp_stages[0]
        g1 = self._propagate(coarse, fine_mid.pts, fine_mid.bases,
                             fine_mid.feat, variant1, align1, mlp1, penalties)
        mid = _Level(pts=fine_mid.pts, bases=fine_mid.bases, feat=g1)

        variant2, align2, mlp2 = self.fp_stages[1]
        g2 = self._propagate(mid, pts, bases_all, None, variant2, align2, mlp2,
                             penalties)

        hot = np.repeat(onehot[:, None, :], n, axis=1)
        logits = self.point_head(ad.concat([g2, ad.constant(hot)]), set_axes=(1,))

        # Undo the canonical sort so row i speaks for input point i.
        inv = np.empty_like(order)
        np.put_along_axis(inv, order, np.arange(n)[None, :].repeat(b, axis=0), axis=1)
        return ad.gather_rows(logits, inv), penalties

    def _propagate(self, coarse: _Level, fine_pts: np.ndarray,
                   fine_bases: np.ndarray, skip, variant: AlignVariant,
                   align_mlp, mlp: Mlp, penalties: list):
        """Interpolate aligned coarse features onto fine points (3-NN, 1/d)."""
        b = fine_pts.shape[0]
        nn3 = nb.knn_points_batch(coarse.pts, fine_pts, FP_NEIGHBORS)
        cpos = coarse.pts[_bidx(b, nn3), nn3]                 # (b, nf, 3, 3)
        cbases = coarse.bases[_bidx(b, nn3), nn3]
        d = np.linalg.norm(cpos - fine_pts[:, :, None, :], axis=-1)
        d = np.maximum(d, FP_DISTANCE_FLOOR)
        w = 1.0 / d
        w /= w.sum(axis=-1, keepdims=True)
        cfeat = ad.gather_rows(coarse.feat, nn3)              # (b, nf, 3, fc)
        t = lrf.rir_batch(cpos, fine_pts, fine_bases)
        xhat = self._align(variant, align_mlp, cfeat, fine_bases, cbases, t,
                           penalties)
        interp = ad.sum_reduce(ad.mul(xhat, ad.constant(w[..., None])), axis=2)
        mixed = interp if skip is None else ad.concat([interp, skip])
        return mlp(mixed, set_axes=(1,))

    # -- single-cloud conveniences ---------------------------------------------

    def predict_logits(self, points: np.ndarray) -> np.ndarray:
        return self.predict_logits_batch(np.asarray(points)[None])[0]

    def predict_logits_batch(self, points: np.ndarray) -> np.ndarray:
        with self._inference():
            logits, _ = self.classify_batch(points)
        return logits.values

    def predict_part_logits(self, points: np.ndarray, class_label: int) -> np.ndarray:
        onehot = np.zeros((1, self.config.n_classes))
        onehot[0, int(class_label)] = 1.0
        with self._inference():
            logits, _ = self.segment_batch(np.asarray(points)[None], onehot)
        return logits.values[0]

    def predict_part_logits_batch(self, points: np.ndarray,
                                  class_labels: np.ndarray) -> np.ndarray:
        onehot = np.zeros((points.shape[0], self.config.n_classes))
        onehot[np.arange(points.shape[0]), np.asarray(class_labels, dtype=int)] = 1.0
        with self._inference():
            logits, _ = self.segment_batch(points, onehot)
        return logits.values

    def loss_terms(self, logits, labels: np.ndarray, penalties: list):
        """Cross entropy plus the weighted AEConv1 orthogonality penalties."""
        loss = ad.cross_entropy(logits, labels)
        for pen in penalties:
            loss = ad.add(loss, ad.scale(pen, AECONV1_PENALTY_WEIGHT))
        return loss


# ---------------------------------------------------------------------------
# spec-facing functional interface (single cloud, numpy in / numpy out)
# ---------------------------------------------------------------------------

def as_model(config: NetworkConfig, weights: Union[Model, dict, None],
             seed: int = 0) -> Model:
    """Accept a Model, a {name: array} dict, or None (fresh weights)."""
    if isinstance(weights, Model):
        return weights
    model = Model(config, seed=seed)
    if weights is not None:
        model.load_values(weights)
    return model


def _points_of(cloud) -> np.ndarray:
    return geo.as_points(cloud)


def pointnet_kernel(rirs: np.ndarray, weights) -> np.ndarray:
    """Shared MLP over rows of (k, d) coordinates, max pooled to one vector."""
    mlp = weights.h_mlp if isinstance(weights, Model) else weights
    rirs = np.asarray(rirs, dtype=np.float64)
    if rirs.ndim != 2 or rirs.shape[1] != mlp.in_width:
        raise ValueError(
            f"expected (k, {mlp.in_width}) coordinates, got {rirs.shape}"
        )
    out = ad.max_pool_set(mlp(ad.constant(rirs)))
    return out.values


def sa_first(cloud, config: NetworkConfig, weights) -> SaOutput:
    """First abstraction level of a single cloud."""
    model = as_model(config, weights)
    pts = _points_of(cloud)
    with model._inference():
        spts, _ = model._canonicalize(pts[None])
        level = model._sa_first_batch(spts)
        return SaOutput(level.pts[0], level.bases[0], level.feat.values[0])


def align_feature(x_j, rotation, translation, weights, variant,
                  frames: Optional[tuple] = None) -> np.ndarray:
    """Align one neighbor feature vector into a reference frame.

    `translation` may be a (3,) offset or a RirPoint; AEConv2 needs the raw
    frame pair passed via `frames=(frame_i, frame_j)` because it consumes the
    bases themselves rather than their relative rotation.
    """
    variant = AlignVariant.from_name(variant)
    x = np.asarray(x_j, dtype=np.float64)
    if isinstance(translation, lrf.RirPoint):
        translation = translation.coords
    t = np.asarray(translation, dtype=np.float64).reshape(1, 1, 1, 3)
    if variant is AlignVariant.PLAIN_EDGECONV:
        return x.copy()
    align_mlp = weights.block_mlps[0][1] if isinstance(weights, Model) else weights
    if variant is AlignVariant.AECONV2:
        if frames is None:
            raise ValueError("aeconv2 alignment needs frames=(frame_i, frame_j)")
        bi = frames[0].basis.reshape(1, 1, 3, 3)
        bj = frames[1].basis.reshape(1, 1, 1, 3, 3)
    else:
        rot = np.asarray(rotation, dtype=np.float64)
        bi = np.eye(3).reshape(1, 1, 3, 3)
        bj = rot.T.reshape(1, 1, 1, 3, 3)  # E_i @ E_j^T == rotation with E_i = I
    pens: list = []
    out = _align_edge_features(
        variant, align_mlp, ad.constant(x.reshape(1, 1, 1, -1)), bi, bj, t, pens
    )
    return out.values.reshape(-1)


def aligned_edge_conv(prev: SaOutput, graph: nb.NeighborGraph, weights,
                      variant) -> np.ndarray:
    """Edge convolution over a prepared feature graph; returns (r', f')."""
    model = weights if isinstance(weights, Model) else None
    if model is None:
        raise ValueError("aligned_edge_conv needs the Model as weights")
    variant = AlignVariant.from_name(variant)
    block_variant, align_mlp, q_mlp, _ = model.block_mlps[0]
    if variant is not block_variant:
        raise ValueError(
            f"model block 0 was built for {block_variant.value!r}, not {variant.value!r}"
        )
    refs = graph.reference_indices
    lists = graph.neighbor_lists
    with model._inference():
        feat = ad.constant(prev.features[None])
        new_pts = prev.ref_points[refs][None]
        new_bases = prev.frame_bases[refs][None]
        x_i = ad.gather_rows(feat, refs[None])
        x_j = ad.gather_rows(feat, lists[None])
        nb_pos = prev.ref_points[lists][None]
        nb_bases = prev.frame_bases[lists][None]
        t = lrf.rir_batch(nb_pos, new_pts, new_bases)
        pens: list = []
        xhat = model._align(variant, align_mlp, x_j, new_bases, nb_bases, t, pens)
        k = lists.shape[1]
        xi_rep = ad.expand_set(x_i, k)
        parts = [xi_rep, ad.sub(xhat, xi_rep)]
        if variant is not AlignVariant.PLAIN_EDGECONV:
            parts.append(ad.constant(t))
        edge = q_mlp(ad.concat(parts), set_axes=(2,))
        out = ad.max_reduce(edge, axis=2)
        return out.values[0]


def sa_next(prev: SaOutput, config: NetworkConfig, weights,
            block_index: int = 0) -> SaOutput:
    """Quarter the references, regroup in feature space, run the edge conv."""
    model = as_model(config, weights)
    if len(prev) < 4:
        raise ValueError(f"sa_next needs at least 4 references, got {len(prev)}")
    level = _Level(pts=prev.ref_points[None], bases=prev.frame_bases[None],
                   feat=ad.constant(prev.features[None]))
    with model._inference():
        pens: list = []
        out = model._sa_next_batch(level, block_index, pens)
        return SaOutput(out.pts[0], out.bases[0], out.feat.values[0])


def classify(cloud, config: NetworkConfig, weights) -> np.ndarray:
    """Class logits (c,) for one cloud."""
    model = as_model(config, weights)
    return model.predict_logits(_points_of(cloud))


def feature_propagation(coarse: SaOutput, fine_points: np.ndarray,
                        fine_frames: np.ndarray, skip_features, weights,
                        stage: int = 0) -> np.ndarray:
    """Aligned 3-NN inverse-distance interpolation onto finer points."""
    model = weights if isinstance(weights, Model) else None
    if model is None or not model.fp_stages:
        raise ValueError("feature_propagation needs a segmentation Model")
    variant, align_mlp, mlp = model.fp_stages[stage]
    fine_pts = np.asarray(fine_points, dtype=np.float64)[None]
    if isinstance(fine_frames, (list, tuple)):
        fine_bases = np.stack([f.basis for f in fine_frames])[None]
    else:
        fine_bases = np.asarray(fine_frames, dtype=np.float64)[None]
    clevel = _Level(pts=coarse.ref_points[None], bases=coarse.frame_bases[None],
                    feat=ad.constant(coarse.features[None]))
    skip = None if skip_features is None else ad.constant(
        np.asarray(skip_features, dtype=np.float64)[None]
    )
    with model._inference():
        pens: list = []
        out = model._propagate(clevel, fine_pts, fine_bases, skip, variant,
                               align_mlp, mlp, pens)
        return out.values[0]


def segment(cloud, object_onehot, config: NetworkConfig, weights) -> np.ndarray:
    """Per-point part logits (n, n_parts) for one cloud."""
    model = as_model(config, weights)
    pts = _points_of(cloud)
    onehot = np.asarray(object_onehot, dtype=np.float64)
    if onehot.ndim == 0 or onehot.size == 1:
        idx = int(onehot)
        onehot = np.zeros(model.config.n_classes)
        onehot[idx] = 1.0
    with model._inference():
        logits, _ = model.segment_batch(pts[None], onehot[None])
    return logits.values[0]


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def _mlp_macs(widths) -> int:
    return sum(a * b for a, b in zip(widths[:-1], widths[1:]))


def count_operations(config: NetworkConfig) -> dict:
    """Analytic per-sample multiply-accumulate counts, by section.

    Only MAC-bearing work (MLPs and the AEConv1 matrix application) is
    counted; distance computations and sorting are excluded. flops = 2*macs.
    """
    c = config.validated()
    out: dict = {}
    in_dim = 3 if c.features == "rir" else 6
    refs = c.ref_counts()
    out["sa_first"] = refs[0] * c.sa_first.k * _mlp_macs((in_dim, *c.sa_first.widths))
    f_in = c.sa_first.widths[-1]
    for i, blk in enumerate(c.sa_next, start=1):
        variant = AlignVariant.from_name(blk.variant or c.variant)
        r_out = refs[i]
        edges = r_out * blk.k
        macs = 0
        if variant is AlignVariant.AECONV1:
            macs += edges * _mlp_macs((12, c.aeconv1_hidden, f_in * f_in))
            macs += edges * f_in * f_in
        elif variant is AlignVariant.AECONV2:
            macs += edges * _mlp_macs((21 + f_in, f_in, f_in))
        elif variant is AlignVariant.AECONV3:
            macs += edges * _mlp_macs((12 + f_in, f_in, f_in))
        q_in = 2 * f_in if variant is AlignVariant.PLAIN_EDGECONV else 2 * f_in + 3
        macs += edges * _mlp_macs((q_in, *blk.widths))
        out[f"sa_next{i}"] = macs
        f_in = blk.widths[-1]
    out["head"] = _mlp_macs((f_in, *c.head_widths, c.n_classes))
    if c.n_parts:
        variant = AlignVariant.from_name(c.variant)
        widths = c.feature_widths()
        fine_counts = (refs[0], c.n_points)
        specs = [(widths[-1], widths[0], c.fp_widths[0]),
                 (c.fp_widths[0], 0, c.fp_widths[1])]
        for si, ((fc, fs, fo), nf) in enumerate(zip(specs, fine_counts), start=1):
            macs = 0
            if variant is AlignVariant.AECONV1:
                macs += nf * FP_NEIGHBORS * (
                    _mlp_macs((12, c.fp_align_hidden, fc * fc)) + fc * fc
                )
            elif variant is AlignVariant.AECONV2:
                macs += nf * FP_NEIGHBORS * _mlp_macs((21 + fc, c.fp_align_hidden, fc))
            elif variant is AlignVariant.AECONV3:
                macs += nf * FP_NEIGHBORS * _mlp_macs((12 + fc, c.fp_align_hidden, fc))
            macs += nf * _mlp_macs((fc + fs, fo, fo))
            out[f"fp{si}"] = macs
        out["point_head"] = c.n_points * _mlp_macs(
            (c.fp_widths[1] + c.n_classes, *c.point_head, c.n_parts)
        )
    out["total_macs"] = sum(v for k, v in out.items())
    out["flops"] = 2 * out["total_macs"]
    return out


def count_parameters(config: NetworkConfig, seed: int = 0) -> int:
    """Exact trainable scalar count, read from the built weight shapes."""
    return Model(config, seed=seed).parameter_count()
