"""Desk-scale BEV transformer and the public/private partition registry.

The model keeps the five component roles of a camera-to-BEV perception
transformer: a per-token feature encoder, a geometry-driven positional
embedding, cross-attention from a learnable BEV query grid onto the camera
tokens, a refinement MLP, and a per-cell decoder. Each role owns one named
parameter segment, so personalization schemes are just choices of which
segments stay private on a client:

    fedavg  -> nothing private (plain global averaging)
    fedrep  -> encoder private (local representation heads)
    fedtp   -> attention private (personalized attention)
    fedcap  -> pos_embed private (camera-geometry personalization)

Tokens are (camera, azimuth-bin) pairs; the elevation axis of the rendered
views is folded into the token channel dimension.
"""

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import apply_mask
from .params import ParamStore
from .world import CameraRig, azimuth_bin_angles

SEGMENT_NAMES = ("encoder", "pos_embed", "bev_query", "attention", "refine", "decoder")

SCHEME_PRIVATE_SEGMENTS = {
    "fedavg": frozenset(),
    "fedrep": frozenset({"encoder"}),
    "fedtp": frozenset({"attention"}),
    "fedcap": frozenset({"pos_embed"}),
}


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 16
    bev_grid: tuple = (16, 16)
    n_heads: int = 2
    n_attn_layers: int = 1
    encoder_hidden: int = 32
    decoder_hidden: int = 32
    pos_hidden: int = 16
    n_azimuth_bins: int = 24
    n_elevation_bins: int = 4
    n_view_channels: int = 4
    max_cameras: int = 4
    world_extent: float = 16.0

    def __post_init__(self):
        if self.feat_dim % self.n_heads != 0:
            raise ValueError("feat_dim must be divisible by n_heads")
        if self.bev_grid[0] < 4 or self.bev_grid[1] < 4:
            raise ValueError("bev_grid dims must be >= 4")

    @property
    def token_dim(self) -> int:
        return self.n_elevation_bins * self.n_view_channels

    @property
    def n_query_cells(self) -> int:
        return self.bev_grid[0] * self.bev_grid[1]

    def to_dict(self) -> dict:
        return {
            "feat_dim": self.feat_dim, "bev_grid": list(self.bev_grid),
            "n_heads": self.n_heads, "n_attn_layers": self.n_attn_layers,
            "encoder_hidden": self.encoder_hidden,
            "decoder_hidden": self.decoder_hidden,
            "pos_hidden": self.pos_hidden,
            "n_azimuth_bins": self.n_azimuth_bins,
            "n_elevation_bins": self.n_elevation_bins,
            "n_view_channels": self.n_view_channels,
            "max_cameras": self.max_cameras,
            "world_extent": self.world_extent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["bev_grid"] = tuple(d["bev_grid"])
        return cls(**d)


@dataclass(frozen=True)
class PartitionPolicy:
    scheme: str
    private_segments: frozenset

    @classmethod
    def from_scheme(cls, scheme: str) -> "PartitionPolicy":
        key = scheme.lower()
        if key not in SCHEME_PRIVATE_SEGMENTS:
            raise ValueError(f"unknown scheme {scheme!r}; "
                             f"expected one of {sorted(SCHEME_PRIVATE_SEGMENTS)}")
        return cls(scheme=key, private_segments=SCHEME_PRIVATE_SEGMENTS[key])


# ---------------------------------------------------------------------------
# Camera geometry: per-token ray features in the vehicle frame
# ---------------------------------------------------------------------------

def pose_rotation(roll_deg: float, pitch_deg: float, yaw_deg: float) -> np.ndarray:
    """Camera-to-vehicle rotation, composed as Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    r, p, y = (math.radians(a) for a in (roll_deg, pitch_deg, yaw_deg))
    cr, sr = math.cos(r), math.sin(r)
    cp, sp = math.cos(p), math.sin(p)
    cy, sy = math.cos(y), math.sin(y)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]], dtype=np.float64)
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]], dtype=np.float64)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]], dtype=np.float64)
    return rz @ ry @ rx


def camera_ray_directions(n_bins: int) -> np.ndarray:
    """Unit ray directions per azimuth bin in the camera's own frame, (A, 3)."""
    phis = np.radians(azimuth_bin_angles(n_bins))
    return np.stack([np.cos(phis), np.sin(phis), np.zeros_like(phis)], axis=1)


N_POS_FEATURES = 3


def ray_features(rig: CameraRig, n_bins: int) -> np.ndarray:
    """Per-token ray geometry in the vehicle frame, (L*A, 6).

    Each row is [vehicle-frame ray direction (3), camera translation (3)];
    the translation is the mount point (0, 0, height). The embedding MLP
    consumes only the direction columns: mount height is deliberately not an
    input, so a client's embedding parameters are the only place where that
    part of the calibration can live. Two rigs that differ only in height
    produce identical embedding inputs but differently distributed view
    features, which is what makes the embedding worth personalizing.
    """
    rows = []
    dirs_cam = camera_ray_directions(n_bins)
    for cam in rig.cameras:
        rot = pose_rotation(cam.roll, cam.pitch, cam.yaw)
        dirs_veh = dirs_cam @ rot.T
        t = np.array([0.0, 0.0, cam.height], dtype=np.float64)
        rows.append(np.hstack([dirs_veh, np.tile(t, (n_bins, 1))]))
    return np.vstack(rows)


N_CELL_FEATURES = 5


def cell_features(config: "ModelConfig") -> np.ndarray:
    """Fixed geometry of each BEV query cell, (n_cells, 5).

    Rows are [x/e, y/e, cos(bearing), sin(bearing), 1/(1+range)]; the
    inverse range lives on the same scale as the rendered distance channel,
    so a cell can compare its own range against retrieved hits directly.
    """
    h, w = config.bev_grid
    e = config.world_extent
    ys = -e + (np.arange(h) + 0.5) * (2.0 * e / h)
    xs = -e + (np.arange(w) + 0.5) * (2.0 * e / w)
    gx, gy = np.meshgrid(xs, ys)
    rng = np.hypot(gx, gy)
    safe = np.maximum(rng, 1e-12)
    cb = np.where(rng > 0, gx / safe, 0.0)
    sb = np.where(rng > 0, gy / safe, 0.0)
    feats = np.stack([gx / e, gy / e, cb, sb, 1.0 / (1.0 + rng)], axis=-1)
    return feats.reshape(-1, N_CELL_FEATURES)


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------

def _mlp_entries(prefix: str, dims: list) -> list:
    out = []
    for i in range(len(dims) - 1):
        out.append((f"{prefix}.w{i + 1}", (dims[i], dims[i + 1])))
        out.append((f"{prefix}.b{i + 1}", (dims[i + 1],)))
    return out


def build_layout(config: ModelConfig) -> dict:
    """Map segment name -> ordered list of (key, shape) arrays."""
    f = config.feat_dim
    layout = {
        "encoder": _mlp_entries("encoder", [config.token_dim, config.encoder_hidden, f]),
        "pos_embed": _mlp_entries("pos_embed",
                                  [N_POS_FEATURES, config.pos_hidden, f]),
        "bev_query": [("bev_query.q", (config.n_query_cells, f))],
        "attention": [],
        "refine": _mlp_entries("refine", [f, f, f]),
        "decoder": _mlp_entries("decoder", [f, config.decoder_hidden, 1]),
    }
    for layer in range(config.n_attn_layers):
        p = f"attention.l{layer}"
        layout["attention"] += [(f"{p}.wc", (N_CELL_FEATURES, f)),
                                (f"{p}.wq", (f, f)), (f"{p}.wk", (f, f)),
                                (f"{p}.wv", (f, f)), (f"{p}.wo", (f, f)),
                                (f"{p}.bo", (f,))]
    return layout


def init_params(config: ModelConfig, seed: int) -> ParamStore:
    """Deterministic init: Xavier-uniform weights, zero biases, query in +-0.1."""
    layout = build_layout(config)
    seg_sizes = [(name, sum(int(np.prod(shape)) for _, shape in layout[name]))
                 for name in SEGMENT_NAMES]
    store = ParamStore(seg_sizes)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), 77]))
    for name in SEGMENT_NAMES:
        offset = store.slice_of(name).start
        for key, shape in layout[name]:
            size = int(np.prod(shape))
            sl = slice(offset, offset + size)
            if key == "bev_query.q":
                store.values[sl] = rng.uniform(-0.1, 0.1, size)
            elif len(shape) == 2:
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                store.values[sl] = rng.uniform(-bound, bound, size)
            else:
                store.values[sl] = 0.0
            offset += size
    return store


def split_params(store: ParamStore, policy: PartitionPolicy):
    """Disjoint (public, private) flat-index views covering every parameter."""
    private = store.indices(policy.private_segments)
    public = store.indices([s.name for s in store.segments
                            if s.name not in policy.private_segments])
    return np.sort(public), np.sort(private)


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------

class ToyBevt:
    """Five-stage camera-to-BEV model over a ParamStore.

    forward() builds a fresh graph whose leaves wrap the store's current
    values; backward() scatters leaf gradients back into store.grads and,
    when a mask is given, zeroes the query-grid gradient rows of inactive
    cells.
    """

    def __init__(self, config: ModelConfig, params: ParamStore | None = None,
                 seed: int | None = None):
        self.config = config
        self.layout = build_layout(config)
        if params is None:
            params = init_params(config, 0 if seed is None else seed)
        expected = [(name, sum(int(np.prod(s)) for _, s in self.layout[name]))
                    for name in SEGMENT_NAMES]
        actual = [(s.name, s.length) for s in params.segments]
        if expected != actual:
            raise ValueError("ParamStore layout does not match model config")
        self.params = params
        self._offsets = {}
        for name in SEGMENT_NAMES:
            offset = params.slice_of(name).start
            for key, shape in self.layout[name]:
                size = int(np.prod(shape))
                self._offsets[key] = (slice(offset, offset + size), shape)
                offset += size
        self._leaves = []
        self._rig_cache = {}
        self._cell_features = cell_features(config)

    # -- parameter access ---------------------------------------------------

    def _leaf(self, key: str) -> Tensor:
        sl, shape = self._offsets[key]
        t = Tensor(self.params.values[sl].reshape(shape), requires_grad=True)
        self._leaves.append((sl, t))
        return t

    def _rig_geometry(self, rig: CameraRig):
        """(ray features, active-bin mask) for a rig, cached.

        Only bins inside a camera's field of view become attention tokens;
        the remaining bins never carry content and a real camera would not
        produce them at all.
        """
        cache_key = tuple((c.height, c.roll, c.pitch, c.yaw, c.fov_azimuth,
                           c.n_azimuth_bins) for c in rig.cameras)
        if cache_key not in self._rig_cache:
            rays = ray_features(rig, self.config.n_azimuth_bins)
            phis = azimuth_bin_angles(self.config.n_azimuth_bins)
            active = np.concatenate([np.abs(phis) <= c.fov_azimuth / 2.0
                                     for c in rig.cameras])
            if not active.any():
                raise ValueError("no azimuth bin falls inside any camera FoV")
            self._rig_cache[cache_key] = (rays, active)
        return self._rig_cache[cache_key]

    def _mlp(self, x: Tensor, prefix: str, n_layers: int = 2) -> Tensor:
        h = x
        for i in range(1, n_layers + 1):
            h = ad.affine(h, self._leaf(f"{prefix}.w{i}"),
                          self._leaf(f"{prefix}.b{i}"))
            if i < n_layers:
                h = ad.relu(h)
        return h

    # -- pipeline stages ----------------------------------------------------

    def positional_embedding(self, rig: CameraRig) -> Tensor:
        """Geometry tokens through the embedding MLP, (L, A, feat_dim)."""
        rays, _ = self._rig_geometry(rig)
        flat = self._mlp(ad.constant(rays[:, :N_POS_FEATURES]), "pos_embed")
        return ad.reshape(flat, (len(rig), self.config.n_azimuth_bins,
                                 self.config.feat_dim))

    def _pos_tokens(self, rig: CameraRig) -> Tensor:
        """Positional embedding for the active (in-FoV) bins only."""
        rays, active = self._rig_geometry(rig)
        geo = ad.constant(rays[active][:, :N_POS_FEATURES])
        return self._mlp(geo, "pos_embed")

    def forward(self, views: np.ndarray, rig: CameraRig,
                mask: np.ndarray | None = None) -> Tensor:
        """Per-cell logits over the BEV grid, shape bev_grid.

        The mask only gates the loss/metrics side; logits are produced for
        every cell so the output shape is rig-independent.
        """
        return self.forward_batch([views], rig, mask)[0]

    def forward_batch(self, views_list: list, rig: CameraRig,
                      mask: np.ndarray | None = None) -> list:
        """Logits for several data points of the same rig in one graph.

        The positional branch and all parameter leaves are shared across the
        batch, and the row-wise stages (encoder, refine, decoder) run on the
        stacked rows, so a batch costs far less than len(views_list)
        single-sample graphs.
        """
        cfg = self.config
        n_cams = views_list[0].shape[0]
        if n_cams > cfg.max_cameras:
            raise ValueError(f"rig has {n_cams} cameras, model allows "
                             f"{cfg.max_cameras}")
        if len(rig) != n_cams:
            raise ValueError("views and rig disagree on camera count")
        if mask is not None and mask.shape != cfg.bev_grid:
            raise ValueError("mask shape must equal bev_grid")

        _, active = self._rig_geometry(rig)
        n_cells = cfg.n_query_cells
        batch = len(views_list)
        stacked = np.concatenate(
            [v.reshape(len(active), cfg.token_dim)[active]
             for v in views_list], axis=0)
        enc_all = self._mlp(ad.constant(stacked), "encoder")
        pos = self._pos_tokens(rig)
        if batch > 1:
            pos = ad.tile_rows(pos, batch)
        tok = ad.layer_norm(ad.add(enc_all, pos))     # (batch*n_tok, f)

        q = self._leaf("bev_query.q")                 # shared until layer 1
        q_shared = True
        cellf = ad.constant(self._cell_features)
        for layer in range(cfg.n_attn_layers):
            p = f"attention.l{layer}"
            geo = ad.matmul(cellf, self._leaf(f"{p}.wc"))
            if not q_shared:
                geo = ad.tile_rows(geo, batch)
            q = ad.add(q, geo)      # anchor each query row to its cell
            qp = ad.matmul(q, self._leaf(f"{p}.wq"))
            kp = ad.matmul(tok, self._leaf(f"{p}.wk"))
            vp = ad.matmul(tok, self._leaf(f"{p}.wv"))
            attn = ad.batched_cross_attention(qp, kp, vp, cfg.n_heads, batch,
                                              q_shared=q_shared)
            attn = ad.affine(attn, self._leaf(f"{p}.wo"),
                             self._leaf(f"{p}.bo"))
            residual = (ad.tile_rows(q, batch)
                        if q_shared and batch > 1 else q)
            q = ad.layer_norm(ad.add(residual, attn))
            q_shared = False

        qs = ad.layer_norm(ad.add(q, self._mlp(q, "refine")))
        logits_all = self._mlp(qs, "decoder")
        if batch == 1:
            return [ad.reshape(logits_all, cfg.bev_grid)]
        return [ad.reshape(ad.slice_rows(logits_all, b * n_cells,
                                         (b + 1) * n_cells), cfg.bev_grid)
                for b in range(batch)]

    def loss(self, logits: Tensor, target: np.ndarray,
             mask: np.ndarray) -> Tensor:
        return ad.bce_with_logits(logits, target, mask)

    # -- gradient plumbing ---------------------------------------------------

    def zero_grads(self) -> None:
        self.params.zero_grads()
        self._leaves.clear()

    def backward(self, loss: Tensor, mask: np.ndarray | None = None) -> None:
        """Backprop and scatter gradients into params.grads.

        Accumulates across every forward() since the last zero_grads(), so a
        mean-of-losses batch works out of the box.
        """
        loss.backward()
        for sl, leaf in self._leaves:
            if leaf.grad is not None:
                self.params.grads[sl] += leaf.grad.ravel()
        self._leaves.clear()
        if mask is not None:
            qsl = self.params.slice_of("bev_query")
            g = self.params.grads[qsl].reshape(self.config.n_query_cells,
                                               self.config.feat_dim)
            self.params.grads[qsl] = apply_mask(g, mask).ravel()


# ---------------------------------------------------------------------------
# Checkpoints: JSON header + little-endian float64 payload
# ---------------------------------------------------------------------------

_CKPT_FORMAT = "camfed-checkpoint-v1"


def save_checkpoint(path, store: ParamStore, config: ModelConfig,
                    extra_arrays: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write the store plus named extra vectors in a self-describing file."""
    arrays = [("values", np.asarray(store.values, dtype=np.float64))]
    for name in sorted(extra_arrays or {}):
        arrays.append((name, np.asarray(extra_arrays[name], dtype=np.float64)))
    header = {
        "format": _CKPT_FORMAT,
        "segments": store.segment_table(),
        "config": config.to_dict(),
        "meta": meta or {},
        "arrays": [{"name": n, "length": int(a.size)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(a.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (ParamStore, ModelConfig, extras, meta)."""
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format") != _CKPT_FORMAT:
            raise ValueError("not a recognized checkpoint file")
        arrays = {}
        for spec in header["arrays"]:
            raw = fh.read(spec["length"] * 8)
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    config = ModelConfig.from_dict(header["config"])
    seg_sizes = [(name, length) for name, _, length in header["segments"]]
    store = ParamStore(seg_sizes, values=arrays.pop("values"))
    return store, config, arrays, header["meta"]
