"""Encoders, flow decoder, pose head, discriminator and training losses.

All networks are channels-last graphs on the tensor engine. Parameter names
carry a group prefix (``rgb/``, ``ev/``, ``dec/``, ``pose/``, ``disc/``) so the
training loop can choose which groups an optimizer owns.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .rng import sub_rng
from .tensor import Graph, Node, Tensor

GROUPS = ("rgb", "ev", "dec", "pose", "disc")
ROLES = ("discriminator", "generator")


class ModelError(ValueError):
    pass


class ArchitectureMismatch(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    joints: int = 21
    channels: tuple = (8, 16, 32, 32)
    app_dim: int = 32
    motion_dim: int = 16
    dec_channels: tuple = (16, 8)
    pose_hidden: int = 64
    disc_hidden: int = 32
    # pose head output is multiplied by this many millimetres
    pose_scale: float = 10.0
    flow_cap: float | None = None

    @property
    def feat_hw(self) -> tuple[int, int]:
        return self.height // 8, self.width // 8

    @property
    def cap(self) -> float:
        return self.height / 4.0 if self.flow_cap is None else float(self.flow_cap)

    def validate(self) -> None:
        if self.height % 8 or self.width % 8 or self.height < 16:
            raise ModelError("height and width must be multiples of 8 and >= 16")
        if len(self.channels) != 4 or len(self.dec_channels) != 2:
            raise ModelError("expected 4 encoder and 2 hidden decoder channel counts")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["dec_channels"] = list(self.dec_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ModelError(f"unknown model config keys {sorted(set(d) - known)}")
        d = dict(d)
        for k in ("channels", "dec_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class FeatureBundle:
    f: np.ndarray                 # (B, h, w, app_dim)
    f_bar: np.ndarray             # (B, app_dim), pooled and l2-normalized
    z: np.ndarray | None = None   # (B, h, w, motion_dim)
    z_bar: np.ndarray | None = None


# -- parameters ----------------------------------------------------------------


def _conv_init(rng, k, cin, cout, gain=np.sqrt(2.0)):
    std = gain / np.sqrt(k * k * cin)
    return rng.normal(scale=std, size=(k, k, cin, cout))


def _dense_init(rng, din, dout, gain=np.sqrt(2.0)):
    return rng.normal(scale=gain / np.sqrt(din), size=(din, dout))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def group(self, *groups: str) -> list[Tensor]:
        return [t for n, t in self.tensors.items() if n.split("/")[0] in groups]

    def names(self, *groups: str) -> list[str]:
        return [n for n in self.tensors if n.split("/")[0] in groups]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()})


def init_params(cfg: ModelConfig, seed: int, mean_pose: np.ndarray | None = None) -> ModelParams:
    """He-normal weights and zero biases, except the feature heads whose small
    random biases keep pooled features away from the zero vector. ``mean_pose`` (J x 3, root-centred) sets
    the pose head's output bias so an untrained head predicts the mean hand."""
    cfg.validate()
    rng = sub_rng(seed, "init")
    t: dict[str, np.ndarray] = {}

    def trunk(prefix, cin):
        c = cfg.channels
        for i, (a, b) in enumerate(zip((cin,) + tuple(c[:-1]), c)):
            t[f"{prefix}/conv{i}/w"] = _conv_init(rng, 3, a, b)
            t[f"{prefix}/conv{i}/b"] = np.zeros(b)

    trunk("rgb", 3 + 2)
    t["rgb/app/w"] = _conv_init(rng, 1, cfg.channels[-1], cfg.app_dim, gain=1.0)
    t["rgb/app/b"] = rng.normal(scale=0.1, size=cfg.app_dim)
    trunk("ev", 2 + 2)
    t["ev/app/w"] = _conv_init(rng, 1, cfg.channels[-1], cfg.app_dim, gain=1.0)
    t["ev/app/b"] = rng.normal(scale=0.1, size=cfg.app_dim)
    t["ev/motion/w"] = _conv_init(rng, 1, cfg.channels[-1], cfg.motion_dim, gain=1.0)
    t["ev/motion/b"] = rng.normal(scale=0.1, size=cfg.motion_dim)

    d0, d1 = cfg.dec_channels
    for i, (a, b) in enumerate(zip((cfg.app_dim + cfg.motion_dim, d0, d1), (d0, d1, 2))):
        gain = 0.1 if b == 2 else np.sqrt(2.0)
        t[f"dec/conv{i}/w"] = _conv_init(rng, 3, a, b, gain=gain)
        t[f"dec/conv{i}/b"] = np.zeros(b)

    dims = (cfg.app_dim, cfg.pose_hidden, cfg.pose_hidden, cfg.joints * 3)
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        t[f"pose/fc{i}/w"] = _dense_init(rng, a, b, gain=np.sqrt(2.0) if i < 2 else 0.1)
        t[f"pose/fc{i}/b"] = np.zeros(b)
    if mean_pose is not None:
        t["pose/fc2/b"] = np.asarray(mean_pose, dtype=np.float64).reshape(-1) / cfg.pose_scale

    t["disc/fc0/w"] = _dense_init(rng, cfg.app_dim, cfg.disc_hidden)
    t["disc/fc0/b"] = np.zeros(cfg.disc_hidden)
    t["disc/fc1/w"] = _dense_init(rng, cfg.disc_hidden, 1, gain=1.0)
    t["disc/fc1/b"] = np.zeros(1)
    return ModelParams(cfg, {n: Tensor(v, requires_grad=True, name=n) for n, v in t.items()})


# -- network builders ------------------------------------------------------------


class Net:
    """Graph builders bound to one parameter set."""

    def __init__(self, g: Graph, params: ModelParams):
        self.g, self.p, self.cfg = g, params, params.config
        self._coord = None

    def _w(self, name: str) -> Node:
        return self.g.param(self.p[name], name)

    def _conv(self, x, prefix, stride=1, act=True):
        w = self.p[f"{prefix}/w"]
        k = w.data.shape[0]
        y = self.g.add(self.g.correlate2d(x, self._w(f"{prefix}/w"), stride=stride, pad=k // 2), self._w(f"{prefix}/b"))
        return self.g.leaky_relu(y) if act else y

    def _dense(self, x, prefix, act=True):
        y = self.g.add(self.g.matmul(x, self._w(f"{prefix}/w")), self._w(f"{prefix}/b"))
        return self.g.leaky_relu(y) if act else y

    def _coords(self, x: Node, cin: int) -> Node:
        """Append fixed x/y ramps in [-1, 1] as two extra channels, so that
        pooled features can still tell where in the frame something is."""
        g, (h, w) = self.g, (self.cfg.height, self.cfg.width)
        if self._coord is None:
            yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
            self._coord = g.constant(np.stack([xx, yy], axis=-1))
        # zero matmul gives a (B, H, W, 2) zero map to broadcast the ramps onto
        zero = g.constant(np.zeros((cin, 2)))
        return g.concat([x, g.add(g.matmul(x, zero), self._coord)], axis=-1)

    def _trunk(self, x, prefix):
        x = self._coords(x, 3 if prefix == "rgb" else 2)
        for i in range(3):
            x = self._conv(x, f"{prefix}/conv{i}", stride=2)
        return self._conv(x, f"{prefix}/conv3", stride=1)

    def encode_rgb(self, img: Node) -> Node:
        """(B, H, W, 3) -> appearance map (B, H/8, W/8, app_dim)."""
        return self._conv(self._trunk(img, "rgb"), "rgb/app", act=False)

    def encode_event(self, hist: Node, scaled: bool = False) -> tuple[Node, Node]:
        """(B, H, W, 2) counts -> (appearance map, motion map). Counts go
        through log1p unless ``scaled``."""
        x = hist if scaled else self.g.log1p(hist)
        h = self._trunk(x, "ev")
        return self._conv(h, "ev/app", act=False), self._conv(h, "ev/motion", act=False)

    def decode_flow(self, f: Node, z: Node) -> Node:
        """Flow (B, H, W, 2) from appearance and motion maps, each component
        softly clamped so the magnitude never exceeds the cap."""
        g = self.g
        x = g.concat([f, z], axis=-1)
        for i in range(3):
            x = self._conv(g.upsample2x(x), f"dec/conv{i}", act=i < 2)
        s = self.cfg.cap / np.sqrt(2.0)
        return g.multiply(g.tanh(g.multiply(x, g.constant(1.0 / s))), g.constant(s))

    def pooled(self, fmap: Node) -> Node:
        return self.g.global_avg_pool(fmap)

    def normalized(self, fmap: Node) -> Node:
        return self.g.l2_normalize(self.g.global_avg_pool(fmap))

    def predict_pose(self, f_bar: Node) -> Node:
        """Pooled appearance (B, app_dim) -> joints (B, J, 3), mm."""
        x = self._dense(f_bar, "pose/fc0")
        x = self._dense(x, "pose/fc1")
        x = self._dense(x, "pose/fc2", act=False)
        x = self.g.multiply(x, self.g.constant(self.cfg.pose_scale))
        return self.g.reshape(x, (-1, self.cfg.joints, 3))

    def discriminate(self, v: Node) -> Node:
        """Normalized pooled appearance (B, app_dim) -> (B, 1) in (0, 1)."""
        return self.g.sigmoid(self._dense(self._dense(v, "disc/fc0"), "disc/fc1", act=False))


# -- losses --------------------------------------------------------------------


def centering_matrix(joints: int) -> np.ndarray:
    """(J-1) x J matrix mapping joints to their offsets from joint 0."""
    m = np.zeros((joints - 1, joints))
    m[:, 0] = -1.0
    m[np.arange(joints - 1), np.arange(1, joints)] = 1.0
    return m


def pose_loss(g: Graph, pred: Node, gt: Node, joints: int = 21) -> Node:
    """Smooth-L1 (delta 1 mm) on root-relative coordinates, averaged over the
    non-root joints, their coordinates and the batch."""
    cm = g.constant(centering_matrix(joints))
    d = g.subtract(g.matmul(cm, pred), g.matmul(cm, gt))
    a = g.add(g.relu(d), g.relu(g.multiply(d, g.constant(-1.0))))
    over = g.relu(g.subtract(a, g.constant(1.0)))
    m = g.subtract(a, over)  # min(|d|, 1)
    return g.mean(g.add(g.multiply(g.multiply(m, m), g.constant(0.5)), over))


def divergence_loss(g: Graph, a: Node, b: Node) -> Node:
    """Mean cosine similarity; minimizing pushes the pair apart."""
    return g.mean(g.cosine_similarity(a, b))


def alignment_loss(g: Graph, a: Node, b: Node) -> Node:
    """Mean cosine distance 1 - cos, in [0, 2]."""
    return g.subtract(g.constant(1.0), g.mean(g.cosine_similarity(a, b)))


def adversarial_loss(g: Graph, d_rgb: Node | None, d_ev: Node, role: str) -> Node:
    """Least-squares objective on discriminator outputs: RGB features are
    labelled 1 and event features 0 for the discriminator, and the generator
    tries to make event features score 1."""
    if role not in ROLES:
        raise ModelError(f"role must be one of {ROLES}")
    one = g.constant(1.0)
    if role == "generator":
        e = g.subtract(d_ev, one)
        return g.mean(g.multiply(e, e))
    if d_rgb is None:
        raise ModelError("discriminator role needs RGB scores")
    r = g.subtract(d_rgb, one)
    return g.add(g.mean(g.multiply(r, r)), g.mean(g.multiply(d_ev, d_ev)))


# -- eager wrappers -----------------------------------------------------------------


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    return x, False


def _check_hw(params: ModelParams, x: np.ndarray, channels: int) -> None:
    cfg = params.config
    if x.ndim != 4 or x.shape[1:] != (cfg.height, cfg.width, channels):
        raise ModelError(f"expected (B, {cfg.height}, {cfg.width}, {channels}) input, got {x.shape}")


def encode_rgb(params: ModelParams, img: np.ndarray) -> FeatureBundle:
    x, single = _as_batch(img, 4)
    _check_hw(params, x, 3)
    g = Graph()
    net = Net(g, params)
    f = net.encode_rgb(g.input("img"))
    fb = net.normalized(f)
    g.run({"img": x})
    out = FeatureBundle(g.value(f), g.value(fb))
    if single:
        out = FeatureBundle(out.f[0], out.f_bar[0])
    return out


def encode_event(params: ModelParams, hist: np.ndarray) -> FeatureBundle:
    x, single = _as_batch(hist, 4)
    _check_hw(params, x, 2)
    g = Graph()
    net = Net(g, params)
    f, z = net.encode_event(g.input("hist"))
    fb, zb = net.normalized(f), net.normalized(z)
    g.run({"hist": x})
    vals = [g.value(n) for n in (f, fb, z, zb)]
    if single:
        vals = [v[0] for v in vals]
    return FeatureBundle(vals[0], vals[1], vals[2], vals[3])


def decode_flow(params: ModelParams, f: np.ndarray, z: np.ndarray) -> np.ndarray:
    cfg = params.config
    f, single = _as_batch(f, 4)
    z, _ = _as_batch(z, 4)
    h, w = cfg.feat_hw
    if f.shape[1:] != (h, w, cfg.app_dim) or z.shape[1:] != (h, w, cfg.motion_dim) or len(f) != len(z):
        raise ModelError(f"expected ({h}, {w}, {cfg.app_dim}) and ({h}, {w}, {cfg.motion_dim}) maps, got {f.shape} and {z.shape}")
    g = Graph()
    v = Net(g, params).decode_flow(g.input("f"), g.input("z"))
    g.run({"f": f, "z": z})
    out = g.value(v)
    return out[0] if single else out


def predict_pose(params: ModelParams, f_bar: np.ndarray) -> np.ndarray:
    cfg = params.config
    x, single = _as_batch(f_bar, 2)
    if x.shape[1:] != (cfg.app_dim,):
        raise ModelError(f"expected pooled vectors of size {cfg.app_dim}, got {x.shape}")
    g = Graph()
    p = Net(g, params).predict_pose(g.input("f"))
    g.run({"f": x})
    out = g.value(p)
    return out[0] if single else out


def _unit_pair(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ModelError(f"vector shapes differ: {a.shape} vs {b.shape}")
    if (np.linalg.norm(a, axis=-1) == 0).any() or (np.linalg.norm(b, axis=-1) == 0).any():
        raise ModelError("zero-norm vector in a cosine loss")
    return a, b


def _scalar(build, **inputs) -> float:
    g = Graph()
    nodes = {k: g.input(k) for k in inputs}
    out = build(g, **nodes)
    g.run(inputs)
    return float(g.value(out)[0])


def loss_pose(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, _ = _as_batch(pred, 3)
    gt, _ = _as_batch(gt, 3)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ModelError(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    return _scalar(lambda g, p, q: pose_loss(g, p, q, pred.shape[1]), p=pred, q=gt)


def loss_divergence(z: np.ndarray, z_rev: np.ndarray) -> float:
    a, b = _unit_pair(z, z_rev)
    return _scalar(divergence_loss, a=a, b=b)


def loss_alignment(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _unit_pair(a, b)
    return _scalar(alignment_loss, a=a, b=b)


def loss_adversarial(params: ModelParams, f_rgb_bar: np.ndarray, f_ev_bar: np.ndarray, role: str) -> float:
    f_rgb_bar = np.atleast_2d(f_rgb_bar)
    f_ev_bar = np.atleast_2d(f_ev_bar)
    if len(f_ev_bar) == 0 or (role == "discriminator" and len(f_rgb_bar) == 0):
        raise ModelError("empty batch")
    g = Graph()
    net = Net(g, params)
    d_ev = net.discriminate(g.input("ev"))
    d_rgb = net.discriminate(g.input("rgb")) if role == "discriminator" else None
    loss = adversarial_loss(g, d_rgb, d_ev, role)
    binds = {"ev": f_ev_bar}
    if d_rgb is not None:
        binds["rgb"] = f_rgb_bar
    g.run(binds)
    return float(g.value(loss)[0])


# -- checkpoints -------------------------------------------------------------------


def sidecar_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_checkpoint(path: str | Path, params: ModelParams, meta: dict | None = None, extra: dict | None = None) -> None:
    """Parameters (plus optional extra arrays, e.g. optimizer moments) in the
    bundle format, with the architecture in the header and in a JSON sidecar."""
    arch = params.config.to_dict()
    arrays = {f"param/{n}": v for n, v in params.arrays().items()}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = v
    header = {"architecture": arch, **(meta or {})}
    io.write_bundle(path, arrays, header)
    sidecar_path(path).write_text(json.dumps({"architecture": arch, **(meta or {})}, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> tuple[ModelParams, dict, dict]:
    """Returns (params, metadata header, extra arrays)."""
    arrays, header = io.read_bundle(path)
    cfg = ModelConfig.from_dict(header["architecture"])
    if expect is not None and expect != cfg:
        raise ArchitectureMismatch(f"checkpoint architecture {cfg} does not match {expect}")
    ref = init_params(cfg, 0)
    tensors = {}
    for name, t in ref.tensors.items():
        key = f"param/{name}"
        if key not in arrays or arrays[key].shape != t.data.shape:
            raise ArchitectureMismatch(f"checkpoint lacks parameter {name} of shape {t.data.shape}")
        tensors[name] = Tensor(arrays[key], requires_grad=True, name=name)
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return ModelParams(cfg, tensors), header, extra
