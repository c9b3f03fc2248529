"""The hybrid fusion network.

One two-layer dense branch per feature kind maps its descriptor into a
shared space; active branch outputs are summed elementwise into the
signature; a shared trunk (two dense+ReLU layers and a sigmoid output)
scores the attributes. Branches and the trunk are separate parameter
groups that can be frozen individually.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import (DenseLayer, LayerGrad, ShapeError, dense_backward,
                 dense_forward, init_dense, make_rng, relu, sigmoid)

MODEL_MAGIC = b"HNET"
MODEL_VERSION = 1

# rng stream tags for parameter initialization
_TAG_BRANCH = 1
_TAG_TRUNK = 2


@dataclass(frozen=True)
class FeatureKind:
    id: int
    name: str
    input_dim: int


@dataclass
class BranchParams:
    layer1: DenseLayer  # input_dim -> h1
    layer2: DenseLayer  # h1 -> signature dim

    def layers(self) -> list[DenseLayer]:
        return [self.layer1, self.layer2]


@dataclass
class TrunkParams:
    layer3: DenseLayer  # s -> t1
    layer4: DenseLayer  # t1 -> t2
    out: DenseLayer     # t2 -> L

    def layers(self) -> list[DenseLayer]:
        return [self.layer3, self.layer4, self.out]


@dataclass(frozen=True)
class Profile:
    """Layer widths; `paper` matches the published table, `desk` runs in tests."""

    branch_hidden: int
    signature_dim: int
    trunk_hidden1: int
    trunk_hidden2: int
    n_outputs: int


PROFILES = {
    "paper": Profile(4096, 1024, 1024, 1024, 40),
    "desk": Profile(64, 32, 32, 32, 8),
}


@dataclass
class HybridNet:
    kinds: list[FeatureKind]
    branches: list[BranchParams]
    trunk: TrunkParams
    trainable: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.kinds) != len(self.branches):
            raise ShapeError("one branch required per feature kind")
        sdims = {b.layer2.out_dim for b in self.branches}
        if len(sdims) > 1:
            raise ShapeError(f"branch signature dims differ: {sorted(sdims)}")
        if not self.trainable:
            self.trainable = {g: True for g in self.group_ids()}

    @property
    def signature_dim(self) -> int:
        return self.trunk.layer3.in_dim

    @property
    def n_outputs(self) -> int:
        return self.trunk.out.out_dim

    def kind_names(self) -> list[str]:
        return [k.name for k in self.kinds]

    def kind_by_name(self, name: str) -> FeatureKind:
        for k in self.kinds:
            if k.name == name:
                return k
        raise KeyError(f"unknown feature kind {name!r}")

    def branch_for(self, name: str) -> BranchParams:
        return self.branches[self.kind_by_name(name).id]

    def group_ids(self) -> list[str]:
        return self.kind_names() + ["trunk"]

    def group_layers(self, group: str) -> list[DenseLayer]:
        if group == "trunk":
            return self.trunk.layers()
        return self.branch_for(group).layers()

    def copy(self) -> "HybridNet":
        return HybridNet(
            kinds=list(self.kinds),
            branches=[BranchParams(b.layer1.copy(), b.layer2.copy()) for b in self.branches],
            trunk=TrunkParams(*(l.copy() for l in self.trunk.layers())),
            trainable=dict(self.trainable),
        )


def build_net(kinds: list[tuple[str, int]], profile: Profile, seed: int) -> HybridNet:
    """Construct a freshly initialized net.

    Each branch draws from its own rng stream keyed by the kind id, so a
    branch's initialization does not depend on how many other kinds exist
    or in which order they were trained.
    """
    fkinds = [FeatureKind(i, name, dim) for i, (name, dim) in enumerate(kinds)]
    branches = [init_branch(k, profile, seed) for k in fkinds]
    rng = make_rng(seed, _TAG_TRUNK)
    trunk = TrunkParams(
        init_dense(profile.signature_dim, profile.trunk_hidden1, rng),
        init_dense(profile.trunk_hidden1, profile.trunk_hidden2, rng),
        init_dense(profile.trunk_hidden2, profile.n_outputs, rng),
    )
    return HybridNet(fkinds, branches, trunk)


def init_branch(kind: FeatureKind, profile: Profile, seed: int) -> BranchParams:
    rng = make_rng(seed, _TAG_BRANCH, kind.id)
    return BranchParams(
        init_dense(kind.input_dim, profile.branch_hidden, rng),
        init_dense(profile.branch_hidden, profile.signature_dim, rng),
    )


def add_branch(net: HybridNet, name: str, input_dim: int, profile: Profile,
               seed: int) -> HybridNet:
    """Graft a freshly initialized branch for a new feature kind onto an
    existing net; no other parameter group is touched."""
    if name in net.kind_names():
        raise ValueError(f"kind {name!r} already exists")
    if profile.signature_dim != net.signature_dim:
        raise ShapeError(f"profile signature dim {profile.signature_dim} does not "
                         f"match net signature dim {net.signature_dim}")
    kind = FeatureKind(len(net.kinds), name, input_dim)
    net.kinds.append(kind)
    net.branches.append(init_branch(kind, profile, seed))
    net.trainable[name] = True
    return net


def normalize_mask(mask, net: HybridNet) -> list[str]:
    """Validate a mask (iterable of kind names) and order it by kind id."""
    names = set(mask)
    if not names:
        raise ValueError("feature mask must be nonempty")
    known = set(net.kind_names())
    unknown = names - known
    if unknown:
        raise ValueError(f"mask references unknown kinds: {sorted(unknown)}")
    return [k.name for k in net.kinds if k.name in names]


def mask_to_bits(mask, net: HybridNet) -> int:
    bits = 0
    for name in normalize_mask(mask, net):
        bits |= 1 << net.kind_by_name(name).id
    return bits


def bits_to_mask(bits: int, net: HybridNet) -> list[str]:
    return [k.name for k in net.kinds if bits & (1 << k.id)]


def branch_forward(x: np.ndarray, branch: BranchParams) -> np.ndarray:
    """relu(dense2(relu(dense1(x)))); output is elementwise >= 0."""
    h1 = relu(dense_forward(x, branch.layer1))
    return relu(dense_forward(h1, branch.layer2))


def merge_sum(hs: list[np.ndarray]) -> np.ndarray:
    """Elementwise sum of branch outputs; the universal signature.

    Addends are accumulated in a canonical (byte-sorted) order so any
    permutation of the inputs yields a bit-identical result.
    """
    if not hs:
        raise ValueError("cannot merge an empty list of branch outputs")
    hs = [np.asarray(h, dtype=np.float64) for h in hs]
    dims = {h.shape[-1] for h in hs}
    if len(dims) > 1:
        raise ShapeError(f"branch output lengths differ: {sorted(dims)}")
    ordered = sorted(hs, key=lambda h: h.tobytes())
    total = ordered[0].copy()
    for h in ordered[1:]:
        total += h
    return total


def trunk_forward(sig: np.ndarray, trunk: TrunkParams) -> np.ndarray:
    """Shared layers: two dense+ReLU then the sigmoid output layer."""
    h3 = relu(dense_forward(sig, trunk.layer3))
    h4 = relu(dense_forward(h3, trunk.layer4))
    return sigmoid(dense_forward(h4, trunk.out))


def net_forward(features: dict, mask, net: HybridNet) -> tuple[np.ndarray, np.ndarray]:
    """Full forward pass for the kinds in `mask`; returns (signature, scores)."""
    active = normalize_mask(mask, net)
    missing = [k for k in active if k not in features]
    if missing:
        raise ValueError(f"mask kinds missing from feature map: {missing}")
    hs = [branch_forward(features[k], net.branch_for(k)) for k in active]
    sig = merge_sum(hs)
    return sig, trunk_forward(sig, net.trunk)


def net_backward(features: dict, mask, net: HybridNet,
                 labels: np.ndarray) -> tuple[dict[str, list[LayerGrad]], float]:
    """Gradients of the batch loss for every parameter group.

    The batch loss is the mean over examples of the summed-over-attributes
    BCE. Frozen groups and branches outside the mask get exact-zero
    gradients. Returns (grads by group id, loss).
    """
    active = normalize_mask(mask, net)
    labels = np.asarray(labels, dtype=np.float64)
    single = labels.ndim == 1
    y = labels[None, :] if single else labels
    n = y.shape[0]

    # forward with cached activations
    branch_acts = {}
    for name in active:
        b = net.branch_for(name)
        x = np.asarray(features[name], dtype=np.float64)
        if single and x.ndim == 1:
            x = x[None, :]
        h1 = relu(dense_forward(x, b.layer1))
        h2 = relu(dense_forward(h1, b.layer2))
        branch_acts[name] = (x, h1, h2)
    sig = merge_sum([branch_acts[k][2] for k in active])
    h3 = relu(dense_forward(sig, net.trunk.layer3))
    h4 = relu(dense_forward(h3, net.trunk.layer4))
    p = sigmoid(dense_forward(h4, net.trunk.out))

    from .nn import bce_loss_batch
    loss = bce_loss_batch(p, y)

    grads = {g: [LayerGrad.zeros_like(l) for l in net.group_layers(g)]
             for g in net.group_ids()}

    # sigmoid + BCE collapse to (p - y), scaled by the batch mean
    d_logits = (p - y) / n
    g_out, d_h4 = dense_backward(h4, net.trunk.out, d_logits)
    d_a4 = d_h4 * (h4 > 0)  # ReLU subgradient at 0 is 0
    g_l4, d_h3 = dense_backward(h3, net.trunk.layer4, d_a4)
    d_a3 = d_h3 * (h3 > 0)
    g_l3, d_sig = dense_backward(sig, net.trunk.layer3, d_a3)
    if net.trainable.get("trunk", True):
        grads["trunk"] = [g_l3, g_l4, g_out]

    # the merge distributes d_sig unchanged to every active branch
    for name in active:
        if not net.trainable.get(name, True):
            continue
        b = net.branch_for(name)
        x, h1, h2 = branch_acts[name]
        d_a2 = d_sig * (h2 > 0)
        g_l2, d_h1 = dense_backward(h1, b.layer2, d_a2)
        d_a1 = d_h1 * (h1 > 0)
        g_l1, _ = dense_backward(x, b.layer1, d_a1)
        grads[name] = [g_l1, g_l2]

    return grads, loss


def set_trainable(net: HybridNet, group: str, flag: bool) -> HybridNet:
    if group not in net.trainable:
        raise KeyError(f"unknown parameter group {group!r}")
    net.trainable[group] = bool(flag)
    return net


# ---------------------------------------------------------------------------
# serialization: magic "HNET", version u16, header (kind names and dims as
# length-prefixed UTF-8 plus u32 widths), then parameter groups in
# declaration order as little-endian float32 row-major matrices, each
# preceded by u32 row/col counts. Biases are written as 1-row matrices.
# ---------------------------------------------------------------------------

class ModelFormatError(ValueError):
    """Raised on malformed model files."""


def _write_str(buf, s: str):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ModelFormatError("truncated model file")
    return data


def _read_str(buf) -> str:
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    return _read_exact(buf, n).decode("utf-8")


def _write_matrix(buf, m: np.ndarray):
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    buf.write(struct.pack("<II", m.shape[0], m.shape[1]))
    buf.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def _read_matrix(buf) -> np.ndarray:
    rows, cols = struct.unpack("<II", _read_exact(buf, 8))
    if rows * cols > 1 << 28:
        raise ModelFormatError(f"matrix {rows}x{cols} exceeds size limit")
    data = np.frombuffer(_read_exact(buf, 4 * rows * cols), dtype="<f4")
    return data.astype(np.float64).reshape(rows, cols)


def _write_layer(buf, layer: DenseLayer):
    _write_matrix(buf, layer.weights)
    _write_matrix(buf, layer.bias)


def _read_layer(buf) -> DenseLayer:
    w = _read_matrix(buf)
    b = _read_matrix(buf)
    if b.shape[0] != 1:
        raise ModelFormatError("bias must be a single row")
    return DenseLayer(w, b[0])


def model_to_bytes(net: HybridNet) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<H", MODEL_VERSION))
    buf.write(struct.pack("<I", len(net.kinds)))
    for k in net.kinds:
        _write_str(buf, k.name)
        buf.write(struct.pack("<I", k.input_dim))
    for group in net.group_ids():
        for layer in net.group_layers(group):
            _write_layer(buf, layer)
    return buf.getvalue()


def group_bytes(net: HybridNet, group: str) -> bytes:
    """Serialized float32 bytes of one parameter group, for byte comparison."""
    buf = io.BytesIO()
    for layer in net.group_layers(group):
        _write_layer(buf, layer)
    return buf.getvalue()


def model_from_bytes(data: bytes) -> HybridNet:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != MODEL_MAGIC:
        raise ModelFormatError("bad model magic")
    (version,) = struct.unpack("<H", _read_exact(buf, 2))
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    (n_kinds,) = struct.unpack("<I", _read_exact(buf, 4))
    kinds = []
    for i in range(n_kinds):
        name = _read_str(buf)
        (dim,) = struct.unpack("<I", _read_exact(buf, 4))
        kinds.append(FeatureKind(i, name, dim))
    branches = [BranchParams(_read_layer(buf), _read_layer(buf)) for _ in kinds]
    trunk = TrunkParams(_read_layer(buf), _read_layer(buf), _read_layer(buf))
    if buf.read(1):
        raise ModelFormatError("trailing bytes after model data")
    return HybridNet(kinds, branches, trunk)


def save_model(net: HybridNet, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(net))


def load_model(path) -> HybridNet:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
