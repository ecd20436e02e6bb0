"""Assembly of the hireability network and its adversarial heads.

The base network encodes each requested modality with a bidirectional
GRU plus additive attention, fuses the pooled vectors through a gated
multimodal unit (multimodal mode only), and runs a two-layer tanh trunk
whose output H feeds a sigmoid hireability unit.

Adversarial heads read H (through a gradient reversal node during joint
training):

  supervised-gender     sigmoid unit over a 30-wide sigmoid hidden layer
  supervised-ethnicity  3-way softmax over the same hidden layer
  static-faces          two stacked affine maps onto a q-dim face code
  negative-sampling     similarity scores of H against k candidate faces
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .autodiff import Node
from .errors import ContractError

MODALITIES = ("language", "audio", "video")
VARIANTS = ("unprotected", "supervised-gender", "supervised-ethnicity",
            "static-faces", "negative-sampling")


@dataclass
class ModelDims:
    input_dims: dict = field(default_factory=lambda: {"language": 16, "audio": 20, "video": 12})
    gru_width: int = 16        # total bidirectional output width (8 per direction)
    att_proj: int = 30
    trunk_width: int = 16
    adv_hidden: int = 30       # supervised / static-faces hidden width
    ns_hidden: int = 32        # negative-sampling interview-encoder hidden width
    face_raw: int = 512


@dataclass
class ForwardResult:
    H: Node
    y_hat: Node
    alphas: dict
    o_mm: Node
    gates: dict | None
    contributions: dict | None


@dataclass
class NegativeSamplingBatch:
    """k face vectors per anchor with the index of the true candidate."""
    faces: np.ndarray          # (B, k, face_raw)
    positive_index: np.ndarray  # (B,) ints

    def __post_init__(self):
        if self.faces.shape[1] < 2:
            raise ContractError(f"negative sampling needs k >= 2, got k={self.faces.shape[1]}")


class HireabilityModel:
    """One trainable network: trunk + hireability head + optional adversary."""

    def __init__(self, modality: str = "multimodal", variant: str = "unprotected",
                 dims: ModelDims | None = None, q: int = 2, k: int = 5, seed: int = 0):
        if modality not in MODALITIES + ("multimodal",):
            raise ContractError(f"unknown modality {modality!r}")
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}")
        if q not in (2, 16):
            raise ContractError(f"face dimension q must be 2 or 16, got {q}")
        self.modality = modality
        self.variant = variant
        self.dims = dims or ModelDims()
        self.q = q
        self.k = k
        self.seed = seed
        self.trained = False
        self.params: dict[str, Node] = {}
        rng = np.random.default_rng(seed)
        self._build_trunk(rng)
        self._build_adversary(rng)

    # ------------------------------------------------------------- building

    @property
    def active_modalities(self) -> tuple[str, ...]:
        return MODALITIES if self.modality == "multimodal" else (self.modality,)

    def _register(self, prefix: str, obj) -> None:
        for fname, node in vars(obj).items():
            if isinstance(node, Node):
                self.params[f"{prefix}{fname}" if prefix else fname] = node

    def _build_trunk(self, rng) -> None:
        d = self.dims
        half = d.gru_width // 2
        self.encoders = {}
        self.attentions = {}
        for m in self.active_modalities:
            fwd = ly.init_gru(rng, half, d.input_dims[m])
            bwd = ly.init_gru(rng, half, d.input_dims[m])
            att = ly.init_attention(rng, d.att_proj, d.gru_width)
            self.encoders[m] = (fwd, bwd)
            self.attentions[m] = att
            self._register(f"{m}.gru_fwd.", fwd)
            self._register(f"{m}.gru_bwd.", bwd)
            self._register(f"{m}.att.", att)
        self.gmu = None
        if self.modality == "multimodal":
            self.gmu = ly.init_gmu(rng, d.gru_width)
            self._register("gmu.", self.gmu)
        self.trunk1 = ly.init_dense(rng, d.trunk_width, d.gru_width, "tanh")
        self.trunk2 = ly.init_dense(rng, d.trunk_width, d.trunk_width, "tanh")
        self.hire_head = ly.init_dense(rng, 1, d.trunk_width, "sigmoid")
        self.params.update({"W_1": self.trunk1.W, "b_1": self.trunk1.b,
                            "W_2": self.trunk2.W, "b_2": self.trunk2.b,
                            "W_v": self.hire_head.W, "b_v": self.hire_head.b})

    def _init_adversary_params(self, rng) -> dict[str, np.ndarray]:
        """Fresh adversarial weights for the current variant."""
        d = self.dims
        g = lambda o, i: ly.glorot(rng, o, i)
        z = lambda n: np.zeros(n)
        if self.variant in ("supervised-gender", "supervised-ethnicity"):
            out = 1 if self.variant == "supervised-gender" else 3
            return {"W_3": g(d.adv_hidden, d.trunk_width), "b_3": z(d.adv_hidden),
                    "W_4": g(out, d.adv_hidden), "b_4": z(out)}
        if self.variant == "static-faces":
            return {"W_5": g(d.adv_hidden, d.trunk_width), "b_5": z(d.adv_hidden),
                    "W_6": g(self.q, d.adv_hidden), "b_6": z(self.q)}
        if self.variant == "negative-sampling":
            return {"W_7": g(self.q, d.face_raw), "b_7": z(self.q),
                    "W_8": g(d.ns_hidden, d.trunk_width), "b_8": z(d.ns_hidden),
                    "W_9": g(self.q, d.ns_hidden), "b_9": z(self.q),
                    "W_10": g(1, self.q), "b_10": z(1)}
        return {}

    def _build_adversary(self, rng) -> None:
        for name, value in self._init_adversary_params(rng).items():
            self.params[name] = ad.parameter(value)

    def reinit_adversary(self, seed: int) -> None:
        """Overwrite adversarial weights with a fresh seeded draw, in place."""
        fresh = self._init_adversary_params(np.random.default_rng(seed))
        for name, value in fresh.items():
            node = self.params[name]
            node.value[...] = value
            node.zero_grad()

    # ---------------------------------------------------------- partitions

    def theta_h(self) -> dict[str, Node]:
        head = {"W_v", "b_v"}
        adv = set(self._adversary_names())
        return {n: p for n, p in self.params.items() if n not in head and n not in adv}

    def theta_d(self) -> dict[str, Node]:
        return {"W_v": self.params["W_v"], "b_v": self.params["b_v"]}

    def theta_a(self) -> dict[str, Node]:
        return {n: self.params[n] for n in self._adversary_names()}

    def _adversary_names(self) -> list[str]:
        groups = {"supervised-gender": ("W_3", "b_3", "W_4", "b_4"),
                  "supervised-ethnicity": ("W_3", "b_3", "W_4", "b_4"),
                  "static-faces": ("W_5", "b_5", "W_6", "b_6"),
                  "negative-sampling": ("W_7", "b_7", "W_8", "b_8",
                                        "W_9", "b_9", "W_10", "b_10")}
        return list(groups.get(self.variant, ()))

    # ------------------------------------------------------------- forward

    def forward_base(self, batch: dict, training: bool = False,
                     rng: np.random.Generator | None = None,
                     dropout_rate: float = 0.0) -> ForwardResult:
        """Run the trunk on a batch of per-modality (B, T, d) arrays."""
        pooled = {}
        alphas = {}
        for m in self.active_modalities:
            if m not in batch or batch[m] is None:
                raise ContractError(f"forward_base: missing modality {m!r}")
            x = np.asarray(batch[m], dtype=np.float64)
            if x.ndim != 3 or x.shape[1] < 1:
                raise ContractError(f"forward_base: modality {m!r} needs a (B, T>=1, d) array")
            fwd, bwd = self.encoders[m]
            z = ly.bigru_encode(fwd, bwd, ad.constant(x))
            pooled[m], alphas[m] = ly.attention_pool(self.attentions[m], z)
        gates = contributions = None
        if self.modality == "multimodal":
            o_mm, gates, contributions = ly.gmu_fuse(
                self.gmu, pooled["audio"], pooled["language"], pooled["video"])
        else:
            o_mm = pooled[self.modality]
        x1 = ly.dropout(o_mm, dropout_rate, training, rng)
        h1 = ly.dense_forward(self.trunk1, x1)
        h1 = ly.dropout(h1, dropout_rate, training, rng)
        H = ly.dense_forward(self.trunk2, h1)
        y = ly.dense_forward(self.hire_head, H)
        y_hat = ad.reshape(y, (y.value.shape[0],))
        return ForwardResult(H=H, y_hat=y_hat, alphas=alphas, o_mm=o_mm,
                             gates=gates, contributions=contributions)

    # --------------------------------------------------------------- heads

    def head_supervised(self, H) -> Node:
        """Protected-class prediction: (B,) sigmoid for gender, (B, 3) softmax
        for ethnicity, over a shared sigmoid hidden layer."""
        hidden = ad.sigmoid(ad.add(ad.matmul(H, ad.transpose(self.params["W_3"])),
                                   self.params["b_3"]))
        logits = ad.add(ad.matmul(hidden, ad.transpose(self.params["W_4"])), self.params["b_4"])
        if self.variant == "supervised-gender":
            return ad.reshape(ad.sigmoid(logits), (logits.value.shape[0],))
        return ad.softmax(logits)

    def head_static_faces(self, H) -> Node:
        """Two stacked affine maps, no nonlinearity: W_6 (W_5 H + b_5) + b_6."""
        inner = ad.add(ad.matmul(H, ad.transpose(self.params["W_5"])), self.params["b_5"])
        return ad.add(ad.matmul(inner, ad.transpose(self.params["W_6"])), self.params["b_6"])

    def head_negative_sampling(self, H, batch: NegativeSamplingBatch) -> tuple[Node, Node]:
        """Score H against k faces; returns (scores, p) of shape (B, k).

        Faces are encoded by tanh(W_7 w + b_7), the interview by
        tanh(W_9 (W_8 H + b_8) + b_9); their Hadamard product plus a scalar
        bias feeds the scoring row W_10.
        """
        faces = np.asarray(batch.faces, dtype=np.float64)
        B, k, fd = faces.shape
        flat = ad.constant(faces.reshape(B * k, fd))
        w_hat = ad.tanh(ad.add(ad.matmul(flat, ad.transpose(self.params["W_7"])),
                               self.params["b_7"]))
        w_hat = ad.reshape(w_hat, (B, k, self.q))
        inner = ad.add(ad.matmul(H, ad.transpose(self.params["W_8"])), self.params["b_8"])
        h_hat = ad.tanh(ad.add(ad.matmul(inner, ad.transpose(self.params["W_9"])),
                               self.params["b_9"]))
        prod = ad.add(ad.mul(w_hat, ad.reshape(h_hat, (B, 1, self.q))), self.params["b_10"])
        scores = ad.reshape(ad.matmul(ad.reshape(prod, (B * k, self.q)),
                                      ad.transpose(self.params["W_10"])), (B, k))
        return scores, ad.softmax(scores)

    # ------------------------------------------------------------ snapshot

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        names = self.params.keys() if names is None else names
        return {n: self.params[n].value.copy() for n in names}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, v in snap.items():
            self.params[n].value[...] = v


# -------------------------------------------------------------- inference

def batch_sequences(samples, modalities) -> dict[str, np.ndarray]:
    """Stack per-sample sequences into (B, T, d) arrays."""
    return {m: np.stack([np.asarray(getattr(s, f"seq_{m}"), dtype=np.float64)
                         for s in samples]) for m in modalities}


def predict(model: HireabilityModel, samples, chunk: int = 512):
    """Inference-mode H and y_hat over a sample list (no dropout)."""
    hs, ys = [], []
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        res = model.forward_base(batch_sequences(part, model.active_modalities))
        hs.append(res.H.value)
        ys.append(res.y_hat.value)
    return np.concatenate(hs), np.concatenate(ys)


def modality_contributions(model: HireabilityModel, samples, chunk: int = 512):
    """Per-sample L2 norms of the gated modality vectors, plus summaries.

    Returns (norms, summary): norms maps modality -> (n,) array, summary
    maps modality -> dict with mean and quartiles.
    """
    if model.modality != "multimodal":
        raise ContractError("modality contributions require a multimodal model")
    per_mod = {m: [] for m in MODALITIES}
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        res = model.forward_base(batch_sequences(part, MODALITIES))
        for m in MODALITIES:
            per_mod[m].append(np.linalg.norm(res.contributions[m].value, axis=-1))
    norms = {m: np.concatenate(v) for m, v in per_mod.items()}
    summary = {m: {"mean": float(n.mean()),
                   "q25": float(np.quantile(n, 0.25)),
                   "median": float(np.quantile(n, 0.5)),
                   "q75": float(np.quantile(n, 0.75))}
               for m, n in norms.items()}
    return norms, summary


# ------------------------------------------------------------- persistence

def save_model(model: HireabilityModel, path) -> None:
    """Serialize to JSON with hex-float payloads (bit-exact round trip)."""
    doc = {
        "format": "fairavi-model-v1",
        "modality": model.modality,
        "variant": model.variant,
        "q": model.q,
        "k": model.k,
        "trained": model.trained,
        "dims": asdict(model.dims),
        "params": {name: {"shape": list(node.value.shape),
                          "data": [v.hex() for v in node.value.ravel().tolist()]}
                   for name, node in sorted(model.params.items())},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> HireabilityModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "fairavi-model-v1":
        raise ContractError(f"{path}: not a recognized model file")
    dims = ModelDims(**doc["dims"])
    model = HireabilityModel(doc["modality"], doc["variant"], dims,
                             q=doc["q"], k=doc["k"], seed=0)
    model.trained = bool(doc.get("trained", False))
    stored = doc["params"]
    if set(stored) != set(model.params):
        missing = set(model.params) - set(stored)
        extra = set(stored) - set(model.params)
        raise ContractError(f"{path}: parameter names mismatch "
                            f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, entry in stored.items():
        value = np.array([float.fromhex(v) for v in entry["data"]],
                         dtype=np.float64).reshape(entry["shape"])
        node = model.params[name]
        if tuple(entry["shape"]) != node.value.shape:
            raise ContractError(f"{path}: {name} has shape {entry['shape']}, "
                                f"expected {list(node.value.shape)}")
        node.value[...] = value
    return model
