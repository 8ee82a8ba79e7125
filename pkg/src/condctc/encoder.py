"""Stacked pre-norm encoder blocks with shared character/syllable prediction
heads and additive feedback of intermediate posteriors into the next block."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, NumericError, ParamStore, ShapeError, Tensor

# Reference placements at the 18-layer depth, per strategy:
# (char layers, syllable layers, feedback on).  The final layer always carries
# the main character output and never appears in the char set.
_REFERENCE_DEPTH = 18
_STRATEGIES: dict[str, tuple[tuple[int, ...], tuple[int, ...], bool]] = {
    "baseline": ((), (), False),
    "multitask": ((), (15,), False),
    "interctc": ((3, 6, 9, 12, 15), (), False),
    "selfcond": ((3, 6, 9, 12, 15), (), True),
    "parallel": ((6, 12), (6, 12, 18), True),
    "hierarchical": ((12, 15), (3, 6, 9), True),
    "alternate": ((6, 12), (3, 9, 15), True),
}


def strategy_names() -> list[str]:
    return sorted(_STRATEGIES)


def _scale_layers(layers: tuple[int, ...], n_layers: int, top: int) -> frozenset[int]:
    # Rescale reference indices to another depth: multiply by n/18, round to
    # nearest, clamp into [1, top], dedupe.
    out = set()
    for idx in layers:
        scaled = math.floor(idx * n_layers / _REFERENCE_DEPTH + 0.5)
        if top >= 1:
            out.add(min(max(scaled, 1), top))
    return frozenset(out)


@dataclass(frozen=True)
class PlacementConfig:
    """Which layers carry intermediate predictions and whether they feed back."""

    n_layers: int
    char_layers: frozenset[int] = frozenset()
    syl_layers: frozenset[int] = frozenset()
    condition: bool = False
    strategy: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "char_layers", frozenset(self.char_layers))
        object.__setattr__(self, "syl_layers", frozenset(self.syl_layers))
        if self.n_layers < 1:
            raise ContractError(f"n_layers must be >= 1, got {self.n_layers}")
        bad = [n for n in self.char_layers | self.syl_layers if not 1 <= n <= self.n_layers]
        if bad:
            raise ContractError(f"layer indices {sorted(bad)} outside [1, {self.n_layers}]")
        if self.n_layers in self.char_layers:
            raise ContractError(
                f"layer {self.n_layers} carries the main character output and "
                "cannot also be an intermediate character layer"
            )

    @classmethod
    def from_strategy(cls, strategy: str, n_layers: int = _REFERENCE_DEPTH) -> "PlacementConfig":
        """Expand a named strategy to its exact layer sets at depth `n_layers`."""
        try:
            chars, syls, condition = _STRATEGIES[strategy]
        except KeyError:
            raise ContractError(
                f"unknown strategy {strategy!r}; expected one of {strategy_names()}"
            ) from None
        if n_layers == _REFERENCE_DEPTH:
            char_set, syl_set = frozenset(chars), frozenset(syls)
        else:
            char_set = _scale_layers(chars, n_layers, n_layers - 1)
            syl_set = _scale_layers(syls, n_layers, n_layers)
        return cls(
            n_layers=n_layers,
            char_layers=char_set,
            syl_layers=syl_set,
            condition=condition,
            strategy=strategy,
        )

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "char_layers": sorted(self.char_layers),
            "syl_layers": sorted(self.syl_layers),
            "condition": self.condition,
            "strategy": self.strategy,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlacementConfig":
        return cls(
            n_layers=int(d["n_layers"]),
            char_layers=frozenset(int(i) for i in d["char_layers"]),
            syl_layers=frozenset(int(i) for i in d["syl_layers"]),
            condition=bool(d["condition"]),
            strategy=str(d.get("strategy", "custom")),
        )


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and switches of the encoder stack."""

    d_in: int = 16
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    conv_kernel: int = 7
    use_pos_enc: bool = True
    cond_layer_norm: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.conv_kernel % 2 != 1 or self.conv_kernel < 1:
            raise ContractError(f"conv_kernel must be odd and >= 1, got {self.conv_kernel}")


@dataclass
class ForwardOutput:
    """Final posteriors plus the intermediate posteriors keyed by layer."""

    final: Tensor
    char_inters: dict[int, Tensor]
    syl_inters: dict[int, Tensor]


def sinusoidal_positions(n_rows: int, dim: int) -> np.ndarray:
    """Absolute sine/cosine position code added to the projected input."""
    pos = np.arange(n_rows, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((n_rows, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : dim // 2]
    return pe


# Parameter name roles that make up the shared heads.  Exactly one tensor per
# role exists no matter how many layers predict or condition.
HEAD_PARAMS = (
    "char_head.w",
    "char_head.b",
    "syl_head.w",
    "syl_head.b",
    "char_cond.w",
    "char_cond.b",
    "syl_cond.w",
    "syl_cond.b",
)


class EncoderModel:
    """N residual blocks (attention, depthwise conv mixing, feed-forward, each
    pre-normalized) plus the shared output heads and conditioning projections."""

    def __init__(
        self,
        cfg: ModelConfig,
        placement: PlacementConfig,
        char_vocab_size: int,
        syl_vocab_size: int,
        seed: int = 0,
        store: ParamStore | None = None,
    ):
        if char_vocab_size < 2 or syl_vocab_size < 2:
            raise ContractError("vocabulary sizes must include the blank and one label")
        self.cfg = cfg
        self.placement = placement
        self.char_vocab_size = char_vocab_size
        self.syl_vocab_size = syl_vocab_size
        self.store = store if store is not None else self._init_store(seed)

    # -- parameters ---------------------------------------------------------

    def _init_store(self, seed: int) -> ParamStore:
        rng = np.random.default_rng(seed)
        cfg = self.cfg
        store = ParamStore()

        def mat(name: str, shape: tuple[int, ...]) -> None:
            store.add(name, dc.glorot_uniform(rng, shape))

        def vec(name: str, n: int, fill: float = 0.0) -> None:
            store.add(name, np.full(n, fill))

        d = cfg.d_model
        mat("input.w", (cfg.d_in, d))
        vec("input.b", d)
        for layer in range(1, self.placement.n_layers + 1):
            p = f"block{layer:02d}"
            vec(f"{p}.attn_ln.gain", d, 1.0)
            vec(f"{p}.attn_ln.bias", d)
            for proj in ("wq", "wk", "wv", "wo"):
                mat(f"{p}.attn.{proj}", (d, d))
            for b in ("bq", "bk", "bv", "bo"):
                vec(f"{p}.attn.{b}", d)
            vec(f"{p}.conv_ln.gain", d, 1.0)
            vec(f"{p}.conv_ln.bias", d)
            mat(f"{p}.conv.depth", (cfg.conv_kernel, d))
            mat(f"{p}.conv.point.w", (d, d))
            vec(f"{p}.conv.point.b", d)
            vec(f"{p}.ffn_ln.gain", d, 1.0)
            vec(f"{p}.ffn_ln.bias", d)
            mat(f"{p}.ffn.w1", (d, cfg.d_ff))
            vec(f"{p}.ffn.b1", cfg.d_ff)
            mat(f"{p}.ffn.w2", (cfg.d_ff, d))
            vec(f"{p}.ffn.b2", d)
        mat("char_head.w", (d, self.char_vocab_size))
        vec("char_head.b", self.char_vocab_size)
        mat("syl_head.w", (d, self.syl_vocab_size))
        vec("syl_head.b", self.syl_vocab_size)
        mat("char_cond.w", (self.char_vocab_size, d))
        vec("char_cond.b", d)
        mat("syl_cond.w", (self.syl_vocab_size, d))
        vec("syl_cond.b", d)
        return store

    @property
    def n_layers(self) -> int:
        return self.placement.n_layers

    @property
    def parameter_count(self) -> int:
        return self.store.total_parameters

    @property
    def head_parameter_count(self) -> int:
        return sum(self.store[name].value.size for name in HEAD_PARAMS)

    # -- forward pieces -----------------------------------------------------

    def _normed(self, x: Tensor, prefix: str) -> Tensor:
        normed = dc.layer_norm_rows(x, self.cfg.ln_eps)
        return dc.affine_rows(normed, self.store[f"{prefix}.gain"], self.store[f"{prefix}.bias"])

    def _attention(self, x: Tensor, layer: int) -> Tensor:
        p = self.store
        pre = f"block{layer:02d}.attn"
        q = dc.linear(x, p[f"{pre}.wq"], p[f"{pre}.bq"])
        k = dc.linear(x, p[f"{pre}.wk"], p[f"{pre}.bk"])
        v = dc.linear(x, p[f"{pre}.wv"], p[f"{pre}.bv"])
        d_head = self.cfg.d_model // self.cfg.n_heads
        inv_sqrt = 1.0 / math.sqrt(d_head)
        heads = []
        for h in range(self.cfg.n_heads):
            lo, hi = h * d_head, (h + 1) * d_head
            qh = dc.slice_cols(q, lo, hi)
            kh = dc.slice_cols(k, lo, hi)
            vh = dc.slice_cols(v, lo, hi)
            scores = dc.matmul_nt(qh, kh, inv_sqrt)
            heads.append(dc.matmul(dc.softmax_rows(scores), vh))
        mixed = heads[0] if len(heads) == 1 else dc.concat_cols(heads)
        return dc.linear(mixed, p[f"{pre}.wo"], p[f"{pre}.bo"])

    def _conv_mix(self, x: Tensor, layer: int) -> Tensor:
        p = self.store
        pre = f"block{layer:02d}.conv"
        mixed = dc.depthwise_conv_rows(x, p[f"{pre}.depth"])
        return dc.linear(dc.swish(mixed), p[f"{pre}.point.w"], p[f"{pre}.point.b"])

    def _ffn(self, x: Tensor, layer: int) -> Tensor:
        p = self.store
        pre = f"block{layer:02d}.ffn"
        hidden = dc.swish(dc.linear(x, p[f"{pre}.w1"], p[f"{pre}.b1"]))
        return dc.linear(hidden, p[f"{pre}.w2"], p[f"{pre}.b2"])

    def block_forward(self, x: Tensor, layer: int) -> Tensor:
        """One residual block; the (T, d_model) shape is preserved."""
        name = f"block{layer:02d}"
        x = dc.add(x, self._attention(self._normed(x, f"{name}.attn_ln"), layer))
        x = dc.add(x, self._conv_mix(self._normed(x, f"{name}.conv_ln"), layer))
        x = dc.add(x, self._ffn(self._normed(x, f"{name}.ffn_ln"), layer))
        if not np.isfinite(x.value).all():
            raise NumericError(f"block {layer} produced non-finite values")
        return x

    def predict_head(self, x: Tensor, level: str) -> Tensor:
        """Row-stochastic posteriors from the shared head for `level`."""
        if level not in ("char", "syl"):
            raise ContractError(f"unknown head level {level!r}")
        p = self.store
        return dc.softmax_rows(dc.linear(x, p[f"{level}_head.w"], p[f"{level}_head.b"]))

    def condition(self, x: Tensor, z: Tensor | None, r: Tensor | None, layer: int) -> Tensor:
        """Add the projected posteriors for the next block's input.

        The four membership cases: char-only layers add the character
        projection, syllable-only layers the syllable projection, layers in
        both add both, all other layers pass through.  With feedback disabled
        the input is returned unchanged.
        """
        in_char = layer in self.placement.char_layers
        in_syl = layer in self.placement.syl_layers
        if (z is not None) != in_char:
            raise ContractError(f"layer {layer}: character posteriors {'missing' if in_char else 'unexpected'}")
        if (r is not None) != in_syl:
            raise ContractError(f"layer {layer}: syllable posteriors {'missing' if in_syl else 'unexpected'}")
        if not self.placement.condition:
            return x
        out = x
        p = self.store
        if z is not None:
            out = dc.add(out, dc.linear(z, p["char_cond.w"], p["char_cond.b"]))
        if r is not None:
            out = dc.add(out, dc.linear(r, p["syl_cond.w"], p["syl_cond.b"]))
        if out is not x and self.cfg.cond_layer_norm:
            out = dc.layer_norm_rows(out, self.cfg.ln_eps)
        return out

    def forward(self, features: np.ndarray) -> ForwardOutput:
        """Run the full stack and collect final plus intermediate posteriors.

        Feedback computed at a layer feeds the next block, so conditioning at
        the last layer is never applied; the final head reads the last block's
        output directly.
        """
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.cfg.d_in:
            raise ShapeError(f"features must be (T, {self.cfg.d_in}), got {feats.shape}")
        if feats.shape[0] < 1:
            raise ShapeError("features need at least one frame")
        if not np.isfinite(feats).all():
            raise NumericError("input features contain non-finite values")

        x = dc.linear(Tensor(feats), self.store["input.w"], self.store["input.b"])
        if self.cfg.use_pos_enc:
            x = dc.add(x, Tensor(sinusoidal_positions(feats.shape[0], self.cfg.d_model)))

        char_inters: dict[int, Tensor] = {}
        syl_inters: dict[int, Tensor] = {}
        last = self.placement.n_layers
        for layer in range(1, last + 1):
            x = self.block_forward(x, layer)
            z = self.predict_head(x, "char") if layer in self.placement.char_layers else None
            r = self.predict_head(x, "syl") if layer in self.placement.syl_layers else None
            if z is not None:
                char_inters[layer] = z
            if r is not None:
                syl_inters[layer] = r
            if layer < last:
                x = self.condition(x, z, r, layer)
        final = self.predict_head(x, "char")
        return ForwardOutput(final=final, char_inters=char_inters, syl_inters=syl_inters)

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        """Checkpoint: the parameter container with the configuration header."""
        meta = {
            "model": asdict(self.cfg),
            "placement": self.placement.to_dict(),
            "char_vocab_size": self.char_vocab_size,
            "syl_vocab_size": self.syl_vocab_size,
        }
        if extra_meta:
            meta["extra"] = extra_meta
        self.store.save(path, meta)

    @classmethod
    def load(cls, path: str | Path) -> tuple["EncoderModel", dict]:
        store, meta = ParamStore.load(path)
        model = cls(
            cfg=ModelConfig(**meta["model"]),
            placement=PlacementConfig.from_dict(meta["placement"]),
            char_vocab_size=int(meta["char_vocab_size"]),
            syl_vocab_size=int(meta["syl_vocab_size"]),
            store=store,
        )
        return model, meta.get("extra", {})

    def with_store(self, store: ParamStore) -> "EncoderModel":
        """Same architecture bound to another parameter store (e.g. an average)."""
        if store.names() != self.store.names():
            raise ContractError("store parameter names do not match the architecture")
        return EncoderModel(
            cfg=self.cfg,
            placement=self.placement,
            char_vocab_size=self.char_vocab_size,
            syl_vocab_size=self.syl_vocab_size,
            store=store,
        )
