"""The two fusion blocks over (C, H, W) feature maps.

ADFM fuses appearance (RGB) features with geometry (surface-normal) features
through a global cross-attention map and adds the result back onto the RGB
branch through a learnable scalar gate that starts at zero, so a freshly
initialized block is the exact identity on its RGB input.

EAFM fuses the ADFM output with event features: two element-wise interaction
branches are each refined by conv3x3 -> conv1x1 -> group norm, gated by a
sigmoid of their pooled statistics, then concatenated and projected back to
the original channel count.

Both forwards optionally record onto a :class:`~trifuse.tensor.Tape` so every
parameter gradient can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trifuse import tensor as T
from trifuse.container import load_tensor, save_tensor
from trifuse.tensor import Tape, Tensor

GN_EPS = 1e-5
POOLS = ("avg", "max")
MANIFEST_NAME = "manifest.txt"


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32))


@dataclass(frozen=True)
class ADFMParams:
    """Weights of the dual-stream (RGB x normal) attention fusion block."""

    reduce_r_w: Tensor  # (C', C)
    reduce_r_b: Tensor  # (C',)
    reduce_n_w: Tensor  # (C', C)
    reduce_n_b: Tensor  # (C',)
    project_w: Tensor   # (C, C')
    project_b: Tensor   # (C,)
    alpha: Tensor       # (1,) residual gate

    def __post_init__(self):
        c_prime, c = self.reduce_r_w.shape
        expected = {
            "reduce_r_w": (c_prime, c),
            "reduce_r_b": (c_prime,),
            "reduce_n_w": (c_prime, c),
            "reduce_n_b": (c_prime,),
            "project_w": (c, c_prime),
            "project_b": (c,),
            "alpha": (1,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"adfm.{name}: shape {got}, expected {shape}")
        if c_prime > c:
            raise ValueError(f"reduced channels {c_prime} must not exceed channels {c}")

    @property
    def channels(self) -> int:
        return self.reduce_r_w.shape[1]

    @property
    def reduced_channels(self) -> int:
        return self.reduce_r_w.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {
            "adfm.reduce_r.w": self.reduce_r_w,
            "adfm.reduce_r.b": self.reduce_r_b,
            "adfm.reduce_n.w": self.reduce_n_w,
            "adfm.reduce_n.b": self.reduce_n_b,
            "adfm.project.w": self.project_w,
            "adfm.project.b": self.project_b,
            "adfm.alpha": self.alpha,
        }

    @classmethod
    def from_named(cls, named: dict[str, Tensor]) -> "ADFMParams":
        return cls(
            reduce_r_w=named["adfm.reduce_r.w"],
            reduce_r_b=named["adfm.reduce_r.b"],
            reduce_n_w=named["adfm.reduce_n.w"],
            reduce_n_b=named["adfm.reduce_n.b"],
            project_w=named["adfm.project.w"],
            project_b=named["adfm.project.b"],
            alpha=named["adfm.alpha"],
        )


def default_reduced_channels(channels: int) -> int:
    return max(1, channels // 2)


def default_groups(channels: int) -> int:
    """8 groups when that divides the channel count, one group per channel
    for narrow maps; anything else must be chosen explicitly."""
    if channels < 8:
        return channels
    if channels % 8 == 0:
        return 8
    raise ValueError(f"no default group count divides channels={channels}; pass groups explicitly")


def adfm_init(channels: int, reduced_channels: int | None = None, seed: int = 0) -> ADFMParams:
    """Deterministic init: conv weights uniform in +-sqrt(1/fan_in), biases
    and the residual gate zero.  Draw order: reduce_r.w, reduce_n.w, project.w."""
    if reduced_channels is None:
        reduced_channels = default_reduced_channels(channels)
    if not 1 <= reduced_channels <= channels:
        raise ValueError(f"reduced channels must lie in [1, {channels}], got {reduced_channels}")
    rng = np.random.default_rng(seed)
    return ADFMParams(
        reduce_r_w=_uniform(rng, (reduced_channels, channels), fan_in=channels),
        reduce_r_b=Tensor.zeros((reduced_channels,)),
        reduce_n_w=_uniform(rng, (reduced_channels, channels), fan_in=channels),
        reduce_n_b=Tensor.zeros((reduced_channels,)),
        project_w=_uniform(rng, (channels, reduced_channels), fan_in=reduced_channels),
        project_b=Tensor.zeros((channels,)),
        alpha=Tensor.zeros((1,)),
    )


def adfm_forward(
    f_r: Tensor,
    f_n: Tensor,
    p: ADFMParams,
    tape: Tape | None = None,
    inspect: dict | None = None,
) -> Tensor:
    """Cross-attention fusion: F_r + alpha * project(attend(reduce(F_r), reduce(F_n))).

    When ``inspect`` is a dict, the (N, N) row-stochastic attention matrix is
    stored under ``inspect["attention"]``.
    """
    if f_r.rank != 3 or f_r.shape != f_n.shape:
        raise T.ShapeMismatchError(f"adfm inputs must share one (C,H,W) shape, got {f_r.shape} and {f_n.shape}")
    if f_r.shape[0] != p.channels:
        raise T.ShapeMismatchError(f"input channels {f_r.shape[0]} do not match params ({p.channels})")
    _, h, w = f_r.shape

    r_red = T.conv1x1(f_r, p.reduce_r_w, p.reduce_r_b, tape)
    n_red = T.conv1x1(f_n, p.reduce_n_w, p.reduce_n_b, tape)
    r_flat = T.flatten_spatial(r_red, tape)
    n_flat = T.flatten_spatial(n_red, tape)
    logits = T.matmul(T.transpose2d(r_flat, tape), n_flat, tape)
    attention = T.softmax_rows(logits, tape)
    n_att = T.matmul(n_flat, T.transpose2d(attention, tape), tape)
    n_hat = T.unflatten_spatial(n_att, h, w, tape)
    projected = T.conv1x1(n_hat, p.project_w, p.project_b, tape)
    gated = T.scale(projected, p.alpha, tape)
    out = T.add(f_r, gated, tape)

    if inspect is not None:
        inspect["attention"] = attention
    return out


@dataclass(frozen=True)
class EAFMBranchParams:
    """Refinement stack of one EAFM interaction branch."""

    conv3_w: Tensor   # (C, C, 3, 3)
    conv3_b: Tensor   # (C,)
    conv1_w: Tensor   # (C, C)
    conv1_b: Tensor   # (C,)
    gn_gamma: Tensor  # (C,)
    gn_beta: Tensor   # (C,)
    gate_w: Tensor    # (C, C)
    gate_b: Tensor    # (C,)


@dataclass(frozen=True)
class EAFMParams:
    """Weights of the event-aware fusion block; ``ae`` is the branch anchored
    on the appearance features, ``ea`` the one anchored on the event features."""

    ae: EAFMBranchParams
    ea: EAFMBranchParams
    adjust_w: Tensor  # (C, 2C)
    adjust_b: Tensor  # (C,)
    groups: int
    pool: str = "avg"

    def __post_init__(self):
        c = self.adjust_b.shape[0]
        if self.adjust_w.shape != (c, 2 * c):
            raise ValueError(f"eafm.adjust.w: shape {self.adjust_w.shape}, expected {(c, 2 * c)}")
        expected = {
            "conv3_w": (c, c, 3, 3),
            "conv3_b": (c,),
            "conv1_w": (c, c),
            "conv1_b": (c,),
            "gn_gamma": (c,),
            "gn_beta": (c,),
            "gate_w": (c, c),
            "gate_b": (c,),
        }
        for key, branch in (("aE", self.ae), ("eA", self.ea)):
            for name, shape in expected.items():
                got = getattr(branch, name).shape
                if got != shape:
                    raise ValueError(f"eafm.{key}.{name}: shape {got}, expected {shape}")
        if self.groups < 1 or c % self.groups != 0:
            raise ValueError(f"groups={self.groups} does not divide channels={c}")
        if self.pool not in POOLS:
            raise ValueError(f"pool must be one of {POOLS}, got {self.pool!r}")

    @property
    def channels(self) -> int:
        return self.adjust_b.shape[0]

    def named(self) -> dict[str, Tensor]:
        out = {}
        for key, branch in (("aE", self.ae), ("eA", self.ea)):
            out[f"eafm.{key}.conv3.w"] = branch.conv3_w
            out[f"eafm.{key}.conv3.b"] = branch.conv3_b
            out[f"eafm.{key}.conv1.w"] = branch.conv1_w
            out[f"eafm.{key}.conv1.b"] = branch.conv1_b
            out[f"eafm.{key}.gn.gamma"] = branch.gn_gamma
            out[f"eafm.{key}.gn.beta"] = branch.gn_beta
            out[f"eafm.{key}.gate.w"] = branch.gate_w
            out[f"eafm.{key}.gate.b"] = branch.gate_b
        out["eafm.adjust.w"] = self.adjust_w
        out["eafm.adjust.b"] = self.adjust_b
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor], groups: int, pool: str = "avg") -> "EAFMParams":
        def branch(key: str) -> EAFMBranchParams:
            return EAFMBranchParams(
                conv3_w=named[f"eafm.{key}.conv3.w"],
                conv3_b=named[f"eafm.{key}.conv3.b"],
                conv1_w=named[f"eafm.{key}.conv1.w"],
                conv1_b=named[f"eafm.{key}.conv1.b"],
                gn_gamma=named[f"eafm.{key}.gn.gamma"],
                gn_beta=named[f"eafm.{key}.gn.beta"],
                gate_w=named[f"eafm.{key}.gate.w"],
                gate_b=named[f"eafm.{key}.gate.b"],
            )

        return cls(
            ae=branch("aE"),
            ea=branch("eA"),
            adjust_w=named["eafm.adjust.w"],
            adjust_b=named["eafm.adjust.b"],
            groups=groups,
            pool=pool,
        )


def eafm_init(channels: int, groups: int | None = None, seed: int = 0, pool: str = "avg") -> EAFMParams:
    """Deterministic init: conv weights uniform in +-sqrt(1/fan_in) with
    fan_in = C * k^2 per conv, biases zero, gamma one, beta zero.

    Draw order: aE conv3/conv1/gate, eA conv3/conv1/gate, adjust."""
    if groups is None:
        groups = default_groups(channels)
    if groups < 1 or channels % groups != 0:
        raise ValueError(f"groups={groups} does not divide channels={channels}")
    rng = np.random.default_rng(seed)

    def branch() -> EAFMBranchParams:
        return EAFMBranchParams(
            conv3_w=_uniform(rng, (channels, channels, 3, 3), fan_in=channels * 9),
            conv3_b=Tensor.zeros((channels,)),
            conv1_w=_uniform(rng, (channels, channels), fan_in=channels),
            conv1_b=Tensor.zeros((channels,)),
            gn_gamma=Tensor.ones((channels,)),
            gn_beta=Tensor.zeros((channels,)),
            gate_w=_uniform(rng, (channels, channels), fan_in=channels),
            gate_b=Tensor.zeros((channels,)),
        )

    return EAFMParams(
        ae=branch(),
        ea=branch(),
        adjust_w=_uniform(rng, (channels, 2 * channels), fan_in=2 * channels),
        adjust_b=Tensor.zeros((channels,)),
        groups=groups,
        pool=pool,
    )


def _eafm_branch(base: Tensor, b: EAFMBranchParams, groups: int, pool: str, tape: Tape | None) -> Tensor:
    refined = T.conv3x3(base, b.conv3_w, b.conv3_b, tape)
    refined = T.conv1x1(refined, b.conv1_w, b.conv1_b, tape)
    refined = T.group_norm(refined, groups, b.gn_gamma, b.gn_beta, eps=GN_EPS, tape=tape)
    pooled = T.global_avg_pool(refined, tape) if pool == "avg" else T.global_max_pool(refined, tape)
    gate = T.sigmoid(T.conv1x1(pooled, b.gate_w, b.gate_b, tape), tape)
    return T.mul(refined, gate, tape)


def eafm_forward(f_a: Tensor, f_e: Tensor, p: EAFMParams, tape: Tape | None = None) -> Tensor:
    """Dual-branch gated fusion of appearance-geometry features with event
    features; output has the input shape (C, H, W)."""
    if f_a.rank != 3 or f_a.shape != f_e.shape:
        raise T.ShapeMismatchError(f"eafm inputs must share one (C,H,W) shape, got {f_a.shape} and {f_e.shape}")
    if f_a.shape[0] != p.channels:
        raise T.ShapeMismatchError(f"input channels {f_a.shape[0]} do not match params ({p.channels})")

    interaction = T.mul(f_a, f_e, tape)
    ae0 = T.add(interaction, f_a, tape)
    ea0 = T.add(interaction, f_e, tape)
    weighted_ae = _eafm_branch(ae0, p.ae, p.groups, p.pool, tape)
    weighted_ea = _eafm_branch(ea0, p.ea, p.groups, p.pool, tape)
    stacked = T.concat_channels(weighted_ae, weighted_ea, tape)
    return T.conv1x1(stacked, p.adjust_w, p.adjust_b, tape)


def fusion_gradients(
    module: str,
    inputs: tuple[Tensor, Tensor],
    params: "ADFMParams | EAFMParams",
    seed_output: Tensor,
) -> dict[str, Tensor]:
    """Gradients of a taped forward pass for every parameter and both inputs.

    ``seed_output`` is the upstream gradient of the module output; input
    gradients are returned under ``f_r``/``f_n`` (adfm) or ``f_a``/``f_e``
    (eafm) next to the serialization-named parameter gradients.
    """
    tape = Tape()
    if module == "adfm":
        out = adfm_forward(inputs[0], inputs[1], params, tape)
        input_names = ("f_r", "f_n")
    elif module == "eafm":
        out = eafm_forward(inputs[0], inputs[1], params, tape)
        input_names = ("f_a", "f_e")
    else:
        raise ValueError(f"unknown module {module!r}, expected 'adfm' or 'eafm'")
    if seed_output.shape != out.shape:
        raise T.ShapeMismatchError(f"seed shape {seed_output.shape} does not match output {out.shape}")
    grads = T.backward(tape, seed_output)
    result = {name: grads.get(t) for name, t in params.named().items()}
    for name, t in zip(input_names, inputs):
        result[name] = grads.get(t)
    return result


# ---------------------------------------------------------------------------
# parameter directory serialization
# ---------------------------------------------------------------------------


def _expected_shapes(c: int, c_prime: int, groups: int) -> dict[str, tuple[int, ...]]:
    shapes = {
        "adfm.reduce_r.w": (c_prime, c),
        "adfm.reduce_r.b": (c_prime,),
        "adfm.reduce_n.w": (c_prime, c),
        "adfm.reduce_n.b": (c_prime,),
        "adfm.project.w": (c, c_prime),
        "adfm.project.b": (c,),
        "adfm.alpha": (1,),
        "eafm.adjust.w": (c, 2 * c),
        "eafm.adjust.b": (c,),
    }
    for key in ("aE", "eA"):
        shapes[f"eafm.{key}.conv3.w"] = (c, c, 3, 3)
        shapes[f"eafm.{key}.conv3.b"] = (c,)
        shapes[f"eafm.{key}.conv1.w"] = (c, c)
        shapes[f"eafm.{key}.conv1.b"] = (c,)
        shapes[f"eafm.{key}.gn.gamma"] = (c,)
        shapes[f"eafm.{key}.gn.beta"] = (c,)
        shapes[f"eafm.{key}.gate.w"] = (c, c)
        shapes[f"eafm.{key}.gate.b"] = (c,)
    return shapes


def save_fusion_params(directory: str | Path, adfm: ADFMParams, eafm: EAFMParams) -> None:
    """Write both parameter sets as one ".ten" file per tensor plus a
    manifest listing dimensions and every name -> shape."""
    if adfm.channels != eafm.channels:
        raise ValueError(f"adfm channels {adfm.channels} != eafm channels {eafm.channels}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = {**adfm.named(), **eafm.named()}
    lines = [
        f"c = {adfm.channels}",
        f"c_prime = {adfm.reduced_channels}",
        f"groups = {eafm.groups}",
        f"pool = {eafm.pool}",
    ]
    for name in sorted(named):
        save_tensor(directory / f"{name}.ten", named[name])
        lines.append(f"{name} = {'x'.join(str(e) for e in named[name].shape)}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_fusion_params(directory: str | Path) -> tuple[ADFMParams, EAFMParams]:
    """Load a parameter directory, validating every shape against the
    dimensions declared in the manifest."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"missing manifest: {manifest}")

    header: dict[str, str] = {}
    listed: dict[str, tuple[int, ...]] = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not value:
            raise ValueError(f"{manifest}: line {lineno}: expected 'name = value'")
        if "." in key:
            try:
                listed[key] = tuple(int(e) for e in value.split("x"))
            except ValueError:
                raise ValueError(f"{manifest}: line {lineno}: bad shape {value!r}") from None
        else:
            header[key] = value

    try:
        c = int(header["c"])
        c_prime = int(header["c_prime"])
        groups = int(header["groups"])
    except KeyError as exc:
        raise ValueError(f"{manifest}: missing header entry {exc}") from None
    pool = header.get("pool", "avg")

    expected = _expected_shapes(c, c_prime, groups)
    missing = sorted(set(expected) - set(listed))
    extra = sorted(set(listed) - set(expected))
    if missing or extra:
        raise ValueError(f"{manifest}: parameter set mismatch (missing {missing}, unexpected {extra})")

    named: dict[str, Tensor] = {}
    for name, shape in expected.items():
        if listed[name] != shape:
            raise ValueError(f"{manifest}: {name} listed as {listed[name]}, expected {shape}")
        t = load_tensor(directory / f"{name}.ten")
        if t.shape != shape:
            raise ValueError(f"{directory / (name + '.ten')}: shape {t.shape}, expected {shape}")
        named[name] = t

    return ADFMParams.from_named(named), EAFMParams.from_named(named, groups=groups, pool=pool)
