"""Network assembly: a compact string grammar for architectures, a seeded
builder, the forward pass, and closed-form complexity accounting.

Architecture strings use the block tokens ``GSel-k-m``, ``GFC``, ``ReLU``,
``BNorm``, ``GPool-kind`` (optionally ``GPool-kind-b`` for b-way merges),
``Dropout-rate``, ``Concat``, ``FC-width`` and an optional terminal
``Softmax``. Example::

    GSel-4-2, GFC, ReLU, BNorm, Concat, FC-2, Softmax

A group-connected net must start with ``GSel`` and end with
``Concat, FC-C[, Softmax]``; a string starting with ``FC`` describes the
plain dense baseline. ``Softmax`` marks the probability boundary only: the
forward pass always returns logits and the softmax lives inside the
cross-entropy loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import POOL_KINDS, BatchNormState, GroupFcParams, RoutingParams
from .tensor import Tensor


@dataclass
class ArchSpec:
    """Declarative description of one network."""

    kind: str  # "gmlp" | "mlp"
    d: int
    n_classes: int
    k: int
    m: int
    pool_kind: str
    branching: int
    blocks: tuple
    seed: int = 0
    text: str = ""

    def validate(self) -> None:
        if self.kind not in ("gmlp", "mlp"):
            raise ConfigError(f"unknown arch kind {self.kind!r}")
        if self.d < 1 or self.n_classes < 1:
            raise ConfigError(f"need d >= 1 and classes >= 1, got d={self.d}, C={self.n_classes}")
        if self.kind == "gmlp":
            if self.k < 1 or self.m < 1:
                raise ConfigError(f"need k >= 1 and m >= 1, got k={self.k}, m={self.m}")
            k_cur, saw_concat, saw_output, n_gfc = self.k, False, False, 0
            for block in self.blocks:
                tag = block[0]
                if tag == "pool":
                    if saw_concat:
                        raise ConfigError("pool after concat")
                    b = block[2]
                    if b < 2:
                        raise ConfigError(f"branching must be >= 2, got {b}")
                    if k_cur % b != 0:
                        raise ConfigError(
                            f"pool cannot merge {k_cur} groups {b}-way (not divisible)"
                        )
                    k_cur //= b
                elif tag == "gfc":
                    if saw_concat:
                        raise ConfigError("group block after concat")
                    n_gfc += 1
                elif tag == "concat":
                    if saw_concat:
                        raise ConfigError("more than one concat block")
                    saw_concat = True
                elif tag == "dense":
                    if not saw_concat:
                        raise ConfigError("dense output before concat")
                    if saw_output:
                        raise ConfigError("more than one output block")
                    saw_output = True
                elif tag in ("relu", "batchnorm", "dropout"):
                    pass
                else:
                    raise ConfigError(f"unknown block {tag!r}")
            if not saw_concat or not saw_output:
                raise ConfigError("architecture must end with Concat, FC-C")
            if n_gfc < 1:
                raise ConfigError("architecture needs at least one GFC block")
        else:
            if not any(b[0] == "dense" for b in self.blocks):
                raise ConfigError("dense baseline needs at least one FC block")

    @property
    def n_weight_layers(self) -> int:
        """Total depth counted in weight layers (GFC blocks plus the output, or all FC blocks)."""
        if self.kind == "gmlp":
            return sum(1 for b in self.blocks if b[0] == "gfc") + 1
        return sum(1 for b in self.blocks if b[0] == "dense")


def parse_arch(text: str, d: int, seed: int = 0, branching: int = 2) -> ArchSpec:
    """Parse an architecture string into a validated ArchSpec.

    ``branching`` is the default merge width for ``GPool-kind`` tokens
    without an explicit count.
    """
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    if not tokens:
        raise ConfigError("empty architecture string")
    blocks = []
    k = m = 0
    kind = "mlp"
    pool_kind = ""
    softmax_seen = False
    for pos, tok in enumerate(tokens):
        parts = tok.split("-")
        head = parts[0].lower()
        if softmax_seen:
            raise ConfigError(f"token {pos}: nothing may follow Softmax")
        try:
            if head == "gsel":
                if pos != 0:
                    raise ConfigError(f"token {pos}: GSel must come first")
                if len(parts) != 3:
                    raise ConfigError(f"token {pos}: expected GSel-k-m, got {tok!r}")
                kind = "gmlp"
                k, m = int(parts[1]), int(parts[2])
            elif head == "gfc":
                blocks.append(("gfc",))
            elif head == "relu":
                blocks.append(("relu",))
            elif head == "bnorm":
                blocks.append(("batchnorm",))
            elif head == "gpool":
                pk = parts[1].lower() if len(parts) > 1 else "max"
                if pk not in POOL_KINDS:
                    raise ConfigError(f"token {pos}: unknown pool kind {pk!r}")
                b = int(parts[2]) if len(parts) > 2 else branching
                pool_kind = pool_kind or pk
                blocks.append(("pool", pk, b))
            elif head == "dropout":
                if len(parts) != 2:
                    raise ConfigError(f"token {pos}: expected Dropout-rate, got {tok!r}")
                rate = float(parts[1])
                if not 0.0 <= rate < 1.0:
                    raise ConfigError(f"token {pos}: dropout rate must be in [0, 1)")
                blocks.append(("dropout", rate))
            elif head == "concat":
                blocks.append(("concat",))
            elif head == "fc":
                if len(parts) != 2:
                    raise ConfigError(f"token {pos}: expected FC-width, got {tok!r}")
                blocks.append(("dense", int(parts[1])))
            elif head == "softmax":
                softmax_seen = True
            else:
                raise ConfigError(f"token {pos}: unknown block {tok!r}")
        except ValueError as exc:
            raise ConfigError(f"token {pos}: cannot parse {tok!r}: {exc}") from exc
    dense_widths = [b[1] for b in blocks if b[0] == "dense"]
    if not dense_widths:
        raise ConfigError("architecture has no FC output block")
    n_classes = dense_widths[-1]
    if kind == "mlp":
        k, m = 1, dense_widths[0]
    branchings = [b[2] for b in blocks if b[0] == "pool"]
    spec = ArchSpec(
        kind=kind,
        d=d,
        n_classes=n_classes,
        k=k,
        m=m,
        pool_kind=pool_kind or "max",
        branching=branchings[0] if branchings else branching,
        blocks=tuple(blocks),
        seed=seed,
        text=text,
    )
    spec.validate()
    return spec


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """A built network: routing parameters, an executable block list, and a
    flat named-parameter view for the optimizer, the L2 penalty, and
    checkpointing."""

    def __init__(self, spec: ArchSpec):
        spec.validate()
        self.spec = spec
        self.routing: RoutingParams | None = None
        self._ops = []  # (tag, payload) executed in order by forward()
        self._params: list[tuple[str, Tensor]] = []
        self._bn_states: list[tuple[str, BatchNormState]] = []
        rng = np.random.default_rng(spec.seed)
        d, k, m, c = spec.d, spec.k, spec.m, spec.n_classes

        if spec.kind == "gmlp":
            psi = Tensor(_xavier(rng, d, k * m, (k * m, d)), requires_grad=True)
            self.routing = RoutingParams(psi, 1.0, k, m, d)
            self._params.append(("gsel.psi", psi))
            k_cur, width, grouped = k, k * m, True
        else:
            k_cur, width, grouped = 0, d, False

        for i, block in enumerate(spec.blocks):
            tag = block[0]
            name = f"block{i}"
            if tag == "gfc":
                w = Tensor(_xavier(rng, m, m, (k_cur, m, m)), requires_grad=True)
                b = Tensor(np.zeros((k_cur, m)), requires_grad=True)
                self._ops.append(("gfc", GroupFcParams(w, b)))
                self._params += [(f"{name}.gfc.weights", w), (f"{name}.gfc.biases", b)]
            elif tag == "pool":
                pk, br = block[1], block[2]
                k_cur //= br
                width = k_cur * m
                if pk == "linear":
                    w = Tensor(
                        _xavier(rng, br * m, m, (k_cur, m, br * m)), requires_grad=True
                    )
                    self._ops.append(("pool", (pk, br, w)))
                    self._params.append((f"{name}.pool.weights", w))
                else:
                    self._ops.append(("pool", (pk, br, None)))
            elif tag == "relu":
                self._ops.append(("relu", None))
            elif tag == "batchnorm":
                st = BatchNormState.create(width)
                self._ops.append(("batchnorm", st))
                self._params += [(f"{name}.bn.gamma", st.gamma), (f"{name}.bn.beta", st.beta)]
                self._bn_states.append((f"{name}.bn", st))
            elif tag == "dropout":
                self._ops.append(("dropout", block[1]))
            elif tag == "concat":
                self._ops.append(("concat", None))
                grouped = False
            elif tag == "dense":
                out_w = block[1]
                w = Tensor(_xavier(rng, width, out_w, (width, out_w)), requires_grad=True)
                b = Tensor(np.zeros(out_w), requires_grad=True)
                self._ops.append(("dense", (w, b)))
                self._params += [(f"{name}.dense.w", w), (f"{name}.dense.b", b)]
                width = out_w

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params)

    def param_count(self) -> int:
        return sum(t.size for _, t in self._params)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters plus batch-norm running moments: everything a reload needs."""
        out = [(name, t.data) for name, t in self._params]
        for name, st in self._bn_states:
            out.append((f"{name}.running_mean", st.running_mean))
            out.append((f"{name}.running_var", st.running_var))
        return out

    @property
    def temperature(self) -> float:
        return self.routing.temperature if self.routing else 1.0

    def set_temperature(self, tau: float) -> None:
        if self.routing is not None:
            if not tau > 0.0:
                raise ConfigError(f"temperature must be positive, got {tau}")
            self.routing.temperature = tau

    # -- execution ----------------------------------------------------------

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        tape=None,
        mode: str = "relaxed",
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Run the block list on a (B, d) batch and return (B, C) logits."""
        if x.data.ndim != 2 or x.shape[1] != self.spec.d:
            raise ShapeError(f"input {x.shape} does not match d={self.spec.d}")
        h = x
        grouped = False
        if self.routing is not None:
            h = L.group_select_forward(tape, x, self.routing, mode=mode)
            grouped = True
        for tag, payload in self._ops:
            if tag == "gfc":
                h = L.group_fc_forward(tape, h, payload)
            elif tag == "relu":
                h = T.relu(tape, h)
            elif tag == "batchnorm":
                if grouped:
                    n, kc, m = h.shape
                    flat = T.reshape(tape, h, (n, kc * m))
                    flat = L.batchnorm_forward(tape, flat, payload, training)
                    h = T.reshape(tape, flat, (n, kc, m))
                else:
                    h = L.batchnorm_forward(tape, h, payload, training)
            elif tag == "pool":
                pk, br, w = payload
                h = L.group_pool_forward(tape, h, pk, br, w)
            elif tag == "dropout":
                if training and rng is None:
                    raise ConfigError("dropout in training mode needs an rng")
                h = L.dropout_forward(tape, h, payload, training, rng)
            elif tag == "concat":
                h = L.concat_groups(tape, h)
                grouped = False
            elif tag == "dense":
                w, b = payload
                h = L.dense_forward(tape, h, w, b)
        return h


def build(spec: ArchSpec) -> Model:
    """Instantiate a model with seeded Xavier-uniform initialization.

    Weight fans: the routing logits use (fan_in=d, fan_out=k*m), group maps
    use (m, m), linear pool maps (b*m, m), dense layers (width, out). Biases
    start at zero, batch-norm at identity. Same seed, same bits.
    """
    return Model(spec)


# ---------------------------------------------------------------------------
# complexity accounting


@dataclass
class ComplexityReport:
    predict_ops: int
    train_ops: int
    mlp_predict_ops: int
    param_count_formula: int
    param_count_actual: int
    density: Fraction
    receptive_field_by_layer: list[int]

    def to_dict(self) -> dict:
        return {
            "predict_ops": self.predict_ops,
            "train_ops": self.train_ops,
            "mlp_predict_ops": self.mlp_predict_ops,
            "param_count_formula": self.param_count_formula,
            "param_count_actual": self.param_count_actual,
            "density": f"1/{self.density.denominator}"
            if self.density.numerator == 1
            else str(self.density),
            "receptive_field_by_layer": self.receptive_field_by_layer,
        }


def _series_value(first_term: Fraction, k: int, m: int, n_layers: int, c: int, quad: bool) -> Fraction:
    """first_term + sum_{j=0}^{L-2} layer_cost/2^j + C*k*m/2^(L-1).

    The idealized halving series: consecutive weight layers are assumed to be
    separated by a binary merge, including before the output layer.
    ``quad=True`` uses the dense layer cost (k*m)^2, else the group-local k*m^2.
    """
    total = first_term
    layer_cost = Fraction(k * m * k * m if quad else k * m * m)
    for j in range(n_layers - 1):
        total += layer_cost / 2**j
    total += Fraction(c * k * m) / 2 ** (n_layers - 1)
    return total


def predict_ops_gmlp(k: int, m: int, n_layers: int, c: int) -> Fraction:
    """Prediction-time op count: sparse routing costs k*m, then the group layers."""
    return _series_value(Fraction(k * m), k, m, n_layers, c, quad=False)


def train_ops_gmlp(k: int, m: int, n_layers: int, c: int, d: int) -> Fraction:
    """Training-time count: the routing matrix is still dense, k*m*d."""
    return _series_value(Fraction(k * m * d), k, m, n_layers, c, quad=False)


def predict_ops_mlp(k: int, m: int, n_layers: int, c: int, d: int) -> Fraction:
    """Op count of a dense baseline of matching width k*m."""
    return _series_value(Fraction(k * m * d), k, m, n_layers, c, quad=True)


def _as_int(x: Fraction):
    return int(x) if x.denominator == 1 else float(x)


def count_complexity(spec: ArchSpec) -> ComplexityReport:
    """Closed-form cost figures for a spec, next to exact parameter counts.

    The series values are idealized (width halves between consecutive weight
    layers); ``param_count_actual`` walks the blocks and counts every tensor
    the builder would allocate, biases and batch-norm included.
    """
    spec.validate()
    k, m, c, d = spec.k, spec.m, spec.n_classes, spec.d
    n_layers = spec.n_weight_layers
    if spec.kind == "gmlp":
        predict = predict_ops_gmlp(k, m, n_layers, c)
        train = train_ops_gmlp(k, m, n_layers, c, d)
    else:
        predict = train = predict_ops_mlp(k, m, n_layers, c, d)
    mlp_equiv = predict_ops_mlp(k, m, n_layers, c, d)

    actual = 0
    if spec.kind == "gmlp":
        actual += k * m * d  # routing logits
        k_cur, width = k, k * m
    else:
        k_cur, width = 0, d
    for block in spec.blocks:
        tag = block[0]
        if tag == "gfc":
            actual += k_cur * (m * m + m)
        elif tag == "pool":
            pk, br = block[1], block[2]
            k_cur //= br
            if pk == "linear":
                actual += k_cur * m * (br * m)
            width = k_cur * m
        elif tag == "batchnorm":
            actual += 2 * width
        elif tag == "dense":
            actual += width * block[1] + block[1]
            width = block[1]

    b = spec.branching
    if spec.kind == "gmlp":
        rfield = [min(d, b ** (l - 1) * m) for l in range(1, n_layers + 1)]
    else:
        rfield = [d] * n_layers
    return ComplexityReport(
        predict_ops=_as_int(predict),
        train_ops=_as_int(train),
        mlp_predict_ops=_as_int(mlp_equiv),
        param_count_formula=_as_int(train if spec.kind == "gmlp" else predict),
        param_count_actual=actual,
        density=Fraction(1, k) if spec.kind == "gmlp" else Fraction(1, 1),
        receptive_field_by_layer=rfield,
    )
