"""Loading experiment configs (JSON) and architecture files (line-based text).

Architecture files hold one directive per line; ``#`` starts a comment::

    input 128            # features; "input 2 8x8" gives channels and size
    batch 256
    steps 50             # sequence length, recurrent networks only
    dense 16 activation=leaky_relu:0.1 bias
    recurrent 2
    conv 8 kernel=3x3 stride=2 padding=1 dilation=1
    input_rank 16        # optional data ranks
    loss_rank 128
    precision double
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .experiments import ConfigError, ExperimentConfig
from .network import Conv, Dense, NetworkSpec, Recurrent, as_activation

LAYER_KINDS = ("dense", "recurrent", "conv")


class ArchitectureError(ValueError):
    """Parse error carrying a file/line/field location."""

    def __init__(self, source, line, message, field_no=None):
        where = f"{source}:{line}" + (f": field {field_no}" if field_no else "")
        super().__init__(f"{where}: {message}")
        self.line = line
        self.field = field_no


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    try:
        return ExperimentConfig.from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2) + "\n"


@dataclass
class Architecture:
    spec: NetworkSpec
    batch_size: int
    input_size: tuple | None = None
    input_rank: int | None = None
    loss_rank: int | None = None
    weight_ranks: dict = field(default_factory=dict)


def _int(source, line, no, token, what):
    try:
        v = int(token)
    except ValueError:
        raise ArchitectureError(source, line, f"{what} must be an integer, got {token!r}", no) from None
    if v < 1:
        raise ArchitectureError(source, line, f"{what} must be positive, got {v}", no)
    return v


def _size(source, line, no, token, what):
    return tuple(_int(source, line, no, part, what) for part in token.split("x"))


def _options(source, line, tokens, allowed):
    """``key=value`` tokens and bare flags, from field 3 on."""
    opts = {}
    for no, tok in enumerate(tokens, start=3):
        key, eq, value = tok.partition("=")
        if key not in allowed or (allowed[key] is None) == bool(eq):
            raise ArchitectureError(source, line, f"unexpected option {tok!r}", no)
        opts[key] = (no, value) if eq else (no, None)
    return opts


def parse_architecture(text: str, source: str = "<architecture>") -> Architecture:
    features = channels = None
    size = None
    batch = steps = None
    precision = "double"
    input_rank = loss_rank = None
    weight_ranks = {}
    layers = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        head, args = tokens[0], tokens[1:]

        def need(n, usage):
            if len(args) < n:
                raise ArchitectureError(source, line_no, f"usage: {usage}")

        if head == "input":
            need(1, "input <features> | input <channels> <size, e.g. 8x8>")
            if len(args) > 2:
                raise ArchitectureError(source, line_no, "too many fields", 4)
            n = _int(source, line_no, 2, args[0], "input features")
            if len(args) == 2:
                channels, size = n, _size(source, line_no, 3, args[1], "input size")
            else:
                features = n
        elif head in ("batch", "steps", "input_rank", "loss_rank"):
            need(1, f"{head} <integer>")
            v = _int(source, line_no, 2, args[0], head)
            if head == "batch":
                batch = v
            elif head == "steps":
                steps = v
            elif head == "input_rank":
                input_rank = v
            else:
                loss_rank = v
        elif head == "weight_rank":
            need(3, "weight_rank <layer> <param> <rank>")
            weight_ranks[(_int(source, line_no, 2, args[0], "layer"), args[1])] = \
                _int(source, line_no, 4, args[2], "rank")
        elif head == "precision":
            need(1, "precision single|double")
            if args[0] not in ("single", "double"):
                raise ArchitectureError(source, line_no, f"unknown precision {args[0]!r}", 2)
            precision = args[0]
        elif head in LAYER_KINDS:
            need(1, f"{head} <width> [options]")
            width = _int(source, line_no, 2, args[0], "width")
            allowed = {"activation": "", "bias": None}
            if head == "conv":
                allowed.update(kernel="", stride="", padding="", dilation="")
            opts = _options(source, line_no, args[1:], allowed)
            prev = (layers[-1].out_features if layers else (features or channels))
            if prev is None:
                raise ArchitectureError(source, line_no, "'input' must come before the first layer")
            kw = {"bias": "bias" in opts}
            if "activation" in opts:
                no, value = opts["activation"]
                try:
                    kw["activation"] = as_activation(value)
                except ValueError as exc:
                    raise ArchitectureError(source, line_no, str(exc), no) from None
            if head == "dense":
                layers.append(Dense(prev, width, **kw))
            elif head == "recurrent":
                layers.append(Recurrent(prev, width, **kw))
            else:
                if "kernel" not in opts:
                    raise ArchitectureError(source, line_no, "conv needs kernel=<k1>x<k2>...")
                geo = {}
                for key in ("kernel", "stride", "padding", "dilation"):
                    if key in opts:
                        no, value = opts[key]
                        if key == "padding":
                            try:
                                geo[key] = tuple(int(v) for v in value.split("x"))
                            except ValueError:
                                raise ArchitectureError(source, line_no,
                                                        f"bad padding {value!r}", no) from None
                        else:
                            geo[key] = _size(source, line_no, no, value, key)
                kernel = geo.pop("kernel")
                # a single value applies to every spatial dimension
                geo = {k: v * len(kernel) if len(v) == 1 else v for k, v in geo.items()}
                try:
                    layers.append(Conv(prev, width, kernel, activation=kw.get("activation", "identity"),
                                       bias=kw["bias"], **geo))
                except ValueError as exc:
                    raise ArchitectureError(source, line_no, str(exc)) from None
        else:
            raise ArchitectureError(
                source, line_no,
                f"unsupported directive or layer kind {head!r} "
                f"(layers: {', '.join(LAYER_KINDS)})", 1,
            )
    if not layers:
        raise ArchitectureError(source, 0, "no layers defined")
    if batch is None:
        raise ArchitectureError(source, 0, "missing 'batch <N>'")
    try:
        spec = NetworkSpec(layers, truncation_length=steps, precision=precision)
    except ValueError as exc:
        raise ArchitectureError(source, 0, str(exc)) from None
    if spec.kind == "conv" and size is None:
        raise ArchitectureError(source, 0, "conv networks need 'input <channels> <size>'")
    if spec.kind == "conv" and len(size) != layers[0].spatial_dims:
        raise ArchitectureError(source, 0, f"input size {size} does not match kernel rank")
    return Architecture(spec, batch, size, input_rank, loss_rank, weight_ranks)


def load_architecture(path) -> Architecture:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read architecture ({exc.strerror})") from None
    return parse_architecture(text, str(path))
