"""Run configuration files (INI, flat ``key = value`` sections).

Example::

    [model]
    type = xxz
    n_sites = 4
    epsilon = 1.0
    lambda = 1.0

    [dissipation]
    preset = edge_driving

    [initial]
    kind = product
    pattern = down

    [simulation]
    dt = 0.01
    t_final = 2.0
    n_samples = 300
    bond_dim = 4
    master_seed = 7

    [observables]
    list = sz_profile, energy, two_point:2:x

    [output]
    directory = out
"""

from __future__ import annotations

import configparser
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .ensemble import InitialSpec
from .errors import MctdvpError
from .models import PAULI, LindbladModel, build_kxz, build_xxz, dissipation_preset, zero_hamiltonian
from .observables import ObservableSpec, parse_observable
from .sde import UPDATE_MODES, TrajectoryConfig

MODEL_TYPES = ("kxz", "xxz", "zero")


class ConfigError(MctdvpError, ValueError):
    """Invalid configuration; the message names the file position when known."""


@dataclass
class RunConfig:
    model_type: str
    n_sites: int
    epsilon: float
    lam: float
    dissipation: str
    explicit_ops: list[tuple[int, str]]
    initial: InitialSpec
    dt: float
    t_final: float
    n_samples: int
    master_seed: int
    n_workers: int
    record_every: int
    batch_size: int
    update: str
    cutoff: float
    observables: list[ObservableSpec]
    output_dir: Path
    formats: list[str]
    checkpoint: Path | None = None
    source: str = ""
    raw: dict = field(default_factory=dict)

    def build_model(self) -> LindbladModel:
        if self.model_type == "kxz":
            model = build_kxz(self.n_sites, self.lam)
        elif self.model_type == "xxz":
            model = build_xxz(self.n_sites, self.epsilon, self.lam)
        else:
            model = zero_hamiltonian(self.n_sites)
        ops = []
        if self.dissipation != "none":
            ops += dissipation_preset(self.dissipation, self.n_sites)
        ops += [(site, PAULI[name].copy()) for site, name in self.explicit_ops]
        return model.with_dissipation(ops)

    def trajectory_config(self) -> TrajectoryConfig:
        return TrajectoryConfig(
            dt=self.dt,
            t_final=self.t_final,
            seed=self.master_seed,
            observables=tuple(self.observables),
            record_every=self.record_every,
            cutoff=self.cutoff,
            update=self.update,
        )

    def resolved(self) -> dict:
        """Plain-data view of every setting, for the manifest."""
        return {
            "model": {
                "type": self.model_type,
                "n_sites": self.n_sites,
                "epsilon": self.epsilon,
                "lambda": self.lam,
            },
            "dissipation": {"preset": self.dissipation, "ops": [list(o) for o in self.explicit_ops]},
            "initial": asdict(self.initial),
            "simulation": {
                "dt": self.dt,
                "t_final": self.t_final,
                "n_samples": self.n_samples,
                "bond_dim": self.initial.bond_dim,
                "master_seed": self.master_seed,
                "n_workers": self.n_workers,
                "record_every": self.record_every,
                "batch_size": self.batch_size,
                "update": self.update,
                "cutoff": self.cutoff,
            },
            "observables": [o.name for o in self.observables],
            "output": {
                "directory": str(self.output_dir),
                "formats": self.formats,
                "checkpoint": str(self.checkpoint) if self.checkpoint else None,
            },
        }


_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")
_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            lines[(section, "")] = no
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = no
    return lines


class _Fields:
    def __init__(self, parser: configparser.ConfigParser, lines, source: str):
        self.p = parser
        self.lines = lines
        self.source = source

    def where(self, section: str, key: str = "") -> str:
        no = self.lines.get((section, key)) or self.lines.get((section, ""))
        return f"{self.source}:{no}" if no else self.source

    def fail(self, section: str, key: str, msg: str):
        raise ConfigError(f"{self.where(section, key)}: [{section}] {key}: {msg}")

    def raw(self, section: str, key: str, default=None, required=False):
        if self.p.has_option(section, key):
            return self.p.get(section, key).strip()
        if required:
            where = self.where(section) if self.p.has_section(section) else self.source
            raise ConfigError(f"{where}: missing required field [{section}] {key}")
        return default

    def int_(self, section, key, default=None, required=False, minimum=None):
        v = self.raw(section, key, None, required)
        if v is None:
            return default
        try:
            out = int(v, 0)
        except ValueError:
            self.fail(section, key, f"expected an integer, got {v!r}")
        if minimum is not None and out < minimum:
            self.fail(section, key, f"must be >= {minimum}, got {out}")
        return out

    def float_(self, section, key, default=None, required=False, positive=False):
        v = self.raw(section, key, None, required)
        if v is None:
            return default
        try:
            out = float(v)
        except ValueError:
            self.fail(section, key, f"expected a number, got {v!r}")
        if positive and not out > 0:
            self.fail(section, key, f"must be positive, got {v}")
        return out

    def bool_(self, section, key, default=False):
        v = self.raw(section, key)
        if v is None:
            return default
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        self.fail(section, key, f"expected a boolean, got {v!r}")

    def choice(self, section, key, options, default=None, required=False):
        v = self.raw(section, key, default, required)
        if v is not None and v not in options:
            self.fail(section, key, f"must be one of {', '.join(options)}, got {v!r}")
        return v


def load_config(path) -> RunConfig:
    """Parse and validate a run configuration.

    Raises:
        ConfigError: Unreadable file, syntax error or invalid field; the
            message starts with ``file:line``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    return parse_config(text, str(path), base_dir=path.parent)


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"{source}:{lineno}: syntax error near {line.strip()!r}") from exc
    except configparser.Error as exc:
        no = getattr(exc, "lineno", None)
        raise ConfigError(f"{source}:{no}: {exc.message}" if no else f"{source}: {exc}") from exc
    f = _Fields(parser, _key_lines(text), source)

    known = {"model", "dissipation", "initial", "simulation", "observables", "output"}
    for sec in parser.sections():
        if sec not in known:
            f.fail(sec, "", f"unknown section (expected one of {', '.join(sorted(known))})")

    model_type = f.choice("model", "type", MODEL_TYPES, required=True)
    n_sites = f.int_("model", "n_sites", required=True, minimum=1)
    if model_type != "zero" and n_sites < 2:
        f.fail("model", "n_sites", f"{model_type} needs at least 2 sites")
    epsilon = f.float_("model", "epsilon", 1.0)
    lam = f.float_("model", "lambda", 1.0)

    dissipation = f.choice(
        "dissipation",
        "preset",
        ("none", "homogeneous_plus", "bihomogeneous", "edge_driving"),
        default="none",
    )
    if dissipation != "none" and n_sites < 2:
        f.fail("dissipation", "preset", "presets need at least 2 sites")
    if dissipation == "bihomogeneous" and n_sites % 2:
        f.fail("dissipation", "preset", "bihomogeneous needs an even number of sites")
    explicit = []
    ops_text = f.raw("dissipation", "ops", "")
    for item in filter(None, (s.strip() for s in ops_text.split(","))):
        site_s, _, name = item.partition(":")
        try:
            site = int(site_s)
        except ValueError:
            f.fail("dissipation", "ops", f"entry {item!r} must look like <site>:<op>")
        if name not in PAULI:
            f.fail("dissipation", "ops", f"unknown operator {name!r} in {item!r}")
        if not 1 <= site <= n_sites:
            f.fail("dissipation", "ops", f"site {site} outside 1..{n_sites}")
        explicit.append((site, name))

    bond_dim = f.int_("simulation", "bond_dim", 1, minimum=1)
    kind = f.choice("initial", "kind", ("product", "random"), default="product")
    try:
        initial = InitialSpec(
            kind=kind,
            pattern=f.raw("initial", "pattern", "down"),
            bond_dim=bond_dim,
            seed=f.int_("initial", "seed", 0, minimum=0),
            per_sample=f.bool_("initial", "per_sample", False),
        )
        if kind == "product":
            from .ensemble import product_kets

            product_kets(initial.pattern, n_sites)
    except MctdvpError as exc:
        f.fail("initial", "pattern" if kind == "product" else "kind", str(exc))

    dt = f.float_("simulation", "dt", required=True, positive=True)
    t_final = f.float_("simulation", "t_final", required=True, positive=True)
    if t_final < dt:
        f.fail("simulation", "t_final", "must be at least dt")
    n_samples = f.int_("simulation", "n_samples", required=True, minimum=1)
    master_seed = f.int_("simulation", "master_seed", 0, minimum=0)
    n_workers = f.int_("simulation", "n_workers", 1, minimum=1)
    record_every = f.int_("simulation", "record_every", 1, minimum=1)
    batch_size = f.int_("simulation", "batch_size", 256, minimum=1)
    update = f.choice("simulation", "update", UPDATE_MODES, default="auto")
    cutoff = f.float_("simulation", "cutoff", 1e-12)
    if not 0 <= cutoff < 1:
        f.fail("simulation", "cutoff", "must lie in [0, 1)")

    observables = []
    obs_text = f.raw("observables", "list", "sz_profile")
    for item in filter(None, (s.strip() for s in obs_text.split(","))):
        try:
            spec = parse_observable(item)
            spec.validate(n_sites, 2)
        except MctdvpError as exc:
            f.fail("observables", "list", str(exc))
        observables.append(spec)
    if not observables:
        f.fail("observables", "list", "no observables requested")

    out_dir = Path(f.raw("output", "directory", "out"))
    if base_dir is not None and not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    formats = [s.strip() for s in f.raw("output", "formats", "csv").split(",") if s.strip()]
    for fmt in formats:
        if fmt != "csv":
            f.fail("output", "formats", f"unsupported format {fmt!r} (only csv)")
    ck = f.raw("output", "checkpoint")
    checkpoint = None
    if ck:
        checkpoint = Path(ck)
        if base_dir is not None and not checkpoint.is_absolute():
            checkpoint = base_dir / checkpoint

    cfg = RunConfig(
        model_type=model_type,
        n_sites=n_sites,
        epsilon=epsilon,
        lam=lam,
        dissipation=dissipation,
        explicit_ops=explicit,
        initial=initial,
        dt=dt,
        t_final=t_final,
        n_samples=n_samples,
        master_seed=master_seed,
        n_workers=n_workers,
        record_every=record_every,
        batch_size=batch_size,
        update=update,
        cutoff=cutoff,
        observables=observables,
        output_dir=out_dir,
        formats=formats,
        checkpoint=checkpoint,
        source=source,
        raw={s: dict(parser.items(s)) for s in parser.sections()},
    )
    try:
        cfg.build_model()
    except MctdvpError as exc:
        f.fail("model", "epsilon" if model_type == "xxz" else "lambda", str(exc))
    return cfg
