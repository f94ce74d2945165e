"""Performance Model - Closed-form timing, throughput, power and I/O estimates

The pipeline period at sequence length N is the slowest of three stages:
    analog   N tokens, each one full activation of every resident macro
    digital  QK^T and SV on the output-stationary systolic arrays
    link     activation hand-off between chips (multi-chip mappings only)
TOPS(N) rises while the analog stage dominates and falls once the quadratic
attention stage takes over; the peak sits at the balance point.
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from src.core.errors import ConfigurationError, EmptyInputError
from src.services.transformer_runner import ModelConfig
from src.utils.log import get_logger

logger = get_logger(__name__)

ACTIVATION_BITS = 4.25  # MXFP4 element plus its share of the block scale
L2_PERSISTENT_BYTES = 30 * 2**20
GIB = 2**30

COMPONENT_GROUPS = ("digital", "analog", "constant")


@dataclass(frozen=True)
class Component:
    power_w: float
    area_mm2: float
    group: str

    def __post_init__(self):
        if self.group not in COMPONENT_GROUPS:
            raise ConfigurationError(f"component group must be one of {COMPONENT_GROUPS}, got {self.group!r}")


@dataclass(frozen=True)
class SystemConfig:
    """
    One accelerator die (or several identical dies pipelined end to end).

    Component powers are measured at reference_seq_len; each one scales with
    the duty of the stage it serves.
    """

    name: str
    array_dim: int
    area_mm2: float
    reference_seq_len: int
    components: dict = field(default_factory=dict)
    transformer_blocks: int = 12
    macros_per_block: int = 12
    mux_degree: int = 10
    bitplanes: int = 5
    passes: int = 2
    f_analog: float = 169e6
    f_digital: float = 1e9
    pe_rows: int = 32
    pe_cols: int = 64
    arrays_per_block: int = 2
    c_fill: int = 8
    chips: int = 1
    max_seq: int = 512
    link_bandwidth: float = 16e9
    io_energy_pj_per_bit: float = 19.0
    macro_power_w: float = 0.0
    macro_area_mm2: float = 0.0

    def __post_init__(self):
        if self.passes not in (1, 2):
            raise ConfigurationError(f"passes must be 1 or 2, got {self.passes}")
        for label in ("array_dim", "mux_degree", "chips", "transformer_blocks"):
            if getattr(self, label) < 1:
                raise ConfigurationError(f"{self.name}: {label} must be positive")
        components = {
            name: c if isinstance(c, Component) else Component(**c)
            for name, c in self.components.items()
        }
        object.__setattr__(self, "components", components)

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown system config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def with_chips(self, chips):
        return replace(self, chips=chips)

    def with_passes(self, passes):
        return replace(self, passes=passes)

    @property
    def token_latency(self):
        """Seconds for one token through the analog stage"""
        return self.passes * self.mux_degree / self.f_analog

    def group_power(self, group):
        return sum(c.power_w for c in self.components.values() if c.group == group)

    def filling_model(self):
        """Encoder that fills every block and array of one die"""
        d = self.array_dim
        return ModelConfig(
            name=f"{self.name}-fill",
            layers=self.transformer_blocks,
            d_model=d,
            ffn_dim=4 * d,
            heads=d // 64,
            d_k=64,
            max_seq=self.max_seq,
        )


@dataclass
class PerfReport:
    model: str
    system: str
    chips: int
    seq_len: int
    t_analog: float
    t_digital: float
    t_link: float
    period: float
    fps: float
    static_ops: float
    dynamic_ops: float
    tops: float
    power_w: float
    tops_per_w: float
    tops_per_mm2: float
    io_bandwidth_gibs: float
    io_power_w: float

    @property
    def ops_per_seq(self):
        return self.static_ops + self.dynamic_ops

    @property
    def bound(self):
        return "digital" if self.t_digital >= self.t_analog else "analog"

    def as_dict(self):
        row = asdict(self)
        row["bound"] = self.bound
        return row


def macro_tops(rows, cols, mux, f, passes=1):
    """Peak tera-ops of one analog macro: one MAC per cell per activation"""
    if min(rows, cols, mux, f, passes) <= 0:
        raise ConfigurationError("macro parameters must be positive")
    return 2.0 * rows * cols * f / (mux * passes) / 1e12


def macro_summary(system, passes=1):
    """TOPS, TOPS/W and TOPS/mm^2 of one macro; area does not change with passes"""
    tops = macro_tops(system.array_dim, system.array_dim, system.mux_degree, system.f_analog, passes)
    return {
        "array": f"{system.array_dim}x{system.array_dim}",
        "passes": passes,
        "tops": tops,
        "tops_per_w": tops / system.macro_power_w if system.macro_power_w else float("nan"),
        "tops_per_mm2": tops / system.macro_area_mm2 if system.macro_area_mm2 else float("nan"),
        "area_mm2": system.macro_area_mm2,
    }


def flop_split(model, seq_len):
    """
    Ops per sequence split into static (weights resident in the macros) and
    dynamic (QK^T and SV over all heads).
    """
    d, ffn, n = model.d_model, model.ffn_dim, seq_len
    static = model.layers * (4 * 2 * d * d + 2 * 2 * d * ffn) * n
    dynamic = model.layers * 4 * n * n * d
    return float(static), float(dynamic)


def static_fraction(model, seq_len):
    static, dynamic = flop_split(model, seq_len)
    total = static + dynamic
    return static / total if total else 1.0


def required_chips(model, system):
    return math.ceil(model.layers / system.transformer_blocks)


def check_mapping(model, system):
    if model.d_model > system.array_dim:
        raise ConfigurationError(
            f"{model.name}: d_model={model.d_model} exceeds the {system.array_dim}-wide arrays of {system.name}"
        )
    needed = required_chips(model, system)
    if needed > system.chips:
        raise ConfigurationError(f"{model.name} needs {needed} chips of {system.name}, system has {system.chips}")


def digital_cycles(model, system, seq_len):
    """Cycles per layer of the attention stage; the two GEMMs run on separate arrays"""
    n, d_k, fill = seq_len, model.d_k, system.c_fill
    row_tiles = math.ceil(n / system.pe_rows)
    qk = model.heads * row_tiles * math.ceil(n / system.pe_cols) * (d_k + fill)
    sv = model.heads * row_tiles * math.ceil(d_k / system.pe_cols) * (n + fill)
    return max(qk, sv)


def stage_times(model, system, seq_len):
    """(analog, digital, link) seconds per pipeline step"""
    check_mapping(model, system)
    t_analog = seq_len * system.token_latency
    t_digital = digital_cycles(model, system, seq_len) / system.f_digital
    t_link = 0.0
    if system.chips > 1:
        t_link = seq_len * model.d_model * ACTIVATION_BITS / 8 / system.link_bandwidth
    return t_analog, t_digital, t_link


def pipeline_period(model, system, seq_len):
    return max(stage_times(model, system, seq_len))


def _duties(model, system, seq_len):
    t_analog, t_digital, t_link = stage_times(model, system, seq_len)
    period = max(t_analog, t_digital, t_link)
    return {"analog": t_analog / period, "digital": t_digital / period, "constant": 1.0}


def component_peaks(system):
    """Per-component power at full duty, derived at the reference point"""
    reference = _duties(system.filling_model(), system.with_chips(1), system.reference_seq_len)
    return {
        name: c.power_w / reference[c.group] if reference[c.group] else c.power_w
        for name, c in system.components.items()
    }


def power_estimate(model, system, seq_len):
    """Watts for the whole mapped system at sequence length N"""
    duties = _duties(model, system, seq_len)
    peaks = component_peaks(system)
    per_chip = sum(peaks[name] * duties[c.group] for name, c in system.components.items())
    return per_chip * system.chips


def io_bandwidth(model, system, fps, seq_len):
    """GiB/s of activation traffic: input and output streams plus inter-chip links"""
    streams = 2 + (system.chips - 1)
    return fps * seq_len * model.d_model * streams * ACTIVATION_BITS / 8 / GIB


def model_throughput(model, system, seq_len=None):
    """Full report for one model at its sequence length (default: the model's own)"""
    n = seq_len or model.seq_len
    if n > system.max_seq:
        raise ConfigurationError(f"{model.name}: N={n} exceeds the system max_seq={system.max_seq}")
    t_analog, t_digital, t_link = stage_times(model, system, n)
    period = max(t_analog, t_digital, t_link)
    fps = 1.0 / period
    static, dynamic = flop_split(model, n)
    tops = (static + dynamic) * fps / 1e12
    power = power_estimate(model, system, n)
    bandwidth = io_bandwidth(model, system, fps, n)
    area = system.area_mm2 * system.chips
    report = PerfReport(
        model=model.name,
        system=system.name,
        chips=system.chips,
        seq_len=n,
        t_analog=t_analog,
        t_digital=t_digital,
        t_link=t_link,
        period=period,
        fps=fps,
        static_ops=static,
        dynamic_ops=dynamic,
        tops=tops,
        power_w=power,
        tops_per_w=tops / power if power else float("nan"),
        tops_per_mm2=tops / area if area else float("nan"),
        io_bandwidth_gibs=bandwidth,
        io_power_w=bandwidth * GIB * 8 * system.io_energy_pj_per_bit * 1e-12,
    )
    logger.debug(f"{model.name} on {system.chips}x{system.name}: {fps:.0f} FPS, {tops:.1f} TOPS")
    return report


def tops_curve(model, system, seq_lens):
    """
    TOPS at every N of the grid and the balance point (first maximum).

    Returns:
        (list of PerfReport, balance N)
    """
    seq_lens = list(seq_lens)
    if not seq_lens:
        raise EmptyInputError("sequence sweep needs at least one length")
    reports = [model_throughput(model, system, n) for n in seq_lens]
    best = int(np.argmax([r.tops for r in reports]))
    return reports, seq_lens[best]


def system_peak(system):
    """Peak row of a system: balance N, TOPS, power, TOPS/W and TOPS/mm^2"""
    single = system.with_chips(1)
    reports, balance = tops_curve(single.filling_model(), single, range(1, single.max_seq + 1))
    peak = reports[balance - 1]
    return {
        "system": system.name,
        "array_dim": system.array_dim,
        "balance_seq_len": balance,
        "area_mm2": system.area_mm2,
        "power_w": peak.power_w,
        "tops": peak.tops,
        "tops_per_mm2": peak.tops_per_mm2,
        "tops_per_w": peak.tops_per_w,
    }


def max_batch(model, seq_len=None):
    """Largest batch whose 4.25-bit activation working set fits the persistent L2"""
    n = seq_len or model.seq_len
    per_item = n * model.d_model * ACTIVATION_BITS / 8
    return int(L2_PERSISTENT_BYTES // per_item)


def io_penalty(model, batch, params=None, seq_len=None):
    """
    Bytes moved per item by a weight-streaming accelerator relative to the
    activation stream alone: 1 + W / (B * A_io).
    """
    if batch < 1:
        raise ConfigurationError(f"batch must be >= 1, got {batch}")
    params = params or model.params
    if not params:
        raise ConfigurationError(f"{model.name}: parameter count is required for the I/O penalty")
    n = seq_len or model.seq_len
    activation_bytes = 2 * n * model.d_model * 2
    weight_bytes = params * 2
    return 1.0 + weight_bytes / (batch * activation_bytes)
