"""Diagnostics - Sticky numeric event counters"""

from dataclasses import dataclass, fields


@dataclass
class Diagnostics:
    """Counters raised by saturating or clipping datapath events.

    Every counter only ever increases. Merging is a field-wise sum, so the
    result is independent of the order partial counters are combined in.
    """

    bf16_saturations: int = 0
    fp4_saturations: int = 0
    conversion_saturations: int = 0
    underflow_blocks: int = 0
    overflow_blocks: int = 0
    adc_saturations: int = 0
    et_clips: int = 0
    block_evaluations: int = 0

    def bump(self, name, count=1):
        setattr(self, name, getattr(self, name) + int(count))

    def merge(self, other):
        for f in fields(self):
            self.bump(f.name, getattr(other, f.name))
        return self

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def saturated(self):
        return any(
            getattr(self, name)
            for name in ("bf16_saturations", "conversion_saturations", "adc_saturations")
        )


def bump(diagnostics, name, count=1):
    """Increment a counter on an optional Diagnostics object"""
    if diagnostics is not None and count:
        diagnostics.bump(name, count)
