"""Parameter counts for every built-in model kind, split by module."""
from capsdense.models import KINDS, build_preset, param_breakdown

for kind in KINDS:
    breakdown = param_breakdown(build_preset(kind))
    total = sum(breakdown.values())
    parts = ", ".join(f"{k} {v / 1e6:.2f}M" for k, v in breakdown.items())
    print(f"{kind:22s} {total:>12,d}   {parts}")
