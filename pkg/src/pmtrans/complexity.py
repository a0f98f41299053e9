"""Attention-pair accounting for full, axial, patched and pyramid schemes.

Closed-form counts are paired with an explicit pixel-level enumeration that
builds each attended-pairs relation as a boolean matrix. Axial schemes count
the height pass and the width pass separately, so a pixel's pairing with
itself appears once per pass.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .tensor import ConfigError, ContractError

SCHEMES = ("full", "axial_full_span", "medtrans_patched", "pmtrans_short", "pmtrans_mid", "pmtrans_long")
BRANCH_SCALE = {"pmtrans_short": 1, "pmtrans_mid": 2, "pmtrans_long": 4}
BRANCHES = {"short": 1, "mid": 2, "long": 4}
ENUMERATION_LIMIT = 4096
PUBLISHED_LONG_RATIO = Fraction(1, 216)
DISCREPANCY_NOTE = (
    "published ratio 1/216 does not follow from the stated counts "
    "(H/4+W/4)*HW/16 and (H+W)*HW, which give 1/64"
)


@dataclass(frozen=True)
class AttentionScheme:
    kind: str
    H: int
    W: int
    span_h: Optional[int] = None
    span_w: Optional[int] = None

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.kind!r}")
        if self.H < 1 or self.W < 1:
            raise ConfigError("H and W must be positive")
        if self.kind not in ("full", "axial_full_span"):
            if self.H < 4 or self.W < 4 or self.H % 4 or self.W % 4:
                raise ConfigError(f"{self.kind} needs H, W >= 4 and divisible by 4, got {self.H}x{self.W}")

    @property
    def spans(self) -> tuple[int, int]:
        """Window length along height and width, in the scheme's own grid."""
        if self.kind in BRANCH_SCALE:
            return (self.span_h or self.H // 4, self.span_w or self.W // 4)
        if self.kind == "medtrans_patched":
            return self.H // 4, self.W // 4
        return self.H, self.W

    @property
    def grid(self) -> tuple[int, int]:
        s = BRANCH_SCALE.get(self.kind, 1)
        return self.H // s, self.W // s


def count_attention_pairs(scheme: AttentionScheme) -> int:
    """Nominal pair count: every window is counted at its full length."""
    H, W = scheme.H, scheme.W
    if scheme.kind == "full":
        return H * H * W * W
    if scheme.kind == "axial_full_span":
        return H * W * (H + W)
    if scheme.kind == "medtrans_patched":
        return (H // 4 + W // 4) * H * W
    gh, gw = scheme.grid
    sh, sw = scheme.spans
    return gh * gw * (min(sh, gh) + min(sw, gw))


def _truncated_axis_total(length: int, span: int) -> int:
    """Sum over positions of the border-truncated centred window length."""
    if span >= length:
        return length * length
    lo, hi = (span - 1) // 2, span // 2
    return sum(min(length - 1, i + hi) - max(0, i - lo) + 1 for i in range(length))


def effective_attention_pairs(scheme: AttentionScheme) -> int:
    """Pair count after centred windows are truncated at the borders."""
    if scheme.kind not in BRANCH_SCALE:
        return count_attention_pairs(scheme)
    gh, gw = scheme.grid
    sh, sw = scheme.spans
    return gw * _truncated_axis_total(gh, sh) + gh * _truncated_axis_total(gw, sw)


@dataclass
class Enumeration:
    nominal: int
    effective: int
    distinct: int


def _axis_window(i: int, length: int, span: int, truncate: bool) -> range:
    if span >= length:
        return range(length)
    lo, hi = (span - 1) // 2, span // 2
    if truncate:
        return range(max(0, i - lo), min(length - 1, i + hi) + 1)
    return range(i - lo, i + hi + 1)


def brute_force_pair_enumeration(scheme: AttentionScheme) -> Enumeration:
    """Count attended pairs by filling explicit boolean relations pixel by pixel.

    The nominal relation lives on a grid padded by the window half-widths so
    that out-of-image window slots are kept; the effective relation is the
    truncated one. ``distinct`` is the size of the union of both passes.
    """
    gh, gw = scheme.grid
    if scheme.H * scheme.W > ENUMERATION_LIMIT:
        raise ContractError(f"enumeration refused: {scheme.H}x{scheme.W} exceeds {ENUMERATION_LIMIT} pixels")
    n = gh * gw

    if scheme.kind == "full":
        rel = np.zeros((n, n), dtype=bool)
        for p in range(n):
            rel[p, :] = True  # every pixel attends every pixel
        c = int(rel.sum())
        return Enumeration(c, c, c)

    if scheme.kind == "medtrans_patched":
        ph, pw = scheme.H // 4, scheme.W // 4
        col = np.zeros((n, n), dtype=bool)
        row = np.zeros((n, n), dtype=bool)
        for r in range(gh):
            for c in range(gw):
                p = r * gw + c
                r0, c0 = (r // ph) * ph, (c // pw) * pw
                for r2 in range(r0, r0 + ph):
                    col[p, r2 * gw + c] = True
                for c2 in range(c0, c0 + pw):
                    row[p, r * gw + c2] = True
        total = int(col.sum() + row.sum())
        return Enumeration(total, total, int((col | row).sum()))

    sh, sw = scheme.spans
    pad_h = 0 if sh >= gh else sh
    pad_w = 0 if sw >= gw else sw
    ph_, pw_ = gh + 2 * pad_h, gw + 2 * pad_w
    nom_col = np.zeros((n, ph_ * pw_), dtype=bool)
    nom_row = np.zeros((n, ph_ * pw_), dtype=bool)
    eff_col = np.zeros((n, n), dtype=bool)
    eff_row = np.zeros((n, n), dtype=bool)
    for r in range(gh):
        for c in range(gw):
            p = r * gw + c
            for r2 in _axis_window(r, gh, sh, truncate=False):
                nom_col[p, (r2 + pad_h) * pw_ + c + pad_w] = True
            for c2 in _axis_window(c, gw, sw, truncate=False):
                nom_row[p, (r + pad_h) * pw_ + c2 + pad_w] = True
            for r2 in _axis_window(r, gh, sh, truncate=True):
                eff_col[p, r2 * gw + c] = True
            for c2 in _axis_window(c, gw, sw, truncate=True):
                eff_row[p, r * gw + c2] = True
    return Enumeration(
        nominal=int(nom_col.sum() + nom_row.sum()),
        effective=int(eff_col.sum() + eff_row.sum()),
        distinct=int((eff_col | eff_row).sum()),
    )


def receptive_field(branch: str, H: int, W: int) -> tuple[int, int]:
    """Extent on the original image covered by one attention layer's window."""
    if branch not in BRANCHES:
        raise ConfigError(f"branch must be one of {sorted(BRANCHES)}")
    s = BRANCHES[branch]
    scheme = AttentionScheme(f"pmtrans_{branch}", H, W)
    gh, gw = scheme.grid
    sh, sw = scheme.spans
    return min(sh, gh) * s, min(sw, gw) * s


def vit_patch_pairs(H: int, W: int, patch: int) -> int:
    if H % patch or W % patch:
        raise ConfigError(f"patch {patch} does not divide {H}x{W}")
    return (H * W // patch**2) ** 2


@dataclass
class SchemeRow:
    scheme: str
    H: int
    W: int
    nominal_pairs: int
    effective_pairs: int
    ratio_vs_medtrans: Fraction
    note: str = ""


@dataclass
class AttentionCostReport:
    H: int
    W: int
    rows: list[SchemeRow]
    receptive_fields: dict[str, tuple[int, int]]
    long_vs_medtrans: Fraction
    published_long_vs_medtrans: Fraction = PUBLISHED_LONG_RATIO
    notes: list[str] = field(default_factory=list)

    @property
    def matches_published(self) -> bool:
        return self.long_vs_medtrans == self.published_long_vs_medtrans

    def row(self, scheme: str) -> SchemeRow:
        return next(r for r in self.rows if r.scheme == scheme)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scheme", "H", "W", "nominal_pairs", "effective_pairs",
                    "ratio_vs_medtrans_num", "ratio_vs_medtrans_den", "note"])
        for r in self.rows:
            w.writerow([r.scheme, r.H, r.W, r.nominal_pairs, r.effective_pairs,
                        r.ratio_vs_medtrans.numerator, r.ratio_vs_medtrans.denominator, r.note])
        return buf.getvalue()

    def format_table(self) -> str:
        lines = [f"attention pairs for {self.H}x{self.W}"]
        lines.append(f"{'scheme':<18}{'nominal':>14}{'effective':>14}{'vs medtrans':>14}")
        for r in self.rows:
            lines.append(f"{r.scheme:<18}{r.nominal_pairs:>14}{r.effective_pairs:>14}{str(r.ratio_vs_medtrans):>14}")
        lines.append("receptive fields (h x w on the original image):")
        for b, (h, w) in self.receptive_fields.items():
            lines.append(f"  {b:<6} {h} x {w}")
        lines.append(f"long / medtrans-global = {self.long_vs_medtrans}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def scheme_comparison_report(H: int, W: int, patch: int = 16) -> AttentionCostReport:
    """Tabulate all schemes; the MedTrans global pass, ``(H+W)*HW``, is the ratio base."""
    if H % 4 or W % 4 or H < 4 or W < 4:
        raise ConfigError(f"H and W must be >= 4 and divisible by 4, got {H}x{W}")
    base = count_attention_pairs(AttentionScheme("axial_full_span", H, W))
    rows = []
    for kind in SCHEMES:
        s = AttentionScheme(kind, H, W)
        nom, eff = count_attention_pairs(s), effective_attention_pairs(s)
        note = DISCREPANCY_NOTE if kind == "pmtrans_long" else ""
        if kind == "axial_full_span":
            note = "medtrans global pass (ratio base)"
        rows.append(SchemeRow(kind, H, W, nom, eff, Fraction(nom, base), note))
    if H % patch == 0 and W % patch == 0:
        vp = vit_patch_pairs(H, W, patch)
        rows.append(SchemeRow(f"vit_patch{patch}", H, W, vp, vp, Fraction(vp, base),
                              "patch-to-patch formula only, not enumerated"))
    long_ratio = next(r.ratio_vs_medtrans for r in rows if r.scheme == "pmtrans_long")
    notes = [f"long-range/medtrans ratio from the stated formulas is {long_ratio}; published figure is 1/216"]
    if long_ratio != PUBLISHED_LONG_RATIO:
        notes.append("DISCREPANCY: " + DISCREPANCY_NOTE)
    return AttentionCostReport(
        H=H, W=W, rows=rows,
        receptive_fields={b: receptive_field(b, H, W) for b in BRANCHES},
        long_vs_medtrans=long_ratio, notes=notes,
    )
