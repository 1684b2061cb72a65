"""Sensitivity-ranked bit assignment and model size accounting.

Layers are ranked by their curvature sensitivity (descending); more
sensitive layers receive more bits. Size is straight arithmetic over
parameter counts, bits / 8 bytes each, reported in MiB (2^20 bytes).
Per-group clipping metadata (q0 + delta, 8 bytes per group) is accounted
separately so headline weight sizes stay comparable across group schemes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

MIB = float(2**20)

CATEGORIES = ("embedding_word", "embedding_position", "embedding", "encoder", "output")


class AllocationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerShape:
    """Parameter accounting for one named layer.

    ``quantizable`` counts weights that take the layer's assigned bit
    width; ``fp_params`` counts parameters pinned at 32 bits (layer norm,
    biases, the whole classifier head).
    """

    name: str
    category: str
    quantizable: int
    fp_params: int = 0

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise AllocationError(f"unknown category {self.category!r}")
        if self.quantizable < 0 or self.fp_params < 0:
            raise AllocationError("parameter counts must be non-negative")


@dataclass(frozen=True)
class EmbeddingBits:
    word: int = 8
    position: int = 8


@dataclass
class BitAllocation:
    """Bit width per named layer plus embedding/activation settings.

    The output head is always full precision; asking for anything else
    is rejected rather than silently fixed.
    """

    layer_bits: dict[str, int] = field(default_factory=dict)
    e_bits: EmbeddingBits = field(default_factory=EmbeddingBits)
    a_bits: int = 8

    def __post_init__(self):
        for name, b in self.layer_bits.items():
            if not 1 <= b <= 32:
                raise AllocationError(f"layer {name!r}: bits {b} out of [1, 32]")

    def bits_for(self, shape: LayerShape) -> int:
        if shape.category == "output":
            return 32
        if shape.name in self.layer_bits:
            return self.layer_bits[shape.name]
        if shape.category == "embedding_word":
            return self.e_bits.word
        if shape.category == "embedding_position":
            return self.e_bits.position
        if shape.category == "embedding":
            return self.e_bits.word
        raise AllocationError(f"no bits assigned for layer {shape.name!r}")


def allocate_bits(
    omegas: dict[str, float],
    menu: list[int],
    high_count: int | None = None,
    band_sizes: list[int] | None = None,
    e_bits: EmbeddingBits | None = None,
    a_bits: int = 8,
) -> BitAllocation:
    """Assign menu bit widths to layers by descending sensitivity.

    ``menu`` is sorted descending internally; the ``band_sizes[i]`` most
    sensitive layers (ties broken by ascending layer order in ``omegas``)
    take ``menu[i]`` bits. Two-level menus may instead pass ``high_count``,
    the size of the top band. Band sizes must cover every layer exactly.
    """
    if not omegas:
        raise AllocationError("no sensitivities given")
    if not menu or any(not 1 <= b <= 32 for b in menu):
        raise AllocationError(f"invalid bit menu {menu}")
    menu_sorted = sorted(set(menu), reverse=True)
    n = len(omegas)
    if band_sizes is None:
        if len(menu_sorted) == 1:
            band_sizes = [n]
        elif len(menu_sorted) == 2:
            if high_count is None or not 0 <= high_count <= n:
                raise AllocationError("two-level menu needs high_count in [0, n_layers]")
            band_sizes = [high_count, n - high_count]
        else:
            raise AllocationError("menus with >2 levels need explicit band_sizes")
    if len(band_sizes) != len(menu_sorted) or any(s < 0 for s in band_sizes):
        raise AllocationError("band_sizes must give one non-negative size per menu level")
    if sum(band_sizes) != n:
        raise AllocationError(f"band sizes {band_sizes} do not cover {n} layers")

    order = list(omegas)  # insertion order == layer order, the tiebreak
    ranked = sorted(range(n), key=lambda i: (-float(omegas[order[i]]), i))
    layer_bits: dict[str, int] = {}
    pos = 0
    for bits, size in zip(menu_sorted, band_sizes):
        for i in ranked[pos : pos + size]:
            layer_bits[order[i]] = bits
        pos += size
    layer_bits = {name: layer_bits[name] for name in order}
    return BitAllocation(layer_bits, e_bits or EmbeddingBits(), a_bits)


def reverse_allocation(alloc: BitAllocation, omegas: dict[str, float] | None = None) -> BitAllocation:
    """Mirror a bit assignment across the sensitivity ranking (ablation control).

    The multiset of bit widths is preserved, so the reversed model has
    exactly the original's size; sensitive layers simply end up with the
    fewest bits. With equal level counts this is the same as swapping the
    two levels layer by layer. Unequal level counts need ``omegas`` (the
    ranking) to know which layers trade places.
    """
    levels = sorted(set(alloc.layer_bits.values()))
    if len(levels) == 1:
        return BitAllocation(dict(alloc.layer_bits), alloc.e_bits, alloc.a_bits)
    if len(levels) != 2:
        raise AllocationError("reverse_allocation needs at most two bit levels")
    names = list(alloc.layer_bits)
    if omegas is None:
        lo, hi = levels
        n_lo = sum(1 for b in alloc.layer_bits.values() if b == lo)
        if n_lo * 2 != len(names):
            raise AllocationError(
                "unequal level counts: pass omegas so the ranking can be mirrored"
            )
        flipped = {n: (hi if b == lo else lo) for n, b in alloc.layer_bits.items()}
        return BitAllocation(flipped, alloc.e_bits, alloc.a_bits)
    missing = [n for n in names if n not in omegas]
    if missing:
        raise AllocationError(f"omegas missing layers {missing}")
    ranked = sorted(range(len(names)), key=lambda i: (-float(omegas[names[i]]), i))
    rank_bits = [alloc.layer_bits[names[i]] for i in ranked]
    mirrored = {}
    for pos, i in enumerate(ranked):
        mirrored[names[i]] = rank_bits[len(names) - 1 - pos]
    ordered = {n: mirrored[n] for n in names}
    return BitAllocation(ordered, alloc.e_bits, alloc.a_bits)


@dataclass(frozen=True)
class SizeReport:
    total_bytes: float
    no_embedding_bytes: float
    metadata_bytes: float = 0.0

    @property
    def total_mb(self) -> float:
        return self.total_bytes / MIB

    @property
    def no_embedding_mb(self) -> float:
        return self.no_embedding_bytes / MIB

    @property
    def metadata_mb(self) -> float:
        return self.metadata_bytes / MIB


def model_size(
    alloc: BitAllocation,
    shapes: list[LayerShape],
    group_counts: dict[str, int] | None = None,
) -> SizeReport:
    """Bytes under an allocation: quantizable params at their bits, the
    rest at 32. ``group_counts`` adds 8 bytes of range metadata per group,
    reported separately from the headline number."""
    names = [s.name for s in shapes]
    if len(set(names)) != len(names):
        raise AllocationError("duplicate layer names in shapes")
    total = 0.0
    no_emb = 0.0
    for s in shapes:
        bits = alloc.bits_for(s)
        b = s.quantizable * bits / 8.0 + s.fp_params * 4.0
        total += b
        if not s.category.startswith("embedding"):
            no_emb += b
    meta = 8.0 * sum(group_counts.values()) if group_counts else 0.0
    return SizeReport(total, no_emb, meta)
