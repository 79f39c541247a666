"""Histogram-matching style harmonization across scanner vendors.

A reference distribution is pooled from one random z-slice of each of ``n``
randomly drawn volumes (seeded, without replacement).  Matching replaces each
voxel value by the reference quantile at that value's own cumulative
probability; the source CDF is quantized to 256 bins with a mid-rank
convention for ties, so constant regions map to stable values and rank order
is never inverted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidParameterError, MissingVendorError
from .volume import ScalarVolume

SOURCE_BINS = 256


@dataclass(frozen=True, eq=False)
class ReferenceHistogram:
    """Pooled reference intensity sample with its empirical CDF."""

    n_volumes: int
    seed: int
    intensities: np.ndarray  # sorted, float64

    def __post_init__(self):
        values = np.sort(np.asarray(self.intensities, dtype=np.float64).ravel())
        if values.size == 0:
            raise InvalidParameterError("reference sample is empty")
        if not np.all(np.isfinite(values)):
            raise InvalidParameterError("reference sample contains non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "intensities", values)

    @property
    def cdf(self) -> np.ndarray:
        """Empirical CDF values at the sorted sample points."""
        n = self.intensities.size
        return np.arange(1, n + 1, dtype=np.float64) / n

    def quantile(self, q) -> np.ndarray:
        """Monotone lookup from cumulative probability to reference intensity.

        Linear interpolation between order statistics at mid-rank positions
        (i + 0.5)/N, clamped to the sample extremes.
        """
        n = self.intensities.size
        positions = (np.arange(n, dtype=np.float64) + 0.5) / n
        return np.interp(np.asarray(q, dtype=np.float64), positions, self.intensities)

    @property
    def median(self) -> float:
        return float(self.quantile(0.5))


def build_reference(corpus: list[ScalarVolume], n: int, seed: int) -> ReferenceHistogram:
    """Pool one random z-slice from each of ``n`` volumes drawn without replacement."""
    if len(corpus) == 0:
        raise InvalidParameterError("corpus is empty")
    if not 1 <= n <= len(corpus):
        raise InvalidParameterError(f"n must be in [1, {len(corpus)}], got {n}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(corpus), size=n, replace=False)
    slices = []
    for idx in chosen:
        vol = corpus[int(idx)]
        k = int(rng.integers(0, vol.dims[2]))
        slices.append(np.asarray(vol.data[:, :, k], dtype=np.float64).ravel())
    return ReferenceHistogram(n_volumes=n, seed=seed, intensities=np.concatenate(slices))


@dataclass(frozen=True, eq=False)
class CdfMapping:
    """Monotone intensity lookup: source value -> source CDF -> reference quantile."""

    bin_edges: np.ndarray  # 257 ascending edges spanning the source range
    counts: np.ndarray  # 256 per-bin counts of the source volume
    reference: ReferenceHistogram

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if edges.shape != (SOURCE_BINS + 1,) or np.any(np.diff(edges) <= 0):
            raise InvalidParameterError("bin_edges must be 257 strictly ascending values")
        if counts.shape != (SOURCE_BINS,) or counts.sum() <= 0:
            raise InvalidParameterError("counts must hold 256 bins with a positive total")
        edges.flags.writeable = False
        counts.flags.writeable = False
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def source_cdf(self) -> np.ndarray:
        """Per-bin cumulative probability; non-decreasing, final value 1."""
        cum = np.cumsum(self.counts, dtype=np.float64)
        return cum / cum[-1]

    def _midrank(self) -> np.ndarray:
        cum = np.cumsum(self.counts, dtype=np.float64)
        lower = np.concatenate([[0.0], cum[:-1]])
        return (lower + cum) / (2.0 * cum[-1])

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Map source values through the CDF equalization (monotone)."""
        values = np.asarray(values, dtype=np.float64)
        lo, hi = self.bin_edges[0], self.bin_edges[-1]
        width = hi - lo
        bins = np.clip(((values - lo) / width * SOURCE_BINS).astype(np.int64), 0, SOURCE_BINS - 1)
        return self.reference.quantile(self._midrank())[bins]


def build_cdf_mapping(vol: ScalarVolume, ref: ReferenceHistogram) -> CdfMapping:
    """Quantize the volume's empirical CDF to 256 bins over its own range."""
    values = vol.data.ravel()
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        raise InvalidParameterError("volume is constant; its CDF mapping is degenerate")
    edges = np.linspace(lo, hi, SOURCE_BINS + 1)
    counts, _ = np.histogram(values, bins=edges)
    return CdfMapping(bin_edges=edges, counts=counts, reference=ref)


class MatchResult(NamedTuple):
    volume: ScalarVolume
    degenerate: bool


def histogram_match(vol: ScalarVolume, ref: ReferenceHistogram) -> MatchResult:
    """Replace each voxel value by the reference quantile at its source CDF value.

    Rank order is preserved (ties may merge, never reorder).  A constant
    input has no usable CDF: it returns a volume filled with the reference
    median and the ``degenerate`` flag set.
    """
    if vol.is_constant():
        filled = np.full(vol.dims, ref.median, dtype=np.float32)
        return MatchResult(ScalarVolume(filled, vol.spacing), True)
    mapping = build_cdf_mapping(vol, ref)
    matched = mapping.apply(vol.data).astype(np.float32)
    return MatchResult(ScalarVolume(matched, vol.spacing), False)


def vendor_transfer(
    dataset: list[tuple[ScalarVolume, str]],
    from_vendor: str,
    to_vendor: str,
    seed: int,
    n_ref: int = 100,
) -> list[ScalarVolume]:
    """Match every ``from_vendor`` volume to a reference built from ``to_vendor``.

    Returns new volumes in dataset order; inputs are untouched (augmentation
    adds, never replaces).  ``n_ref`` caps at the target-vendor subset size.
    """
    tags = {tag for _, tag in dataset}
    for tag in (from_vendor, to_vendor):
        if tag not in tags:
            raise MissingVendorError(f"vendor {tag!r} absent from dataset (present: {sorted(tags)})")
    target_corpus = [vol for vol, tag in dataset if tag == to_vendor]
    ref = build_reference(target_corpus, min(n_ref, len(target_corpus)), seed)
    return [histogram_match(vol, ref).volume for vol, tag in dataset if tag == from_vendor]


def ks_statistic(sample_a, sample_b) -> float:
    """Exact Kolmogorov-Smirnov statistic between two empirical distributions."""
    a = np.sort(np.asarray(sample_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(sample_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise InvalidParameterError("KS statistic needs non-empty samples")
    points = np.concatenate([a, b])
    gap = 0.0
    for side in ("right", "left"):
        fa = np.searchsorted(a, points, side=side) / a.size
        fb = np.searchsorted(b, points, side=side) / b.size
        gap = max(gap, float(np.max(np.abs(fa - fb))))
    return gap


@dataclass(frozen=True, eq=False)
class HistogramReport:
    """Per-tag normalized histograms over a shared range plus pairwise KS."""

    bins: int
    range_min: float
    range_max: float
    densities: dict[str, np.ndarray]  # per tag, sums to 1
    ks: dict[tuple[str, str], float]

    def to_text(self) -> str:
        lines = [
            f"bins = {self.bins}",
            f"range_min = {self.range_min!r}",
            f"range_max = {self.range_max!r}",
        ]
        edges = np.linspace(self.range_min, self.range_max, self.bins + 1)
        for tag in sorted(self.densities):
            dens = self.densities[tag]
            for b in range(self.bins):
                lines.append(
                    f"hist {tag} {b} {float(edges[b])!r} {float(edges[b + 1])!r} {float(dens[b])!r}"
                )
        for (ta, tb), stat in sorted(self.ks.items()):
            lines.append(f"ks {ta} {tb} {stat!r}")
        return "\n".join(lines) + "\n"


def histogram_report(groups: dict[str, list[ScalarVolume]], bins: int) -> HistogramReport:
    """Compare intensity distributions across tagged groups of volumes."""
    if bins < 2:
        raise InvalidParameterError("bins must be >= 2")
    if not groups:
        raise InvalidParameterError("no groups given")
    pooled: dict[str, np.ndarray] = {}
    for tag, vols in groups.items():
        if not vols:
            raise InvalidParameterError(f"group {tag!r} is empty")
        pooled[tag] = np.concatenate([v.data.ravel() for v in vols]).astype(np.float64)

    lo = min(float(p.min()) for p in pooled.values())
    hi = max(float(p.max()) for p in pooled.values())
    if hi <= lo:
        hi = lo + 1.0  # all values identical: everything lands in bin 0
    edges = np.linspace(lo, hi, bins + 1)
    densities = {}
    for tag, values in pooled.items():
        counts, _ = np.histogram(values, bins=edges)
        densities[tag] = counts / values.size

    ks: dict[tuple[str, str], float] = {}
    tags = sorted(pooled)
    for i, ta in enumerate(tags):
        for tb in tags[i + 1 :]:
            ks[(ta, tb)] = ks_statistic(pooled[ta], pooled[tb])
    return HistogramReport(bins=bins, range_min=lo, range_max=hi, densities=densities, ks=ks)
