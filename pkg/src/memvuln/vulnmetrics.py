"""Per-word vulnerability metrics over a main-memory request stream.

A 64-bit word's history at the memory level is a sequence of intervals
bounded by the fills and write-backs of its cache line, clipped to the
accounting window [first request, last request].  Each interval is
classified by the event that ends it:

  * ends at a fill       -> vulnerable: the memory copy was live and was
                            brought back into the hierarchy to be used;
  * ends at a write-back -> safe: the memory copy was dead, about to be
                            replaced by fresher data;
  * runs to window end   -> safe: nothing consumed it.

The basic vulnerability factor of a word is vulnerable time over window
duration.  The refined factor additionally discounts fills whose fetched
word was fully overwritten by stores before any load (write-allocate
artifacts: the fetched value was never consumed), using the per-word
resolutions produced by the simulator.

All times are integer cycles and all accumulators are exact; the safe
ratio is one minus the basic factor by construction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .cachesim import REQ_FILL, REQ_WRITEBACK, SimResult
from .trace import StructureMap

#: Default raw fault rate, per 64-bit word and cycle.  The absolute value
#: is a placeholder (rankings are scale-invariant); override it to match
#: a measured device rate.
DEFAULT_FIT_RATE = 1e-9


@dataclass
class WordLedger:
    """Exact per-word accumulators for one structure."""

    name: str
    base: int
    n_words: int
    vuln_time: np.ndarray  # int64, cycles ending at any fill
    kept_time: np.ndarray  # int64, cycles ending at a consumed fill
    loads: np.ndarray  # int64, fills covering the word
    stores: np.ndarray  # int64, write-backs covering the word

    @classmethod
    def empty(cls, name: str, base: int, n_words: int) -> "WordLedger":
        z = lambda: np.zeros(n_words, dtype=np.int64)
        return cls(name, base, n_words, z(), z(), z(), z())

    @property
    def touched_words(self) -> int:
        return int(np.sum((self.loads + self.stores) > 0))

    def mvf_words(self, T: int) -> np.ndarray:
        if T <= 0:
            return np.zeros(self.n_words)
        return self.vuln_time / T

    def fea_words(self, T: int) -> np.ndarray:
        if T <= 0:
            return np.zeros(self.n_words)
        return self.kept_time / T


@dataclass
class StructureReport:
    name: str
    n_words: int
    touched_words: int
    loads: int
    stores: int
    mvf: float
    fea: float
    safe_ratio: float
    ld_ratio: float
    dvf: float

    def row(self):
        return [
            self.name,
            self.n_words,
            self.touched_words,
            self.loads,
            self.stores,
            f"{self.ld_ratio:.6f}",
            f"{self.mvf:.6f}",
            f"{self.fea:.6f}",
            f"{self.safe_ratio:.6f}",
            f"{self.dvf:.6e}",
        ]


CSV_HEADER = [
    "structure",
    "n_words",
    "touched_words",
    "loads",
    "stores",
    "ld_ratio",
    "mvf",
    "fea",
    "safe_ratio",
    "dvf",
]


@dataclass
class AnalysisReport:
    T: int
    t_start: int
    t_end: int
    fit_rate: float
    structures: list = field(default_factory=list)

    def by_name(self, name: str) -> StructureReport:
        for rep in self.structures:
            if rep.name == name:
                return rep
        raise KeyError(name)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# schema", "1"])
            w.writerow(["# window_cycles", str(self.T)])
            w.writerow(["# fit_rate", repr(self.fit_rate)])
            w.writerow(CSV_HEADER)
            for rep in self.structures:
                w.writerow(rep.row())

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "window_cycles": self.T,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "fit_rate": self.fit_rate,
            "structures": [
                {
                    "name": r.name,
                    "n_words": r.n_words,
                    "touched_words": r.touched_words,
                    "loads": r.loads,
                    "stores": r.stores,
                    "ld_ratio": r.ld_ratio,
                    "mvf": r.mvf,
                    "fea": r.fea,
                    "safe_ratio": r.safe_ratio,
                    "dvf": r.dvf,
                }
                for r in self.structures
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "AnalysisReport":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("schema") != 1:
            raise ValueError("unsupported report schema")
        rep = cls(
            d["window_cycles"], d["t_start"], d["t_end"], d["fit_rate"], []
        )
        for s in d["structures"]:
            rep.structures.append(
                StructureReport(
                    s["name"],
                    s["n_words"],
                    s["touched_words"],
                    s["loads"],
                    s["stores"],
                    s["mvf"],
                    s["fea"],
                    s["safe_ratio"],
                    s["ld_ratio"],
                    s["dvf"],
                )
            )
        return rep


def _aligned_fill_stream(result: SimResult):
    """Sorted fills, their leading-interval durations, and resolution masks.

    Returns (line, duration, mask) for every fill, plus the sorted
    write-back lines, with every array ordered by (line, time).
    """
    lines = result.req_line >> 6
    times = result.req_time
    order = np.lexsort((times, lines))
    lines_s = lines[order]
    times_s = times[order]
    kinds_s = result.req_kind[order]

    prev = np.empty_like(times_s)
    if len(times_s):
        prev[1:] = times_s[:-1]
        starts = np.empty(len(lines_s), dtype=bool)
        starts[0] = True
        np.not_equal(lines_s[1:], lines_s[:-1], out=starts[1:])
        prev[starts] = result.t_start
    durations = times_s - prev

    fill_sel = kinds_s == REQ_FILL
    line_f = lines_s[fill_sel]
    time_f = times_s[fill_sel]
    dur_f = durations[fill_sel]
    line_w = lines_s[kinds_s == REQ_WRITEBACK]

    res_lines = result.res_line >> 6
    r_order = np.lexsort((result.res_fill_time, res_lines))
    if not (
        np.array_equal(res_lines[r_order], line_f)
        and np.array_equal(result.res_fill_time[r_order], time_f)
    ):
        raise ValueError("resolution stream does not match the fill stream")
    mask_f = result.res_mask[r_order].astype(np.int64)
    return line_f, dur_f, mask_f, line_w


def accumulate(result: SimResult, smap: StructureMap) -> dict:
    """Build exact per-word ledgers for every mapped structure.

    Requests to lines outside every labeled region are ignored (they
    still shape the accounting window).  Raises if any fill lacks a
    matching resolution record.
    """
    line_f, dur_f, mask_f, line_w = _aligned_fill_stream(result)
    ledgers = {}
    for reg in smap:
        n_words = reg.length // 8
        led = WordLedger.empty(reg.name, reg.base, n_words)
        lo_line = reg.base >> 6
        hi_line = (reg.base + reg.length + 63) >> 6
        f0, f1 = np.searchsorted(line_f, (lo_line, hi_line))
        w0, w1 = np.searchsorted(line_w, (lo_line, hi_line))
        base_word = (line_f[f0:f1] << 3) - (reg.base >> 3)
        dur = dur_f[f0:f1]
        mask = mask_f[f0:f1]
        wb_word = (line_w[w0:w1] << 3) - (reg.base >> 3)
        for w in range(8):
            idx = base_word + w
            ok = idx < n_words
            iw = idx[ok]
            # Integer weights below 2**53 survive the float64 round trip
            # exactly, so bincount keeps the accumulators exact.
            led.vuln_time += np.bincount(
                iw, weights=dur[ok], minlength=n_words
            ).astype(np.int64)
            kept = ok & (((mask >> w) & 1) == 0)
            led.kept_time += np.bincount(
                idx[kept], weights=dur[kept], minlength=n_words
            ).astype(np.int64)
            led.loads += np.bincount(iw, minlength=n_words).astype(np.int64)
            widx = wb_word + w
            led.stores += np.bincount(
                widx[widx < n_words], minlength=n_words
            ).astype(np.int64)
        ledgers[reg.name] = led
    return ledgers


def structure_report(
    led: WordLedger, T: int, fit_rate: float = DEFAULT_FIT_RATE
) -> StructureReport:
    loads = int(led.loads.sum())
    stores = int(led.stores.sum())
    if T > 0:
        mvf = float(led.vuln_time.sum()) / (T * led.n_words)
        fea = float(led.kept_time.sum()) / (T * led.n_words)
    else:
        mvf = fea = 0.0
    ld_ratio = 1.0 if stores == 0 else loads / (loads + stores)
    dvf = fit_rate * T * led.n_words * (loads + stores)
    return StructureReport(
        led.name,
        led.n_words,
        led.touched_words,
        loads,
        stores,
        mvf,
        fea,
        1.0 - mvf,
        ld_ratio,
        dvf,
    )


def analyze(
    result: SimResult,
    smap: StructureMap,
    fit_rate: float = DEFAULT_FIT_RATE,
) -> AnalysisReport:
    ledgers = accumulate(result, smap)
    report = AnalysisReport(result.T, result.t_start, result.t_end, fit_rate)
    for reg in smap:
        report.structures.append(
            structure_report(ledgers[reg.name], result.T, fit_rate)
        )
    return report


def write_word_histograms(ledgers: dict, T: int, path, bins: int = 20) -> None:
    """Per-structure histogram of word vulnerability factors (plot-ready)."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    with open(path, "w") as fh:
        fh.write("# structure bin_lo bin_hi mvf_words fea_words\n")
        for name, led in ledgers.items():
            hm, _ = np.histogram(led.mvf_words(T), bins=edges)
            hf, _ = np.histogram(led.fea_words(T), bins=edges)
            for i in range(bins):
                fh.write(
                    f"{name} {edges[i]:.4f} {edges[i + 1]:.4f} "
                    f"{int(hm[i])} {int(hf[i])}\n"
                )
            fh.write("\n")
