"""Analytical time model for plain vs quantized boundary exchange.

Units: ``comm[i, j]`` and ``params[i, j]`` count elements (feature rows times
width, and two scalars per quantized row); every term converts elements to
bits before dividing by a rate, so ``bandwidth`` and ``throughput`` are in
bits per second and ``latency`` in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BIT_FP32 = 32
APPROX_FLAG = 0.10


@dataclass
class PerfModelInputs:
    comm: np.ndarray          # (P, P) elements sent i -> j
    params: np.ndarray        # (P, P) FP32 parameter elements sent i -> j
    subgraph: np.ndarray      # (P,) local work units for the pre-quantization pass
    bandwidth: float
    latency: float
    throughput: float
    bits: int = 2

    def __post_init__(self):
        self.comm = np.atleast_2d(np.asarray(self.comm, dtype=float))
        p = self.comm.shape[0]
        if self.comm.shape != (p, p):
            raise ValueError("comm must be a square P x P matrix")
        self.params = (np.zeros((p, p)) if self.params is None
                       else np.broadcast_to(np.asarray(self.params, float), (p, p)).copy())
        self.subgraph = (np.zeros(p) if self.subgraph is None
                         else np.broadcast_to(np.asarray(self.subgraph, float), (p,)).copy())
        if np.any(self.comm < 0) or np.any(self.params < 0) or np.any(self.subgraph < 0):
            raise ValueError("volumes must be non-negative")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")
        if not 1 <= self.bits <= BIT_FP32:
            raise ValueError("bits must lie in [1, 32]")

    @property
    def num_workers(self) -> int:
        return self.comm.shape[0]

    @classmethod
    def uniform(cls, num_workers: int, comm: float, params: float = 0.0, subgraph: float = 0.0,
                bandwidth: float = 1e9, latency: float = 0.0, throughput: float = 1e11,
                bits: int = 2) -> "PerfModelInputs":
        """Every ordered pair of distinct workers exchanges the same volume."""
        off = 1 - np.eye(num_workers)
        return cls(comm * off, params * off, np.full(num_workers, float(subgraph)),
                   bandwidth, latency, throughput, bits)

    def _active(self):
        mask = self.comm > 0
        return mask if mask.any() else ~np.eye(self.num_workers, dtype=bool)

    @property
    def alpha(self) -> float:
        m = self._active()
        p = self.params[m].mean()
        return float(self.comm[m].mean() / p) if p > 0 else float("inf")

    @property
    def beta(self) -> float:
        return self.throughput / self.bandwidth

    @property
    def gamma(self) -> float:
        return BIT_FP32 / self.bits

    @property
    def delta(self) -> float:
        c = self.comm[self._active()].mean()
        wire = c * self.bits / self.bandwidth
        if wire == 0:
            return float("inf") if self.latency > 0 else 0.0
        return self.latency / wire


def _check_rates(inp: PerfModelInputs, need_throughput: bool) -> None:
    if not inp.bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    if need_throughput and not inp.throughput > 0:
        raise ValueError("throughput must be positive")


def pair_comm_times(inp: PerfModelInputs) -> np.ndarray:
    _check_rates(inp, False)
    return inp.comm * BIT_FP32 / inp.bandwidth + inp.latency


def t_comm(inp: PerfModelInputs) -> float:
    """Bottleneck worker's summed full-precision send time."""
    return float(pair_comm_times(inp).sum(axis=1).max())


@dataclass
class QuantBreakdown:
    total: float
    pre_quant: float
    quant: float
    wire: float
    dequant: float
    bottleneck: int

    def as_dict(self) -> dict:
        return {"total": self.total, "pre_quant": self.pre_quant, "quant": self.quant,
                "wire": self.wire, "dequant": self.dequant}


def t_quant_comm(inp: PerfModelInputs, omit_prequant: bool = False) -> QuantBreakdown:
    """Quantized exchange time; the breakdown is the bottleneck worker's."""
    _check_rates(inp, True)
    x, th = inp.bits, inp.throughput
    pre = np.zeros(inp.num_workers) if omit_prequant else inp.subgraph * BIT_FP32 / th
    quant = (inp.comm * (BIT_FP32 + x) / th).sum(axis=1)
    dequant = (inp.comm.T * (BIT_FP32 + x) / th).sum(axis=1)
    wire = ((inp.comm * x + inp.params * BIT_FP32) / inp.bandwidth + inp.latency).sum(axis=1)
    per_worker = pre + quant + wire + dequant
    i = int(np.argmax(per_worker))
    return QuantBreakdown(float(per_worker[i]), float(pre[i]), float(quant[i]),
                          float(wire[i]), float(dequant[i]), i)


def speedup_from_ratios(alpha: float, beta: float, gamma: float, delta: float,
                        mode: str = "exact") -> float:
    if mode == "approx":
        if np.isinf(delta):
            return 1.0
        return (gamma + delta) / (1 + delta)
    if mode != "exact":
        raise ValueError(f"unknown mode {mode!r}")
    if np.isinf(delta):
        return 1.0
    # infinite ratios: divide through and drop the vanishing terms
    if np.isinf(alpha) and np.isinf(beta):
        return (gamma + delta) / (1 + delta)
    if np.isinf(alpha):
        return beta * (gamma + delta) / ((1 + delta) * beta + 2 * (1 + gamma))
    if np.isinf(beta):
        return alpha * (gamma + delta) / ((1 + delta) * alpha + gamma)
    ab = alpha * beta
    return ab * (gamma + delta) / ((1 + delta) * ab + 2 * alpha * (1 + gamma) + beta * gamma)


def speedup(inp: PerfModelInputs, mode: str = "exact") -> float:
    """Closed-form speedup from the inputs' alpha, beta, gamma and delta."""
    return speedup_from_ratios(inp.alpha, inp.beta, inp.gamma, inp.delta, mode)


def model_speedup(inp: PerfModelInputs, omit_prequant: bool = True) -> float:
    """Ratio of the evaluated times (no symmetry assumption)."""
    return t_comm(inp) / t_quant_comm(inp, omit_prequant).total


def regime(inp: PerfModelInputs) -> str:
    return "latency-bound" if inp.delta >= 1 else "throughput-bound"


def approximation_error(inp: PerfModelInputs) -> float:
    exact = speedup(inp, "exact")
    return abs(exact - speedup(inp, "approx")) / exact


@dataclass
class Crossover:
    plain: int | None
    quant: int | None
    time_saved: float | None


def crossover(total_comm: float, total_params: float, bandwidth: float, latency: float,
              bits: int = 2, p_min: int = 2, p_max: int = 4096) -> Crossover:
    """Smallest worker count at which per-pair latency reaches the transfer time.

    Strong scaling: each pair carries ``total / P**2``. ``None`` means the
    sweep never turns latency-bound.
    """
    if p_min < 1 or p_max < p_min:
        raise ValueError(f"invalid sweep bounds [{p_min}, {p_max}]")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    ps = np.arange(p_min, p_max + 1, dtype=float)
    plain = total_comm * BIT_FP32 / (ps * ps * bandwidth)
    quant = (total_comm * bits + total_params * BIT_FP32) / (ps * ps * bandwidth)

    def first(transfer):
        if latency <= 0:
            return None
        hit = np.flatnonzero(latency >= transfer)
        return int(ps[hit[0]]) if hit.size else None

    p_plain, p_quant = first(plain), first(quant)
    saved = None
    if p_plain is not None and p_quant is not None:
        saved = (p_plain - p_quant) * latency
    return Crossover(p_plain, p_quant, saved)


def delta_sweep(gamma: float, alpha: float = 100.0, beta: float = 100.0,
                deltas=None) -> list[dict]:
    deltas = np.logspace(-3, 3, 100) if deltas is None else np.asarray(deltas, float)
    return [{"delta": float(d),
             "exact": speedup_from_ratios(alpha, beta, gamma, d, "exact"),
             "approx": speedup_from_ratios(alpha, beta, gamma, d, "approx")} for d in deltas]


def worker_sweep(inp_total_comm: float, total_params: float, bandwidth: float, latency: float,
                 throughput: float, bits: int, workers) -> list[dict]:
    """Plain and quantized times under strong scaling for each worker count."""
    rows = []
    for p in workers:
        per = inp_total_comm / (p * p)
        inp = PerfModelInputs.uniform(p, per, total_params / (p * p), 0.0,
                                      bandwidth, latency, throughput, bits)
        rows.append({"workers": int(p), "t_comm": t_comm(inp),
                     "t_quant_comm": t_quant_comm(inp, True).total,
                     "speedup": model_speedup(inp), "regime": regime(inp)})
    return rows


# --------------------------------------------------------------------------
# key = value input files and measured ledgers
# --------------------------------------------------------------------------

_SCALARS = {"bandwidth": float, "latency": float, "throughput": float, "bits": int,
            "workers": int, "feat_dim": int}


def parse_inputs(text: str) -> PerfModelInputs:
    """Parse ``key = value`` lines ('#' comments).

    ``comm``/``params``/``subgraph`` take one number (uniform over distinct
    pairs) or a comma-separated row-major list. Without ``params``, two
    parameters per row are assumed when ``feat_dim`` is given.
    """
    kv = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"line {n}: expected key = value")
        kv[key.strip().lower()] = val.strip()
    missing = {"workers", "comm", "bandwidth"} - kv.keys()
    if missing:
        raise ValueError(f"missing keys: {', '.join(sorted(missing))}")
    try:
        sc = {k: f(kv[k]) for k, f in _SCALARS.items() if k in kv}
    except ValueError as exc:
        raise ValueError(f"bad numeric value: {exc}") from None
    p = sc["workers"]
    off = 1 - np.eye(p)

    def matrix(key):
        vals = [float(v) for v in kv[key].split(",")]
        if len(vals) == 1:
            return vals[0] * off
        if len(vals) != p * p:
            raise ValueError(f"{key} needs 1 or {p * p} values")
        return np.array(vals).reshape(p, p)

    comm = matrix("comm")
    if "params" in kv:
        params = matrix("params")
    elif "feat_dim" in kv:
        params = 2 * comm / sc["feat_dim"]
    else:
        params = np.zeros_like(comm)
    sub = None
    if "subgraph" in kv:
        vals = [float(v) for v in kv["subgraph"].split(",")]
        sub = np.full(p, vals[0]) if len(vals) == 1 else np.array(vals)
    return PerfModelInputs(comm, params, sub, sc["bandwidth"], sc.get("latency", 0.0),
                           sc.get("throughput", float("inf")), sc.get("bits", 2))


def inputs_from_ledger(ledger, num_workers: int, bits: int, bandwidth: float, latency: float,
                       throughput: float, epoch: int | None = None, directions=None,
                       subgraph=None) -> PerfModelInputs:
    """Fill ``comm``/``params`` from a run's measured byte counts.

    Data bytes convert back to elements at ``bits`` per element, parameter
    bytes at 4 bytes per FP32 scalar.
    """
    comm = np.zeros((num_workers, num_workers))
    params = np.zeros_like(comm)
    for (s, d), c in ledger.totals("sent", epoch, directions).items():
        comm[s, d] += c.data_bytes * 8 / bits
        params[s, d] += c.param_bytes / 4
    return PerfModelInputs(comm, params, subgraph, bandwidth, latency, throughput, bits)


def report(inp: PerfModelInputs, omit_prequant: bool = False) -> dict:
    """Summary table row: times, both speedups, regime and the approximation flag."""
    q = t_quant_comm(inp, omit_prequant)
    err = approximation_error(inp)
    return {"t_comm": t_comm(inp), "t_quant_comm": q.total, **{f"t_{k}": v for k, v in q.as_dict().items() if k != "total"},
            "speedup_exact": speedup(inp, "exact"), "speedup_approx": speedup(inp, "approx"),
            "speedup_model": t_comm(inp) / q.total, "alpha": inp.alpha, "beta": inp.beta,
            "gamma": inp.gamma, "delta": inp.delta, "regime": regime(inp),
            "approx_error": err, "approx_flag": err > APPROX_FLAG}
