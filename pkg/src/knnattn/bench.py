"""Command-line runner for the synthetic attention experiments.

Four experiments are available:

* ``error-vs-k``: entry error of the forward estimator against the exact
  output while sweeping ``k`` and the input range ``B``.
* ``runtime-vs-n``: wall time of the estimator and of the exact oracle over
  a grid of sequence lengths, with fitted log-log slopes.
* ``grad-bounds``: fraction of gradient entries inside their error budget.
* ``grad-descent``: loss trajectories of gradient descent with exact and
  with estimated gradients.

Results are appended to a CSV file with one metric per row::

    bench error-vs-k --n 1024 --B 1 --k n^1/8 n^1/2 --seeds 0:20 --out r.csv
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .backward import BackwardConfig, estimate_dk, estimate_dq, estimate_dv, estimate_gradients, row_sampler
from .core import RngStream
from .forward import ForwardConfig, knn_attention
from .oracle import AttentionProblem, exact_attention, exact_dk_parts, exact_gradients

EXPERIMENTS = ("error-vs-k", "runtime-vs-n", "grad-bounds", "grad-descent")
HEADER = ("experiment", "n", "d", "B", "k", "l", "epsilon", "delta", "lr", "loss", "seed", "rep", "metric", "value", "wall_ms")
LOSSES = ("mse", "cross-entropy")
GRADS = ("dq", "dk", "dv")

EXIT_OK, EXIT_SPEC, EXIT_ORACLE = 0, 2, 3


class SpecError(ValueError):
    """An experiment specification that cannot be run."""


class OracleTooLarge(RuntimeError):
    """The exact O(n^2) comparison was requested above the configured cap."""


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    n: tuple[int, ...] = (1024,)
    d: int = 16
    B: tuple[float, ...] = (1.0,)
    k: tuple[str, ...] = ("n^1/2",)
    l: str = "k"
    epsilon: float = 0.1
    delta: float = 0.1
    lr: tuple[float, ...] = (0.1,)
    loss: tuple[str, ...] = ("mse",)
    seeds: tuple[int, ...] = (0,)
    reps: int = 1
    iters: int = 200
    causal: bool = False
    index: str = "exact"
    estimator: str = "weighted"
    prefold: bool = True
    oracle_cap: int = 4096
    grads: tuple[str, ...] = GRADS
    approx: tuple[str, ...] = ("dq", "dv")
    max_samples: int | None = None
    timing: bool = True
    workers: int = 1

    def validate(self) -> "ExperimentSpec":
        if self.experiment not in EXPERIMENTS:
            raise SpecError(f"unknown experiment {self.experiment!r}")
        for name in ("n", "B", "k", "lr", "loss", "seeds"):
            if len(getattr(self, name)) == 0:
                raise SpecError(f"--{name} must not be empty")
        if any(n < 1 for n in self.n) or self.d < 1:
            raise SpecError("n and d must be positive")
        if any(b < 0 for b in self.B):
            raise SpecError("B must be nonnegative")
        if not self.epsilon > 0:
            raise SpecError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise SpecError("delta must lie in (0, 1)")
        if any(lr < 0 for lr in self.lr):
            raise SpecError("learning rates must be nonnegative")
        if any(s < 0 for s in self.seeds):
            raise SpecError("seeds must be nonnegative")
        bad = set(self.loss) - set(LOSSES)
        if bad:
            raise SpecError(f"unknown loss {sorted(bad)}")
        bad = (set(self.grads) | set(self.approx)) - set(GRADS)
        if bad:
            raise SpecError(f"unknown gradient {sorted(bad)}")
        if self.reps < 1 or self.iters < 0 or self.workers < 1 or self.oracle_cap < 1:
            raise SpecError("reps, workers and oracle cap must be positive")
        if self.index not in ("exact", "lsh") or self.estimator not in ("weighted", "mom"):
            raise SpecError("unknown index or estimator")
        for n in self.n:
            for tok in self.k:
                resolve_k(tok, n)
            resolve_l(self.l, n, 1)
        return self


# per-experiment defaults for flags left unset on the command line
DEFAULTS = {
    "error-vs-k": dict(n=(1024,), d=16, B=(0.5, 1.0, 2.0), k=("n^1/8", "n^1/4", "n^1/2", "n^3/4"), seeds=(0, 1, 2, 3, 4)),
    "runtime-vs-n": dict(n=(1024, 2048, 4096, 8192, 16384), d=16, B=(1.0,), k=("n^2/3",), index="lsh", reps=3),
    "grad-bounds": dict(n=(64,), d=3, B=(1.0,), epsilon=0.1, delta=0.05, seeds=(0, 1, 2, 3, 4)),
    "grad-descent": dict(n=(100,), d=3, epsilon=0.05, delta=0.1, lr=(0.1,), loss=LOSSES, iters=200, max_samples=1024),
}


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    n: int | str = ""
    d: int | str = ""
    B: float | str = ""
    k: int | str = ""
    l: int | str = ""
    epsilon: float | str = ""
    delta: float | str = ""
    lr: float | str = ""
    loss: str = ""
    seed: int | str = ""
    rep: int | str = ""
    metric: str = ""
    value: float = 0.0
    wall_ms: float = 0.0

    def cells(self) -> list[str]:
        return [_fmt(getattr(self, h)) for h in HEADER]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


_POW = re.compile(r"^n\^(\d+(?:\.\d+)?)(?:/(\d+))?$")


def resolve_k(token: str, n: int) -> int:
    """Resolve ``"32"``, ``"n"``, ``"sqrt"`` or ``"n^a/b"`` to a count in ``[1, n]``."""
    tok = str(token).strip()
    if tok == "n":
        return n
    if tok == "sqrt":
        tok = "n^1/2"
    m = _POW.match(tok)
    if m:
        e = float(m.group(1)) / (float(m.group(2)) if m.group(2) else 1.0)
        v = n**e
        r = round(v)
        k = r if abs(v - r) < 1e-9 * max(1.0, v) else math.ceil(v)
        return max(1, min(n, k))
    try:
        k = int(tok)
    except ValueError:
        raise SpecError(f"cannot read k token {token!r}") from None
    if k < 1:
        raise SpecError("k must be at least 1")
    return min(k, n)


def resolve_l(token: str, n: int, k: int) -> int:
    """``"k"`` mirrors ``k``; anything else resolves like a ``k`` token or 0.
    The result is clamped to ``n - k``."""
    tok = str(token).strip()
    if tok == "k":
        l = k
    elif tok == "0":
        l = 0
    else:
        l = resolve_k(tok, n)
    return max(0, min(l, n - k))


def subseed(seed: int, *ids: int) -> int:
    """A 63-bit seed derived from ``seed`` and a tuple of ids."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(i) for i in ids))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _uniform_inputs(n, d, B, seed, rep, count=3):
    gen = RngStream(seed, (n, d, rep)).generator()
    return [B * gen.uniform(-1.0, 1.0, (n, d)) for _ in range(count)]


def _problem(Q, K, V, spec: ExperimentSpec) -> AttentionProblem:
    scale = 1.0 / math.sqrt(K.shape[1]) if spec.prefold else 1.0
    return AttentionProblem(Q, K * scale, V, causal=spec.causal)


def checked_oracle(p: AttentionProblem, cap: int) -> np.ndarray:
    """Exact attention, refusing sizes above ``cap``."""
    if p.n > cap:
        raise OracleTooLarge(f"n = {p.n} exceeds the oracle cap {cap}")
    return exact_attention(p)


def _ms(t0: float, spec: ExperimentSpec) -> float:
    return (time.perf_counter() - t0) * 1000.0 if spec.timing else 0.0


def _forward_cfg(spec: ExperimentSpec, n: int, k: int, l: int, seed: int) -> ForwardConfig:
    return ForwardConfig(
        k=k, l=l, epsilon=spec.epsilon, delta=spec.delta, estimator=spec.estimator,
        index=spec.index, causal=spec.causal, seed=seed, max_samples=spec.max_samples,
    )


# ---------------------------------------------------------------- experiments


def _error_task(spec: ExperimentSpec, n: int, B: float, seed: int, rep: int) -> list[ResultRow]:
    Q, K, V = _uniform_inputs(n, spec.d, B, seed, rep)
    p = _problem(Q, K, V, spec)
    O = checked_oracle(p, spec.oracle_cap)
    rows = []
    for ki, tok in enumerate(spec.k):
        k = resolve_k(tok, n)
        l = resolve_l(spec.l, n, k)
        t0 = time.perf_counter()
        O_hat = knn_attention(p, _forward_cfg(spec, n, k, l, subseed(seed, 1, n, rep, ki))).O_hat
        ms = _ms(t0, spec)
        err = np.abs(O_hat - O)
        base = dict(experiment=spec.experiment, n=n, d=spec.d, B=B, k=k, l=l, epsilon=spec.epsilon, delta=spec.delta, seed=seed, rep=rep)
        rows.append(ResultRow(**base, metric="mean_abs_err", value=float(err.mean()), wall_ms=ms))
        rows.append(ResultRow(**base, metric="max_abs_err", value=float(err.max()), wall_ms=ms))
    return rows


def _runtime_task(spec: ExperimentSpec, n: int, seed: int) -> list[ResultRow]:
    B = spec.B[0]
    Q, K, V = _uniform_inputs(n, spec.d, B, seed, 0)
    p = _problem(Q, K, V, spec)
    k = resolve_k(spec.k[0], n)
    l = resolve_l(spec.l, n, k)
    cfg = _forward_cfg(spec, n, k, l, subseed(seed, 2, n))
    base = dict(experiment=spec.experiment, n=n, d=spec.d, B=B, k=k, l=l, epsilon=spec.epsilon, delta=spec.delta, seed=seed)
    rows = []
    for rep in range(spec.reps):
        t0 = time.perf_counter()
        knn_attention(p, cfg)
        ms = (time.perf_counter() - t0) * 1000.0
        rows.append(ResultRow(**base, rep=rep, metric="approx_ms", value=ms, wall_ms=ms))
    if n <= spec.oracle_cap:
        for rep in range(spec.reps):
            t0 = time.perf_counter()
            checked_oracle(p, spec.oracle_cap)
            ms = (time.perf_counter() - t0) * 1000.0
            rows.append(ResultRow(**base, rep=rep, metric="exact_ms", value=ms, wall_ms=ms))
    return rows


def loglog_slope(ns, times) -> float:
    """Least-squares slope of ``log(time)`` against ``log(n)``."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    if x.size < 2:
        return float("nan")
    return float(np.polyfit(x, y, 1)[0])


def _runtime_fit(spec: ExperimentSpec, rows: list[ResultRow]) -> list[ResultRow]:
    out = []
    for metric in ("approx_ms", "exact_ms"):
        best = {}
        for r in rows:
            if r.metric == metric:
                best[r.n] = min(best.get(r.n, math.inf), r.value)
        if len(best) >= 2:
            ns = sorted(best)
            slope = loglog_slope(ns, [best[n] for n in ns])
            out.append(ResultRow(experiment=spec.experiment, d=spec.d, metric="slope_" + metric[:-3], value=slope))
    return out


def _grad_bounds_task(spec: ExperimentSpec, n: int, B: float, seed: int, rep: int) -> list[ResultRow]:
    Q, K, V, dO = _uniform_inputs(n, spec.d, B, seed, rep, count=4)
    p = _problem(Q, K, V, spec)
    if n > spec.oracle_cap:
        raise OracleTooLarge(f"n = {n} exceeds the oracle cap {spec.oracle_cap}")
    exact = exact_gradients(p, dO)
    k = resolve_k(spec.k[0], n)
    cfg = BackwardConfig(
        epsilon=spec.epsilon, delta=spec.delta, seed=subseed(seed, 3, n, rep), k=k,
        causal=spec.causal, index=spec.index, max_samples=spec.max_samples,
    )
    base = dict(experiment=spec.experiment, n=n, d=spec.d, B=B, k=k, epsilon=spec.epsilon, delta=spec.delta, seed=seed, rep=rep)
    rows = []
    P = row_sampler(p, cfg)
    fns = {"dv": estimate_dv, "dq": estimate_dq, "dk": estimate_dk}
    truth = {"dv": exact.dV, "dq": exact.dQ, "dk": exact.dK}
    for name in GRADS:
        if name not in spec.grads:
            continue
        t0 = time.perf_counter()
        est, budget = fns[name](p, dO, cfg, P)
        ms = _ms(t0, spec)
        err = np.abs(est - truth[name])
        rows.append(ResultRow(**base, metric=f"{name}_within", value=float(budget.within(est, truth[name]).mean()), wall_ms=ms))
        rows.append(ResultRow(**base, metric=f"{name}_max_err", value=float(err.max()), wall_ms=ms))
        rows.append(ResultRow(**base, metric=f"{name}_void", value=float(budget.guarantee_void), wall_ms=ms))
        if name == "dk":
            A, Bm = exact_dk_parts(p, dO)
            notes = budget.notes
            within_a = np.abs(notes["part_a"] - A) <= notes["bound_a"]
            within_b = np.abs(notes["part_b"] - Bm) <= notes["bound_b"]
            rows.append(ResultRow(**base, metric="dk_a_within", value=float(within_a.mean()), wall_ms=ms))
            rows.append(ResultRow(**base, metric="dk_b_within", value=float(within_b.mean()), wall_ms=ms))
    return rows


def loss_and_grad(O: np.ndarray, target: np.ndarray, loss: str) -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to ``O``.

    ``mse`` is the mean squared entry of ``O - target``. ``cross-entropy``
    treats each row of ``O`` as logits against integer class ``target[i]``
    and averages over rows.
    """
    n, d = O.shape
    if loss == "mse":
        diff = O - target
        return float(np.mean(diff**2)), 2.0 * diff / diff.size
    z = O - O.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    value = float(-logp[rows, target].mean())
    g = np.exp(logp)
    g[rows, target] -= 1.0
    return value, g / n


def descend(Q, K, V, target, loss: str, lr: float, iters: int, spec: ExperimentSpec, seed: int, approx=None):
    """Plain gradient descent on ``(Q, K, V)``; returns the loss per iteration.

    With ``approx`` (a tuple of gradient names) those gradients come from
    the estimators, the rest from the exact formulas.
    """
    Q, K, V = Q.copy(), K.copy(), V.copy()
    scale = 1.0 / math.sqrt(K.shape[1]) if spec.prefold else 1.0
    losses = []
    for t in range(iters + 1):
        p = AttentionProblem(Q, K * scale, V, causal=spec.causal)
        value, dO = loss_and_grad(exact_attention(p), target, loss)
        losses.append(value)
        if t == iters:
            break
        g = exact_gradients(p, dO)
        if approx:
            cfg = BackwardConfig(
                epsilon=spec.epsilon, delta=spec.delta, seed=subseed(seed, 4, t), causal=spec.causal,
                index=spec.index, max_samples=spec.max_samples, relative=True,
            )
            g = estimate_gradients(p, dO, cfg, which=approx, exact=g)
        Q -= lr * g.dQ
        K -= lr * scale * g.dK
        V -= lr * g.dV
    return losses


def _descent_task(spec: ExperimentSpec, lr: float, loss: str, seed: int, rep: int) -> list[ResultRow]:
    n, d = spec.n[0], spec.d
    gen = RngStream(seed, (n, d, rep, 7)).generator()
    Q, K, V = (gen.standard_normal((n, d)) for _ in range(3))
    target = gen.standard_normal((n, d)) if loss == "mse" else gen.integers(0, d, n)
    base = dict(experiment=spec.experiment, n=n, d=d, epsilon=spec.epsilon, delta=spec.delta, lr=lr, loss=loss, seed=seed, rep=rep)
    rows = []
    finals = {}
    for mode, approx in (("exact", None), ("approx", spec.approx)):
        t0 = time.perf_counter()
        losses = descend(Q, K, V, target, loss, lr, spec.iters, spec, subseed(seed, 5, rep), approx)
        ms = _ms(t0, spec)
        finals[mode] = losses[-1]
        for t, v in enumerate(losses):
            rows.append(ResultRow(**base, metric=f"{mode}_loss@{t}", value=v, wall_ms=ms if t == spec.iters else 0.0))
    gap = abs(finals["approx"] - finals["exact"]) / max(abs(finals["exact"]), np.finfo(float).tiny)
    rows.append(ResultRow(**base, metric="final_rel_gap", value=gap))
    return rows


def _tasks(spec: ExperimentSpec):
    e = spec.experiment
    if e == "error-vs-k":
        return [(_error_task, (n, B, s, r)) for n in spec.n for B in spec.B for s in spec.seeds for r in range(spec.reps)]
    if e == "runtime-vs-n":
        return [(_runtime_task, (n, s)) for s in spec.seeds for n in spec.n]
    if e == "grad-bounds":
        return [(_grad_bounds_task, (n, B, s, r)) for n in spec.n for B in spec.B for s in spec.seeds for r in range(spec.reps)]
    return [(_descent_task, (lr, loss, s, r)) for lr in spec.lr for loss in spec.loss for s in spec.seeds for r in range(spec.reps)]


def _call(job):
    fn, spec, args = job
    return fn(spec, *args)


def run_experiment(spec: ExperimentSpec) -> list[ResultRow]:
    """Run every parameter point of ``spec`` and return rows in parameter order.

    With ``workers > 1`` points run in a process pool; the merge follows
    the parameter order, never the completion order.
    """
    spec.validate()
    jobs = [(fn, spec, args) for fn, args in _tasks(spec)]
    if spec.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            parts = list(pool.map(_call, jobs))
    else:
        parts = [_call(j) for j in jobs]
    rows = [r for part in parts for r in part]
    if spec.experiment == "runtime-vs-n":
        rows += _runtime_fit(spec, rows)
    return rows


def run_error_vs_k(spec: ExperimentSpec) -> list[ResultRow]:
    return run_experiment(replace(spec, experiment="error-vs-k"))


def run_runtime_vs_n(spec: ExperimentSpec) -> list[ResultRow]:
    return run_experiment(replace(spec, experiment="runtime-vs-n"))


def run_grad_bounds(spec: ExperimentSpec) -> list[ResultRow]:
    return run_experiment(replace(spec, experiment="grad-bounds"))


def run_grad_descent(spec: ExperimentSpec) -> list[ResultRow]:
    return run_experiment(replace(spec, experiment="grad-descent"))


def write_rows(rows, out) -> None:
    """Append rows to a CSV path (header written once) or to a text stream."""
    if isinstance(out, (str, os.PathLike)):
        fresh = not os.path.exists(out) or os.path.getsize(out) == 0
        with open(out, "a", newline="", encoding="utf-8") as fh:
            _write(rows, fh, fresh)
    else:
        _write(rows, out, True)


def _write(rows, fh, header: bool) -> None:
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(HEADER)
    for r in rows:
        w.writerow(r.cells())


# ------------------------------------------------------------------------ CLI


def _split(values) -> list[str]:
    return [t for v in values for t in str(v).split(",") if t != ""]


def _seeds(values) -> tuple[int, ...]:
    out = []
    for t in _split(values):
        if ":" in t:
            a, b = t.split(":", 1)
            out.extend(range(int(a), int(b)))
        else:
            out.append(int(t))
    return tuple(out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bench", description="Synthetic experiments for kNN attention estimators.")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--n", nargs="+", help="sequence lengths")
    ap.add_argument("--d", type=int, help="embedding dimension")
    ap.add_argument("--B", nargs="+", help="input range half-widths")
    ap.add_argument("--k", nargs="+", help="k values: integers, n, sqrt or n^a/b")
    ap.add_argument("--l", help="spill size: k (default), 0, an integer or n^a/b")
    ap.add_argument("--epsilon", type=float)
    ap.add_argument("--delta", type=float)
    ap.add_argument("--lr", nargs="+", help="learning rates")
    ap.add_argument("--loss", nargs="+", help="mse and/or cross-entropy")
    ap.add_argument("--seeds", nargs="+", help="seeds, e.g. 0,1,2 or 0:20")
    ap.add_argument("--reps", type=int)
    ap.add_argument("--iters", type=int, help="descent iterations")
    ap.add_argument("--grads", nargs="+", help="gradients checked by grad-bounds")
    ap.add_argument("--approx", nargs="+", help="gradients estimated in grad-descent")
    ap.add_argument("--max-samples", type=int, help="cap on median-of-means draws per estimate")
    ap.add_argument("--out", default="-", help="CSV path to append to, or - for stdout")
    ap.add_argument("--causal", action="store_true")
    ap.add_argument("--index", choices=("exact", "lsh"))
    ap.add_argument("--estimator", choices=("mom", "weighted"))
    ap.add_argument("--no-prefold-scale", action="store_true", help="do not fold 1/sqrt(d) into K")
    ap.add_argument("--oracle-cap", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--no-timing", action="store_true", help="write 0 for wall_ms so output is byte-reproducible")
    return ap


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    kw = dict(DEFAULTS[args.experiment])
    try:
        if args.n:
            kw["n"] = tuple(int(t) for t in _split(args.n))
        if args.B:
            kw["B"] = tuple(float(t) for t in _split(args.B))
        if args.lr:
            kw["lr"] = tuple(float(t) for t in _split(args.lr))
        if args.seeds:
            kw["seeds"] = _seeds(args.seeds)
    except ValueError as exc:
        raise SpecError(str(exc)) from None
    if args.k:
        kw["k"] = tuple(_split(args.k))
    if args.loss:
        kw["loss"] = tuple(_split(args.loss))
    if args.grads:
        kw["grads"] = tuple(_split(args.grads))
    if args.approx:
        kw["approx"] = tuple(_split(args.approx))
    for name in ("d", "l", "epsilon", "delta", "reps", "iters", "index", "estimator", "oracle_cap", "workers", "max_samples"):
        v = getattr(args, name)
        if v is not None:
            kw[name] = v
    kw["causal"] = args.causal
    kw["prefold"] = not args.no_prefold_scale
    kw["timing"] = not args.no_timing
    return ExperimentSpec(experiment=args.experiment, **kw).validate()


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_SPEC if exc.code not in (0, None) else EXIT_OK
    try:
        spec = spec_from_args(args)
        rows = run_experiment(spec)
    except SpecError as exc:
        print(f"bench: invalid spec: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except OracleTooLarge as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    write_rows(rows, sys.stdout if args.out == "-" else args.out)
    return EXIT_OK


def cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli()
