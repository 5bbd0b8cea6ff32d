"""Command-line front end: gen, ground-truth, train, encode, build-tree,
search, eval, diagnose.

Settings resolve in three layers: built-in defaults, then a key=value
config file (--config), then explicit command-line flags. Unknown config
keys are rejected. Every artifact gets a ``<path>.meta`` sidecar echoing
the resolved settings (full provenance); CSV reports embed the echo as
param rows.

Exit codes: 0 ok, 2 usage/config (missing inputs, wrong file kind,
mismatched shapes), 3 corrupt data mid-file, 4 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import atree as at
from . import codebook as cb
from . import data as dio
from . import diagnostics as diag
from .annealing import TrainConfig, train_from_scratch, train_online
from .validation import FormatError

__all__ = ["main"]


class ConfigError(ValueError):
    pass


KNOWN_KEYS = {
    "base", "queries", "ground_truth", "data", "codebook", "codes", "tree",
    "out", "out_prefix", "output_dir", "mode", "n", "d", "clusters", "spread",
    "seed", "m", "k", "beam", "stages", "sweeps", "rel_tol", "kmeans_iters",
    "l0", "ls", "l0_list", "r", "threads", "neighborhood_k", "sample_cap",
}


def load_config(path) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in KNOWN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


class Settings:
    """Layered settings: defaults, then config file, then flags."""

    def __init__(self, args):
        self.flags = vars(args)
        self.config = load_config(args.config) if getattr(args, "config", None) else {}
        self.resolved = {}

    def get(self, key, default=None, cast=str, required=False):
        flag = self.flags.get(key)
        if flag is not None:
            value = flag
        elif key in self.config:
            value = cast(self.config[key]) if cast is not None else self.config[key]
        else:
            value = default
        if required and value is None:
            raise ConfigError(f"missing required setting {key!r}")
        self.resolved[key] = value
        return value

    def echo(self) -> dict:
        merged = dict(self.config)
        merged.update({k: v for k, v in self.resolved.items() if v is not None})
        return {k: merged[k] for k in sorted(merged)}


def _require_file(path, what):
    if path is None:
        raise ConfigError(f"missing required {what}")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _write_meta(path, command, settings: Settings, extra: dict | None = None):
    with open(f"{path}.meta", "w") as f:
        f.write(f"command = {command}\n")
        for k, v in settings.echo().items():
            f.write(f"{k} = {v}\n")
        for k, v in (extra or {}).items():
            f.write(f"{k} = {v}\n")


def _param_rows(settings: Settings, extra: dict | None = None):
    rows = [{"metric": f"param.{k}", "value": v} for k, v in settings.echo().items()]
    for k, v in (extra or {}).items():
        rows.append({"metric": k, "value": v})
    return rows


def _train_config(s: Settings) -> TrainConfig:
    return TrainConfig(
        m_count=s.get("m", 8, int), k_count=s.get("k", 256, int),
        beam_width=s.get("beam", 10, int), schedule_stages=s.get("stages", 10, int),
        sweeps=s.get("sweeps", 3, int), rel_tol=s.get("rel_tol", 1e-3, float),
        kmeans_iters=s.get("kmeans_iters", 30, int), seed=s.get("seed", 0, int),
    )


def _threads(s: Settings) -> int:
    return s.get("threads", os.cpu_count() or 1, int)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    s = Settings(args)
    out = s.get("out", required=True)
    X = dio.generate_synthetic(
        n=s.get("n", 10000, int), d=s.get("d", 32, int),
        mode=s.get("mode", "gaussian-mixture"),
        clusters=s.get("clusters", 16, int), spread=s.get("spread", 0.05, float),
        seed=s.get("seed", 0, int),
    )
    dio.write_fvecs(out, X)
    _write_meta(out, "gen", s, {"n": X.shape[0], "d": X.shape[1]})
    print(f"wrote {X.shape[0]} x {X.shape[1]} vectors to {out}")
    return 0


def cmd_ground_truth(args):
    s = Settings(args)
    base = dio.read_fvecs(_require_file(s.get("base"), "base dataset"))
    queries = dio.read_fvecs(_require_file(s.get("queries"), "query dataset"))
    r = s.get("r", 100, int)
    out = s.get("out", required=True)
    gt = dio.brute_force_knn(base, queries, r, n_jobs=_threads(s))
    dio.write_ivecs(out, gt.ids)
    _write_meta(out, "ground-truth", s, {"n_queries": gt.n_queries, "depth": gt.depth})
    print(f"wrote exact top-{r} ids for {gt.n_queries} queries to {out}")
    return 0


def _read_dataset(path):
    if str(path).endswith(".bvecs"):
        return dio.read_bvecs(path)
    return dio.read_fvecs(path)


def cmd_train(args):
    s = Settings(args)
    mode = s.get("mode", "scratch")
    config = _train_config(s)
    out = s.get("out", required=True)
    data_paths = args.data or ([s.config["data"]] if "data" in s.config else None)
    if not data_paths:
        raise ConfigError("missing required dataset path (--data)")
    s.resolved["data"] = ",".join(data_paths)
    for p in data_paths:
        _require_file(p, "dataset")

    if mode == "scratch":
        if len(data_paths) != 1:
            raise ConfigError("scratch mode takes exactly one dataset")
        X = _read_dataset(data_paths[0])
        t0 = time.perf_counter()
        codebook, encoded, report = train_from_scratch(X, config)
        _finish_train(out, codebook, report, s, encoded=encoded,
                      seconds=time.perf_counter() - t0, data=X)
        return 0

    if mode in ("refine", "online"):
        codebook = cb.read_codebook(_require_file(s.get("codebook"), "codebook"))
        if mode == "refine" and len(data_paths) != 1:
            raise ConfigError("refine mode takes exactly one dataset")
        for i, path in enumerate(data_paths):
            X = _read_dataset(path)
            t0 = time.perf_counter()
            codebook, report = train_online(codebook, X, config)
            ckpt = out if len(data_paths) == 1 else _checkpoint_path(out, i)
            _finish_train(ckpt, codebook, report, s,
                          seconds=time.perf_counter() - t0, data=X)
        return 0

    raise ConfigError(f"unknown training mode {mode!r}")


def _checkpoint_path(out, index):
    stem, ext = os.path.splitext(out)
    return f"{stem}.batch{index}{ext or '.hclb'}"


def _finish_train(out, codebook, report, s: Settings, encoded=None, seconds=0.0, data=None):
    cb.write_codebook(out, codebook)
    final = report.steps[-1].distortion if report.steps else float("nan")
    diag.write_report_csv(f"{out}.train.csv", report.rows(),
                          fieldnames=["sweep", "dictionary", "distortion", "seconds"])
    _write_meta(out, "train", s, {
        "sweep": report.steps[-1].sweep if report.steps else 0,
        "distortion": final, "train_seconds": f"{seconds:.3f}",
    })
    print(f"trained codebook -> {out} (final distortion {final:.6g})")


def cmd_encode(args):
    s = Settings(args)
    codebook = cb.read_codebook(_require_file(s.get("codebook"), "codebook"))
    X = _read_dataset(_require_file(s.get("data"), "dataset"))
    beam = s.get("beam", 10, int)
    out = s.get("out", required=True)
    encoded = cb.encode_dataset(codebook, X, beam_width=beam, n_jobs=_threads(s))
    cb.write_encoded(out, encoded)
    dist = cb.distortion(codebook, X, encoded)
    _write_meta(out, "encode", s, {"n": encoded.n, "distortion": dist})
    print(f"encoded {encoded.n} vectors -> {out}")
    print(f"distortion {dist:.6g}")
    return 0


def cmd_build_tree(args):
    s = Settings(args)
    codebook = cb.read_codebook(_require_file(s.get("codebook"), "codebook"))
    encoded = cb.read_encoded(_require_file(s.get("codes"), "encoded dataset"))
    out = s.get("out", required=True)
    tree = at.build_atree(encoded, codebook)
    at.serialize_atree(out, tree)
    _write_meta(out, "build-tree", s, {
        "nodes": tree.node_count, "leaves": tree.leaf_count,
        "internal": tree.internal_count,
    })
    print(f"built tree with {tree.node_count} nodes "
          f"({tree.leaf_count} leaves) -> {out}")
    return 0


def _search_budgets(s: Settings, tree_nodes, m_count):
    if s.flags.get("unbounded"):
        return at.SearchParams(r=s.get("r", 100, int),
                               budgets=tuple([max(tree_nodes, 1)] * m_count))
    return at.SearchParams(l0=s.get("l0", 8, int), ls=s.get("ls", 2.0, float),
                           r=s.get("r", 100, int))


def cmd_search(args):
    s = Settings(args)
    codebook = cb.read_codebook(_require_file(s.get("codebook"), "codebook"))
    queries = dio.read_fvecs(_require_file(s.get("queries"), "query dataset"))
    if queries.shape[1] != codebook.dim:
        raise ConfigError(
            f"query d={queries.shape[1]} does not match codebook dim {codebook.dim}"
        )
    out = s.get("out", required=True)
    r = s.get("r", 100, int)
    rows = []
    if args.exhaustive:
        encoded = cb.read_encoded(_require_file(s.get("codes"), "encoded dataset"))
        cross = cb.cross_products(codebook)
        pair_sums = cb.code_pair_sums(cross, encoded.codes.astype(np.int64))
        for qi in range(queries.shape[0]):
            ids, dists = cb.exhaustive_adc_search(
                codebook, encoded, queries[qi].astype(np.float64), min(r, encoded.n),
                cross=cross, pair_sums=pair_sums,
            )
            rows.extend(
                {"query": qi, "rank": j, "id": int(ids[j]), "distance": float(dists[j]),
                 "nodes_visited": encoded.n}
                for j in range(ids.size)
            )
    else:
        tree = at.deserialize_atree(_require_file(s.get("tree"), "tree index"))
        params = _search_budgets(s, tree.node_count, tree.m_count)
        for qi in range(queries.shape[0]):
            ids, dists, stats = at.atree_search(
                tree, codebook, queries[qi].astype(np.float64), params
            )
            rows.extend(
                {"query": qi, "rank": j, "id": int(ids[j]), "distance": float(dists[j]),
                 "nodes_visited": stats.nodes_visited}
                for j in range(ids.size)
            )
    diag.write_report_csv(out, rows)
    _write_meta(out, "search", s, {"n_queries": queries.shape[0]})
    print(f"wrote {len(rows)} result rows to {out}")
    return 0


class _TreeSearcher:
    def __init__(self, tree, codebook, l0, ls):
        self.tree, self.codebook, self.l0, self.ls = tree, codebook, l0, ls
        self.last_stats_ = []

    def kneighbors(self, Q, n_neighbors=10):
        params = at.SearchParams(l0=self.l0, ls=self.ls, r=n_neighbors)
        ids, dists, stats = at.atree_search(
            self.tree, self.codebook, Q[0].astype(np.float64), params
        )
        self.last_stats_ = [stats]
        pad = n_neighbors - ids.size
        if pad > 0:
            ids = np.concatenate([ids, np.full(pad, -1, dtype=np.int64)])
            dists = np.concatenate([dists, np.full(pad, np.inf)])
        return dists[None, :], ids[None, :]


class _ExhaustiveSearcher:
    def __init__(self, codebook, encoded):
        self.codebook, self.encoded = codebook, encoded
        self.cross = cb.cross_products(codebook)
        self.pair_sums = cb.code_pair_sums(self.cross, encoded.codes.astype(np.int64))

    def kneighbors(self, Q, n_neighbors=10):
        ids, dists = cb.exhaustive_adc_search(
            self.codebook, self.encoded, Q[0].astype(np.float64),
            min(n_neighbors, self.encoded.n), cross=self.cross, pair_sums=self.pair_sums,
        )
        return dists[None, :], ids[None, :]


def cmd_eval(args):
    s = Settings(args)
    codebook = cb.read_codebook(_require_file(s.get("codebook"), "codebook"))
    queries = dio.read_fvecs(_require_file(s.get("queries"), "query dataset"))
    gt_ids = dio.read_ivecs(_require_file(s.get("ground_truth"), "ground truth"))
    gt = dio.GroundTruth(ids=gt_ids, distances=np.zeros_like(gt_ids, dtype=np.float64))
    r = s.get("r", 100, int)
    out = s.get("out", required=True)
    ls = s.get("ls", 2.0, float)
    rows = []
    if args.exhaustive:
        encoded = cb.read_encoded(_require_file(s.get("codes"), "encoded dataset"))
        report = diag.evaluate(_ExhaustiveSearcher(codebook, encoded), queries, gt, r=r,
                               params={"index": "exhaustive"})
        rows.append(_eval_row(None, report))
    else:
        tree = at.deserialize_atree(_require_file(s.get("tree"), "tree index"))
        l0_list = [int(v) for v in str(s.get("l0_list", s.get("l0", 8, int))).split(",")]
        s.resolved["l0_list"] = ",".join(str(v) for v in l0_list)
        for l0 in l0_list:
            report = diag.evaluate(_TreeSearcher(tree, codebook, l0, ls), queries, gt,
                                   r=r, params={"index": "atree", "l0": l0, "ls": ls})
            rows.append(_eval_row(l0, report))
    diag.write_report_csv(out, rows)
    _write_meta(out, "eval", s, {"n_queries": queries.shape[0]})
    for row in rows:
        print(row)
    return 0


def _eval_row(l0, report: diag.EvalReport) -> dict:
    row = {"l0": "" if l0 is None else l0}
    for key in sorted(report.recalls):
        row[f"recall@{key}"] = report.recalls[key]
    row["mean_latency_s"] = report.mean_latency_s
    row["median_latency_s"] = report.median_latency_s
    if report.nodes_visited_mean is not None:
        row["nodes_visited_mean"] = report.nodes_visited_mean
    return row


def cmd_diagnose(args):
    s = Settings(args)
    encoded = cb.read_encoded(_require_file(s.get("codes"), "encoded dataset"))
    prefix = s.get("out_prefix", required=True)
    sample_cap = s.get("sample_cap", 100000, int)
    seed = s.get("seed", 0, int)
    mi = diag.mi_matrix(encoded, sample_cap=sample_cap, seed=seed)
    diag.write_matrix_csv(f"{prefix}.mi.csv", mi.values)
    payload = {
        "mi_matrix": mi.values, "sample_size": mi.sample_size,
        "params": s.echo(),
    }
    gt_path = s.get("ground_truth")
    if gt_path:
        gt_ids = dio.read_ivecs(_require_file(gt_path, "ground truth"))
        gt = dio.GroundTruth(ids=gt_ids, distances=np.zeros_like(gt_ids, dtype=np.float64))
        k = s.get("neighborhood_k", min(10, gt.depth), int)
        prof = diag.locality_profile(encoded, gt, neighborhood_k=k, seed=seed)
        diag.write_matrix_csv(f"{prefix}.mi_local.csv", prof.mi.values)
        diag.write_report_csv(
            f"{prefix}.locality.csv",
            [{"metric": f"conditional_entropy_bits.layer{m}", "value": v}
             for m, v in enumerate(prof.per_layer)] + _param_rows(s),
        )
        payload["locality_bits"] = prof.per_layer
        payload["local_mi_matrix"] = prof.mi.values
    diag.write_report_json(f"{prefix}.json", payload)
    _write_meta(f"{prefix}.json", "diagnose", s, {})
    print(f"wrote diagnostics with prefix {prefix}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(p):
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--threads", type=int, help="worker thread cap")
    p.add_argument("--seed", type=int, help="root random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="annq",
        description="additive-quantization ANN toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", help="output fvecs path")
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--mode", choices=["gaussian-mixture", "uniform"])
    p.add_argument("--clusters", type=int)
    p.add_argument("--spread", type=float)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("ground-truth", help="exact nearest neighbors")
    _add_common(p)
    p.add_argument("--base")
    p.add_argument("--queries")
    p.add_argument("--r", type=int)
    p.add_argument("--out", help="output ivecs path")
    p.set_defaults(func=cmd_ground_truth)

    p = sub.add_parser("train", help="train a codebook")
    _add_common(p)
    p.add_argument("--data", nargs="+", help="dataset path(s); several for online mode")
    p.add_argument("--mode", choices=["scratch", "refine", "online"])
    p.add_argument("--codebook", help="starting codebook for refine/online")
    p.add_argument("--out", help="output codebook path")
    p.add_argument("--m", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--beam", type=int)
    p.add_argument("--stages", type=int)
    p.add_argument("--sweeps", type=int)
    p.add_argument("--rel-tol", dest="rel_tol", type=float)
    p.add_argument("--kmeans-iters", dest="kmeans_iters", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="beam-encode a dataset")
    _add_common(p)
    p.add_argument("--codebook")
    p.add_argument("--data")
    p.add_argument("--beam", type=int)
    p.add_argument("--out", help="output encoded path")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("build-tree", help="build the search tree")
    _add_common(p)
    p.add_argument("--codebook")
    p.add_argument("--codes")
    p.add_argument("--out", help="output tree path")
    p.set_defaults(func=cmd_build_tree)

    p = sub.add_parser("search", help="query the index")
    _add_common(p)
    p.add_argument("--codebook")
    p.add_argument("--tree")
    p.add_argument("--codes", help="encoded dataset (for --exhaustive)")
    p.add_argument("--queries")
    p.add_argument("--l0", type=int)
    p.add_argument("--ls", type=float)
    p.add_argument("--r", type=int)
    p.add_argument("--unbounded", action="store_true",
                   help="no per-layer pruning (exact ADC through the tree)")
    p.add_argument("--exhaustive", action="store_true",
                   help="scan all codes instead of the tree")
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="recall/latency evaluation")
    _add_common(p)
    p.add_argument("--codebook")
    p.add_argument("--tree")
    p.add_argument("--codes")
    p.add_argument("--queries")
    p.add_argument("--ground-truth", dest="ground_truth")
    p.add_argument("--l0", type=int)
    p.add_argument("--l0-list", dest="l0_list", help="comma-separated budget sweep")
    p.add_argument("--ls", type=float)
    p.add_argument("--r", type=int)
    p.add_argument("--exhaustive", action="store_true")
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="entropy and locality diagnostics")
    _add_common(p)
    p.add_argument("--codes")
    p.add_argument("--ground-truth", dest="ground_truth")
    p.add_argument("--neighborhood-k", dest="neighborhood_k", type=int)
    p.add_argument("--sample-cap", dest="sample_cap", type=int)
    p.add_argument("--out-prefix", dest="out_prefix")
    p.set_defaults(func=cmd_diagnose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # internal invariant violation
        print(f"internal error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
