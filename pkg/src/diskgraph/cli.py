"""Command-line surface: gen, gt, build, layout, search, bench, update-bench, advise.

Exit codes: 0 ok, 2 config/argument error, 3 infeasible layout or storage
plan, 4 data format error. Every config-file key can be overridden by the
matching command-line flag; config files are flat `key = value` lines with
comma-separated lists.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .advisor import AdvisorInput, recommend
from .dataio import (
    compute_ground_truth,
    load_ground_truth,
    mean_recall,
    read_vectors,
    recall_at_k,
    save_ground_truth,
    synth_dataset,
    write_vectors,
)
from .errors import FormatError, LayoutInfeasibleError, PlanInfeasibleError
from .graph import load_graph
from .index import assemble_search_index, build_index, open_search_index, save_index
from .layout import load_plan, make_plan, save_plan, serialize_pages
from .pq import load_codebook
from .search import (
    METRICS_CSV_COLUMNS,
    SearchParams,
    io_utilization,
    metrics_csv_row,
    search,
)
from .storage import LatencyModel, make_cache, per_hop_hit_rate
from .updates import UpdatableIndex, UpdateConfig, run_mixed_workload

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_FORMAT = 4


def parse_config_file(path: str | Path) -> dict:
    """Flat key/value config: `key = value`, lists comma-separated, # comments."""
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = _parse_value(value)
    return out


def _parse_value(text: str):
    if "," in text:
        return [_parse_value(v.strip()) for v in text.split(",")]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Config file supplies values; flags set to non-default values win."""
    if not getattr(args, "config", None):
        return args
    file_values = parse_config_file(args.config)
    defaults = {a.dest: a.default for a in args._subparser._actions}
    for key, value in file_values.items():
        if key not in defaults:
            raise ValueError(f"unknown config key {key!r}")
        if getattr(args, key) == defaults[key]:
            setattr(args, key, value)
    return args


def _dataset_from(path: str, fmt: str | None):
    fmt = fmt or Path(path).suffix.lstrip(".")
    return read_vectors(path, fmt)


def _as_list(value) -> list:
    return value if isinstance(value, list) else [value]


def _latency_from(args) -> LatencyModel | None:
    if not getattr(args, "sim_latency", False):
        return None
    return LatencyModel(fixed_us=args.sim_fixed_us, per_byte_ns=args.sim_per_byte_ns,
                        parallel=args.sim_parallel)


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sim-latency", action="store_true",
                   help="use the deterministic latency model instead of wall clocks")
    p.add_argument("--sim-fixed-us", type=float, default=80.0)
    p.add_argument("--sim-per-byte-ns", type=float, default=0.25)
    p.add_argument("--sim-parallel", type=int, default=16)


def cmd_gen(args) -> int:
    ds = synth_dataset(args.n, args.dim, args.seed, args.distribution)
    write_vectors(args.out, ds, args.format)
    print(f"wrote {ds.count} x {ds.dim} vectors to {args.out}")
    return EXIT_OK


def cmd_gt(args) -> int:
    ds = _dataset_from(args.data, args.format)
    qs = _dataset_from(args.queries, args.format)
    gt = compute_ground_truth(ds, qs, args.k, args.metric)
    save_ground_truth(args.out, gt)
    print(f"ground truth for {qs.count} queries (k={args.k}) -> {args.out}.ivecs/.fvecs")
    return EXIT_OK


def cmd_build(args) -> int:
    ds = _dataset_from(args.data, args.format)
    built = build_index(
        ds, R=args.r, L_build=args.l_build, alpha=args.alpha, seed=args.seed,
        pq_m=args.pq_m, pq_iters=args.pq_iters, pq_algo=args.pq_algo,
        page_size=args.page_size, global_kind=args.global_layout,
        local_kind=args.local_layout, storage_strategy=args.storage,
        memory_budget=args.budget, nav_sample_rate=args.nav_rate,
    )
    save_index(args.out_dir, built)
    r = built.report
    print(f"graph {r.graph_seconds:.1f}s, pq {r.pq_seconds:.1f}s "
          f"({built.codebook.train_report.algo}, {r.pq_dist_evals} dist evals), "
          f"layout {r.layout_seconds:.1f}s, "
          f"{r.page_count} pages" + (f" + {r.data_page_count} data pages" if r.data_page_count else ""))
    print(f"index written to {args.out_dir}")
    return EXIT_OK


def cmd_layout(args) -> int:
    ds = _dataset_from(args.data, args.format)
    d = Path(args.index_dir)
    graph = load_graph(d / "graph.bin")
    codebook = load_codebook(d / "pq_codebook.bin")
    manifest = json.loads((d / "index.json").read_text())
    pq_m = codebook.m if manifest["storage"] == "all_in_disk" else 0
    codes = None
    if pq_m:
        from .pq import load_codes

        codes = load_codes(d / "pq_codes.bin", codebook.m)
    plan = make_plan(graph, ds, args.page_size, args.global_layout, args.local_layout,
                     seed=args.seed, pq_m=pq_m)
    primary, data = serialize_pages(plan, graph, ds, codes=codes)
    save_plan(d / "layout.plan", plan)
    (d / "pages.bin").write_bytes(primary)
    if data is not None:
        (d / "data_pages.bin").write_bytes(data)
    manifest.update(page_size=args.page_size, global_kind=args.global_layout,
                    local_kind=args.local_layout)
    (d / "index.json").write_text(json.dumps(manifest, indent=2))
    print(f"re-laid {plan.count} nodes: {plan.page_count} pages"
          + (f" + {plan.data_page_count} data pages" if plan.data_page_count else ""))
    return EXIT_OK


def _load_or_make_gt(args, ds, qs):
    if args.gt:
        return load_ground_truth(args.gt)
    print("warning: no ground truth given; computing exact oracle now", file=sys.stderr)
    return compute_ground_truth(ds, qs, args.k)


def _make_cache_for(args, index_dir, ds, qs, plan, page_size):
    kind = getattr(args, "cache", "none")
    if kind in ("none", None, ""):
        return None
    graph = load_graph(Path(index_dir) / "graph.bin")
    budget = args.cache_budget
    if budget <= 1.0:  # fraction of raw dataset bytes
        budget = int(budget * ds.count * ds.vector_nbytes)
    warm = qs.data[: args.cache_warmup] if args.cache_warmup else None
    return make_cache(kind, int(budget), page_size, graph=graph, dataset=ds,
                      plan=plan, warmup_queries=warm)


def cmd_search(args) -> int:
    ds = _dataset_from(args.data, args.format)
    qs = _dataset_from(args.queries, args.format)
    gt = _load_or_make_gt(args, ds, qs)
    latency = _latency_from(args)
    plan = load_plan(Path(args.index_dir) / "layout.plan")
    cache = _make_cache_for(args, args.index_dir, ds, qs, plan, plan.page_size)
    index = open_search_index(args.index_dir, latency=latency, cache=cache)
    params = SearchParams(k=args.k, L=args.l, W=args.w, exec_mode=args.exec,
                          entry_mode=args.entry)
    rows = []
    recalls = []
    for i in range(qs.count):
        res = search(qs.data[i], params, index)
        r = recall_at_k(res.ids, gt.ids[i], args.k) if gt.k >= args.k else None
        recalls.append(r or 0.0)
        rows.append(metrics_csv_row(i, r, res.metrics))
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRICS_CSV_COLUMNS)
            w.writerows(rows)
    wall = sum(row[-1] for row in rows)
    print(f"recall@{args.k} = {np.mean(recalls):.4f}  "
          f"qps = {1e6 * qs.count / max(wall, 1e-9):.1f}  "
          f"mean ios = {np.mean([row[2] for row in rows]):.1f}")
    return EXIT_OK


BENCH_COLUMNS = [
    "schema_version", "L", "W", "exec", "cache", "recall", "qps", "mean_ios",
    "mean_bytes_read", "io_utilization", "util_defined", "mean_hops",
    "mean_est_comps", "mean_exact_comps", "io_time_share", "mean_hit_rate",
    "hit_rate_series",
]
BENCH_SCHEMA_VERSION = 1


def cmd_bench(args) -> int:
    ds = _dataset_from(args.data, args.format)
    qs = _dataset_from(args.queries, args.format)
    gt = _load_or_make_gt(args, ds, qs)
    latency = _latency_from(args)
    plan = load_plan(Path(args.index_dir) / "layout.plan")
    out_rows = []
    for exec_mode in _as_list(args.exec):
        for cache_kind in _as_list(args.cache):
            for L in _as_list(args.l_list):
                for W in _as_list(args.w_list):
                    cache = None
                    if cache_kind not in ("none", None):
                        args_cache = argparse.Namespace(
                            cache=cache_kind, cache_budget=args.cache_budget,
                            cache_warmup=args.cache_warmup)
                        cache = _make_cache_for(args_cache, args.index_dir, ds, qs,
                                                plan, plan.page_size)
                    index = open_search_index(args.index_dir, latency=latency, cache=cache)
                    params = SearchParams(k=args.k, L=int(L), W=int(W), exec_mode=exec_mode)
                    recalls, mets = [], []
                    for i in range(qs.count):
                        res = search(qs.data[i], params, index)
                        recalls.append(recall_at_k(res.ids, gt.ids[i], args.k))
                        mets.append(res.metrics)
                    utils = [io_utilization(m) for m in mets]
                    wall = sum(m.wall_time_us for m in mets)
                    io_share = sum(m.io_time_us for m in mets) / max(wall, 1e-9)
                    series = per_hop_hit_rate(cache) if cache is not None else []
                    out_rows.append([
                        BENCH_SCHEMA_VERSION, L, W, exec_mode, cache_kind or "none",
                        round(float(np.mean(recalls)), 6),
                        round(1e6 * qs.count / max(wall, 1e-9), 3),
                        round(float(np.mean([m.ios for m in mets])), 3),
                        round(float(np.mean([m.bytes_read for m in mets])), 1),
                        round(float(np.mean([u for u, _ in utils])), 6),
                        int(all(defined for _, defined in utils)),
                        round(float(np.mean([m.hops for m in mets])), 2),
                        round(float(np.mean([m.est_dist_computations for m in mets])), 1),
                        round(float(np.mean([m.exact_dist_computations for m in mets])), 1),
                        round(io_share, 6),
                        round(float(np.mean(series)), 6) if series else 0.0,
                        "|".join(f"{r:.4f}" for r in series),
                    ])
                    index.store.close()
                    if index.data_store:
                        index.data_store.close()
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BENCH_COLUMNS)
        w.writerows(out_rows)
    print(f"wrote {len(out_rows)} bench rows to {args.out}")
    return EXIT_OK


def cmd_update_bench(args) -> int:
    ds = _dataset_from(args.data, args.format)
    base_n = int(ds.count * args.base_fraction)
    n_ops = int(args.ops * args.scale)
    from .dataio import VectorDataset

    base = VectorDataset(ds.dim, base_n, ds.elem_type, ds.data[:base_n].copy())
    pool = ds.data[base_n:]
    rng = np.random.default_rng(args.seed)
    latency = _latency_from(args)
    results = {}
    for mode in _as_list(args.mode):
        cfg = UpdateConfig(R=args.r, L_build=args.l_build, page_size=args.page_size,
                           pq_m=args.pq_m, seed=args.seed)
        index = UpdatableIndex(base, mode, cfg, latency=latency)
        ops = []
        pool_i = 0
        live = list(range(base_n))
        ins_w, del_w = 9, 1  # paper's insert:delete thread split, as a mix ratio
        for i in range(n_ops):
            if rng.random() < del_w / (ins_w + del_w) and live:
                victim = live.pop(int(rng.integers(len(live))))
                ops.append(("delete", victim))
            else:
                vec = pool[pool_i % len(pool)] + rng.standard_normal(ds.dim).astype(np.float32) * 0.01
                pool_i += 1
                ops.append(("insert", vec.astype(np.float32)))
            if i % args.search_every == 0:
                q = ds.data[int(rng.integers(ds.count))]
                ops.append(("search", q, args.k, args.l))
        report = run_mixed_workload(index, ops, serial=not args.threads,
                                    insert_threads=9 if args.threads else 1,
                                    delete_threads=1,
                                    search_threads=16 if args.threads else 1)
        results[mode] = report
        print(f"[{mode}] search qps {report.search_qps:.1f}, "
              f"insert {report.mean_insert_latency_us:.0f}us, "
              f"delete {report.mean_delete_latency_us:.0f}us, "
              f"merge {report.merge_time_s:.2f}s cleanup {report.cleanup_time_s:.2f}s")
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "search_qps", "mean_insert_us", "mean_delete_us",
                    "mean_search_us", "merge_s", "cleanup_s", "qps_series"])
        for mode, rep in results.items():
            w.writerow([mode, round(rep.search_qps, 3),
                        round(rep.mean_insert_latency_us, 1),
                        round(rep.mean_delete_latency_us, 1),
                        round(rep.mean_search_latency_us, 1),
                        round(rep.merge_time_s, 3), round(rep.cleanup_time_s, 3),
                        "|".join(f"{q:.1f}" for q in rep.qps_series)])
    print(f"wrote update bench to {args.out}")
    return EXIT_OK


def cmd_advise(args) -> int:
    inp = AdvisorInput(
        n=args.n, d=args.dim, s_d=args.elem_bytes, s_i=args.id_bytes, r=args.r,
        k=args.pq_code_bytes, n_pq=args.pq_m, n_hot=args.n_hot,
        m_dynamic=args.m_dynamic, c=args.c, budget=args.budget,
        page_size=args.page_size, read_write_ratio=args.rw_ratio,
    )
    rec = recommend(inp, nav_sample_rate=args.nav_rate)
    print("recommendation:")
    for axis in ("storage", "global_layout", "local_layout", "caching", "execution", "update"):
        print(f"  {axis:14s} {getattr(rec, axis)}")
    print("memory model (bytes):")
    for name in ("m_nav", "m_pq", "m_cache", "m_total"):
        print(f"  {name:8s} {getattr(rec, name):,}")
    print(f"  bpf      {rec.bpf:.4f}")
    if rec.m_total_nav_sampled is not None:
        print(f"  m_total with nav sampled at {rec.nav_sample_rate} (non-paper): "
              f"{rec.m_total_nav_sampled:,}")
    print(json.dumps(rec.as_dict()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diskgraph",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn, _subparser=p)
        p.add_argument("--config", default=None, help="flat key=value config file")
        return p

    p = add("gen", cmd_gen, help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distribution", default="uniform-cube")
    p.add_argument("--format", default="fvecs", choices=["fvecs", "bvecs"])

    p = add("gt", cmd_gt, help="compute exact ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--metric", default="euclidean", choices=["euclidean", "cosine"])
    p.add_argument("--out", required=True)
    p.add_argument("--format", default=None)

    p = add("build", cmd_build, help="build graph, pq, layout, and pages")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", default=None)
    p.add_argument("--r", type=int, default=48)
    p.add_argument("--l-build", type=int, default=128)
    p.add_argument("--alpha", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pq-m", type=int, default=16)
    p.add_argument("--pq-iters", type=int, default=15)
    p.add_argument("--pq-algo", default="elkan", choices=["elkan", "lloyd"])
    p.add_argument("--page-size", type=int, default=4096)
    p.add_argument("--global-layout", default="coupled", choices=["coupled", "decoupled"])
    p.add_argument("--local-layout", default="id",
                   choices=["id", "heuristic", "clustering", "graph_replicated"])
    p.add_argument("--storage", default="major_in_disk",
                   choices=["major_in_disk", "all_in_disk"])
    p.add_argument("--budget", type=int, default=4 << 30)
    p.add_argument("--nav-rate", type=float, default=0.005)

    p = add("layout", cmd_layout, help="re-lay pages for an existing index")
    p.add_argument("--data", required=True)
    p.add_argument("--index-dir", required=True)
    p.add_argument("--format", default=None)
    p.add_argument("--page-size", type=int, default=4096)
    p.add_argument("--global-layout", default="coupled", choices=["coupled", "decoupled"])
    p.add_argument("--local-layout", default="id",
                   choices=["id", "heuristic", "clustering", "graph_replicated"])
    p.add_argument("--seed", type=int, default=0)

    p = add("search", cmd_search, help="run queries and emit the metrics CSV")
    p.add_argument("--index-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", default=None, help="ground truth path prefix")
    p.add_argument("--format", default=None)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--l", type=int, default=100)
    p.add_argument("--w", type=int, default=4)
    p.add_argument("--exec", default="sync", choices=["sync", "compute_driven", "io_driven"])
    p.add_argument("--entry", default="medoid", choices=["medoid", "nav_graph"])
    p.add_argument("--cache", default="none",
                   choices=["none", "static_hot", "static_graph", "dynamic_lru",
                            "dynamic_lfu", "hybrid"])
    p.add_argument("--cache-budget", type=float, default=0.01,
                   help="bytes, or a fraction of raw dataset bytes when <= 1")
    p.add_argument("--cache-warmup", type=int, default=32)
    p.add_argument("--out", default=None)
    _add_sim_flags(p)

    p = add("bench", cmd_bench, help="sweep (L, W, exec, cache) cells into a CSV")
    p.add_argument("--index-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", default=None)
    p.add_argument("--format", default=None)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--l-list", type=_parse_value, default=[50, 100])
    p.add_argument("--w-list", type=_parse_value, default=[1, 4])
    p.add_argument("--exec", type=_parse_value, default="sync")
    p.add_argument("--cache", type=_parse_value, default="none")
    p.add_argument("--cache-budget", type=float, default=0.01)
    p.add_argument("--cache-warmup", type=int, default=32)
    p.add_argument("--out", required=True)
    _add_sim_flags(p)

    p = add("update-bench", cmd_update_bench, help="mixed insert/delete/search workload")
    p.add_argument("--data", required=True)
    p.add_argument("--format", default=None)
    p.add_argument("--mode", type=_parse_value, default=["in_place", "out_of_place"])
    p.add_argument("--ops", type=int, default=20000)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--base-fraction", type=float, default=0.8)
    p.add_argument("--r", type=int, default=32)
    p.add_argument("--l-build", type=int, default=64)
    p.add_argument("--page-size", type=int, default=4096)
    p.add_argument("--pq-m", type=int, default=8)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--l", type=int, default=50)
    p.add_argument("--search-every", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", action="store_true",
                   help="use the scaled 9/1/16 thread split instead of serial order")
    p.add_argument("--out", required=True)
    _add_sim_flags(p)

    p = add("advise", cmd_advise, help="memory model + technique selection")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--elem-bytes", type=int, default=4)
    p.add_argument("--id-bytes", type=int, default=4)
    p.add_argument("--r", type=int, default=48)
    p.add_argument("--pq-m", type=int, default=16)
    p.add_argument("--pq-code-bytes", type=int, default=1)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--page-size", type=int, default=4096)
    p.add_argument("--rw-ratio", type=float, default=1.0)
    p.add_argument("--n-hot", type=int, default=0)
    p.add_argument("--m-dynamic", type=int, default=0)
    p.add_argument("--c", type=int, default=0)
    p.add_argument("--nav-rate", type=float, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args)
        return args.fn(args)
    except (LayoutInfeasibleError, PlanInfeasibleError) as err:
        print(f"infeasible: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except FormatError as err:
        print(f"format error: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except (ValueError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
