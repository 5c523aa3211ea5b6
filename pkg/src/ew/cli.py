"""The ``ew`` command: train, rollout, verify, bench, config.

Exit codes: 0 success, 1 training aborted on a non-finite loss, 2 usage or
configuration error, 3 required net files missing. Every run is deterministic
under a fixed seed (wall-clock fields aside); the EW_SEED environment variable
overrides the config seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import signal
import sys
import time
from pathlib import Path

import numpy as np

from . import autograd as ag
from .config import RunConfig
from .errors import ConfigError, TrainingAbort
from .fusion import Extractor3D, FusionNet, TextEmbedding
from .generator import CHUNK_LATENTS, GeneratorNet, chunk_noise, denoise_chunk, load_generator, save_generator
from .streaming import RolloutState, stream, write_stream_record
from .training import Trainer
from .verify import SUITES, run_suite

GENERATOR_FILE = "generator.ewnt"
FUSION_FILE = "fusion.ewfu"


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig.from_tree()
    return RunConfig.from_file(path)


def _build_nets(cfg: RunConfig, zero_out_proj: bool = True):
    net_cfg = cfg.generator_config()
    fus = cfg.fusion_kwargs()
    net = GeneratorNet(net_cfg, np.random.default_rng([cfg.seed, 1]), zero_out_proj=zero_out_proj)
    fusion = FusionNet(fus["feature_channels"], net_cfg.text_dim, fus["text_tokens"],
                       temporal_extent=4 * (CHUNK_LATENTS - 1) + 1,
                       rng=np.random.default_rng([cfg.seed, 2]))
    extractor = Extractor3D(net_cfg.channels, fus["feature_channels"], seed=fus["extractor_seed"])
    e_text = TextEmbedding(ag.constant(
        np.random.default_rng([cfg.seed, 4]).standard_normal((fus["text_tokens"], net_cfg.text_dim))))
    return net, fusion, extractor, e_text


def cmd_config(args) -> int:
    cfg = _load_config(args.config)
    print(cfg.to_json())
    print(f"// config_hash: {cfg.config_hash()}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg.generator_config(), cfg.train_config(),
                      schedule=cfg.schedule_config(), **_trainer_fusion_kwargs(cfg))
    jsonl = out / "train_reports.jsonl"
    with open(jsonl, "a") as fh:
        fh.write(json.dumps({"config_hash": cfg.config_hash()}) + "\n")
    steps = args.steps if args.steps is not None else cfg.train_config().steps
    try:
        reports = trainer.run(steps, jsonl_path=jsonl)
    except TrainingAbort as abort:
        print(f"error: {abort}", file=sys.stderr)
        print(json.dumps(abort.diagnostics, indent=2), file=sys.stderr)
        return 1
    save_generator(trainer.net, out / GENERATOR_FILE)
    trainer.fusion.save(out / FUSION_FILE)
    (out / "config.json").write_text(cfg.to_json())
    last = reports[-1]
    print(f"trained {len(reports)} steps  total={last.loss_total:.4f}  "
          f"prefix_grad={last.grad_norm_prefix:.3e}  reports={jsonl}")
    return 0


def _trainer_fusion_kwargs(cfg: RunConfig) -> dict:
    f = cfg.fusion_kwargs()
    return {"feature_channels": f["feature_channels"], "text_tokens": f["text_tokens"],
            "extractor_seed": f["extractor_seed"]}


def cmd_rollout(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net, fusion, extractor, e_text = _build_nets(cfg)
    gen_path, fus_path = out / GENERATOR_FILE, out / FUSION_FILE
    if not gen_path.exists() or not fus_path.exists():
        print(f"error: trained nets not found under {out} "
              f"({GENERATOR_FILE}, {FUSION_FILE}); run `ew train` first", file=sys.stderr)
        return 3
    load_generator(net, gen_path)
    fusion.load(fus_path)

    if args.resume:
        state = RolloutState.load(args.resume, cfg.generator_config(), cfg.schedule_config())
    else:
        state = RolloutState(cfg.generator_config(), cfg.schedule_config(), seed=cfg.seed)

    stop = [False]
    if args.infinite:
        signal.signal(signal.SIGINT, lambda *_: stop.__setitem__(0, True))

    stream_path = out / "stream.bin"
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)

    def snapshot(s: RolloutState):
        s.save(snap_dir / f"chunk_{s.chunk_index:06d}.ewrs")

    with open(stream_path, "ab") as fh:
        report = stream(net, fusion, extractor, e_text, state,
                        n_latents_target=None if args.infinite else args.latents,
                        sink=lambda idx, latent: write_stream_record(fh, idx, latent),
                        stop_flag=(lambda: stop[0]) if args.infinite else None,
                        snapshot_every=args.snapshot_every,
                        snapshot_fn=snapshot)
    report.config_hash = cfg.config_hash()
    state.save(out / "final_state.ewrs")
    (out / "stream_report.json").write_text(report.to_json())
    print(f"emitted {report.latents_emitted} latents ({report.frames_emitted} frames) "
          f"over {report.chunks_generated} chunks -> {stream_path}")
    return 0


def cmd_verify(args) -> int:
    results = run_suite(args.suite)
    all_ok = True
    for r in results:
        print(r.line())
        all_ok &= r.passed
    return 0 if all_ok else 1


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net, fusion, extractor, e_text = _build_nets(cfg)
    gen_path = out / GENERATOR_FILE
    if gen_path.exists():
        load_generator(net, gen_path)
        fusion.load(out / FUSION_FILE)
    net_cfg = cfg.generator_config()
    sched = cfg.schedule_config()
    window = sched.window_tokens(sched.phase_for_index(0), net_cfg.frame_tokens)
    cache = net_cfg.make_cache(window_tokens=window)
    rng = np.random.default_rng(cfg.seed)
    cond = fusion.fuse_optional(e_text, None)

    rows = []
    with ag.no_grad():
        for k in range(args.chunks):
            tokens_attended = cache.live_tokens() + net_cfg.chunk_tokens
            t0 = time.perf_counter()
            denoise_chunk(net, chunk_noise(rng, net_cfg), cache, cond, rng)
            rows.append({"chunk": k, "latency_s": time.perf_counter() - t0,
                         "cache_bytes": cache.live_bytes(),
                         "tokens_attended": tokens_attended})
    lat = np.array([r["latency_s"] for r in rows])
    bench_path = out / "bench.csv"
    with open(bench_path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        writer = csv.DictWriter(fh, fieldnames=["chunk", "latency_s", "cache_bytes", "tokens_attended"])
        writer.writeheader()
        writer.writerows(rows)
        fh.write(f"# summary median_latency_s={np.median(lat):.6f} "
                 f"p95_latency_s={np.percentile(lat, 95):.6f}\n")
    print(f"bench: {args.chunks} chunks, median {np.median(lat)*1e3:.2f} ms, "
          f"p95 {np.percentile(lat, 95)*1e3:.2f} ms -> {bench_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ew",
                                     description="streaming latent-video generation testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print the resolved configuration")
    p.add_argument("action", choices=["dump"])
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_config)

    p = sub.add_parser("train", help="run the conditional training loop")
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("rollout", help="stream latents with the alternating schedule")
    p.add_argument("--config", default=None)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--latents", type=int, default=None)
    group.add_argument("--infinite", action="store_true")
    p.add_argument("--snapshot-every", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("verify", help="run a named property suite")
    p.add_argument("suite", choices=sorted(SUITES))
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="per-chunk latency and cache-size benchmark")
    p.add_argument("--config", default=None)
    p.add_argument("--chunks", type=int, default=64)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
