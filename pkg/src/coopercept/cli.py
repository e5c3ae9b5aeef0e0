"""Command-line entry point: ``coopercept {gen,train,eval,bench,export-attn}``.

Run configuration comes from an optional ``key = value`` file (``--config``)
with dotted keys for nested sections (``kd.temperature = 5``), then from
flags. The fully resolved config is written into every output directory as
``config.txt`` and can be fed back with ``--config`` to reproduce a run.
"""
from __future__ import annotations

import argparse
import ast
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from .config import ChannelConfig, KdConfig, MsaConfig, SceneGenConfig, TrainConfig, VoxelConfig, get_preset

log = logging.getLogger("coopercept")

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FAILURE = 1


class ConfigError(ValueError):
    """Bad configuration key or value; reported as a usage error."""


@dataclass(frozen=True)
class RunConfig:
    preset: str = "tiny"
    seed: int = 0
    teacher_seed: int = -1                 # -1: same as seed
    strategy: str = "ahd"
    data_dir: str = "data"
    out_dir: str = "runs/default"
    checkpoint: str = ""
    n_frames: int = 200
    train_fraction: float = 0.8
    threads: int = 1
    use_sparse: bool = True
    bench_densities: tuple[float, ...] = (0.01, 0.05, 0.1)
    bench_repeats: int = 3
    frame: str = ""                        # frame id for export-attn ("" = first test frame)
    kd: KdConfig = field(default_factory=KdConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    voxel: VoxelConfig | None = None       # None: the preset's own
    channel: ChannelConfig | None = None
    msa: MsaConfig | None = None
    scene: SceneGenConfig | None = None

    def resolved(self) -> "RunConfig":
        p = get_preset(self.preset)
        return replace(self, voxel=self.voxel or p.voxel, channel=self.channel or p.channel,
                       msa=self.msa or p.msa, scene=self.scene or p.scene)

    def build_preset(self):
        r = self.resolved()
        return replace(get_preset(self.preset), voxel=r.voxel, channel=r.channel, msa=r.msa, scene=r.scene)


_SECTIONS = {"kd": KdConfig, "train": TrainConfig, "voxel": VoxelConfig, "channel": ChannelConfig,
             "msa": MsaConfig, "scene": SceneGenConfig}


def _coerce(key: str, raw: str, default):
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        value = raw
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected True/False, got {raw!r}")
    elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    elif isinstance(default, tuple) and isinstance(value, (list, tuple)):
        floaty = any(isinstance(d, float) for d in default)
        value = tuple(float(v) if floaty and isinstance(v, int) and not isinstance(v, bool) else v for v in value)
    if default is not None and type(value) is not type(default):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}")
    return value


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """``key = value`` lines, ``#`` comments; unknown keys raise :class:`ConfigError` naming the key."""
    cfg = base or RunConfig()
    top: dict = {}
    nested: dict[str, dict] = {}
    top_fields = {f.name for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            known = {f.name for f in fields(_SECTIONS[section])}
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            nested.setdefault(section, {})[name] = raw
        else:
            if key not in top_fields or key in _SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = raw
    for key, raw in top.items():
        top[key] = _coerce(key, raw, getattr(RunConfig(), key))
    cfg = replace(cfg, **top)
    if nested:
        cfg = cfg.resolved()
    for section, values in nested.items():
        current = getattr(cfg, section)
        try:
            updated = replace(current, **{k: _coerce(f"{section}.{k}", v, getattr(current, k)) for k, v in values.items()})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{section}: {e}") from None
        cfg = replace(cfg, **{section: updated})
    return cfg


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            lines += [f"{f.name}.{g.name} = {getattr(v, g.name)!r}" for g in fields(v)]
        elif v is not None:
            lines.append(f"{f.name} = {v!r}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_to_text(cfg.resolved()))


# -- data --------------------------------------------------------------------------
def _load_frames(data_dir: Path):
    from .lidar_sim import load_frame
    manifest = data_dir / "manifest.json"
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    doc = json.loads(manifest.read_text())
    return [load_frame(data_dir / name) for name in doc["frames"]]


def _split(cfg: RunConfig):
    from .distill import build_samples
    frames = _load_frames(Path(cfg.data_dir))
    samples = build_samples(frames, cfg.build_preset(), cfg.threads)
    k = int(round(cfg.train_fraction * len(samples)))
    return samples[:k], samples[k:]


def _model(cfg: RunConfig, checkpoint: Path):
    from .distill import CoopModel
    from .tensor_core import load_checkpoint
    if not checkpoint.is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    m = CoopModel(cfg.build_preset(), cfg.use_sparse)
    m.load_state_dict(load_checkpoint(checkpoint))
    return m.eval()


# -- commands ------------------------------------------------------------------------
def cmd_gen(n_frames: int, cfg: RunConfig, out_dir: Path) -> list[str]:
    from .lidar_sim import generate_scene, save_frame
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = cfg.resolved().scene
    names = []
    for i in range(n_frames):
        frame = generate_scene(scene, seed=cfg.seed * 100_000 + i, frame_id=f"{i:06d}")
        name = f"frame_{i:06d}.json"
        save_frame(frame, out_dir / name)
        names.append(name)
    (out_dir / "manifest.json").write_text(json.dumps({"n_frames": n_frames, "seed": cfg.seed,
                                                       "preset": cfg.preset, "frames": names}, indent=2))
    write_config(replace(cfg, n_frames=n_frames, data_dir=str(out_dir)), out_dir)
    log.info("wrote %d frames to %s", n_frames, out_dir)
    return names


def cmd_train(cfg: RunConfig) -> Path:
    from .distill import fit, write_metrics_csv
    from .tensor_core import save_checkpoint
    out = Path(cfg.out_dir)
    write_config(cfg, out)
    train, _ = _split(cfg)
    if not train:
        raise ValueError("no training frames (check n_frames / train_fraction)")
    ts = None if cfg.teacher_seed < 0 else cfg.teacher_seed
    state = fit(train, cfg.build_preset(), cfg.kd, cfg.train, cfg.seed, ts, cfg.use_sparse)
    write_metrics_csv(out / "metrics.csv", state.history)
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, state.model.state_dict())
    log.info("trained %d epochs on %d frames -> %s", cfg.train.epochs, len(train), ckpt)
    return ckpt


def cmd_eval(cfg: RunConfig, checkpoint: Path | None = None) -> list:
    from .detection import write_detections_csv
    from .distill import CoopModel
    from .evaluation import evaluate_strategy, write_results_csv, write_summary
    out = Path(cfg.out_dir)
    write_config(cfg, out)
    _, test = _split(cfg)
    if checkpoint is None:
        model = CoopModel(cfg.build_preset(), cfg.use_sparse).init_weights(cfg.seed).eval()
    else:
        model = _model(cfg, checkpoint)
    strategies = ("none", "early", "late", "ahd") if cfg.strategy == "all" else (cfg.strategy,)
    results = [evaluate_strategy(test, model, s) for s in strategies]
    write_results_csv(out / "results.csv", results)
    write_summary(out / "summary.json", results)
    for r in results:
        write_detections_csv(out / f"detections_{r.strategy}.csv", r.detections)
        r.bandwidth.to_csv(out / f"bandwidth_{r.strategy}.csv")
        log.info("%s: AP@0.5 %.4f  AP@0.7 %.4f  bytes/frame %.0f", r.strategy, r.ap50.ap, r.ap70.ap, r.bytes_per_frame)
    return results


def time_backbone(cfg: RunConfig, density: float, repeats: int) -> tuple[float, float]:
    """Best-of-``repeats`` wall time (ms) of the sparse and the dense student backbone at one density."""
    from .backbone import SparsePillarBackbone
    from .sparse_ops import densify, sparse_from_rows
    from .tensor_core import no_grad
    preset = cfg.build_preset()
    h, w, c = preset.voxel.grid_h, preset.voxel.grid_w, preset.stage_channels[0]
    rng = np.random.default_rng(cfg.seed)
    n = max(1, int(round(density * h * w)))
    lin = np.sort(rng.choice(h * w, n, replace=False))
    s = sparse_from_rows(h, w, lin // w, lin % w, rng.normal(size=(n, c)).astype(np.float32))
    sparse_bb = SparsePillarBackbone(preset.backbone("student", use_sparse=True)).initialize(cfg.seed).eval()
    dense_bb = SparsePillarBackbone(preset.backbone("student", use_sparse=False)).initialize(cfg.seed).eval()
    x = densify(s)
    sparse_t, dense_t = [], []
    with no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            sparse_bb.forward_sparse(s)
            sparse_t.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            dense_bb(x)
            dense_t.append(time.perf_counter() - t0)
    return 1e3 * min(sparse_t), 1e3 * min(dense_t)


def cmd_bench(cfg: RunConfig) -> list[dict]:
    out = Path(cfg.out_dir)
    write_config(cfg, out)
    rows = []
    for d in cfg.bench_densities:
        sp, de = time_backbone(cfg, d, cfg.bench_repeats)
        rows.append({"density": d, "sparse_ms": sp, "dense_ms": de})
        log.info("density %.3f: sparse %.1f ms, dense %.1f ms (x%.2f)", d, sp, de, de / sp)
    with open(out / "bench.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["density", "sparse_ms", "dense_ms"])
        wr.writeheader()
        wr.writerows(rows)
    return rows


def cmd_export_attn(cfg: RunConfig, frame: str, checkpoint: Path | None = None) -> Path:
    from .distill import CoopModel
    from .fusion import AgentTokenGrid, GridSpec, export_attention, warp_feature
    from .comms import compress, decompress
    from .tensor_core import getitem, no_grad
    out = Path(cfg.out_dir)
    write_config(cfg, out)
    train, test = _split(cfg)
    pool = {s.frame_id: s for s in train + test}
    if not pool:
        raise ValueError("dataset is empty")
    if frame and frame not in pool:
        raise KeyError(f"frame {frame!r} not in dataset")
    s = pool[frame] if frame else (test or train)[0]
    model = _model(cfg, checkpoint) if checkpoint else CoopModel(cfg.build_preset(), cfg.use_sparse).init_weights(cfg.seed).eval()
    grid_spec = GridSpec.from_voxel(model.preset.voxel, model.preset.feature_stride)
    with no_grad():
        feats = model.student([a.pillars for a in s.agents])
        others = []
        for k, a in enumerate(s.agents[1:], 1):
            f = decompress(compress(getitem(feats, slice(k, k + 1)), model.codec), model.codec)
            others.append((a.agent_id, *warp_feature(f, s.transforms[a.agent_id], grid_spec)))
        grid = AgentTokenGrid.build(s.ego_id, getitem(feats, slice(0, 1)), others)
        path = out / f"attention_{s.frame_id}.csv"
        export_attention(grid, model.fusion, path)
    return path


# -- argument handling -------------------------------------------------------------------
def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value run configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=["paper", "tiny"])
    common.add_argument("--strategy", choices=["none", "late", "early", "ahd", "all"])
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, help="worker threads for per-frame preprocessing")
    common.add_argument("--data", type=Path, help="dataset directory (with manifest.json)")
    p = argparse.ArgumentParser(prog="coopercept", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--n-frames", type=int)
    sub.add_parser("train", parents=[common], help="train teacher and student jointly")
    e = sub.add_parser("eval", parents=[common], help="AP and bandwidth per strategy")
    e.add_argument("--checkpoint", type=Path)
    sub.add_parser("bench", parents=[common], help="time sparse vs dense backbone")
    x = sub.add_parser("export-attn", parents=[common], help="dump ego attention weights for one frame")
    x.add_argument("--checkpoint", type=Path)
    x.add_argument("--frame", default=None)
    return p


def resolve_args(args) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        if not args.config.is_file():
            raise FileNotFoundError(f"config file not found: {args.config}")
        cfg = parse_config_text(args.config.read_text())
    overrides = {"seed": args.seed, "preset": args.preset, "strategy": args.strategy, "threads": args.threads,
                 "out_dir": None if args.out is None else str(args.out),
                 "data_dir": None if args.data is None else str(args.data),
                 "n_frames": getattr(args, "n_frames", None),
                 "checkpoint": None if getattr(args, "checkpoint", None) is None else str(args.checkpoint),
                 "frame": getattr(args, "frame", None)}
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if args.preset is not None and args.config is None:
        cfg = replace(cfg, voxel=None, channel=None, msa=None, scene=None)
    return cfg


def _setup_logging() -> None:
    level = os.environ.get("COOPERCEPT_LOG", "info").lower()
    if level not in ("error", "info", "debug"):
        level = "info"
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_args(args)
        if args.command == "gen":
            out = args.out or Path(cfg.data_dir)
            cmd_gen(cfg.n_frames, cfg, out)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, Path(cfg.checkpoint) if cfg.checkpoint else None)
        elif args.command == "bench":
            cmd_bench(cfg)
        else:
            cmd_export_attn(cfg, cfg.frame, Path(cfg.checkpoint) if cfg.checkpoint else None)
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"coopercept: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"coopercept: IO error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:                                   # noqa: BLE001 - report and exit non-zero
        log.debug("failure", exc_info=True)
        print(f"coopercept: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
