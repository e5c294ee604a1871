"""Command-line entry point: gen-data, train, eval, predict, plan, grad-check.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .dataset import load_dataset, read_vocabulary, save_dataset
from .model import ModelConfig, ProspectModel
from .observation import Observation
from .planner import ModelAdapter, search
from .trainer import TrainConfig, evaluate, train_run
from .worlds import generate_episodes


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# -- images -------------------------------------------------------------------------------


def ppm_bytes(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got {img.shape}")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image scalars must lie in [0, 1]")
    h, w, _ = img.shape
    payload = np.floor(img * 255 + 0.5).astype(np.uint8).tobytes()
    return f"P6\n{w} {h}\n255\n".encode("ascii") + payload


def export_ppm(image: np.ndarray, path) -> None:
    """Binary PPM, each scalar written as ``round(scalar * 255)`` (halves round up)."""
    Path(path).write_bytes(ppm_bytes(image))


def read_ppm(path) -> np.ndarray:
    """Parse a binary PPM written by :func:`export_ppm`; returns ``uint8`` ``(H, W, 3)``."""
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


SEPARATOR = 2


def hypothesis_grid(images: list[np.ndarray]) -> np.ndarray:
    """Panels side by side with 2-pixel black columns between them."""
    h = images[0].shape[0]
    cols = []
    for i, img in enumerate(images):
        if i:
            cols.append(np.zeros((h, SEPARATOR, 3)))
        cols.append(np.asarray(img, dtype=np.float64))
    return np.concatenate(cols, axis=1)


def render_hypothesis_grid(hyps, target: Observation | None, path, vocab: list[str] | None = None) -> str:
    """Write the grid PPM plus a ``.txt`` sidecar annotating each panel; returns the sidecar text."""
    images = [h.predicted.image for h in hyps] + ([target.image] if target is not None else [])
    export_ppm(hypothesis_grid(images), path)
    lines = []
    for h in hyps:
        a = int(np.argmax(h.action_dist))
        name = vocab[a] if vocab else str(a)
        state = " ".join(f"{v:.4f}" for v in h.predicted.state)
        lines.append(f"panel {h.index}: state={state} gripper={h.predicted.gripper:.4f} action={name} value={h.value:.4f}")
    if target is not None:
        state = " ".join(f"{v:.4f}" for v in target.state)
        lines.append(f"panel target: state={state} gripper={target.gripper:.4f}")
    text = "\n".join(lines) + "\n"
    Path(path).with_suffix(".txt").write_text(text)
    return text


# -- configuration ---------------------------------------------------------------------------

# pinned flag spellings for the most used settings
ALIASES = {
    "batch": ("train", "batch_size"),
    "lr": ("train", "learning_rate"),
    "lambda": ("train", "lam"),
    "nh": ("model", "n_heads"),
    "skips": ("model", "use_skips"),
}
MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def resolve_key(key: str) -> tuple[str, str]:
    key = key.replace("-", "_")
    if key in ALIASES:
        return ALIASES[key]
    if key in MODEL_KEYS:
        return "model", key
    if key in TRAIN_KEYS:
        return "train", key
    raise UsageError(f"unknown config key {key!r}")


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        resolve_key(key)
        out[key.replace("-", "_")] = val
    return out


def build_configs(overrides: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    model, train = {}, {}
    for key, text in overrides.items():
        group, name = resolve_key(key)
        try:
            if group == "model":
                model[name] = ModelConfig.parse_value(name, text)
            else:
                train[name] = TrainConfig.parse_value(name, text)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {text!r} ({exc})") from exc
    try:
        return ModelConfig(**model), TrainConfig(**train)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# -- subcommands ----------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    recipe = {"expert": args.expert_frac, "noisy": args.noisy_frac, "adversarial": args.adversarial_frac}
    episodes = generate_episodes(args.domain, args.episodes, args.seed, recipe, p_err=args.p_err)
    save_dataset(episodes, args.out)
    n_ok = sum(e.success for e in episodes)
    print(f"wrote {len(episodes)} episodes ({n_ok} successful) to {args.out}")


def cmd_train(args, extra: dict[str, str]) -> None:
    overrides = read_config_file(args.config) if args.config else {}
    overrides.update(extra)
    mcfg, tcfg = build_configs(overrides)
    out = Path(args.out)

    def log(step, loss):
        print(f"step {step} loss {loss:.6f}", flush=True)

    report = train_run(args.data, mcfg, tcfg, out, log=log)
    lines = [f"{f.name}={getattr(tcfg, f.name)}" for f in fields(TrainConfig)]
    (out / "train.cfg").write_text("\n".join(lines) + "\n")
    print(report.to_text(), end="")


def _split_settings(model_dir) -> tuple[float, int]:
    path = Path(model_dir) / "train.cfg"
    if not path.exists():
        return 0.1, 0
    kv = dict(line.split("=", 1) for line in path.read_text().splitlines() if "=" in line)
    return float(kv.get("val_fraction", 0.1)), int(kv.get("seed", 0))


def cmd_eval(args) -> None:
    model = ProspectModel.load(args.model)
    frac, seed = _split_settings(args.model)
    report = evaluate(model, args.data, args.split, frac, seed)
    Path(args.report).write_text(report.to_text())
    print(report.to_text(), end="")


def _frame(args):
    episodes = load_dataset(args.data)
    if not 0 <= args.episode < len(episodes):
        raise ValueError(f"episode {args.episode} out of range (dataset has {len(episodes)})")
    ep = episodes[args.episode]
    if not 0 <= args.frame < len(ep.keyframes):
        raise ValueError(f"frame {args.frame} out of range (episode has {len(ep.keyframes)})")
    return ep, read_vocabulary(args.data)


def cmd_predict(args) -> None:
    model = ProspectModel.load(args.model)
    ep, vocab = _frame(args)
    if args.action not in vocab:
        raise ValueError(f"unknown action {args.action!r}; vocabulary: {', '.join(vocab)}")
    obs = ep.keyframes[args.frame].obs
    hyps = model.predict_hypotheses(obs, vocab.index(args.action), args.seed)
    target = ep.keyframes[args.frame + 1].obs if args.frame + 1 < len(ep.keyframes) else None
    path = Path(args.out + ".ppm")
    render_hypothesis_grid(hyps, target, path, vocab)
    print(f"wrote {path} and {path.with_suffix('.txt')}")


def cmd_plan(args) -> None:
    model = ProspectModel.load(args.model)
    ep, vocab = _frame(args)
    plan = search(ep.keyframes[args.frame].obs, ModelAdapter(model), args.depth, args.beam, args.topk, args.seed)
    lines = [f"score={plan.score:.6f}"]
    for i, (a, h, frame) in enumerate(zip(plan.actions, plan.heads, plan.predicted_frames)):
        export_ppm(frame.image, f"{args.out}_{i}.ppm")
        lines.append(f"{i} {vocab[a]} head={h}")
    Path(args.out + ".txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_grad_check(args) -> bool:
    ok = True
    for name, report in gradcheck.run_checks(args.tolerance):
        for line in report.lines():
            print(f"{name}: {line}")
        print(f"{name}: {'PASS' if report.passed else 'FAIL'}")
        ok &= report.passed
    return ok


# -- parser -----------------------------------------------------------------------------------


def make_parser() -> _Parser:
    p = _Parser(prog="prospect", description="Prospection models: data, training, prediction, planning.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate scripted episodes")
    g.add_argument("--domain", choices=["nav", "stack"], required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--expert-frac", type=float, default=0.45)
    g.add_argument("--noisy-frac", type=float, default=0.35)
    g.add_argument("--adversarial-frac", type=float, default=0.20)
    g.add_argument("--p-err", type=float, default=0.2)

    t = sub.add_parser("train", help="train a model; any model/train config key works as --key value")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")

    e = sub.add_parser("eval", help="evaluate a trained model")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", choices=["train", "val", "all"], default="val")

    for name in ("predict", "plan"):
        q = sub.add_parser(name, help=f"{name} from a dataset keyframe")
        q.add_argument("--model", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--episode", type=int, required=True)
        q.add_argument("--frame", type=int, required=True)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--out", required=True)
        if name == "predict":
            q.add_argument("--action", required=True)
        else:
            q.add_argument("--depth", type=int, default=3)
            q.add_argument("--beam", type=int, default=8)
            q.add_argument("--topk", type=int, default=2)

    c = sub.add_parser("grad-check", help="finite-difference check of every block and the pipeline")
    c.add_argument("--tolerance", type=float, default=1e-5)
    return p


def _config_flags(rest: list[str]) -> dict[str, str]:
    """Parse trailing ``--key value`` pairs for the train command."""
    out = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise UsageError(f"flag --{key} needs a value")
            val = rest[i + 1]
            i += 2
        resolve_key(key)
        out[key.replace("-", "_")] = val
    return out


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = make_parser()
    try:
        if not argv:
            raise UsageError(parser.format_usage())
        args, rest = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        extra = _config_flags(rest) if args.command == "train" else {}
        if rest and args.command != "train":
            raise UsageError(f"unrecognized arguments: {' '.join(rest)}\n{parser.format_usage()}")
        if args.command == "train":
            cmd_train(args, extra)
        elif args.command == "gen-data":
            cmd_gen_data(args)
        elif args.command == "eval":
            cmd_eval(args)
        elif args.command == "predict":
            cmd_predict(args)
        elif args.command == "plan":
            cmd_plan(args)
        elif args.command == "grad-check":
            return 0 if cmd_grad_check(args) else 2
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"prospect: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
