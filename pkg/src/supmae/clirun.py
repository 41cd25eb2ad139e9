"""``supmae`` command line: pretrain, transfer, evaluate, inspect.

Errors end the process with one line ``error: <category>: <message>`` on
stderr and a category-specific exit status.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as C
from . import datapipe as dp
from . import diffcore as dc
from . import evalsuite as ev
from . import model as M
from . import objectives as obj
from . import runlog
from . import trainharness as th

log = logging.getLogger("supmae")

SUBCOMMANDS = ("pretrain", "finetune", "linprobe", "eval", "partial-eval", "fewshot", "ablate", "gradcheck",
               "inspect", "plot")
EXIT = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5, "numeric": 6, "io": 7, "capability": 8, "check": 9}
_DTYPES = {"f32": np.float32, "f64": np.float64}


class CliError(Exception):
    def __init__(self, category: str, msg: str):
        super().__init__(msg)
        self.category = category


# ---------------------------------------------------------------- plumbing

def threads() -> int:
    return max(1, int(os.environ.get("SUPMAE_THREADS", "1")))


def _thread_limit():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=threads())


def load_data(cfg: C.RunConfig, dtype=np.float32) -> tuple[dp.ImageDataset, dp.ImageDataset]:
    d, m = cfg.data, cfg.model
    if not d.train_path:
        size, ch = m.img_height, m.in_chans
        if m.img_width != size:
            raise CliError("config", "the toy set is square; set img_width = img_height")
        train = dp.synthetic_shapes(d.toy_train, d.toy_seed, size, ch)
        test = dp.synthetic_shapes(d.toy_test, d.toy_seed + 10_000, size, ch)
    else:
        if not d.test_path:
            raise CliError("config", "test_path is required with train_path")
        shape = (m.img_height, m.img_width, m.in_chans)
        train = dp.load_dataset(d.train_path, d.data_format, m.num_classes, shape)
        test = dp.load_dataset(d.test_path, d.data_format, m.num_classes, shape)
    for ds in (train, test):
        if ds.images.shape[1:] != (m.img_height, m.img_width, m.in_chans):
            raise CliError("data", f"images are {ds.images.shape[1:]}, config expects "
                                   f"{(m.img_height, m.img_width, m.in_chans)}")
        ds.images = ds.images.astype(dtype)
    return train, test


def to_checkpoint(cfg: C.RunConfig, state: th.TrainState) -> ckpt.Checkpoint:
    return ckpt.Checkpoint(
        config_text=cfg.echo(),
        params=dict(state.params),
        buffers=dict(state.buffers),
        opt_step=state.opt.step,
        opt_m=dict(state.opt.m),
        opt_v=dict(state.opt.v),
        rng_state=state.rng.bit_generator.state,
        epoch=state.epoch,
    )


def from_checkpoint(ck: ckpt.Checkpoint) -> th.TrainState:
    rng = np.random.default_rng()
    if ck.rng_state is not None:
        rng.bit_generator.state = ck.rng_state
    opt = th.OptState(dict(ck.opt_m), dict(ck.opt_v), ck.opt_step or 0)
    return th.TrainState(dict(ck.params), dict(ck.buffers), opt, rng, ck.epoch)


def _config(args, mode: str) -> C.RunConfig:
    file_values = {}
    if args.config:
        p = Path(args.config)
        try:
            file_values = C.parse_lines(p.read_text().splitlines(), str(p))
        except OSError as exc:
            raise CliError("config", f"{p}: {exc.strerror}") from None
    over = C.parse_overrides(args.overrides)
    if args.seed is not None:
        over["seed"] = args.seed
    return C.build(mode, file_values, over)


def _dtype(args):
    return _DTYPES[args.precision]


# ---------------------------------------------------------------- training

def train_loop(cfg: C.RunConfig, state: th.TrainState, train: dp.ImageDataset, out: Path, save_every: int = 0,
               **epoch_kw) -> th.TrainState:
    """Run to ``cfg.train.epochs`` with per-epoch log records and checkpoints."""
    out.mkdir(parents=True, exist_ok=True)
    rl = runlog.RunLog(out, cfg.fingerprint())
    mode = cfg.mode
    if state.epoch == 0:
        rl.config(mode, cfg.echo())

    def on_epoch(st: th.TrainState, m: th.EpochMetrics):
        rl.record(mode, st.epoch - 1, st.opt.step, m.lrs[-1] if m.lrs else 0.0, m.loss,
                  float(np.mean(m.rec)) if m.rec else float("nan"),
                  float(np.mean(m.cls)) if m.cls else float("nan"),
                  m.accuracy, m.throughput)
        rl.flush()
        if save_every and st.epoch % save_every == 0 and st.epoch < cfg.train.epochs:
            ckpt.save(out / f"ckpt-epoch-{st.epoch}.smae", to_checkpoint(cfg, st))

    try:
        th.run(train, cfg.model, cfg.train, state, on_epoch=on_epoch, **epoch_kw)
    except runlog.DiskFull as exc:
        try:
            ckpt.save(out / "ckpt-final.smae", to_checkpoint(cfg, state))
        except OSError:
            pass
        raise CliError("io", str(exc)) from None
    finally:
        rl.close()
    ckpt.save(out / "ckpt-final.smae", to_checkpoint(cfg, state))
    return state


def cmd_pretrain(args) -> int:
    dtype = _dtype(args)
    if args.ckpt:
        ck = ckpt.load(args.ckpt)
        base = C.from_text(ck.config_text)
        if base.mode != "pretrain":
            raise CliError("usage", f"{args.ckpt} is a {base.mode} checkpoint; pretrain resumes only pretrain runs")
        over = {**_file_values(args), **C.parse_overrides(args.overrides)}
        cfg = C.build("pretrain", _values(base), over)
        state = from_checkpoint(ck)
    else:
        cfg = _config(args, "pretrain")
        state = th.pretrain_state(cfg.model, cfg.train, dtype)
    train, _ = load_data(cfg, dtype)
    loss_fn = th.rec_only_loss if cfg.train.lambda_cls == 0 else th.pretrain_loss
    train_loop(cfg, state, train, Path(args.out), args.save_every, loss_fn=loss_fn)
    print(f"pretrain done: epoch {state.epoch}, checkpoint {Path(args.out) / 'ckpt-final.smae'}")
    return 0


def _file_values(args) -> dict:
    if not args.config:
        return {}
    p = Path(args.config)
    return C.parse_lines(p.read_text().splitlines(), str(p))


def _values(cfg: C.RunConfig) -> dict:
    return C.parse_lines(cfg.echo().splitlines())


def _transfer(args, mode: str) -> int:
    dtype = _dtype(args)
    cfg = _config(args, mode)
    if args.ckpt:
        ck = ckpt.load(args.ckpt)
        src = C.from_text(ck.config_text)
        if src.mode != "pretrain":
            raise CliError("usage", f"{args.ckpt} is a {src.mode} checkpoint; transfer starts from pretrain")
        # the encoder geometry comes from the checkpoint; decoder and head are dropped
        cfg = C.RunConfig(src.model, cfg.train, cfg.data)
        pretrained = ck.params
        if args.subset:
            init, _ = M.init_params(src.model, cfg.train.seed, dtype)
            pretrained = {**init, **ck.params}
    else:
        pretrained, _ = M.init_params(cfg.model, cfg.train.seed, dtype)
    train, test = load_data(cfg, dtype)
    state = th.transfer_state(pretrained, cfg.model, cfg.train)
    kw = {}
    if mode == "linprobe" and cfg.train.aug() is None:
        kw["features"] = th.encoder_features(state.params, cfg.model, dp.patchify(train.images, cfg.model.patch_size).patches)
    out = Path(args.out)
    train_loop(cfg, state, train, out, args.save_every, **kw)
    rep = ev.evaluate_accuracy(state.params, state.buffers, cfg.model, test, mode, fingerprint=cfg.fingerprint())
    _emit(rep, out)
    return 0


def cmd_finetune(args) -> int:
    return _transfer(args, "finetune")


def cmd_linprobe(args) -> int:
    return _transfer(args, "linprobe")


# ---------------------------------------------------------------- evaluation

def _emit(rep: ev.EvalReport, out: Path | None, **extra) -> None:
    rec = {"kind": "eval", **rep.to_dict(), **extra}
    print(json.dumps(rec, sort_keys=True))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with runlog.LineSink(out / "eval.jsonl") as sink:
            sink.write(rec)


def _load_run(args) -> tuple[ckpt.Checkpoint, C.RunConfig]:
    if not args.ckpt:
        raise CliError("usage", "--ckpt is required")
    ck = ckpt.load(args.ckpt)
    return ck, C.from_text(ck.config_text)


def cmd_eval(args) -> int:
    ck, cfg = _load_run(args)
    _, test = load_data(cfg, next(iter(ck.params.values())).dtype)
    head = args.head or cfg.mode
    rep = ev.evaluate_accuracy(ck.params, ck.buffers, cfg.model, test, head, args.batch_size, cfg.fingerprint())
    _emit(rep, Path(args.out) if args.out else None, head=head)
    return 0


def cmd_partial_eval(args) -> int:
    ck, cfg = _load_run(args)
    _, test = load_data(cfg, next(iter(ck.params.values())).dtype)
    mean, std, reps = ev.partial_patch_sweep(ck.params, ck.buffers, cfg.model, test, args.keep,
                                             range(args.mask_seeds), fingerprint=cfg.fingerprint())
    for r in reps:
        _emit(r, Path(args.out) if args.out else None)
    print(json.dumps({"kind": "partial-eval", "keep_ratio": args.keep, "mean": mean, "std": std}))
    return 0


def cmd_fewshot(args) -> int:
    ck, cfg = _load_run(args)
    dtype = next(iter(ck.params.values())).dtype
    train, test = load_data(cfg, dtype)
    res = ev.fewshot_protocol(ck.params, cfg.model, train, test, args.shots, args.fewshot_mode,
                              seeds=range(args.fewshot_seeds), search_epochs=args.search_epochs,
                              final_epochs=args.final_epochs)
    print(json.dumps({"kind": "fewshot", "mode": res.mode, "shots": res.shots, "mean": res.mean, "std": res.std,
                      "scores": res.scores, "chosen": res.chosen, "fingerprint": cfg.fingerprint()}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args, "pretrain")
    if args.axis not in ev.ABLATION_AXES:
        raise CliError("usage", f"unknown ablation axis {args.axis!r}; expected one of {sorted(ev.ABLATION_AXES)}")
    values = None
    if args.values:
        kinds = {"cls_ratio": float, "decoder_depth": int, "mlp_layers": int}
        values = [kinds.get(args.axis, str)(v) for v in args.values.split(";")]
    train, test = load_data(cfg, _dtype(args))
    seed = cfg.train.seed
    ft_cfg = th.TrainConfig.for_mode("finetune", seed=seed, epochs=args.ft_epochs,
                                     warmup_epochs=min(1, args.ft_epochs))
    lin_cfg = th.TrainConfig.for_mode("linprobe", seed=seed, epochs=args.lin_epochs,
                                      warmup_epochs=min(3, args.lin_epochs))
    rows = ev.ablation_grid(cfg, args.axis, values, train, test, ft_cfg, lin_cfg, out_dir=args.out)
    for r in rows:
        print(f"{r.value}\t{100 * r.ft_acc:.1f}\t{100 * r.lin_acc:.1f}")
    return 0


GRADCHECK_MODEL = M.ModelConfig(img_height=16, img_width=16, in_chans=1, patch_size=4, embed_dim=32, depth=2,
                                num_heads=2, decoder_dim=16, decoder_depth=1, decoder_heads=2, head_hidden=32)


TRUNK_JITTER = 0.2


def gradcheck_run(seed: int = 0, max_entries: int | None = 48, tol: float = 1e-4, mcfg: M.ModelConfig = GRADCHECK_MODEL,
                  oracle_dtype=np.longdouble) -> dc.GradCheckReport:
    """Finite-difference check of the complete joint loss on a two-image batch."""
    params, buffers = M.init_params(mcfg, seed, np.float64)
    rng = np.random.default_rng(seed)
    # move the trunk off its near-symmetric init so attention carries sizeable
    # gradients; the head stays at init scale so two-sample batch norm is not saturated
    for k in params:
        if k not in M.FROZEN and not k.startswith("head."):
            params[k] = params[k] + TRUNK_JITTER * rng.standard_normal(params[k].shape)
    data = dp.synthetic_shapes(2, seed, mcfg.img_height, mcfg.in_chans)
    patches = dp.patchify(data.images.astype(np.float64), mcfg.patch_size).patches
    plans = [dp.plan_for(seed, i, 0, mcfg.num_patches, 0.75) for i in range(2)]
    weights = obj.LossWeights(1.0, 0.5, mcfg.tau)
    trainable = {k: v for k, v in params.items() if k not in M.FROZEN}

    def f(g, P):
        dt = P["patch_embed.w"].dtype
        P = {**P, **{k: g.leaf(k, params[k].astype(dt), requires_grad=False) for k in M.FROZEN}}
        batch = dp.make_batch(patches.astype(dt), data.labels, plans)
        joint, _, _ = th.pretrain_loss(P, {k: v.astype(dt) for k, v in buffers.items()}, mcfg, batch, weights)
        return joint

    return dc.grad_check(f, trainable, tol=tol, max_entries=max_entries, seed=seed, oracle_dtype=oracle_dtype)


def cmd_gradcheck(args) -> int:
    if args.precision != "f64":
        raise CliError("usage", "gradcheck needs --precision f64")
    rep = gradcheck_run(args.seed or 0, None if args.full else args.max_entries)
    print(rep.table())
    print(f"worst relative error {rep.worst:.3e} (tolerance {rep.tol:g}): {'PASS' if rep.passed else 'FAIL'}")
    if not rep.passed:
        raise CliError("check", "gradient check failed")
    return 0


def cmd_inspect(args) -> int:
    path = args.path or args.ckpt
    if not path:
        raise CliError("usage", "inspect needs a checkpoint path")
    ck = ckpt.load(path)
    print(f"version {ck.version}")
    print(f"epoch {ck.epoch}")
    print(f"optimizer {'step ' + str(ck.opt_step) if ck.has_optimizer else 'absent'}")
    for k, v in ck.params.items():
        print(f"param  {k}\t{v.dtype}\t{tuple(v.shape)}")
    for k, v in ck.buffers.items():
        print(f"buffer {k}\t{v.dtype}\t{tuple(v.shape)}")
    print(ck.config_text, end="")
    return 0


def cmd_plot(args) -> int:
    from .plot import write_svg

    if not args.path:
        raise CliError("usage", "plot needs a run.log path")
    target = Path(args.out) if args.out else Path(args.path).with_suffix(".svg")
    write_svg(args.path, target)
    print(target)
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "linprobe": cmd_linprobe, "eval": cmd_eval,
    "partial-eval": cmd_partial_eval, "fewshot": cmd_fewshot, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect, "plot": cmd_plot,
}


# ---------------------------------------------------------------- argv

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", help="flat key = value file")
    common.add_argument("--out", help="output directory (or file for plot)")
    common.add_argument("--ckpt", help="checkpoint to resume, transfer from or evaluate")
    common.add_argument("--precision", choices=sorted(_DTYPES), default="f32")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="supmae", description="Supervised masked autoencoder desk-scale toolkit.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("pretrain", "finetune", "linprobe", "ablate"):
            sp.add_argument("overrides", nargs="*", metavar="key=value")
            sp.add_argument("--save-every", type=int, default=0, help="also checkpoint every N epochs")
            sp.add_argument("--subset", action="store_true", help="allow loading a subset of tensors")
        if name == "eval":
            sp.add_argument("--head", choices=ev.HEADS)
            sp.add_argument("--batch-size", type=int, default=64)
        if name == "partial-eval":
            sp.add_argument("--keep", type=float, default=0.25)
            sp.add_argument("--mask-seeds", type=int, default=5)
        if name == "fewshot":
            sp.add_argument("--shots", type=int, default=5)
            sp.add_argument("--fewshot-mode", choices=("linprobe", "finetune"), default="finetune")
            sp.add_argument("--fewshot-seeds", type=int, default=3)
            sp.add_argument("--search-epochs", type=int, default=10)
            sp.add_argument("--final-epochs", type=int, default=50)
        if name == "ablate":
            sp.add_argument("--axis", required=True)
            sp.add_argument("--values", help="';'-separated values (default: the axis' standard sweep)")
            sp.add_argument("--ft-epochs", type=int, default=20)
            sp.add_argument("--lin-epochs", type=int, default=30)
        if name == "gradcheck":
            sp.set_defaults(precision="f64")
            sp.add_argument("--max-entries", type=int, default=48, help="coordinates sampled per tensor")
            sp.add_argument("--full", action="store_true", help="check every coordinate")
        if name in ("inspect", "plot"):
            sp.add_argument("path", nargs="?")
    return p


def _category(exc: BaseException) -> str | None:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, (C.ConfigError, M.ConfigError)):
        return "config"
    if isinstance(exc, ckpt.CheckpointError):
        return "checkpoint"
    if isinstance(exc, (dp.IngestError, dp.DataError, dp.GeometryError, ev.ProtocolError)):
        return "data"
    if isinstance(exc, ev.CapabilityError):
        return "capability"
    if isinstance(exc, ev.UsageError):
        return "usage"
    if isinstance(exc, (dc.NumericError, obj.TrainingAbort)):
        return "numeric"
    if isinstance(exc, th.LoadError):
        return "checkpoint"
    if isinstance(exc, OSError):
        return "io"
    return None


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] not in SUBCOMMANDS and not argv[0].startswith("-"):
        parser.print_usage(sys.stderr)
        print(f"error: usage: unknown subcommand {argv[0]!r}" if argv else "error: usage: no subcommand",
              file=sys.stderr)
        return EXIT["usage"]
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT["usage"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command in ("pretrain", "finetune", "linprobe", "ablate") and not args.out:
        print("error: usage: --out is required", file=sys.stderr)
        return EXIT["usage"]
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - mapped to one-line categories below
        cat = _category(exc)
        if cat is None:
            raise
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {cat}: {msg}", file=sys.stderr)
        return EXIT[cat]


if __name__ == "__main__":
    sys.exit(main())
