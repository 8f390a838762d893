"""Command-line entry point: ``regdit <command> [options]``.

Every command writes into ``--out-dir`` using the fixed layout
``config.echo``, ``metrics.csv``, ``ckpt.bin``, ``maps/`` and ``reports/``.
The effective configuration is echoed before any work starts.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import torch

from . import fixtures
from .analysis import export_map, layer_sweep, map_filename, pca_map
from .checkpoint import Container, config_text
from .config import effective_config, echo_text, get_float, get_int, get_opt_float
from .data import SyntheticDataset, make_splits
from .diffusion import UNCONDITIONAL
from .encoder import (EncoderConfig, OutlierInjection, encoder_from_flat, encoder_to_flat,
                      inject_outliers, pretrain_toy_encoder)
from .exceptions import ConfigError, FormatError, RegditError
from .metrics import mmd
from .model import ModelConfig, RegisterConfig, capture_activations, patch_positions
from .ttr import OutlierCriterion, PatchedEncoder, recursive_ttr
from .sampling import eval_latents, sample_latents
from .training import (TrainConfig, encode_dataset, load_checkpoint, metrics_csv, resume,
                       save_checkpoint, to_checkpoint, train)

ENCODER_DEFAULTS = {
    "seed": 0, "data_seed": 0, "steps": 150, "pretrain_size": 2048, "batch_size": 32,
    "lr": 1e-3, "calib_size": 1024, "fixture": "none", "inject": "",
    **{f"encoder.{k}": v for k, v in EncoderConfig().to_dict().items()},
}

TRAIN_DEFAULTS = {
    **{k: v for k, v in TrainConfig(t_policy="logit_normal").to_dict().items()},
    "data_seed": 0, "n_train": 8192, "encoder": "",
    "mask_tau": "inf", "mask_percentile": "none",
    **{f"model.{k}": v for k, v in ModelConfig().to_dict().items()
       if not k.startswith("registers.") and k not in ("conditioning", "token_count", "token_dim")},
}
TRAIN_DEFAULTS.pop("tau")
TRAIN_DEFAULTS.pop("tau_percentile")


class CommandError(Exception):
    pass


def _prepare_out_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
        for sub in ("maps", "reports"):
            os.makedirs(os.path.join(path, sub), exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {path}: {exc.strerror or exc}") from exc
    if not os.access(path, os.W_OK):
        raise CommandError(f"output directory {path} is not writable")
    return path


def _write_text(path: str, text: str) -> None:
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _echo(out_dir: str, cfg: dict) -> None:
    _write_text(os.path.join(out_dir, "config.echo"), echo_text(cfg))


def _load_any(path: str) -> Container:
    if not os.path.exists(path):
        raise CommandError(f"checkpoint not found: {path}")
    return Container.load(path)


def _encoder_from_ckpt(path: str):
    c = _load_any(path)
    if c.config.get("kind") not in ("encoder", "denoiser"):
        raise FormatError(f"{path}: not an encoder or denoiser checkpoint")
    return encoder_from_flat(c.config, c.tensors)


# -- pretrain-encoder ------------------------------------------------------

def cmd_pretrain_encoder(args) -> int:
    overrides = {"seed": args.seed, "steps": args.steps, "fixture": args.fixture,
                 "inject": ";".join(args.inject) if args.inject else None,
                 "pretrain_size": args.pretrain_size}
    cfg = effective_config(ENCODER_DEFAULTS, args.config, overrides)
    out = _prepare_out_dir(args.out_dir)
    _echo(out, cfg)
    enc_cfg = EncoderConfig.from_dict({k[len("encoder."):]: v for k, v in cfg.items()
                                       if k.startswith("encoder.")}).validate()
    seed, data_seed = get_int(cfg, "seed"), get_int(cfg, "data_seed")
    train_split = SyntheticDataset(get_int(cfg, "pretrain_size"), seed=2 * data_seed)
    holdout = SyntheticDataset(256, seed=2 * data_seed + 1)
    losses = []
    enc = pretrain_toy_encoder(train_split.images, steps=get_int(cfg, "steps"), seed=seed,
                               cfg=enc_cfg, batch_size=get_int(cfg, "batch_size"),
                               lr=get_float(cfg, "lr"), calib_size=get_int(cfg, "calib_size"),
                               holdout=holdout.images, log=lambda s, l: losses.append((s + 1, l)))
    report = dict(enc.pretrain_report)
    fixture = str(cfg["fixture"])
    if fixture == "single":
        enc = fixtures.single_cluster(enc).encoder
    elif fixture == "two-cluster":
        enc = fixtures.two_cluster(enc).encoder
    elif fixture == "two-layer":
        enc = fixtures.two_layer(enc).encoder
    elif fixture != "none":
        raise ConfigError(f"unknown fixture {fixture!r}")
    for text in filter(None, str(cfg["inject"]).split(";")):
        enc = inject_outliers(enc, OutlierInjection.from_text(text))
    econf, tensors = encoder_to_flat(enc)
    econf.update({"kind": "encoder", "pretrain.steps": get_int(cfg, "steps"), "pretrain.seed": seed,
                  "pretrain.init_mse": float(report["init_mse"]),
                  "pretrain.final_mse": float(report["final_mse"])})
    Container(econf, tensors).save(os.path.join(out, "ckpt.bin"))
    _write_text(os.path.join(out, "metrics.csv"),
                "step,loss\n" + "".join(f"{s},{l!r}\n" for s, l in losses))
    _write_text(os.path.join(out, "reports", "pretrain.txt"), config_text(
        {"init_mse": float(report["init_mse"]), "final_mse": float(report["final_mse"]),
         "injections": ";".join(i.to_text() for i in enc.injections)}))
    return 0


# -- train -----------------------------------------------------------------

def _train_config(cfg: dict) -> TrainConfig:
    tau_text = str(cfg["mask_tau"]).strip().lower()
    # an infinite threshold keeps every token, which is the unmasked loss
    tau = None if tau_text in ("", "none", "inf", "+inf", "infinity") else get_float(cfg, "mask_tau")
    base = {k: v for k, v in cfg.items() if k in TrainConfig().to_dict()}
    tc = TrainConfig.from_dict(base)
    tc.tau = tau
    tc.tau_percentile = get_opt_float(cfg, "mask_percentile")
    return tc.validate()


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed, "steps": args.steps, "batch_size": args.batch_size, "lr": args.lr,
        "registers.count": args.registers, "registers.start_block": args.register_start,
        "conditioning": args.conditioning, "mask_tau": args.mask_tau,
        "mask_percentile": args.mask_percentile, "ema_decay": args.ema,
        "t_policy": args.t_policy, "encoder": args.encoder, "n_train": args.n_train,
        "model.depth": args.depth, "model.width": args.width, "model.heads": args.heads,
    }
    cfg = effective_config(TRAIN_DEFAULTS, args.config, overrides)
    out = _prepare_out_dir(args.out_dir)
    _echo(out, cfg)
    tcfg = _train_config(cfg)
    mcfg = ModelConfig.from_dict({k[len("model."):]: v for k, v in cfg.items()
                                  if k.startswith("model.")})
    mcfg.registers = RegisterConfig(tcfg.registers.count, tcfg.registers.start_block)
    mcfg.conditioning = tcfg.conditioning
    mcfg.validate()
    if not cfg["encoder"]:
        raise CommandError("train needs an encoder checkpoint (--encoder)")
    encoder = _encoder_from_ckpt(str(cfg["encoder"]))
    train_split, _ = make_splits(get_int(cfg, "data_seed"), n_train=get_int(cfg, "n_train"),
                                 n_eval=1)
    metrics_path = os.path.join(out, "metrics.csv")
    if args.resume:
        ck = load_checkpoint(args.resume)
        with open(metrics_path, "w", newline="\n") as fh:
            fh.write(metrics_csv([]))
            state, rows, data = resume(ck, train_split, tcfg.steps,
                                       log=lambda r: (fh.write(metrics_csv([r], header=False)), fh.flush()))
        ck2 = to_checkpoint(state, ck.train_cfg, ck.model_cfg, ck.encoder, data)
    else:
        with open(metrics_path, "w", newline="\n") as fh:
            fh.write(metrics_csv([]))
            result = train(tcfg, train_split, encoder, mcfg,
                           log=lambda r: (fh.write(metrics_csv([r], header=False)), fh.flush()))
        rows = result.rows
        ck2 = to_checkpoint(result)
    save_checkpoint(ck2, os.path.join(out, "ckpt.bin"))
    filtered = [r["filtered_fraction"] for r in rows]
    _write_text(os.path.join(out, "reports", "train_summary.txt"), config_text({
        "steps": ck2.step, "final_loss": float(rows[-1]["loss"]) if rows else float("nan"),
        "mean_filtered_fraction": float(np.mean(filtered)) if filtered else 0.0,
        "skipped_samples": ck2.skipped_samples,
        "tau": "none" if ck2.tau is None else float(ck2.tau)}))
    return 0


# -- sample ----------------------------------------------------------------

def cmd_sample(args) -> int:
    out = _prepare_out_dir(args.out_dir)
    seed = args.seed if args.seed is not None else int(os.environ.get("REGDIT_SEED", "0") or 0)
    cfg = {"ckpt": args.ckpt, "n": args.n, "steps": args.steps,
           "class_id": "cycle" if args.class_id is None else args.class_id,
           "seed": seed, "eval_n": args.eval_n, "data_seed": args.data_seed}
    _echo(out, cfg)
    if not os.path.exists(args.ckpt):
        raise CommandError(f"checkpoint not found: {args.ckpt}")
    ck = load_checkpoint(args.ckpt)
    z, classes = sample_latents(ck, args.n, args.steps, args.class_id, seed)
    tensors = {f"sample.{i}": z[i] for i in range(args.n)}
    tensors["classes"] = classes.to(torch.float32)
    Container({"kind": "latents", "n": args.n, "steps": args.steps, "seed": seed,
               "token_count": ck.model_cfg.token_count, "token_dim": ck.model_cfg.token_dim},
              tensors).save(os.path.join(out, "samples.bin"))
    ref = eval_latents(ck, args.data_seed, args.eval_n)
    value = mmd(z, ref)
    _write_text(os.path.join(out, "reports", "mmd.txt"), config_text(
        {"mmd": value, "n": args.n, "eval_n": args.eval_n, "steps": args.steps,
         "bandwidth": "median", "checkpoint_step": ck.step}))
    print(f"mmd={value!r}")
    return 0


# -- analyze ---------------------------------------------------------------

def _parse_list(text: str, kind):
    return [kind(v) for v in str(text).split(",") if v.strip()]


def cmd_analyze(args) -> int:
    out = _prepare_out_dir(args.out_dir)
    if not os.path.exists(args.ckpt):
        raise CommandError(f"checkpoint not found: {args.ckpt}")
    c = _load_any(args.ckpt)
    kind = c.config.get("kind")
    t_list = _parse_list(args.t_list, float)
    cfg = {"ckpt": args.ckpt, "input_seed": args.input_seed, "n_inputs": args.n_inputs,
           "t_list": ",".join(repr(t) for t in t_list), "source": args.source,
           "pca_pooled": args.pca_pooled}
    if kind == "denoiser" and args.source == "denoiser":
        ck = load_checkpoint(args.ckpt)
        model = ck.build_model(use_ema=True)
        depth = ck.model_cfg.depth
        layers = list(range(depth)) if args.layers == "all" else _parse_list(args.layers, int)
        cfg["layers"] = ",".join(map(str, layers))
        _echo(out, cfg)
        inputs = SyntheticDataset(args.n_inputs, seed=args.input_seed)
        z0 = encode_dataset(ck.encoder, inputs, stats=(ck.latent_mean, ck.latent_std)).latents
        gen = torch.Generator().manual_seed(args.input_seed)
        # unconditional passes, matching the PCA inputs below
        maps, report = layer_sweep(model, z0, t_list, layers, generator=gen)
        source = "denoiser"
        hidden_for_pca = _denoiser_patch_hidden(model, z0, t_list, layers, gen_seed=args.input_seed)
        side = model.side
    else:
        enc = encoder_from_flat(c.config, c.tensors)
        layers = list(range(enc.cfg.depth)) if args.layers == "all" else _parse_list(args.layers, int)
        cfg["layers"] = ",".join(map(str, layers))
        _echo(out, cfg)
        inputs = SyntheticDataset(args.n_inputs, seed=args.input_seed)
        maps, report = layer_sweep(enc, inputs.images, t_list, layers)
        source = "encoder"
        with torch.no_grad():
            hidden = enc.hidden_states(torch.as_tensor(inputs.images))
        hidden_for_pca = {(l, t): hidden[l] for t in t_list for l in layers}
        side = enc.cfg.grid
    for m in maps:
        base = os.path.join(out, "maps")
        export_map(m, os.path.join(base, map_filename(source, m.layer, m.t, "pgm")), "pgm")
        export_map(m, os.path.join(base, map_filename(source, m.layer, m.t, "csv")), "csv")
        h = hidden_for_pca[(m.layer, m.t)]
        p = pca_map(h[0], (side, side), fit_on=h if args.pca_pooled else None)
        export_map(p, os.path.join(base, map_filename(source, m.layer, m.t, "ppm")), "ppm")
    _write_text(os.path.join(out, "reports", "outlier_report.csv"), report.to_csv())
    return 0


def _denoiser_patch_hidden(model, z0, t_list, layers, gen_seed: int) -> dict:
    """Patch-position hidden states (B, N, C) of every input, keyed by (layer, t)."""
    gen = torch.Generator().manual_seed(gen_seed)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    out = {}
    for t in t_list:
        z_t = t * z0 + (1.0 - t) * eps
        B = z0.shape[0]
        trace = capture_activations(model, z_t, torch.full((B,), float(t)),
                                    torch.full((B,), UNCONDITIONAL), layers)
        for l in layers:
            out[(l, t)] = trace.hidden[l][:, patch_positions(trace.kinds[l])]
    return out


# -- ttr -------------------------------------------------------------------

def cmd_ttr(args) -> int:
    out = _prepare_out_dir(args.out_dir)
    cfg = {"encoder_ckpt": args.encoder_ckpt, "calib_seed": args.calib_seed,
           "calib_n": args.calib_n, "max_iters": args.max_iters, "factor": args.factor,
           "top_k": args.top_k}
    _echo(out, cfg)
    enc = _encoder_from_ckpt(args.encoder_ckpt)
    calib = SyntheticDataset(args.calib_n, seed=args.calib_seed)
    crit = OutlierCriterion(args.factor)
    patched, report = recursive_ttr(enc, calib.images, crit, max_iters=args.max_iters,
                                    top_k=args.top_k)
    if isinstance(patched, PatchedEncoder):
        patch_text = patched.patch.to_text()
    else:
        patch_text = "neuron_ids=\nactive_layers=none\nregister_slot=none\n" \
                     f"factor={crit.factor!r}\naccumulation=sum\n"
    patch_text += f"pass_count={report.pass_count}\nstop_reason={report.stop_reason}\n"
    _write_text(os.path.join(out, "reports", "ttr_patch.txt"), patch_text)
    _write_text(os.path.join(out, "reports", "recursion_report.txt"), report.to_text())
    print(report.to_text(), end="")
    return 0


# -- parser ----------------------------------------------------------------

def _tau_arg(text: str) -> str:
    v = text.strip().lower()
    if v in ("inf", "+inf", "infinity"):
        return "inf"
    try:
        if float(v) <= 0:
            raise ValueError
    except ValueError:
        raise argparse.ArgumentTypeError(f"--mask-tau must be positive or inf, got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regdit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("pretrain-encoder", help="pretrain and freeze the toy encoder")
    q.add_argument("--config")
    q.add_argument("--out-dir", required=True)
    q.add_argument("--seed", type=int)
    q.add_argument("--steps", type=int)
    q.add_argument("--pretrain-size", type=int)
    q.add_argument("--fixture", choices=["none", "single", "two-cluster", "two-layer"])
    q.add_argument("--inject", action="append", metavar="LAYER:C1,C2:GAIN")
    q.set_defaults(func=cmd_pretrain_encoder)

    q = sub.add_parser("train", help="train the denoiser on encoder latents")
    q.add_argument("--config")
    q.add_argument("--out-dir", required=True)
    q.add_argument("--encoder")
    q.add_argument("--seed", type=int)
    q.add_argument("--steps", type=int)
    q.add_argument("--batch-size", type=int)
    q.add_argument("--lr", type=float)
    q.add_argument("--registers", type=int)
    q.add_argument("--register-start", type=int)
    q.add_argument("--conditioning", choices=["adaln", "in_context"])
    q.add_argument("--mask-tau", type=_tau_arg)
    q.add_argument("--mask-percentile", type=float)
    q.add_argument("--ema", type=float)
    q.add_argument("--t-policy", choices=["uniform", "logit_normal"])
    q.add_argument("--n-train", type=int)
    q.add_argument("--depth", type=int)
    q.add_argument("--width", type=int)
    q.add_argument("--heads", type=int)
    q.add_argument("--resume", help="continue from this checkpoint up to --steps")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("sample", help="Euler-sample latents and report MMD to the eval split")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--n", type=int, default=16)
    q.add_argument("--steps", type=int, default=50)
    q.add_argument("--class-id", type=int, default=None)
    q.add_argument("--seed", type=int)
    q.add_argument("--eval-n", type=int, default=256)
    q.add_argument("--data-seed", type=int, default=0)
    q.set_defaults(func=cmd_sample)

    q = sub.add_parser("analyze", help="norm maps, PCA maps and per-layer outlier fractions")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--input-seed", type=int, default=1)
    q.add_argument("--n-inputs", type=int, default=8)
    q.add_argument("--t-list", default="0.1,0.5,0.9")
    q.add_argument("--layers", default="all")
    q.add_argument("--source", choices=["denoiser", "encoder"], default="denoiser")
    q.add_argument("--pca-pooled", action="store_true",
                   help="fit PCA axes on the tokens of all inputs instead of the first image")
    q.set_defaults(func=cmd_analyze)

    q = sub.add_parser("ttr", help="recursive test-time registers on an encoder checkpoint")
    q.add_argument("--encoder-ckpt", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--calib-seed", type=int, default=1)
    q.add_argument("--calib-n", type=int, default=64)
    q.add_argument("--max-iters", type=int, default=4)
    q.add_argument("--factor", type=float, default=2.0)
    q.add_argument("--top-k", type=int, default=3)
    q.set_defaults(func=cmd_ttr)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, RegditError, OSError, ValueError, KeyError, IndexError) as exc:
        print(f"regdit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
