"""Command-line pipeline driver.

Subcommands: gen-data, train, detect, eval, gradcheck, ablate. Shared
flags: --config PATH, --seed U64, --threads N, --out DIR, plus repeated
--set key=value overrides (flags beat the config file). Every subcommand
is reproducible: the same config and seed give byte-identical output
files for any thread count. Errors exit nonzero with a single
machine-parseable line on stderr.
"""

import argparse
import os
import sys

from .config import load_config
from .decoding import decode_line
from .errors import CsdetectError
from .pipeline import (detect_record, f1_on_records, ordered_parallel_map,
                       score_records)
from .recovery_grad import (ALL_RULES, gradcheck_reports,
                            make_gradcheck_instance)
from .regressor import (MODES, TrainState, encode_records, init_cell_head,
                        init_model, load_checkpoint, make_labels,
                        save_checkpoint, train)
from .rng import CounterRng
from .svg import render_overlay
from .synthdata import load_dataset, make_dataset, save_dataset, split_records

import numpy as np


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _load_cfg(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    sc = cfg.synth_config()
    v = cfg.values
    records = make_dataset(sc, v["n_train"], v["n_val"], v["n_test"])
    os.makedirs(args.out, exist_ok=True)
    save_dataset(records, args.out)
    print(f"wrote {len(records)} patches to {args.out}")


def build_state(cfg, mode=None, train_records=None, sparse_codes=None):
    """TrainState from a config; out_scale=auto uses the label spread."""
    v = cfg.values
    geometry = cfg.geometry()
    D = cfg.sensing_matrix(geometry.code_len)
    if v["model"] == "cellhead":
        shape = cfg.shape()
        cell = shape.h // geometry.shape.h
        sigma = v["dog_sigma"]
        if sigma == "auto":
            sigma = v["blob_radius"] / 2.0
        nominal = (v["intensity_lo"] + v["intensity_hi"]) / 2.0 / 255.0
        model = init_cell_head(geometry, D, (shape.h, shape.w), cell, sigma,
                               blob_sigma=v["blob_radius"] / 2.0,
                               nominal_intensity=nominal,
                               hidden=v["head_hidden"], seed=cfg.model_seed())
    else:
        out_dim = v["L"] * v["m"] + 1
        out_scale = v["out_scale"]
        if out_scale == "auto":
            if train_records is None:
                out_scale = 1.0
            else:
                counts = [len(r.points) for r in train_records]
                labels = make_labels(sparse_codes, counts, D, v["beta"])
                out_scale = max(1.0, float(np.std(labels)))
        model = init_model(cfg.shape(), v["hidden"], out_dim, cfg.model_seed(),
                           out_scale=out_scale, input_pool=v["input_pool"])
    return TrainState(model=model, D=D, geometry=geometry,
                      recovery=cfg.recovery_cfg(training=True),
                      loss_cfg=cfg.loss_cfg(), mode=mode or v["mode"],
                      lista_T=v["T"], train_D=v["train_d"],
                      grad_rule=v["grad_rule"], lr=v["lr"],
                      optimizer=v["optimizer"],
                      rms_decay=v["rms_decay"], momentum=v["momentum"],
                      seed=cfg.seed)


def _train_one(cfg, records, mode, threads, checkpoint_path=None, log_path=None):
    v = cfg.values
    train_recs = split_records(records, "train")
    val_recs = split_records(records, "val")
    geometry = cfg.geometry()
    codes = encode_records(train_recs, geometry, splat=v["splat_encode"])
    state = build_state(cfg, mode=mode, train_records=train_recs, sparse_codes=codes)
    rows = ["epoch,train_loss,val_f1"]

    def on_epoch(st, entry):
        extra = {}
        if val_recs and v["val_every"] > 0 and entry["epoch"] % v["val_every"] == 0:
            rep = f1_on_records(st.model, st.D, st.geometry,
                                cfg.recovery_cfg(), cfg.decode_cfg(),
                                val_recs, cfg.rho(), threads=threads,
                                matching=v["matching"])
            extra["val_f1"] = rep.f1
        val = f"{extra['val_f1']:.4f}" if "val_f1" in extra else ""
        rows.append(f"{entry['epoch']},{entry['train_loss']:.6f},{val}")
        return extra

    history = train(state, train_recs, codes, epochs=v["epochs"],
                    batch_size=v["batch_size"], epoch_callback=on_epoch,
                    checkpoint_path=checkpoint_path)
    if log_path:
        _write_lines(log_path, rows)
    return state, history


def cmd_train(args):
    cfg = _load_cfg(args)
    records = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.bin")
    log = os.path.join(args.out, "training_log.csv")
    state, history = _train_one(cfg, records, cfg.values["mode"], args.threads,
                                checkpoint_path=ckpt, log_path=log)
    print(f"trained {state.mode} for {state.epoch} epochs; "
          f"final loss {history[-1]['train_loss']:.6f}; checkpoint {ckpt}")


def cmd_detect(args):
    cfg = _load_cfg(args)
    state = load_checkpoint(args.checkpoint)
    records = split_records(load_dataset(args.data), args.split)
    os.makedirs(args.out, exist_ok=True)
    decode_cfg = cfg.decode_cfg()
    recovery_cfg = cfg.recovery_cfg()
    want_svg = cfg.values["svg_overlays"]

    def run(rec):
        return detect_record(state.model, state.D, state.geometry, recovery_cfg,
                             decode_cfg, rec, with_candidates=want_svg)

    results = ordered_parallel_map(run, records, args.threads)
    rows = ["patch_id,x,y,support_count"]
    for rec, res in zip(records, results):
        dets = res[0] if want_svg else res
        for d in dets:
            rows.append(f"{rec.patch_id},{d.position[0]:.4f},{d.position[1]:.4f},"
                        f"{d.support_count}")
    _write_lines(os.path.join(args.out, "detections.csv"), rows)
    if want_svg:
        svg_dir = os.path.join(args.out, "overlays")
        os.makedirs(svg_dir, exist_ok=True)
        for rec, (dets, cands) in zip(records, results):
            svg = render_overlay(rec.points.shape,
                                 [tuple(p) for p in rec.points.points], cands, dets)
            with open(os.path.join(svg_dir, f"{rec.patch_id:06d}.svg"), "w",
                      encoding="utf-8", newline="\n") as fh:
                fh.write(svg)
    n_det = sum(len(res[0] if want_svg else res) for res in results)
    print(f"{n_det} detections over {len(records)} patches -> {args.out}")


def _read_detections_csv(path):
    by_patch = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "patch_id,x,y,support_count":
            raise CsdetectError(f"{path}: unexpected detections header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            pid, x, y, _sup = line.split(",")
            by_patch.setdefault(int(pid), []).append((float(x), float(y)))
    return by_patch


def cmd_eval(args):
    cfg = _load_cfg(args)
    records = split_records(load_dataset(args.data), args.split)
    dets = _read_detections_csv(args.detections)
    for pid in records:
        dets.setdefault(pid.patch_id, [])
    report = score_records(dets, records, cfg.rho(), matching=cfg.values["matching"])
    os.makedirs(args.out, exist_ok=True)
    rows = ["patch_id,tp,fp,fn"]
    for pid, tp, fp, fn in report.per_patch:
        rows.append(f"{pid},{tp},{fp},{fn}")
    rows.append(f"TOTAL,{report.tp},{report.fp},{report.fn}")
    _write_lines(os.path.join(args.out, "eval.csv"), rows)
    print(report.summary_line())


def cmd_gradcheck(args):
    cfg = _load_cfg(args)
    v = cfg.values
    fd_step = None if v["fd_step"] == "auto" else v["fd_step"]
    rng = CounterRng(cfg.seed)
    rows = ["seed,rule,max_rel_err,angle_degrees,support_size,condition,status"]
    os.makedirs(args.out, exist_ok=True)
    for i in range(v["gc_instances"]):
        inst_seed = rng.derive(i).seed
        inst = make_gradcheck_instance(inst_seed, m=v["gc_m"], n=v["gc_n"],
                                       k=v["gc_k"], lam=v["lambda"],
                                       epsilon=v["epsilon"])
        for rep in gradcheck_reports(inst, rules=ALL_RULES, fd_step=fd_step):
            status = "ok" if not rep.rejected else f"rejected: {rep.reason}"
            err = "" if np.isnan(rep.max_rel_err) else f"{rep.max_rel_err:.6e}"
            ang = "" if np.isnan(rep.angle_degrees) else f"{rep.angle_degrees:.4f}"
            rows.append(f"{inst_seed},{rep.rule},{err},{ang},{rep.support_size},"
                        f"{rep.condition:.6e},{status}")
    _write_lines(os.path.join(args.out, "gradcheck.csv"), rows)
    checked = [r for r in rows[1:] if r.endswith(",ok")]
    print(f"gradcheck: {len(checked)}/{len(rows) - 1} rule evaluations ok "
          f"-> {os.path.join(args.out, 'gradcheck.csv')}")


def cmd_ablate(args):
    cfg = _load_cfg(args)
    records = load_dataset(args.data)
    test_recs = split_records(records, "test")
    os.makedirs(args.out, exist_ok=True)
    rows = ["mode,precision,recall,f1"]
    for mode in MODES:
        state, _ = _train_one(cfg, records, mode, args.threads)
        rep = f1_on_records(state.model, state.D, state.geometry,
                            cfg.recovery_cfg(), cfg.decode_cfg(), test_recs,
                            cfg.rho(), threads=args.threads,
                            matching=cfg.values["matching"])
        rows.append(f"{mode},{rep.precision:.4f},{rep.recall:.4f},{rep.f1:.4f}")
        print(rows[-1])
    _write_lines(os.path.join(args.out, "ablate.csv"), rows)


def _parser():
    p = argparse.ArgumentParser(prog="csdetect",
                                description="compressed-sensing point detection pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", default=None, help="key = value config file")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model on a dataset")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("detect", help="run detection with a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("eval", help="score a detections CSV against ground truth")
    common(sp)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="audit recovery-layer gradient rules")
    common(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="compare cnncs/ecnncs1/ecnncs2 on one dataset")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        args.func(args)
    except CsdetectError as ex:
        msg = str(ex).replace("\n", " ")
        print(f"error: {type(ex).__name__}: {msg}", file=sys.stderr)
        return 2
    except OSError as ex:
        print(f"error: {type(ex).__name__}: {ex}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
