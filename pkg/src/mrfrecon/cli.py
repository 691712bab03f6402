"""Command-line pipeline: simulate the dictionary, build the subspace and
masks, generate datasets, train, reconstruct, and evaluate.

Every artifact is a tensor file whose header records the hash of the
configuration/inputs that produced it; chained commands verify those
hashes and refuse to run on mismatch. Exit codes: 0 ok, 2 usage/config
error; errors print one machine-parsable line "error: <code>: <detail>".
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import forward as fwd
from . import nn, proxnet
from .dictionary import (
    CompressedDictionary,
    Dictionary,
    Subspace,
    TissueGrid,
    compress,
    compute_subspace,
    make_grid,
    simulate_dictionary,
)
from .forward import AcquisitionModel, KSpaceData, TSMI, add_noise, apply_H_adjoint
from .metrics import evaluate as evaluate_maps
from .phantom import NormalizationSpec, QMaps, make_dataset
from .recon_dm import blip, build_fgm_index, dm_match, fgm_match
from .sampling import SamplingMask, build_masks, gen_spiral
from .seqsim import ParameterError, build_sequence, sequence_to_config
from .tensorfile import TensorFileError, hash_array, hash_config, read_tensor, write_tensor

DEFAULT_SEED = 1234


class CliError(RuntimeError):
    def __init__(self, code, detail):
        super().__init__(f"{code}: {detail}")
        self.code = code


# -- artifact I/O -------------------------------------------------------------


def parse_grid_spec(text):
    """'100:10:4000x20:2:600' -> ((100,10,4000), (20,2,600))."""
    try:
        part1, part2 = text.lower().split("x")
        t1 = tuple(float(v) for v in part1.split(":"))
        t2 = tuple(float(v) for v in part2.split(":"))
        assert len(t1) == 3 and len(t2) == 3
    except Exception as exc:
        raise CliError("bad-grid-spec", text) from exc
    return t1, t2


def _grid_from_header(h):
    spec = h["grid_spec"]
    return make_grid(tuple(spec["t1_spec"]), tuple(spec["t2_spec"]))


def save_dictionary(path, dic, seq, t1_spec, t2_spec):
    header = {
        "kind": "dictionary",
        "grid_spec": {"t1_spec": list(t1_spec), "t2_spec": list(t2_spec)},
        "seq": sequence_to_config(seq),
        "seq_hash": hash_config(sequence_to_config(seq)),
    }
    header["config_hash"] = hash_config(header)
    write_tensor(path, dic.atoms, header)
    return header


def load_dictionary(path):
    atoms, h = read_tensor(path, expect_header={"kind": "dictionary"})
    return Dictionary(atoms=atoms, grid=_grid_from_header(h)), h


def save_subspace(path, sub, dict_header, dict_path):
    header = {
        "kind": "subspace",
        "s": int(sub.s),
        "singular_values": [float(v) for v in sub.singular_values],
        "grid_spec": dict_header["grid_spec"],
        "seq": dict_header["seq"],
        "inputs": {"dictionary": dict_header["config_hash"]},
    }
    header["config_hash"] = hash_config(header)
    write_tensor(path, sub.V, header)
    return header


def load_subspace(path):
    V, h = read_tensor(path, expect_header={"kind": "subspace"})
    return Subspace(V=V, singular_values=np.asarray(h["singular_values"])), h


def save_cdict(path, cdict, dict_header, sub_header):
    header = {
        "kind": "cdict",
        "grid_spec": dict_header["grid_spec"],
        "inputs": {
            "dictionary": dict_header["config_hash"],
            "subspace": sub_header["config_hash"],
        },
    }
    header["config_hash"] = hash_config(header)
    write_tensor(path, cdict.atoms_c, header)
    return header


def load_cdict(path):
    atoms_c, h = read_tensor(path, expect_header={"kind": "cdict"})
    return CompressedDictionary(atoms_c=atoms_c, grid=_grid_from_header(h)), h


def save_mask(path, mask, meta):
    offsets = np.cumsum([0] + [len(f) for f in mask.frames])
    flat = np.concatenate(mask.frames).astype(np.int64)
    header = {
        "kind": "mask",
        "grid_n": mask.grid_n,
        "L": mask.L,
        "offsets": [int(o) for o in offsets],
        "m_per_frame": mask.m_per_frame,
        **meta,
    }
    header["config_hash"] = hash_config(header)
    write_tensor(path, flat, header)
    return header


def load_mask(path):
    flat, h = read_tensor(path, expect_header={"kind": "mask"})
    off = h["offsets"]
    frames = [flat[off[i] : off[i + 1]] for i in range(len(off) - 1)]
    return SamplingMask(grid_n=h["grid_n"], frames=frames), h


def save_kspace(path, y, inputs):
    offsets = np.cumsum([0] + [len(f) for f in y.frames])
    header = {
        "kind": "kspace",
        "offsets": [int(o) for o in offsets],
        "inputs": inputs,
    }
    write_tensor(path, np.concatenate(y.frames).astype(np.complex128), header)


def load_kspace(path):
    flat, h = read_tensor(path, expect_header={"kind": "kspace"})
    off = h["offsets"]
    return KSpaceData(frames=[flat[off[i] : off[i + 1]] for i in range(len(off) - 1)]), h


def save_qmaps(path, qmaps, meta=None):
    planes = np.stack(
        [qmaps.t1_ms, qmaps.t2_ms, qmaps.pd, qmaps.foreground_mask.astype(float)]
    )
    header = {"kind": "qmaps", **(meta or {})}
    write_tensor(path, planes, header)


def load_qmaps(path):
    planes, h = read_tensor(path, expect_header={"kind": "qmaps"})
    return QMaps(planes[0], planes[1], planes[2], planes[3] > 0.5), h


def _check_chain(code, **hashes):
    """hashes: name -> (have, want); mismatch refuses to run."""
    for name, (have, want) in hashes.items():
        if have is not None and want is not None and have != want:
            raise CliError("hash-mismatch", f"{code}: {name}: {have} != {want}")


# -- subcommands ---------------------------------------------------------------


def cmd_simulate_dict(args):
    t1_spec, t2_spec = parse_grid_spec(args.grid)
    seq = build_sequence(json.loads(args.seq) if args.seq else None)
    grid = make_grid(t1_spec, t2_spec)
    t0 = time.perf_counter()
    dic = simulate_dictionary(grid, seq)
    dt = time.perf_counter() - t0
    save_dictionary(args.out, dic, seq, t1_spec, t2_spec)
    print(f"dictionary: {dic.atoms.shape[0]} atoms x {dic.atoms.shape[1]} frames "
          f"in {dt:.1f}s -> {args.out}")


def cmd_build_subspace(args):
    dic, dh = load_dictionary(args.dict)
    sub = compute_subspace(dic, args.s)
    sh = save_subspace(args.out, sub, dh, args.dict)
    print(f"subspace: V {sub.V.shape} -> {args.out}")
    if args.out_compressed:
        cdict = compress(dic, sub)
        save_cdict(args.out_compressed, cdict, dh, sh)
        print(f"compressed atoms: {cdict.atoms_c.shape} -> {args.out_compressed}")


def cmd_make_masks(args):
    if args.full:
        n = args.n
        frames = [np.arange(n * n, dtype=np.int64)] * args.l
        mask = SamplingMask(grid_n=n, frames=frames)
        meta = {"full": True, "delta_deg": 0.0, "n_points": 0}
    else:
        traj = gen_spiral(args.points, args.n, final_radius=args.final_radius)
        mask = build_masks(traj, args.l, args.delta, args.n)
        meta = {
            "full": False,
            "delta_deg": args.delta,
            "n_points": args.points,
            "final_radius": args.final_radius,
        }
    save_mask(args.out, mask, meta)
    counts = mask.m_per_frame
    print(f"mask: {mask.L} frames, m per frame [{min(counts)}, {max(counts)}] -> {args.out}")


def cmd_gen_data(args):
    cfg = json.loads(Path(args.config).read_text())
    sub, sh = load_subspace(cfg["subspace"])
    mask, mh = load_mask(cfg["mask"])
    seq = build_sequence(cfg.get("seq"))
    _check_chain(
        "gen-data",
        sequence=(hash_config(sequence_to_config(seq)), sh["seq_hash"])
        if "seq_hash" in sh
        else (None, None),
    )
    model = AcquisitionModel(mask=mask, V=sub.V)
    norm = NormalizationSpec()
    train, test = make_dataset(
        model,
        seq,
        sub,
        n_subjects=cfg.get("n_subjects", 8),
        slices_per_subject=cfg.get("slices_per_subject", 16),
        augment_factor=cfg.get("augment_factor", 2),
        noise_snr_db=cfg.get("noise_snr_db", 30.0),
        seed=cfg.get("seed", args.seed),
        norm=norm,
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    inputs = {"subspace": sh["config_hash"], "mask": mh["config_hash"]}
    manifest = {"samples": [], "inputs": inputs, "config": cfg}
    for split, samples in (("train", train), ("test", test)):
        for i, smp in enumerate(samples):
            stem = f"{split}_{i:04d}"
            save_kspace(outdir / f"{stem}.y.mrft", smp.y, inputs)
            write_tensor(
                outdir / f"{stem}.x.mrft",
                smp.x_target.data.astype(np.complex128),
                {"kind": "tsmi", "inputs": inputs},
            )
            qm = norm.denormalize(smp.m_target, foreground_from_pd=False)
            save_qmaps(outdir / f"{stem}.gt.mrft", qm, {"split": split})
            manifest["samples"].append(
                {"split": split, "stem": stem, "seed": smp.seed}
            )
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    n_tr = sum(1 for s in manifest["samples"] if s["split"] == "train")
    n_te = len(manifest["samples"]) - n_tr
    print(f"dataset: {n_tr} train + {n_te} test samples -> {outdir}")


def _load_model(args):
    sub, sh = load_subspace(args.subspace)
    mask, mh = load_mask(args.mask)
    model = AcquisitionModel(mask=mask, V=sub.V)
    return model, sub, sh, mask, mh


def cmd_recon(args):
    model, sub, sh, mask, mh = _load_model(args)
    y, yh = load_kspace(args.input)
    _check_chain(
        "recon",
        subspace=(yh.get("inputs", {}).get("subspace"), sh["config_hash"]),
        mask=(yh.get("inputs", {}).get("mask"), mh["config_hash"]),
    )
    t0 = time.perf_counter()
    trace = None
    if args.algo in ("dm", "fgm", "blip"):
        cdict, ch = load_cdict(args.cdict)
        _check_chain("recon", cdict_subspace=(ch["inputs"]["subspace"], sh["config_hash"]))
        if args.algo == "dm":
            qmaps = dm_match(apply_H_adjoint(y, model), cdict)
        elif args.algo == "fgm":
            index = build_fgm_index(cdict, rng_seed=args.seed)
            qmaps = fgm_match(apply_H_adjoint(y, model), index, cdict)
        else:
            index = build_fgm_index(cdict, rng_seed=args.seed) if args.fgm else None
            qmaps, _, trace = blip(y, model, cdict, fgm_index=index)
    elif args.algo in ("pgdnet", "encoder"):
        if not args.ckpt:
            raise CliError("missing-checkpoint", f"--ckpt required for {args.algo}")
        encoder, decoder, alphas, config, norm, ckh = proxnet.load_checkpoint(args.ckpt)
        _check_chain(
            "recon",
            subspace=(ckh["hashes"].get("subspace"), sh["config_hash"]),
            mask=(ckh["hashes"].get("mask"), mh["config_hash"]),
        )
        if args.algo == "encoder" or alphas.size == 0:
            qmaps, _ = proxnet.infer_encoder_alone(encoder, y, model, norm)
        else:
            qmaps, _, _ = proxnet.infer(encoder, decoder, y, model, config, alphas, norm)
    else:  # pragma: no cover - argparse restricts choices
        raise CliError("bad-algo", args.algo)
    dt = time.perf_counter() - t0
    save_qmaps(args.out, qmaps, {"algo": args.algo, "runtime_s": dt})
    if trace is not None and args.trace:
        with open(args.trace, "w") as f:
            for entry in trace:
                f.write(json.dumps(entry) + "\n")
    print(f"recon[{args.algo}]: {dt:.2f}s -> {args.out}")


def _load_samples(datadir, split, norm):
    from .phantom import TrainSample

    datadir = Path(datadir)
    manifest = json.loads((datadir / "manifest.json").read_text())
    samples = []
    for entry in manifest["samples"]:
        if entry["split"] != split:
            continue
        stem = entry["stem"]
        y, _ = load_kspace(datadir / f"{stem}.y.mrft")
        x, _ = read_tensor(datadir / f"{stem}.x.mrft", expect_header={"kind": "tsmi"})
        qm, _ = load_qmaps(datadir / f"{stem}.gt.mrft")
        samples.append(
            TrainSample(
                y=y,
                x_target=TSMI(x),
                m_target=norm.normalize(qm),
                seed=entry["seed"],
                y_clean=None,
            )
        )
    return samples, manifest


def cmd_train(args):
    norm = NormalizationSpec()
    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.stage == "bloch":
        cdict, ch = load_cdict(args.cdict)
        decoder = proxnet.build_decoder(
            s=cdict.s, seed=cfg.get("seed", args.seed), dtype=np.float32
        )
        result = proxnet.train_bloch_decoder(
            decoder,
            cdict,
            epochs=cfg.get("epochs", 3000),
            lr=cfg.get("lr", 1e-3),
            seed=cfg.get("seed", args.seed),
            norm=norm,
        )
        encoder = proxnet.build_encoder(s=cdict.s, seed=args.seed, dtype=np.float32)
        proxnet.save_checkpoint(
            args.out,
            encoder,
            decoder,
            np.array([], dtype=np.float32),
            proxnet.PGDNetConfig(
                T=cfg.get("T", 2), epochs=cfg.get("epochs", 3000), seed=args.seed
            ),
            norm,
            hashes={"cdict": ch["config_hash"]},
        )
        print(
            f"bloch decoder: holdout nrmse {result.holdout_nrmse:.4f} -> {args.out}"
        )
        return
    model, sub, sh, mask, mh = _load_model(args)
    samples, manifest = _load_samples(args.data, "train", norm)
    _check_chain(
        "train",
        subspace=(manifest["inputs"]["subspace"], sh["config_hash"]),
        mask=(manifest["inputs"]["mask"], mh["config_hash"]),
    )
    encoder, decoder, alphas, _, _, ckh = proxnet.load_checkpoint(args.ckpt)
    config = proxnet.PGDNetConfig(
        T=cfg.get("T", 2),
        epochs=cfg.get("epochs", 100),
        batch=cfg.get("batch", 4),
        lr=cfg.get("lr", 1e-4),
        noise_snr_db=cfg.get("noise_snr_db", 30.0),
        seed=cfg.get("seed", args.seed),
    )
    hashes = {"subspace": sh["config_hash"], "mask": mh["config_hash"]}
    if args.stage == "encoder":
        result = proxnet.pretrain_encoder(encoder, samples, config, model, norm)
        out_alphas = np.array([], dtype=np.float32)
    elif args.stage == "pgdnet":
        result = proxnet.train_pgdnet(encoder, decoder, samples, config, model, norm)
        out_alphas = result.alphas
    else:  # pragma: no cover
        raise CliError("bad-stage", args.stage)
    proxnet.save_checkpoint(args.out, encoder, decoder, out_alphas, config, norm, hashes)
    print(
        f"train[{args.stage}]: {config.epochs} epochs, "
        f"final loss {result.losses[-1]:.4e}, {result.wall_time_s:.0f}s -> {args.out}"
    )


def _write_pgm(path, image):
    lo, hi = float(np.min(image)), float(np.max(image))
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = ((image - lo) * scale).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def cmd_evaluate(args):
    est, eh = load_qmaps(args.est)
    gt, gh = load_qmaps(args.gt)
    report = evaluate_maps(
        est,
        gt,
        runtime_s=eh.get("runtime_s"),
        memory_bytes=args.memory_bytes,
        config_hash=eh.get("config_hash", ""),
    )
    if args.report:
        Path(args.report).write_text(report.to_json())
    print(report.to_table())
    if args.pgm_dir:
        outdir = Path(args.pgm_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        for name in ("t1_ms", "t2_ms", "pd"):
            err = np.abs(getattr(est, name) - getattr(gt, name))
            _write_pgm(outdir / f"err_{name.replace('_ms', '')}.pgm", err)


def build_parser():
    p = argparse.ArgumentParser(prog="mrfrecon", description=__doc__)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--threads", type=int, default=2, help="cap FFT worker threads")
    sp = p.add_subparsers(dest="command", required=True)

    d = sp.add_parser("simulate-dict", help="simulate the fingerprint dictionary")
    d.add_argument("--grid", default="100:10:4000x20:2:600")
    d.add_argument("--seq", default=None, help="sequence overrides as JSON text")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_simulate_dict)

    b = sp.add_parser("build-subspace", help="rank-s subspace of a dictionary")
    b.add_argument("--dict", required=True)
    b.add_argument("--s", type=int, default=10)
    b.add_argument("--out", required=True)
    b.add_argument("--out-compressed", default=None)
    b.set_defaults(func=cmd_build_subspace)

    m = sp.add_parser("make-masks", help="spiral sampling masks")
    m.add_argument("--n", type=int, default=128)
    m.add_argument("--l", type=int, default=200)
    m.add_argument("--delta", type=float, default=7.5)
    m.add_argument("--points", type=int, default=1000)
    m.add_argument("--final-radius", type=float, default=None)
    m.add_argument("--full", action="store_true", help="fully sampled mask")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_masks)

    g = sp.add_parser("gen-data", help="synthesize a phantom dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sp.add_parser("recon", help="reconstruct quantitative maps")
    r.add_argument("--algo", choices=("dm", "fgm", "blip", "pgdnet", "encoder"), required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--mask", required=True)
    r.add_argument("--subspace", required=True)
    r.add_argument("--cdict", default=None)
    r.add_argument("--ckpt", default=None)
    r.add_argument("--fgm", action="store_true", help="use FGM inside BLIP")
    r.add_argument("--trace", default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_recon)

    t = sp.add_parser("train", help="train decoder / encoder / pgdnet")
    t.add_argument("--stage", choices=("bloch", "encoder", "pgdnet"), required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--cdict", default=None)
    t.add_argument("--data", default=None)
    t.add_argument("--mask", default=None)
    t.add_argument("--subspace", default=None)
    t.add_argument("--ckpt", default=None, help="input checkpoint (bloch output)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sp.add_parser("evaluate", help="NRMSE/SSIM/MAE report")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", default=None)
    e.add_argument("--memory-bytes", type=int, default=None)
    e.add_argument("--pgm-dir", default=None)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    fwd.set_fft_workers(args.threads)
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ParameterError, TensorFileError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
