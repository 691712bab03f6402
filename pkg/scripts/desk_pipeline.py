#!/usr/bin/env python3
"""Desk-scale end-to-end experiment: simulate, train, reconstruct, report.

Builds the decimated-dictionary pipeline at 64x64, trains the Bloch
decoder, the encoder baseline, and the unrolled network at T=2 and T=5,
runs the matching baselines, and prints a table comparing T1/T2/PD
errors. Also usable as a library (the acceptance suite calls run_desk).
"""

import argparse
import json
import sys
import time
from dataclasses import dataclass, field

import numpy as np

sys.path.insert(0, str(__import__("pathlib").Path(__file__).resolve().parent.parent / "src"))

from mrfrecon import nn, proxnet
from mrfrecon.dictionary import compress, compute_subspace, decimated_grid, simulate_dictionary
from mrfrecon.forward import AcquisitionModel, apply_H_adjoint
from mrfrecon.metrics import nrmse
from mrfrecon.phantom import NormalizationSpec, make_dataset
from mrfrecon.recon_dm import blip, build_fgm_index, dm_match, fgm_match
from mrfrecon.sampling import build_masks, gen_spiral
from mrfrecon.seqsim import build_sequence


@dataclass
class DeskConfig:
    grid_n: int = 64
    dict_decimation: int = 4
    s: int = 10
    n_subjects: int = 4  # last one is the test subject
    slices_per_subject: int = 8
    augment_factor: int = 2
    snr_db: float = 30.0
    seed: int = 1234
    decoder_epochs: int = 4000
    decoder_lr: float = 1e-3
    pretrain_epochs: int = 60
    pretrain_lr: float = 1e-3
    pgd_epochs: int = 40
    pgd_lr: float = 3e-4
    batch: int = 4
    unroll_depths: tuple = (2, 5)


@dataclass
class DeskResult:
    config: DeskConfig
    t1_nrmse: dict = field(default_factory=dict)  # algo -> value
    t2_nrmse: dict = field(default_factory=dict)
    pd_nrmse: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    wall_time_s: float = 0.0


def _eval_maps(qmaps, gt, result, algo):
    fg = gt.foreground_mask
    result.t1_nrmse.setdefault(algo, []).append(nrmse(qmaps.t1_ms, gt.t1_ms, fg))
    result.t2_nrmse.setdefault(algo, []).append(nrmse(qmaps.t2_ms, gt.t2_ms, fg))
    result.pd_nrmse.setdefault(algo, []).append(nrmse(qmaps.pd, gt.pd))


def run_desk(cfg=None, verbose=True, stages=("dm", "blip", "encoder", "pgdnet")):
    cfg = cfg or DeskConfig()
    t_start = time.perf_counter()
    log = print if verbose else (lambda *a, **k: None)
    norm = NormalizationSpec()

    seq = build_sequence()
    grid = decimated_grid(cfg.dict_decimation)
    dic = simulate_dictionary(grid, seq)
    sub = compute_subspace(dic, cfg.s)
    cdict = compress(dic, sub)
    mask = build_masks(gen_spiral(1000, cfg.grid_n), seq.L, 7.5, cfg.grid_n)
    model = AcquisitionModel(mask=mask, V=sub.V)
    log(f"[desk] dictionary {dic.atoms.shape}, mask m~{int(np.mean(mask.m_per_frame))}")

    train, test = make_dataset(
        model, seq, sub,
        n_subjects=cfg.n_subjects,
        slices_per_subject=cfg.slices_per_subject,
        augment_factor=cfg.augment_factor,
        noise_snr_db=cfg.snr_db,
        seed=cfg.seed,
        norm=norm,
    )
    log(f"[desk] dataset: {len(train)} train / {len(test)} test")
    gt_maps = [norm.denormalize(smp.m_target, foreground_from_pd=False) for smp in test]

    result = DeskResult(config=cfg)

    # dictionary-matching baselines on the back-projection
    if "dm" in stages:
        t0 = time.perf_counter()
        index = build_fgm_index(cdict, rng_seed=cfg.seed)
        for smp, gt in zip(test, gt_maps):
            backproj = apply_H_adjoint(smp.y, model)
            _eval_maps(fgm_match(backproj, index, cdict), gt, result, "fgm")
            _eval_maps(dm_match(backproj, cdict), gt, result, "dm")
        log(f"[desk] matching baselines done in {time.perf_counter()-t0:.0f}s "
            f"(T1 fgm {np.mean(result.t1_nrmse['fgm']):.3f})")

    if "blip" in stages:
        t0 = time.perf_counter()
        for smp, gt in zip(test, gt_maps):
            qm, _, trace = blip(smp.y, model, cdict)
            _eval_maps(qm, gt, result, "blip")
            result.extras.setdefault("blip_trace", []).append(
                [e["objective"] for e in trace]
            )
        log(f"[desk] blip done in {time.perf_counter()-t0:.0f}s "
            f"(T1 {np.mean(result.t1_nrmse['blip']):.3f})")

    decoder = None
    if "encoder" in stages or "pgdnet" in stages:
        t0 = time.perf_counter()
        decoder = proxnet.build_decoder(s=cfg.s, seed=cfg.seed, dtype=np.float32)
        dres = proxnet.train_bloch_decoder(
            decoder, cdict, epochs=cfg.decoder_epochs, lr=cfg.decoder_lr,
            seed=cfg.seed, norm=norm,
        )
        result.extras["decoder_holdout_nrmse"] = dres.holdout_nrmse
        result.extras["decoder_train_nrmse"] = dres.train_nrmse
        log(f"[desk] decoder trained in {time.perf_counter()-t0:.0f}s, "
            f"holdout nrmse {dres.holdout_nrmse:.4f}")

    encoder0 = None
    if "encoder" in stages:
        t0 = time.perf_counter()
        encoder0 = proxnet.build_encoder(s=cfg.s, seed=cfg.seed, dtype=np.float32)
        pre_cfg = proxnet.PGDNetConfig(
            T=1, epochs=cfg.pretrain_epochs, batch=cfg.batch, lr=cfg.pretrain_lr,
            noise_snr_db=cfg.snr_db, seed=cfg.seed,
        )
        pres = proxnet.pretrain_encoder(encoder0, train, pre_cfg, model, norm)
        result.extras["pretrain_losses"] = pres.losses
        nop = proxnet.NormalOperator(model, dtype=np.float32)
        times = []
        for smp, gt in zip(test, gt_maps):
            qm, dt = proxnet.infer_encoder_alone(encoder0, smp.y, model, norm, nop)
            times.append(dt)
            _eval_maps(qm, gt, result, "encoder")
        result.extras["encoder_infer_s"] = float(np.median(times))
        log(f"[desk] encoder pretrained in {time.perf_counter()-t0:.0f}s, "
            f"T1 {np.mean(result.t1_nrmse['encoder']):.3f}")

    if "pgdnet" in stages:
        for T in cfg.unroll_depths:
            t0 = time.perf_counter()
            encoder = proxnet.build_encoder(s=cfg.s, seed=cfg.seed, dtype=np.float32)
            if encoder0 is not None:
                encoder.set_parameters([p.copy() for p in encoder0.parameters()])
            pg_cfg = proxnet.PGDNetConfig(
                T=T, epochs=cfg.pgd_epochs, batch=cfg.batch, lr=cfg.pgd_lr,
                noise_snr_db=cfg.snr_db, seed=cfg.seed,
            )
            dec_before = [p.copy() for p in decoder.parameters()]
            tres = proxnet.train_pgdnet(encoder, decoder, train, pg_cfg, model, norm)
            frozen = all(
                np.array_equal(a, b) for a, b in zip(dec_before, decoder.parameters())
            )
            nop = proxnet.NormalOperator(model, dtype=np.float32)
            times = []
            fid_traj = []
            for smp, gt in zip(test, gt_maps):
                qm, xr, dt = proxnet.infer(
                    encoder, decoder, smp.y, model, pg_cfg, tres.alphas, norm, nop
                )
                times.append(dt)
                _eval_maps(qm, gt, result, f"pgdnet_t{T}")
                traj = proxnet.pgdnet_forward(
                    encoder, decoder, smp.y, model, pg_cfg, tres.alphas, norm, nop
                )
                fid_traj.append([e["fidelity"] for e in traj])
            result.extras[f"pgdnet_t{T}"] = {
                "losses": tres.losses,
                "alphas": tres.alphas.tolist(),
                "decoder_frozen": frozen,
                "train_s": tres.wall_time_s,
                "infer_s": float(np.median(times)),
                "fidelity_trajectories": fid_traj,
            }
            log(f"[desk] pgdnet T={T}: trained {tres.wall_time_s:.0f}s, "
                f"T1 {np.mean(result.t1_nrmse[f'pgdnet_t{T}']):.3f}, "
                f"alphas {np.round(tres.alphas, 3).tolist()}, frozen={frozen}")

    result.wall_time_s = time.perf_counter() - t_start
    return result


def summarize(result):
    lines = ["algo           T1-NRMSE  T2-NRMSE  PD-NRMSE"]
    for algo in result.t1_nrmse:
        lines.append(
            f"{algo:13s}  {np.mean(result.t1_nrmse[algo]):8.4f}"
            f"  {np.mean(result.t2_nrmse[algo]):8.4f}"
            f"  {np.mean(result.pd_nrmse[algo]):8.4f}"
        )
    lines.append(f"total wall time: {result.wall_time_s:.0f}s")
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--quick", action="store_true", help="tiny run for smoke testing")
    ap.add_argument("--json-out", default=None)
    ap.add_argument("--pgd-epochs", type=int, default=None)
    ap.add_argument("--pretrain-epochs", type=int, default=None)
    args = ap.parse_args()
    cfg = DeskConfig()
    if args.quick:
        cfg = DeskConfig(
            grid_n=32, dict_decimation=8, n_subjects=2, slices_per_subject=2,
            decoder_epochs=800, pretrain_epochs=8, pgd_epochs=4, unroll_depths=(2,),
        )
    if args.pgd_epochs is not None:
        cfg.pgd_epochs = args.pgd_epochs
    if args.pretrain_epochs is not None:
        cfg.pretrain_epochs = args.pretrain_epochs
    result = run_desk(cfg)
    print(summarize(result))
    if args.json_out:
        payload = {
            "t1_nrmse": {k: list(map(float, v)) for k, v in result.t1_nrmse.items()},
            "t2_nrmse": {k: list(map(float, v)) for k, v in result.t2_nrmse.items()},
            "pd_nrmse": {k: list(map(float, v)) for k, v in result.pd_nrmse.items()},
            "wall_time_s": result.wall_time_s,
        }
        with open(args.json_out, "w") as f:
            json.dump(payload, f, indent=2)


if __name__ == "__main__":
    main()
