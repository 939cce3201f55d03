"""Command line entry point: ``mrharmonize {phantom,train,harmonize,eval,lme}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .imaging import ContrastKind, DatasetManifest, load_nifti, save_nifti, wm_peak_normalize

logger = logging.getLogger("mrharmonize")


def _parse_sources(text: str) -> dict[ContrastKind, Path]:
    out = {}
    for item in text.split(","):
        key, sep, path = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected contrast=path, got {item!r}")
        out[ContrastKind.parse(key)] = Path(path)
    return out


def _parse_pair(text: str) -> np.ndarray:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("expected two comma-separated numbers")
    return np.array(vals)


def _parse_grid(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


# ---------------------------------------------------------------------------
# subcommands

def cmd_phantom(args) -> int:
    from .phantom import MissingPolicy, SiteProfile, default_sites, make_dataset

    if args.sites.endswith(".json"):
        spec = json.loads(Path(args.sites).read_text())
        sites = [SiteProfile(s["site_id"], s["levels"], s.get("noise_sigma", 0.01), s.get("motion_severity", 0.0))
                 for s in spec]
    else:
        known = {s.site_id: s for s in default_sites()}
        names = [n.strip() for n in args.sites.split(",") if n.strip()]
        missing = [n for n in names if n not in known]
        if missing:
            raise SystemExit(f"unknown site(s) {missing}; built-in sites are {sorted(known)} "
                             "(or pass a JSON profile file)")
        sites = [known[n] for n in names]
    manifest = make_dataset(args.out, args.subjects, sites, MissingPolicy.parse(args.missing), args.seed,
                            n_val=args.val, n_travel=args.travel, grid=args.grid)
    print(f"wrote {len(manifest.entries)} entries to {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    from dataclasses import replace

    from .training import TrainConfig, fit

    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.steps is not None:
        config = replace(config, steps=args.steps)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    manifest = DatasetManifest.load(args.manifest)
    trainer = fit(manifest, config, args.out, resume=args.resume, force=args.force)
    print(f"trained to step {trainer.step}; checkpoint {Path(args.out) / 'model.ckpt'}")
    return 0


def cmd_harmonize(args) -> int:
    from .harmonize import Harmonizer

    harm = Harmonizer.from_checkpoint(args.checkpoint, force=args.force)
    vols = {}
    for c, path in args.sources.items():
        v = load_nifti(path, contrast=c)
        vols[c] = wm_peak_normalize(v) if args.normalize else v
    if args.target_image is not None:
        target = load_nifti(args.target_image)
        if args.normalize:
            target = wm_peak_normalize(target)
    elif args.theta is not None:
        target = (args.theta, args.eta) if args.eta is not None else args.theta
    else:
        raise SystemExit("pass --target-image or --theta")
    report: dict = {}
    out = harm.harmonize_volume(vols, target, mode=args.mode, report=report)
    save_nifti(out, args.out)
    if args.report:
        report["sources"] = {c.name: str(p) for c, p in args.sources.items()}
        Path(args.report).write_text(json.dumps(report, indent=2))
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .experiment import evaluate_pairs
    from .harmonize import Harmonizer

    harm = Harmonizer.from_checkpoint(args.checkpoint, force=args.force)
    manifest = DatasetManifest.load(args.manifest)
    rows = evaluate_pairs(harm, manifest, args.source_site, args.target_site, mode=args.mode)
    if not rows:
        raise SystemExit("no traveling subjects imaged at both sites")
    fields = ("subject", "source_site", "target_site", "contrast", "ssim", "psnr", "ssim_baseline", "psnr_baseline")
    table = [{"subject": r.subject, "source_site": r.source_site, "target_site": r.target_site,
              "contrast": r.contrast.name, "ssim": r.ssim_harmonized, "psnr": r.psnr_harmonized,
              "ssim_baseline": r.ssim_baseline, "psnr_baseline": r.psnr_baseline} for r in rows]
    for stat, fn in (("mean", np.mean), ("sd", lambda v: np.std(v, ddof=1) if len(v) > 1 else 0.0)):
        summary = {"subject": stat, "source_site": args.source_site, "target_site": args.target_site,
                   "contrast": "all"}
        for k in fields[4:]:
            summary[k] = float(fn([t[k] for t in table]))
        table.append(summary)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=fields)
        w.writeheader()
        for t in table:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in t.items()})
    finally:
        if args.out:
            out.close()
    mean = table[-2]
    print(f"SSIM {mean['ssim']:.4f} (baseline {mean['ssim_baseline']:.4f}), "
          f"PSNR {mean['psnr']:.2f} dB (baseline {mean['psnr_baseline']:.2f} dB)", file=sys.stderr)
    return 0


def cmd_lme(args) -> int:
    from .lme import compare_harmonization, fit_lme, read_observations, write_report

    before = read_observations(args.before)
    if args.after is None:
        for s, obs in sorted(before.items()):
            f = fit_lme(obs, method=args.method)
            print(f"{s}: ICC {f.icc:.4f}  sigma_e2 {f.sigma_e2:.6g} (%TBV^2)  a1 {f.a1:.6g}")
        return 0
    rows = compare_harmonization(before, read_observations(args.after), method=args.method)
    if args.out:
        write_report(rows, args.out)
    for r in rows:
        print(f"{r['structure']}: ICC {r['icc_before']:.4f} -> {r['icc_after']:.4f}  "
              f"sigma_e2 {r['sig2_before']:.6g} -> {r['sig2_after']:.6g}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrharmonize", description="Multi-contrast MR harmonization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="write a synthetic multi-site dataset")
    ph.add_argument("--sites", default="A,B", help="built-in site ids (comma separated) or a JSON profile file")
    ph.add_argument("--subjects", type=int, default=10, help="training subjects per site")
    ph.add_argument("--val", type=int, default=2, help="validation subjects per site")
    ph.add_argument("--travel", type=int, default=12, help="traveling subjects imaged at every site")
    ph.add_argument("--missing", default=None, help='contrasts absent per site, e.g. "A:FLAIR+PDw,B:PDw"')
    ph.add_argument("--grid", type=_parse_grid, default=(32, 32, 24))
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--out", required=True)
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", help="train a model on a manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--config", help="JSON training config")
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--deterministic", action="store_true", help="deterministic kernels, one thread")
    tr.add_argument("--force", action="store_true", help="resume despite a config digest mismatch")
    tr.set_defaults(func=cmd_train)

    hz = sub.add_parser("harmonize", help="harmonize co-registered source volumes")
    hz.add_argument("--sources", type=_parse_sources, required=True, help="t1=a.nii.gz,t2=b.nii.gz,...")
    hz.add_argument("--target-image")
    hz.add_argument("--theta", type=_parse_pair)
    hz.add_argument("--eta", type=_parse_pair, help="target artifact code (default: clean training mean)")
    hz.add_argument("--checkpoint", required=True)
    hz.add_argument("--mode", choices=("axial", "median3"), default="axial")
    hz.add_argument("--normalize", action="store_true", help="WM-peak normalize inputs first")
    hz.add_argument("--force", action="store_true")
    hz.add_argument("--out", required=True)
    hz.add_argument("--report", help="JSON report with per-slice attention")
    hz.set_defaults(func=cmd_harmonize)

    ev = sub.add_parser("eval", help="SSIM/PSNR on traveling subjects")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--source-site", default="A")
    ev.add_argument("--target-site", default="B")
    ev.add_argument("--mode", choices=("axial", "median3"), default="axial")
    ev.add_argument("--force", action="store_true")
    ev.add_argument("--out", help="CSV path (default stdout)")
    ev.set_defaults(func=cmd_eval)

    lm = sub.add_parser("lme", help="longitudinal ICC before/after harmonization")
    lm.add_argument("--before", required=True, help="CSV: subject_id, age, structure, volume, total_brain_volume")
    lm.add_argument("--after")
    lm.add_argument("--method", choices=("ML", "REML"), default="ML")
    lm.add_argument("--out")
    lm.set_defaults(func=cmd_lme)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
