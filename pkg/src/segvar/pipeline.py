"""Pipeline stages wiring the modules together over plain file artifacts.

Every stage reads its predecessor's serialized outputs from the shared
output root, so each one is independently runnable and inspectable:

    data/         synthetic 12-bit images, masks, manifest.jsonl
    processed/    windowed + CLAHE 8-bit images, mask copies, manifest
    splits/       split_plan.json, kfold_plan.json
    models/       <kind>/set<k>.bin (+ .json sidecar)
    predictions/  <kind>/<sample>/set<k>_<task>.pgm
    biasvar/      decomposition maps, expectations, summary, t-tests
    eval/         cross-validation report
    renders/      PPM figures

The whole tree is a pure function of (config, seed): reruns are
byte-identical, and --jobs only changes wall time, never bytes.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .augment import resize_eval
from .biasvar import (
    PredictionEnsemble,
    decompose_sample,
    paired_t_test,
    summarize_table,
)
from .config import ExperimentConfig, config_hash, derive_seed
from .errors import DegenerateVarianceError, MissingArtifactError
from .imgcore import (
    BinaryMask,
    GrayImage,
    RoiBox,
    ValueMap,
    load_manifest,
    load_pnm,
    save_manifest,
    save_pnm,
)
from .learner import load_net, predict_mask, save_net, train
from .metrics import crossval_evaluate
from .preprocess import apply_window, clahe, compute_window
from .render import RED, YELLOW, RenderSpec, montage, render_contours, render_map
from .splits import (
    SplitPlan,
    holdout_split,
    kfold,
    load_kfold_plan,
    load_split_plan,
    make_training_sets,
    save_kfold_plan,
    save_split_plan,
)
from .synthgen import gen_dataset


def _require(path, hint=""):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, hint)
    return path


def _provenance(cfg):
    return {"seed": cfg.seed, "config_hash": config_hash(cfg)}


def _write_json(path, cfg, payload):
    obj = dict(_provenance(cfg))
    obj.update(payload)
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def _tsv_header(cfg):
    p = _provenance(cfg)
    return f"# seed={p['seed']} config={p['config_hash']}\n"


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def run_synth(cfg: ExperimentConfig, out: Path):
    synth_cfg = dataclasses.replace(cfg.synth, seed=derive_seed(cfg.seed, "synth"))
    return gen_dataset(synth_cfg, Path(out) / "data")


def run_preprocess(cfg: ExperimentConfig, out: Path):
    out = Path(out)
    manifest = load_manifest(_require(out / "data" / "manifest.jsonl", "run synth first"))
    dst = out / "processed"
    for sub in ("images", "masks_rectum", "masks_tumor"):
        (dst / sub).mkdir(parents=True, exist_ok=True)

    by_patient = {}
    for rec in manifest.records:
        by_patient.setdefault(rec.patient, []).append(rec)

    for records in by_patient.values():
        slices = [load_pnm(manifest.resolve(r.image)) for r in records]
        window = compute_window(slices)
        for rec, img in zip(records, slices):
            eq = clahe(apply_window(img, window), cfg.clahe)
            save_pnm(eq, dst / "images" / f"{rec.id}.pgm")
            for src_field, sub in (("rectum_mask", "masks_rectum"), ("tumor_mask", "masks_tumor")):
                src = manifest.resolve(getattr(rec, src_field))
                (dst / sub / f"{rec.id}.pgm").write_bytes(Path(src).read_bytes())

    processed = dataclasses.replace(
        manifest,
        records=[
            dataclasses.replace(
                r,
                image=f"images/{r.id}.pgm",
                rectum_mask=f"masks_rectum/{r.id}.pgm",
                tumor_mask=f"masks_tumor/{r.id}.pgm",
            )
            for r in manifest.records
        ],
    )
    save_manifest(processed, dst / "manifest.jsonl")
    return load_manifest(dst / "manifest.jsonl")


def run_split(cfg: ExperimentConfig, out: Path):
    out = Path(out)
    manifest = load_manifest(
        _require(out / "processed" / "manifest.jsonl", "run preprocess first")
    )
    (out / "splits").mkdir(parents=True, exist_ok=True)
    test_ids, pool_ids = holdout_split(
        manifest,
        cfg.test_frac,
        derive_seed(cfg.seed, "holdout"),
        group_by_patient=cfg.group_by_patient,
    )
    patient_of = {r.id: r.patient for r in manifest.records} if cfg.group_by_patient else None
    training_sets = make_training_sets(
        pool_ids,
        cfg.n_training_sets,
        derive_seed(cfg.seed, "training-sets"),
        patient_of=patient_of,
    )
    plan = SplitPlan(test_ids=test_ids, training_sets=training_sets, seed=cfg.seed)
    save_split_plan(plan, out / "splits" / "split_plan.json")
    kplan = kfold(
        manifest,
        cfg.eval_kfold,
        derive_seed(cfg.seed, "kfold"),
        group_by_patient=cfg.group_by_patient,
    )
    save_kfold_plan(kplan, out / "splits" / "kfold_plan.json")
    return plan, kplan


def _train_one(args):
    (manifest_path, kind, set_idx, train_ids, train_cfg, aug_cfg, seed) = args
    manifest = load_manifest(manifest_path)
    rng = np.random.default_rng(seed)
    net = train(kind, train_ids, manifest, rng, train_cfg, aug_cfg=aug_cfg)
    return kind, set_idx, net


def run_train(cfg: ExperimentConfig, out: Path):
    out = Path(out)
    manifest_path = _require(out / "processed" / "manifest.jsonl", "run preprocess first")
    plan = load_split_plan(_require(out / "splits" / "split_plan.json", "run split first"))
    chash = config_hash(cfg)

    jobs = []
    for kind in cfg.kinds:
        (out / "models" / kind).mkdir(parents=True, exist_ok=True)
        aug = cfg.augment if kind == "mrsn-aug" else None
        for k, train_ids in enumerate(plan.training_sets):
            # one seed per training set, shared across kinds: aligned
            # initializations keep the comparison paired
            seed = derive_seed(cfg.seed, f"train/set{k}")
            jobs.append((str(manifest_path), kind, k, train_ids, cfg.train, aug, seed))

    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]

    for (kind, k, net), job in zip(results, jobs):
        save_net(
            net,
            out / "models" / kind / f"set{k}.bin",
            kind=kind,
            seed=job[6],
            config_hash=chash,
        )
    return results


def run_predict(cfg: ExperimentConfig, out: Path):
    out = Path(out)
    manifest = load_manifest(
        _require(out / "processed" / "manifest.jsonl", "run preprocess first")
    )
    plan = load_split_plan(_require(out / "splits" / "split_plan.json", "run split first"))
    for kind in cfg.biasvar_kinds:
        nets = []
        for k in range(len(plan.training_sets)):
            net, _ = load_net(_require(out / "models" / kind / f"set{k}.bin", "run train first"))
            nets.append(net)
        for sid in plan.test_ids:
            rec = manifest.by_id(sid)
            img = load_pnm(manifest.resolve(rec.image))
            img, _ = resize_eval(img, (), cfg.eval_size)
            dst = out / "predictions" / kind / sid
            dst.mkdir(parents=True, exist_ok=True)
            for k, net in enumerate(nets):
                for task in net.tasks:
                    mask = predict_mask(net, img, task, threshold=cfg.train.threshold)
                    save_pnm(mask, dst / f"set{k}_{task}.pgm")


def _load_eval_truth(manifest, rec, task, eval_size):
    field = rec.tumor_mask if task == "tumor" else rec.rectum_mask
    mask = load_pnm(manifest.resolve(field))
    img = load_pnm(manifest.resolve(rec.image))
    _, (truth,) = resize_eval(img, (mask,), eval_size)
    return truth


def _region_dict(stats):
    if stats is None:
        return None
    return {
        "e_bias": stats.e_bias,
        "e_var": stats.e_var,
        "e_loss": stats.e_loss,
        "n_pixels": stats.n_pixels,
    }


def _value_pgm(vmap):
    return GrayImage(np.floor(vmap.data * 255.0 + 0.5).astype(np.uint16), depth=8)


def run_biasvar(cfg: ExperimentConfig, out: Path):
    out = Path(out)
    manifest = load_manifest(
        _require(out / "processed" / "manifest.jsonl", "run preprocess first")
    )
    plan = load_split_plan(_require(out / "splits" / "split_plan.json", "run split first"))
    n_sets = len(plan.training_sets)
    (out / "biasvar").mkdir(parents=True, exist_ok=True)

    rows_by_kind = {}
    for kind in cfg.biasvar_kinds:
        kind_dir = out / "biasvar" / kind
        kind_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for sid in plan.test_ids:
            preds = []
            for k in range(n_sets):
                path = _require(
                    out / "predictions" / kind / sid / f"set{k}_tumor.pgm",
                    "run predict first",
                )
                preds.append(load_pnm(path))
            ensemble = PredictionEnsemble(sid, preds)
            truth = _load_eval_truth(manifest, manifest.by_id(sid), "tumor", cfg.eval_size)
            maps, row = decompose_sample(truth, ensemble)
            save_pnm(maps.main, kind_dir / f"{sid}_main.pgm")
            save_pnm(maps.bias, kind_dir / f"{sid}_bias.pgm")
            save_pnm(_value_pgm(maps.variance), kind_dir / f"{sid}_variance.pgm")
            save_pnm(_value_pgm(maps.expected_loss), kind_dir / f"{sid}_eloss.pgm")
            rows.append(row)
        rows_by_kind[kind] = rows
        _write_json(
            out / "biasvar" / f"expectations_{kind}.json",
            cfg,
            {
                "kind": kind,
                "d": n_sets,
                "rows": [
                    {
                        "sample": r.sample_id,
                        "positive": _region_dict(r.positive),
                        "total": _region_dict(r.total),
                    }
                    for r in rows
                ],
            },
        )

    summaries = {kind: summarize_table(rows) for kind, rows in rows_by_kind.items()}
    _write_summary(cfg, out, summaries)
    _write_ttests(cfg, out, rows_by_kind)
    return rows_by_kind


def _summary_dict(stats):
    if stats is None:
        return None
    return {
        "n": stats.n,
        "bias": {"mean": stats.mean_bias, "std": stats.std_bias},
        "var": {"mean": stats.mean_var, "std": stats.std_var},
        "loss": {"mean": stats.mean_loss, "std": stats.std_loss},
    }


def _write_summary(cfg, out, summaries):
    payload = {
        "std_convention": "over samples, ddof=1",
        "kinds": {
            kind: {"positive": _summary_dict(s.positive), "total": _summary_dict(s.total)}
            for kind, s in summaries.items()
        },
    }
    _write_json(out / "biasvar" / "summary.json", cfg, payload)
    lines = [_tsv_header(cfg).rstrip("\n")]
    lines.append(
        "kind\tregion\tn\tbias_mean\tbias_std\tvar_mean\tvar_std\tloss_mean\tloss_std"
    )
    for kind, s in summaries.items():
        for region, stats in (("positive", s.positive), ("total", s.total)):
            if stats is None:
                continue
            fmt = lambda v: "-" if v is None else f"{v:.6f}"
            lines.append(
                f"{kind}\t{region}\t{stats.n}\t{fmt(stats.mean_bias)}\t{fmt(stats.std_bias)}"
                f"\t{fmt(stats.mean_var)}\t{fmt(stats.std_var)}"
                f"\t{fmt(stats.mean_loss)}\t{fmt(stats.std_loss)}"
            )
    (out / "biasvar" / "summary.tsv").write_text("\n".join(lines) + "\n")


def _write_ttests(cfg, out, rows_by_kind):
    kinds = list(rows_by_kind)
    results = []
    for region in ("positive", "total"):
        for quantity in ("e_bias", "e_var", "e_loss"):
            for i in range(len(kinds)):
                for j in range(i + 1, len(kinds)):
                    a_rows = rows_by_kind[kinds[i]]
                    b_rows = rows_by_kind[kinds[j]]
                    pairs = []
                    for ra, rb in zip(a_rows, b_rows):
                        sa = getattr(ra, "positive" if region == "positive" else "total")
                        sb = getattr(rb, "positive" if region == "positive" else "total")
                        if sa is None or sb is None:
                            continue
                        pairs.append((getattr(sa, quantity), getattr(sb, quantity)))
                    entry = {
                        "region": region,
                        "quantity": quantity,
                        "kind_a": kinds[i],
                        "kind_b": kinds[j],
                        "n": len(pairs),
                    }
                    try:
                        res = paired_t_test([p[0] for p in pairs], [p[1] for p in pairs])
                        entry.update(t=res.t, df=res.df, p=res.p)
                    except (DegenerateVarianceError, ValueError) as exc:
                        entry.update(t=None, df=None, p=None, note=str(exc))
                    results.append(entry)
    _write_json(out / "biasvar" / "ttests.json", cfg, {"tests": results})
    lines = [_tsv_header(cfg).rstrip("\n"), "region\tquantity\tkind_a\tkind_b\tn\tt\tdf\tp"]
    for e in results:
        t = "-" if e["t"] is None else f"{e['t']:.6f}"
        p = "-" if e["p"] is None else f"{e['p']:.6g}"
        df = "-" if e["df"] is None else str(e["df"])
        lines.append(
            f"{e['region']}\t{e['quantity']}\t{e['kind_a']}\t{e['kind_b']}\t{e['n']}\t{t}\t{df}\t{p}"
        )
    (out / "biasvar" / "ttests.tsv").write_text("\n".join(lines) + "\n")


def run_evaluate(cfg: ExperimentConfig, out: Path):
    out = Path(out)
    manifest = load_manifest(
        _require(out / "processed" / "manifest.jsonl", "run preprocess first")
    )
    kplan = load_kfold_plan(_require(out / "splits" / "kfold_plan.json", "run split first"))
    rows, comparisons, _ = crossval_evaluate(
        manifest,
        kplan,
        cfg.kinds,
        cfg.train,
        derive_seed(cfg.seed, "evaluate"),
        eval_size=cfg.eval_size,
        aug_cfg=cfg.augment,
    )
    (out / "eval").mkdir(parents=True, exist_ok=True)
    _write_json(
        out / "eval" / "report.json",
        cfg,
        {
            "k": cfg.eval_kfold,
            "std_convention": "over samples, ddof=1",
            "rows": [dataclasses.asdict(r) for r in rows],
            "ttests": [
                {
                    "kind_a": c.kind_a,
                    "kind_b": c.kind_b,
                    "task": c.task,
                    "t": None if c.result is None else c.result.t,
                    "df": None if c.result is None else c.result.df,
                    "p": None if c.result is None else c.result.p,
                    "note": c.note,
                }
                for c in comparisons
            ],
        },
    )
    lines = [_tsv_header(cfg).rstrip("\n")]
    lines.append("kind\ttask\tn\tdsc\tdsc_std\tsens\tsens_std\tspec\tspec_std")
    for r in rows:
        lines.append(
            f"{r.kind}\t{r.task}\t{r.n}\t{r.dsc_mean:.6f}\t{r.dsc_std:.6f}"
            f"\t{r.sens_mean:.6f}\t{r.sens_std:.6f}\t{r.spec_mean:.6f}\t{r.spec_std:.6f}"
        )
    (out / "eval" / "report.tsv").write_text("\n".join(lines) + "\n")
    return rows, comparisons


def _auto_box(mask: BinaryMask, margin, width, height):
    ys, xs = np.nonzero(mask.data)
    if ys.size == 0:
        return RoiBox(0, 0, width, height)
    x0 = max(int(xs.min()) - margin, 0)
    y0 = max(int(ys.min()) - margin, 0)
    x1 = min(int(xs.max()) + margin + 1, width)
    y1 = min(int(ys.max()) + margin + 1, height)
    return RoiBox(x0, y0, x1 - x0, y1 - y0)


def run_render(cfg: ExperimentConfig, out: Path):
    out = Path(out)
    manifest = load_manifest(
        _require(out / "processed" / "manifest.jsonl", "run preprocess first")
    )
    plan = load_split_plan(_require(out / "splits" / "split_plan.json", "run split first"))
    dst = out / "renders"
    dst.mkdir(parents=True, exist_ok=True)
    n_sets = len(plan.training_sets)

    for sid in plan.test_ids[: cfg.render_samples]:
        rec = manifest.by_id(sid)
        img = load_pnm(manifest.resolve(rec.image))
        tumor = load_pnm(manifest.resolve(rec.tumor_mask))
        rectum = load_pnm(manifest.resolve(rec.rectum_mask))
        base, (tumor, rectum) = resize_eval(img, (tumor, rectum), cfg.eval_size)

        save_pnm(
            render_contours(base, [(rectum, YELLOW), (tumor, RED)]),
            dst / f"{sid}_truth.ppm",
        )
        box = _auto_box(tumor, cfg.render_margin, base.width, base.height)
        for kind in cfg.biasvar_kinds:
            cells = []
            for k in range(n_sets):
                pred = load_pnm(
                    _require(
                        out / "predictions" / kind / sid / f"set{k}_tumor.pgm",
                        "run predict first",
                    )
                )
                cells.append(
                    render_map(RenderSpec(base, pred, alpha=cfg.render_alpha))
                )
            save_pnm(montage(cells, cols=3), dst / f"{kind}_{sid}_predictions.ppm")
            for name in ("bias", "variance", "eloss"):
                vmap = load_pnm(
                    _require(
                        out / "biasvar" / kind / f"{sid}_{name}.pgm",
                        "run biasvar first",
                    )
                )
                if isinstance(vmap, BinaryMask):
                    overlay = vmap
                else:
                    overlay = ValueMap(vmap.data.astype(np.float64) / 255.0)
                save_pnm(
                    render_map(
                        RenderSpec(base, overlay, alpha=cfg.render_alpha, crop_box=box)
                    ),
                    dst / f"{kind}_{sid}_{name}.ppm",
                )


def run_pipeline(cfg: ExperimentConfig, out: Path):
    """All stages in order; each consumes the previous one's files."""
    run_synth(cfg, out)
    run_preprocess(cfg, out)
    run_split(cfg, out)
    run_train(cfg, out)
    run_predict(cfg, out)
    run_biasvar(cfg, out)
    run_evaluate(cfg, out)
    run_render(cfg, out)
