"""Synthetic held-out sets shared by the fusion tests."""
import numpy as np

from gliofuse.synth import make_phantom, soft_prediction
from gliofuse.volume import ProbStack
from gliofuse.weighted import HeldOutCase


def tumor_phantom(rng, side=32):
    """Nested SNFH > NETC > ET tumour plus a separate RC cavity."""
    lo, hi = side // 3, side - side // 3
    c = rng.integers(lo, hi, 3)
    rc = np.where(c < side / 2, side - 5, 4)
    blobs = [
        (tuple(c), side * 0.2, "SNFH"),
        (tuple(c), side * 0.12, "NETC"),
        (tuple(c + 1), 2.5, "ET"),
        (tuple(rc), 3.5, "RC"),
    ]
    return make_phantom((side,) * 3, blobs=blobs)


def random_stack(rng, like: ProbStack) -> ProbStack:
    draw = rng.dirichlet(np.ones(like.n_classes), size=like.shape)
    return ProbStack(np.moveaxis(draw, -1, 0).astype(np.float32), spacing=like.spacing,
                     affine=like.affine, encoding=like.encoding)


def planted_heldout(rng, n_cases=4, side=32):
    """Model 0 reproduces the ground truth, model 1 is voxelwise noise."""
    cases = []
    for i in range(n_cases):
        gt = tumor_phantom(rng, side)
        good = soft_prediction(gt, confidence=0.6, noise=0.1, seed=int(rng.integers(1 << 30)))
        assert np.array_equal(good.argmax().data, gt.data)
        cases.append(HeldOutCase(f"case{i}", [good, random_stack(rng, good)], gt))
    return cases


def write_synthetic_manifest(root, seed=0, side=24, n_cases=2):
    """Two synthetic cases with T1/T1Gd, three noisy label raters and ground truth."""
    from pathlib import Path
    import json

    from gliofuse.nifti import write_nifti
    from gliofuse.synth import RaterModel, rater_seeds, simulate_labelmap_rater
    from gliofuse.volume import Volume3D

    root = Path(root)
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_cases):
        cid = f"case{i:02d}"
        d = root / cid
        d.mkdir(parents=True, exist_ok=True)
        gt = tumor_phantom(rng, side)
        write_nifti(gt, d / "seg.nii.gz")
        t1 = rng.normal(100, 5, gt.shape).astype(np.float32)
        t1gd = t1 + 40 * (gt.data == 3)
        write_nifti(Volume3D(t1), d / "t1.nii.gz")
        write_nifti(Volume3D(t1gd.astype(np.float32)), d / "t1gd.nii.gz")
        preds = {}
        for k, s in enumerate(rater_seeds(seed * 100 + i, 3)):
            lm = simulate_labelmap_rater(gt, RaterModel(0.92, 0.998, s))
            write_nifti(lm, d / f"model{k}.nii.gz")
            preds[f"model{k}"] = f"{cid}/model{k}.nii.gz"
        cases.append({"id": cid, "gt": f"{cid}/seg.nii.gz", "predictions": preds,
                      "modalities": {"T1": f"{cid}/t1.nii.gz", "T1Gd": f"{cid}/t1gd.nii.gz"}})
    path = root / "manifest.json"
    path.write_text(json.dumps({"cases": cases}, indent=2))
    return path
